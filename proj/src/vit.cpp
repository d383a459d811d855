#include "mimforge/vit.hpp"

#include <string>

#include "mimforge/errors.hpp"
#include "mimforge/ops.hpp"

namespace mimforge {
template <typename T>
Tensor<T> trunc_normal(Shape shape, double std, Prng& rng) {
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) {
    double z;
    do {
      z = rng.normal();
    } while (z < -2.0 || z > 2.0);
    x = static_cast<T>(z * std);
  }
  return Tensor<T>::from_vector(std::move(shape), std::move(v));
}

template Tensor<float> trunc_normal(Shape, double, Prng&);
template Tensor<double> trunc_normal(Shape, double, Prng&);

namespace {

template <typename T>
LinearParams<T> init_linear(std::int64_t in, std::int64_t out, Prng& rng) {
  return {trunc_normal<T>({in, out}, 0.02, rng), Tensor<T>::zeros({out})};
}

template <typename T>
NormParams<T> init_norm(std::int64_t width) {
  return {Tensor<T>::full({width}, T(1)), Tensor<T>::zeros({width})};
}

}  // namespace

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ArgumentError("encoder config: " + msg); };
  if (image_size <= 0 || patch_size <= 0) fail("image_size and patch_size must be positive");
  if (image_size % patch_size != 0)
    fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " + std::to_string(patch_size));
  if (depth < 0) fail("depth must be >= 0");
  if (width <= 0 || mlp_width <= 0 || heads <= 0) fail("width, mlp_width and heads must be positive");
  if (width % heads != 0) fail("width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
  if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0)) fail("drop_path_rate must lie in [0,1)");
  if (teacher_dim <= 0) fail("teacher_dim must be positive");
  if (!(norm_eps > 0.0)) fail("norm_eps must be positive");
}

EncoderConfig giant_config() {
  EncoderConfig c;
  c.image_size = 224;
  c.patch_size = 14;
  c.depth = 40;
  c.width = 1408;
  c.mlp_width = 6144;
  c.heads = 16;
  c.teacher_dim = 768;
  return c;
}

std::int64_t count_parameters(const EncoderConfig& c) {
  c.validate();
  const auto w = c.width;
  const std::int64_t embed = c.patch_dim() * w + w;
  const std::int64_t pos = c.tokens() * w;
  const std::int64_t tokens = 2 * w;
  const std::int64_t block = (w * 3 * w + 3 * w)              // qkv
                             + (w * w + w)                     // attention output
                             + (w * c.mlp_width + c.mlp_width) // fc1
                             + (c.mlp_width * w + w)           // fc2
                             + 4 * w;                          // two norms
  return embed + pos + tokens + c.depth * block + 2 * w;
}

template <typename T>
TransformerStack<T> TransformerStack<T>::init(std::int64_t depth, std::int64_t width, std::int64_t mlp_width,
                                              std::int64_t heads, double norm_eps, Prng& rng) {
  TransformerStack s;
  s.heads = heads;
  s.norm_eps = norm_eps;
  for (std::int64_t i = 0; i < depth; ++i) {
    BlockParams<T> b;
    b.norm1 = init_norm<T>(width);
    b.qkv = init_linear<T>(width, 3 * width, rng);
    b.proj = init_linear<T>(width, width, rng);
    b.norm2 = init_norm<T>(width);
    b.fc1 = init_linear<T>(width, mlp_width, rng);
    b.fc2 = init_linear<T>(mlp_width, width, rng);
    s.blocks.push_back(std::move(b));
  }
  return s;
}

template <typename T>
void TransformerStack<T>::append_named(NamedTensors<T>& out, const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor<T>*>> slots;
  const_cast<TransformerStack*>(this)->append_slots(slots, prefix);
  for (auto& [name, slot] : slots) out.push_back({name, *slot});
}

template <typename T>
void TransformerStack<T>::append_slots(std::vector<std::pair<std::string, Tensor<T>*>>& out, const std::string& prefix) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto p = prefix + "blocks." + std::to_string(i) + ".";
    auto& b = blocks[i];
    out.emplace_back(p + "norm1.weight", &b.norm1.weight);
    out.emplace_back(p + "norm1.bias", &b.norm1.bias);
    out.emplace_back(p + "attn.qkv.weight", &b.qkv.weight);
    out.emplace_back(p + "attn.qkv.bias", &b.qkv.bias);
    out.emplace_back(p + "attn.proj.weight", &b.proj.weight);
    out.emplace_back(p + "attn.proj.bias", &b.proj.bias);
    out.emplace_back(p + "norm2.weight", &b.norm2.weight);
    out.emplace_back(p + "norm2.bias", &b.norm2.bias);
    out.emplace_back(p + "mlp.fc1.weight", &b.fc1.weight);
    out.emplace_back(p + "mlp.fc1.bias", &b.fc1.bias);
    out.emplace_back(p + "mlp.fc2.weight", &b.fc2.weight);
    out.emplace_back(p + "mlp.fc2.bias", &b.fc2.bias);
  }
}

template <typename T>
Tensor<T> TransformerStack<T>::forward(Tensor<T> x, std::int64_t batch, double drop_path_rate, Prng* drop_rng,
                                       bool training) const {
  for (const auto& b : blocks) {
    auto h = ops::layernorm(x, b.norm1.weight, b.norm1.bias, norm_eps);
    auto a = ops::attention(ops::linear(h, b.qkv.weight, b.qkv.bias), batch, heads);
    a = ops::linear(a, b.proj.weight, b.proj.bias);
    x = stochastic_depth(a, x, drop_path_rate, batch, drop_rng, training);
    h = ops::layernorm(x, b.norm2.weight, b.norm2.bias, norm_eps);
    auto m = ops::linear(ops::gelu(ops::linear(h, b.fc1.weight, b.fc1.bias)), b.fc2.weight, b.fc2.bias);
    x = stochastic_depth(m, x, drop_path_rate, batch, drop_rng, training);
  }
  return x;
}

template <typename T>
EncoderState<T> EncoderState<T>::init(const EncoderConfig& config, Prng& rng) {
  config.validate();
  EncoderState s;
  s.config = config;
  const auto w = config.width;
  s.patch_embed = init_linear<T>(config.patch_dim(), w, rng);
  s.pos_embed = trunc_normal<T>({config.tokens(), w}, 0.02, rng);
  s.cls_token = trunc_normal<T>({w}, 0.02, rng);
  s.mask_token = trunc_normal<T>({w}, 0.02, rng);
  s.stack = TransformerStack<T>::init(config.depth, w, config.mlp_width, config.heads, config.norm_eps, rng);
  s.norm = init_norm<T>(w);
  return s;
}

template <typename T>
NamedTensors<T> EncoderState<T>::named_parameters() const {
  NamedTensors<T> out;
  for (auto& [name, slot] : const_cast<EncoderState*>(this)->parameter_slots()) out.push_back({name, *slot});
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> EncoderState<T>::parameter_slots() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  out.emplace_back("patch_embed.weight", &patch_embed.weight);
  out.emplace_back("patch_embed.bias", &patch_embed.bias);
  out.emplace_back("pos_embed", &pos_embed);
  out.emplace_back("cls_token", &cls_token);
  out.emplace_back("mask_token", &mask_token);
  stack.append_slots(out, "");
  out.emplace_back("norm.weight", &norm.weight);
  out.emplace_back("norm.bias", &norm.bias);
  return out;
}

template <typename T>
void EncoderState<T>::set_requires_grad(bool flag) const {
  for (auto& p : named_parameters()) {
    auto t = p.tensor;
    t.set_requires_grad(flag);
  }
}

template <typename T>
Tensor<T> stochastic_depth(const Tensor<T>& block_output, const Tensor<T>& residual, double rate, std::int64_t batch,
                           Prng* rng, bool training) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ArgumentError("stochastic depth rate must lie in [0,1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return ops::add(residual, block_output);
  if (rng == nullptr) throw ArgumentError("stochastic depth in training mode needs a random stream");
  const auto rows = block_output.rows();
  if (batch <= 0 || rows % batch != 0) throw ShapeError("stochastic depth: rows not divisible by batch");
  const auto per = rows / batch;
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> factors(static_cast<std::size_t>(rows));
  for (std::int64_t b = 0; b < batch; ++b) {
    const T f = rng->uniform() < rate ? T(0) : keep;
    std::fill_n(factors.begin() + b * per, per, f);
  }
  return ops::add(residual, ops::scale_rows(block_output, std::span<const T>(factors)));
}

template <typename T>
Tensor<T> encoder_forward(const EncoderState<T>& state, const Tensor<T>& images, std::span<const MaskSet> masks,
                          const ForwardOptions& options) {
  const auto& c = state.config;
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != c.image_size || images.dim(3) != c.image_size)
    throw ShapeError("encoder_forward: images " + shape_str(images.shape()) + " do not match [B,3," +
                     std::to_string(c.image_size) + "," + std::to_string(c.image_size) + "]");
  const auto batch = images.dim(0);
  const auto grid = c.grid();
  if (!masks.empty() && static_cast<std::int64_t>(masks.size()) != batch)
    throw ArgumentError("encoder_forward: " + std::to_string(masks.size()) + " masks for batch of " + std::to_string(batch));

  auto tokens = ops::linear(ops::patchify(images, c.patch_size), state.patch_embed.weight, state.patch_embed.bias);

  bool any_masked = false;
  std::vector<std::uint8_t> flags;
  if (!masks.empty()) {
    flags.assign(static_cast<std::size_t>(batch * grid), 0);
    for (std::int64_t b = 0; b < batch; ++b) {
      const auto& m = masks[static_cast<std::size_t>(b)];
      if (m.grid_h * m.grid_w != grid && !m.empty())
        throw ArgumentError("encoder_forward: mask grid " + std::to_string(m.grid_h) + "x" + std::to_string(m.grid_w) +
                            " does not match encoder grid of " + std::to_string(grid));
      for (auto idx : m.indices) {
        if (idx < 0 || idx >= grid)
          throw ArgumentError("encoder_forward: mask index " + std::to_string(idx) + " outside grid of " + std::to_string(grid));
        flags[static_cast<std::size_t>(b * grid + idx)] = 1;
        any_masked = true;
      }
    }
  }
  if (any_masked) tokens = ops::replace_rows(tokens, std::span<const std::uint8_t>(flags), state.mask_token);

  auto x = ops::add_tiled(ops::prepend_token(tokens, state.cls_token, batch), state.pos_embed);
  x = state.stack.forward(x, batch, c.drop_path_rate, options.drop_rng, options.training);
  x = ops::layernorm(x, state.norm.weight, state.norm.bias, c.norm_eps);
  return ops::reshape(x, {batch, c.tokens(), c.width});
}

template struct TransformerStack<float>;
template struct TransformerStack<double>;
template struct EncoderState<float>;
template struct EncoderState<double>;

template Tensor<float> encoder_forward(const EncoderState<float>&, const Tensor<float>&, std::span<const MaskSet>,
                                       const ForwardOptions&);
template Tensor<double> encoder_forward(const EncoderState<double>&, const Tensor<double>&, std::span<const MaskSet>,
                                        const ForwardOptions&);
template Tensor<float> stochastic_depth(const Tensor<float>&, const Tensor<float>&, double, std::int64_t, Prng*, bool);
template Tensor<double> stochastic_depth(const Tensor<double>&, const Tensor<double>&, double, std::int64_t, Prng*, bool);

}  // namespace mimforge

#include "mimforge/clip.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "mimforge/errors.hpp"
#include "mimforge/ops.hpp"

namespace mimforge {

namespace {
constexpr std::int64_t kClassTokenBase = 16;
}

void ClipConfig::validate() const {
  vision.validate();
  auto fail = [](const std::string& msg) { throw ArgumentError("clip config: " + msg); };
  if (embed_dim <= 0) fail("embed_dim must be positive");
  if (vocab <= kClassTokenBase) fail("vocab must exceed " + std::to_string(kClassTokenBase));
  if (context < 2 || context > kClassTokenBase) fail("context must lie in [2, 16]");
  if (text_width <= 0 || text_depth <= 0 || text_heads <= 0 || text_mlp <= 0) fail("text tower extents must be positive");
  if (text_width % text_heads != 0) fail("text_width must be divisible by text_heads");
  if (!(init_temperature >= kMinTemperature && init_temperature <= kMaxTemperature))
    fail("init_temperature must lie in [0.01, 100]");
}

std::vector<std::int64_t> class_caption(std::int64_t label, std::int64_t context) {
  if (label < 0) throw ArgumentError("class_caption: negative label");
  if (context < 2 || context > kClassTokenBase) throw ArgumentError("class_caption: context must lie in [2, 16]");
  std::vector<std::int64_t> out(static_cast<std::size_t>(context));
  std::iota(out.begin(), out.end() - 1, 1);
  out.back() = kClassTokenBase + label;
  return out;
}

std::int64_t max_caption_classes(std::int64_t vocab) { return std::max<std::int64_t>(0, vocab - kClassTokenBase); }

template <typename T>
ClipState<T> ClipState<T>::init(const ClipConfig& config, Prng& rng) {
  config.validate();
  ClipState s;
  s.config = config;
  Prng vr = rng.split("vision");
  Prng pr = rng.split("projections");
  Prng tr = rng.split("text");
  s.vision = EncoderState<T>::init(config.vision, vr);
  s.vision_proj = trunc_normal<T>({config.vision.width, config.embed_dim}, 0.02, pr);
  s.text_proj = trunc_normal<T>({config.text_width, config.embed_dim}, 0.02, pr);
  s.token_embed = trunc_normal<T>({config.vocab, config.text_width}, 0.02, tr);
  s.text_pos = trunc_normal<T>({config.context, config.text_width}, 0.02, tr);
  s.text = TransformerStack<T>::init(config.text_depth, config.text_width, config.text_mlp, config.text_heads,
                                     config.vision.norm_eps, tr);
  s.text_norm = {Tensor<T>::full({config.text_width}, T(1)), Tensor<T>::zeros({config.text_width})};
  s.log_temp = Tensor<T>::from_vector({1}, {static_cast<T>(std::log(config.init_temperature))});
  return s;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ClipState<T>::parameter_slots() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  for (auto& [name, slot] : vision.parameter_slots()) out.emplace_back("vision." + name, slot);
  out.emplace_back("vision_proj.weight", &vision_proj);
  out.emplace_back("text.token_embed", &token_embed);
  out.emplace_back("text.pos_embed", &text_pos);
  text.append_slots(out, "text.");
  out.emplace_back("text.norm.weight", &text_norm.weight);
  out.emplace_back("text.norm.bias", &text_norm.bias);
  out.emplace_back("text_proj.weight", &text_proj);
  out.emplace_back("log_temp", &log_temp);
  return out;
}

template <typename T>
NamedTensors<T> ClipState<T>::named_parameters() const {
  NamedTensors<T> out;
  for (auto& [name, slot] : const_cast<ClipState*>(this)->parameter_slots()) out.push_back({name, *slot});
  return out;
}

template <typename T>
double ClipState<T>::temperature() const {
  return std::exp(static_cast<double>(log_temp.data()[0]));
}

template <typename T>
void ClipState<T>::clamp_temperature() {
  auto v = log_temp.mutable_data();
  const T lo = static_cast<T>(std::log(kMinTemperature)), hi = static_cast<T>(std::log(kMaxTemperature));
  v[0] = std::clamp(v[0], lo, hi);
  // Rounding of the bounds must not let exp() escape the interval.
  while (std::exp(static_cast<double>(v[0])) < kMinTemperature) v[0] = std::nextafter(v[0], hi);
  while (std::exp(static_cast<double>(v[0])) > kMaxTemperature) v[0] = std::nextafter(v[0], lo);
}

template <typename T>
Tensor<T> ClipState<T>::encode_images(const Tensor<T>& images, const ForwardOptions& options) const {
  const auto out = encoder_forward(vision, images, {}, options);
  const auto batch = out.dim(0);
  auto flat = ops::reshape(out, {batch * out.dim(1), out.dim(2)});
  return ops::matmul(ops::mean_pool(flat, batch, 1), vision_proj);
}

template <typename T>
Tensor<T> ClipState<T>::encode_text(std::span<const std::int64_t> tokens, std::int64_t batch,
                                    const ForwardOptions& options) const {
  if (batch <= 0 || static_cast<std::int64_t>(tokens.size()) != batch * config.context)
    throw ShapeError("encode_text: " + std::to_string(tokens.size()) + " tokens for batch " + std::to_string(batch) +
                     " of context " + std::to_string(config.context));
  for (auto t : tokens)
    if (t < 0 || t >= config.vocab)
      throw ArgumentError("encode_text: token " + std::to_string(t) + " outside vocabulary of " + std::to_string(config.vocab));
  auto x = ops::add_tiled(ops::embedding_lookup(token_embed, tokens), text_pos);
  x = text.forward(x, batch, 0.0, nullptr, options.training);
  x = ops::layernorm(x, text_norm.weight, text_norm.bias, config.vision.norm_eps);
  return ops::matmul(ops::mean_pool(x, batch, 0), text_proj);
}

ClipInit init_from_mim(const Checkpoint& checkpoint, const ClipConfig& config, Prng& rng) {
  ClipInit result{ClipState<float>::init(config, rng), {}};
  auto slots = result.state.vision.parameter_slots();
  // A CLIP checkpoint keeps its encoder under "vision.", a MIM one at top level.
  const std::string prefix = checkpoint.find("vision.patch_embed.weight") ? "vision." : "";
  std::map<std::string, Tensor<float>*> expected;
  for (auto& [name, slot] : slots) expected[prefix + name] = slot;

  for (const auto& t : checkpoint.tensors) {
    const bool encoder_entry =
        prefix.empty() ? !(t.name.starts_with("head.") || t.name.starts_with("opt.")) : t.name.starts_with(prefix);
    if (!encoder_entry) {
      result.report.ignored.push_back(t.name);
      continue;
    }
    if (!expected.count(t.name))
      throw ArgumentError("init_from_mim: checkpoint tensor '" + t.name +
                          "' has no counterpart in the vision encoder (depth or layout mismatch)");
  }
  std::vector<std::pair<Tensor<float>*, const StoredTensor*>> copies;
  for (auto& [name, slot] : slots) {
    const auto* src = checkpoint.find(prefix + name);
    if (!src) throw ArgumentError("init_from_mim: checkpoint lacks encoder tensor '" + prefix + name + "'");
    if (src->shape != slot->shape())
      throw ShapeError("init_from_mim: tensor '" + prefix + name + "' has shape " + shape_str(src->shape) +
                       " in the checkpoint but " + shape_str(slot->shape()) + " in the vision encoder");
    copies.emplace_back(slot, src);
  }
  for (auto& [slot, src] : copies) *slot = src->to_tensor<float>();
  for (auto& [name, slot] : slots) result.report.matched.push_back("vision." + name);
  for (const auto& p : result.state.named_parameters())
    if (!p.name.starts_with("vision.")) result.report.fresh.push_back(p.name);
  return result;
}

template <typename T>
Tensor<T> infonce_log_temp(const Tensor<T>& image_emb, const Tensor<T>& text_emb, const Tensor<T>& log_temp) {
  if (image_emb.rank() != 2 || image_emb.shape() != text_emb.shape())
    throw ShapeError("infonce: embeddings " + shape_str(image_emb.shape()) + " and " + shape_str(text_emb.shape()) +
                     " must both be [batch, dim]");
  const auto batch = image_emb.dim(0);
  if (batch < 2) throw ArgumentError("infonce: batch must be at least 2, got " + std::to_string(batch));
  if (log_temp.numel() != 1) throw ShapeError("infonce: log temperature must hold one value");
  auto a = ops::l2_normalize_lastdim(image_emb);
  auto b = ops::l2_normalize_lastdim(text_emb);
  auto logits = ops::scale_by(ops::matmul(a, ops::transpose2d(b)), ops::exp(ops::scale(log_temp, -1.0)));
  std::vector<std::int64_t> diag(static_cast<std::size_t>(batch));
  std::iota(diag.begin(), diag.end(), 0);
  const std::span<const std::int64_t> labels(diag);
  return ops::scale(ops::add(ops::cross_entropy(logits, labels), ops::cross_entropy(ops::transpose2d(logits), labels)),
                    0.5);
}

template <typename T>
Tensor<T> infonce(const Tensor<T>& image_emb, const Tensor<T>& text_emb, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature))
    throw ArgumentError("infonce: temperature must be positive and finite");
  return infonce_log_temp(image_emb, text_emb, Tensor<T>::from_vector({1}, {static_cast<T>(std::log(temperature))}));
}

template <typename T>
std::vector<std::int64_t> zero_shot_from_embeddings(const Tensor<T>& image_emb, const Tensor<T>& class_emb) {
  if (class_emb.rank() != 2 || class_emb.dim(0) == 0) throw ArgumentError("zero-shot: empty class set");
  if (image_emb.rank() != 2 || image_emb.cols() != class_emb.cols())
    throw ShapeError("zero-shot: image embeddings " + shape_str(image_emb.shape()) + " vs class embeddings " +
                     shape_str(class_emb.shape()));
  const auto n = image_emb.dim(0), k = class_emb.dim(0), d = class_emb.cols();
  auto unit = [d](std::span<const T> v, std::int64_t rows) {
    std::vector<double> out(v.begin(), v.end());
    for (std::int64_t r = 0; r < rows; ++r) {
      double ss = 0.0;
      for (std::int64_t c = 0; c < d; ++c) ss += out[r * d + c] * out[r * d + c];
      const double inv = ss > 0.0 ? 1.0 / std::sqrt(ss) : 0.0;
      for (std::int64_t c = 0; c < d; ++c) out[r * d + c] *= inv;
    }
    return out;
  };
  const auto img = unit(image_emb.data(), n), cls = unit(class_emb.data(), k);
  std::vector<std::int64_t> labels(static_cast<std::size_t>(n), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::int64_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::int64_t j = 0; j < d; ++j) s += img[i * d + j] * cls[c * d + j];
      if (s > best) {
        best = s;
        labels[i] = c;
      }
    }
  }
  return labels;
}

std::vector<std::int64_t> zero_shot_classify(const ClipState<float>& clip, const TensorF& images,
                                             const std::vector<std::vector<std::int64_t>>& class_token_sets) {
  if (class_token_sets.empty()) throw ArgumentError("zero-shot: empty class set");
  std::vector<std::int64_t> tokens;
  for (const auto& caption : class_token_sets) {
    if (static_cast<std::int64_t>(caption.size()) != clip.config.context)
      throw ArgumentError("zero-shot: caption of " + std::to_string(caption.size()) + " tokens, expected " +
                          std::to_string(clip.config.context));
    tokens.insert(tokens.end(), caption.begin(), caption.end());
  }
  NoGradGuard no_grad;
  const auto text = clip.encode_text(tokens, static_cast<std::int64_t>(class_token_sets.size()));
  const auto img = clip.encode_images(images);
  return zero_shot_from_embeddings(img, text);
}

ClipTrainer::ClipTrainer(ClipState<float> state, ClipTrainOptions options, std::shared_ptr<const Dataset> data)
    : state_(std::move(state)), options_(std::move(options)), data_(std::move(data)) {
  options_.optim.validate();
  if (!data_ || data_->size() == 0) throw ArgumentError("clip trainer needs a non-empty dataset");
  if (data_->image_size != state_.config.vision.image_size)
    throw ArgumentError("dataset image size does not match the vision tower");
  if (data_->class_count > max_caption_classes(state_.config.vocab))
    throw ArgumentError("class count " + std::to_string(data_->class_count) + " exceeds caption vocabulary capacity " +
                        std::to_string(max_caption_classes(state_.config.vocab)));
  if (options_.batch_size < 2 || options_.batch_size > data_->size())
    throw ArgumentError("clip batch size must lie in [2, dataset size]");
  auto params = state_.named_parameters();
  for (auto& p : params) p.tensor.set_requires_grad(true);
  optimizer_ = std::make_unique<AdamW<float>>(
      build_param_groups(params, state_.config.vision.depth, options_.optim.layer_decay), options_.optim);
}

ClipStepReport ClipTrainer::step() {
  const auto k = steps_done();
  const auto B = options_.batch_size;
  const auto spe = data_->size() / B;
  const auto perm = epoch_permutation(data_->size(), options_.seed, k / spe);
  const std::vector<std::int64_t> idx(perm.begin() + (k % spe) * B, perm.begin() + (k % spe + 1) * B);
  Prng aug = Prng(options_.seed, fnv1a64("clip-augment")).split(static_cast<std::uint64_t>(k));
  const auto images = make_batch(*data_, idx, options_.augment, options_.crop, aug);
  std::vector<std::int64_t> tokens;
  for (auto i : idx) {
    const auto cap = class_caption(data_->records[static_cast<std::size_t>(i)].label, state_.config.context);
    tokens.insert(tokens.end(), cap.begin(), cap.end());
  }
  Prng drop = Prng(options_.seed, fnv1a64("clip-drop-path")).split(static_cast<std::uint64_t>(k));
  const ForwardOptions fwd{true, &drop};

  optimizer_->zero_grad();
  auto loss = infonce_log_temp(state_.encode_images(images, fwd), state_.encode_text(tokens, B, fwd), state_.log_temp);
  const double value = loss.item();
  if (!std::isfinite(value)) throw NumericAbort("non-finite contrastive loss at step " + std::to_string(k));
  loss.backward();
  const double lr = cosine_lr(k, options_.optim);
  optimizer_->step(lr);
  state_.clamp_temperature();
  return {k, value, state_.temperature(), lr};
}

template struct ClipState<float>;
template struct ClipState<double>;
template Tensor<float> infonce(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> infonce(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> infonce_log_temp(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&);
template Tensor<double> infonce_log_temp(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);
template std::vector<std::int64_t> zero_shot_from_embeddings(const Tensor<float>&, const Tensor<float>&);
template std::vector<std::int64_t> zero_shot_from_embeddings(const Tensor<double>&, const Tensor<double>&);

}  // namespace mimforge

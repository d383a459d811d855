#include "mimforge/optim.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "mimforge/errors.hpp"

namespace mimforge {

void OptimConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ArgumentError("optimizer config: " + msg); };
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) fail("betas must lie in (0,1)");
  if (!(eps > 0)) fail("eps must be positive");
  if (!(peak_lr >= 0) || !(min_lr >= 0)) fail("learning rates must be non-negative");
  if (min_lr > peak_lr) fail("min_lr exceeds peak_lr");
  if (!(weight_decay >= 0)) fail("weight_decay must be non-negative");
  if (warmup_steps < 0 || total_steps < 0 || warmup_steps > total_steps) fail("need 0 <= warmup_steps <= total_steps");
  if (!(layer_decay > 0 && layer_decay <= 1)) fail("layer_decay must lie in (0,1]");
}

double cosine_lr(std::int64_t step, const OptimConfig& c) {
  if (step < 0) throw ArgumentError("cosine_lr: negative step");
  if (step >= c.total_steps) return step == c.total_steps && c.total_steps == c.warmup_steps ? c.peak_lr : c.min_lr;
  if (step < c.warmup_steps) return c.peak_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  const double tau = static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps);
  return c.min_lr + (c.peak_lr - c.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * tau));
}

double layer_scale(std::int64_t layer_index, std::int64_t depth, double decay) {
  if (!(decay > 0 && decay <= 1)) throw ArgumentError("layer_scale: decay must lie in (0,1]");
  if (layer_index < 0 || layer_index > depth + 1)
    throw ArgumentError("layer_scale: layer index " + std::to_string(layer_index) + " outside [0," + std::to_string(depth + 1) + "]");
  return std::pow(decay, static_cast<double>(depth + 1 - layer_index));
}

ParamPlacement place_parameter(const std::string& full_name, const Shape& shape, std::int64_t depth) {
  std::string name = full_name;
  if (name.rfind("vision.", 0) == 0) name = name.substr(7);
  ParamPlacement p;
  p.layer_index = depth + 1;
  if (name.rfind("patch_embed.", 0) == 0 || name == "pos_embed" || name == "cls_token" || name == "mask_token") {
    p.layer_index = 0;
  } else if (name.rfind("blocks.", 0) == 0 && full_name.rfind("text.", 0) != 0) {
    const auto dot = name.find('.', 7);
    p.layer_index = std::stoll(name.substr(7, dot - 7)) + 1;
  }
  const bool is_table = name.ends_with("pos_embed") || name.ends_with("cls_token") || name.ends_with("mask_token") ||
                        name.ends_with("token_embed");
  p.wd_exempt = shape.size() <= 1 || is_table;
  return p;
}

template <typename T>
std::vector<ParamGroup<T>> build_param_groups(const NamedTensors<T>& params, std::int64_t depth, double layer_decay) {
  std::map<std::pair<std::int64_t, bool>, ParamGroup<T>> by_key;
  for (const auto& p : params) {
    const auto place = place_parameter(p.name, p.tensor.shape(), depth);
    auto& g = by_key[{place.layer_index, place.wd_exempt}];
    g.layer_index = place.layer_index;
    g.wd_exempt = place.wd_exempt;
    g.lr_scale = layer_scale(place.layer_index, depth, layer_decay);
    g.tensors.push_back(p);
  }
  std::vector<ParamGroup<T>> out;
  for (auto& [key, g] : by_key) out.push_back(std::move(g));
  return out;
}

template <typename T>
void adamw_step(const ParamGroup<T>& group, std::vector<Moments<T>>& moments, std::int64_t t, double lr,
                const OptimConfig& c) {
  if (t < 1) throw ArgumentError("adamw_step: step must be >= 1");
  if (moments.size() != group.tensors.size()) throw ArgumentError("adamw_step: moment count mismatch");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  const double rate = lr * group.lr_scale;
  const double decay = group.wd_exempt ? 0.0 : rate * c.weight_decay;
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  for (std::size_t i = 0; i < group.tensors.size(); ++i) {
    auto tensor = group.tensors[i].tensor;
    if (!tensor.has_grad()) continue;
    auto g = tensor.grad();
    for (T v : g)
      if (!std::isfinite(v)) throw NumericAbort("non-finite gradient in " + group.tensors[i].name);
    auto p = tensor.mutable_data();
    auto& mo = moments[i];
    if (mo.m.size() != p.size()) {
      mo.m.assign(p.size(), T(0));
      mo.v.assign(p.size(), T(0));
    }
    for (std::size_t k = 0; k < p.size(); ++k) {
      mo.m[k] = b1 * mo.m[k] + (T(1) - b1) * g[k];
      mo.v[k] = b2 * mo.v[k] + (T(1) - b2) * g[k] * g[k];
      const double mhat = static_cast<double>(mo.m[k]) / bc1;
      const double vhat = static_cast<double>(mo.v[k]) / bc2;
      double updated = static_cast<double>(p[k]) - rate * mhat / (std::sqrt(vhat) + c.eps);
      updated -= decay * updated;
      p[k] = static_cast<T>(updated);
    }
  }
}

template <typename T>
AdamW<T>::AdamW(std::vector<ParamGroup<T>> groups, OptimConfig config)
    : groups_(std::move(groups)), config_(config) {
  config_.validate();
  for (const auto& g : groups_) {
    std::vector<Moments<T>> ms(g.tensors.size());
    for (std::size_t i = 0; i < g.tensors.size(); ++i) {
      ms[i].m.assign(static_cast<std::size_t>(g.tensors[i].tensor.numel()), T(0));
      ms[i].v.assign(static_cast<std::size_t>(g.tensors[i].tensor.numel()), T(0));
    }
    moments_.push_back(std::move(ms));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++step_;
  for (std::size_t i = 0; i < groups_.size(); ++i) adamw_step(groups_[i], moments_[i], step_, lr, config_);
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.tensors) p.tensor.zero_grad();
}

template <typename T>
double AdamW<T>::grad_norm() const {
  double s = 0;
  for (const auto& g : groups_)
    for (const auto& p : g.tensors)
      for (T v : p.tensor.grad()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

template <typename T>
NamedTensors<T> AdamW<T>::state_tensors() const {
  NamedTensors<T> out;
  for (std::size_t gi = 0; gi < groups_.size(); ++gi)
    for (std::size_t i = 0; i < groups_[gi].tensors.size(); ++i) {
      const auto& p = groups_[gi].tensors[i];
      const auto& mo = moments_[gi][i];
      out.push_back({"opt.m." + p.name, Tensor<T>::from_vector(p.tensor.shape(), mo.m)});
      out.push_back({"opt.v." + p.name, Tensor<T>::from_vector(p.tensor.shape(), mo.v)});
    }
  return out;
}

template <typename T>
void AdamW<T>::load_state(const NamedTensors<T>& state, std::int64_t step) {
  std::map<std::string, const Tensor<T>*> by_name;
  for (const auto& s : state) by_name[s.name] = &s.tensor;
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<T>& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("optimizer state missing " + name);
    if (it->second->shape() != shape)
      throw FormatError("optimizer state " + name + " has shape " + shape_str(it->second->shape()) + ", expected " + shape_str(shape));
    return *it->second;
  };
  for (std::size_t gi = 0; gi < groups_.size(); ++gi)
    for (std::size_t i = 0; i < groups_[gi].tensors.size(); ++i) {
      const auto& p = groups_[gi].tensors[i];
      const auto& m = fetch("opt.m." + p.name, p.tensor.shape());
      const auto& v = fetch("opt.v." + p.name, p.tensor.shape());
      moments_[gi][i].m.assign(m.data().begin(), m.data().end());
      moments_[gi][i].v.assign(v.data().begin(), v.data().end());
    }
  step_ = step;
}

template class AdamW<float>;
template class AdamW<double>;
template std::vector<ParamGroup<float>> build_param_groups(const NamedTensors<float>&, std::int64_t, double);
template std::vector<ParamGroup<double>> build_param_groups(const NamedTensors<double>&, std::int64_t, double);
template void adamw_step(const ParamGroup<float>&, std::vector<Moments<float>>&, std::int64_t, double, const OptimConfig&);
template void adamw_step(const ParamGroup<double>&, std::vector<Moments<double>>&, std::int64_t, double, const OptimConfig&);

}  // namespace mimforge

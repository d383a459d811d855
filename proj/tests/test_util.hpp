#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mimforge/ops.hpp"
#include "mimforge/prng.hpp"
#include "mimforge/tensor.hpp"

namespace mimforge::testing {

template <typename T = double>
Tensor<T> random_tensor(Shape shape, Prng& rng, double scale = 1.0, bool requires_grad = false) {
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<T>(rng.normal() * scale);
  return Tensor<T>::from_vector(std::move(shape), std::move(v), requires_grad);
}

// Fixed random projection so tensor-valued ops reduce to a scalar with
// non-uniform upstream gradients.
template <typename T = double>
Tensor<T> project_to_scalar(const Tensor<T>& y, std::uint64_t seed = 99) {
  Prng rng(seed, 7);
  auto w = random_tensor<T>(y.shape(), rng);
  return ops::sum(ops::mul(y, w));
}

template <typename T>
std::uint64_t hash_values(std::span<const T> values) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(values.data()), values.size_bytes()));
}

template <typename T>
std::uint64_t hash_tensors(const NamedTensors<T>& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : tensors) {
    h = fnv1a64(name, h);
    auto d = t.data();
    h = fnv1a64(std::string_view(reinterpret_cast<const char*>(d.data()), d.size_bytes()), h);
  }
  return h;
}

// Fresh scratch directory under the system temp dir, wiped on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("mimforge-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace mimforge::testing

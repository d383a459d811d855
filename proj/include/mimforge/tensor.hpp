#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mimforge {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// 64-byte aligned allocation. Vectorised reductions split their work by
/// address alignment, so aligned storage keeps every op a pure function of
/// shapes and values.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
inline constexpr DType dtype_of = sizeof(T) == 4 ? DType::f32 : DType::f64;

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  bool released = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this->grad and accumulates into inputs[i]->grad.
  std::function<void(TensorNode&)> backward;

  Buffer<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Whether new operations are recorded on the autodiff graph (per thread).
bool grad_enabled();

/// Disables graph recording for the enclosing scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor handle. Copies alias the same storage and graph
/// node; use clone() or detach() for an independent buffer.
template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, const std::vector<T>& values, bool requires_grad = false);
  static Tensor from_buffer(Shape shape, Buffer<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }
  /// Last extent (1 for rank-0).
  std::int64_t cols() const;
  /// Product of all extents but the last.
  std::int64_t rows() const;

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  /// Only meaningful on leaves; a leaf without the flag never accumulates.
  void set_requires_grad(bool flag);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }
  bool is_leaf() const { return !node_->backward; }

  /// New leaf holding a copy of the data, no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  /// Reverse-mode sweep from this scalar. Releases the graph afterwards;
  /// a second call on the same result is an error.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

/// Named handle to a parameter tensor (aliases the owner's storage).
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using NamedTensors = std::vector<NamedTensor<T>>;

/// Element-wise conversion; the result is a detached leaf.
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& src) {
  std::vector<To> out(src.data().begin(), src.data().end());
  return Tensor<To>::from_vector(src.shape(), std::move(out));
}

}  // namespace mimforge

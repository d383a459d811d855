#include "mimforge/ops.hpp"

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "mimforge/errors.hpp"

namespace mimforge::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
MatMap<T> mat(Buffer<T>& v, std::int64_t r, std::int64_t c) {
  return MatMap<T>(v.data(), r, c);
}
template <typename T>
CMatMap<T> cmat(const Buffer<T>& v, std::int64_t r, std::int64_t c) {
  return CMatMap<T>(v.data(), r, c);
}
template <typename T>
ArrMap<T> arr(Buffer<T>& v) {
  return ArrMap<T>(v.data(), static_cast<Eigen::Index>(v.size()));
}
template <typename T>
CArrMap<T> carr(const Buffer<T>& v) {
  return CArrMap<T>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename T>
using Node = detail::TensorNode<T>;

template <typename T>
void require_defined(const Tensor<T>& t, const char* op) {
  if (!t.defined()) throw ArgumentError(std::string(op) + ": undefined tensor argument");
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// Builds the result node; attaches inputs and the backward rule only when
// recording is on and some input is trainable.
template <typename T>
Tensor<T> record(Shape shape, Buffer<T> data, std::initializer_list<Tensor<T>> inputs,
                 std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs)
        if (in.defined()) node->inputs.push_back(in.node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>(std::move(node));
}

// Gradient buffer of t if it participates in differentiation.
template <typename T>
Buffer<T>* grad_of(const Tensor<T>& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return &t.node()->grad_buffer();
}

template <typename T>
const Buffer<T>& vals(const Tensor<T>& t) {
  return t.node()->data;
}

}  // namespace

// --- linear algebra --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_mismatch("matmul", a.shape(), b.shape());
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer<T> out(static_cast<std::size_t>(m * n));
  mat(out, m, n).noalias() = cmat(vals(a), m, k) * cmat(vals(b), k, n);
  return record<T>({m, n}, std::move(out), {a, b}, [a, b, m, k, n](Node<T>& self) {
    auto dy = cmat(self.grad, m, n);
    if (auto* ga = grad_of(a)) mat(*ga, m, k).noalias() += dy * cmat(vals(b), k, n).transpose();
    if (auto* gb = grad_of(b)) mat(*gb, k, n).noalias() += cmat(vals(a), m, k).transpose() * dy;
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_defined(x, "linear");
  require_defined(weight, "linear");
  if (weight.rank() != 2 || x.rank() < 1 || x.cols() != weight.dim(0)) shape_mismatch("linear", x.shape(), weight.shape());
  const auto in = weight.dim(0), outd = weight.dim(1), rows = x.rows();
  if (bias.defined() && bias.numel() != outd) shape_mismatch("linear(bias)", weight.shape(), bias.shape());
  Buffer<T> out(static_cast<std::size_t>(rows * outd));
  auto y = mat(out, rows, outd);
  y.noalias() = cmat(vals(x), rows, in) * cmat(vals(weight), in, outd);
  if (bias.defined()) y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(vals(bias).data(), outd);
  Shape shape = x.shape();
  shape.back() = outd;
  return record<T>(std::move(shape), std::move(out), {x, weight, bias},
                   [x, weight, bias, rows, in, outd](Node<T>& self) {
                     auto dy = cmat(self.grad, rows, outd);
                     if (auto* gx = grad_of(x))
                       mat(*gx, rows, in).noalias() += dy * cmat(vals(weight), in, outd).transpose();
                     if (auto* gw = grad_of(weight))
                       mat(*gw, in, outd).noalias() += cmat(vals(x), rows, in).transpose() * dy;
                     if (auto* gb = grad_of(bias))
                       Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), outd) += dy.colwise().sum();
                   });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  require_defined(x, "transpose2d");
  if (x.rank() != 2) throw ShapeError("transpose2d: expected rank 2, got " + shape_str(x.shape()));
  const auto r = x.dim(0), c = x.dim(1);
  Buffer<T> out(vals(x).size());
  mat(out, c, r) = cmat(vals(x), r, c).transpose();
  return record<T>({c, r}, std::move(out), {x}, [x, r, c](Node<T>& self) {
    if (auto* gx = grad_of(x)) mat(*gx, r, c) += cmat(self.grad, c, r).transpose();
  });
}

// --- element-wise ----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  if (a.shape() != b.shape()) shape_mismatch("add", a.shape(), b.shape());
  Buffer<T> out(vals(a).size());
  arr(out) = carr(vals(a)) + carr(vals(b));
  return record<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (auto* ga = grad_of(a)) arr(*ga) += carr(self.grad);
    if (auto* gb = grad_of(b)) arr(*gb) += carr(self.grad);
  });
}

template <typename T>
Tensor<T> add_rowwise(const Tensor<T>& x, const Tensor<T>& bias) {
  require_defined(x, "add_rowwise");
  require_defined(bias, "add_rowwise");
  if (bias.numel() != x.cols()) shape_mismatch("add_rowwise", x.shape(), bias.shape());
  const auto rows = x.rows(), cols = x.cols();
  Buffer<T> out = vals(x);
  mat(out, rows, cols).rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(vals(bias).data(), cols);
  return record<T>(x.shape(), std::move(out), {x, bias}, [x, bias, rows, cols](Node<T>& self) {
    if (auto* gx = grad_of(x)) arr(*gx) += carr(self.grad);
    if (auto* gb = grad_of(bias))
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), cols) += cmat(self.grad, rows, cols).colwise().sum();
  });
}

template <typename T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& table) {
  require_defined(x, "add_tiled");
  require_defined(table, "add_tiled");
  const auto cols = x.cols(), rows = x.rows();
  const auto period = table.rows();
  if (table.cols() != cols || period == 0 || rows % period != 0) shape_mismatch("add_tiled", x.shape(), table.shape());
  Buffer<T> out = vals(x);
  const auto tiles = rows / period;
  for (std::int64_t t = 0; t < tiles; ++t)
    MatMap<T>(out.data() + t * period * cols, period, cols) += cmat(vals(table), period, cols);
  return record<T>(x.shape(), std::move(out), {x, table}, [x, table, cols, period, tiles](Node<T>& self) {
    if (auto* gx = grad_of(x)) arr(*gx) += carr(self.grad);
    if (auto* gt = grad_of(table)) {
      auto g = mat(*gt, period, cols);
      for (std::int64_t t = 0; t < tiles; ++t) g += CMatMap<T>(self.grad.data() + t * period * cols, period, cols);
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  if (a.shape() != b.shape()) shape_mismatch("mul", a.shape(), b.shape());
  Buffer<T> out(vals(a).size());
  arr(out) = carr(vals(a)) * carr(vals(b));
  return record<T>(a.shape(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    if (auto* ga = grad_of(a)) arr(*ga) += carr(self.grad) * carr(vals(b));
    if (auto* gb = grad_of(b)) arr(*gb) += carr(self.grad) * carr(vals(a));
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  require_defined(x, "scale");
  const T f = static_cast<T>(factor);
  Buffer<T> out(vals(x).size());
  arr(out) = carr(vals(x)) * f;
  return record<T>(x.shape(), std::move(out), {x}, [x, f](Node<T>& self) {
    if (auto* gx = grad_of(x)) arr(*gx) += carr(self.grad) * f;
  });
}

template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& factor) {
  require_defined(x, "scale_by");
  require_defined(factor, "scale_by");
  if (factor.numel() != 1) throw ShapeError("scale_by: factor must have one element, got " + shape_str(factor.shape()));
  const T f = factor.item();
  Buffer<T> out(vals(x).size());
  arr(out) = carr(vals(x)) * f;
  return record<T>(x.shape(), std::move(out), {x, factor}, [x, factor, f](Node<T>& self) {
    if (auto* gx = grad_of(x)) arr(*gx) += carr(self.grad) * f;
    if (auto* gf = grad_of(factor)) (*gf)[0] += (carr(self.grad) * carr(vals(x))).sum();
  });
}

template <typename T>
Tensor<T> scale_rows(const Tensor<T>& x, std::span<const T> factors) {
  require_defined(x, "scale_rows");
  const auto rows = x.rows(), cols = x.cols();
  if (static_cast<std::int64_t>(factors.size()) != rows)
    throw ShapeError("scale_rows: " + std::to_string(factors.size()) + " factors for " + std::to_string(rows) + " rows");
  Buffer<T> f(factors.begin(), factors.end());
  Buffer<T> out(vals(x).size());
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> fv(f.data(), rows);
  mat(out, rows, cols) = fv.asDiagonal() * cmat(vals(x), rows, cols);
  return record<T>(x.shape(), std::move(out), {x}, [x, f = std::move(f), rows, cols](Node<T>& self) {
    if (auto* gx = grad_of(x)) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> fv(f.data(), rows);
      mat(*gx, rows, cols) += fv.asDiagonal() * cmat(self.grad, rows, cols);
    }
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  require_defined(x, "exp");
  Buffer<T> out(vals(x).size());
  arr(out) = carr(vals(x)).exp();
  return record<T>(x.shape(), std::move(out), {x}, [x](Node<T>& self) {
    if (auto* gx = grad_of(x)) arr(*gx) += carr(self.grad) * carr(self.data);
  });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  require_defined(x, "gelu");
  const T inv_sqrt2 = static_cast<T>(1.0 / std::numbers::sqrt2);
  Buffer<T> out(vals(x).size());
  auto xv = carr(vals(x));
  arr(out) = T(0.5) * xv * (T(1) + (xv * inv_sqrt2).erf());
  return record<T>(x.shape(), std::move(out), {x}, [x, inv_sqrt2](Node<T>& self) {
    if (auto* gx = grad_of(x)) {
      const T inv_sqrt_2pi = static_cast<T>(1.0 / std::sqrt(2.0 * std::numbers::pi));
      auto xv = carr(vals(x));
      arr(*gx) += carr(self.grad) *
                  (T(0.5) * (T(1) + (xv * inv_sqrt2).erf()) + xv * inv_sqrt_2pi * (T(-0.5) * xv.square()).exp());
    }
  });
}

// --- shape -----------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_numel(shape) != x.numel()) shape_mismatch("reshape", x.shape(), shape);
  return record<T>(std::move(shape), vals(x), {x}, [x](Node<T>& self) {
    if (auto* gx = grad_of(x)) arr(*gx) += carr(self.grad);
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::int64_t begin, std::int64_t end) {
  require_defined(x, "slice_rows");
  if (x.rank() < 1) throw ShapeError("slice_rows: scalar input");
  const auto n0 = x.dim(0);
  if (begin < 0 || end > n0 || begin > end)
    throw ArgumentError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") outside " + shape_str(x.shape()));
  const auto stride = n0 == 0 ? 0 : x.numel() / n0;
  Buffer<T> out(vals(x).begin() + begin * stride, vals(x).begin() + end * stride);
  Shape shape = x.shape();
  shape[0] = end - begin;
  return record<T>(std::move(shape), std::move(out), {x}, [x, begin, stride](Node<T>& self) {
    if (auto* gx = grad_of(x)) {
      ArrMap<T>(gx->data() + begin * stride, static_cast<Eigen::Index>(self.grad.size())) += carr(self.grad);
    }
  });
}

template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw ArgumentError("concat_rows: no inputs");
  Shape shape = parts[0].shape();
  if (shape.empty()) throw ShapeError("concat_rows: scalar input");
  std::int64_t total = 0;
  for (const auto& p : parts) {
    require_defined(p, "concat_rows");
    if (p.rank() != static_cast<int>(shape.size()) || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
      shape_mismatch("concat_rows", parts[0].shape(), p.shape());
    total += p.dim(0);
  }
  shape[0] = total;
  Buffer<T> out;
  out.reserve(static_cast<std::size_t>(shape_numel(shape)));
  for (const auto& p : parts) out.insert(out.end(), vals(p).begin(), vals(p).end());

  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(out);
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (grad_enabled() && any) {
    std::vector<Tensor<T>> kept(parts.begin(), parts.end());
    node->requires_grad = true;
    for (const auto& p : kept) node->inputs.push_back(p.node_ptr());
    node->backward = [kept](Node<T>& self) {
      std::size_t offset = 0;
      for (const auto& p : kept) {
        const auto n = static_cast<std::size_t>(p.numel());
        if (auto* g = grad_of(p)) ArrMap<T>(g->data(), n) += CArrMap<T>(self.grad.data() + offset, n);
        offset += n;
      }
    };
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::int64_t> rows) {
  require_defined(x, "gather_rows");
  const auto nrows = x.rows(), cols = x.cols();
  std::vector<std::int64_t> idx(rows.begin(), rows.end());
  Buffer<T> out(idx.size() * static_cast<std::size_t>(cols));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= nrows)
      throw ArgumentError("gather_rows: row " + std::to_string(idx[i]) + " outside " + shape_str(x.shape()));
    std::copy_n(vals(x).begin() + idx[i] * cols, cols, out.begin() + static_cast<std::int64_t>(i) * cols);
  }
  const auto n = static_cast<std::int64_t>(idx.size());
  return record<T>({n, cols}, std::move(out), {x}, [x, idx = std::move(idx), cols](Node<T>& self) {
    if (auto* gx = grad_of(x)) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        ArrMap<T>(gx->data() + idx[i] * cols, cols) += CArrMap<T>(self.grad.data() + static_cast<std::int64_t>(i) * cols, cols);
    }
  });
}

template <typename T>
Tensor<T> replace_rows(const Tensor<T>& x, std::span<const std::uint8_t> replace, const Tensor<T>& token) {
  require_defined(x, "replace_rows");
  require_defined(token, "replace_rows");
  const auto rows = x.rows(), cols = x.cols();
  if (static_cast<std::int64_t>(replace.size()) != rows)
    throw ShapeError("replace_rows: " + std::to_string(replace.size()) + " flags for " + std::to_string(rows) + " rows");
  if (token.numel() != cols) shape_mismatch("replace_rows(token)", x.shape(), token.shape());
  std::vector<std::uint8_t> flags(replace.begin(), replace.end());
  Buffer<T> out = vals(x);
  for (std::int64_t r = 0; r < rows; ++r)
    if (flags[static_cast<std::size_t>(r)]) std::copy_n(vals(token).begin(), cols, out.begin() + r * cols);
  return record<T>(x.shape(), std::move(out), {x, token}, [x, token, flags = std::move(flags), rows, cols](Node<T>& self) {
    auto* gx = grad_of(x);
    auto* gt = grad_of(token);
    for (std::int64_t r = 0; r < rows; ++r) {
      CArrMap<T> g(self.grad.data() + r * cols, cols);
      if (flags[static_cast<std::size_t>(r)]) {
        if (gt) ArrMap<T>(gt->data(), cols) += g;
      } else if (gx) {
        ArrMap<T>(gx->data() + r * cols, cols) += g;
      }
    }
  });
}

template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token, std::int64_t batch) {
  require_defined(x, "prepend_token");
  require_defined(token, "prepend_token");
  const auto rows = x.rows(), cols = x.cols();
  if (batch <= 0 || rows % batch != 0) throw ShapeError("prepend_token: " + std::to_string(rows) + " rows not divisible by batch " + std::to_string(batch));
  if (token.numel() != cols) shape_mismatch("prepend_token(token)", x.shape(), token.shape());
  const auto seq = rows / batch;
  Buffer<T> out(static_cast<std::size_t>(batch * (seq + 1) * cols));
  for (std::int64_t b = 0; b < batch; ++b) {
    auto dst = out.begin() + b * (seq + 1) * cols;
    std::copy_n(vals(token).begin(), cols, dst);
    std::copy_n(vals(x).begin() + b * seq * cols, seq * cols, dst + cols);
  }
  return record<T>({batch * (seq + 1), cols}, std::move(out), {x, token}, [x, token, batch, seq, cols](Node<T>& self) {
    auto* gx = grad_of(x);
    auto* gt = grad_of(token);
    for (std::int64_t b = 0; b < batch; ++b) {
      const T* src = self.grad.data() + b * (seq + 1) * cols;
      if (gt) ArrMap<T>(gt->data(), cols) += CArrMap<T>(src, cols);
      if (gx) ArrMap<T>(gx->data() + b * seq * cols, seq * cols) += CArrMap<T>(src + cols, seq * cols);
    }
  });
}

template <typename T>
Tensor<T> mean_pool(const Tensor<T>& x, std::int64_t batch, std::int64_t begin) {
  require_defined(x, "mean_pool");
  const auto rows = x.rows(), cols = x.cols();
  if (batch <= 0 || rows % batch != 0) throw ShapeError("mean_pool: " + std::to_string(rows) + " rows not divisible by batch " + std::to_string(batch));
  const auto seq = rows / batch;
  if (begin < 0 || begin >= seq) throw ArgumentError("mean_pool: begin outside sequence");
  const auto count = seq - begin;
  const T inv = T(1) / static_cast<T>(count);
  Buffer<T> out(static_cast<std::size_t>(batch * cols));
  for (std::int64_t b = 0; b < batch; ++b)
    MatMap<T>(out.data() + b * cols, 1, cols) =
        CMatMap<T>(vals(x).data() + (b * seq + begin) * cols, count, cols).colwise().sum() * inv;
  return record<T>({batch, cols}, std::move(out), {x}, [x, batch, seq, begin, count, cols, inv](Node<T>& self) {
    if (auto* gx = grad_of(x)) {
      for (std::int64_t b = 0; b < batch; ++b)
        MatMap<T>(gx->data() + (b * seq + begin) * cols, count, cols).rowwise() +=
            CMatMap<T>(self.grad.data() + b * cols, 1, cols).row(0) * inv;
    }
  });
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int64_t> ids) {
  require_defined(table, "embedding_lookup");
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape()));
  return gather_rows(table, ids);
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::int64_t patch) {
  require_defined(images, "patchify");
  if (images.rank() != 4) throw ShapeError("patchify: expected [B,C,H,W], got " + shape_str(images.shape()));
  const auto B = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
  if (patch <= 0 || H % patch != 0 || W % patch != 0)
    throw ShapeError("patchify: image " + shape_str(images.shape()) + " not divisible by patch " + std::to_string(patch));
  const auto gh = H / patch, gw = W / patch, pd = C * patch * patch;
  std::vector<std::int64_t> src_index(static_cast<std::size_t>(images.numel()));
  std::int64_t o = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t py = 0; py < gh; ++py)
      for (std::int64_t px = 0; px < gw; ++px)
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t dy = 0; dy < patch; ++dy)
            for (std::int64_t dx = 0; dx < patch; ++dx)
              src_index[static_cast<std::size_t>(o++)] = ((b * C + c) * H + py * patch + dy) * W + px * patch + dx;
  Buffer<T> out(src_index.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = vals(images)[static_cast<std::size_t>(src_index[i])];
  return record<T>({B * gh * gw, pd}, std::move(out), {images}, [images, src_index = std::move(src_index)](Node<T>& self) {
    if (auto* g = grad_of(images))
      for (std::size_t i = 0; i < src_index.size(); ++i) (*g)[static_cast<std::size_t>(src_index[i])] += self.grad[i];
  });
}

// --- normalisation / reductions -------------------------------------------

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  require_defined(x, "softmax_lastdim");
  const auto rows = x.rows(), cols = x.cols();
  Buffer<T> out(vals(x).size());
  auto y = mat(out, rows, cols);
  auto xi = cmat(vals(x), rows, cols);
  for (std::int64_t r = 0; r < rows; ++r) {
    y.row(r) = (xi.row(r).array() - xi.row(r).maxCoeff()).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  return record<T>(x.shape(), std::move(out), {x}, [x, rows, cols](Node<T>& self) {
    if (auto* gx = grad_of(x)) {
      auto y = cmat(self.data, rows, cols);
      auto dy = cmat(self.grad, rows, cols);
      auto g = mat(*gx, rows, cols);
      for (std::int64_t r = 0; r < rows; ++r) {
        const T dot = y.row(r).dot(dy.row(r));
        g.row(r).array() += y.row(r).array() * (dy.row(r).array() - dot);
      }
    }
  });
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  require_defined(x, "layernorm");
  if (!(eps > 0)) throw ArgumentError("layernorm: eps must be positive");
  const auto rows = x.rows(), cols = x.cols();
  if (gamma.defined() && gamma.numel() != cols) shape_mismatch("layernorm(gamma)", x.shape(), gamma.shape());
  if (beta.defined() && beta.numel() != cols) shape_mismatch("layernorm(beta)", x.shape(), beta.shape());
  Buffer<T> xhat(vals(x).size());
  Buffer<T> rstd(static_cast<std::size_t>(rows));
  auto xi = cmat(vals(x), rows, cols);
  auto xh = mat(xhat, rows, cols);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T mu = xi.row(r).mean();
    xh.row(r) = xi.row(r).array() - mu;
    const T var = xh.row(r).squaredNorm() / static_cast<T>(cols);
    rstd[static_cast<std::size_t>(r)] = T(1) / std::sqrt(var + static_cast<T>(eps));
    xh.row(r) *= rstd[static_cast<std::size_t>(r)];
  }
  Buffer<T> out = xhat;
  auto y = mat(out, rows, cols);
  using RowVecMap = Eigen::Map<const Eigen::Array<T, 1, Eigen::Dynamic>>;
  if (gamma.defined()) y.array().rowwise() *= RowVecMap(vals(gamma).data(), cols);
  if (beta.defined()) y.array().rowwise() += RowVecMap(vals(beta).data(), cols);
  return record<T>(x.shape(), std::move(out), {x, gamma, beta},
                   [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), rows, cols](Node<T>& self) {
                     auto dy = cmat(self.grad, rows, cols);
                     auto xh = cmat(xhat, rows, cols);
                     if (auto* gg = grad_of(gamma))
                       Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gg->data(), cols) +=
                           dy.cwiseProduct(xh).colwise().sum();
                     if (auto* gb = grad_of(beta))
                       Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(gb->data(), cols) += dy.colwise().sum();
                     if (auto* gx = grad_of(x)) {
                       auto g = mat(*gx, rows, cols);
                       Eigen::Array<T, 1, Eigen::Dynamic> dxh(cols);
                       const T invn = T(1) / static_cast<T>(cols);
                       for (std::int64_t r = 0; r < rows; ++r) {
                         dxh = dy.row(r).array();
                         if (gamma.defined()) dxh *= RowVecMap(vals(gamma).data(), cols);
                         const T m1 = dxh.sum() * invn;
                         const T m2 = (dxh * xh.row(r).array()).sum() * invn;
                         g.row(r).array() += rstd[static_cast<std::size_t>(r)] * (dxh - m1 - xh.row(r).array() * m2);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> l2_normalize_lastdim(const Tensor<T>& x, double eps) {
  require_defined(x, "l2_normalize_lastdim");
  if (!(eps > 0)) throw ArgumentError("l2_normalize_lastdim: eps must be positive");
  const auto rows = x.rows(), cols = x.cols();
  Buffer<T> norms(static_cast<std::size_t>(rows));
  Buffer<T> out(vals(x).size());
  auto xi = cmat(vals(x), rows, cols);
  auto y = mat(out, rows, cols);
  for (std::int64_t r = 0; r < rows; ++r) {
    norms[static_cast<std::size_t>(r)] = xi.row(r).norm();
    y.row(r) = xi.row(r) / std::max(norms[static_cast<std::size_t>(r)], static_cast<T>(eps));
  }
  return record<T>(x.shape(), std::move(out), {x}, [x, norms = std::move(norms), rows, cols, eps](Node<T>& self) {
    if (auto* gx = grad_of(x)) {
      auto y = cmat(self.data, rows, cols);
      auto dy = cmat(self.grad, rows, cols);
      auto g = mat(*gx, rows, cols);
      for (std::int64_t r = 0; r < rows; ++r) {
        const T n = norms[static_cast<std::size_t>(r)];
        const T d = std::max(n, static_cast<T>(eps));
        if (n > static_cast<T>(eps))
          g.row(r) += (dy.row(r) - y.row(r) * y.row(r).dot(dy.row(r))) / d;
        else
          g.row(r) += dy.row(r) / d;
      }
    }
  });
}

template <typename T>
Tensor<T> cosine_rows(const Tensor<T>& a, const Tensor<T>& b, double eps) {
  require_defined(a, "cosine_rows");
  require_defined(b, "cosine_rows");
  if (a.shape() != b.shape()) shape_mismatch("cosine_rows", a.shape(), b.shape());
  const auto rows = a.rows(), cols = a.cols();
  const T e = static_cast<T>(eps);
  auto am = cmat(vals(a), rows, cols);
  auto bm = cmat(vals(b), rows, cols);
  Buffer<T> out(static_cast<std::size_t>(rows));
  Buffer<T> na(out.size()), nb(out.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const auto i = static_cast<std::size_t>(r);
    na[i] = am.row(r).norm();
    nb[i] = bm.row(r).norm();
    out[i] = (na[i] == T(0) || nb[i] == T(0)) ? T(0) : am.row(r).dot(bm.row(r)) / (std::max(na[i], e) * std::max(nb[i], e));
  }
  return record<T>({rows}, std::move(out), {a, b},
                   [a, b, na = std::move(na), nb = std::move(nb), rows, cols, e](Node<T>& self) {
                     auto am = cmat(vals(a), rows, cols);
                     auto bm = cmat(vals(b), rows, cols);
                     auto* ga = grad_of(a);
                     auto* gb = grad_of(b);
                     for (std::int64_t r = 0; r < rows; ++r) {
                       const auto i = static_cast<std::size_t>(r);
                       if (na[i] == T(0) || nb[i] == T(0)) continue;
                       const T g = self.grad[i];
                       const T c = self.data[i];
                       const T denom = std::max(na[i], e) * std::max(nb[i], e);
                       if (ga) {
                         auto row = mat(*ga, rows, cols).row(r);
                         row += g * bm.row(r) / denom;
                         if (na[i] > e) row -= g * c * am.row(r) / (na[i] * na[i]);
                       }
                       if (gb) {
                         auto row = mat(*gb, rows, cols).row(r);
                         row += g * am.row(r) / denom;
                         if (nb[i] > e) row -= g * c * bm.row(r) / (nb[i] * nb[i]);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require_defined(x, "sum");
  return record<T>({}, {carr(vals(x)).sum()}, {x}, [x](Node<T>& self) {
    if (auto* gx = grad_of(x)) arr(*gx) += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  require_defined(x, "mean");
  if (x.numel() == 0) throw ArgumentError("mean: empty tensor");
  const T inv = T(1) / static_cast<T>(x.numel());
  return record<T>({}, {carr(vals(x)).sum() * inv}, {x}, [x, inv](Node<T>& self) {
    if (auto* gx = grad_of(x)) arr(*gx) += self.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int64_t> labels) {
  require_defined(logits, "cross_entropy");
  if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [N,C], got " + shape_str(logits.shape()));
  const auto n = logits.dim(0), c = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != n || n == 0)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
  std::vector<std::int64_t> lab(labels.begin(), labels.end());
  for (auto l : lab)
    if (l < 0 || l >= c) throw ArgumentError("cross_entropy: label " + std::to_string(l) + " outside [0," + std::to_string(c) + ")");
  Buffer<T> prob(vals(logits).size());
  auto z = cmat(vals(logits), n, c);
  auto p = mat(prob, n, c);
  T total = 0;
  for (std::int64_t r = 0; r < n; ++r) {
    const T m = z.row(r).maxCoeff();
    p.row(r) = (z.row(r).array() - m).exp().matrix();
    const T s = p.row(r).sum();
    p.row(r) /= s;
    total += m + std::log(s) - z(r, lab[static_cast<std::size_t>(r)]);
  }
  return record<T>({}, {total / static_cast<T>(n)}, {logits},
                   [logits, prob = std::move(prob), lab = std::move(lab), n, c](Node<T>& self) {
                     if (auto* g = grad_of(logits)) {
                       const T s = self.grad[0] / static_cast<T>(n);
                       auto gm = mat(*g, n, c);
                       gm += cmat(prob, n, c) * s;
                       for (std::int64_t r = 0; r < n; ++r) gm(r, lab[static_cast<std::size_t>(r)]) -= s;
                     }
                   });
}

// --- stochastic ------------------------------------------------------------

template <typename T>
Tensor<T> dropout_mask(const Shape& shape, double p, Prng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("dropout: p must lie in [0,1), got " + std::to_string(p));
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  Buffer<T> m(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : m) v = rng.uniform() < p ? T(0) : keep;
  return Tensor<T>::from_buffer(shape, std::move(m));
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Prng& rng, bool training) {
  require_defined(x, "dropout");
  if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("dropout: p must lie in [0,1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  return mul(x, dropout_mask<T>(x.shape(), p, rng));
}

// --- attention -------------------------------------------------------------

template <typename T>
Tensor<T> attention(const Tensor<T>& qkv, std::int64_t batch, std::int64_t heads) {
  require_defined(qkv, "attention");
  const auto rows = qkv.rows(), c3 = qkv.cols();
  if (batch <= 0 || rows % batch != 0 || c3 % 3 != 0 || heads <= 0 || (c3 / 3) % heads != 0)
    throw ShapeError("attention: qkv " + shape_str(qkv.shape()) + " incompatible with batch " + std::to_string(batch) +
                     " and heads " + std::to_string(heads));
  const auto C = c3 / 3, seq = rows / batch, hd = C / heads;
  const T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
  Buffer<T> probs(static_cast<std::size_t>(batch * heads * seq * seq));
  Buffer<T> out(static_cast<std::size_t>(rows * C));
  const T* base = vals(qkv).data();
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      const T* q0 = base + b * seq * c3 + h * hd;
      CStridedMap<T> Q(q0, seq, hd, Eigen::OuterStride<>(c3));
      CStridedMap<T> K(q0 + C, seq, hd, Eigen::OuterStride<>(c3));
      CStridedMap<T> V(q0 + 2 * C, seq, hd, Eigen::OuterStride<>(c3));
      MatMap<T> P(probs.data() + (b * heads + h) * seq * seq, seq, seq);
      P.noalias() = (Q * K.transpose()) * scl;
      auto A = P.array();
      const Eigen::Array<T, Eigen::Dynamic, 1> mx = A.rowwise().maxCoeff();
      A.colwise() -= mx;
      A = A.exp();
      const Eigen::Array<T, Eigen::Dynamic, 1> inv = A.rowwise().sum().inverse();
      A.colwise() *= inv;
      StridedMap<T> O(out.data() + b * seq * C + h * hd, seq, hd, Eigen::OuterStride<>(C));
      O.noalias() = P * V;
    }
  }
  return record<T>({rows, C}, std::move(out), {qkv},
                   [qkv, probs = std::move(probs), batch, heads, seq, C, c3, hd, scl](Node<T>& self) {
                     auto* g = grad_of(qkv);
                     if (!g) return;
                     const T* base = vals(qkv).data();
                     RowMat<T> dP(seq, seq);
                     for (std::int64_t b = 0; b < batch; ++b) {
                       for (std::int64_t h = 0; h < heads; ++h) {
                         const auto off = b * seq * c3 + h * hd;
                         CStridedMap<T> Q(base + off, seq, hd, Eigen::OuterStride<>(c3));
                         CStridedMap<T> K(base + off + C, seq, hd, Eigen::OuterStride<>(c3));
                         CStridedMap<T> V(base + off + 2 * C, seq, hd, Eigen::OuterStride<>(c3));
                         StridedMap<T> dQ(g->data() + off, seq, hd, Eigen::OuterStride<>(c3));
                         StridedMap<T> dK(g->data() + off + C, seq, hd, Eigen::OuterStride<>(c3));
                         StridedMap<T> dV(g->data() + off + 2 * C, seq, hd, Eigen::OuterStride<>(c3));
                         CMatMap<T> P(probs.data() + (b * heads + h) * seq * seq, seq, seq);
                         CStridedMap<T> dO(self.grad.data() + b * seq * C + h * hd, seq, hd, Eigen::OuterStride<>(C));
                         dV.noalias() += P.transpose() * dO;
                         dP.noalias() = dO * V.transpose();
                         const Eigen::Array<T, Eigen::Dynamic, 1> dots = (P.array() * dP.array()).rowwise().sum();
                         dP.array().colwise() -= dots;
                         dP.array() *= P.array();
                         dQ.noalias() += (dP * K) * scl;
                         dK.noalias() += (dP.transpose() * Q) * scl;
                       }
                     }
                   });
}

#define MIMFORGE_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> transpose2d(const Tensor<T>&);                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> add_rowwise(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> add_tiled(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> scale(const Tensor<T>&, double);                                                 \
  template Tensor<T> scale_by(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> scale_rows(const Tensor<T>&, std::span<const T>);                                \
  template Tensor<T> exp(const Tensor<T>&);                                                           \
  template Tensor<T> gelu(const Tensor<T>&);                                                          \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                \
  template Tensor<T> slice_rows(const Tensor<T>&, std::int64_t, std::int64_t);                        \
  template Tensor<T> concat_rows(std::span<const Tensor<T>>);                                         \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::int64_t>);                    \
  template Tensor<T> replace_rows(const Tensor<T>&, std::span<const std::uint8_t>, const Tensor<T>&); \
  template Tensor<T> prepend_token(const Tensor<T>&, const Tensor<T>&, std::int64_t);                 \
  template Tensor<T> mean_pool(const Tensor<T>&, std::int64_t, std::int64_t);                         \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const std::int64_t>);               \
  template Tensor<T> patchify(const Tensor<T>&, std::int64_t);                                        \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                               \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);         \
  template Tensor<T> l2_normalize_lastdim(const Tensor<T>&, double);                                  \
  template Tensor<T> cosine_rows(const Tensor<T>&, const Tensor<T>&, double);                         \
  template Tensor<T> sum(const Tensor<T>&);                                                           \
  template Tensor<T> mean(const Tensor<T>&);                                                          \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int64_t>);                  \
  template Tensor<T> dropout_mask<T>(const Shape&, double, Prng&);                                    \
  template Tensor<T> dropout(const Tensor<T>&, double, Prng&, bool);                                  \
  template Tensor<T> attention(const Tensor<T>&, std::int64_t, std::int64_t);

MIMFORGE_INSTANTIATE_OPS(float)
MIMFORGE_INSTANTIATE_OPS(double)

}  // namespace mimforge::ops

#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mimforge/tensor.hpp"
#include "mimforge/vit.hpp"

namespace mimforge {

/// Per-image, per-patch regression targets, [batch, grid, teacher_dim].
struct TeacherBatch {
  TensorF features;
  std::string source_id;
};

/// Source of frozen target features. Implementations are deterministic and
/// read-only after construction.
class TeacherProvider {
 public:
  virtual ~TeacherProvider() = default;

  virtual std::string kind() const = 0;
  virtual std::int64_t teacher_dim() const = 0;
  virtual std::int64_t grid() const = 0;
  virtual std::string source_id() const = 0;

  /// `images` is the normalised batch the student sees; `dataset_indices`
  /// names the underlying records (used by file-backed providers).
  virtual TeacherBatch features(const TensorF& images, std::span<const std::int64_t> dataset_indices) const = 0;

  /// Throws ArgumentError if grid or feature width disagree with the student.
  void check_compatible(const EncoderConfig& student) const;
};

struct FrozenNetOptions {
  std::int64_t depth = 2;
  std::int64_t width = 32;  // also the teacher feature dim
  std::int64_t heads = 2;
  std::int64_t mlp_width = 128;
  std::uint64_t seed = 1234;
};

/// Randomly initialised ViT materialised once from a seed and never trained.
/// Features are its final-norm patch outputs (cls dropped) in eval mode.
class FrozenNetTeacher final : public TeacherProvider {
 public:
  FrozenNetTeacher(std::int64_t image_size, std::int64_t patch_size, const FrozenNetOptions& options);

  std::string kind() const override { return "frozen-net"; }
  std::int64_t teacher_dim() const override { return net_.config.width; }
  std::int64_t grid() const override { return net_.config.grid(); }
  std::string source_id() const override { return source_id_; }
  TeacherBatch features(const TensorF& images, std::span<const std::int64_t> dataset_indices) const override;

  const EncoderState<float>& network() const { return net_; }

 private:
  EncoderState<float> net_;
  std::string source_id_;
};

/// Precomputed features read from an EVAT file.
class FileTeacher final : public TeacherProvider {
 public:
  explicit FileTeacher(const std::string& path);

  std::string kind() const override { return "file"; }
  std::int64_t teacher_dim() const override { return dim_; }
  std::int64_t grid() const override { return grid_; }
  std::int64_t image_count() const { return count_; }
  std::string source_id() const override { return source_id_; }
  TeacherBatch features(const TensorF& images, std::span<const std::int64_t> dataset_indices) const override;

  /// Features of one stored image, [1, grid, dim].
  TeacherBatch row(std::int64_t image_index) const;

 private:
  std::int64_t count_ = 0, grid_ = 0, dim_ = 0;
  std::vector<float> values_;
  std::string source_id_;
};

/// Writes `values` (count * grid * dim floats, row-major) as EVAT version 1.
void write_evat(const std::string& path, std::span<const float> values, std::int64_t count, std::int64_t grid,
                std::int64_t dim);

}  // namespace mimforge

#include "mimforge/teacher.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "mimforge/binary_io.hpp"
#include "mimforge/errors.hpp"
#include "mimforge/ops.hpp"

namespace mimforge {
namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t hash_floats(std::span<const float> values, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float)), h);
}

}  // namespace

void TeacherProvider::check_compatible(const EncoderConfig& student) const {
  if (grid() != student.grid())
    throw ArgumentError("teacher grid " + std::to_string(grid()) + " does not match student grid " + std::to_string(student.grid()));
  if (teacher_dim() != student.teacher_dim)
    throw ArgumentError("teacher dim " + std::to_string(teacher_dim()) + " does not match configured teacher_dim " +
                        std::to_string(student.teacher_dim));
}

FrozenNetTeacher::FrozenNetTeacher(std::int64_t image_size, std::int64_t patch_size, const FrozenNetOptions& o) {
  EncoderConfig c;
  c.image_size = image_size;
  c.patch_size = patch_size;
  c.depth = o.depth;
  c.width = o.width;
  c.mlp_width = o.mlp_width;
  c.heads = o.heads;
  c.drop_path_rate = 0.0;
  c.teacher_dim = o.width;
  Prng rng(o.seed, fnv1a64("frozen-teacher"));
  net_ = EncoderState<float>::init(c, rng);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : net_.named_parameters()) h = hash_floats(p.tensor.data(), h);
  source_id_ = "frozen-net/d" + std::to_string(o.depth) + "-w" + std::to_string(o.width) + "/seed=" +
               std::to_string(o.seed) + "/" + hex64(h);
}

TeacherBatch FrozenNetTeacher::features(const TensorF& images, std::span<const std::int64_t>) const {
  NoGradGuard no_grad;
  const auto& c = net_.config;
  auto out = encoder_forward(net_, images, {}, ForwardOptions{});
  const auto batch = out.dim(0), tokens = c.tokens(), w = c.width;
  std::vector<float> feats(static_cast<std::size_t>(batch * c.grid() * w));
  for (std::int64_t b = 0; b < batch; ++b)
    std::copy_n(out.data().begin() + (b * tokens + 1) * w, c.grid() * w, feats.begin() + b * c.grid() * w);
  return {TensorF::from_vector({batch, c.grid(), w}, std::move(feats)), source_id_};
}

FileTeacher::FileTeacher(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path);
  binio::expect_magic(is, "EVAT", path);
  binio::expect_version(is, 1, path);
  count_ = binio::read_le<std::uint32_t>(is, "image_count");
  grid_ = binio::read_le<std::uint32_t>(is, "grid");
  dim_ = binio::read_le<std::uint32_t>(is, "teacher_dim");
  values_.resize(static_cast<std::size_t>(count_ * grid_ * dim_));
  for (auto& v : values_) v = binio::read_le<float>(is, "features");
  for (float v : values_)
    if (!std::isfinite(v)) throw FormatError(path + ": non-finite teacher feature");
  source_id_ = "file/" + hex64(hash_floats(values_));
}

TeacherBatch FileTeacher::row(std::int64_t image_index) const {
  const std::int64_t idx[1] = {image_index};
  return features(TensorF(), idx);
}

TeacherBatch FileTeacher::features(const TensorF& images, std::span<const std::int64_t> indices) const {
  if (images.defined() && images.dim(0) != static_cast<std::int64_t>(indices.size()))
    throw ArgumentError("file teacher: batch of " + std::to_string(images.dim(0)) + " images with " +
                        std::to_string(indices.size()) + " indices");
  const auto per = grid_ * dim_;
  std::vector<float> out;
  out.reserve(indices.size() * static_cast<std::size_t>(per));
  for (auto i : indices) {
    if (i < 0 || i >= count_)
      throw ArgumentError("file teacher: image index " + std::to_string(i) + " out of range (count " + std::to_string(count_) + ")");
    out.insert(out.end(), values_.begin() + i * per, values_.begin() + (i + 1) * per);
  }
  return {TensorF::from_vector({static_cast<std::int64_t>(indices.size()), grid_, dim_}, std::move(out)), source_id_};
}

void write_evat(const std::string& path, std::span<const float> values, std::int64_t count, std::int64_t grid,
                std::int64_t dim) {
  if (static_cast<std::int64_t>(values.size()) != count * grid * dim)
    throw ArgumentError("write_evat: value count does not match count*grid*dim");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path + " for writing");
  binio::write_magic(os, "EVAT");
  binio::write_le<std::uint32_t>(os, 1);
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(count));
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(grid));
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(dim));
  for (float v : values) binio::write_le<float>(os, v);
  if (!os) throw FormatError("write failed for " + path);
}

}  // namespace mimforge

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mimforge/tensor.hpp"

namespace mimforge {

/// Tensor as stored in a checkpoint. Values are held as double; f32 entries
/// convert exactly in both directions.
struct StoredTensor {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::vector<double> values;

  template <typename T>
  Tensor<T> to_tensor() const;
  bool operator==(const StoredTensor&) const = default;
};

/// EVAC file contents: the key=value config text and a named tensor table.
struct Checkpoint {
  std::string config_text;
  std::vector<StoredTensor> tensors;

  const StoredTensor* find(const std::string& name) const;
  /// Throws FormatError naming the tensor when absent.
  const StoredTensor& at(const std::string& name) const;
  template <typename T>
  void add(const std::string& name, const Tensor<T>& tensor);
  template <typename T>
  void add_all(const NamedTensors<T>& tensors);
  void add_f64_scalar(const std::string& name, double value);
  bool operator==(const Checkpoint&) const = default;
};

/// Copies checkpoint values into existing parameter storage in place, so
/// optimizer handles stay valid. Every slot must be present as
/// prefix + name with the same shape; otherwise nothing is written and the
/// error names the offending tensor.
template <typename T>
void load_parameters(const Checkpoint& checkpoint, const std::vector<std::pair<std::string, Tensor<T>*>>& slots,
                     const std::string& prefix = "");

/// All "opt.m." and "opt.v." entries as tensors.
template <typename T>
NamedTensors<T> optimizer_entries(const Checkpoint& checkpoint);

/// Value of the "opt.step" scalar; throws FormatError when absent.
std::int64_t checkpoint_step(const Checkpoint& checkpoint);

/// Serialised EVAC bytes. Throws ArgumentError on duplicate names or
/// extents that do not fit the format.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
/// Throws FormatError on bad magic, version, dtype, duplicate names,
/// truncation or trailing bytes.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin = "checkpoint");

/// Writes to a temporary sibling, then renames over `path`.
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);

}  // namespace mimforge

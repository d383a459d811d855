#include "mimforge/checkpoint.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

#include "mimforge/binary_io.hpp"
#include "mimforge/errors.hpp"

namespace mimforge {

template <typename T>
Tensor<T> StoredTensor::to_tensor() const {
  std::vector<T> v(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
  return Tensor<T>::from_vector(shape, std::move(v));
}

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const StoredTensor& Checkpoint::at(const std::string& name) const {
  if (const auto* t = find(name)) return *t;
  throw FormatError("checkpoint has no tensor '" + name + "'");
}

template <typename T>
void Checkpoint::add(const std::string& name, const Tensor<T>& tensor) {
  StoredTensor s;
  s.name = name;
  s.shape = tensor.shape();
  s.dtype = dtype_of<T>;
  s.values.assign(tensor.data().begin(), tensor.data().end());
  tensors.push_back(std::move(s));
}

template <typename T>
void Checkpoint::add_all(const NamedTensors<T>& named) {
  for (const auto& n : named) add(n.name, n.tensor);
}

void Checkpoint::add_f64_scalar(const std::string& name, double value) {
  tensors.push_back(StoredTensor{name, {}, DType::f64, {value}});
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  std::ostringstream os(std::ios::binary);
  binio::write_magic(os, "EVAC");
  binio::write_le<std::uint32_t>(os, 1);
  if (c.config_text.size() > std::numeric_limits<std::uint32_t>::max())
    throw ArgumentError("checkpoint config text too long");
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(c.config_text.size()));
  os.write(c.config_text.data(), static_cast<std::streamsize>(c.config_text.size()));
  binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(c.tensors.size()));
  std::set<std::string> seen;
  for (const auto& t : c.tensors) {
    if (!seen.insert(t.name).second) throw ArgumentError("duplicate checkpoint tensor name '" + t.name + "'");
    if (t.name.empty() || t.name.size() > 0xFFFF) throw ArgumentError("checkpoint tensor name length out of range");
    if (t.shape.size() > 0xFF) throw ArgumentError("tensor '" + t.name + "' has too many dimensions");
    if (static_cast<std::int64_t>(t.values.size()) != shape_numel(t.shape))
      throw ArgumentError("tensor '" + t.name + "' holds " + std::to_string(t.values.size()) + " values for shape " +
                          shape_str(t.shape));
    binio::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    binio::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) {
      if (d < 0 || d > std::numeric_limits<std::uint32_t>::max())
        throw ArgumentError("tensor '" + t.name + "' extent out of range");
      binio::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    }
    binio::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype));
    if (t.dtype == DType::f32) {
      for (double v : t.values) binio::write_le<float>(os, static_cast<float>(v));
    } else {
      for (double v : t.values) binio::write_le<double>(os, v);
    }
  }
  const auto s = os.str();
  return {s.begin(), s.end()};
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  std::istringstream is(std::string(bytes.begin(), bytes.end()), std::ios::binary);
  binio::expect_magic(is, "EVAC", origin);
  binio::expect_version(is, 1, origin);
  Checkpoint c;
  const auto cfg_len = binio::read_le<std::uint32_t>(is, "config length");
  if (cfg_len > bytes.size()) throw FormatError(origin + ": truncated file while reading config");
  c.config_text.resize(cfg_len);
  if (!is.read(c.config_text.data(), cfg_len)) throw FormatError(origin + ": truncated file while reading config");
  const auto count = binio::read_le<std::uint32_t>(is, "tensor count");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    const auto len = binio::read_le<std::uint16_t>(is, "name length");
    t.name.resize(len);
    if (!is.read(t.name.data(), len)) throw FormatError(origin + ": truncated file while reading tensor name");
    if (!seen.insert(t.name).second) throw FormatError(origin + ": duplicate tensor name '" + t.name + "'");
    const auto rank = binio::read_le<std::uint8_t>(is, "rank");
    std::uint64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      t.shape.push_back(binio::read_le<std::uint32_t>(is, "dims"));
      numel *= static_cast<std::uint64_t>(t.shape.back());
      if (numel > bytes.size()) throw FormatError(origin + ": tensor '" + t.name + "' larger than the file");
    }
    const auto dtype = binio::read_le<std::uint8_t>(is, "dtype");
    if (dtype > 1) throw FormatError(origin + ": tensor '" + t.name + "' has unknown dtype " + std::to_string(dtype));
    t.dtype = static_cast<DType>(dtype);
    t.values.resize(numel);
    for (auto& v : t.values)
      v = t.dtype == DType::f32 ? static_cast<double>(binio::read_le<float>(is, "tensor data"))
                                : binio::read_le<double>(is, "tensor data");
    c.tensors.push_back(std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(origin + ": trailing bytes after tensor table");
  return c;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  const auto bytes = encode_checkpoint(checkpoint);
  const auto tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + tmp + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw FormatError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FormatError("cannot move " + tmp + " to " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path), path); }

template <typename T>
void load_parameters(const Checkpoint& checkpoint, const std::vector<std::pair<std::string, Tensor<T>*>>& slots,
                     const std::string& prefix) {
  std::vector<std::pair<Tensor<T>*, const StoredTensor*>> plan;
  for (const auto& [name, slot] : slots) {
    const auto* src = checkpoint.find(prefix + name);
    if (!src) throw FormatError("checkpoint lacks tensor '" + prefix + name + "'");
    if (src->shape != slot->shape())
      throw ShapeError("tensor '" + prefix + name + "' has shape " + shape_str(src->shape) + " in the checkpoint but " +
                       shape_str(slot->shape()) + " in the model");
    plan.emplace_back(slot, src);
  }
  for (auto& [slot, src] : plan) {
    auto dst = slot->mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src->values[i]);
  }
}

template <typename T>
NamedTensors<T> optimizer_entries(const Checkpoint& checkpoint) {
  NamedTensors<T> out;
  for (const auto& t : checkpoint.tensors)
    if (t.name.starts_with("opt.m.") || t.name.starts_with("opt.v.")) out.push_back({t.name, t.to_tensor<T>()});
  return out;
}

std::int64_t checkpoint_step(const Checkpoint& checkpoint) {
  const auto& t = checkpoint.at("opt.step");
  if (t.values.size() != 1 || t.values[0] < 0 || t.values[0] != std::floor(t.values[0]))
    throw FormatError("checkpoint 'opt.step' is not a non-negative integer scalar");
  return static_cast<std::int64_t>(t.values[0]);
}

template void load_parameters(const Checkpoint&, const std::vector<std::pair<std::string, Tensor<float>*>>&,
                              const std::string&);
template void load_parameters(const Checkpoint&, const std::vector<std::pair<std::string, Tensor<double>*>>&,
                              const std::string&);
template NamedTensors<float> optimizer_entries(const Checkpoint&);
template NamedTensors<double> optimizer_entries(const Checkpoint&);
template Tensor<float> StoredTensor::to_tensor<float>() const;
template Tensor<double> StoredTensor::to_tensor<double>() const;
template void Checkpoint::add<float>(const std::string&, const Tensor<float>&);
template void Checkpoint::add<double>(const std::string&, const Tensor<double>&);
template void Checkpoint::add_all<float>(const NamedTensors<float>&);
template void Checkpoint::add_all<double>(const NamedTensors<double>&);

}  // namespace mimforge

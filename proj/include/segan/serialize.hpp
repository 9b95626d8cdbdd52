#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "segan/tensor.hpp"

namespace segan {

// SGT1 tensor record: "SGT1", u8 dtype, u8 ndim, ndim x u32 dims, payload.
// All integers and payload values are little-endian.
enum class DType : std::uint8_t { kFloat32 = 0, kUInt8 = 1, kFloat64 = 2 };

using AnyTensor = std::variant<Tensor<float>, Tensor<std::uint8_t>, Tensor<double>>;

void write_sgt(std::ostream& os, const Tensor<float>& t);
void write_sgt(std::ostream& os, const Tensor<std::uint8_t>& t);
void write_sgt(std::ostream& os, const Tensor<double>& t);
AnyTensor read_sgt(std::istream& is);

void save_sgt(const std::filesystem::path& path, const AnyTensor& t);
AnyTensor load_sgt(const std::filesystem::path& path);

// Throws IoError if the record holds a different dtype.
template <typename T>
Tensor<T> expect_dtype(AnyTensor any, const std::string& what) {
  if (auto* p = std::get_if<Tensor<T>>(&any)) return std::move(*p);
  throw IoError(what + ": unexpected tensor dtype");
}

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

// Checkpoint: "SGCK", u32 manifest length, JSON manifest, then one SGT1 record
// per tensor in manifest order. The manifest carries a "tensors" array of
// {name, shape} entries; callers add any other keys they need.
void save_checkpoint(const std::filesystem::path& path, nlohmann::json manifest,
                     const std::vector<NamedTensor>& tensors);

struct Checkpoint {
  nlohmann::json manifest;
  std::vector<NamedTensor> tensors;

  const Tensor<float>* find(const std::string& name) const;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace segan

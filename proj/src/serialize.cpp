#include "segan/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace segan {
namespace {

static_assert(std::endian::native == std::endian::little,
              "SGT1 I/O assumes a little-endian host");

constexpr std::array<char, 4> kMagic{'S', 'G', 'T', '1'};
constexpr std::array<char, 4> kCheckpointMagic{'S', 'G', 'C', 'K'};

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("unexpected end of tensor stream");
  return v;
}

template <typename T>
void write_impl(std::ostream& os, const Tensor<T>& t, DType dtype) {
  if (t.rank() > 255) throw IoError("tensor rank exceeds SGT1 limit");
  os.write(kMagic.data(), kMagic.size());
  write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(dtype));
  write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw IoError("failed writing tensor");
}

template <typename T>
Tensor<T> read_payload(std::istream& is, Shape shape) {
  Tensor<T> t(std::move(shape));
  is.read(reinterpret_cast<char*>(t.data().data()),
          static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!is) throw IoError("truncated tensor payload");
  return t;
}

}  // namespace

void write_sgt(std::ostream& os, const Tensor<float>& t) { write_impl(os, t, DType::kFloat32); }
void write_sgt(std::ostream& os, const Tensor<std::uint8_t>& t) { write_impl(os, t, DType::kUInt8); }
void write_sgt(std::ostream& os, const Tensor<double>& t) { write_impl(os, t, DType::kFloat64); }

AnyTensor read_sgt(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw IoError("bad SGT1 magic");
  const auto dtype = read_pod<std::uint8_t>(is);
  if (dtype > static_cast<std::uint8_t>(DType::kFloat64))
    throw IoError("unknown SGT1 dtype " + std::to_string(dtype));
  const auto ndim = read_pod<std::uint8_t>(is);
  Shape shape(ndim);
  for (auto& d : shape) d = read_pod<std::uint32_t>(is);
  switch (static_cast<DType>(dtype)) {
    case DType::kFloat32: return read_payload<float>(is, std::move(shape));
    case DType::kUInt8: return read_payload<std::uint8_t>(is, std::move(shape));
    case DType::kFloat64: return read_payload<double>(is, std::move(shape));
  }
  throw IoError("unknown SGT1 dtype " + std::to_string(dtype));
}

void save_sgt(const std::filesystem::path& path, const AnyTensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  std::visit([&](const auto& x) { write_sgt(os, x); }, t);
}

AnyTensor load_sgt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_sgt(is);
}

void save_checkpoint(const std::filesystem::path& path, nlohmann::json manifest,
                     const std::vector<NamedTensor>& tensors) {
  auto entries = nlohmann::json::array();
  for (const auto& t : tensors) entries.push_back({{"name", t.name}, {"shape", t.value.shape()}});
  manifest["tensors"] = std::move(entries);
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) write_sgt(os, t.value);
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.value;
  return nullptr;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 4> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw IoError("bad checkpoint magic in " + path.string());
  const auto len = read_pod<std::uint32_t>(is);
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw IoError("truncated checkpoint manifest");

  Checkpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("corrupt checkpoint manifest: ") + e.what());
  }
  if (!ck.manifest.is_object() || !ck.manifest.contains("tensors") ||
      !ck.manifest["tensors"].is_array())
    throw IoError("checkpoint manifest has no tensor list");
  for (const auto& entry : ck.manifest["tensors"]) {
    auto value = expect_dtype<float>(read_sgt(is), entry.at("name").get<std::string>());
    if (value.shape() != entry.at("shape").get<Shape>())
      throw IoError("checkpoint tensor shape disagrees with manifest");
    ck.tensors.push_back({entry.at("name").get<std::string>(), std::move(value)});
  }
  return ck;
}

}  // namespace segan

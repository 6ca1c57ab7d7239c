#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "ttnf/error.hpp"
#include "ttnf/tensor_train.hpp"

namespace ttnf {

// Binary container layout (all integers and floats little-endian):
//   "TTNF" | u32 version | u32 D | u64 payload | u64 modes[D] | u64 ranks[D+1]
//   | u8 identity_mask[D] | f64 cores (core 1 first, each row-major)
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_f64(std::vector<std::uint8_t>& out, double x) {
  put_u64(out, std::bit_cast<std::uint64_t>(x));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t get(int width) {
    if (pos_ + width > bytes_.size()) throw IoError("tensor train container is truncated");
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += width;
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  double f64() { return std::bit_cast<double>(u64()); }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode_tt(const TensorTrain<T>& tt) {
  std::vector<std::uint8_t> out{'T', 'T', 'N', 'F'};
  detail::put_u32(out, kContainerVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tt.num_dims()));
  detail::put_u64(out, tt.payload());
  for (auto m : tt.shape().modes) detail::put_u64(out, m);
  for (auto r : tt.rank().values) detail::put_u64(out, r);
  for (std::size_t k = 0; k < tt.num_dims(); ++k) out.push_back(tt.is_identity(k) ? 1 : 0);
  for (std::size_t k = 0; k < tt.num_dims(); ++k)
    for (T x : tt.core(k)) detail::put_f64(out, static_cast<double>(x));
  return out;
}

template <typename T>
TensorTrain<T> decode_tt(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes);
  const char magic[4] = {static_cast<char>(in.u8()), static_cast<char>(in.u8()),
                         static_cast<char>(in.u8()), static_cast<char>(in.u8())};
  if (std::memcmp(magic, "TTNF", 4) != 0) throw IoError("not a tensor train container");
  const auto version = in.u32();
  if (version != kContainerVersion)
    throw IoError("unsupported container version " + std::to_string(version));
  const std::size_t d = in.u32();
  if (d == 0 || d > 4096) throw IoError("implausible number of cores");
  TtShape shape;
  shape.payload = in.u64();
  for (std::size_t k = 0; k < d; ++k) shape.modes.push_back(in.u64());
  TtRank rank;
  for (std::size_t k = 0; k <= d; ++k) rank.values.push_back(in.u64());
  std::vector<bool> mask(d);
  for (std::size_t k = 0; k < d; ++k) mask[k] = in.u8() != 0;
  TensorTrain<T> tt;
  try {
    tt = TensorTrain<T>(shape, rank);
  } catch (const ShapeError& e) {
    throw IoError(std::string("corrupt container: ") + e.what());
  }
  for (std::size_t k = 0; k < d; ++k) {
    tt.set_identity_flag(k, mask[k]);
    for (T& x : tt.core(k)) x = static_cast<T>(in.f64());
  }
  if (!in.done()) throw IoError("trailing bytes after tensor train container");
  return tt;
}

template <typename T>
nlohmann::json tt_metadata(const TensorTrain<T>& tt) {
  nlohmann::json j;
  j["version"] = kContainerVersion;
  j["modes"] = tt.shape().modes;
  j["payload"] = tt.payload();
  j["ranks"] = tt.rank().values;
  j["identity_mask"] = tt.identity_mask();
  j["num_params"] = tt.num_params();
  return j;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

// Writes `path` (binary container) and `path`.json (metadata, merged with
// `extra`).
template <typename T>
void save_tt(const TensorTrain<T>& tt, const std::filesystem::path& path,
             const nlohmann::json& extra = nlohmann::json::object()) {
  write_bytes(path, encode_tt(tt));
  nlohmann::json meta = tt_metadata(tt);
  for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  std::ofstream f(sidecar_path(path));
  if (!f) throw IoError("cannot write " + sidecar_path(path).string());
  f << meta.dump(2) << '\n';
}

template <typename T>
TensorTrain<T> load_tt(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return decode_tt<T>(bytes);
}

inline nlohmann::json load_sidecar(const std::filesystem::path& path) {
  std::ifstream f(sidecar_path(path));
  if (!f) throw IoError("missing metadata sidecar " + sidecar_path(path).string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad metadata sidecar: " + std::string(e.what()));
  }
}

}  // namespace ttnf

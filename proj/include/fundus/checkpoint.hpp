#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fundus/errors.hpp"
#include "fundus/io_util.hpp"
#include "fundus/tensor.hpp"

namespace fundus {

// Layout, all integers little-endian u32:
//   "FNDSCKPT" | version | count | count x (id_len | id | rank | extents... | f32 values...)
inline constexpr std::string_view kCheckpointMagic = "FNDSCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string id;
  Tensor<float> value;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw DataError("checkpoint: truncated file");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [id, t] : tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(id.size()));
    out += id;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) detail::put_f32(out, v);
  }
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.take(kCheckpointMagic.size()) != kCheckpointMagic) throw DataError("checkpoint: bad magic");
  if (const auto v = r.u32(); v != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(v));
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor nt;
    nt.id = std::string(r.take(r.u32()));
    Shape s(r.u32());
    for (auto& e : s) e = r.u32();
    std::vector<float> data(shape_size(s));
    for (auto& v : data) v = r.f32();
    nt.value = Tensor<float>(std::move(s), std::move(data));
    out.push_back(std::move(nt));
  }
  if (!r.done()) throw DataError("checkpoint: trailing bytes");
  return out;
}

inline void save_checkpoint(const fs::path& path, const std::vector<NamedTensor>& tensors) {
  write_file_atomic(path, encode_checkpoint(tensors));
}

inline std::vector<NamedTensor> load_checkpoint(const fs::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace fundus

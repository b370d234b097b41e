#pragma once

// Little-endian encode/decode helpers shared by the EVB1, FRD1 and
// parameter-blob formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <type_traits>

namespace evtforce::binary {

template <typename T>
  requires std::is_integral_v<T>
void put(std::string& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
  }
}

inline void put_f32(std::string& out, float value) {
  put(out, std::bit_cast<std::uint32_t>(value));
}

/// Sequential reader over a byte buffer; every read reports exhaustion
/// instead of throwing so callers can map it to their own error type.
class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
    requires std::is_integral_v<T>
  std::optional<T> get() {
    if (remaining() < sizeof(T)) return std::nullopt;
    using U = std::make_unsigned_t<T>;
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bits |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i]))
              << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(bits);
  }

  std::optional<float> get_f32() {
    auto bits = get<std::uint32_t>();
    if (!bits) return std::nullopt;
    return std::bit_cast<float>(*bits);
  }

  std::optional<std::string_view> take(std::size_t n) {
    if (remaining() < n) return std::nullopt;
    auto view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

/// Whole-file helpers; both return false on I/O failure.
bool read_file(const std::filesystem::path& path, std::string& out);
bool write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace evtforce::binary

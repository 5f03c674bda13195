#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace lmf {

std::uint32_t crc32(std::span<const std::byte> bytes);

// Incremental SHA-256, hex digest. Used for content-addressed cache keys.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const std::byte> bytes);
  void update(std::string_view text);
  std::string hex_digest();

 private:
  void* ctx_;
};

}  // namespace lmf

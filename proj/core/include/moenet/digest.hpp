#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

namespace moenet {

// MD5 (RFC 1321). Used for the 16-byte data fixtures and for config
// digests; collision resistance is irrelevant here, stability is.
class Md5 {
 public:
  Md5();
  void update(const void* data, size_t len);
  std::array<uint8_t, 16> finish();

  static std::array<uint8_t, 16> digest(std::span<const uint8_t> data);
  static std::string hex(std::span<const uint8_t> data);
  static std::string hex_of_string(const std::string& s);

 private:
  void process_block(const uint8_t* block);

  uint32_t a0_, b0_, c0_, d0_;
  uint64_t total_len_ = 0;
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
};

std::string to_hex(std::span<const uint8_t> bytes);

}  // namespace moenet

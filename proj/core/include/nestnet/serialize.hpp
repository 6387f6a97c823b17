#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nestnet/tensor.hpp"

namespace nestnet {

std::uint32_t crc32_bytes(const std::uint8_t* data, std::size_t len,
                          std::uint32_t seed = 0);

/// Little-endian append-only byte buffer.
class ByteSink {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void raw(const void* data, std::size_t len);
  void str(const std::string& s);  // u64 length prefix + bytes
  void tensor(const Tensor& t);    // raw f64 payload, shape carried elsewhere

  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }
  std::size_t size() const { return buf_.size(); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked reader over a byte buffer; running past the end raises a
/// truncation error.
class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(&buf) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  void raw(void* out, std::size_t len);
  std::string str();
  Tensor tensor(std::vector<std::size_t> shape);
  std::vector<std::uint8_t> blob(std::size_t len);

  std::size_t remaining() const { return buf_->size() - pos_; }
  bool done() const { return pos_ == buf_->size(); }

 private:
  void need(std::size_t len) const;
  const std::vector<std::uint8_t>* buf_;
  std::size_t pos_ = 0;
};

// Container layout: magic[4] | u32 version | u64 header length | header
// (UTF-8 JSON) | payload | u32 CRC-32 of everything before the trailer.
void write_container(const std::string& path, const char magic[4],
                     std::uint32_t version, const std::string& header,
                     const std::vector<std::uint8_t>& payload);

struct Container {
  std::string header;
  std::vector<std::uint8_t> payload;
};

// Raises format / version / truncation / checksum errors, each distinct.
Container read_container(const std::string& path, const char magic[4],
                         std::uint32_t version);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path,
                      const std::vector<std::uint8_t>& bytes);

}  // namespace nestnet

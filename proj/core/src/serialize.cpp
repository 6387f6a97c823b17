#include "nestnet/serialize.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "nestnet/error.hpp"

namespace nestnet {

namespace {

std::array<std::uint32_t, 256> make_crc_table() {
  std::array<std::uint32_t, 256> table{};
  for (std::uint32_t i = 0; i < 256; ++i) {
    std::uint32_t c = i;
    for (int k = 0; k < 8; ++k) {
      c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    }
    table[i] = c;
  }
  return table;
}

}  // namespace

std::uint32_t crc32_bytes(const std::uint8_t* data, std::size_t len,
                          std::uint32_t seed) {
  static const std::array<std::uint32_t, 256> table = make_crc_table();
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) {
    c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  }
  return c ^ 0xFFFFFFFFu;
}

void ByteSink::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
}

void ByteSink::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
}

void ByteSink::f64(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  u64(bits);
}

void ByteSink::raw(const void* data, std::size_t len) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  buf_.insert(buf_.end(), p, p + len);
}

void ByteSink::str(const std::string& s) {
  u64(s.size());
  raw(s.data(), s.size());
}

void ByteSink::tensor(const Tensor& t) {
  for (double v : t.values()) f64(v);
}

void ByteReader::need(std::size_t len) const {
  if (pos_ + len > buf_->size()) {
    fail(ErrorKind::truncation, "file truncated: wanted " +
                                    std::to_string(len) + " bytes, " +
                                    std::to_string(remaining()) + " left");
  }
}

std::uint8_t ByteReader::u8() {
  need(1);
  return (*buf_)[pos_++];
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t((*buf_)[pos_++]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t((*buf_)[pos_++]) << (8 * i);
  return v;
}

double ByteReader::f64() {
  const std::uint64_t bits = u64();
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

void ByteReader::raw(void* out, std::size_t len) {
  need(len);
  std::memcpy(out, buf_->data() + pos_, len);
  pos_ += len;
}

std::string ByteReader::str() {
  const std::uint64_t len = u64();
  need(len);
  std::string s(reinterpret_cast<const char*>(buf_->data() + pos_), len);
  pos_ += len;
  return s;
}

Tensor ByteReader::tensor(std::vector<std::size_t> shape) {
  const std::size_t n = shape_numel(shape);
  need(n * 8);
  std::vector<double> data(n);
  for (std::size_t i = 0; i < n; ++i) data[i] = f64();
  return Tensor::from_data(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> ByteReader::blob(std::size_t len) {
  need(len);
  std::vector<std::uint8_t> out(buf_->begin() + pos_,
                                buf_->begin() + pos_ + len);
  pos_ += len;
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::format, "cannot open " + path);
  in.seekg(0, std::ios::end);
  const std::streamoff len = in.tellg();
  in.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(len));
  in.read(reinterpret_cast<char*>(bytes.data()), len);
  if (!in) fail(ErrorKind::truncation, "short read on " + path);
  return bytes;
}

void write_file_bytes(const std::string& path,
                      const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::runtime, "cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamoff>(bytes.size()));
  if (!out) fail(ErrorKind::runtime, "write failed on " + path);
}

void write_container(const std::string& path, const char magic[4],
                     std::uint32_t version, const std::string& header,
                     const std::vector<std::uint8_t>& payload) {
  ByteSink sink;
  sink.raw(magic, 4);
  sink.u32(version);
  sink.str(header);
  sink.raw(payload.data(), payload.size());
  const std::uint32_t crc = crc32_bytes(sink.bytes().data(), sink.size());
  sink.u32(crc);
  write_file_bytes(path, sink.bytes());
}

Container read_container(const std::string& path, const char magic[4],
                         std::uint32_t version) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() < 4 + 4 + 8 + 4) {
    fail(ErrorKind::truncation, path + ": too short for a container");
  }
  if (std::memcmp(bytes.data(), magic, 4) != 0) {
    fail(ErrorKind::format, path + ": bad magic");
  }
  ByteReader rd(bytes);
  char got_magic[4];
  rd.raw(got_magic, 4);
  const std::uint32_t got_version = rd.u32();
  if (got_version != version) {
    fail(ErrorKind::version, path + ": file version " +
                                 std::to_string(got_version) +
                                 ", reader supports " + std::to_string(version));
  }
  const std::uint32_t stored_crc =
      std::uint32_t(bytes[bytes.size() - 4]) |
      std::uint32_t(bytes[bytes.size() - 3]) << 8 |
      std::uint32_t(bytes[bytes.size() - 2]) << 16 |
      std::uint32_t(bytes[bytes.size() - 1]) << 24;
  const std::uint32_t actual_crc = crc32_bytes(bytes.data(), bytes.size() - 4);
  if (stored_crc != actual_crc) {
    fail(ErrorKind::checksum, path + ": checksum mismatch");
  }
  Container c;
  c.header = rd.str();
  c.payload = rd.blob(rd.remaining() - 4);
  return c;
}

}  // namespace nestnet

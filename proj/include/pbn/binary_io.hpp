#pragma once

// Little-endian binary container shared by model files:
//
//   "PBN1" [u32 version] { [4-byte tag][u64 length][payload] }*
//
// plus FNV-1a hashing used for checksums and config hashes.

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace pbn {

using Tag = std::array<char, 4>;

constexpr Tag make_tag(const char (&s)[5]) { return {s[0], s[1], s[2], s[3]}; }

struct Section {
  Tag tag;
  std::vector<std::uint8_t> payload;
};

inline constexpr std::uint32_t kContainerVersion = 1;

void write_container(const std::filesystem::path& path, const std::vector<Section>& sections);
std::vector<Section> read_container(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_container(const std::vector<Section>& sections);
/// Throws FormatError carrying the byte offset of the first defect.
std::vector<Section> decode_container(const std::vector<std::uint8_t>& bytes);

std::uint64_t fnv1a64(const void* data, std::size_t size,
                      std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view s);
std::string hex64(std::uint64_t v);

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v);
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v);
  void f64(double v);
  void vec(const Eigen::VectorXd& v);
  void mat(const Eigen::MatrixXd& m);  // rows, cols, column-major data
  void raw(const void* p, std::size_t n);

  const std::vector<std::uint8_t>& bytes() const { return bytes_; }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  /// base_offset positions error offsets within the enclosing file.
  ByteReader(const std::vector<std::uint8_t>& bytes, std::size_t base_offset = 0)
      : bytes_(bytes), base_(base_offset) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::uint64_t u64();
  double f64();
  Eigen::VectorXd vec();
  Eigen::MatrixXd mat();
  void raw(void* p, std::size_t n);

  std::size_t offset() const { return base_ + pos_; }
  bool done() const { return pos_ == bytes_.size(); }
  [[noreturn]] void fail(const std::string& what) const;

 private:
  void need(std::size_t n) const;
  const std::vector<std::uint8_t>& bytes_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

}  // namespace pbn

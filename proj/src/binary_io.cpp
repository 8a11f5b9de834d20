#include "pbn/binary_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "pbn/error.hpp"

namespace pbn {
namespace {

constexpr char kMagic[4] = {'P', 'B', 'N', '1'};
// Guards against absurd lengths in corrupt files before allocating.
constexpr std::uint64_t kMaxElements = 1ULL << 32;

static_assert(std::endian::native == std::endian::little, "little-endian host required");

}  // namespace

void ByteWriter::u32(std::uint32_t v) { raw(&v, sizeof v); }
void ByteWriter::u64(std::uint64_t v) { raw(&v, sizeof v); }
void ByteWriter::f64(double v) { raw(&v, sizeof v); }

void ByteWriter::raw(const void* p, std::size_t n) {
  const auto* b = static_cast<const std::uint8_t*>(p);
  bytes_.insert(bytes_.end(), b, b + n);
}

void ByteWriter::vec(const Eigen::VectorXd& v) {
  u64(static_cast<std::uint64_t>(v.size()));
  raw(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()));
}

void ByteWriter::mat(const Eigen::MatrixXd& m) {
  u64(static_cast<std::uint64_t>(m.rows()));
  u64(static_cast<std::uint64_t>(m.cols()));
  raw(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
}

void ByteReader::fail(const std::string& what) const { throw FormatError(what, offset()); }

void ByteReader::need(std::size_t n) const {
  if (bytes_.size() - pos_ < n) fail("truncated data (need " + std::to_string(n) + " bytes)");
}

void ByteReader::raw(void* p, std::size_t n) {
  need(n);
  std::memcpy(p, bytes_.data() + pos_, n);
  pos_ += n;
}

std::uint8_t ByteReader::u8() {
  need(1);
  return bytes_[pos_++];
}

std::uint32_t ByteReader::u32() {
  std::uint32_t v;
  raw(&v, sizeof v);
  return v;
}

std::uint64_t ByteReader::u64() {
  std::uint64_t v;
  raw(&v, sizeof v);
  return v;
}

double ByteReader::f64() {
  double v;
  raw(&v, sizeof v);
  return v;
}

Eigen::VectorXd ByteReader::vec() {
  const std::uint64_t n = u64();
  if (n > kMaxElements) fail("vector length out of range");
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  raw(v.data(), sizeof(double) * n);
  return v;
}

Eigen::MatrixXd ByteReader::mat() {
  const std::uint64_t r = u64(), c = u64();
  if (r > kMaxElements || c > kMaxElements || r * c > kMaxElements) fail("matrix shape out of range");
  Eigen::MatrixXd m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  raw(m.data(), sizeof(double) * r * c);
  return m;
}

std::vector<std::uint8_t> encode_container(const std::vector<Section>& sections) {
  ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(kContainerVersion);
  for (const auto& s : sections) {
    w.raw(s.tag.data(), 4);
    w.u64(s.payload.size());
    w.raw(s.payload.data(), s.payload.size());
  }
  return w.take();
}

std::vector<Section> decode_container(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic, expected PBN1", 0);
  const std::uint32_t version = r.u32();
  if (version != kContainerVersion) {
    throw FormatError("unsupported container version " + std::to_string(version), 4);
  }
  std::vector<Section> out;
  while (!r.done()) {
    Section s;
    r.raw(s.tag.data(), 4);
    const std::size_t at = r.offset();
    const std::uint64_t len = r.u64();
    if (len > bytes.size()) throw FormatError("section length exceeds file size", at);
    s.payload.resize(len);
    r.raw(s.payload.data(), len);
    out.push_back(std::move(s));
  }
  return out;
}

void write_container(const std::filesystem::path& path, const std::vector<Section>& sections) {
  const auto bytes = encode_container(sections);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for " + path.string());
}

std::vector<Section> read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

std::uint64_t fnv1a64(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace pbn

#include <fmt/format.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "lmf/divergences.hpp"
#include "lmf/error.hpp"
#include "lmf/hashing.hpp"

namespace lmf {

static_assert(std::endian::native == std::endian::little,
              "matrix cache I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'L', 'M', 'F', 'D'};
constexpr std::uint8_t kFlagSelfMasked = 0x1;
constexpr std::uint8_t kFlagExplicitBandwidth = 0x2;

class Writer {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::byte*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    const auto* p = reinterpret_cast<const std::byte*>(s.data());
    bytes_.insert(bytes_.end(), p, p + s.size());
  }
  std::vector<std::byte>& bytes() { return bytes_; }

 private:
  std::vector<std::byte> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::byte> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string get_string() {
    auto len = get<std::uint32_t>();
    need(len);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
    pos_ += len;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorCode::kTruncated, "matrix cache: truncated");
  }
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::byte> serialize_matrix(const DistanceMatrix& m) {
  const std::size_t n = m.ids.size();
  if (m.values.size() != n * n) {
    throw Error(ErrorCode::kDimensionMismatch, "matrix values do not match id count");
  }
  Writer w;
  for (char c : kMagic) w.put(c);
  w.put(kMatrixFormatVersion);
  w.put(static_cast<std::uint8_t>(m.metric.tag));
  std::uint8_t flags = 0;
  if (m.self_masked) flags |= kFlagSelfMasked;
  if (m.metric.bandwidth) flags |= kFlagExplicitBandwidth;
  w.put(flags);
  w.put(m.metric.epsilon);
  w.put(m.metric.bandwidth.value_or(0.0));
  w.put(m.metric.seed);
  w.put(m.metric.sample_cap);
  w.put(m.pair_evaluations);
  w.put(static_cast<std::uint32_t>(n));
  for (const auto& id : m.ids) w.put_string(id);
  for (double v : m.values) w.put(v);
  auto& bytes = w.bytes();
  w.put(crc32(std::span(bytes).subspan(sizeof(kMagic))));
  return std::move(bytes);
}

DistanceMatrix deserialize_matrix(std::span<const std::byte> bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::kParse, "matrix cache: bad magic");
  }
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint32_t)) {
    throw Error(ErrorCode::kChecksum, "matrix cache: checksum mismatch (file too short)");
  }
  auto body = bytes.subspan(sizeof(kMagic), bytes.size() - sizeof(kMagic) - sizeof(std::uint32_t));
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(stored), sizeof(stored));
  if (crc32(body) != stored) throw Error(ErrorCode::kChecksum, "matrix cache: checksum mismatch");

  Reader r(body);
  auto version = r.get<std::uint16_t>();
  if (version != kMatrixFormatVersion) {
    throw Error(ErrorCode::kVersion, fmt::format("matrix cache: version {} but expected {}",
                                                 version, kMatrixFormatVersion));
  }
  DistanceMatrix m;
  auto tag = r.get<std::uint8_t>();
  if (tag > static_cast<std::uint8_t>(Metric::kMMD)) {
    throw Error(ErrorCode::kParse, fmt::format("matrix cache: unknown metric tag {}", tag));
  }
  m.metric.tag = static_cast<Metric>(tag);
  auto flags = r.get<std::uint8_t>();
  m.self_masked = (flags & kFlagSelfMasked) != 0;
  m.metric.epsilon = r.get<double>();
  double bandwidth = r.get<double>();
  if (flags & kFlagExplicitBandwidth) m.metric.bandwidth = bandwidth;
  m.metric.seed = r.get<std::uint64_t>();
  m.metric.sample_cap = r.get<std::uint32_t>();
  m.pair_evaluations = r.get<std::uint64_t>();
  auto n = r.get<std::uint32_t>();
  m.ids.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) m.ids.push_back(r.get_string());
  if (r.remaining() != static_cast<std::size_t>(n) * n * sizeof(double)) {
    throw Error(ErrorCode::kParse, "matrix cache: payload size does not match N");
  }
  m.values.resize(static_cast<std::size_t>(n) * n);
  for (auto& v : m.values) v = r.get<double>();
  return m;
}

void save_matrix(const DistanceMatrix& m, const std::filesystem::path& path) {
  auto bytes = serialize_matrix(m);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write '{}'", tmp.string()));
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorCode::kIo, fmt::format("write failed for '{}'", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

DistanceMatrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, fmt::format("cannot open '{}'", path.string()));
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_matrix(std::as_bytes(std::span(raw)));
}

}  // namespace lmf

#include "lmf/safetensors.hpp"

#include <fcntl.h>
#include <fmt/format.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

#include "lmf/error.hpp"

namespace lmf {

static_assert(std::endian::native == std::endian::little,
              "tensor file I/O assumes a little-endian host");

MappedFile::MappedFile(const std::filesystem::path& path) {
  int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) throw Error(ErrorCode::kIo, fmt::format("cannot open '{}'", path.string()));
  struct stat st {};
  if (::fstat(fd, &st) != 0) {
    ::close(fd);
    throw Error(ErrorCode::kIo, fmt::format("cannot stat '{}'", path.string()));
  }
  size_ = static_cast<std::size_t>(st.st_size);
  if (size_ > 0) {
    void* p = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd, 0);
    if (p == MAP_FAILED) {
      ::close(fd);
      throw Error(ErrorCode::kIo, fmt::format("cannot map '{}'", path.string()));
    }
    data_ = static_cast<const std::byte*>(p);
  }
  ::close(fd);
}

MappedFile::~MappedFile() {
  if (data_ != nullptr) ::munmap(const_cast<std::byte*>(data_), size_);
}

MappedFile::MappedFile(MappedFile&& other) noexcept
    : data_(std::exchange(other.data_, nullptr)), size_(std::exchange(other.size_, 0)) {}

MappedFile& MappedFile::operator=(MappedFile&& other) noexcept {
  if (this != &other) {
    if (data_ != nullptr) ::munmap(const_cast<std::byte*>(data_), size_);
    data_ = std::exchange(other.data_, nullptr);
    size_ = std::exchange(other.size_, 0);
  }
  return *this;
}

std::size_t TensorInfo::numel() const {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F64" || dtype == "I64" || dtype == "U64") return 8;
  if (dtype == "F32" || dtype == "I32" || dtype == "U32") return 4;
  if (dtype == "F16" || dtype == "BF16" || dtype == "I16" || dtype == "U16") return 2;
  if (dtype == "I8" || dtype == "U8" || dtype == "BOOL" || dtype == "F8_E4M3" ||
      dtype == "F8_E5M2") {
    return 1;
  }
  throw Error(ErrorCode::kUnsupportedDtype, fmt::format("unknown dtype '{}'", dtype));
}

SafetensorsFile SafetensorsFile::open(const std::filesystem::path& path) {
  SafetensorsFile f(path, MappedFile(path));
  auto bytes = f.file_.bytes();
  const std::string where = path.string();
  if (bytes.size() < sizeof(std::uint64_t)) {
    throw Error(ErrorCode::kTruncated, fmt::format("{}: truncated header length", where));
  }
  std::uint64_t header_len;
  std::memcpy(&header_len, bytes.data(), sizeof(header_len));
  if (header_len > bytes.size() - sizeof(header_len)) {
    throw Error(ErrorCode::kTruncated, fmt::format("{}: truncated header", where));
  }
  f.data_start_ = sizeof(header_len) + header_len;
  std::string_view header(reinterpret_cast<const char*>(bytes.data() + sizeof(header_len)),
                          header_len);

  // nlohmann keeps the last of duplicate keys silently, so catch them while parsing.
  std::set<std::string> seen_keys;
  std::string duplicate;
  nlohmann::json::parser_callback_t on_event = [&](int depth, nlohmann::json::parse_event_t event,
                                                   nlohmann::json& parsed) {
    if (depth == 1 && event == nlohmann::json::parse_event_t::key) {
      auto key = parsed.get<std::string>();
      if (!seen_keys.insert(key).second && duplicate.empty()) duplicate = key;
    }
    return true;
  };
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(header, on_event);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kParse, fmt::format("{}: malformed header: {}", where, e.what()));
  }
  if (!duplicate.empty()) {
    throw Error(ErrorCode::kDuplicateId,
                fmt::format("{}: duplicate tensor name '{}'", where, duplicate));
  }
  if (!doc.is_object()) throw Error(ErrorCode::kParse, fmt::format("{}: header is not an object", where));

  const std::size_t payload_size = bytes.size() - f.data_start_;
  for (const auto& [name, entry] : doc.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) {
        f.metadata_[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
      continue;
    }
    TensorInfo t;
    t.name = name;
    try {
      t.dtype = entry.at("dtype").get<std::string>();
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
      if (offsets.size() != 2) throw Error(ErrorCode::kParse, "data_offsets needs two entries");
      t.begin = offsets[0];
      t.end = offsets[1];
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kParse,
                  fmt::format("{}: malformed entry for tensor '{}': {}", where, name, e.what()));
    }
    if (t.end < t.begin) {
      throw Error(ErrorCode::kParse, fmt::format("{}: tensor '{}' has inverted offsets", where, name));
    }
    if (t.end > payload_size) {
      throw Error(ErrorCode::kTruncated,
                  fmt::format("{}: tensor '{}' extends past end of file", where, name));
    }
    f.tensors_.push_back(std::move(t));
  }
  std::sort(f.tensors_.begin(), f.tensors_.end(),
            [](const TensorInfo& a, const TensorInfo& b) { return a.name < b.name; });
  return f;
}

std::span<const std::byte> SafetensorsFile::payload(const TensorInfo& t) const {
  return file_.bytes().subspan(data_start_ + t.begin, t.end - t.begin);
}

void write_safetensors(const std::filesystem::path& path, std::vector<TensorData> tensors,
                       const std::map<std::string, std::string>& metadata) {
  std::sort(tensors.begin(), tensors.end(),
            [](const TensorData& a, const TensorData& b) { return a.name < b.name; });
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& t = tensors[i];
    if (i > 0 && tensors[i - 1].name == t.name) {
      throw Error(ErrorCode::kDuplicateId, fmt::format("duplicate tensor name '{}'", t.name));
    }
    std::size_t numel = 1;
    for (auto d : t.shape) numel *= d;
    if (numel * dtype_size(t.dtype) != t.bytes.size()) {
      throw Error(ErrorCode::kDimensionMismatch,
                  fmt::format("tensor '{}': {} bytes do not match shape", t.name, t.bytes.size()));
    }
    header[t.name] = {{"dtype", t.dtype},
                      {"shape", t.shape},
                      {"data_offsets", {offset, offset + t.bytes.size()}}};
    offset += t.bytes.size();
  }
  std::string text = header.dump();
  while ((sizeof(std::uint64_t) + text.size()) % 8 != 0) text.push_back(' ');
  const std::uint64_t header_len = text.size();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, fmt::format("cannot write '{}'", tmp.string()));
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors) {
      out.write(reinterpret_cast<const char*>(t.bytes.data()),
                static_cast<std::streamsize>(t.bytes.size()));
    }
    if (!out) throw Error(ErrorCode::kIo, fmt::format("write failed for '{}'", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace lmf

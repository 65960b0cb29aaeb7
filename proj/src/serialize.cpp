#include "remic/serialize.hpp"

#include <cstring>
#include <fstream>

namespace remic {

namespace {

constexpr char kRmtMagic[4] = {'R', 'M', 'T', 'D'};
constexpr uint32_t kRmtVersion = 1;
constexpr char kBlobMagic[8] = {'R', 'M', 'C', 'K', 'P', 'T', '0', '\n'};
constexpr uint32_t kBlobVersion = 1;

// The project targets little-endian hosts; all payloads are written raw.
void put_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

uint32_t get_u32(std::istream& is, const std::string& path) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error(path + ": corrupt file (truncated field)");
  return v;
}

void put_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), 8);
}

uint64_t get_u64(std::istream& is, const std::string& path) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  if (!is) throw std::runtime_error(path + ": corrupt file (truncated field)");
  return v;
}

template <typename T>
void write_rmt_impl(const std::string& path, const Tensor4<T>& t, uint32_t dtype,
                    int rank) {
  if (rank < 1 || rank > 4)
    throw std::invalid_argument("write_rmt: rank must be in [1, 4]");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os.write(kRmtMagic, 4);
  put_u32(os, kRmtVersion);
  put_u32(os, dtype);
  put_u32(os, static_cast<uint32_t>(rank));
  // Dims are the trailing `rank` entries of the (b, c, h, w) shape; leading
  // dropped dims must be 1.
  std::array<uint32_t, 4> dims{0, 0, 0, 0};
  for (int i = 0; i < 4 - rank; ++i)
    if (t.shape[i] != 1)
      throw std::invalid_argument("write_rmt: cannot drop non-unit dim for rank " +
                                  std::to_string(rank));
  for (int i = 0; i < rank; ++i)
    dims[i] = static_cast<uint32_t>(t.shape[4 - rank + i]);
  for (int i = 0; i < 4; ++i) put_u32(os, dims[i]);
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  if (!os) throw std::runtime_error(path + ": short write");
}

template <typename T>
Tensor4<T> read_rmt_impl(const std::string& path, uint32_t want_dtype) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(path + ": cannot open");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kRmtMagic, 4) != 0)
    throw std::runtime_error(path + ": malformed header (bad magic)");
  const uint32_t version = get_u32(is, path);
  if (version != kRmtVersion)
    throw std::runtime_error(path + ": unsupported format version " +
                             std::to_string(version));
  const uint32_t dtype = get_u32(is, path);
  if (dtype != want_dtype)
    throw std::runtime_error(path + ": dtype code " + std::to_string(dtype) +
                             ", expected " + std::to_string(want_dtype));
  const uint32_t rank = get_u32(is, path);
  if (rank < 1 || rank > 4) throw std::runtime_error(path + ": bad rank");
  std::array<uint32_t, 4> dims{};
  for (int i = 0; i < 4; ++i) dims[i] = get_u32(is, path);
  std::array<int, 4> shape{1, 1, 1, 1};
  for (uint32_t i = 0; i < rank; ++i) {
    if (dims[i] == 0) throw std::runtime_error(path + ": zero dimension");
    shape[4 - rank + i] = static_cast<int>(dims[i]);
  }
  Tensor4<T> t(shape[0], shape[1], shape[2], shape[3]);
  is.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(T)));
  if (static_cast<size_t>(is.gcount()) != t.data.size() * sizeof(T))
    throw std::runtime_error(path + ": corrupt file (truncated payload)");
  return t;
}

}  // namespace

void write_rmt(const std::string& path, const Tensor4f& t, int rank) {
  write_rmt_impl(path, t, 1, rank);
}
void write_rmt(const std::string& path, const Tensor4i& t, int rank) {
  write_rmt_impl(path, t, 2, rank);
}
Tensor4f read_rmt_f32(const std::string& path) { return read_rmt_impl<float>(path, 1); }
Tensor4i read_rmt_i32(const std::string& path) { return read_rmt_impl<int32_t>(path, 2); }

void BlobWriter::add_text(const std::string& name, const std::string& text) {
  Section s;
  s.name = name;
  s.kind = 2;
  s.bytes.assign(text.begin(), text.end());
  sections_.push_back(std::move(s));
}

void BlobWriter::add_tensor(const std::string& name, const Tensor4f& t) {
  Section s;
  s.name = name;
  s.kind = 1;
  s.shape = t.shape;
  s.bytes.resize(t.data.size() * sizeof(float));
  std::memcpy(s.bytes.data(), t.data.data(), s.bytes.size());
  sections_.push_back(std::move(s));
}

void BlobWriter::write(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os.write(kBlobMagic, 8);
  put_u32(os, kBlobVersion);
  put_u32(os, static_cast<uint32_t>(sections_.size()));
  for (const auto& s : sections_) {
    put_u32(os, static_cast<uint32_t>(s.name.size()));
    os.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    put_u32(os, s.kind);
    for (int i = 0; i < 4; ++i) put_u32(os, static_cast<uint32_t>(s.shape[i]));
    put_u64(os, s.bytes.size());
    os.write(s.bytes.data(), static_cast<std::streamsize>(s.bytes.size()));
  }
  if (!os) throw std::runtime_error(path + ": short write");
}

BlobReader::BlobReader(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(path + ": cannot open");
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kBlobMagic, 8) != 0)
    throw std::runtime_error(path + ": malformed header (bad magic)");
  const uint32_t version = get_u32(is, path);
  if (version != kBlobVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " +
                             std::to_string(version));
  const uint32_t count = get_u32(is, path);
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = get_u32(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw std::runtime_error(path + ": corrupt file (truncated name)");
    Section s;
    s.kind = get_u32(is, path);
    for (int d = 0; d < 4; ++d) s.shape[d] = static_cast<int>(get_u32(is, path));
    const uint64_t len = get_u64(is, path);
    s.bytes.resize(len);
    is.read(s.bytes.data(), static_cast<std::streamsize>(len));
    if (static_cast<uint64_t>(is.gcount()) != len)
      throw std::runtime_error(path + ": corrupt file (truncated section '" + name + "')");
    if (s.kind == 2) s.text.assign(s.bytes.begin(), s.bytes.end());
    order_.push_back(name);
    sections_.emplace(std::move(name), std::move(s));
  }
}

bool BlobReader::has(const std::string& name) const {
  return sections_.count(name) != 0;
}

const std::string& BlobReader::text(const std::string& name) const {
  auto it = sections_.find(name);
  if (it == sections_.end() || it->second.kind != 2)
    throw std::runtime_error("checkpoint: missing text section '" + name + "'");
  return it->second.text;
}

Tensor4f BlobReader::tensor(const std::string& name) const {
  auto it = sections_.find(name);
  if (it == sections_.end() || it->second.kind != 1)
    throw std::runtime_error("checkpoint: missing tensor section '" + name + "'");
  const Section& s = it->second;
  Tensor4f t(s.shape[0], s.shape[1], s.shape[2], s.shape[3]);
  if (s.bytes.size() != t.data.size() * sizeof(float))
    throw std::runtime_error("checkpoint: section '" + name + "' payload size mismatch");
  std::memcpy(t.data.data(), s.bytes.data(), s.bytes.size());
  return t;
}

}  // namespace remic

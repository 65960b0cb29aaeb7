#ifndef REMIC_SERIALIZE_HPP
#define REMIC_SERIALIZE_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "remic/tensor.hpp"

namespace remic {

// Flat binary tensor file: 32-byte header (magic "RMTD", version, dtype code,
// rank, dims) followed by a row-major little-endian payload.
// dtype codes: 1 = float32, 2 = int32, 3 = float64.
void write_rmt(const std::string& path, const Tensor4f& t, int rank = 4);
void write_rmt(const std::string& path, const Tensor4i& t, int rank = 4);
Tensor4f read_rmt_f32(const std::string& path);
Tensor4i read_rmt_i32(const std::string& path);

// Named-section binary container used for checkpoints: versioned header with
// a magic string and format version, then sections in the exact order they
// were added. Section payloads are either raw float32 tensors or UTF-8 text.
// Round trips are bit-exact.
class BlobWriter {
 public:
  void add_text(const std::string& name, const std::string& text);
  void add_tensor(const std::string& name, const Tensor4f& t);
  void write(const std::string& path) const;

 private:
  struct Section {
    std::string name;
    uint32_t kind = 0;  // 1 = tensor f32, 2 = text
    std::array<int, 4> shape{};
    std::vector<char> bytes;
  };
  std::vector<Section> sections_;
};

class BlobReader {
 public:
  explicit BlobReader(const std::string& path);

  bool has(const std::string& name) const;
  const std::string& text(const std::string& name) const;
  Tensor4f tensor(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }

 private:
  struct Section {
    uint32_t kind = 0;
    std::array<int, 4> shape{};
    std::vector<char> bytes;
    std::string text;
  };
  std::map<std::string, Section> sections_;
  std::vector<std::string> order_;
};

}  // namespace remic

#endif

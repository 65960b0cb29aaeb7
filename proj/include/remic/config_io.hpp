#ifndef REMIC_CONFIG_IO_HPP
#define REMIC_CONFIG_IO_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace remic {

// Ordered key-value text file: one `key = value` per line, '#' comments.
// Getters record which keys were consumed so callers can reject unknown keys
// with a precise message.
class KvFile {
 public:
  KvFile() = default;

  static KvFile parse_string(const std::string& text, const std::string& origin = "<string>");
  static KvFile parse_file(const std::string& path);

  bool has(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key) const;
  bool get_bool(const std::string& key, bool fallback) const;

  void set_string(const std::string& key, const std::string& value);
  void set_int(const std::string& key, int64_t value);
  void set_double(const std::string& key, double value);
  void set_bool(const std::string& key, bool value);

  // Throws if any key present in the file was never consumed by a getter.
  void reject_unknown_keys() const;

  std::string serialize() const;
  void write_file(const std::string& path) const;

  const std::vector<std::string>& keys() const { return order_; }

 private:
  std::string origin_ = "<empty>";
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
  mutable std::map<std::string, bool> consumed_;

  const std::string& raw(const std::string& key) const;
};

}  // namespace remic

#endif

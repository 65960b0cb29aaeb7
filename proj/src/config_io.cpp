#include "remic/config_io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace remic {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

// Doubles are printed with enough digits to round-trip exactly.
std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

KvFile KvFile::parse_string(const std::string& text, const std::string& origin) {
  KvFile kv;
  kv.origin_ = origin;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                               ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
    if (kv.values_.count(key))
      throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                               ": duplicate key '" + key + "'");
    kv.values_[key] = value;
    kv.order_.push_back(key);
  }
  return kv;
}

KvFile KvFile::parse_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error(path + ": cannot open");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_string(buf.str(), path);
}

bool KvFile::has(const std::string& key) const { return values_.count(key) != 0; }

const std::string& KvFile::raw(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end())
    throw std::runtime_error(origin_ + ": missing required key '" + key + "'");
  consumed_[key] = true;
  return it->second;
}

std::string KvFile::get_string(const std::string& key) const { return raw(key); }

std::string KvFile::get_string(const std::string& key, const std::string& fallback) const {
  if (!has(key)) return fallback;
  return raw(key);
}

int64_t KvFile::get_int(const std::string& key) const {
  const std::string& s = raw(key);
  size_t pos = 0;
  int64_t v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    throw std::runtime_error(origin_ + ": key '" + key + "' is not an integer: '" + s + "'");
  }
  if (pos != s.size())
    throw std::runtime_error(origin_ + ": key '" + key + "' is not an integer: '" + s + "'");
  return v;
}

int64_t KvFile::get_int(const std::string& key, int64_t fallback) const {
  if (!has(key)) return fallback;
  return get_int(key);
}

double KvFile::get_double(const std::string& key) const {
  const std::string& s = raw(key);
  size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw std::runtime_error(origin_ + ": key '" + key + "' is not a number: '" + s + "'");
  }
  if (pos != s.size() || !std::isfinite(v))
    throw std::runtime_error(origin_ + ": key '" + key + "' is not a finite number: '" + s + "'");
  return v;
}

double KvFile::get_double(const std::string& key, double fallback) const {
  if (!has(key)) return fallback;
  return get_double(key);
}

bool KvFile::get_bool(const std::string& key) const {
  const std::string& s = raw(key);
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw std::runtime_error(origin_ + ": key '" + key + "' is not a boolean: '" + s + "'");
}

bool KvFile::get_bool(const std::string& key, bool fallback) const {
  if (!has(key)) return fallback;
  return get_bool(key);
}

void KvFile::set_string(const std::string& key, const std::string& value) {
  if (!values_.count(key)) order_.push_back(key);
  values_[key] = value;
}

void KvFile::set_int(const std::string& key, int64_t value) {
  set_string(key, std::to_string(value));
}

void KvFile::set_double(const std::string& key, double value) {
  set_string(key, format_double(value));
}

void KvFile::set_bool(const std::string& key, bool value) {
  set_string(key, value ? "true" : "false");
}

void KvFile::reject_unknown_keys() const {
  std::string unknown;
  for (const auto& k : order_) {
    if (!consumed_.count(k)) {
      if (!unknown.empty()) unknown += ", ";
      unknown += "'" + k + "'";
    }
  }
  if (!unknown.empty())
    throw std::runtime_error(origin_ + ": unknown key(s): " + unknown);
}

std::string KvFile::serialize() const {
  std::ostringstream os;
  for (const auto& k : order_) os << k << " = " << values_.at(k) << "\n";
  return os.str();
}

void KvFile::write_file(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << serialize();
  if (!os) throw std::runtime_error(path + ": short write");
}

}  // namespace remic

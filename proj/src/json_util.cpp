#include "cotrain/json_util.hpp"

#include <fstream>
#include <sstream>

#include "cotrain/error.hpp"

namespace cotrain::json_util {

std::string join(const std::string& path, std::string_view key) {
  if (path.empty()) return std::string(key);
  return path + "." + std::string(key);
}

std::string index(const std::string& path, std::size_t i) {
  return path + "[" + std::to_string(i) + "]";
}

const json& require(const json& obj, std::string_view key, const std::string& path) {
  if (!obj.is_object()) throw ParseError("expected object at " + (path.empty() ? "<root>" : path));
  auto it = obj.find(key);
  if (it == obj.end()) throw ParseError("missing field " + join(path, key));
  return *it;
}

const json* optional(const json& obj, std::string_view key) {
  if (!obj.is_object()) return nullptr;
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return nullptr;
  return &*it;
}

double number(const json& v, const std::string& path) {
  if (!v.is_number()) throw ParseError("expected number at " + path);
  return v.get<double>();
}

long long integer(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw ParseError("expected integer at " + path);
  return v.get<long long>();
}

std::string string(const json& v, const std::string& path) {
  if (!v.is_string()) throw ParseError("expected string at " + path);
  return v.get<std::string>();
}

bool boolean(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw ParseError("expected boolean at " + path);
  return v.get<bool>();
}

const json& object(const json& v, const std::string& path) {
  if (!v.is_object()) throw ParseError("expected object at " + path);
  return v;
}

const json& array(const json& v, const std::string& path) {
  if (!v.is_array()) throw ParseError("expected array at " + path);
  return v;
}

double require_number(const json& obj, std::string_view key, const std::string& path) {
  return number(require(obj, key, path), join(path, key));
}

long long require_integer(const json& obj, std::string_view key, const std::string& path) {
  return integer(require(obj, key, path), join(path, key));
}

std::string require_string(const json& obj, std::string_view key, const std::string& path) {
  return string(require(obj, key, path), join(path, key));
}

BoundingBox bbox(const json& v, const std::string& path) {
  if (!v.is_array() || v.size() != 4) throw ParseError("expected [x1,y1,x2,y2] at " + path);
  BoundingBox b{number(v[0], index(path, 0)), number(v[1], index(path, 1)),
                number(v[2], index(path, 2)), number(v[3], index(path, 3))};
  return b;
}

json bbox_to_json(const BoundingBox& b) { return json::array({b.x1, b.y1, b.x2, b.y2}); }

json read_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ParseError("cannot open " + file.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return json::parse(buf.str());
  } catch (const json::parse_error& e) {
    throw ParseError(file.string() + ": " + e.what());
  }
}

std::string canonical_dump(const json& j) { return j.dump(2) + "\n"; }

void write_text(const std::filesystem::path& file, const std::string& text) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  // Atomic replace: readers never observe a truncated file.
  auto tmp = file;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, file);
}

void write_file(const std::filesystem::path& file, const json& j) { write_text(file, canonical_dump(j)); }

}  // namespace cotrain::json_util

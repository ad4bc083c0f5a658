#pragma once

// Path-tracking accessors over nlohmann::json. Every failure throws ParseError
// naming the offending field, e.g. "detections[3].confidence".

#include <filesystem>
#include <string>
#include <string_view>

#include "cotrain/core.hpp"
#include "json.hpp"

namespace cotrain::json_util {

using nlohmann::json;

std::string join(const std::string& path, std::string_view key);
std::string index(const std::string& path, std::size_t i);

const json& require(const json& obj, std::string_view key, const std::string& path);
const json* optional(const json& obj, std::string_view key);

double number(const json& v, const std::string& path);
long long integer(const json& v, const std::string& path);
std::string string(const json& v, const std::string& path);
bool boolean(const json& v, const std::string& path);
const json& object(const json& v, const std::string& path);
const json& array(const json& v, const std::string& path);

double require_number(const json& obj, std::string_view key, const std::string& path);
long long require_integer(const json& obj, std::string_view key, const std::string& path);
std::string require_string(const json& obj, std::string_view key, const std::string& path);

BoundingBox bbox(const json& v, const std::string& path);
json bbox_to_json(const BoundingBox& b);

json read_file(const std::filesystem::path& file);
// Sorted keys, two-space indent, trailing newline.
std::string canonical_dump(const json& j);
void write_file(const std::filesystem::path& file, const json& j);
void write_text(const std::filesystem::path& file, const std::string& text);

}  // namespace cotrain::json_util

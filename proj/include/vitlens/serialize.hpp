#pragma once

#include "vitlens/model_io.hpp"

#include <json.hpp>

#include <string>
#include <string_view>
#include <vector>

namespace vitlens {

nlohmann::json manifest_to_json(const Manifest& manifest);
Manifest manifest_from_json(const nlohmann::json& j);

std::string base64_encode(std::span<const uint8_t> bytes);
std::vector<uint8_t> base64_decode(std::string_view text);

// float32 little-endian payloads, as used by plan files.
std::string floats_to_base64(std::span<const float> values);
std::vector<float> floats_from_base64(std::string_view text);

nlohmann::json boxes_to_json(const std::vector<Box>& boxes);
std::vector<Box> boxes_from_json(const nlohmann::json& j);

} // namespace vitlens

#include "vitlens/serialize.hpp"

#include "vitlens/error.hpp"

#include <array>
#include <cstring>

namespace vitlens {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int decode_char(char c) {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
}

} // namespace

std::string base64_encode(std::span<const uint8_t> bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 2 < bytes.size(); i += 3) {
        const uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += kAlphabet[v & 63];
    }
    if (i + 1 == bytes.size()) {
        const uint32_t v = bytes[i] << 16;
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == bytes.size()) {
        const uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out += kAlphabet[(v >> 18) & 63];
        out += kAlphabet[(v >> 12) & 63];
        out += kAlphabet[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

std::vector<uint8_t> base64_decode(std::string_view text) {
    std::vector<uint8_t> out;
    uint32_t acc = 0;
    int bits = 0;
    for (char c : text) {
        if (c == '=') break;
        if (c == '\n' || c == '\r' || c == ' ') continue;
        const int v = decode_char(c);
        if (v < 0) fail(ErrorCode::format, "invalid base64 character");
        acc = (acc << 6) | static_cast<uint32_t>(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back(static_cast<uint8_t>((acc >> bits) & 0xff));
        }
    }
    return out;
}

std::string floats_to_base64(std::span<const float> values) {
    return base64_encode({reinterpret_cast<const uint8_t*>(values.data()), values.size_bytes()});
}

std::vector<float> floats_from_base64(std::string_view text) {
    const auto bytes = base64_decode(text);
    if (bytes.size() % sizeof(float) != 0) fail(ErrorCode::format, "float32 payload length not a multiple of 4");
    std::vector<float> out(bytes.size() / sizeof(float));
    std::memcpy(out.data(), bytes.data(), bytes.size());
    return out;
}

nlohmann::json boxes_to_json(const std::vector<Box>& boxes) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& b : boxes) {
        arr.push_back({{"label", b.label}, {"x0", b.x0}, {"y0", b.y0}, {"x1", b.x1}, {"y1", b.y1}});
    }
    return arr;
}

std::vector<Box> boxes_from_json(const nlohmann::json& j) {
    const nlohmann::json& arr = j.is_object() && j.contains("boxes") ? j.at("boxes") : j;
    if (!arr.is_array()) fail(ErrorCode::format, "expected an array of boxes");
    std::vector<Box> out;
    try {
        for (const auto& b : arr) {
            out.push_back(Box{b.value("label", std::string()), b.at("x0").get<int>(), b.at("y0").get<int>(),
                              b.at("x1").get<int>(), b.at("y1").get<int>()});
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::format, std::string("malformed box: ") + e.what());
    }
    return out;
}

} // namespace vitlens

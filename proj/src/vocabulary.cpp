#include "vitlens/diag.hpp"
#include "vitlens/error.hpp"
#include "vitlens/model_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

namespace vitlens {

namespace fs = std::filesystem;

namespace {

// File layout: magic, u32 count, u32 dim, count*dim float32 LE embeddings,
// then count x (u32 byte length + UTF-8 text).
constexpr char kMagic[8] = {'V', 'I', 'T', 'V', 'O', 'C', 'B', '1'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

uint32_t get_u32(std::span<const uint8_t> bytes, size_t& pos) {
    if (pos + 4 > bytes.size()) fail(ErrorCode::format, "vocabulary file truncated");
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
}

} // namespace

Vocabulary::Vocabulary(std::string id, std::vector<std::string> texts, Tensor embeddings)
    : id_(std::move(id)), texts_(std::move(texts)), embeddings_(std::move(embeddings)) {
    if (embeddings_.rank() != 2 || embeddings_.dim(0) != static_cast<int64_t>(texts_.size())) {
        fail(ErrorCode::format, "vocabulary '" + id_ + "': " + std::to_string(texts_.size()) + " texts but embeddings " +
                                    shape_to_string(embeddings_.shape()));
    }
    std::unordered_set<std::string> seen;
    for (const auto& t : texts_) {
        if (!seen.insert(t).second) fail(ErrorCode::format, "vocabulary '" + id_ + "': duplicate text '" + t + "'");
    }
    if (!embeddings_.all_finite()) fail(ErrorCode::non_finite, "vocabulary '" + id_ + "' has non-finite embeddings");
    size_t fixed = 0;
    for (int64_t r = 0; r < embeddings_.rows(); ++r) {
        auto row = embeddings_.row(r);
        const double n = l2_norm(row);
        if (!(n > 0.0)) {
            fail(ErrorCode::degenerate_vector, "vocabulary '" + id_ + "': entry '" + texts_[static_cast<size_t>(r)] +
                                                   "' has a zero embedding");
        }
        if (std::abs(n - 1.0) > 1e-4) {
            for (auto& v : row) v = static_cast<float>(v / n);
            ++fixed;
        }
    }
    if (fixed > 0) {
        renormalized_ = true;
        warn("vocabulary '" + id_ + "': re-normalized " + std::to_string(fixed) + " embedding(s) to unit length");
    }
}

std::optional<size_t> Vocabulary::index_of(const std::string& text) const {
    for (size_t i = 0; i < texts_.size(); ++i) {
        if (texts_[i] == text) return i;
    }
    return std::nullopt;
}

Vocabulary Vocabulary::subset(const std::vector<std::string>& texts, std::string id) const {
    Tensor emb({static_cast<int64_t>(texts.size()), dim()});
    for (size_t i = 0; i < texts.size(); ++i) {
        const auto idx = index_of(texts[i]);
        if (!idx) fail(ErrorCode::not_found, "'" + texts[i] + "' is not in vocabulary '" + id_ + "'");
        const auto src = embedding(*idx);
        std::copy(src.begin(), src.end(), emb.row(static_cast<int64_t>(i)).begin());
    }
    return Vocabulary(std::move(id), texts, std::move(emb));
}

Vocabulary parse_vocabulary(std::span<const uint8_t> bytes, std::string id) {
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        fail(ErrorCode::format, "not a vocabulary file (bad magic)");
    }
    size_t pos = sizeof(kMagic);
    const uint32_t count = get_u32(bytes, pos);
    const uint32_t dim = get_u32(bytes, pos);
    const size_t payload = static_cast<size_t>(count) * dim * sizeof(float);
    if (pos + payload > bytes.size()) {
        fail(ErrorCode::format, "vocabulary header declares " + std::to_string(count) + " x " + std::to_string(dim) +
                                    " embeddings but the payload is shorter");
    }
    std::vector<float> values(static_cast<size_t>(count) * dim);
    std::memcpy(values.data(), bytes.data() + pos, payload);
    pos += payload;
    std::vector<std::string> texts;
    texts.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        const uint32_t len = get_u32(bytes, pos);
        if (pos + len > bytes.size()) fail(ErrorCode::format, "vocabulary text " + std::to_string(i) + " truncated");
        texts.emplace_back(reinterpret_cast<const char*>(bytes.data() + pos), len);
        pos += len;
    }
    if (pos != bytes.size()) fail(ErrorCode::format, "trailing bytes after vocabulary payload");
    return Vocabulary(std::move(id), std::move(texts), Tensor({count, dim}, std::move(values)));
}

Vocabulary load_vocabulary(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_vocabulary(bytes, path.stem().string());
}

std::vector<uint8_t> serialize_vocabulary(const Vocabulary& vocab) {
    std::vector<uint8_t> out(kMagic, kMagic + sizeof(kMagic));
    put_u32(out, static_cast<uint32_t>(vocab.size()));
    put_u32(out, static_cast<uint32_t>(vocab.dim()));
    const auto data = vocab.embeddings().data();
    const auto* raw = reinterpret_cast<const uint8_t*>(data.data());
    out.insert(out.end(), raw, raw + data.size_bytes());
    for (const auto& t : vocab.texts()) {
        put_u32(out, static_cast<uint32_t>(t.size()));
        out.insert(out.end(), t.begin(), t.end());
    }
    return out;
}

void save_vocabulary(const Vocabulary& vocab, const fs::path& path) {
    const auto bytes = serialize_vocabulary(vocab);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void check_compatible(const Vocabulary& vocab, const Manifest& manifest) {
    if (vocab.dim() != manifest.joint_dim) {
        fail(ErrorCode::compatibility, "vocabulary '" + vocab.id() + "' has dim " + std::to_string(vocab.dim()) +
                                           " but the model joint space has dim " + std::to_string(manifest.joint_dim));
    }
}

} // namespace vitlens

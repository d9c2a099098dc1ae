#include "vitlens/model_io.hpp"

#include "vitlens/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "vitlens/serialize.hpp"

#include <json.hpp>

namespace vitlens {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kManifestFile = "manifest.json";
constexpr const char* kIndexFile = "index.json";
constexpr const char* kBlobFile = "weights.bin";

static_assert(std::endian::native == std::endian::little, "bundle blob I/O assumes a little-endian host");

} // namespace

json manifest_to_json(const Manifest& m) {
    return json{{"format_version", m.format_version},
                {"name", m.name},
                {"num_layers", m.num_layers},
                {"hidden_dim", m.hidden_dim},
                {"num_heads", m.num_heads},
                {"patch_size", m.patch_size},
                {"image_size", m.image_size},
                {"mlp_dim", m.mlp_dim},
                {"joint_dim", m.joint_dim},
                {"activation", std::string(to_string(m.activation))},
                {"ln_eps", m.ln_eps},
                {"preprocess_mean", m.preprocess_mean},
                {"preprocess_std", m.preprocess_std}};
}

Manifest manifest_from_json(const json& j) {
    Manifest m;
    try {
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != kBundleFormatVersion) {
            fail(ErrorCode::version_mismatch, "bundle format version " + std::to_string(m.format_version) +
                                                  " is not supported (expected " +
                                                  std::to_string(kBundleFormatVersion) + ")");
        }
        m.name = j.value("name", std::string());
        m.num_layers = j.at("num_layers").get<int>();
        m.hidden_dim = j.at("hidden_dim").get<int>();
        m.num_heads = j.at("num_heads").get<int>();
        m.patch_size = j.at("patch_size").get<int>();
        m.image_size = j.at("image_size").get<int>();
        m.mlp_dim = j.at("mlp_dim").get<int>();
        m.joint_dim = j.at("joint_dim").get<int>();
        m.activation = parse_activation(j.at("activation").get<std::string>());
        m.ln_eps = j.at("ln_eps").get<float>();
        m.preprocess_mean = j.at("preprocess_mean").get<std::array<float, 3>>();
        m.preprocess_std = j.at("preprocess_std").get<std::array<float, 3>>();
    } catch (const json::exception& e) {
        fail(ErrorCode::format, std::string("malformed manifest: ") + e.what());
    }
    m.validate();
    return m;
}

namespace {

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::io, "cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

json parse_json_file(const fs::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        fail(ErrorCode::format, path.filename().string() + ": " + e.what());
    }
}

} // namespace

void Manifest::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) fail(ErrorCode::configuration, "invalid manifest: " + what);
    };
    need(num_layers >= 1, "num_layers must be >= 1");
    need(hidden_dim > 0 && num_heads > 0 && patch_size > 0 && image_size > 0 && mlp_dim > 0 && joint_dim > 0,
         "all dimensions must be positive");
    need(hidden_dim % num_heads == 0, "hidden_dim must be divisible by num_heads");
    need(image_size % patch_size == 0, "image_size must be divisible by patch_size");
    need(ln_eps > 0.0f, "ln_eps must be positive");
    for (float s : preprocess_std) need(s > 0.0f, "preprocess_std must be positive");
}

ModelBundle ModelBundle::zeros(const Manifest& manifest) {
    manifest.validate();
    ModelBundle b;
    b.manifest = manifest;
    b.blocks.resize(static_cast<size_t>(manifest.num_layers));
    const auto shapes = b.expected_shapes();
    auto slots = b.named_tensors();
    for (size_t i = 0; i < slots.size(); ++i) *slots[i].second = Tensor::zeros(shapes[i].second);
    for (auto& blk : b.blocks) {
        blk.ln1_gamma = Tensor::filled({manifest.hidden_dim}, 1.0f);
        blk.ln2_gamma = Tensor::filled({manifest.hidden_dim}, 1.0f);
    }
    b.ln_post_gamma = Tensor::filled({manifest.hidden_dim}, 1.0f);
    return b;
}

std::vector<std::pair<std::string, Shape>> ModelBundle::expected_shapes() const {
    const Manifest& m = manifest;
    const int64_t d = m.hidden_dim, f = m.mlp_dim;
    std::vector<std::pair<std::string, Shape>> out = {
        {"patch_embed.weight", {d, m.patch_dim()}},
        {"class_embedding", {d}},
        {"pos_embedding", {m.seq_len(), d}},
    };
    for (int k = 0; k < m.num_layers; ++k) {
        const std::string p = "blocks." + std::to_string(k) + ".";
        out.insert(out.end(), {
                                  {p + "ln1.gamma", {d}},
                                  {p + "ln1.beta", {d}},
                                  {p + "attn.q.weight", {d, d}},
                                  {p + "attn.q.bias", {d}},
                                  {p + "attn.k.weight", {d, d}},
                                  {p + "attn.k.bias", {d}},
                                  {p + "attn.v.weight", {d, d}},
                                  {p + "attn.v.bias", {d}},
                                  {p + "attn.out.weight", {d, d}},
                                  {p + "attn.out.bias", {d}},
                                  {p + "ln2.gamma", {d}},
                                  {p + "ln2.beta", {d}},
                                  {p + "mlp.fc1.weight", {f, d}},
                                  {p + "mlp.fc1.bias", {f}},
                                  {p + "mlp.fc2.weight", {d, f}},
                                  {p + "mlp.fc2.bias", {d}},
                              });
    }
    out.insert(out.end(), {
                              {"ln_post.gamma", {d}},
                              {"ln_post.beta", {d}},
                              {"visual_projection", {m.joint_dim, d}},
                          });
    return out;
}

namespace {

template <typename Bundle, typename Ptr>
std::vector<std::pair<std::string, Ptr>> collect(Bundle& b) {
    std::vector<std::pair<std::string, Ptr>> out = {
        {"patch_embed.weight", &b.patch_embed},
        {"class_embedding", &b.class_embedding},
        {"pos_embedding", &b.pos_embedding},
    };
    for (size_t k = 0; k < b.blocks.size(); ++k) {
        auto& blk = b.blocks[k];
        const std::string p = "blocks." + std::to_string(k) + ".";
        out.insert(out.end(), {
                                  {p + "ln1.gamma", &blk.ln1_gamma},
                                  {p + "ln1.beta", &blk.ln1_beta},
                                  {p + "attn.q.weight", &blk.q_weight},
                                  {p + "attn.q.bias", &blk.q_bias},
                                  {p + "attn.k.weight", &blk.k_weight},
                                  {p + "attn.k.bias", &blk.k_bias},
                                  {p + "attn.v.weight", &blk.v_weight},
                                  {p + "attn.v.bias", &blk.v_bias},
                                  {p + "attn.out.weight", &blk.out_weight},
                                  {p + "attn.out.bias", &blk.out_bias},
                                  {p + "ln2.gamma", &blk.ln2_gamma},
                                  {p + "ln2.beta", &blk.ln2_beta},
                                  {p + "mlp.fc1.weight", &blk.fc1_weight},
                                  {p + "mlp.fc1.bias", &blk.fc1_bias},
                                  {p + "mlp.fc2.weight", &blk.fc2_weight},
                                  {p + "mlp.fc2.bias", &blk.fc2_bias},
                              });
    }
    out.insert(out.end(), {
                              {"ln_post.gamma", &b.ln_post_gamma},
                              {"ln_post.beta", &b.ln_post_beta},
                              {"visual_projection", &b.visual_projection},
                          });
    return out;
}

} // namespace

std::vector<std::pair<std::string, const Tensor*>> ModelBundle::named_tensors() const {
    return collect<const ModelBundle, const Tensor*>(*this);
}

std::vector<std::pair<std::string, Tensor*>> ModelBundle::named_tensors() {
    return collect<ModelBundle, Tensor*>(*this);
}

ModelBundle load_bundle(const fs::path& dir) {
    const Manifest manifest = manifest_from_json(parse_json_file(dir / kManifestFile));
    const json index = parse_json_file(dir / kIndexFile);
    if (index.value("format_version", kBundleFormatVersion) != kBundleFormatVersion) {
        fail(ErrorCode::version_mismatch, "weight index format version mismatch");
    }
    const fs::path blob_path = dir / index.value("blob", std::string(kBlobFile));
    std::ifstream blob(blob_path, std::ios::binary | std::ios::ate);
    if (!blob) fail(ErrorCode::io, "cannot open " + blob_path.string());
    const auto blob_size = static_cast<uint64_t>(blob.tellg());

    if (!index.contains("tensors") || !index["tensors"].is_object()) {
        fail(ErrorCode::format, "weight index has no 'tensors' object");
    }
    const json& entries = index["tensors"];

    ModelBundle bundle;
    bundle.manifest = manifest;
    bundle.blocks.resize(static_cast<size_t>(manifest.num_layers));
    const auto expected = bundle.expected_shapes();
    auto slots = bundle.named_tensors();
    for (size_t i = 0; i < expected.size(); ++i) {
        const auto& [name, shape] = expected[i];
        if (!entries.contains(name)) fail(ErrorCode::missing_tensor, "missing tensor '" + name + "'");
        const json& e = entries[name];
        Shape declared;
        uint64_t offset = 0;
        try {
            declared = e.at("shape").get<Shape>();
            offset = e.at("offset").get<uint64_t>();
        } catch (const json::exception& ex) {
            fail(ErrorCode::format, "malformed index entry for '" + name + "': " + ex.what());
        }
        if (declared != shape) {
            fail(ErrorCode::shape_mismatch, "tensor '" + name + "' has shape " + shape_to_string(declared) +
                                                ", expected " + shape_to_string(shape));
        }
        const uint64_t bytes = static_cast<uint64_t>(shape_numel(shape)) * sizeof(float);
        if (offset + bytes > blob_size) {
            fail(ErrorCode::shape_mismatch, "tensor '" + name + "' is truncated: needs " + std::to_string(bytes) +
                                                " bytes at offset " + std::to_string(offset) + ", blob has " +
                                                std::to_string(blob_size));
        }
        std::vector<float> values(static_cast<size_t>(shape_numel(shape)));
        blob.seekg(static_cast<std::streamoff>(offset));
        blob.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
        if (!blob) fail(ErrorCode::io, "short read for tensor '" + name + "'");
        Tensor t(shape, std::move(values));
        if (!t.all_finite()) fail(ErrorCode::non_finite, "tensor '" + name + "' contains non-finite values");
        *slots[i].second = std::move(t);
    }
    return bundle;
}

void save_bundle(const ModelBundle& bundle, const fs::path& dir) {
    bundle.manifest.validate();
    fs::create_directories(dir);
    const auto expected = bundle.expected_shapes();
    const auto tensors = bundle.named_tensors();
    json entries = json::object();
    std::ofstream blob(dir / kBlobFile, std::ios::binary | std::ios::trunc);
    if (!blob) fail(ErrorCode::io, "cannot write " + (dir / kBlobFile).string());
    uint64_t offset = 0;
    for (size_t i = 0; i < tensors.size(); ++i) {
        const auto& [name, t] = tensors[i];
        if (t->shape() != expected[i].second) {
            fail(ErrorCode::shape_mismatch, "tensor '" + name + "' has shape " + shape_to_string(t->shape()) +
                                                ", expected " + shape_to_string(expected[i].second));
        }
        entries[name] = json{{"offset", offset}, {"shape", t->shape()}};
        const auto bytes = t->size() * sizeof(float);
        blob.write(reinterpret_cast<const char*>(t->data().data()), static_cast<std::streamsize>(bytes));
        offset += bytes;
    }
    blob.close();
    std::ofstream(dir / kIndexFile) << json{{"format_version", kBundleFormatVersion},
                                            {"blob", kBlobFile},
                                            {"tensors", entries}}
                                           .dump(1);
    std::ofstream(dir / kManifestFile) << manifest_to_json(bundle.manifest).dump(2);
}

} // namespace vitlens

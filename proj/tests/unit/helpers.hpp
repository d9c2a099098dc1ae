#pragma once

#include "vitlens/diag.hpp"
#include "vitlens/model_io.hpp"
#include "vitlens/tensor.hpp"

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace testing {

inline vitlens::Tensor random_tensor(vitlens::Shape shape, std::mt19937_64& rng, float scale = 1.0f) {
    std::normal_distribution<float> dist(0.0f, scale);
    vitlens::Tensor t(std::move(shape));
    for (auto& v : t.mutable_data()) v = dist(rng);
    return t;
}

inline vitlens::Manifest toy_manifest(int layers, int dim, int heads, int patch = 2, int grid = 2, int joint = 0) {
    vitlens::Manifest m;
    m.name = "toy";
    m.num_layers = layers;
    m.hidden_dim = dim;
    m.num_heads = heads;
    m.patch_size = patch;
    m.image_size = patch * grid;
    m.mlp_dim = 2 * dim;
    m.joint_dim = joint > 0 ? joint : dim;
    m.activation = vitlens::Activation::quick_gelu;
    m.ln_eps = 1e-5f;
    m.preprocess_mean = {123.0f / 255.0f, 117.0f / 255.0f, 104.0f / 255.0f};
    m.preprocess_std = {0.27f, 0.26f, 0.28f};
    return m;
}

// Every tensor filled with N(0, scale^2); layer-norm gammas around 1.
inline vitlens::ModelBundle random_bundle(const vitlens::Manifest& m, uint64_t seed, float scale = 0.3f) {
    std::mt19937_64 rng(seed);
    vitlens::ModelBundle b = vitlens::ModelBundle::zeros(m);
    for (auto& [name, t] : b.named_tensors()) {
        const bool gamma = name.find("gamma") != std::string::npos;
        *t = random_tensor(t->shape(), rng, gamma ? 0.1f : scale);
        if (gamma) {
            for (auto& v : t->mutable_data()) v += 1.0f;
        }
    }
    return b;
}

inline std::vector<std::string> numbered_words(size_t n, const std::string& prefix = "w") {
    std::vector<std::string> out;
    for (size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
    return out;
}

inline vitlens::Vocabulary random_vocab(size_t n, int64_t dim, uint64_t seed, const std::string& id = "rand") {
    std::mt19937_64 rng(seed);
    return vitlens::Vocabulary(id, numbered_words(n), random_tensor({static_cast<int64_t>(n), dim}, rng));
}

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        path = std::filesystem::temp_directory_path() /
               ("vitlens_test_" + std::to_string(std::random_device{}()) + "_" + std::to_string(counter()++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    static int& counter() {
        static int c = 0;
        return c;
    }
};

// Collects warnings for the lifetime of the object.
struct WarningCapture {
    std::vector<std::string> messages;
    WarningCapture() {
        vitlens::set_warning_sink([this](const std::string& m) { messages.push_back(m); });
    }
    ~WarningCapture() {
        vitlens::set_warning_sink([](const std::string&) {});
    }
};

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

} // namespace testing

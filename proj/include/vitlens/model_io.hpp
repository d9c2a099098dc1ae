#pragma once

#include "vitlens/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace vitlens {

inline constexpr int kBundleFormatVersion = 1;

struct Manifest {
    int format_version = kBundleFormatVersion;
    std::string name;
    int num_layers = 0;
    int hidden_dim = 0;
    int num_heads = 0;
    int patch_size = 0;
    int image_size = 0;
    int mlp_dim = 0;
    int joint_dim = 0;
    Activation activation = Activation::quick_gelu;
    float ln_eps = 1e-5f;
    std::array<float, 3> preprocess_mean{};
    std::array<float, 3> preprocess_std{1.0f, 1.0f, 1.0f};

    int grid_size() const { return image_size / patch_size; }
    int num_patches() const { return grid_size() * grid_size(); }
    int seq_len() const { return 1 + num_patches(); }
    int head_dim() const { return hidden_dim / num_heads; }
    int patch_dim() const { return 3 * patch_size * patch_size; }

    // Throws configuration error when dims are inconsistent.
    void validate() const;

    bool operator==(const Manifest&) const = default;
};

struct BlockWeights {
    Tensor ln1_gamma, ln1_beta;
    Tensor q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, out_weight, out_bias;
    Tensor ln2_gamma, ln2_beta;
    Tensor fc1_weight, fc1_bias, fc2_weight, fc2_bias;

    bool operator==(const BlockWeights&) const = default;
};

// Immutable once loaded. Canonical tensor names:
//   patch_embed.weight [D x 3PP], class_embedding [D], pos_embedding [(1+T) x D],
//   blocks.<k>.{ln1,ln2}.{gamma,beta}, blocks.<k>.attn.{q,k,v,out}.{weight,bias},
//   blocks.<k>.mlp.{fc1,fc2}.{weight,bias}, ln_post.{gamma,beta}, visual_projection [joint x D]
// with k counted from 0.
struct ModelBundle {
    Manifest manifest;
    Tensor patch_embed;
    Tensor class_embedding;
    Tensor pos_embedding;
    std::vector<BlockWeights> blocks;
    Tensor ln_post_gamma, ln_post_beta;
    Tensor visual_projection;

    // Zero-initialized bundle with every tensor at its manifest-implied shape.
    static ModelBundle zeros(const Manifest& manifest);

    std::vector<std::pair<std::string, Shape>> expected_shapes() const;
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
    std::vector<std::pair<std::string, Tensor*>> named_tensors();

    const BlockWeights& block(int k) const { return blocks.at(static_cast<size_t>(k - 1)); }

    bool operator==(const ModelBundle&) const = default;
};

ModelBundle load_bundle(const std::filesystem::path& dir);
void save_bundle(const ModelBundle& bundle, const std::filesystem::path& dir);

class Vocabulary {
public:
    Vocabulary() = default;
    // Validates unique texts and unit-norm rows; rows off by more than 1e-4
    // are re-normalized with a warning.
    Vocabulary(std::string id, std::vector<std::string> texts, Tensor embeddings);

    const std::string& id() const noexcept { return id_; }
    size_t size() const noexcept { return texts_.size(); }
    bool empty() const noexcept { return texts_.empty(); }
    int64_t dim() const noexcept { return embeddings_.rank() == 2 ? embeddings_.dim(1) : 0; }
    const std::string& text(size_t i) const { return texts_.at(i); }
    const std::vector<std::string>& texts() const noexcept { return texts_; }
    std::span<const float> embedding(size_t i) const { return embeddings_.row(static_cast<int64_t>(i)); }
    const Tensor& embeddings() const noexcept { return embeddings_; }
    bool renormalized() const noexcept { return renormalized_; }
    std::optional<size_t> index_of(const std::string& text) const;

    // Subset in the given order (used for class-label vocabularies).
    Vocabulary subset(const std::vector<std::string>& texts, std::string id) const;

private:
    std::string id_;
    std::vector<std::string> texts_;
    Tensor embeddings_;
    bool renormalized_ = false;
};

Vocabulary load_vocabulary(const std::filesystem::path& path);
Vocabulary parse_vocabulary(std::span<const uint8_t> bytes, std::string id);
void save_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);
std::vector<uint8_t> serialize_vocabulary(const Vocabulary& vocab);

// Throws compatibility error when the vocabulary cannot be compared with
// the bundle's joint space.
void check_compatible(const Vocabulary& vocab, const Manifest& manifest);

struct Image {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> pixels; // height x width x RGB

    uint8_t at(int x, int y, int c) const { return pixels[static_cast<size_t>((y * width + x) * 3 + c)]; }
    uint8_t& at(int x, int y, int c) { return pixels[static_cast<size_t>((y * width + x) * 3 + c)]; }

    static Image solid(int width, int height, std::array<uint8_t, 3> rgb);
    bool operator==(const Image&) const = default;
};

// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Box {
    std::string label;
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    int64_t area() const { return static_cast<int64_t>(x1 - x0) * (y1 - y0); }
    bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    bool operator==(const Box&) const = default;
};

struct ImageInput {
    Image image;
    std::vector<Box> boxes;
};

void validate_image(const Image& image);
void validate_boxes(const std::vector<Box>& boxes, int width, int height);

Image decode_image(std::span<const uint8_t> bytes);
Image load_image(const std::filesystem::path& path);
std::vector<uint8_t> encode_png(const Image& image);
void save_png(const Image& image, const std::filesystem::path& path);

// Resize (bilinear, shortest side), center crop, normalize, and cut into
// row-major P x P patches, each flattened channel-major. Returns [T x 3PP].
Tensor preprocess(const Image& image, const Manifest& manifest);

// The resized, center-cropped square frame that preprocess() cuts into
// patches, rounded to 8-bit pixels.
Image model_frame(const Image& image, const Manifest& manifest);

// Maps pixel boxes of the original image into the preprocessed square frame,
// clipped to it. Boxes that vanish after clipping are dropped.
std::vector<Box> map_boxes_to_model(const std::vector<Box>& boxes, int width, int height, const Manifest& manifest);

enum class MaskFill { mean, zero };

std::array<uint8_t, 3> mean_color(const Manifest& manifest);
Image mask_boxes(const Image& image, const std::vector<Box>& boxes, MaskFill fill, const Manifest& manifest);

int64_t union_area(const std::vector<Box>& boxes, int width, int height);

// One rectangle with the same total area as the union of `boxes`, placed
// uniformly inside the image. Empty result for zero area.
std::vector<Box> random_mask_like(const std::vector<Box>& boxes, int width, int height, uint64_t seed);

} // namespace vitlens

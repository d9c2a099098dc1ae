#pragma once

#include "vitlens/engine.hpp"

#include <json.hpp>

#include <optional>
#include <vector>

namespace vitlens {

inline constexpr double kRolloutResidualWeight = 0.5;
inline constexpr double kSaliencyThreshold = 0.9;

// Attention flow into the inputs of block `upto_layer`: product over blocks
// k < upto_layer of row-normalized (0.5 * mean-over-heads A_k + 0.5 * I),
// later blocks on the left. Identity for upto_layer = 1.
Tensor rollout(const ActivationTrace& trace, int upto_layer);

struct SaliencyMap {
    TokenRef token;
    int grid_size = 0;
    Tensor grid;               // [grid x grid], min-max normalized to [0, 1]
    std::vector<uint8_t> mask; // grid >= threshold, row-major
    double threshold = kSaliencyThreshold;

    size_t mask_count() const;
};

SaliencyMap token_saliency(TokenRef token, const ActivationTrace& trace, double threshold = kSaliencyThreshold);

// Intersection over prediction: the patch mask is upscaled to patch_size
// pixel blocks and intersected with the union of `truth` (pixel boxes in the
// preprocessed frame). nullopt when the mask is empty.
std::optional<double> iop(std::span<const uint8_t> mask, int grid_size, int patch_size, const std::vector<Box>& truth);

nlohmann::json saliency_to_json(const SaliencyMap& map);

// Heat overlay on a square image of side grid_size * patch_size (the
// preprocessed frame); the thresholded mask is outlined.
Image saliency_overlay(const Image& square, const SaliencyMap& map);

} // namespace vitlens

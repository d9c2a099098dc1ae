#pragma once

#include "vitlens/engine.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace vitlens {

struct Interpretation {
    TokenRef token;
    Ranking ranking;
    bool smoothing_used = false;
    int samples = 0;
    uint64_t seed = 0;
};

// Retrieval for a latent token: ablated forward to the last block, joint
// projection, cosine ranking. top_k = 0 ranks the whole vocabulary.
Interpretation interpret(TokenRef token, const ActivationTrace& trace, const ModelBundle& bundle,
                         const Vocabulary& vocab, size_t top_k = 0);

// Per-(layer, position) noise scales measured as the L2 distance between
// dataset-mean block outputs with and without attention.
struct DriftTable {
    inline static constexpr int kFormatVersion = 1;
    inline static constexpr const char* kNoiseModel = "per_component_std";

    int num_layers = 0;
    int num_positions = 0;
    std::vector<double> sigma; // row-major [layer-1][position]
    std::string calibration_set_id;
    int calibration_size = 0;
    double cls_mean = 0.0;   // mean sigma over layers at position 0
    double other_mean = 0.0; // mean sigma over layers and positions > 0
    // Individual per-token L2 distances (histogram data), split CLS / other.
    std::vector<double> cls_distances;
    std::vector<double> other_distances;

    double at(int layer, int position) const {
        return sigma[static_cast<size_t>((layer - 1) * num_positions + position)];
    }
    static DriftTable zeros(int num_layers, int num_positions);
};

nlohmann::json drift_to_json(const DriftTable& drift, bool include_distances = false);
DriftTable drift_from_json(const nlohmann::json& j);

DriftTable calibrate_drift(std::span<const ActivationTrace> traces, const ModelBundle& bundle,
                           std::string calibration_set_id = {});
DriftTable calibrate_drift(std::span<const Tensor> patch_sets, const ModelBundle& bundle,
                           std::string calibration_set_id = {});

struct SmoothingOptions {
    int samples = 100;
    uint64_t seed = 0;
};

// Ablated forward where each block's input is perturbed `samples` times with
// independent N(0, sigma[k][j]^2) components and the block outputs averaged.
Tensor forward_ablated_smoothed(TokenRef token, const ActivationTrace& trace, const ModelBundle& bundle,
                                const DriftTable& drift, const SmoothingOptions& options);

Interpretation interpret_smoothed(TokenRef token, const ActivationTrace& trace, const ModelBundle& bundle,
                                  const Vocabulary& vocab, const DriftTable& drift,
                                  const SmoothingOptions& options, size_t top_k = 0);

struct InterpretOptions {
    size_t top_k = 0;
    std::optional<SmoothingOptions> smoothing;
    const DriftTable* drift = nullptr; // required when smoothing is set
    unsigned threads = 0;              // 0 = hardware concurrency
};

// All positions of one layer, ordered by position.
std::vector<Interpretation> interpret_layer(int layer, const ActivationTrace& trace, const ModelBundle& bundle,
                                            const Vocabulary& vocab, const InterpretOptions& options);

Interpretation interpret_with(TokenRef token, const ActivationTrace& trace, const ModelBundle& bundle,
                              const Vocabulary& vocab, const InterpretOptions& options);

nlohmann::json interpretation_to_json(const Interpretation& interp);
nlohmann::json ranking_to_json(const Ranking& ranking);

// JSON interpretations of one token, or of every position of a layer when
// `position` is empty. A token whose joint projection is the zero vector
// (e.g. zeroed by a plan) is listed with an empty ranking and
// "degenerate": true rather than failing the whole request.
nlohmann::json interpretations_json(int layer, std::optional<int> position, const ActivationTrace& trace,
                                    const ModelBundle& bundle, const Vocabulary& vocab,
                                    const InterpretOptions& options);

} // namespace vitlens

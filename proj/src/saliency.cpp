#include "vitlens/saliency.hpp"

#include "vitlens/error.hpp"

#include <algorithm>
#include <cmath>

namespace vitlens {

Tensor rollout(const ActivationTrace& trace, int upto_layer) {
    const int layers = trace.num_layers();
    if (upto_layer < 1 || upto_layer > layers + 1) {
        fail(ErrorCode::input, "rollout layer " + std::to_string(upto_layer) + " outside 1.." + std::to_string(layers + 1));
    }
    const auto n = static_cast<size_t>(trace.seq_len());
    std::vector<double> flow(n * n, 0.0);
    for (size_t i = 0; i < n; ++i) flow[i * n + i] = 1.0;

    std::vector<double> mixed(n * n), next(n * n);
    for (int k = 1; k < upto_layer; ++k) {
        const Tensor& att = trace.attentions[static_cast<size_t>(k - 1)];
        const auto heads = static_cast<size_t>(att.dim(0));
        const auto a = att.data();
        for (size_t i = 0; i < n; ++i) {
            double row_sum = 0.0;
            for (size_t j = 0; j < n; ++j) {
                double mean = 0.0;
                for (size_t h = 0; h < heads; ++h) mean += a[(h * n + i) * n + j];
                mean /= static_cast<double>(heads);
                const double v = (1.0 - kRolloutResidualWeight) * mean + (i == j ? kRolloutResidualWeight : 0.0);
                mixed[i * n + j] = v;
                row_sum += v;
            }
            for (size_t j = 0; j < n; ++j) mixed[i * n + j] /= row_sum;
        }
        // next = mixed * flow
        for (size_t i = 0; i < n; ++i) {
            for (size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (size_t p = 0; p < n; ++p) acc += mixed[i * n + p] * flow[p * n + j];
                next[i * n + j] = acc;
            }
        }
        flow.swap(next);
    }
    Tensor out({static_cast<int64_t>(n), static_cast<int64_t>(n)});
    for (size_t i = 0; i < n * n; ++i) out[i] = static_cast<float>(flow[i]);
    return out;
}

size_t SaliencyMap::mask_count() const { return static_cast<size_t>(std::count(mask.begin(), mask.end(), 1)); }

SaliencyMap token_saliency(TokenRef token, const ActivationTrace& trace, double threshold) {
    check_token(token, trace.num_layers(), trace.seq_len());
    const int patches = trace.seq_len() - 1;
    const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patches))));
    if (grid * grid != patches) fail(ErrorCode::dimension, "patch count " + std::to_string(patches) + " is not a square");

    const Tensor flow = rollout(trace, token.layer);
    const auto row = flow.row(token.position).subspan(1);
    const auto [lo_it, hi_it] = std::minmax_element(row.begin(), row.end());
    const double lo = *lo_it, hi = *hi_it;

    SaliencyMap map;
    map.token = token;
    map.grid_size = grid;
    map.threshold = threshold;
    map.grid = Tensor({grid, grid});
    map.mask.assign(static_cast<size_t>(patches), 0);
    if (hi > lo) {
        for (int t = 0; t < patches; ++t) {
            const double v = (row[static_cast<size_t>(t)] - lo) / (hi - lo);
            map.grid[static_cast<size_t>(t)] = static_cast<float>(v);
            map.mask[static_cast<size_t>(t)] = v >= threshold ? 1 : 0;
        }
    }
    return map;
}

std::optional<double> iop(std::span<const uint8_t> mask, int grid_size, int patch_size, const std::vector<Box>& truth) {
    if (mask.size() != static_cast<size_t>(grid_size) * grid_size) {
        fail(ErrorCode::dimension, "mask has " + std::to_string(mask.size()) + " cells, expected " +
                                       std::to_string(grid_size * grid_size));
    }
    int64_t predicted = 0, overlap = 0;
    for (int gy = 0; gy < grid_size; ++gy) {
        for (int gx = 0; gx < grid_size; ++gx) {
            if (!mask[static_cast<size_t>(gy * grid_size + gx)]) continue;
            for (int y = gy * patch_size; y < (gy + 1) * patch_size; ++y) {
                for (int x = gx * patch_size; x < (gx + 1) * patch_size; ++x) {
                    ++predicted;
                    if (std::any_of(truth.begin(), truth.end(), [&](const Box& b) { return b.contains(x, y); })) {
                        ++overlap;
                    }
                }
            }
        }
    }
    if (predicted == 0) return std::nullopt;
    return static_cast<double>(overlap) / static_cast<double>(predicted);
}

nlohmann::json saliency_to_json(const SaliencyMap& map) {
    nlohmann::json grid = nlohmann::json::array(), mask = nlohmann::json::array();
    for (int y = 0; y < map.grid_size; ++y) {
        nlohmann::json g = nlohmann::json::array(), m = nlohmann::json::array();
        for (int x = 0; x < map.grid_size; ++x) {
            const auto idx = static_cast<size_t>(y * map.grid_size + x);
            g.push_back(map.grid[idx]);
            m.push_back(map.mask[idx] != 0);
        }
        grid.push_back(std::move(g));
        mask.push_back(std::move(m));
    }
    return {{"layer", map.token.layer},
            {"position", map.token.position},
            {"grid_size", map.grid_size},
            {"threshold", map.threshold},
            {"rollout", {{"residual_weight", kRolloutResidualWeight}, {"head_fusion", "mean"}}},
            {"grid", std::move(grid)},
            {"mask", std::move(mask)}};
}

Image saliency_overlay(const Image& square, const SaliencyMap& map) {
    validate_image(square);
    if (square.width != square.height || square.width % map.grid_size != 0) {
        fail(ErrorCode::dimension, "overlay needs a square image whose side is a multiple of the grid size");
    }
    const int cell = square.width / map.grid_size;
    Image out = square;
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            const int gx = x / cell, gy = y / cell;
            const auto idx = static_cast<size_t>(gy * map.grid_size + gx);
            const double heat = map.grid[idx];
            const double alpha = 0.55;
            const std::array<double, 3> hot{255.0 * heat, 64.0 * (1.0 - heat), 255.0 * (1.0 - heat)};
            for (int c = 0; c < 3; ++c) {
                const double v = (1.0 - alpha) * out.at(x, y, c) + alpha * hot[static_cast<size_t>(c)];
                out.at(x, y, c) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
            if (map.mask[idx]) {
                const bool edge = [&] {
                    const int lx = x % cell, ly = y % cell;
                    auto masked = [&](int cx, int cy) {
                        return cx >= 0 && cy >= 0 && cx < map.grid_size && cy < map.grid_size &&
                               map.mask[static_cast<size_t>(cy * map.grid_size + cx)];
                    };
                    return (lx == 0 && !masked(gx - 1, gy)) || (lx == cell - 1 && !masked(gx + 1, gy)) ||
                           (ly == 0 && !masked(gx, gy - 1)) || (ly == cell - 1 && !masked(gx, gy + 1));
                }();
                if (edge) {
                    out.at(x, y, 0) = 255;
                    out.at(x, y, 1) = 255;
                    out.at(x, y, 2) = 255;
                }
            }
        }
    }
    return out;
}

} // namespace vitlens

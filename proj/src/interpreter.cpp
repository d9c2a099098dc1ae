#include "vitlens/interpreter.hpp"

#include "vitlens/error.hpp"
#include "vitlens/parallel.hpp"
#include "vitlens/rng.hpp"

#include <cmath>

namespace vitlens {

using nlohmann::json;

Interpretation interpret(TokenRef token, const ActivationTrace& trace, const ModelBundle& bundle,
                         const Vocabulary& vocab, size_t top_k) {
    check_compatible(vocab, bundle.manifest);
    const Tensor carried = forward_ablated_from(token, trace, bundle);
    const Tensor joint = project_to_joint(carried.data(), bundle);
    return Interpretation{token, rank_vocabulary(joint.data(), vocab, top_k), false, 0, 0};
}

DriftTable DriftTable::zeros(int num_layers, int num_positions) {
    DriftTable t;
    t.num_layers = num_layers;
    t.num_positions = num_positions;
    t.sigma.assign(static_cast<size_t>(num_layers) * num_positions, 0.0);
    return t;
}

json drift_to_json(const DriftTable& drift, bool include_distances) {
    json sigma = json::object();
    for (int i = 1; i <= drift.num_layers; ++i) {
        json row = json::array();
        for (int j = 0; j < drift.num_positions; ++j) row.push_back(drift.at(i, j));
        sigma[std::to_string(i)] = std::move(row);
    }
    json out{{"format_version", DriftTable::kFormatVersion},
             {"noise_model", DriftTable::kNoiseModel},
             {"calibration_set_id", drift.calibration_set_id},
             {"calibration_size", drift.calibration_size},
             {"num_layers", drift.num_layers},
             {"num_positions", drift.num_positions},
             {"sigma", std::move(sigma)},
             {"summary", {{"cls_mean", drift.cls_mean}, {"other_mean", drift.other_mean}}}};
    if (include_distances) {
        out["histogram"] = {{"cls", drift.cls_distances}, {"other", drift.other_distances}};
    }
    return out;
}

DriftTable drift_from_json(const json& j) {
    try {
        if (j.at("format_version").get<int>() != DriftTable::kFormatVersion) {
            fail(ErrorCode::version_mismatch, "unsupported drift table version");
        }
        DriftTable t = DriftTable::zeros(j.at("num_layers").get<int>(), j.at("num_positions").get<int>());
        t.calibration_set_id = j.value("calibration_set_id", std::string());
        t.calibration_size = j.value("calibration_size", 0);
        const json& sigma = j.at("sigma");
        for (int i = 1; i <= t.num_layers; ++i) {
            const auto row = sigma.at(std::to_string(i)).get<std::vector<double>>();
            if (static_cast<int>(row.size()) != t.num_positions) {
                fail(ErrorCode::format, "drift layer " + std::to_string(i) + " has " + std::to_string(row.size()) +
                                            " positions, expected " + std::to_string(t.num_positions));
            }
            for (int p = 0; p < t.num_positions; ++p) {
                if (!(row[static_cast<size_t>(p)] >= 0.0)) fail(ErrorCode::format, "drift sigma must be >= 0");
                t.sigma[static_cast<size_t>((i - 1) * t.num_positions + p)] = row[static_cast<size_t>(p)];
            }
        }
        if (j.contains("summary")) {
            t.cls_mean = j["summary"].value("cls_mean", 0.0);
            t.other_mean = j["summary"].value("other_mean", 0.0);
        }
        if (j.contains("histogram")) {
            t.cls_distances = j["histogram"].value("cls", std::vector<double>{});
            t.other_distances = j["histogram"].value("other", std::vector<double>{});
        }
        return t;
    } catch (const json::exception& e) {
        fail(ErrorCode::format, std::string("malformed drift table: ") + e.what());
    }
}

DriftTable calibrate_drift(std::span<const ActivationTrace> traces, const ModelBundle& bundle,
                           std::string calibration_set_id) {
    if (traces.empty()) fail(ErrorCode::input, "drift calibration needs at least one image");
    const Manifest& m = bundle.manifest;
    const int layers = m.num_layers, positions = m.seq_len();
    const auto d = static_cast<size_t>(m.hidden_dim);
    DriftTable table = DriftTable::zeros(layers, positions);
    table.calibration_set_id = std::move(calibration_set_id);
    table.calibration_size = static_cast<int>(traces.size());

    std::vector<double> with_sum(static_cast<size_t>(layers) * positions * d, 0.0);
    std::vector<double> without_sum(with_sum.size(), 0.0);
    for (const auto& trace : traces) {
        if (trace.num_layers() != layers || trace.seq_len() != positions) {
            fail(ErrorCode::dimension, "calibration trace does not match the model");
        }
        for (int i = 1; i <= layers; ++i) {
            for (int j = 0; j < positions; ++j) {
                const auto with = trace.states[static_cast<size_t>(i)].row(j);
                const Tensor without = block_ablated(trace.states[static_cast<size_t>(i - 1)].row(j), i, bundle);
                const size_t base = (static_cast<size_t>(i - 1) * positions + j) * d;
                double dist2 = 0.0;
                for (size_t c = 0; c < d; ++c) {
                    with_sum[base + c] += with[c];
                    without_sum[base + c] += without[c];
                    const double diff = static_cast<double>(with[c]) - without[c];
                    dist2 += diff * diff;
                }
                (j == 0 ? table.cls_distances : table.other_distances).push_back(std::sqrt(dist2));
            }
        }
    }
    const double n = static_cast<double>(traces.size());
    double cls_total = 0.0, other_total = 0.0;
    for (int i = 1; i <= layers; ++i) {
        for (int j = 0; j < positions; ++j) {
            const size_t base = (static_cast<size_t>(i - 1) * positions + j) * d;
            double dist2 = 0.0;
            for (size_t c = 0; c < d; ++c) {
                const double diff = with_sum[base + c] / n - without_sum[base + c] / n;
                dist2 += diff * diff;
            }
            const double s = std::sqrt(dist2);
            table.sigma[static_cast<size_t>((i - 1) * positions + j)] = s;
            (j == 0 ? cls_total : other_total) += s;
        }
    }
    table.cls_mean = cls_total / layers;
    table.other_mean = positions > 1 ? other_total / (static_cast<double>(layers) * (positions - 1)) : 0.0;
    return table;
}

DriftTable calibrate_drift(std::span<const Tensor> patch_sets, const ModelBundle& bundle,
                           std::string calibration_set_id) {
    if (patch_sets.empty()) fail(ErrorCode::input, "drift calibration needs at least one image");
    std::vector<ActivationTrace> traces;
    traces.reserve(patch_sets.size());
    for (const auto& p : patch_sets) traces.push_back(forward_full(p, bundle));
    return calibrate_drift(std::span<const ActivationTrace>(traces), bundle, std::move(calibration_set_id));
}

Tensor forward_ablated_smoothed(TokenRef token, const ActivationTrace& trace, const ModelBundle& bundle,
                                const DriftTable& drift, const SmoothingOptions& options) {
    if (options.samples < 1) fail(ErrorCode::input, "smoothing needs samples >= 1");
    const Manifest& m = bundle.manifest;
    if (drift.num_layers != m.num_layers || drift.num_positions != m.seq_len()) {
        fail(ErrorCode::compatibility, "drift table covers " + std::to_string(drift.num_layers) + " layers x " +
                                           std::to_string(drift.num_positions) + " positions, model has " +
                                           std::to_string(m.num_layers) + " x " + std::to_string(m.seq_len()));
    }
    const auto start = trace.token(token);
    const auto d = start.size();
    std::vector<float> current(start.begin(), start.end());
    std::vector<float> sample(d);
    std::vector<double> acc(d);
    const CounterRng rng = CounterRng(options.seed).derive(static_cast<uint64_t>(token.position));
    const auto samples = static_cast<uint64_t>(options.samples);
    for (int k = token.layer; k <= m.num_layers; ++k) {
        const double s = drift.at(k, token.position);
        std::fill(acc.begin(), acc.end(), 0.0);
        for (uint64_t n = 0; n < samples; ++n) {
            const uint64_t base = (static_cast<uint64_t>(k - 1) * samples + n) * d;
            for (size_t c = 0; c < d; ++c) {
                sample[c] = static_cast<float>(current[c] + s * rng.gaussian(base + c));
            }
            block_ablated_inplace(sample, k, bundle);
            for (size_t c = 0; c < d; ++c) acc[c] += sample[c];
        }
        for (size_t c = 0; c < d; ++c) current[c] = static_cast<float>(acc[c] / static_cast<double>(samples));
    }
    return Tensor({static_cast<int64_t>(d)}, std::move(current));
}

Interpretation interpret_smoothed(TokenRef token, const ActivationTrace& trace, const ModelBundle& bundle,
                                  const Vocabulary& vocab, const DriftTable& drift,
                                  const SmoothingOptions& options, size_t top_k) {
    check_compatible(vocab, bundle.manifest);
    const Tensor carried = forward_ablated_smoothed(token, trace, bundle, drift, options);
    const Tensor joint = project_to_joint(carried.data(), bundle);
    return Interpretation{token, rank_vocabulary(joint.data(), vocab, top_k), true, options.samples, options.seed};
}

Interpretation interpret_with(TokenRef token, const ActivationTrace& trace, const ModelBundle& bundle,
                              const Vocabulary& vocab, const InterpretOptions& options) {
    if (options.smoothing) {
        if (!options.drift) fail(ErrorCode::input, "smoothing requested without a drift table");
        return interpret_smoothed(token, trace, bundle, vocab, *options.drift, *options.smoothing, options.top_k);
    }
    return interpret(token, trace, bundle, vocab, options.top_k);
}

std::vector<Interpretation> interpret_layer(int layer, const ActivationTrace& trace, const ModelBundle& bundle,
                                            const Vocabulary& vocab, const InterpretOptions& options) {
    check_token(TokenRef{layer, 0}, trace.num_layers(), trace.seq_len());
    check_compatible(vocab, bundle.manifest);
    std::vector<Interpretation> out(static_cast<size_t>(trace.seq_len()));
    if (options.smoothing) {
        parallel_for(out.size(), options.threads, [&](size_t j) {
            out[j] = interpret_with(TokenRef{layer, static_cast<int>(j)}, trace, bundle, vocab, options);
        });
        return out;
    }
    const std::vector<double> norms = vocabulary_norms(vocab);
    parallel_for(out.size(), options.threads, [&](size_t j) {
        const TokenRef token{layer, static_cast<int>(j)};
        const Tensor joint = project_to_joint(forward_ablated_from(token, trace, bundle).data(), bundle);
        out[j] = Interpretation{token, rank_vocabulary(joint.data(), vocab, norms, options.top_k), false, 0, 0};
    });
    return out;
}

json ranking_to_json(const Ranking& ranking) {
    json arr = json::array();
    for (const auto& r : ranking) arr.push_back({{"index", r.index}, {"text", r.text}, {"cosine", r.cosine}});
    return arr;
}

json interpretation_to_json(const Interpretation& interp) {
    json out{{"layer", interp.token.layer},
             {"position", interp.token.position},
             {"ranking", ranking_to_json(interp.ranking)},
             {"smoothing_used", interp.smoothing_used}};
    if (interp.smoothing_used) {
        out["samples"] = interp.samples;
        out["seed"] = interp.seed;
        out["noise_model"] = DriftTable::kNoiseModel;
    }
    return out;
}

namespace {

json degenerate_json(TokenRef token, const Error& e) {
    return {{"layer", token.layer},
            {"position", token.position},
            {"ranking", json::array()},
            {"degenerate", true},
            {"message", e.what()}};
}

} // namespace

json interpretations_json(int layer, std::optional<int> position, const ActivationTrace& trace,
                          const ModelBundle& bundle, const Vocabulary& vocab, const InterpretOptions& options) {
    json out = json::array();
    auto one = [&](TokenRef token) {
        try {
            out.push_back(interpretation_to_json(interpret_with(token, trace, bundle, vocab, options)));
        } catch (const Error& e) {
            if (e.code() != ErrorCode::degenerate_vector) throw;
            out.push_back(degenerate_json(token, e));
        }
    };
    if (position) {
        one({layer, *position});
        return out;
    }
    try {
        for (const auto& interp : interpret_layer(layer, trace, bundle, vocab, options)) {
            out.push_back(interpretation_to_json(interp));
        }
        return out;
    } catch (const Error& e) {
        if (e.code() != ErrorCode::degenerate_vector) throw;
    }
    out = json::array();
    for (int j = 0; j < trace.seq_len(); ++j) one({layer, j});
    return out;
}

} // namespace vitlens

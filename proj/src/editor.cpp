#include "vitlens/editor.hpp"

#include "vitlens/diag.hpp"
#include "vitlens/error.hpp"
#include "vitlens/parallel.hpp"
#include "vitlens/rng.hpp"
#include "vitlens/serialize.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_set>

namespace vitlens {

using nlohmann::json;

WordListMode parse_wordlist_mode(std::string_view name) {
    if (name == "remove" || name == "remove-matching" || name == "remove_matching") return WordListMode::remove_matching;
    if (name == "keep" || name == "keep-matching" || name == "keep_matching") return WordListMode::keep_matching;
    fail(ErrorCode::input, "unknown word-list mode '" + std::string(name) + "' (expected remove or keep)");
}

std::string_view to_string(WordListMode mode) {
    return mode == WordListMode::remove_matching ? "remove-matching" : "keep-matching";
}

bool WordList::contains(const std::string& text) const {
    return std::find(words.begin(), words.end(), text) != words.end();
}

WordList make_wordlist(std::string id, std::vector<std::string> words, WordListMode mode) {
    if (words.empty()) fail(ErrorCode::input, "word list '" + id + "' is empty");
    return WordList{std::move(id), std::move(words), mode};
}

WordList load_wordlist(const std::filesystem::path& path, WordListMode mode) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::io, "cannot open " + path.string());
    std::vector<std::string> words;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) words.push_back(line);
    }
    return make_wordlist(path.stem().string(), std::move(words), mode);
}

std::vector<std::string> validate_wordlist(const WordList& words, const Vocabulary& vocab) {
    std::vector<std::string> missing;
    for (const auto& w : words.words) {
        if (!vocab.index_of(w)) missing.push_back(w);
    }
    if (!missing.empty()) {
        warn("word list '" + words.id + "': " + std::to_string(missing.size()) + " of " +
             std::to_string(words.words.size()) + " words are not in vocabulary '" + vocab.id() + "'");
    }
    return missing;
}

MatchResult match_tokens(const ActivationTrace& trace, const ModelBundle& bundle, const Vocabulary& vocab,
                         const WordList& words, const std::vector<int>& layers, const MatchOptions& options) {
    if (vocab.empty()) fail(ErrorCode::input, "cannot match against an empty vocabulary");
    check_compatible(vocab, bundle.manifest);
    if (options.top_k_membership < 1) fail(ErrorCode::input, "top_k_membership must be >= 1");
    for (int layer : layers) check_token(TokenRef{layer, 0}, trace.num_layers(), trace.seq_len());

    MatchResult result;
    std::vector<bool> listed(vocab.size(), false);
    size_t present = 0;
    for (size_t i = 0; i < vocab.size(); ++i) {
        listed[i] = words.contains(vocab.text(i));
        present += listed[i] ? 1 : 0;
    }
    if (present < words.words.size()) {
        const auto missing = validate_wordlist(words, vocab);
        if (!missing.empty()) {
            result.warnings.push_back(std::to_string(missing.size()) + " word(s) from '" + words.id +
                                      "' are not in vocabulary '" + vocab.id() + "'");
        }
    }
    if (present == 0) {
        result.warnings.push_back("word list '" + words.id + "' shares no entries with vocabulary '" + vocab.id() + "'");
        if (words.mode == WordListMode::remove_matching) return result;
    }

    std::vector<TokenRef> candidates;
    const std::set<int> unique_layers(layers.begin(), layers.end());
    for (int layer : unique_layers) {
        for (int j = options.skip_cls ? 1 : 0; j < trace.seq_len(); ++j) candidates.push_back({layer, j});
    }
    InterpretOptions iopts;
    iopts.top_k = options.top_k_membership;
    iopts.smoothing = options.smoothing;
    iopts.drift = options.drift;
    std::vector<uint8_t> hit(candidates.size(), 0);
    parallel_for(candidates.size(), options.threads, [&](size_t c) {
        const Interpretation interp = interpret_with(candidates[c], trace, bundle, vocab, iopts);
        const bool any = std::any_of(interp.ranking.begin(), interp.ranking.end(),
                                     [&](const RankedText& r) { return listed[r.index]; });
        hit[c] = (words.mode == WordListMode::remove_matching) == any ? 1 : 0;
    });
    for (size_t c = 0; c < candidates.size(); ++c) {
        if (hit[c]) result.tokens.push_back(candidates[c]);
    }
    return result;
}

InterventionPlan build_zero_plan(std::span<const TokenRef> tokens, Provenance provenance) {
    InterventionPlan plan;
    for (const auto& t : tokens) {
        if (t.layer < 1 || t.position < 0) fail(ErrorCode::input, "invalid token " + to_string(t));
        plan.set_zero(t);
    }
    if (provenance.rule.empty()) provenance.rule = "zero";
    plan.provenance = std::move(provenance);
    return plan;
}

std::vector<DonorToken> harvest_donors(const ActivationTrace& trace, std::span<const TokenRef> tokens) {
    std::vector<DonorToken> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) {
        const auto v = trace.token(t);
        out.push_back({t, Tensor::from_span({static_cast<int64_t>(v.size())}, v)});
    }
    return out;
}

SwapResult build_swap_plan(std::span<const TokenRef> targets, std::span<const DonorToken> donors, uint64_t seed,
                           Provenance provenance) {
    std::map<int, std::vector<const DonorToken*>> by_layer;
    for (const auto& d : donors) by_layer[d.token.layer].push_back(&d);

    SwapResult result;
    SeededStream rng(seed);
    for (const auto& t : targets) {
        const auto it = by_layer.find(t.layer);
        if (it == by_layer.end() || it->second.empty()) {
            result.warnings.push_back("no donor token on layer " + std::to_string(t.layer) + " for target " +
                                      to_string(t) + "; left unchanged");
            continue;
        }
        const auto pick = rng.next_below(it->second.size());
        result.plan.set_value(t, it->second[static_cast<size_t>(pick)]->value);
    }
    if (provenance.rule.empty()) provenance.rule = "swap";
    result.plan.provenance = std::move(provenance);
    return result;
}

SwapResult build_swap_plan(std::span<const TokenRef> targets, const ActivationTrace& donor_trace,
                           std::span<const TokenRef> donor_tokens, uint64_t seed, Provenance provenance) {
    const auto donors = harvest_donors(donor_trace, donor_tokens);
    return build_swap_plan(targets, donors, seed, std::move(provenance));
}

ApplyResult apply(const InterventionPlan& plan, const Tensor& patches, const ModelBundle& bundle,
                  const Vocabulary& vocab) {
    check_compatible(vocab, bundle.manifest);
    ApplyResult out;
    out.trace = forward_full(patches, bundle, &plan);
    out.ranking = classify_trace(out.trace, bundle, vocab);
    return out;
}

std::map<int, double> average_replacements(std::span<const InterventionPlan> plans, int num_layers) {
    std::map<int, double> avg;
    for (int k = 1; k <= num_layers + 1; ++k) avg[k] = 0.0;
    if (plans.empty()) return avg;
    for (const auto& p : plans) {
        for (const auto& [layer, count] : p.stats()) avg[layer] += count;
    }
    for (auto& [_, v] : avg) v /= static_cast<double>(plans.size());
    return avg;
}

json tokens_to_json(std::span<const TokenRef> tokens) {
    json arr = json::array();
    for (const auto& t : tokens) arr.push_back({{"layer", t.layer}, {"position", t.position}});
    return arr;
}

json plan_to_json(const InterventionPlan& plan) {
    json reps = json::array();
    for (const auto& [ref, value] : plan.replacements()) {
        json r{{"layer", ref.layer}, {"position", ref.position}};
        r["value"] = value ? json(floats_to_base64(value->data())) : json(nullptr);
        reps.push_back(std::move(r));
    }
    json stats = json::object();
    for (const auto& [layer, count] : plan.stats()) stats[std::to_string(layer)] = count;
    return {{"format_version", 1},
            {"replacements", std::move(reps)},
            {"provenance",
             {{"rule", plan.provenance.rule},
              {"wordlist_id", plan.provenance.wordlist_id},
              {"donor_image_id", plan.provenance.donor_image_id}}},
            {"stats", std::move(stats)}};
}

InterventionPlan plan_from_json(const json& j) {
    InterventionPlan plan;
    try {
        for (const auto& r : j.at("replacements")) {
            const TokenRef ref{r.at("layer").get<int>(), r.at("position").get<int>()};
            if (ref.layer < 1 || ref.position < 0) fail(ErrorCode::input, "invalid token " + to_string(ref));
            const json& v = r.contains("value") ? r.at("value") : json(nullptr);
            if (v.is_null() || (v.is_string() && v.get<std::string>() == "ZERO")) {
                plan.set_zero(ref);
            } else if (v.is_string()) {
                auto values = floats_from_base64(v.get<std::string>());
                const auto n = static_cast<int64_t>(values.size());
                plan.set_value(ref, Tensor({n}, std::move(values)));
            } else if (v.is_array()) {
                auto values = v.get<std::vector<float>>();
                const auto n = static_cast<int64_t>(values.size());
                plan.set_value(ref, Tensor({n}, std::move(values)));
            } else {
                fail(ErrorCode::format, "replacement value must be null, base64 float32, or an array");
            }
        }
        if (j.contains("provenance")) {
            const json& p = j["provenance"];
            plan.provenance = {p.value("rule", std::string()), p.value("wordlist_id", std::string()),
                               p.value("donor_image_id", std::string())};
        }
    } catch (const json::exception& e) {
        fail(ErrorCode::format, std::string("malformed plan: ") + e.what());
    }
    return plan;
}

} // namespace vitlens

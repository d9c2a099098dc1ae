#pragma once

#include "vitlens/engine.hpp"
#include "vitlens/interpreter.hpp"
#include "vitlens/intervention.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vitlens {

enum class WordListMode { remove_matching, keep_matching };

WordListMode parse_wordlist_mode(std::string_view name);
std::string_view to_string(WordListMode mode);

struct WordList {
    std::string id;
    std::vector<std::string> words;
    WordListMode mode = WordListMode::remove_matching;

    bool contains(const std::string& text) const;
};

WordList make_wordlist(std::string id, std::vector<std::string> words, WordListMode mode);
// Plain text, one phrase per line; blank lines ignored.
WordList load_wordlist(const std::filesystem::path& path, WordListMode mode);

// Words missing from the vocabulary (each also reported as a warning).
std::vector<std::string> validate_wordlist(const WordList& words, const Vocabulary& vocab);

struct MatchOptions {
    size_t top_k_membership = 1;
    bool skip_cls = false;
    std::optional<SmoothingOptions> smoothing;
    const DriftTable* drift = nullptr;
    unsigned threads = 0;
};

struct MatchResult {
    std::vector<TokenRef> tokens; // ordered by (layer, position)
    std::vector<std::string> warnings;
};

// Selects tokens whose top-k interpretation hits the word list (or misses it,
// in keep mode).
MatchResult match_tokens(const ActivationTrace& trace, const ModelBundle& bundle, const Vocabulary& vocab,
                         const WordList& words, const std::vector<int>& layers, const MatchOptions& options);

InterventionPlan build_zero_plan(std::span<const TokenRef> tokens, Provenance provenance = {});

struct DonorToken {
    TokenRef token;
    Tensor value;
};

std::vector<DonorToken> harvest_donors(const ActivationTrace& trace, std::span<const TokenRef> tokens);

struct SwapResult {
    InterventionPlan plan;
    std::vector<std::string> warnings;
};

// Each target (k, j) takes the value of a donor token drawn uniformly
// (seeded) from the donors of the same layer k.
SwapResult build_swap_plan(std::span<const TokenRef> targets, std::span<const DonorToken> donors, uint64_t seed,
                           Provenance provenance = {});
SwapResult build_swap_plan(std::span<const TokenRef> targets, const ActivationTrace& donor_trace,
                           std::span<const TokenRef> donor_tokens, uint64_t seed, Provenance provenance = {});

struct ApplyResult {
    Ranking ranking;
    ActivationTrace trace;
};

ApplyResult apply(const InterventionPlan& plan, const Tensor& patches, const ModelBundle& bundle,
                  const Vocabulary& vocab);

// Mean replaced tokens per layer over a batch of plans, layers 1..L+1.
std::map<int, double> average_replacements(std::span<const InterventionPlan> plans, int num_layers);

nlohmann::json plan_to_json(const InterventionPlan& plan);
InterventionPlan plan_from_json(const nlohmann::json& j);

nlohmann::json tokens_to_json(std::span<const TokenRef> tokens);

} // namespace vitlens

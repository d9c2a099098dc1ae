#pragma once

#include "vitlens/tensor.hpp"

#include <compare>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vitlens {

// Token (layer, position) addresses h_{layer-1}[position], the input to block
// `layer`. layer ranges over 1..L+1; L+1 is the final state h_L. Position 0 is CLS.
struct TokenRef {
    int layer = 1;
    int position = 0;

    auto operator<=>(const TokenRef&) const = default;
};

std::string to_string(const TokenRef& token);

struct Provenance {
    std::string rule;
    std::string wordlist_id;
    std::string donor_image_id;

    bool operator==(const Provenance&) const = default;
};

// Per-token replacements injected at block inputs during a forward pass.
// A missing value means the zero vector.
class InterventionPlan {
public:
    // Re-adding a token overwrites its earlier replacement (at most one per token).
    void set_zero(TokenRef token);
    void set_value(TokenRef token, Tensor value);

    bool empty() const noexcept { return replacements_.empty(); }
    size_t size() const noexcept { return replacements_.size(); }
    bool contains(TokenRef token) const { return replacements_.count(token) > 0; }

    const std::map<TokenRef, std::optional<Tensor>>& replacements() const noexcept { return replacements_; }

    // Replaced-token count per layer; layers without replacements are absent.
    std::map<int, int> stats() const;

    // Overwrites rows of `hidden` ([(1+T) x D]) addressed to `layer`.
    void apply_to_layer(int layer, Tensor& hidden) const;

    // Throws if any replacement falls outside the given dimensions.
    void validate(int num_layers, int seq_len, int hidden_dim) const;

    Provenance provenance;

    bool operator==(const InterventionPlan&) const = default;

private:
    std::map<TokenRef, std::optional<Tensor>> replacements_;
};

} // namespace vitlens

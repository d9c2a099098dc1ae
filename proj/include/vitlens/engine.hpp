#pragma once

#include "vitlens/intervention.hpp"
#include "vitlens/model_io.hpp"
#include "vitlens/tensor.hpp"

#include <span>
#include <string>
#include <vector>

namespace vitlens {

struct ActivationTrace {
    // states[k] = h_k, each [(1+T) x D]; states.size() == L + 1. When a plan
    // was applied, states[k-1] holds the block-k input after replacement.
    std::vector<Tensor> states;
    // attentions[k-1] = block k post-softmax attention, [H x (1+T) x (1+T)].
    std::vector<Tensor> attentions;

    int num_layers() const { return static_cast<int>(attentions.size()); }
    int seq_len() const { return states.empty() ? 0 : static_cast<int>(states.front().dim(0)); }

    // Value of token (i, j), i.e. h_{i-1}[j].
    std::span<const float> token(TokenRef ref) const;

    bool operator==(const ActivationTrace&) const = default;
};

void check_token(TokenRef token, int num_layers, int seq_len);

// [T x 3PP] patches -> h_0, [(1+T) x D].
Tensor embed(const Tensor& patches, const ModelBundle& bundle);

struct BlockOutput {
    Tensor hidden;
    Tensor attention; // [H x N x N]
};

// Block k (1-based). Replacements addressed to layer k are applied to `h`
// before the block runs.
BlockOutput block_full(const Tensor& h, int k, const ModelBundle& bundle, const InterventionPlan* plan = nullptr);

// Scaled pre-softmax attention logits of block k, [H x N x N].
Tensor attention_logits(const Tensor& h, int k, const ModelBundle& bundle);

// Block k with keys and queries disabled: only the token's own value path
// (V then output projection), the MLP, the layer norms and residuals act.
Tensor block_ablated(std::span<const float> token, int k, const ModelBundle& bundle);
void block_ablated_inplace(std::span<float> token, int k, const ModelBundle& bundle);

ActivationTrace forward_full(const Tensor& patches, const ModelBundle& bundle, const InterventionPlan* plan = nullptr);

// h_{i-1}[j] carried through ablated blocks i..L; identity for i = L+1.
Tensor forward_ablated_from(TokenRef token, const ActivationTrace& trace, const ModelBundle& bundle);

// ln_post, visual projection, then unit-normalize.
Tensor project_to_joint(std::span<const float> token, const ModelBundle& bundle);

struct RankedText {
    size_t index = 0;
    std::string text;
    double cosine = 0.0;

    bool operator==(const RankedText&) const = default;
};
using Ranking = std::vector<RankedText>;

// Descending cosine, ties broken by vocabulary index. top_k = 0 keeps all.
Ranking rank_vocabulary(std::span<const float> joint, const Vocabulary& vocab, size_t top_k = 0);
// Same ranking with the embedding norms precomputed (see vocabulary_norms).
Ranking rank_vocabulary(std::span<const float> joint, const Vocabulary& vocab, std::span<const double> norms,
                        size_t top_k = 0);
std::vector<double> vocabulary_norms(const Vocabulary& vocab);

// 1-based rank of vocabulary entry `index` in `ranking`, or 0 if absent.
size_t rank_of(const Ranking& ranking, size_t index);

Ranking classify_trace(const ActivationTrace& trace, const ModelBundle& bundle, const Vocabulary& vocab);
Ranking classify(const Tensor& patches, const ModelBundle& bundle, const Vocabulary& vocab,
                 const InterventionPlan* plan = nullptr);

} // namespace vitlens

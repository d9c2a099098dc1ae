#include "vitlens/engine.hpp"

#include "vitlens/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vitlens {

namespace {

void check_block_index(int k, const ModelBundle& bundle) {
    if (k < 1 || k > bundle.manifest.num_layers) {
        fail(ErrorCode::input, "block index " + std::to_string(k) + " outside 1.." +
                                   std::to_string(bundle.manifest.num_layers));
    }
}

// h <- h + fc2(act(fc1(LN2(h)))), one row.
void mlp_residual_row(std::span<float> h, const BlockWeights& w, const Manifest& m) {
    const auto d = h.size();
    std::vector<float> normed(d), hidden(static_cast<size_t>(m.mlp_dim)), out(d);
    layer_norm_row(h, w.ln2_gamma, w.ln2_beta, m.ln_eps, normed);
    linear_row(normed, w.fc1_weight, w.fc1_bias, hidden);
    for (auto& v : hidden) v = activate(v, m.activation);
    linear_row(hidden, w.fc2_weight, w.fc2_bias, out);
    for (size_t i = 0; i < d; ++i) h[i] += out[i];
}

} // namespace

std::span<const float> ActivationTrace::token(TokenRef ref) const {
    check_token(ref, num_layers(), seq_len());
    return states[static_cast<size_t>(ref.layer - 1)].row(ref.position);
}

void check_token(TokenRef token, int num_layers, int seq_len) {
    if (token.layer < 1 || token.layer > num_layers + 1 || token.position < 0 || token.position >= seq_len) {
        fail(ErrorCode::input, "token " + to_string(token) + " out of range (layers 1.." +
                                   std::to_string(num_layers + 1) + ", positions 0.." + std::to_string(seq_len - 1) +
                                   ")");
    }
}

Tensor embed(const Tensor& patches, const ModelBundle& bundle) {
    const Manifest& m = bundle.manifest;
    if (patches.rank() != 2 || patches.dim(0) != m.num_patches() || patches.dim(1) != m.patch_dim()) {
        fail(ErrorCode::dimension, "patch tensor " + shape_to_string(patches.shape()) + " does not match the model (" +
                                       std::to_string(m.num_patches()) + " x " + std::to_string(m.patch_dim()) + ")");
    }
    Tensor h({m.seq_len(), m.hidden_dim});
    auto cls = h.row(0);
    const auto pos0 = bundle.pos_embedding.row(0);
    for (int i = 0; i < m.hidden_dim; ++i) {
        cls[static_cast<size_t>(i)] = bundle.class_embedding[static_cast<size_t>(i)] + pos0[static_cast<size_t>(i)];
    }
    const Tensor no_bias;
    for (int t = 0; t < m.num_patches(); ++t) {
        auto row = h.row(1 + t);
        linear_row(patches.row(t), bundle.patch_embed, no_bias, row);
        const auto pos = bundle.pos_embedding.row(1 + t);
        for (size_t i = 0; i < row.size(); ++i) row[i] += pos[i];
    }
    return h;
}

Tensor attention_logits(const Tensor& h, int k, const ModelBundle& bundle) {
    check_block_index(k, bundle);
    const Manifest& m = bundle.manifest;
    const BlockWeights& w = bundle.block(k);
    const int64_t n = h.dim(0);
    const int heads = m.num_heads, hd = m.head_dim();
    const Tensor x = layer_norm(h, w.ln1_gamma, w.ln1_beta, m.ln_eps);
    const Tensor q = linear(x, w.q_weight, w.q_bias);
    const Tensor key = linear(x, w.k_weight, w.k_bias);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Tensor logits({heads, n, n});
    auto out = logits.mutable_data();
    for (int hh = 0; hh < heads; ++hh) {
        const size_t off = static_cast<size_t>(hh * hd);
        for (int64_t i = 0; i < n; ++i) {
            const auto qi = q.row(i).subspan(off, static_cast<size_t>(hd));
            for (int64_t j = 0; j < n; ++j) {
                const auto kj = key.row(j).subspan(off, static_cast<size_t>(hd));
                out[static_cast<size_t>((hh * n + i) * n + j)] = static_cast<float>(dot(qi, kj) * scale);
            }
        }
    }
    return logits;
}

BlockOutput block_full(const Tensor& h_in, int k, const ModelBundle& bundle, const InterventionPlan* plan) {
    check_block_index(k, bundle);
    const Manifest& m = bundle.manifest;
    if (h_in.rank() != 2 || h_in.dim(1) != m.hidden_dim) {
        fail(ErrorCode::dimension, "block input " + shape_to_string(h_in.shape()) + " does not match hidden_dim " +
                                       std::to_string(m.hidden_dim));
    }
    Tensor h = h_in;
    if (plan) plan->apply_to_layer(k, h);

    const BlockWeights& w = bundle.block(k);
    const int64_t n = h.dim(0);
    const int heads = m.num_heads, hd = m.head_dim();

    Tensor attention = attention_logits(h, k, bundle);
    for (int64_t r = 0; r < attention.rows(); ++r) softmax_row(attention.row(r));

    const Tensor x = layer_norm(h, w.ln1_gamma, w.ln1_beta, m.ln_eps);
    const Tensor v = linear(x, w.v_weight, w.v_bias);
    Tensor mixed({n, m.hidden_dim});
    std::vector<double> acc(static_cast<size_t>(hd));
    for (int hh = 0; hh < heads; ++hh) {
        const size_t off = static_cast<size_t>(hh * hd);
        for (int64_t i = 0; i < n; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            const auto weights = attention.row(hh * n + i);
            for (int64_t j = 0; j < n; ++j) {
                const double a = weights[static_cast<size_t>(j)];
                const auto vj = v.row(j).subspan(off, static_cast<size_t>(hd));
                for (int c = 0; c < hd; ++c) acc[static_cast<size_t>(c)] += a * vj[static_cast<size_t>(c)];
            }
            auto dst = mixed.row(i).subspan(off, static_cast<size_t>(hd));
            for (int c = 0; c < hd; ++c) dst[static_cast<size_t>(c)] = static_cast<float>(acc[static_cast<size_t>(c)]);
        }
    }
    const Tensor projected = linear(mixed, w.out_weight, w.out_bias);
    for (int64_t i = 0; i < n; ++i) {
        auto row = h.row(i);
        const auto add = projected.row(i);
        for (size_t c = 0; c < row.size(); ++c) row[c] += add[c];
        mlp_residual_row(row, w, m);
    }
    return {std::move(h), std::move(attention)};
}

void block_ablated_inplace(std::span<float> token, int k, const ModelBundle& bundle) {
    check_block_index(k, bundle);
    const Manifest& m = bundle.manifest;
    if (static_cast<int>(token.size()) != m.hidden_dim) {
        fail(ErrorCode::dimension, "token has " + std::to_string(token.size()) + " values, hidden_dim is " +
                                       std::to_string(m.hidden_dim));
    }
    const BlockWeights& w = bundle.block(k);
    const auto d = token.size();
    std::vector<float> normed(d), value(d), projected(d);
    layer_norm_row(token, w.ln1_gamma, w.ln1_beta, m.ln_eps, normed);
    linear_row(normed, w.v_weight, w.v_bias, value);
    linear_row(value, w.out_weight, w.out_bias, projected);
    for (size_t c = 0; c < d; ++c) token[c] += projected[c];
    mlp_residual_row(token, w, m);
}

Tensor block_ablated(std::span<const float> token, int k, const ModelBundle& bundle) {
    Tensor out = Tensor::from_span({static_cast<int64_t>(token.size())}, token);
    block_ablated_inplace(out.mutable_data(), k, bundle);
    return out;
}

ActivationTrace forward_full(const Tensor& patches, const ModelBundle& bundle, const InterventionPlan* plan) {
    const Manifest& m = bundle.manifest;
    if (plan) plan->validate(m.num_layers, m.seq_len(), m.hidden_dim);
    ActivationTrace trace;
    trace.states.reserve(static_cast<size_t>(m.num_layers) + 1);
    trace.attentions.reserve(static_cast<size_t>(m.num_layers));
    Tensor h = embed(patches, bundle);
    for (int k = 1; k <= m.num_layers; ++k) {
        if (plan) plan->apply_to_layer(k, h);
        BlockOutput out = block_full(h, k, bundle);
        trace.states.push_back(std::move(h));
        trace.attentions.push_back(std::move(out.attention));
        h = std::move(out.hidden);
    }
    if (plan) plan->apply_to_layer(m.num_layers + 1, h);
    trace.states.push_back(std::move(h));
    return trace;
}

Tensor forward_ablated_from(TokenRef token, const ActivationTrace& trace, const ModelBundle& bundle) {
    const auto start = trace.token(token);
    Tensor out = Tensor::from_span({static_cast<int64_t>(start.size())}, start);
    for (int k = token.layer; k <= bundle.manifest.num_layers; ++k) block_ablated_inplace(out.mutable_data(), k, bundle);
    return out;
}

Tensor project_to_joint(std::span<const float> token, const ModelBundle& bundle) {
    const Manifest& m = bundle.manifest;
    if (static_cast<int>(token.size()) != m.hidden_dim) {
        fail(ErrorCode::dimension, "token has " + std::to_string(token.size()) + " values, hidden_dim is " +
                                       std::to_string(m.hidden_dim));
    }
    std::vector<float> normed(token.size());
    layer_norm_row(token, bundle.ln_post_gamma, bundle.ln_post_beta, m.ln_eps, normed);
    Tensor joint({m.joint_dim});
    linear_row(normed, bundle.visual_projection, Tensor(), joint.mutable_data());
    return l2_normalize(joint);
}

std::vector<double> vocabulary_norms(const Vocabulary& vocab) {
    std::vector<double> norms(vocab.size());
    for (size_t i = 0; i < vocab.size(); ++i) norms[i] = l2_norm(vocab.embedding(i));
    return norms;
}

Ranking rank_vocabulary(std::span<const float> joint, const Vocabulary& vocab, size_t top_k) {
    return rank_vocabulary(joint, vocab, vocabulary_norms(vocab), top_k);
}

Ranking rank_vocabulary(std::span<const float> joint, const Vocabulary& vocab, std::span<const double> norms,
                        size_t top_k) {
    if (vocab.empty()) fail(ErrorCode::input, "vocabulary '" + vocab.id() + "' is empty");
    if (static_cast<int64_t>(joint.size()) != vocab.dim()) {
        fail(ErrorCode::compatibility, "vocabulary '" + vocab.id() + "' has dim " + std::to_string(vocab.dim()) +
                                           ", query has dim " + std::to_string(joint.size()));
    }
    if (norms.size() != vocab.size()) fail(ErrorCode::dimension, "vocabulary norm count does not match its size");
    // Same arithmetic as cosine(), with both norms hoisted out of the loop.
    const double na = l2_norm(joint);
    std::vector<double> scores(vocab.size());
    for (size_t i = 0; i < vocab.size(); ++i) {
        if (!(na > 0.0) || !(norms[i] > 0.0)) fail(ErrorCode::degenerate_vector, "cosine of a zero-norm vector");
        scores[i] = std::clamp(dot(joint, vocab.embedding(i)) / (na * norms[i]), -1.0, 1.0);
    }
    std::vector<size_t> order(vocab.size());
    std::iota(order.begin(), order.end(), size_t{0});
    const auto better = [&](size_t a, size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); };
    const size_t keep = top_k == 0 ? order.size() : std::min(top_k, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);
    Ranking out;
    out.reserve(keep);
    for (size_t r = 0; r < keep; ++r) out.push_back({order[r], vocab.text(order[r]), scores[order[r]]});
    return out;
}

size_t rank_of(const Ranking& ranking, size_t index) {
    for (size_t r = 0; r < ranking.size(); ++r) {
        if (ranking[r].index == index) return r + 1;
    }
    return 0;
}

Ranking classify_trace(const ActivationTrace& trace, const ModelBundle& bundle, const Vocabulary& vocab) {
    check_compatible(vocab, bundle.manifest);
    const Tensor joint = project_to_joint(trace.states.back().row(0), bundle);
    return rank_vocabulary(joint.data(), vocab);
}

Ranking classify(const Tensor& patches, const ModelBundle& bundle, const Vocabulary& vocab, const InterventionPlan* plan) {
    check_compatible(vocab, bundle.manifest);
    return classify_trace(forward_full(patches, bundle, plan), bundle, vocab);
}

} // namespace vitlens

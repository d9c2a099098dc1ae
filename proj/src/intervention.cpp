#include "vitlens/intervention.hpp"

#include "vitlens/error.hpp"

#include <algorithm>

namespace vitlens {

std::string to_string(const TokenRef& token) {
    return "L" + std::to_string(token.layer) + "T" + std::to_string(token.position);
}

void InterventionPlan::set_zero(TokenRef token) { replacements_[token] = std::nullopt; }

void InterventionPlan::set_value(TokenRef token, Tensor value) { replacements_[token] = std::move(value); }

std::map<int, int> InterventionPlan::stats() const {
    std::map<int, int> out;
    for (const auto& [ref, _] : replacements_) ++out[ref.layer];
    return out;
}

void InterventionPlan::apply_to_layer(int layer, Tensor& hidden) const {
    for (auto it = replacements_.lower_bound(TokenRef{layer, 0});
         it != replacements_.end() && it->first.layer == layer; ++it) {
        auto row = hidden.row(it->first.position);
        if (it->second) {
            const auto src = it->second->data();
            std::copy(src.begin(), src.end(), row.begin());
        } else {
            std::fill(row.begin(), row.end(), 0.0f);
        }
    }
}

void InterventionPlan::validate(int num_layers, int seq_len, int hidden_dim) const {
    for (const auto& [ref, value] : replacements_) {
        if (ref.layer < 1 || ref.layer > num_layers + 1 || ref.position < 0 || ref.position >= seq_len) {
            fail(ErrorCode::input, "plan replacement " + to_string(ref) + " is outside the model (layers 1.." +
                                       std::to_string(num_layers + 1) + ", positions 0.." +
                                       std::to_string(seq_len - 1) + ")");
        }
        if (value && static_cast<int>(value->size()) != hidden_dim) {
            fail(ErrorCode::compatibility, "plan replacement " + to_string(ref) + " has " +
                                               std::to_string(value->size()) + " values, model width is " +
                                               std::to_string(hidden_dim));
        }
    }
}

} // namespace vitlens

#pragma once

// Importance-score estimation and top-k position selection for early
// skipping. A schedule maps layer indices to skip ratios; the filter runs at
// the end of each scheduled layer, so later layers see a shrinking position
// set. The score of a position blends its previous-iteration confidence with
// the variation of an indicator tensor between iterations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "esdllm/tensor.hpp"

namespace esdllm {

enum class IndicatorKind { hidden, query, key, value };

inline const char * to_string(IndicatorKind k) {
    switch (k) {
        case IndicatorKind::hidden: return "hidden";
        case IndicatorKind::query: return "query";
        case IndicatorKind::key: return "key";
        case IndicatorKind::value: return "value";
    }
    return "hidden";
}

inline IndicatorKind indicator_from_string(const std::string & s) {
    if (s == "hidden") return IndicatorKind::hidden;
    if (s == "query") return IndicatorKind::query;
    if (s == "key") return IndicatorKind::key;
    if (s == "value") return IndicatorKind::value;
    throw config_error("unknown variation indicator '" + s + "'");
}

struct SkipSchedule {
    std::map<std::uint32_t, double> ratios;  // layer index -> skip ratio in [0,1)
    IndicatorKind indicator = IndicatorKind::hidden;
    double alpha = 0.5;

    void validate(std::uint32_t num_layers) const {
        for (const auto & [layer, r] : ratios) {
            if (layer >= num_layers) {
                throw config_error("skip ratio configured for layer " + std::to_string(layer) + " but model has " +
                                   std::to_string(num_layers) + " layers");
            }
            if (r < 0.0 || r >= 1.0) throw config_error("skip ratio must be in [0,1)");
        }
        if (alpha < 0.0 || alpha > 1.0) throw config_error("alpha must be in [0,1]");
    }

    bool has_layer(std::uint32_t l) const { return ratios.count(l) != 0; }

    // Whether the indicator requires its own cache (keys/values reuse the KV
    // cache; hidden states and queries are not otherwise stored).
    bool needs_indicator_cache() const {
        return indicator == IndicatorKind::hidden || indicator == IndicatorKind::query;
    }
};

// L1 norm of the tensor delta, normalized by the previous L2 norm and by
// sqrt(d) to align scales. Zero previous norm is only reachable with
// degenerate weights and maps to 0.
inline double variation_term(std::span<const float> now, std::span<const float> prev) {
    if (now.size() != prev.size() || now.empty()) throw config_error("variation_term: mismatched vector sizes");
    double l1 = 0.0;
    double l2sq = 0.0;
    for (std::size_t i = 0; i < now.size(); i++) {
        l1 += std::abs(static_cast<double>(now[i]) - static_cast<double>(prev[i]));
        l2sq += static_cast<double>(prev[i]) * static_cast<double>(prev[i]);
    }
    if (l2sq == 0.0) return 0.0;
    return l1 / (std::sqrt(static_cast<double>(now.size())) * std::sqrt(l2sq));
}

struct ImportanceVector {
    PositionSet positions;
    std::vector<double> scores;
};

// I_i = alpha * c_i + (1 - alpha) * variation_i over the active set. Rows of
// the indicator matrices are aligned with `positions`.
inline ImportanceVector importance_scores(const std::vector<float> & conf_prev, const Matrix & indicator_now,
                                          const Matrix & indicator_prev, double alpha, const PositionSet & positions) {
    if (conf_prev.size() != positions.size() || indicator_now.rows != positions.size() ||
        indicator_prev.rows != positions.size()) {
        throw config_error("importance_scores: inputs not aligned on the active set");
    }
    ImportanceVector iv;
    iv.positions = positions;
    iv.scores.resize(positions.size());
    for (std::size_t i = 0; i < positions.size(); i++) {
        const double var = variation_term(indicator_now.row(i), indicator_prev.row(i));
        iv.scores[i] = alpha * static_cast<double>(conf_prev[i]) + (1.0 - alpha) * var;
    }
    return iv;
}

inline std::size_t topk_count(double ratio, std::size_t active_size) {
    const double k = std::round((1.0 - ratio) * static_cast<double>(active_size));
    return std::max<std::size_t>(1, static_cast<std::size_t>(k));
}

// Keep the k = max(1, round((1-r)|S|)) highest-scoring positions. Ties break
// toward the lower absolute position; the result is sorted ascending.
inline PositionSet select_topk(const ImportanceVector & iv, double ratio) {
    if (ratio < 0.0 || ratio >= 1.0) throw config_error("skip ratio must be in [0,1)");
    if (iv.positions.empty()) throw config_error("select_topk: empty active set");
    if (ratio == 0.0) return iv.positions;

    const std::size_t k = topk_count(ratio, iv.positions.size());
    std::vector<std::size_t> order(iv.positions.size());
    for (std::size_t i = 0; i < order.size(); i++) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (iv.scores[a] != iv.scores[b]) return iv.scores[a] > iv.scores[b];
        return iv.positions[a] < iv.positions[b];
    });
    PositionSet keep;
    keep.reserve(k);
    for (std::size_t i = 0; i < k; i++) keep.push_back(iv.positions[order[i]]);
    std::sort(keep.begin(), keep.end());
    return keep;
}

// Survivor count per layer for a block of `block_len` positions, following
// the integer rounding the selection actually applies.
inline std::vector<std::uint32_t> survivor_counts(const SkipSchedule & schedule, std::uint32_t num_layers,
                                                  std::uint32_t block_len) {
    std::vector<std::uint32_t> counts(num_layers);
    std::size_t s = block_len;
    for (std::uint32_t l = 0; l < num_layers; l++) {
        counts[l] = static_cast<std::uint32_t>(s);
        auto it = schedule.ratios.find(l);
        if (it != schedule.ratios.end() && it->second > 0.0) s = topk_count(it->second, s);
    }
    return counts;
}

// Predicted steady-state per-iteration FLOP fraction relative to a full-block
// pass: sum of per-layer surviving fractions over the layer count.
inline double closed_form_flop_fraction(const SkipSchedule & schedule, std::uint32_t num_layers,
                                        std::uint32_t block_len) {
    const auto counts = survivor_counts(schedule, num_layers, block_len);
    double sum = 0.0;
    for (std::uint32_t c : counts) sum += static_cast<double>(c);
    return sum / (static_cast<double>(num_layers) * static_cast<double>(block_len));
}

}  // namespace esdllm

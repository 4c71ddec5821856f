#pragma once

// Cache subsystem: per-layer K/V over the full sequence (post-rotary),
// indicator-tensor caches at skip layers, the per-position confidence cache,
// in-place scatter updates, and the periodic refresh policy that bounds
// error accumulation.

#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "esdllm/model.hpp"
#include "esdllm/skip.hpp"

namespace esdllm {

struct CacheSet {
    std::uint32_t seq_len = 0;
    std::uint32_t hidden_dim = 0;
    std::vector<Matrix> k;                        // per layer [N x d]
    std::vector<Matrix> v;                        // per layer [N x d]
    std::map<std::uint32_t, Matrix> indicator;    // skip layer -> [N x d] (hidden or query cache)
    IndicatorKind indicator_kind = IndicatorKind::hidden;
    std::vector<float> conf;                      // last-known confidence per position
    std::vector<std::int64_t> freshness;          // iteration stamp of the last write per position
    std::int64_t iteration = 0;                   // stamp source for scatter updates
};

// Closed-form cache footprint per output token: K and V rows at every layer
// plus one indicator row per skip layer that needs its own cache.
inline std::uint64_t cache_bytes_per_output_token(std::uint32_t num_layers, std::uint32_t hidden_dim,
                                                  std::uint32_t indicator_layers, std::uint32_t bytes_per_scalar = 4) {
    return (2ull * num_layers + indicator_layers) * hidden_dim * bytes_per_scalar;
}

inline std::uint64_t bytes_per_output_token(const CacheSet & cache) {
    return cache_bytes_per_output_token(static_cast<std::uint32_t>(cache.k.size()), cache.hidden_dim,
                                        static_cast<std::uint32_t>(cache.indicator.size()));
}

namespace detail {

inline void scatter_rows(Matrix & dst, const PositionSet & positions, const Matrix & src) {
    if (src.rows != positions.size() || src.cols != dst.cols) {
        throw contract_error("scatter_update: row block shape does not match position set");
    }
    for (std::size_t i = 0; i < positions.size(); i++) {
        std::copy_n(src.row(i).data(), dst.cols, dst.row(positions[i]).data());
    }
}

}  // namespace detail

// Replace exactly the rows in `positions` of layer l's K/V (and optionally
// the indicator cache); every other row is left bitwise untouched. Positions
// must be strictly increasing and in range.
inline void scatter_update(CacheSet & cache, std::uint32_t layer, const PositionSet & positions, const Matrix & k_new,
                           const Matrix & v_new, const Matrix * indicator_new = nullptr) {
    if (layer >= cache.k.size()) throw contract_error("scatter_update: layer index out of range");
    if (!is_valid_position_set(positions, cache.seq_len)) {
        throw contract_error("scatter_update: positions must be strictly increasing and within the sequence");
    }
    if (positions.empty()) return;
    detail::scatter_rows(cache.k[layer], positions, k_new);
    detail::scatter_rows(cache.v[layer], positions, v_new);
    if (indicator_new != nullptr) {
        auto it = cache.indicator.find(layer);
        if (it == cache.indicator.end()) throw contract_error("scatter_update: no indicator cache at this layer");
        detail::scatter_rows(it->second, positions, *indicator_new);
    }
    for (std::uint32_t p : positions) cache.freshness[p] = cache.iteration;
}

struct InitCacheResult {
    CacheSet cache;
    Matrix logits;  // full-sequence logits of the seeding pass
};

// Seed every cache from one full-sequence pass: K/V for all layers, the
// indicator tensor at skip layers, and the confidence of every position.
inline InitCacheResult init_cache(const ModelWeights & w, const std::vector<std::uint32_t> & tokens,
                                  const SkipSchedule * schedule, FlopCounter & counter) {
    ForwardResult fwd = full_forward(w, tokens, counter);
    CacheSet cache;
    cache.seq_len = static_cast<std::uint32_t>(tokens.size());
    cache.hidden_dim = w.config.hidden_dim;
    cache.k = std::move(fwd.keys);
    cache.v = std::move(fwd.values);
    if (schedule != nullptr) {
        cache.indicator_kind = schedule->indicator;
        if (schedule->needs_indicator_cache()) {
            for (const auto & [layer, ratio] : schedule->ratios) {
                (void) ratio;
                cache.indicator[layer] = schedule->indicator == IndicatorKind::hidden ? fwd.hidden[layer]
                                                                                      : fwd.queries[layer];
            }
        }
    }
    cache.conf.resize(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); i++) cache.conf[i] = max_softmax_prob(fwd.logits.row(i));
    cache.freshness.assign(tokens.size(), 0);
    cache.iteration = 0;
    return {std::move(cache), std::move(fwd.logits)};
}

struct RefreshPolicy {
    std::uint32_t context_period = 1;  // iterations between full-sequence refreshes
    std::uint32_t block_period = 1;    // iterations between full-block refreshes

    static constexpr std::uint32_t kNever = std::numeric_limits<std::uint32_t>::max();

    void validate() const {
        if (context_period < 1 || block_period < 1) throw config_error("refresh periods must be >= 1");
    }
};

enum class RefreshAction { None, BlockRefresh, ContextRefresh };

// Iterations elapsed since each kind of refresh. Fresh counters start "due"
// so the first iteration of a generation performs a context refresh.
struct RefreshCounters {
    std::uint32_t since_context = 0;
    std::uint32_t since_block = 0;

    static RefreshCounters due_now(const RefreshPolicy & policy) { return {policy.context_period, 0}; }
};

inline RefreshAction refresh_due(const RefreshCounters & counters, const RefreshPolicy & policy) {
    if (counters.since_context >= policy.context_period) return RefreshAction::ContextRefresh;
    if (counters.since_block >= policy.block_period) return RefreshAction::BlockRefresh;
    return RefreshAction::None;
}

// A context refresh recomputes the block too, so it resets both counters.
inline void register_action(RefreshCounters & counters, RefreshAction action) {
    if (action == RefreshAction::ContextRefresh) {
        counters.since_context = 0;
        counters.since_block = 0;
    } else if (action == RefreshAction::BlockRefresh) {
        counters.since_block = 0;
    }
}

inline void register_iteration(RefreshCounters & counters) {
    if (counters.since_context != RefreshPolicy::kNever) counters.since_context++;
    counters.since_block++;
}

// Debug dump: K/V tensors in the weight-file framing plus a JSON sidecar
// with freshness stamps and confidences (written as <path>.json).
inline void dump_cache(const CacheSet & cache, const std::string & path) {
    detail::SectionWriter sw(path);
    sw.out.write("ESDC", 4);
    sw.write_u32(1);
    sw.write_u32(static_cast<std::uint32_t>(cache.k.size()));
    sw.write_u32(cache.seq_len);
    sw.write_u32(cache.hidden_dim);
    for (const auto & m : cache.k) sw.write_floats(m.data);
    for (const auto & m : cache.v) sw.write_floats(m.data);
    if (!sw.out) throw format_error("failed while writing cache dump '" + path + "'");

    std::ofstream side(path + ".json");
    side << "{\n  \"iteration\": " << cache.iteration << ",\n  \"freshness\": [";
    for (std::size_t i = 0; i < cache.freshness.size(); i++) {
        side << (i ? "," : "") << cache.freshness[i];
    }
    side << "],\n  \"conf\": [";
    for (std::size_t i = 0; i < cache.conf.size(); i++) {
        side << (i ? "," : "") << cache.conf[i];
    }
    side << "]\n}\n";
}

}  // namespace esdllm

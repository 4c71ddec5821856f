#pragma once

// Block-wise semi-autoregressive generation for three decoding strategies:
//
//   vanilla    - full recomputation of the whole sequence every iteration
//   dualcache  - K/V cached for everything outside the current block; only
//                the block is computed per iteration, with a full cache
//                rebuild at each block boundary
//   es_dllm    - dualcache plus importance-driven early skipping inside the
//                block and a periodic context/block refresh policy
//
// All strategies share the low-confidence unmasking rule (highest confidence
// first), optional confidence-threshold parallel decoding, and an EOS guard
// that suppresses EOS while the final output position is still masked.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "esdllm/cache.hpp"
#include "esdllm/model.hpp"
#include "esdllm/skip.hpp"
#include "esdllm/version.hpp"

namespace esdllm {

enum class Strategy { vanilla, dualcache, es_dllm };

inline const char * to_string(Strategy s) {
    switch (s) {
        case Strategy::vanilla: return "vanilla";
        case Strategy::dualcache: return "dualcache";
        case Strategy::es_dllm: return "es_dllm";
    }
    return "vanilla";
}

inline Strategy strategy_from_string(const std::string & s) {
    if (s == "vanilla") return Strategy::vanilla;
    if (s == "dualcache") return Strategy::dualcache;
    if (s == "es_dllm") return Strategy::es_dllm;
    throw config_error("unknown strategy '" + s + "'");
}

struct GenerationConfig {
    Strategy strategy = Strategy::vanilla;
    std::uint32_t gen_length = 32;
    std::uint32_t block_length = 8;
    std::uint32_t tokens_per_step = 1;
    std::optional<double> parallel_threshold;  // unmask everything at/above the threshold
    std::optional<SkipSchedule> skip;          // es_dllm only
    std::optional<RefreshPolicy> refresh;      // es_dllm only; default {block_length, 1}
    std::uint64_t seed = 0;
    bool count_attention_flops = true;

    // Debug logging knobs used by the analysis pipeline.
    bool log_full_confidence = false;  // vanilla only: fresh logits for every position, prompt included
    bool log_logits = false;           // store raw logit rows of the sampling pool
    std::vector<std::uint32_t> log_tensor_layers;
    std::vector<IndicatorKind> log_tensor_indicators;

    RefreshPolicy effective_refresh() const {
        if (refresh) return *refresh;
        return RefreshPolicy{block_length, 1};
    }

    void validate(const ModelConfig & model) const {
        if (gen_length == 0 || block_length == 0) throw config_error("generation and block lengths must be nonzero");
        if (gen_length % block_length != 0) throw config_error("gen_length must be divisible by block_length");
        if (tokens_per_step < 1) throw config_error("tokens_per_step must be >= 1");
        if (parallel_threshold) {
            if (*parallel_threshold <= 0.0 || *parallel_threshold > 1.0) {
                throw config_error("parallel threshold must be in (0,1]");
            }
            if (tokens_per_step != 1) throw config_error("parallel decoding replaces tokens_per_step");
        }
        if (strategy != Strategy::es_dllm) {
            if (skip) throw config_error("skip schedule is only valid with strategy es_dllm");
            if (refresh) throw config_error("refresh policy is only valid with strategy es_dllm");
        }
        if (skip) skip->validate(model.num_layers);
        if (refresh) refresh->validate();
        if (log_full_confidence && strategy != Strategy::vanilla) {
            throw config_error("full-confidence logging requires strategy vanilla");
        }
        for (std::uint32_t l : log_tensor_layers) {
            if (l >= model.num_layers) throw config_error("logged tensor layer out of range");
        }
    }
};

enum class RefreshKind { none, init, block, context };

inline const char * to_string(RefreshKind k) {
    switch (k) {
        case RefreshKind::none: return "none";
        case RefreshKind::init: return "init";
        case RefreshKind::block: return "block";
        case RefreshKind::context: return "context";
    }
    return "none";
}

inline RefreshKind refresh_kind_from_string(const std::string & s) {
    if (s == "none") return RefreshKind::none;
    if (s == "init") return RefreshKind::init;
    if (s == "block") return RefreshKind::block;
    if (s == "context") return RefreshKind::context;
    throw format_error("unknown refresh kind '" + s + "'");
}

struct UnmaskEvent {
    std::uint32_t position = 0;
    std::uint32_t token = 0;
    double confidence = 0.0;
};

struct FlopSlice {
    std::uint64_t layers = 0;
    std::uint64_t head = 0;
    std::uint64_t total = 0;
};

struct TraceRecord {
    std::uint32_t iter = 0;  // 0 is the cache-seeding pass (es_dllm only)
    std::uint32_t block = 0;
    RefreshKind refresh = RefreshKind::none;
    bool fallback = false;
    std::vector<PositionSet> active_per_layer;
    std::map<std::uint32_t, double> confidences;  // positions with fresh logits this iteration
    std::vector<UnmaskEvent> unmask;
    FlopSlice flops;
    std::map<std::uint32_t, std::map<std::uint32_t, double>> variation;  // skip layer -> position -> value
    // debug payloads
    std::map<std::string, std::map<std::uint32_t, std::map<std::uint32_t, std::vector<float>>>> tensors;
    std::map<std::uint32_t, std::vector<float>> logits;  // raw (pre-guard) rows of the sampling pool
};

struct TraceSummary {
    std::string engine_version = kEngineVersion;
    std::string name;
    ModelConfig model;
    GenerationConfig generation;
    std::uint32_t prompt_length = 0;
    std::uint32_t iterations = 0;
    FlopSlice flops;
    std::uint64_t steady_layer_flops = 0;  // non-refresh, non-fallback iterations only
    std::uint32_t steady_iterations = 0;
    std::uint64_t block_refresh_layer_flops = 0;
    std::uint32_t block_refresh_iterations = 0;
    std::uint64_t context_refresh_layer_flops = 0;  // excludes the seeding pass
    std::uint32_t context_refresh_iterations = 0;
    std::uint64_t cache_bytes_per_output_token = 0;
    std::vector<std::uint32_t> tokens;
    std::vector<std::uint32_t> unmask_order;
    std::string tokens_hash;
};

struct GenerationTrace {
    TraceSummary summary;
    std::vector<TraceRecord> records;
};

struct GenerationResult {
    std::vector<std::uint32_t> tokens;
    GenerationTrace trace;
};

inline std::string fnv1a_hex(const std::vector<std::uint32_t> & tokens) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::uint32_t t : tokens) {
        for (int b = 0; b < 4; b++) {
            h ^= (t >> (8 * b)) & 0xffu;
            h *= 0x100000001b3ull;
        }
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Suppress EOS whenever the final output position is still masked, except
// when the row being sampled is that final position itself.
inline void eos_guard(std::span<float> logits_row, std::uint32_t eos_token_id, bool last_position_masked,
                      bool row_is_last_position) {
    if (last_position_masked && !row_is_last_position) {
        logits_row[eos_token_id] = -std::numeric_limits<float>::infinity();
    }
}

// The n highest-confidence positions of the pool; confidence ties break
// toward the lower position. Result sorted ascending.
inline PositionSet select_unmask(const std::vector<std::pair<std::uint32_t, float>> & pool_conf, std::uint32_t n) {
    std::vector<std::pair<std::uint32_t, float>> sorted = pool_conf;
    std::sort(sorted.begin(), sorted.end(), [](const auto & a, const auto & b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    const std::size_t take = std::min<std::size_t>(n, sorted.size());
    PositionSet out;
    out.reserve(take);
    for (std::size_t i = 0; i < take; i++) out.push_back(sorted[i].first);
    std::sort(out.begin(), out.end());
    return out;
}

// Every pool position with confidence >= threshold; at least the single
// best position so each iteration makes progress.
inline PositionSet parallel_unmask(const std::vector<std::pair<std::uint32_t, float>> & pool_conf, double threshold) {
    PositionSet out;
    for (const auto & [pos, conf] : pool_conf) {
        if (static_cast<double>(conf) >= threshold) out.push_back(pos);
    }
    if (out.empty() && !pool_conf.empty()) return select_unmask(pool_conf, 1);
    std::sort(out.begin(), out.end());
    return out;
}

struct DecodeState {
    const ModelWeights * weights = nullptr;
    GenerationConfig cfg;
    std::vector<std::uint32_t> sequence;
    std::uint32_t prompt_length = 0;
    std::uint32_t current_block = 0;
    std::uint32_t iteration = 0;  // completed generation iterations
    std::uint32_t masked_remaining = 0;
    CacheSet cache;
    RefreshCounters counters;
    bool block_rebuild_pending = true;  // dualcache
    FlopCounter flops;
    GenerationTrace trace;

    std::uint32_t num_blocks() const { return cfg.gen_length / cfg.block_length; }
    std::uint32_t block_begin(std::uint32_t b) const { return prompt_length + b * cfg.block_length; }
    std::uint32_t block_end(std::uint32_t b) const { return prompt_length + (b + 1) * cfg.block_length; }
    std::uint32_t last_position() const { return static_cast<std::uint32_t>(sequence.size()) - 1; }
    bool is_masked(std::uint32_t p) const { return sequence[p] == weights->config.mask_token_id; }
};

namespace detail {

inline PositionSet range_positions(std::uint32_t begin, std::uint32_t end) {
    PositionSet s;
    s.reserve(end - begin);
    for (std::uint32_t p = begin; p < end; p++) s.push_back(p);
    return s;
}

inline CacheSet allocate_cache(std::uint32_t seq_len, const ModelConfig & c) {
    CacheSet cache;
    cache.seq_len = seq_len;
    cache.hidden_dim = c.hidden_dim;
    cache.k.assign(c.num_layers, Matrix(seq_len, c.hidden_dim));
    cache.v.assign(c.num_layers, Matrix(seq_len, c.hidden_dim));
    cache.conf.assign(seq_len, 0.0f);
    cache.freshness.assign(seq_len, 0);
    return cache;
}

inline Matrix gather_rows(const Matrix & src, const PositionSet & positions) {
    Matrix out(positions.size(), src.cols);
    for (std::size_t i = 0; i < positions.size(); i++) {
        std::copy_n(src.row(positions[i]).data(), src.cols, out.row(i).data());
    }
    return out;
}

struct SubsetForwardResult {
    Matrix logits;             // rows aligned with head_positions
    PositionSet head_positions;
    std::vector<PositionSet> active_per_layer;
    std::map<std::uint32_t, std::map<std::uint32_t, double>> variation;
};

inline void log_tensor_rows(TraceRecord * record, const GenerationConfig & cfg, IndicatorKind kind,
                            std::uint32_t layer, const Matrix & rows, const PositionSet & positions) {
    if (record == nullptr) return;
    bool wanted = false;
    for (IndicatorKind k : cfg.log_tensor_indicators) wanted |= (k == kind);
    if (!wanted) return;
    bool layer_wanted = false;
    for (std::uint32_t l : cfg.log_tensor_layers) layer_wanted |= (l == layer);
    if (!layer_wanted) return;
    auto & slot = record->tensors[to_string(kind)][layer];
    for (std::size_t i = 0; i < positions.size(); i++) {
        auto row = rows.row(i);
        slot[positions[i]].assign(row.begin(), row.end());
    }
}

// One pass over `start_positions` against the cache: per layer, recompute
// Q/K/V for the active set, scatter them into the cache, attend to the full
// cached sequence, and optionally drop low-importance positions at scheduled
// layers. The head runs over `head_scope` (or the final survivors when
// head_scope is null).
inline SubsetForwardResult subset_forward(const ModelWeights & w, CacheSet & cache,
                                          const std::vector<std::uint32_t> & sequence,
                                          const PositionSet & start_positions, const SkipSchedule * skip,
                                          const PositionSet * head_scope, FlopCounter & counter,
                                          TraceRecord * record, const GenerationConfig & cfg) {
    const ModelConfig & c = w.config;
    SubsetForwardResult res;
    PositionSet active = start_positions;

    std::vector<std::uint32_t> active_tokens(active.size());
    for (std::size_t i = 0; i < active.size(); i++) active_tokens[i] = sequence[active[i]];
    Matrix x = embed_tokens(w, active_tokens);

    for (std::uint32_t l = 0; l < c.num_layers; l++) {
        counter.scope = static_cast<int>(l);
        res.active_per_layer.push_back(active);
        const LayerWeights & lw = w.layers[l];

        Matrix x_norm = rmsnorm(x, lw.attn_norm);
        Matrix q = matmul(x_norm, lw.wq, counter);
        Matrix k = matmul(x_norm, lw.wk, counter);
        Matrix v = matmul(x_norm, lw.wv, counter);
        rope_apply(q, active, c.rope_base, c.head_dim());
        rope_apply(k, active, c.rope_base, c.head_dim());

        // For scheduled layers, the previous iteration's indicator rows must
        // be read before the scatter updates below overwrite them.
        const bool select_here = skip != nullptr && skip->has_layer(l);
        const Matrix * indicator_now = nullptr;
        Matrix indicator_prev;
        if (select_here) {
            const auto cached = cache.indicator.find(l);
            if (skip->needs_indicator_cache() && cached == cache.indicator.end()) {
                throw contract_error("no indicator cache at skip layer " + std::to_string(l));
            }
            switch (skip->indicator) {
                case IndicatorKind::query:
                    indicator_now = &q;
                    indicator_prev = gather_rows(cached->second, active);
                    break;
                case IndicatorKind::key:
                    indicator_now = &k;
                    indicator_prev = gather_rows(cache.k[l], active);
                    break;
                case IndicatorKind::value:
                    indicator_now = &v;
                    indicator_prev = gather_rows(cache.v[l], active);
                    break;
                case IndicatorKind::hidden:
                    indicator_prev = gather_rows(cached->second, active);
                    break;
            }
        }

        log_tensor_rows(record, cfg, IndicatorKind::query, l, q, active);
        log_tensor_rows(record, cfg, IndicatorKind::key, l, k, active);
        log_tensor_rows(record, cfg, IndicatorKind::value, l, v, active);

        const Matrix * q_indicator =
            (cache.indicator_kind == IndicatorKind::query && cache.indicator.count(l)) ? &q : nullptr;
        scatter_update(cache, l, active, k, v, q_indicator);

        Matrix attn = attention(q, cache.k[l], cache.v[l], c.num_heads, counter);
        Matrix attn_out = matmul(attn, lw.wo, counter);
        for (std::size_t i = 0; i < attn_out.data.size(); i++) attn_out.data[i] += x.data[i];
        Matrix h = gated_ffn(rmsnorm(attn_out, lw.ffn_norm), lw.w_gate, lw.w_up, lw.w_down, counter);
        for (std::size_t i = 0; i < h.data.size(); i++) h.data[i] += attn_out.data[i];

        log_tensor_rows(record, cfg, IndicatorKind::hidden, l, h, active);

        if (cache.indicator_kind == IndicatorKind::hidden && cache.indicator.count(l)) {
            detail::scatter_rows(cache.indicator.at(l), active, h);
        }

        if (select_here) {
            if (skip->indicator == IndicatorKind::hidden) indicator_now = &h;
            std::vector<float> conf_prev(active.size());
            for (std::size_t i = 0; i < active.size(); i++) conf_prev[i] = cache.conf[active[i]];
            const ImportanceVector iv = importance_scores(conf_prev, *indicator_now, indicator_prev, skip->alpha,
                                                          active);
            auto & var_slot = res.variation[l];
            for (std::size_t i = 0; i < active.size(); i++) {
                var_slot[active[i]] = variation_term(indicator_now->row(i), indicator_prev.row(i));
            }

            const double ratio = skip->ratios.at(l);
            if (ratio > 0.0) {
                PositionSet survivors = select_topk(iv, ratio);
                Matrix filtered(survivors.size(), c.hidden_dim);
                std::size_t src = 0;
                for (std::size_t i = 0; i < survivors.size(); i++) {
                    while (active[src] != survivors[i]) src++;
                    std::copy_n(h.row(src).data(), c.hidden_dim, filtered.row(i).data());
                }
                h = std::move(filtered);
                active = std::move(survivors);
            }
        }
        x = std::move(h);
    }

    res.head_positions = head_scope != nullptr ? *head_scope : active;
    Matrix head_in(res.head_positions.size(), c.hidden_dim);
    {
        std::size_t src = 0;
        for (std::size_t i = 0; i < res.head_positions.size(); i++) {
            while (src < active.size() && active[src] != res.head_positions[i]) src++;
            if (src == active.size()) throw contract_error("head scope must be a subset of the surviving positions");
            std::copy_n(x.row(src).data(), c.hidden_dim, head_in.row(i).data());
        }
    }
    counter.scope = static_cast<int>(c.num_layers);
    res.logits = matmul(rmsnorm(head_in, w.final_norm), w.head, counter);
    return res;
}

struct FlopSnapshot {
    std::uint64_t total;
    std::uint64_t head;
};

inline FlopSnapshot snapshot(const FlopCounter & counter, std::uint32_t num_layers) {
    return {counter.total, counter.scope_total(static_cast<int>(num_layers))};
}

inline FlopSlice slice_since(const FlopCounter & counter, std::uint32_t num_layers, const FlopSnapshot & before) {
    FlopSlice s;
    s.total = counter.total - before.total;
    s.head = counter.scope_total(static_cast<int>(num_layers)) - before.head;
    s.layers = s.total - s.head;
    return s;
}

// Confidence bookkeeping plus unmasking for one iteration, shared by all
// strategies. Confidences come from the raw rows; the EOS guard only affects
// the token argmax.
inline void sample_and_unmask(DecodeState & st, const SubsetForwardResult & fwd, TraceRecord & record,
                              bool update_conf_cache) {
    const ModelConfig & mc = st.weights->config;
    const std::uint32_t begin = st.block_begin(st.current_block);
    const std::uint32_t end = st.block_end(st.current_block);

    std::vector<std::pair<std::uint32_t, float>> pool;
    for (std::size_t i = 0; i < fwd.head_positions.size(); i++) {
        const std::uint32_t pos = fwd.head_positions[i];
        const float conf = max_softmax_prob(fwd.logits.row(i));
        record.confidences[pos] = conf;
        if (update_conf_cache) st.cache.conf[pos] = conf;
        if (pos >= begin && pos < end && st.is_masked(pos)) {
            pool.emplace_back(pos, conf);
            if (st.cfg.log_logits) {
                auto row = fwd.logits.row(i);
                record.logits[pos].assign(row.begin(), row.end());
            }
        }
    }

    Matrix fallback_logits;
    if (pool.empty()) {
        // No masked position survived to the final layer: recompute the
        // highest-(cached)-confidence masked position on its own.
        record.fallback = true;
        std::uint32_t best = end;
        for (std::uint32_t p = begin; p < end; p++) {
            if (!st.is_masked(p)) continue;
            if (best == end || st.cache.conf[p] > st.cache.conf[best]) best = p;
        }
        PositionSet single{best};
        SubsetForwardResult extra = subset_forward(*st.weights, st.cache, st.sequence, single, nullptr, &single,
                                                   st.flops, nullptr, st.cfg);
        const float conf = max_softmax_prob(extra.logits.row(0));
        record.confidences[best] = conf;
        if (update_conf_cache) st.cache.conf[best] = conf;
        if (st.cfg.log_logits) {
            auto row = extra.logits.row(0);
            record.logits[best].assign(row.begin(), row.end());
        }
        pool.emplace_back(best, conf);
        fallback_logits = std::move(extra.logits);
    }

    PositionSet chosen = st.cfg.parallel_threshold ? parallel_unmask(pool, *st.cfg.parallel_threshold)
                                                   : select_unmask(pool, st.cfg.tokens_per_step);

    const bool last_masked = st.is_masked(st.last_position());
    for (std::uint32_t pos : chosen) {
        std::span<const float> row;
        if (record.fallback) {
            row = fallback_logits.row(0);
        } else {
            std::size_t idx = 0;
            while (fwd.head_positions[idx] != pos) idx++;
            row = fwd.logits.row(idx);
        }
        std::vector<float> guarded(row.begin(), row.end());
        eos_guard(guarded, mc.eos_token_id, last_masked, pos == st.last_position());
        // The mask symbol is never a legitimate sample; with random toy
        // weights it can otherwise win the argmax and wedge the block.
        guarded[mc.mask_token_id] = -std::numeric_limits<float>::infinity();
        const std::uint32_t token = static_cast<std::uint32_t>(row_argmax(guarded));
        st.sequence[pos] = token;
        st.masked_remaining--;
        record.unmask.push_back({pos, token, record.confidences[pos]});
    }

    // Advance once the current block is fully unmasked.
    bool block_done = true;
    for (std::uint32_t p = begin; p < end; p++) block_done &= !st.is_masked(p);
    if (block_done && st.current_block + 1 < st.num_blocks()) {
        st.current_block++;
        st.counters.since_block = 0;  // block-scope freshness is block-local
        st.block_rebuild_pending = true;
    }
}

}  // namespace detail

// One full-recomputation iteration: forward over the whole sequence, unmask
// within the current block. Stateless apart from the token sequence.
inline void step_vanilla(DecodeState & st) {
    const ModelConfig & mc = st.weights->config;
    TraceRecord record;
    record.iter = st.iteration + 1;
    record.block = st.current_block;

    CacheSet scratch = detail::allocate_cache(static_cast<std::uint32_t>(st.sequence.size()), mc);
    PositionSet all = detail::range_positions(0, static_cast<std::uint32_t>(st.sequence.size()));
    PositionSet head = st.cfg.log_full_confidence
                           ? all
                           : detail::range_positions(st.prompt_length, static_cast<std::uint32_t>(st.sequence.size()));

    const auto before = detail::snapshot(st.flops, mc.num_layers);
    detail::SubsetForwardResult fwd =
        detail::subset_forward(*st.weights, scratch, st.sequence, all, nullptr, &head, st.flops, &record, st.cfg);
    record.active_per_layer = std::move(fwd.active_per_layer);
    detail::sample_and_unmask(st, fwd, record, false);
    record.flops = detail::slice_since(st.flops, mc.num_layers, before);
    st.iteration++;
    st.trace.records.push_back(std::move(record));
}

// One dualcache iteration: rebuild every cache at block boundaries, otherwise
// recompute only the current block against the frozen out-of-block caches.
inline void step_dualcache(DecodeState & st) {
    const ModelConfig & mc = st.weights->config;
    TraceRecord record;
    record.iter = st.iteration + 1;
    record.block = st.current_block;

    st.cache.iteration = st.iteration + 1;
    PositionSet block = detail::range_positions(st.block_begin(st.current_block), st.block_end(st.current_block));
    PositionSet scope = block;
    if (st.block_rebuild_pending) {
        record.refresh = RefreshKind::context;
        scope = detail::range_positions(0, static_cast<std::uint32_t>(st.sequence.size()));
        st.block_rebuild_pending = false;
    }

    const auto before = detail::snapshot(st.flops, mc.num_layers);
    detail::SubsetForwardResult fwd =
        detail::subset_forward(*st.weights, st.cache, st.sequence, scope, nullptr, &block, st.flops, &record, st.cfg);
    record.active_per_layer = std::move(fwd.active_per_layer);
    detail::sample_and_unmask(st, fwd, record, true);
    record.flops = detail::slice_since(st.flops, mc.num_layers, before);
    st.iteration++;
    st.trace.records.push_back(std::move(record));
}

// One early-skip iteration: consult the refresh policy first, then either a
// no-skip refresh pass of the mandated scope or a block pass with top-k
// selection at the scheduled layers.
inline void step_es(DecodeState & st) {
    const ModelConfig & mc = st.weights->config;
    const RefreshPolicy policy = st.cfg.effective_refresh();
    const RefreshAction action = refresh_due(st.counters, policy);
    register_action(st.counters, action);

    TraceRecord record;
    record.iter = st.iteration + 1;
    record.block = st.current_block;

    st.cache.iteration = st.iteration + 1;
    PositionSet block = detail::range_positions(st.block_begin(st.current_block), st.block_end(st.current_block));

    PositionSet scope = block;
    const SkipSchedule * skip = nullptr;
    const PositionSet * head_scope = nullptr;
    switch (action) {
        case RefreshAction::ContextRefresh:
            record.refresh = RefreshKind::context;
            scope = detail::range_positions(0, static_cast<std::uint32_t>(st.sequence.size()));
            head_scope = &block;
            break;
        case RefreshAction::BlockRefresh:
            record.refresh = RefreshKind::block;
            head_scope = &block;
            break;
        case RefreshAction::None:
            if (st.cfg.skip) skip = &*st.cfg.skip;
            break;  // head over the final survivors
    }

    const auto before = detail::snapshot(st.flops, mc.num_layers);
    detail::SubsetForwardResult fwd =
        detail::subset_forward(*st.weights, st.cache, st.sequence, scope, skip, head_scope, st.flops, &record, st.cfg);
    record.active_per_layer = std::move(fwd.active_per_layer);
    record.variation = std::move(fwd.variation);
    detail::sample_and_unmask(st, fwd, record, true);
    record.flops = detail::slice_since(st.flops, mc.num_layers, before);
    register_iteration(st.counters);
    st.iteration++;
    st.trace.records.push_back(std::move(record));
}

// Run one generation session to completion: prompt ++ gen_length masks in,
// fully unmasked sequence plus the per-iteration trace out. Deterministic
// for identical (weights, prompt, config). `final_cache` receives the cache
// state after the last iteration when non-null.
inline GenerationResult generate(const ModelWeights & w, const std::vector<std::uint32_t> & prompt,
                                 const GenerationConfig & cfg, CacheSet * final_cache = nullptr) {
    const ModelConfig & mc = w.config;
    cfg.validate(mc);
    if (prompt.empty()) throw input_error("prompt must not be empty");
    for (std::uint32_t t : prompt) {
        if (t >= mc.vocab_size) throw input_error("prompt token id out of range");
        if (t == mc.mask_token_id) throw input_error("prompt must not contain the mask token");
    }

    DecodeState st;
    st.weights = &w;
    st.cfg = cfg;
    st.cfg.log_tensor_indicators = cfg.log_tensor_indicators;
    if (!cfg.log_tensor_layers.empty() && cfg.log_tensor_indicators.empty()) {
        st.cfg.log_tensor_indicators.push_back(IndicatorKind::hidden);
    }
    st.prompt_length = static_cast<std::uint32_t>(prompt.size());
    st.sequence = prompt;
    st.sequence.insert(st.sequence.end(), cfg.gen_length, mc.mask_token_id);
    st.masked_remaining = cfg.gen_length;
    st.flops.count_attention_term = cfg.count_attention_flops;
    st.counters = RefreshCounters::due_now(cfg.effective_refresh());

    if (cfg.strategy == Strategy::es_dllm) {
        const auto before = detail::snapshot(st.flops, mc.num_layers);
        InitCacheResult init = init_cache(w, st.sequence, cfg.skip ? &*cfg.skip : nullptr, st.flops);
        st.cache = std::move(init.cache);
        TraceRecord record;
        record.iter = 0;
        record.refresh = RefreshKind::init;
        record.active_per_layer.assign(mc.num_layers,
                                       detail::range_positions(0, static_cast<std::uint32_t>(st.sequence.size())));
        for (std::size_t i = 0; i < st.sequence.size(); i++) {
            record.confidences[static_cast<std::uint32_t>(i)] = st.cache.conf[i];
        }
        record.flops = detail::slice_since(st.flops, mc.num_layers, before);
        st.trace.records.push_back(std::move(record));
    } else if (cfg.strategy == Strategy::dualcache) {
        st.cache = detail::allocate_cache(static_cast<std::uint32_t>(st.sequence.size()), mc);
    }

    while (st.masked_remaining > 0) {
        switch (cfg.strategy) {
            case Strategy::vanilla: step_vanilla(st); break;
            case Strategy::dualcache: step_dualcache(st); break;
            case Strategy::es_dllm: step_es(st); break;
        }
    }

    TraceSummary & sum = st.trace.summary;
    sum.model = mc;
    sum.generation = st.cfg;
    sum.prompt_length = st.prompt_length;
    sum.iterations = st.iteration;
    sum.flops.total = st.flops.total;
    sum.flops.head = st.flops.scope_total(static_cast<int>(mc.num_layers));
    sum.flops.layers = sum.flops.total - sum.flops.head;
    for (const TraceRecord & r : st.trace.records) {
        if (r.iter == 0) continue;
        if (r.refresh == RefreshKind::block) {
            sum.block_refresh_layer_flops += r.flops.layers;
            sum.block_refresh_iterations++;
        } else if (r.refresh == RefreshKind::context) {
            sum.context_refresh_layer_flops += r.flops.layers;
            sum.context_refresh_iterations++;
        } else if (!r.fallback) {
            sum.steady_layer_flops += r.flops.layers;
            sum.steady_iterations++;
        }
    }
    for (const TraceRecord & r : st.trace.records) {
        for (const UnmaskEvent & e : r.unmask) sum.unmask_order.push_back(e.position);
    }
    if (cfg.strategy == Strategy::es_dllm) {
        sum.cache_bytes_per_output_token = bytes_per_output_token(st.cache);
    } else if (cfg.strategy == Strategy::dualcache) {
        sum.cache_bytes_per_output_token = cache_bytes_per_output_token(mc.num_layers, mc.hidden_dim, 0);
    }
    sum.tokens = st.sequence;
    sum.tokens_hash = fnv1a_hex(st.sequence);
    if (final_cache != nullptr) *final_cache = std::move(st.cache);
    return {st.sequence, std::move(st.trace)};
}

}  // namespace esdllm

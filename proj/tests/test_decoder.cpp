#include <catch2/catch_amalgamated.hpp>

#include "esdllm/analysis.hpp"
#include "esdllm/decoder.hpp"
#include "test_util.hpp"

using namespace esdllm;

namespace {

ModelConfig small_config(std::uint32_t layers = 4) {
    ModelConfig c;
    c.num_layers = layers;
    c.hidden_dim = 16;
    c.num_heads = 2;
    c.ffn_dim = 24;
    c.vocab_size = 32;
    c.mask_token_id = 30;
    c.eos_token_id = 31;
    return c;
}

GenerationConfig base_cfg(Strategy s, std::uint32_t gen = 16, std::uint32_t block = 4) {
    GenerationConfig cfg;
    cfg.strategy = s;
    cfg.gen_length = gen;
    cfg.block_length = block;
    return cfg;
}

std::vector<std::uint32_t> prompt4() { return {3, 7, 11, 2}; }

// Mirrors the session setup inside generate() so step functions can be
// driven directly.
DecodeState make_state(const ModelWeights & w, const std::vector<std::uint32_t> & prompt,
                       const GenerationConfig & cfg) {
    cfg.validate(w.config);
    DecodeState st;
    st.weights = &w;
    st.cfg = cfg;
    st.prompt_length = static_cast<std::uint32_t>(prompt.size());
    st.sequence = prompt;
    st.sequence.insert(st.sequence.end(), cfg.gen_length, w.config.mask_token_id);
    st.masked_remaining = cfg.gen_length;
    st.flops.count_attention_term = cfg.count_attention_flops;
    st.counters = RefreshCounters::due_now(cfg.effective_refresh());
    if (cfg.strategy == Strategy::es_dllm) {
        st.cache = init_cache(w, st.sequence, cfg.skip ? &*cfg.skip : nullptr, st.flops).cache;
    } else if (cfg.strategy == Strategy::dualcache) {
        st.cache = detail::allocate_cache(static_cast<std::uint32_t>(st.sequence.size()), w.config);
    }
    return st;
}

}  // namespace

TEST_CASE("generation completes with one unmask per iteration") {
    ModelWeights w = init_toy_model(small_config(), 1);
    GenerationConfig cfg = base_cfg(Strategy::vanilla, 4, 4);
    GenerationResult res = generate(w, prompt4(), cfg);

    REQUIRE(res.trace.summary.iterations == 4);
    REQUIRE(res.trace.records.size() == 4);
    for (const TraceRecord & r : res.trace.records) REQUIRE(r.unmask.size() == 1);
    for (std::uint32_t t : res.tokens) REQUIRE(t != w.config.mask_token_id);
}

TEST_CASE("every output position unmasks exactly once, blocks left to right") {
    ModelWeights w = init_toy_model(small_config(), 2);
    for (Strategy s : {Strategy::vanilla, Strategy::dualcache, Strategy::es_dllm}) {
        GenerationConfig cfg = base_cfg(s);
        if (s == Strategy::es_dllm) {
            SkipSchedule skip;
            skip.ratios[1] = 0.5;
            cfg.skip = skip;
            cfg.refresh = RefreshPolicy{4, 2};
        }
        GenerationResult res = generate(w, prompt4(), cfg);

        std::map<std::uint32_t, int> seen;
        std::uint32_t last_block = 0;
        for (const TraceRecord & r : res.trace.records) {
            for (const UnmaskEvent & e : r.unmask) {
                seen[e.position]++;
                const std::uint32_t block = (e.position - 4) / cfg.block_length;
                REQUIRE(block >= last_block);
                last_block = block;
            }
        }
        REQUIRE(seen.size() == cfg.gen_length);
        for (const auto & [pos, count] : seen) {
            REQUIRE(count == 1);
            REQUIRE(pos >= 4);
        }
        REQUIRE(res.trace.summary.unmask_order.size() == cfg.gen_length);
    }
}

TEST_CASE("strategy equivalence: skip-free es_dllm with the dualcache policy matches dualcache") {
    ModelWeights w = init_toy_model(small_config(), 5);
    GenerationConfig dual = base_cfg(Strategy::dualcache, 16, 4);
    GenerationConfig es = base_cfg(Strategy::es_dllm, 16, 4);
    es.refresh = RefreshPolicy{4, 1};  // context period = block length, block period 1

    GenerationResult a = generate(w, prompt4(), dual);
    GenerationResult b = generate(w, prompt4(), es);
    REQUIRE(a.tokens == b.tokens);
    REQUIRE(a.trace.summary.tokens_hash == b.trace.summary.tokens_hash);

    // Explicit zero ratios still compute importance but select everything.
    GenerationConfig es_zero = es;
    SkipSchedule zeros;
    zeros.ratios[1] = 0.0;
    zeros.ratios[2] = 0.0;
    es_zero.skip = zeros;
    GenerationResult c = generate(w, prompt4(), es_zero);
    REQUIRE(a.tokens == c.tokens);
}

TEST_CASE("strategy equivalence: refresh-every-iteration es_dllm matches vanilla including logits") {
    ModelWeights w = init_toy_model(small_config(), 6);
    GenerationConfig vanilla = base_cfg(Strategy::vanilla, 8, 4);
    vanilla.log_logits = true;
    GenerationConfig es = base_cfg(Strategy::es_dllm, 8, 4);
    es.refresh = RefreshPolicy{1, 1};
    es.log_logits = true;

    GenerationResult a = generate(w, prompt4(), vanilla);
    GenerationResult b = generate(w, prompt4(), es);
    REQUIRE(a.tokens == b.tokens);

    for (std::uint32_t i = 0; i < a.trace.summary.iterations; i++) {
        const TraceRecord & rv = a.trace.records[i];
        const TraceRecord & re = b.trace.records[i + 1];  // skip the init record
        REQUIRE(rv.iter == re.iter);
        REQUIRE(rv.logits.size() == re.logits.size());
        for (const auto & [pos, row] : rv.logits) {
            const auto & other = re.logits.at(pos);
            REQUIRE(row.size() == other.size());
            for (std::size_t j = 0; j < row.size(); j++) {
                REQUIRE_THAT(row[j], Catch::Matchers::WithinAbs(other[j], 1e-4));
            }
        }
    }
}

TEST_CASE("strategy equivalence: single-block dualcache matches never-refreshing es_dllm") {
    ModelWeights w = init_toy_model(small_config(), 7);
    GenerationConfig dual = base_cfg(Strategy::dualcache, 8, 8);
    GenerationConfig es = base_cfg(Strategy::es_dllm, 8, 8);
    es.refresh = RefreshPolicy{RefreshPolicy::kNever, 1};

    REQUIRE(generate(w, prompt4(), dual).tokens == generate(w, prompt4(), es).tokens);
}

TEST_CASE("subset forward against a fresh cache reproduces full-forward rows") {
    const ModelConfig mc = small_config();
    ModelWeights w = init_toy_model(mc, 9);
    std::vector<std::uint32_t> tokens{1, 2, 3, 4, 5, 6, 7, 8};

    FlopCounter counter;
    InitCacheResult init = init_cache(w, tokens, nullptr, counter);
    ForwardResult full = full_forward(w, tokens, counter);

    PositionSet subset{2, 5, 6};
    GenerationConfig cfg = base_cfg(Strategy::es_dllm, 8, 8);
    TraceRecord record;
    detail::SubsetForwardResult got = detail::subset_forward(w, init.cache, tokens, subset, nullptr, &subset, counter,
                                                             &record, cfg);
    for (std::size_t i = 0; i < subset.size(); i++) {
        for (std::size_t j = 0; j < mc.vocab_size; j++) {
            const float a = got.logits.at(i, j);
            const float b = full.logits.at(subset[i], j);
            REQUIRE_THAT(a, Catch::Matchers::WithinRel(b, 1e-5f));
        }
    }
}

TEST_CASE("per-layer FLOP accounting of a subset pass matches the closed form") {
    std::mt19937 rng(77);
    for (int trial = 0; trial < 10; trial++) {
        ModelConfig mc = small_config(2);
        mc.num_heads = (rng() % 2 == 0) ? 2 : 4;
        mc.hidden_dim = mc.num_heads * (2 * (1 + rng() % 6));
        mc.ffn_dim = 4 + rng() % 24;
        ModelWeights w = init_toy_model(mc, rng());

        const std::uint32_t n = 4 + rng() % 8;
        std::vector<std::uint32_t> tokens;
        for (std::uint32_t i = 0; i < n; i++) tokens.push_back(rng() % 20);

        FlopCounter setup;
        InitCacheResult init = init_cache(w, tokens, nullptr, setup);
        PositionSet subset;
        for (std::uint32_t p = 0; p < n; p++) {
            if (rng() % 2 == 0) subset.push_back(p);
        }
        if (subset.empty()) subset.push_back(0);

        FlopCounter counter;
        GenerationConfig cfg = base_cfg(Strategy::es_dllm, 8, 8);
        TraceRecord record;
        detail::subset_forward(w, init.cache, tokens, subset, nullptr, &subset, counter, &record, cfg);

        const std::uint64_t s = subset.size(), d = mc.hidden_dim, dff = mc.ffn_dim;
        const std::uint64_t expected_layer = 8 * s * d * d + 4 * s * n * d + 6 * s * d * dff;
        for (std::uint32_t l = 0; l < mc.num_layers; l++) {
            REQUIRE(counter.scope_total(static_cast<int>(l)) == expected_layer);
        }
        REQUIRE(counter.scope_total(static_cast<int>(mc.num_layers)) == 2 * s * d * mc.vocab_size);
    }
}

TEST_CASE("vanilla iterations cost the same FLOPs every time") {
    ModelWeights w = init_toy_model(small_config(), 10);
    GenerationResult res = generate(w, prompt4(), base_cfg(Strategy::vanilla, 8, 4));
    const std::uint64_t first = res.trace.records[0].flops.total;
    for (const TraceRecord & r : res.trace.records) REQUIRE(r.flops.total == first);
}

TEST_CASE("dualcache invariants: active set, frozen context, steady ratio") {
    const ModelConfig mc = small_config();
    ModelWeights w = init_toy_model(mc, 11);
    GenerationConfig cfg = base_cfg(Strategy::dualcache, 8, 4);

    DecodeState st = make_state(w, prompt4(), cfg);
    step_dualcache(st);  // block 0 rebuild
    REQUIRE(st.trace.records[0].refresh == RefreshKind::context);

    Matrix k_after_rebuild = st.cache.k[1];
    step_dualcache(st);
    step_dualcache(st);
    const TraceRecord & steady = st.trace.records[2];
    REQUIRE(steady.refresh == RefreshKind::none);
    for (const PositionSet & layer_active : steady.active_per_layer) {
        REQUIRE(layer_active == PositionSet{4, 5, 6, 7});
    }
    // out-of-block rows are bitwise frozen within the block
    for (std::uint32_t p = 0; p < 12; p++) {
        if (p >= 4 && p < 8) continue;
        for (std::size_t j = 0; j < mc.hidden_dim; j++) {
            REQUIRE(st.cache.k[1].at(p, j) == k_after_rebuild.at(p, j));
        }
    }

    // steady per-iteration layer FLOPs: block/full-sequence ratio vs vanilla
    GenerationResult dual = generate(w, prompt4(), cfg);
    GenerationResult vanilla = generate(w, prompt4(), base_cfg(Strategy::vanilla, 8, 4));
    const double dual_per_iter = steady_layer_flops_per_iter(dual.trace);
    const double vanilla_per_iter = steady_layer_flops_per_iter(vanilla.trace);
    REQUIRE_THAT(dual_per_iter / vanilla_per_iter, Catch::Matchers::WithinAbs(4.0 / 12.0, 1e-12));
}

TEST_CASE("es_dllm layer-wise active counts follow the skip cascade") {
    ModelConfig mc = small_config(12);
    ModelWeights w = init_toy_model(mc, 12);
    GenerationConfig cfg = base_cfg(Strategy::es_dllm, 8, 8);
    SkipSchedule skip;
    skip.ratios[4] = 0.5;
    skip.ratios[8] = 0.5;
    cfg.skip = skip;
    cfg.refresh = RefreshPolicy{1000, 1000};

    DecodeState st = make_state(w, prompt4(), cfg);
    step_es(st);  // first iteration context-refreshes by construction
    REQUIRE(st.trace.records[0].refresh == RefreshKind::context);
    step_es(st);
    const TraceRecord & r = st.trace.records[1];
    REQUIRE(r.refresh == RefreshKind::none);
    REQUIRE(r.active_per_layer.size() == 12);
    for (std::uint32_t l = 0; l <= 4; l++) REQUIRE(r.active_per_layer[l].size() == 8);
    for (std::uint32_t l = 5; l <= 8; l++) REQUIRE(r.active_per_layer[l].size() == 4);
    for (std::uint32_t l = 9; l < 12; l++) REQUIRE(r.active_per_layer[l].size() == 2);
    REQUIRE(r.variation.count(4) == 1);
    REQUIRE(r.variation.at(4).size() == 8);
    REQUIRE(r.variation.count(8) == 1);
    REQUIRE(r.variation.at(8).size() == 4);
}

TEST_CASE("non-surviving positions keep their cached confidence") {
    ModelConfig mc = small_config(8);
    ModelWeights w = init_toy_model(mc, 13);
    GenerationConfig cfg = base_cfg(Strategy::es_dllm, 8, 8);
    SkipSchedule skip;
    skip.ratios[2] = 0.5;
    cfg.skip = skip;
    cfg.refresh = RefreshPolicy{1000, 1000};

    DecodeState st = make_state(w, prompt4(), cfg);
    step_es(st);  // context refresh
    std::vector<float> conf_before = st.cache.conf;
    step_es(st);  // steady skip iteration
    const TraceRecord & r = st.trace.records[1];
    REQUIRE(r.refresh == RefreshKind::none);
    const PositionSet & survivors = r.active_per_layer.back();
    for (std::uint32_t p = 4; p < 12; p++) {
        const bool survived = std::find(survivors.begin(), survivors.end(), p) != survivors.end() ||
                              (r.fallback && r.confidences.count(p));
        if (!survived) REQUIRE(st.cache.conf[p] == conf_before[p]);
    }
}

TEST_CASE("steady-state FLOP proportion reproduces the default-schedule figure") {
    ModelConfig mc = small_config(32);
    ModelWeights w = init_toy_model(mc, 14);
    std::vector<std::uint32_t> prompt{1, 2, 3, 4, 5, 6, 7, 8};

    GenerationConfig dual = base_cfg(Strategy::dualcache, 16, 8);
    GenerationConfig es = base_cfg(Strategy::es_dllm, 16, 8);
    SkipSchedule skip;
    skip.ratios[4] = 0.5;
    skip.ratios[8] = 0.5;
    es.skip = skip;
    es.refresh = RefreshPolicy{1000, 1000};

    GenerationResult dres = generate(w, prompt, dual);
    GenerationResult eres = generate(w, prompt, es);
    const double ratio = steady_layer_flops_per_iter(eres.trace) / steady_layer_flops_per_iter(dres.trace);
    // survivor cascade at block 8: 5 layers of 8, 4 of 4, 23 of 2 -> 102/256
    REQUIRE(ratio == 102.0 / 256.0);
}

TEST_CASE("per-iteration FLOPs are ordered es <= dualcache <= vanilla") {
    ModelWeights w = init_toy_model(small_config(8), 15);
    GenerationConfig vanilla = base_cfg(Strategy::vanilla, 16, 8);
    GenerationConfig dual = base_cfg(Strategy::dualcache, 16, 8);
    GenerationConfig es = base_cfg(Strategy::es_dllm, 16, 8);
    SkipSchedule skip;
    skip.ratios[2] = 0.5;
    es.skip = skip;
    es.refresh = RefreshPolicy{8, 4};

    GenerationResult rv = generate(w, prompt4(), vanilla);
    GenerationResult rd = generate(w, prompt4(), dual);
    GenerationResult re = generate(w, prompt4(), es);
    REQUIRE(rv.trace.summary.iterations == 16);
    REQUIRE(rd.trace.summary.iterations == 16);
    REQUIRE(re.trace.summary.iterations == 16);
    for (std::uint32_t i = 0; i < 16; i++) {
        const std::uint64_t ev = re.trace.records[i + 1].flops.total;  // skip init record
        const std::uint64_t dv = rd.trace.records[i].flops.total;
        const std::uint64_t vv = rv.trace.records[i].flops.total;
        REQUIRE(ev <= dv);
        REQUIRE(dv <= vv);
    }
}

TEST_CASE("context refresh rewrites the cache to match a from-scratch forward") {
    const ModelConfig mc = small_config();
    ModelWeights w = init_toy_model(mc, 16);
    GenerationConfig cfg = base_cfg(Strategy::es_dllm, 8, 4);
    cfg.refresh = RefreshPolicy{1, 1};

    DecodeState st = make_state(w, prompt4(), cfg);
    step_es(st);
    step_es(st);
    std::vector<std::uint32_t> seq_before = st.sequence;
    step_es(st);  // context refresh runs on seq_before, then unmasks
    REQUIRE(st.trace.records.back().refresh == RefreshKind::context);

    FlopCounter counter;
    ForwardResult fresh = full_forward(w, seq_before, counter);
    for (std::uint32_t l = 0; l < mc.num_layers; l++) {
        REQUIRE(testutil::max_rel_diff(st.cache.k[l], fresh.keys[l]) < 1e-5);
        REQUIRE(testutil::max_rel_diff(st.cache.v[l], fresh.values[l]) < 1e-5);
    }
}

TEST_CASE("select_unmask contract") {
    SECTION("saturation") {
        std::vector<std::pair<std::uint32_t, float>> pool{{4, 0.1f}, {5, 0.9f}};
        REQUIRE(select_unmask(pool, 10) == PositionSet{4, 5});
    }
    SECTION("argmax") {
        std::vector<std::pair<std::uint32_t, float>> pool{{4, 0.2f}, {5, 0.9f}, {6, 0.4f}};
        REQUIRE(select_unmask(pool, 1) == PositionSet{5});
    }
    SECTION("confidence ties unmask the lower position first") {
        std::vector<std::pair<std::uint32_t, float>> pool{{4, 0.5f}, {5, 0.5f}, {6, 0.5f}};
        REQUIRE(select_unmask(pool, 1) == PositionSet{4});
        REQUIRE(select_unmask(pool, 2) == PositionSet{4, 5});
    }
}

TEST_CASE("parallel_unmask contract") {
    std::vector<std::pair<std::uint32_t, float>> pool{{4, 0.95f}, {5, 0.91f}, {6, 0.3f}};
    SECTION("threshold filter") {
        REQUIRE(parallel_unmask(pool, 0.9) == PositionSet{4, 5});
    }
    SECTION("progress guarantee at threshold 1.0") {
        REQUIRE(parallel_unmask(pool, 1.0) == PositionSet{4});
    }
    SECTION("tiny threshold unmasks everything") {
        REQUIRE(parallel_unmask(pool, 1e-9) == PositionSet{4, 5, 6});
    }
}

TEST_CASE("eos_guard contract") {
    SECTION("suppression picks the second-best token") {
        std::vector<float> row{0.1f, 5.0f, 0.3f, 2.0f};
        eos_guard(row, 1, true, false);
        REQUIRE(row_argmax(row) == 3);
    }
    SECTION("pass-through is bitwise") {
        std::vector<float> row{0.1f, 5.0f, 0.3f, 2.0f};
        std::vector<float> before = row;
        eos_guard(row, 1, false, false);
        REQUIRE(row == before);
    }
    SECTION("the final position may sample EOS") {
        std::vector<float> row{0.1f, 5.0f, 0.3f, 2.0f};
        std::vector<float> before = row;
        eos_guard(row, 1, true, true);
        REQUIRE(row == before);
    }
}

TEST_CASE("fallback recomputes the best cached-confidence masked position") {
    const ModelConfig mc = small_config();
    ModelWeights w = init_toy_model(mc, 17);
    GenerationConfig cfg = base_cfg(Strategy::es_dllm, 4, 4);
    SkipSchedule skip;
    skip.ratios[0] = 0.75;  // one survivor per iteration
    skip.alpha = 1.0;       // importance = cached confidence alone
    cfg.skip = skip;
    cfg.refresh = RefreshPolicy{1000, 1000};

    DecodeState st = make_state(w, prompt4(), cfg);
    // Rig the state: position 4 is already unmasked with sky-high cached
    // confidence, so it wins the single survivor slot and no masked position
    // reaches the final layer.
    st.sequence[4] = 9;
    st.masked_remaining = 3;
    st.counters.since_context = 0;  // suppress the initial context refresh
    st.cache.conf[4] = 0.99f;
    st.cache.conf[5] = 0.01f;
    st.cache.conf[6] = 0.01f;
    st.cache.conf[7] = 0.01f;

    step_es(st);
    const TraceRecord & r = st.trace.records.back();
    REQUIRE(r.fallback);
    REQUIRE(r.unmask.size() == 1);
    REQUIRE(r.unmask[0].position == 5);  // cached-confidence tie breaks low
    REQUIRE(st.sequence[5] != mc.mask_token_id);
}

TEST_CASE("every variation indicator drives skipping end to end") {
    const ModelConfig mc = small_config();
    ModelWeights w = init_toy_model(mc, 23);
    for (IndicatorKind kind :
         {IndicatorKind::hidden, IndicatorKind::query, IndicatorKind::key, IndicatorKind::value}) {
        GenerationConfig cfg = base_cfg(Strategy::es_dllm, 8, 8);
        SkipSchedule skip;
        skip.ratios[1] = 0.5;
        skip.ratios[2] = 0.5;
        skip.indicator = kind;
        cfg.skip = skip;
        cfg.refresh = RefreshPolicy{1000, 1000};

        GenerationResult a = generate(w, prompt4(), cfg);
        GenerationResult b = generate(w, prompt4(), cfg);
        REQUIRE(a.tokens == b.tokens);
        for (std::uint32_t t : a.tokens) REQUIRE(t != mc.mask_token_id);

        // keys/values reuse the KV cache; hidden/query need their own rows
        const std::uint32_t indicator_layers = skip.needs_indicator_cache() ? 2 : 0;
        REQUIRE(a.trace.summary.cache_bytes_per_output_token ==
                cache_bytes_per_output_token(mc.num_layers, mc.hidden_dim, indicator_layers));

        bool saw_variation = false;
        for (const TraceRecord & r : a.trace.records) {
            if (r.refresh != RefreshKind::none || r.iter == 0) continue;
            saw_variation |= r.variation.count(1) == 1 && r.variation.count(2) == 1;
        }
        REQUIRE(saw_variation);
    }
}

TEST_CASE("context refreshes fire on period even mid-block") {
    ModelWeights w = init_toy_model(small_config(), 24);
    GenerationConfig cfg = base_cfg(Strategy::es_dllm, 16, 8);
    SkipSchedule skip;
    skip.ratios[1] = 0.5;
    cfg.skip = skip;
    cfg.refresh = RefreshPolicy{4, 2};

    GenerationResult res = generate(w, prompt4(), cfg);
    REQUIRE(res.trace.summary.iterations == 16);
    const std::vector<RefreshKind> expected{
        RefreshKind::context, RefreshKind::none, RefreshKind::block, RefreshKind::none,
        RefreshKind::context, RefreshKind::none, RefreshKind::block, RefreshKind::none,
        RefreshKind::context, RefreshKind::none, RefreshKind::block, RefreshKind::none,
        RefreshKind::context, RefreshKind::none, RefreshKind::block, RefreshKind::none,
    };
    for (std::size_t i = 0; i < expected.size(); i++) {
        REQUIRE(res.trace.records[i + 1].refresh == expected[i]);  // record 0 is the seeding pass
    }
    // iterations 5 and 13 context-refresh in the middle of a block
    REQUIRE(res.trace.records[5].block == 0);
    REQUIRE(res.trace.records[13].block == 1);
}

TEST_CASE("es_dllm combines with parallel decoding") {
    ModelWeights w = init_toy_model(small_config(), 25);
    GenerationConfig cfg = base_cfg(Strategy::es_dllm, 16, 8);
    SkipSchedule skip;
    skip.ratios[1] = 0.5;
    cfg.skip = skip;
    cfg.refresh = RefreshPolicy{8, 4};
    cfg.parallel_threshold = 0.05;

    GenerationResult res = generate(w, prompt4(), cfg);
    REQUIRE(res.trace.summary.iterations <= 16);
    for (std::uint32_t t : res.tokens) REQUIRE(t != w.config.mask_token_id);
    std::size_t unmasked = 0;
    for (const TraceRecord & r : res.trace.records) unmasked += r.unmask.size();
    REQUIRE(unmasked == 16);
}

TEST_CASE("generation is deterministic run to run") {
    ModelWeights w = init_toy_model(small_config(), 18);
    GenerationConfig cfg = base_cfg(Strategy::es_dllm, 8, 4);
    SkipSchedule skip;
    skip.ratios[1] = 0.5;
    cfg.skip = skip;
    cfg.refresh = RefreshPolicy{4, 2};

    GenerationResult a = generate(w, prompt4(), cfg);
    GenerationResult b = generate(w, prompt4(), cfg);
    REQUIRE(a.tokens == b.tokens);
    REQUIRE(a.trace.summary.flops.total == b.trace.summary.flops.total);
    REQUIRE(a.trace.records.size() == b.trace.records.size());
    for (std::size_t i = 0; i < a.trace.records.size(); i++) {
        REQUIRE(a.trace.records[i].confidences == b.trace.records[i].confidences);
        REQUIRE(a.trace.records[i].flops.total == b.trace.records[i].flops.total);
    }
}

TEST_CASE("config validation rejects strategy/flag mismatches") {
    const ModelConfig mc = small_config();
    GenerationConfig cfg = base_cfg(Strategy::vanilla);
    SkipSchedule skip;
    skip.ratios[1] = 0.5;
    cfg.skip = skip;
    REQUIRE_THROWS_AS(cfg.validate(mc), config_error);

    cfg = base_cfg(Strategy::dualcache);
    cfg.refresh = RefreshPolicy{4, 1};
    REQUIRE_THROWS_AS(cfg.validate(mc), config_error);

    cfg = base_cfg(Strategy::vanilla, 10, 4);  // not divisible
    REQUIRE_THROWS_AS(cfg.validate(mc), config_error);

    cfg = base_cfg(Strategy::vanilla);
    cfg.parallel_threshold = 0.9;
    cfg.tokens_per_step = 2;
    REQUIRE_THROWS_AS(cfg.validate(mc), config_error);

    cfg = base_cfg(Strategy::vanilla);
    cfg.parallel_threshold = 1.5;
    REQUIRE_THROWS_AS(cfg.validate(mc), config_error);
}

TEST_CASE("prompt validation") {
    ModelWeights w = init_toy_model(small_config(), 19);
    GenerationConfig cfg = base_cfg(Strategy::vanilla, 4, 4);
    REQUIRE_THROWS_AS(generate(w, {}, cfg), input_error);
    REQUIRE_THROWS_AS(generate(w, {1, w.config.mask_token_id}, cfg), input_error);
    REQUIRE_THROWS_AS(generate(w, {1, 200}, cfg), input_error);
}

TEST_CASE("parallel decoding reduces iterations and saturates at tiny thresholds") {
    ModelWeights w = init_toy_model(small_config(), 20);

    GenerationConfig plain = base_cfg(Strategy::dualcache, 16, 4);
    GenerationConfig pd = base_cfg(Strategy::dualcache, 16, 4);
    pd.parallel_threshold = 0.9;
    GenerationConfig saturating = base_cfg(Strategy::dualcache, 16, 4);
    saturating.parallel_threshold = 1e-9;

    const auto iters = [&](const GenerationConfig & cfg) {
        return generate(w, prompt4(), cfg).trace.summary.iterations;
    };
    REQUIRE(iters(pd) <= iters(plain));
    REQUIRE(iters(saturating) == 4);  // one iteration per block
}

TEST_CASE("tokens_per_step batches unmasking") {
    ModelWeights w = init_toy_model(small_config(), 21);
    GenerationConfig cfg = base_cfg(Strategy::dualcache, 16, 4);
    cfg.tokens_per_step = 4;
    GenerationResult res = generate(w, prompt4(), cfg);
    REQUIRE(res.trace.summary.iterations == 4);
    for (const TraceRecord & r : res.trace.records) REQUIRE(r.unmask.size() == 4);
}

TEST_CASE("cache bytes per output token are reported for caching strategies") {
    const ModelConfig mc = small_config();
    ModelWeights w = init_toy_model(mc, 22);

    GenerationConfig es = base_cfg(Strategy::es_dllm, 4, 4);
    SkipSchedule skip;
    skip.ratios[1] = 0.5;
    skip.ratios[2] = 0.5;
    es.skip = skip;
    GenerationResult res = generate(w, prompt4(), es);
    REQUIRE(res.trace.summary.cache_bytes_per_output_token ==
            cache_bytes_per_output_token(mc.num_layers, mc.hidden_dim, 2));

    GenerationResult vres = generate(w, prompt4(), base_cfg(Strategy::vanilla, 4, 4));
    REQUIRE(vres.trace.summary.cache_bytes_per_output_token == 0);
}

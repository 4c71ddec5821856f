// esdllm command line: create toy models, run generation sessions, compare
// decoding strategies, and turn traces into analysis CSVs. Every command
// writes a manifest naming its outputs; given the same manifest inputs the
// outputs are byte-identical.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "esdllm/analysis.hpp"
#include "esdllm/decoder.hpp"
#include "esdllm/model.hpp"
#include "esdllm/trace_io.hpp"
#include "esdllm/version.hpp"

namespace fs = std::filesystem;
using esdllm::json;

namespace {

esdllm::ModelConfig model_config_from_file(const std::string & path) {
    std::ifstream in(path);
    if (!in) throw esdllm::input_error("cannot open config file '" + path + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw esdllm::format_error("bad JSON in config file '" + path + "'");
    esdllm::ModelConfig c;
    c.num_layers = j.value("num_layers", c.num_layers);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.mask_token_id = j.value("mask_token_id", c.mask_token_id);
    c.eos_token_id = j.value("eos_token_id", c.eos_token_id);
    c.rope_base = j.value("rope_base", c.rope_base);
    return c;
}

std::vector<std::uint32_t> parse_token_csv(const std::string & csv) {
    std::vector<std::uint32_t> tokens;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        tokens.push_back(static_cast<std::uint32_t>(std::stoul(item)));
    }
    return tokens;
}

std::vector<std::uint32_t> random_prompt(std::size_t n, const esdllm::ModelConfig & c, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::uint32_t> tokens;
    tokens.reserve(n);
    while (tokens.size() < n) {
        const std::uint32_t t = static_cast<std::uint32_t>(rng() % c.vocab_size);
        if (t == c.mask_token_id || t == c.eos_token_id) continue;
        tokens.push_back(t);
    }
    return tokens;
}

void write_manifest(const std::string & path, const std::string & command, const json & config,
                    const std::vector<std::string> & outputs, double wall_ms) {
    json j;
    j["engine_version"] = esdllm::kEngineVersion;
    j["command"] = command;
    j["config"] = config;
    j["outputs"] = outputs;
    j["wall_ms"] = wall_ms;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw esdllm::format_error("cannot open manifest '" + path + "'");
    out << j.dump(2) << "\n";
}

struct Timer {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    }
};

std::string file_sha_like_hash(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw esdllm::input_error("cannot open '" + path + "'");
    std::uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); i++) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ull;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

// ---- generate -------------------------------------------------------------

struct GenerateArgs {
    std::string model_path;
    std::string prompt_csv;
    std::uint32_t random_prompt_len = 0;
    std::string strategy = "vanilla";
    std::uint32_t gen_len = 32;
    std::uint32_t block_len = 8;
    std::uint32_t tokens_per_step = 1;
    double parallel_threshold = 0.0;  // 0 = off
    std::string skip_json;
    std::string refresh_spec;
    std::uint64_t seed = 0;
    std::string trace_path;
    std::string name;
    bool no_attention_flops = false;
    bool log_full_confidence = false;
    bool log_logits = false;
    std::string log_tensor_layers;
    std::string log_tensor_indicators;
    std::string dump_cache_path;
};

esdllm::GenerationConfig build_generation_config(const GenerateArgs & a, const esdllm::ModelConfig & mc) {
    esdllm::GenerationConfig cfg;
    cfg.strategy = esdllm::strategy_from_string(a.strategy);
    cfg.gen_length = a.gen_len;
    cfg.block_length = a.block_len;
    cfg.tokens_per_step = a.tokens_per_step;
    if (a.parallel_threshold > 0.0) cfg.parallel_threshold = a.parallel_threshold;
    if (!a.skip_json.empty()) {
        json j = json::parse(a.skip_json, nullptr, false);
        if (j.is_discarded()) throw esdllm::input_error("bad JSON in --skip");
        // Accept both the full schedule object and a bare ratios map.
        cfg.skip = j.contains("ratios") ? esdllm::detail::skip_from_json(j)
                                        : esdllm::detail::skip_from_json(json{{"ratios", j}});
    }
    if (!a.refresh_spec.empty()) {
        const auto comma = a.refresh_spec.find(',');
        if (comma == std::string::npos) throw esdllm::input_error("--refresh expects 'context,block'");
        cfg.refresh = esdllm::RefreshPolicy{
            static_cast<std::uint32_t>(std::stoul(a.refresh_spec.substr(0, comma))),
            static_cast<std::uint32_t>(std::stoul(a.refresh_spec.substr(comma + 1)))};
    }
    cfg.seed = a.seed;
    cfg.count_attention_flops = !a.no_attention_flops;
    cfg.log_full_confidence = a.log_full_confidence;
    cfg.log_logits = a.log_logits;
    if (!a.log_tensor_layers.empty()) {
        for (std::uint32_t l : parse_token_csv(a.log_tensor_layers)) cfg.log_tensor_layers.push_back(l);
    }
    if (!a.log_tensor_indicators.empty()) {
        std::stringstream ss(a.log_tensor_indicators);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) cfg.log_tensor_indicators.push_back(esdllm::indicator_from_string(item));
        }
    }
    cfg.validate(mc);
    return cfg;
}

int cmd_generate(const GenerateArgs & a) {
    Timer timer;
    esdllm::ModelWeights weights = esdllm::load_weights(a.model_path);
    esdllm::GenerationConfig cfg = build_generation_config(a, weights.config);

    std::vector<std::uint32_t> prompt;
    if (a.random_prompt_len > 0) {
        prompt = random_prompt(a.random_prompt_len, weights.config, a.seed);
    } else if (!a.prompt_csv.empty()) {
        prompt = parse_token_csv(a.prompt_csv);
    } else {
        throw esdllm::input_error("either --prompt-tokens or --random-prompt is required");
    }

    esdllm::CacheSet final_cache;
    esdllm::GenerationResult result =
        esdllm::generate(weights, prompt, cfg, a.dump_cache_path.empty() ? nullptr : &final_cache);
    result.trace.summary.name = a.name.empty() ? fs::path(a.trace_path).stem().string() : a.name;
    esdllm::write_trace(result.trace, a.trace_path);
    if (!a.dump_cache_path.empty()) {
        if (cfg.strategy == esdllm::Strategy::vanilla) {
            throw esdllm::input_error("--dump-cache requires a caching strategy");
        }
        esdllm::dump_cache(final_cache, a.dump_cache_path);
    }

    std::cout << "tokens:";
    for (std::size_t i = prompt.size(); i < result.tokens.size(); i++) std::cout << " " << result.tokens[i];
    std::cout << "\niterations: " << result.trace.summary.iterations
              << "\ntotal_flops: " << result.trace.summary.flops.total
              << "\ntokens_hash: " << result.trace.summary.tokens_hash << "\n";

    std::vector<std::string> outputs{a.trace_path, esdllm::summary_path_for(a.trace_path)};
    if (!a.dump_cache_path.empty()) {
        outputs.push_back(a.dump_cache_path);
        outputs.push_back(a.dump_cache_path + ".json");
    }
    json cfg_json;
    cfg_json["model_path"] = a.model_path;
    cfg_json["prompt"] = prompt;
    cfg_json["generation"] = esdllm::detail::generation_to_json(cfg);
    cfg_json["name"] = result.trace.summary.name;
    write_manifest(a.trace_path + ".manifest.json", "generate", cfg_json, outputs, timer.ms());
    return 0;
}

// ---- init-model -----------------------------------------------------------

int cmd_init_model(const std::string & config_path, std::uint64_t seed, const std::string & out_path) {
    Timer timer;
    esdllm::ModelConfig config = config_path.empty() ? esdllm::ModelConfig{} : model_config_from_file(config_path);
    config.validate();
    esdllm::ModelWeights weights = esdllm::init_toy_model(config, seed);
    esdllm::save_weights(weights, out_path);
    std::cout << "parameters: " << esdllm::parameter_count(config) << "\n";
    std::cout << "file_hash: " << file_sha_like_hash(out_path) << "\n";
    json cfg_json;
    cfg_json["model"] = esdllm::detail::model_to_json(config);
    cfg_json["seed"] = seed;
    write_manifest(out_path + ".manifest.json", "init-model", cfg_json, {out_path}, timer.ms());
    return 0;
}

// ---- compare --------------------------------------------------------------

struct CompareEntry {
    std::string name;
    esdllm::GenerationConfig cfg;
    std::string expect_tokens_match;
};

int cmd_compare(const std::string & model_path, const std::string & prompt_csv, std::uint32_t random_prompt_len,
                std::uint64_t seed, const std::string & configs_path, const std::string & out_dir) {
    Timer timer;
    esdllm::ModelWeights weights = esdllm::load_weights(model_path);

    std::ifstream in(configs_path);
    if (!in) throw esdllm::input_error("cannot open configs file '" + configs_path + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw esdllm::format_error("bad JSON in configs file '" + configs_path + "'");
    const json & list = j.is_array() ? j : j.at("configs");

    std::vector<CompareEntry> entries;
    for (const auto & item : list) {
        CompareEntry e;
        e.name = item.at("name").get<std::string>();
        e.cfg = esdllm::detail::generation_from_json(item);
        e.expect_tokens_match = item.value("expect_tokens_match", "");
        e.cfg.validate(weights.config);
        entries.push_back(std::move(e));
    }
    if (entries.empty()) throw esdllm::input_error("configs file lists no configurations");

    std::vector<std::uint32_t> prompt;
    if (random_prompt_len > 0) {
        prompt = random_prompt(random_prompt_len, weights.config, seed);
    } else if (!prompt_csv.empty()) {
        prompt = parse_token_csv(prompt_csv);
    } else {
        throw esdllm::input_error("either --prompt-tokens or --random-prompt is required");
    }

    fs::create_directories(out_dir);

    std::size_t threads = std::min<std::size_t>(entries.size(), std::max(1u, std::thread::hardware_concurrency()));
    if (const char * env = std::getenv("ESDLLM_THREADS")) {
        const unsigned long requested = std::strtoul(env, nullptr, 10);
        if (requested >= 1) threads = std::min<std::size_t>(entries.size(), requested);
    }

    std::vector<esdllm::GenerationResult> results(entries.size());
    std::vector<std::string> errors(entries.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= entries.size()) return;
            try {
                results[i] = esdllm::generate(weights, prompt, entries[i].cfg);
                results[i].trace.summary.name = entries[i].name;
            } catch (const std::exception & e) {
                errors[i] = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; t++) pool.emplace_back(worker);
    for (auto & t : pool) t.join();

    // Preserve whatever completed before reporting a failure.
    std::vector<std::string> outputs;
    for (std::size_t i = 0; i < entries.size(); i++) {
        if (!errors[i].empty()) continue;
        const std::string trace_path = (fs::path(out_dir) / (entries[i].name + ".jsonl")).string();
        esdllm::write_trace(results[i].trace, trace_path);
        outputs.push_back(trace_path);
        outputs.push_back(esdllm::summary_path_for(trace_path));
    }

    double dualcache_steady = 0.0;
    for (std::size_t i = 0; i < entries.size(); i++) {
        if (errors[i].empty() && entries[i].cfg.strategy == esdllm::Strategy::dualcache) {
            dualcache_steady = esdllm::steady_layer_flops_per_iter(results[i].trace);
            break;
        }
    }

    const std::string csv_path = (fs::path(out_dir) / "compare.csv").string();
    std::ofstream csv(csv_path, std::ios::binary);
    csv << "config,iterations,total_flops,flop_ratio_vs_dualcache,tokens_hash\n";
    for (std::size_t i = 0; i < entries.size(); i++) {
        if (!errors[i].empty()) continue;
        const auto & sum = results[i].trace.summary;
        const double ratio = dualcache_steady > 0.0
                                 ? esdllm::steady_layer_flops_per_iter(results[i].trace) / dualcache_steady
                                 : std::numeric_limits<double>::quiet_NaN();
        csv << sum.name << "," << sum.iterations << "," << sum.flops.total << ","
            << esdllm::detail::fmt_double(ratio) << "," << sum.tokens_hash << "\n";
    }
    csv.close();
    outputs.push_back(csv_path);

    bool all_ok = true;
    for (std::size_t i = 0; i < entries.size(); i++) {
        if (errors[i].empty()) continue;
        all_ok = false;
        std::cerr << "config " << entries[i].name << " failed: " << errors[i] << "\n";
    }
    for (std::size_t i = 0; i < entries.size(); i++) {
        if (entries[i].expect_tokens_match.empty() || !errors[i].empty()) continue;
        const auto other = std::find_if(entries.begin(), entries.end(), [&](const CompareEntry & e) {
            return e.name == entries[i].expect_tokens_match;
        });
        if (other == entries.end()) {
            std::cerr << "equivalence target '" << entries[i].expect_tokens_match << "' not found\n";
            all_ok = false;
            continue;
        }
        const std::size_t o = static_cast<std::size_t>(other - entries.begin());
        const bool match = errors[o].empty() && results[i].tokens == results[o].tokens;
        std::cout << "equivalence " << entries[i].name << " == " << other->name << ": "
                  << (match ? "PASS" : "FAIL") << "\n";
        all_ok &= match;
    }

    json cfg_json;
    cfg_json["model_path"] = model_path;
    cfg_json["prompt"] = prompt;
    cfg_json["configs_path"] = configs_path;
    cfg_json["seed"] = seed;
    write_manifest((fs::path(out_dir) / "manifest.json").string(), "compare", cfg_json, outputs, timer.ms());
    return all_ok ? 0 : 1;
}

// ---- analyze --------------------------------------------------------------

bool wildcard_match(const std::string & pattern, const std::string & text) {
    std::size_t p = 0, t = 0, star = std::string::npos, restart = 0;
    while (t < text.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
            p++;
            t++;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            restart = t;
        } else if (star != std::string::npos) {
            p = star + 1;
            t = ++restart;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') p++;
    return p == pattern.size();
}

std::vector<std::string> expand_glob(const std::string & pattern) {
    const fs::path p(pattern);
    const std::string filename = p.filename().string();
    if (filename.find('*') == std::string::npos && filename.find('?') == std::string::npos) {
        return fs::exists(p) ? std::vector<std::string>{pattern} : std::vector<std::string>{};
    }
    const fs::path dir = p.parent_path().empty() ? fs::path(".") : p.parent_path();
    std::vector<std::string> matches;
    if (!fs::exists(dir)) return matches;
    for (const auto & entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        if (wildcard_match(filename, entry.path().filename().string())) {
            matches.push_back(entry.path().string());
        }
    }
    std::sort(matches.begin(), matches.end());
    return matches;
}

int cmd_analyze(const std::string & traces_glob, const std::string & out_dir, double threshold) {
    Timer timer;
    const std::vector<std::string> paths = expand_glob(traces_glob);
    if (paths.empty()) throw esdllm::input_error("no traces match '" + traces_glob + "'");

    std::vector<esdllm::GenerationTrace> traces;
    for (const std::string & path : paths) traces.push_back(esdllm::read_trace(path));

    fs::create_directories(out_dir);
    std::vector<std::string> outputs;

    std::vector<esdllm::GenerationTrace> full_conf;
    for (const auto & t : traces) {
        if (esdllm::has_full_confidence_logging(t)) full_conf.push_back(t);
    }
    {
        esdllm::VariationReport report;
        if (!full_conf.empty()) report = esdllm::confidence_variation(full_conf, threshold);
        const std::string cv = (fs::path(out_dir) / "conf_variation.csv").string();
        const std::string ex = (fs::path(out_dir) / "exceedance.csv").string();
        esdllm::write_conf_variation_csv(report, cv);
        esdllm::write_exceedance_csv(report, ex);
        outputs.push_back(cv);
        outputs.push_back(ex);
    }

    // Union of logged (layer, indicator) pairs across the trace set.
    std::set<std::uint32_t> layers;
    std::set<std::string> kinds;
    for (const auto & t : traces) {
        for (const auto & r : t.records) {
            for (const auto & [kind, per_layer] : r.tensors) {
                kinds.insert(kind);
                for (const auto & [layer, rows] : per_layer) {
                    (void) rows;
                    layers.insert(layer);
                }
            }
        }
    }
    for (std::uint32_t layer : layers) {
        std::map<esdllm::IndicatorKind, esdllm::VariationReport> by_indicator;
        for (const std::string & kind : kinds) {
            try {
                by_indicator[esdllm::indicator_from_string(kind)] =
                    esdllm::tensor_variation(traces, layer, esdllm::indicator_from_string(kind), threshold);
            } catch (const esdllm::input_error &) {
                // this indicator was not logged at this layer
            }
        }
        const std::string path = (fs::path(out_dir) / ("tensor_variation_L" + std::to_string(layer) + ".csv")).string();
        esdllm::write_tensor_variation_csv(by_indicator, path);
        outputs.push_back(path);
    }

    {
        std::vector<std::uint32_t> layer_list(layers.begin(), layers.end());
        const auto entries = esdllm::variation_confidence_correlation(traces, layer_list);
        const std::string path = (fs::path(out_dir) / "correlation.csv").string();
        esdllm::write_correlation_csv(entries, path);
        outputs.push_back(path);
    }

    {
        std::vector<esdllm::FlopReportRow> rows;
        bool have_dualcache = false;
        for (const auto & t : traces) have_dualcache |= t.summary.generation.strategy == esdllm::Strategy::dualcache;
        if (have_dualcache) rows = esdllm::flop_report(traces);
        const std::string path = (fs::path(out_dir) / "flops.csv").string();
        esdllm::write_flops_csv(rows, path);
        outputs.push_back(path);
    }

    {
        json meta;
        meta["threshold"] = threshold;
        meta["probability_change_metric"] = "max_probability_delta";
        json names = json::array();
        for (const auto & t : traces) names.push_back(t.summary.name);
        meta["traces"] = names;
        const std::string path = (fs::path(out_dir) / "analysis_meta.json").string();
        std::ofstream out(path, std::ios::binary);
        out << meta.dump(2) << "\n";
        outputs.push_back(path);
    }

    json cfg_json;
    cfg_json["traces_glob"] = traces_glob;
    cfg_json["threshold"] = threshold;
    write_manifest((fs::path(out_dir) / "manifest.json").string(), "analyze", cfg_json, outputs, timer.ms());
    std::cout << "analyzed " << traces.size() << " trace(s) into " << out_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char ** argv) {
    CLI::App app{"desk-scale inference engine for mask-based diffusion language models"};
    app.require_subcommand(1);

    // init-model
    std::string im_config, im_out;
    std::uint64_t im_seed = 0;
    auto * im = app.add_subcommand("init-model", "create a seeded toy model weight file");
    im->add_option("--config", im_config, "model config JSON (defaults used when omitted)");
    im->add_option("--seed", im_seed, "weight initialization seed")->required();
    im->add_option("--out", im_out, "output weight file")->required();

    // generate
    GenerateArgs ga;
    auto * gen = app.add_subcommand("generate", "run one generation session and write its trace");
    gen->add_option("--model", ga.model_path, "weight file")->required();
    gen->add_option("--prompt-tokens", ga.prompt_csv, "comma-separated prompt token ids");
    gen->add_option("--random-prompt", ga.random_prompt_len, "draw a seeded random prompt of this length");
    gen->add_option("--strategy", ga.strategy, "vanilla | dualcache | es_dllm")->required();
    gen->add_option("--gen-len", ga.gen_len, "generation length")->required();
    gen->add_option("--block-len", ga.block_len, "block length")->required();
    gen->add_option("--tokens-per-step", ga.tokens_per_step, "tokens unmasked per iteration (default 1)");
    gen->add_option("--parallel-threshold", ga.parallel_threshold, "confidence threshold for parallel decoding");
    gen->add_option("--skip", ga.skip_json, "skip schedule JSON, e.g. '{\"ratios\":{\"4\":0.5},\"alpha\":0.5}'");
    gen->add_option("--refresh", ga.refresh_spec, "refresh periods 'context,block'");
    gen->add_option("--seed", ga.seed, "session seed")->required();
    gen->add_option("--trace", ga.trace_path, "output trace path (.jsonl)")->required();
    gen->add_option("--name", ga.name, "config name recorded in the summary");
    gen->add_flag("--no-attention-flops", ga.no_attention_flops, "exclude the attention matmuls from FLOP counts");
    gen->add_flag("--log-full-confidence", ga.log_full_confidence, "log fresh confidences for every position");
    gen->add_flag("--log-logits", ga.log_logits, "log raw logit rows of the sampling pool");
    gen->add_option("--log-tensor-layers", ga.log_tensor_layers, "comma-separated layers to log indicator tensors at");
    gen->add_option("--log-tensor-indicators", ga.log_tensor_indicators, "indicators to log (default hidden)");
    gen->add_option("--dump-cache", ga.dump_cache_path, "write a cache dump after generation (es_dllm only)");

    // compare
    std::string cp_model, cp_prompt, cp_configs, cp_out;
    std::uint32_t cp_random_prompt = 0;
    std::uint64_t cp_seed = 0;
    auto * cp = app.add_subcommand("compare", "run a list of configurations and compare them");
    cp->add_option("--model", cp_model, "weight file")->required();
    cp->add_option("--prompt-tokens", cp_prompt, "comma-separated prompt token ids");
    cp->add_option("--random-prompt", cp_random_prompt, "draw a seeded random prompt of this length");
    cp->add_option("--seed", cp_seed, "prompt seed");
    cp->add_option("--configs", cp_configs, "JSON file listing named generation configs")->required();
    cp->add_option("--out", cp_out, "output directory")->required();

    // analyze
    std::string an_glob, an_out;
    double an_threshold = 0.05;
    auto * an = app.add_subcommand("analyze", "compute statistics CSVs from trace files");
    an->add_option("--traces", an_glob, "trace glob, e.g. 'out/*.jsonl'")->required();
    an->add_option("--out", an_out, "output directory")->required();
    an->add_option("--threshold", an_threshold, "confidence-variation threshold (default 0.05)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (im->parsed()) return cmd_init_model(im_config, im_seed, im_out);
        if (gen->parsed()) return cmd_generate(ga);
        if (cp->parsed()) return cmd_compare(cp_model, cp_prompt, cp_random_prompt, cp_seed, cp_configs, cp_out);
        if (an->parsed()) return cmd_analyze(an_glob, an_out, an_threshold);
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

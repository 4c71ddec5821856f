#pragma once

// Trace serialization: one JSON object per iteration in a .jsonl file plus a
// .summary.json next to it. The writers keep key order and float formatting
// deterministic so identical runs produce byte-identical files.

#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "esdllm/decoder.hpp"

namespace esdllm {

using json = nlohmann::ordered_json;

inline std::string summary_path_for(const std::string & trace_path) {
    const std::string suffix = ".jsonl";
    if (trace_path.size() > suffix.size() &&
        trace_path.compare(trace_path.size() - suffix.size(), suffix.size(), suffix) == 0) {
        return trace_path.substr(0, trace_path.size() - suffix.size()) + ".summary.json";
    }
    return trace_path + ".summary.json";
}

namespace detail {

inline json skip_to_json(const SkipSchedule & s) {
    json ratios = json::object();
    for (const auto & [layer, r] : s.ratios) ratios[std::to_string(layer)] = r;
    return json{{"ratios", ratios}, {"alpha", s.alpha}, {"indicator", to_string(s.indicator)}};
}

inline SkipSchedule skip_from_json(const json & j) {
    SkipSchedule s;
    if (j.contains("ratios")) {
        for (const auto & [key, value] : j.at("ratios").items()) {
            s.ratios[static_cast<std::uint32_t>(std::stoul(key))] = value.get<double>();
        }
    }
    s.alpha = j.value("alpha", 0.5);
    s.indicator = indicator_from_string(j.value("indicator", "hidden"));
    return s;
}

inline json model_to_json(const ModelConfig & c) {
    return json{{"num_layers", c.num_layers},   {"hidden_dim", c.hidden_dim},
                {"num_heads", c.num_heads},     {"ffn_dim", c.ffn_dim},
                {"vocab_size", c.vocab_size},   {"mask_token_id", c.mask_token_id},
                {"eos_token_id", c.eos_token_id}, {"rope_base", c.rope_base}};
}

inline ModelConfig model_from_json(const json & j) {
    ModelConfig c;
    c.num_layers = j.at("num_layers").get<std::uint32_t>();
    c.hidden_dim = j.at("hidden_dim").get<std::uint32_t>();
    c.num_heads = j.at("num_heads").get<std::uint32_t>();
    c.ffn_dim = j.at("ffn_dim").get<std::uint32_t>();
    c.vocab_size = j.at("vocab_size").get<std::uint32_t>();
    c.mask_token_id = j.at("mask_token_id").get<std::uint32_t>();
    c.eos_token_id = j.at("eos_token_id").get<std::uint32_t>();
    c.rope_base = j.at("rope_base").get<float>();
    return c;
}

inline json generation_to_json(const GenerationConfig & g) {
    json j;
    j["strategy"] = to_string(g.strategy);
    j["gen_length"] = g.gen_length;
    j["block_length"] = g.block_length;
    j["tokens_per_step"] = g.tokens_per_step;
    j["parallel_threshold"] = g.parallel_threshold ? json(*g.parallel_threshold) : json(nullptr);
    j["skip"] = g.skip ? skip_to_json(*g.skip) : json(nullptr);
    j["refresh"] = g.refresh ? json{{"context", g.refresh->context_period}, {"block", g.refresh->block_period}}
                             : json(nullptr);
    j["seed"] = g.seed;
    j["count_attention_flops"] = g.count_attention_flops;
    j["log_full_confidence"] = g.log_full_confidence;
    j["log_logits"] = g.log_logits;
    j["log_tensor_layers"] = g.log_tensor_layers;
    json inds = json::array();
    for (IndicatorKind k : g.log_tensor_indicators) inds.push_back(to_string(k));
    j["log_tensor_indicators"] = inds;
    return j;
}

inline GenerationConfig generation_from_json(const json & j) {
    GenerationConfig g;
    g.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    g.gen_length = j.at("gen_length").get<std::uint32_t>();
    g.block_length = j.at("block_length").get<std::uint32_t>();
    g.tokens_per_step = j.value("tokens_per_step", 1u);
    if (j.contains("parallel_threshold") && !j.at("parallel_threshold").is_null()) {
        g.parallel_threshold = j.at("parallel_threshold").get<double>();
    }
    if (j.contains("skip") && !j.at("skip").is_null()) g.skip = skip_from_json(j.at("skip"));
    if (j.contains("refresh") && !j.at("refresh").is_null()) {
        g.refresh = RefreshPolicy{j.at("refresh").at("context").get<std::uint32_t>(),
                                  j.at("refresh").at("block").get<std::uint32_t>()};
    }
    g.seed = j.value("seed", 0ull);
    g.count_attention_flops = j.value("count_attention_flops", true);
    g.log_full_confidence = j.value("log_full_confidence", false);
    g.log_logits = j.value("log_logits", false);
    if (j.contains("log_tensor_layers")) g.log_tensor_layers = j.at("log_tensor_layers").get<std::vector<std::uint32_t>>();
    if (j.contains("log_tensor_indicators")) {
        for (const auto & s : j.at("log_tensor_indicators")) {
            g.log_tensor_indicators.push_back(indicator_from_string(s.get<std::string>()));
        }
    }
    return g;
}

inline json flops_to_json(const FlopSlice & f) {
    return json{{"layers", f.layers}, {"head", f.head}, {"total", f.total}};
}

inline FlopSlice flops_from_json(const json & j) {
    return {j.at("layers").get<std::uint64_t>(), j.at("head").get<std::uint64_t>(),
            j.at("total").get<std::uint64_t>()};
}

inline json record_to_json(const TraceRecord & r) {
    json j;
    j["iter"] = r.iter;
    j["block"] = r.block;
    j["refresh"] = to_string(r.refresh);
    j["fallback"] = r.fallback;
    j["active"] = r.active_per_layer;
    json conf = json::object();
    for (const auto & [pos, c] : r.confidences) conf[std::to_string(pos)] = c;
    j["conf"] = conf;
    json unmask = json::array();
    for (const UnmaskEvent & e : r.unmask) {
        unmask.push_back(json{{"pos", e.position}, {"token", e.token}, {"conf", e.confidence}});
    }
    j["unmask"] = unmask;
    j["flops"] = flops_to_json(r.flops);
    if (!r.variation.empty()) {
        json var = json::object();
        for (const auto & [layer, per_pos] : r.variation) {
            json entry = json::object();
            for (const auto & [pos, v] : per_pos) entry[std::to_string(pos)] = v;
            var[std::to_string(layer)] = entry;
        }
        j["var"] = var;
    }
    if (!r.tensors.empty()) {
        json tens = json::object();
        for (const auto & [kind, per_layer] : r.tensors) {
            json layers = json::object();
            for (const auto & [layer, per_pos] : per_layer) {
                json entry = json::object();
                for (const auto & [pos, row] : per_pos) entry[std::to_string(pos)] = row;
                layers[std::to_string(layer)] = entry;
            }
            tens[kind] = layers;
        }
        j["tensors"] = tens;
    }
    if (!r.logits.empty()) {
        json lg = json::object();
        for (const auto & [pos, row] : r.logits) lg[std::to_string(pos)] = row;
        j["logits"] = lg;
    }
    return j;
}

inline TraceRecord record_from_json(const json & j) {
    TraceRecord r;
    r.iter = j.at("iter").get<std::uint32_t>();
    r.block = j.at("block").get<std::uint32_t>();
    r.refresh = refresh_kind_from_string(j.at("refresh").get<std::string>());
    r.fallback = j.at("fallback").get<bool>();
    r.active_per_layer = j.at("active").get<std::vector<PositionSet>>();
    for (const auto & [key, value] : j.at("conf").items()) {
        r.confidences[static_cast<std::uint32_t>(std::stoul(key))] = value.get<double>();
    }
    for (const auto & e : j.at("unmask")) {
        r.unmask.push_back({e.at("pos").get<std::uint32_t>(), e.at("token").get<std::uint32_t>(),
                            e.at("conf").get<double>()});
    }
    r.flops = flops_from_json(j.at("flops"));
    if (j.contains("var")) {
        for (const auto & [layer, per_pos] : j.at("var").items()) {
            auto & slot = r.variation[static_cast<std::uint32_t>(std::stoul(layer))];
            for (const auto & [pos, v] : per_pos.items()) {
                slot[static_cast<std::uint32_t>(std::stoul(pos))] = v.get<double>();
            }
        }
    }
    if (j.contains("tensors")) {
        for (const auto & [kind, per_layer] : j.at("tensors").items()) {
            auto & kslot = r.tensors[kind];
            for (const auto & [layer, per_pos] : per_layer.items()) {
                auto & lslot = kslot[static_cast<std::uint32_t>(std::stoul(layer))];
                for (const auto & [pos, row] : per_pos.items()) {
                    lslot[static_cast<std::uint32_t>(std::stoul(pos))] = row.get<std::vector<float>>();
                }
            }
        }
    }
    if (j.contains("logits")) {
        for (const auto & [pos, row] : j.at("logits").items()) {
            r.logits[static_cast<std::uint32_t>(std::stoul(pos))] = row.get<std::vector<float>>();
        }
    }
    return r;
}

}  // namespace detail

inline json summary_to_json(const TraceSummary & s) {
    json j;
    j["engine_version"] = s.engine_version;
    j["name"] = s.name;
    j["model"] = detail::model_to_json(s.model);
    j["generation"] = detail::generation_to_json(s.generation);
    j["prompt_length"] = s.prompt_length;
    j["iterations"] = s.iterations;
    j["flops"] = detail::flops_to_json(s.flops);
    j["steady_layer_flops"] = s.steady_layer_flops;
    j["steady_iterations"] = s.steady_iterations;
    j["block_refresh_layer_flops"] = s.block_refresh_layer_flops;
    j["block_refresh_iterations"] = s.block_refresh_iterations;
    j["context_refresh_layer_flops"] = s.context_refresh_layer_flops;
    j["context_refresh_iterations"] = s.context_refresh_iterations;
    j["cache_bytes_per_output_token"] = s.cache_bytes_per_output_token;
    j["tokens"] = s.tokens;
    j["unmask_order"] = s.unmask_order;
    j["tokens_hash"] = s.tokens_hash;
    return j;
}

inline TraceSummary summary_from_json(const json & j) {
    TraceSummary s;
    s.engine_version = j.at("engine_version").get<std::string>();
    s.name = j.value("name", "");
    s.model = detail::model_from_json(j.at("model"));
    s.generation = detail::generation_from_json(j.at("generation"));
    s.prompt_length = j.at("prompt_length").get<std::uint32_t>();
    s.iterations = j.at("iterations").get<std::uint32_t>();
    s.flops = detail::flops_from_json(j.at("flops"));
    s.steady_layer_flops = j.at("steady_layer_flops").get<std::uint64_t>();
    s.steady_iterations = j.at("steady_iterations").get<std::uint32_t>();
    s.block_refresh_layer_flops = j.value("block_refresh_layer_flops", 0ull);
    s.block_refresh_iterations = j.value("block_refresh_iterations", 0u);
    s.context_refresh_layer_flops = j.value("context_refresh_layer_flops", 0ull);
    s.context_refresh_iterations = j.value("context_refresh_iterations", 0u);
    s.cache_bytes_per_output_token = j.at("cache_bytes_per_output_token").get<std::uint64_t>();
    s.tokens = j.at("tokens").get<std::vector<std::uint32_t>>();
    s.unmask_order = j.at("unmask_order").get<std::vector<std::uint32_t>>();
    s.tokens_hash = j.value("tokens_hash", "");
    return s;
}

inline void write_trace(const GenerationTrace & trace, const std::string & trace_path) {
    std::ofstream out(trace_path, std::ios::binary);
    if (!out) throw format_error("cannot open trace file '" + trace_path + "' for writing");
    for (const TraceRecord & r : trace.records) {
        out << detail::record_to_json(r).dump() << "\n";
    }
    if (!out) throw format_error("failed while writing '" + trace_path + "'");

    const std::string spath = summary_path_for(trace_path);
    std::ofstream sout(spath, std::ios::binary);
    if (!sout) throw format_error("cannot open summary file '" + spath + "' for writing");
    sout << summary_to_json(trace.summary).dump(2) << "\n";
    if (!sout) throw format_error("failed while writing '" + spath + "'");
}

inline GenerationTrace read_trace(const std::string & trace_path) {
    std::ifstream in(trace_path);
    if (!in) throw format_error("cannot open trace file '" + trace_path + "'");
    GenerationTrace trace;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            throw format_error("bad JSON at " + trace_path + ":" + std::to_string(line_no));
        }
        try {
            trace.records.push_back(detail::record_from_json(j));
        } catch (const json::exception & e) {
            throw format_error("bad trace record at " + trace_path + ":" + std::to_string(line_no) + ": " +
                               e.what());
        }
    }

    const std::string spath = summary_path_for(trace_path);
    std::ifstream sin(spath);
    if (!sin) throw format_error("missing summary file '" + spath + "'");
    json j = json::parse(sin, nullptr, false);
    if (j.is_discarded()) throw format_error("bad JSON in summary file '" + spath + "'");
    try {
        trace.summary = summary_from_json(j);
    } catch (const json::exception & e) {
        throw format_error("bad summary in '" + spath + "': " + e.what());
    }
    return trace;
}

}  // namespace esdllm

#pragma once

// Generation-dynamics statistics over traces: confidence-variation
// distributions, indicator-tensor variation, variation/confidence Pearson
// correlation, and steady-state FLOP proportions against a dualcache
// baseline. Pure read-only computations over in-memory traces; the CLI layer
// writes the CSV views.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "esdllm/decoder.hpp"
#include "esdllm/skip.hpp"

namespace esdllm {

// 50 log-spaced bins over [1e-6, 1] plus an underflow bin for values below
// the range (exact zeros included). Values above 1 are clipped into the top
// bin for the distribution view.
struct Histogram {
    static constexpr int kBins = 50;
    static constexpr double kLo = 1e-6;
    static constexpr double kHi = 1.0;

    std::uint64_t underflow = 0;
    std::array<std::uint64_t, kBins> counts{};

    void add(double v) {
        if (v < kLo) {
            underflow++;
            return;
        }
        v = std::min(v, kHi);
        const double t = (std::log10(v) - std::log10(kLo)) / (std::log10(kHi) - std::log10(kLo));
        int bin = static_cast<int>(t * kBins);
        bin = std::clamp(bin, 0, kBins - 1);
        counts[static_cast<std::size_t>(bin)]++;
    }

    std::uint64_t total() const {
        std::uint64_t sum = underflow;
        for (std::uint64_t c : counts) sum += c;
        return sum;
    }

    static double bin_lower_edge(int bin) {
        return std::pow(10.0, std::log10(kLo) + (std::log10(kHi) - std::log10(kLo)) * bin / double(kBins));
    }
};

struct VariationSample {
    std::uint32_t iteration;
    std::uint32_t position;
    double value;  // raw, unclipped
};

struct VariationReport {
    std::vector<VariationSample> samples;
    Histogram histogram;                                        // clipped view
    std::map<std::uint32_t, std::pair<std::uint64_t, std::uint64_t>> exceedance;  // iter -> (above, total)

    double exceedance_fraction(std::uint32_t iter) const {
        auto it = exceedance.find(iter);
        if (it == exceedance.end() || it->second.second == 0) return 0.0;
        return static_cast<double>(it->second.first) / static_cast<double>(it->second.second);
    }
};

inline bool has_full_confidence_logging(const GenerationTrace & trace) {
    return trace.summary.generation.strategy == Strategy::vanilla &&
           trace.summary.generation.log_full_confidence;
}

// |c^(t) - c^(t-1)| per position and iteration, pooled over the trace set,
// with the fraction exceeding `threshold` (strictly) per iteration.
inline VariationReport confidence_variation(const std::vector<GenerationTrace> & traces, double threshold = 0.05) {
    VariationReport report;
    for (const GenerationTrace & trace : traces) {
        if (!has_full_confidence_logging(trace)) {
            throw input_error("confidence_variation requires traces recorded with full-confidence logging");
        }
        const auto & records = trace.records;
        for (std::size_t i = 1; i < records.size(); i++) {
            const auto & prev = records[i - 1].confidences;
            const auto & now = records[i].confidences;
            for (const auto & [pos, c_now] : now) {
                auto it = prev.find(pos);
                if (it == prev.end()) continue;
                const double delta = std::abs(c_now - it->second);
                report.samples.push_back({records[i].iter, pos, delta});
                report.histogram.add(delta);
                auto & bucket = report.exceedance[records[i].iter];
                bucket.second++;
                if (delta > threshold) bucket.first++;
            }
        }
    }
    return report;
}

// Variation of the logged indicator tensor at one layer between consecutive
// iterations, for every position present in both. Raw values are kept in the
// samples; the histogram clips values above 1.
inline VariationReport tensor_variation(const std::vector<GenerationTrace> & traces, std::uint32_t layer,
                                        IndicatorKind indicator, double threshold = 0.05) {
    const std::string kind = to_string(indicator);
    VariationReport report;
    bool seen_layer = false;
    for (const GenerationTrace & trace : traces) {
        const auto & records = trace.records;
        for (std::size_t i = 1; i < records.size(); i++) {
            auto now_kind = records[i].tensors.find(kind);
            auto prev_kind = records[i - 1].tensors.find(kind);
            if (now_kind == records[i].tensors.end() || prev_kind == records[i - 1].tensors.end()) continue;
            auto now_layer = now_kind->second.find(layer);
            auto prev_layer = prev_kind->second.find(layer);
            if (now_layer == now_kind->second.end() || prev_layer == prev_kind->second.end()) continue;
            seen_layer = true;
            for (const auto & [pos, row_now] : now_layer->second) {
                auto it = prev_layer->second.find(pos);
                if (it == prev_layer->second.end()) continue;
                const double v = variation_term(row_now, it->second);
                report.samples.push_back({records[i].iter, pos, v});
                report.histogram.add(v);
                auto & bucket = report.exceedance[records[i].iter];
                bucket.second++;
                if (v > threshold) bucket.first++;
            }
        }
    }
    if (!seen_layer) {
        throw input_error("tensor_variation: indicator '" + kind + "' not logged at layer " + std::to_string(layer));
    }
    return report;
}

// Two-pass Pearson coefficient. Zero variance in either variable is
// undefined, distinct from 0.
inline std::optional<double> pearson(const std::vector<double> & x, const std::vector<double> & y) {
    if (x.size() != y.size() || x.size() < 2) throw input_error("pearson: need at least 2 paired samples");
    const double n = static_cast<double>(x.size());
    double mean_x = 0.0, mean_y = 0.0;
    for (std::size_t i = 0; i < x.size(); i++) {
        mean_x += x[i];
        mean_y += y[i];
    }
    mean_x /= n;
    mean_y /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); i++) {
        const double dx = x[i] - mean_x;
        const double dy = y[i] - mean_y;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

struct CorrelationEntry {
    std::uint32_t layer;
    IndicatorKind indicator;
    std::optional<double> r;
    std::size_t samples;
};

// Pearson correlation between the indicator-tensor variation and the
// absolute confidence (max-probability) change, over mask-token positions.
inline std::vector<CorrelationEntry> variation_confidence_correlation(const std::vector<GenerationTrace> & traces,
                                                                      const std::vector<std::uint32_t> & layers) {
    std::map<std::pair<std::uint32_t, std::string>, std::pair<std::vector<double>, std::vector<double>>> paired;

    for (const GenerationTrace & trace : traces) {
        // Generation positions count as mask tokens until their unmask
        // iteration; prompt positions never qualify.
        std::map<std::uint32_t, std::uint32_t> unmask_iter;
        for (const TraceRecord & r : trace.records) {
            for (const UnmaskEvent & e : r.unmask) unmask_iter[e.position] = r.iter;
        }
        const auto & records = trace.records;
        for (std::size_t i = 1; i < records.size(); i++) {
            for (const auto & [kind, per_layer] : records[i].tensors) {
                auto prev_kind = records[i - 1].tensors.find(kind);
                if (prev_kind == records[i - 1].tensors.end()) continue;
                for (std::uint32_t layer : layers) {
                    auto now_layer = per_layer.find(layer);
                    auto prev_layer = prev_kind->second.find(layer);
                    if (now_layer == per_layer.end() || prev_layer == prev_kind->second.end()) continue;
                    for (const auto & [pos, row_now] : now_layer->second) {
                        if (pos < trace.summary.prompt_length) continue;
                        auto rp = prev_layer->second.find(pos);
                        if (rp == prev_layer->second.end()) continue;
                        auto cn = records[i].confidences.find(pos);
                        auto cp = records[i - 1].confidences.find(pos);
                        if (cn == records[i].confidences.end() || cp == records[i - 1].confidences.end()) continue;
                        auto um = unmask_iter.find(pos);
                        const bool still_masked = um == unmask_iter.end() || um->second >= records[i].iter;
                        if (!still_masked) continue;
                        auto & slot = paired[{layer, kind}];
                        slot.first.push_back(variation_term(row_now, rp->second));
                        slot.second.push_back(std::abs(cn->second - cp->second));
                    }
                }
            }
        }
    }

    std::vector<CorrelationEntry> out;
    for (const auto & [key, xy] : paired) {
        if (xy.first.size() < 2) continue;
        out.push_back({key.first, indicator_from_string(key.second), pearson(xy.first, xy.second), xy.first.size()});
    }
    return out;
}

struct FlopReportRow {
    std::string config;
    double measured;     // steady-state per-iteration layer FLOPs vs dualcache
    double closed_form;  // survivor-fraction prediction
};

// Per-iteration transformer-layer FLOPs of the trace's regular workload.
// Configurations whose refresh policy fires every iteration have no plain
// iterations at all; for those the refresh tier is the steady workload.
inline double steady_layer_flops_per_iter(const GenerationTrace & t) {
    const TraceSummary & s = t.summary;
    if (s.steady_iterations > 0) {
        return static_cast<double>(s.steady_layer_flops) / static_cast<double>(s.steady_iterations);
    }
    if (s.block_refresh_iterations > 0) {
        return static_cast<double>(s.block_refresh_layer_flops) / static_cast<double>(s.block_refresh_iterations);
    }
    if (s.context_refresh_iterations > 0) {
        return static_cast<double>(s.context_refresh_layer_flops) / static_cast<double>(s.context_refresh_iterations);
    }
    throw input_error("trace '" + s.name + "' has no iterations to measure");
}

inline bool shapes_match(const TraceSummary & a, const TraceSummary & b) {
    return a.model.num_layers == b.model.num_layers && a.model.hidden_dim == b.model.hidden_dim &&
           a.model.ffn_dim == b.model.ffn_dim && a.model.vocab_size == b.model.vocab_size &&
           a.prompt_length == b.prompt_length && a.generation.gen_length == b.generation.gen_length &&
           a.generation.block_length == b.generation.block_length;
}

// Steady-state per-iteration FLOP proportion of each trace against the
// dualcache trace in the set, next to the closed-form prediction.
inline std::vector<FlopReportRow> flop_report(const std::vector<GenerationTrace> & traces) {
    const GenerationTrace * denom = nullptr;
    for (const GenerationTrace & t : traces) {
        if (t.summary.generation.strategy == Strategy::dualcache) {
            denom = &t;
            break;
        }
    }
    std::vector<FlopReportRow> rows;
    if (denom == nullptr) return rows;
    const double denom_flops = steady_layer_flops_per_iter(*denom);

    for (const GenerationTrace & t : traces) {
        if (!shapes_match(t.summary, denom->summary)) {
            throw input_error("trace '" + t.summary.name + "' does not match the dualcache baseline shape");
        }
        FlopReportRow row;
        row.config = t.summary.name;
        row.measured = steady_layer_flops_per_iter(t) / denom_flops;
        SkipSchedule schedule;  // empty schedule for vanilla/dualcache rows
        if (t.summary.generation.skip) schedule = *t.summary.generation.skip;
        row.closed_form = closed_form_flop_fraction(schedule, t.summary.model.num_layers,
                                                    t.summary.generation.block_length);
        if (t.summary.generation.strategy == Strategy::vanilla) {
            // A vanilla iteration runs every layer over the whole sequence.
            const double n = static_cast<double>(t.summary.prompt_length + t.summary.generation.gen_length);
            row.closed_form = n / static_cast<double>(t.summary.generation.block_length);
        }
        rows.push_back(row);
    }
    return rows;
}

// ---- CSV views ------------------------------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

}  // namespace detail

inline void write_conf_variation_csv(const VariationReport & report, const std::string & path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error("cannot open '" + path + "'");
    out << "iteration,position,delta\n";
    for (const VariationSample & s : report.samples) {
        out << s.iteration << "," << s.position << "," << detail::fmt_double(s.value) << "\n";
    }
}

inline void write_exceedance_csv(const VariationReport & report, const std::string & path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error("cannot open '" + path + "'");
    out << "iteration,fraction\n";
    for (const auto & [iter, bucket] : report.exceedance) {
        (void) bucket;
        out << iter << "," << detail::fmt_double(report.exceedance_fraction(iter)) << "\n";
    }
}

inline void write_tensor_variation_csv(const std::map<IndicatorKind, VariationReport> & by_indicator,
                                       const std::string & path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error("cannot open '" + path + "'");
    out << "indicator,iteration,position,value\n";
    for (const auto & [kind, report] : by_indicator) {
        for (const VariationSample & s : report.samples) {
            out << to_string(kind) << "," << s.iteration << "," << s.position << ","
                << detail::fmt_double(s.value) << "\n";
        }
    }
}

inline void write_correlation_csv(const std::vector<CorrelationEntry> & entries, const std::string & path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error("cannot open '" + path + "'");
    out << "layer,indicator,pearson_r\n";
    for (const CorrelationEntry & e : entries) {
        out << e.layer << "," << to_string(e.indicator) << ","
            << (e.r ? detail::fmt_double(*e.r) : std::string("undefined")) << "\n";
    }
}

inline void write_flops_csv(const std::vector<FlopReportRow> & rows, const std::string & path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw format_error("cannot open '" + path + "'");
    out << "config,measured,closed_form\n";
    for (const FlopReportRow & r : rows) {
        out << r.config << "," << detail::fmt_double(r.measured) << "," << detail::fmt_double(r.closed_form) << "\n";
    }
}

}  // namespace esdllm

#pragma once

// Minimal dense float32 kernel for the transformer forward pass. Every matrix
// product goes through a FlopCounter so per-iteration cost can be accounted
// exactly (2*m*k*n per product). All reductions accumulate in float32 with a
// fixed left-to-right order, so identical inputs give bit-identical outputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "esdllm/errors.hpp"

namespace esdllm {

using PositionSet = std::vector<std::uint32_t>;  // sorted ascending, absolute sequence indices

inline bool is_valid_position_set(const PositionSet & s, std::size_t seq_len) {
    for (std::size_t i = 0; i < s.size(); i++) {
        if (s[i] >= seq_len) return false;
        if (i > 0 && s[i] <= s[i - 1]) return false;
    }
    return true;
}

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;  // row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}
    Matrix(std::size_t r, std::size_t c, std::vector<float> d) : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != rows * cols) throw config_error("matrix data size does not match rows*cols");
    }

    float & at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; i++) m.at(i, i) = 1.0f;
        return m;
    }
};

// Per-session FLOP ledger. `scope` selects the attribution slot in the
// breakdown (the decoder uses layer indices 0..L-1 and L for the output head).
// `count_attention_term` toggles the 4*|S|*N*d attention-matmul term so the
// cost model can be reduced to projections+FFN only.
struct FlopCounter {
    std::uint64_t total = 0;
    std::map<int, std::uint64_t> by_scope;
    int scope = 0;
    bool count_attention_term = true;

    void add(std::uint64_t flops) {
        total += flops;
        by_scope[scope] += flops;
    }

    std::uint64_t scope_total(int s) const {
        auto it = by_scope.find(s);
        return it == by_scope.end() ? 0 : it->second;
    }
};

// c = a * b, counted as 2*m*k*n FLOPs.
inline Matrix matmul(const Matrix & a, const Matrix & b, FlopCounter & counter) {
    if (a.cols != b.rows) {
        throw config_error("matmul dimension mismatch: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                           " * " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
    }
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; i++) {
        const float * arow = a.data.data() + i * a.cols;
        float * crow = c.data.data() + i * b.cols;
        for (std::size_t k = 0; k < a.cols; k++) {
            const float aik = arow[k];
            const float * brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; j++) {
                crow[j] += aik * brow[j];
            }
        }
    }
    counter.add(2ull * a.rows * a.cols * b.cols);
    return c;
}

inline constexpr float kRmsNormEps = 1e-5f;

// Row-wise RMS normalization followed by an elementwise gain.
inline Matrix rmsnorm(const Matrix & x, std::span<const float> gain) {
    if (gain.size() != x.cols) throw config_error("rmsnorm gain size does not match columns");
    Matrix out(x.rows, x.cols);
    for (std::size_t i = 0; i < x.rows; i++) {
        const float * src = x.data.data() + i * x.cols;
        float ss = 0.0f;
        for (std::size_t j = 0; j < x.cols; j++) ss += src[j] * src[j];
        const float scale = 1.0f / std::sqrt(ss / static_cast<float>(x.cols) + kRmsNormEps);
        float * dst = out.data.data() + i * x.cols;
        for (std::size_t j = 0; j < x.cols; j++) dst[j] = src[j] * scale * gain[j];
    }
    return out;
}

// Rotary embedding applied in-place to each head-sized chunk of each row.
// `positions` carries the absolute sequence index of each row, so applying
// this to a subset of rows matches the corresponding rows of a full-sequence
// application exactly.
inline void rope_apply(Matrix & m, const PositionSet & positions, float base, std::size_t head_dim) {
    if (head_dim == 0 || head_dim % 2 != 0) throw config_error("rope head dimension must be even and nonzero");
    if (m.cols % head_dim != 0) throw config_error("rope: columns not divisible by head dimension");
    if (positions.size() != m.rows) throw config_error("rope: one position per row required");

    const std::size_t pairs = head_dim / 2;
    std::vector<double> inv_freq(pairs);
    for (std::size_t j = 0; j < pairs; j++) {
        inv_freq[j] = std::pow(static_cast<double>(base), -2.0 * static_cast<double>(j) / static_cast<double>(head_dim));
    }
    for (std::size_t r = 0; r < m.rows; r++) {
        const double pos = static_cast<double>(positions[r]);
        float * row = m.data.data() + r * m.cols;
        for (std::size_t h = 0; h < m.cols; h += head_dim) {
            for (std::size_t j = 0; j < pairs; j++) {
                const double angle = pos * inv_freq[j];
                const float c = static_cast<float>(std::cos(angle));
                const float s = static_cast<float>(std::sin(angle));
                const float x0 = row[h + 2 * j];
                const float x1 = row[h + 2 * j + 1];
                row[h + 2 * j] = x0 * c - x1 * s;
                row[h + 2 * j + 1] = x0 * s + x1 * c;
            }
        }
    }
}

// Bidirectional multi-head scaled dot-product attention: queries cover only
// the active positions, keys/values cover the full cached sequence. Counted
// as 4*|S|*N*d FLOPs for the two attention matmuls (subject to the counter's
// attention-term switch).
inline Matrix attention(const Matrix & q, const Matrix & k, const Matrix & v, std::size_t num_heads,
                        FlopCounter & counter) {
    if (q.cols != k.cols || k.cols != v.cols || k.rows != v.rows) {
        throw config_error("attention: inconsistent q/k/v shapes");
    }
    if (num_heads == 0 || q.cols % num_heads != 0) throw config_error("attention: head count must divide hidden dim");
    if (k.rows < q.rows) throw config_error("attention: cached sequence shorter than active set");

    const std::size_t d = q.cols;
    const std::size_t head_dim = d / num_heads;
    const std::size_t n_keys = k.rows;
    const float scale = 1.0f / std::sqrt(static_cast<float>(head_dim));

    Matrix out(q.rows, d);
    std::vector<float> scores(n_keys);
    for (std::size_t h = 0; h < num_heads; h++) {
        const std::size_t off = h * head_dim;
        for (std::size_t i = 0; i < q.rows; i++) {
            const float * qrow = q.data.data() + i * d + off;
            float max_score = -std::numeric_limits<float>::infinity();
            for (std::size_t n = 0; n < n_keys; n++) {
                const float * krow = k.data.data() + n * d + off;
                float dot = 0.0f;
                for (std::size_t j = 0; j < head_dim; j++) dot += qrow[j] * krow[j];
                scores[n] = dot * scale;
                max_score = std::max(max_score, scores[n]);
            }
            float denom = 0.0f;
            for (std::size_t n = 0; n < n_keys; n++) {
                scores[n] = std::exp(scores[n] - max_score);
                denom += scores[n];
            }
            const float inv_denom = 1.0f / denom;
            float * orow = out.data.data() + i * d + off;
            for (std::size_t n = 0; n < n_keys; n++) {
                const float p = scores[n] * inv_denom;
                const float * vrow = v.data.data() + n * d + off;
                for (std::size_t j = 0; j < head_dim; j++) orow[j] += p * vrow[j];
            }
        }
    }
    if (counter.count_attention_term) {
        counter.add(4ull * q.rows * n_keys * d);
    }
    return out;
}

inline float silu(float x) {
    return x / (1.0f + std::exp(-x));
}

// SwiGLU feed-forward: down( silu(gate(x)) * up(x) ). 6*n*d*d_ff FLOPs via
// the three projections.
inline Matrix gated_ffn(const Matrix & x, const Matrix & w_gate, const Matrix & w_up, const Matrix & w_down,
                        FlopCounter & counter) {
    Matrix g = matmul(x, w_gate, counter);
    Matrix u = matmul(x, w_up, counter);
    for (std::size_t i = 0; i < g.data.size(); i++) g.data[i] = silu(g.data[i]) * u.data[i];
    return matmul(g, w_down, counter);
}

// Numerically stable in-place softmax over one logits row.
inline void softmax_inplace(std::span<float> row) {
    float max_v = -std::numeric_limits<float>::infinity();
    for (float v : row) max_v = std::max(max_v, v);
    float denom = 0.0f;
    for (float & v : row) {
        v = std::exp(v - max_v);
        denom += v;
    }
    const float inv = 1.0f / denom;
    for (float & v : row) v *= inv;
}

// Maximum softmax probability of a logits row, without materializing the
// whole distribution.
inline float max_softmax_prob(std::span<const float> row) {
    float max_v = -std::numeric_limits<float>::infinity();
    for (float v : row) max_v = std::max(max_v, v);
    float denom = 0.0f;
    for (float v : row) denom += std::exp(v - max_v);
    return 1.0f / denom;
}

// Argmax with ties broken by the lowest index.
inline std::size_t row_argmax(std::span<const float> row) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < row.size(); i++) {
        if (row[i] > row[best]) best = i;
    }
    return best;
}

}  // namespace esdllm

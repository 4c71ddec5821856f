#pragma once

// Toy bidirectional diffusion transformer: configuration, seeded weight
// initialization and binary serialization. The weights are random by design;
// everything downstream is validated through mechanism equivalence and FLOP
// accounting, not text quality.
//
// Weight file layout (little-endian):
//   magic "ESDL" | u32 version (=1)
//   u32 num_layers, hidden_dim, num_heads, ffn_dim, vocab_size,
//       mask_token_id, eos_token_id | f32 rope_base
//   f32 tensors, row-major, in order:
//     embedding [vocab x d]
//     per layer: attn_norm [d], wq [d x d], wk [d x d], wv [d x d],
//                wo [d x d], ffn_norm [d], w_gate [d x ffn], w_up [d x ffn],
//                w_down [ffn x d]
//     final_norm [d]
//     head [d x vocab]

#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "esdllm/tensor.hpp"

namespace esdllm {

struct ModelConfig {
    std::uint32_t num_layers = 32;
    std::uint32_t hidden_dim = 64;
    std::uint32_t num_heads = 4;
    std::uint32_t ffn_dim = 128;
    std::uint32_t vocab_size = 128;
    std::uint32_t mask_token_id = 126;
    std::uint32_t eos_token_id = 127;
    float rope_base = 10000.0f;

    std::uint32_t head_dim() const { return hidden_dim / num_heads; }

    void validate() const {
        if (num_layers == 0 || hidden_dim == 0 || num_heads == 0 || ffn_dim == 0 || vocab_size == 0) {
            throw config_error("model dimensions must be nonzero");
        }
        if (hidden_dim % num_heads != 0) throw config_error("hidden_dim must be divisible by num_heads");
        if (head_dim() % 2 != 0) throw config_error("head dimension must be even for rotary embeddings");
        if (mask_token_id >= vocab_size) throw config_error("mask_token_id out of vocabulary range");
        if (eos_token_id >= vocab_size) throw config_error("eos_token_id out of vocabulary range");
        if (mask_token_id == eos_token_id) throw config_error("mask and EOS tokens must differ");
        if (rope_base <= 1.0f) throw config_error("rope_base must be > 1");
    }
};

struct LayerWeights {
    std::vector<float> attn_norm;
    Matrix wq, wk, wv, wo;
    std::vector<float> ffn_norm;
    Matrix w_gate, w_up, w_down;
};

struct ModelWeights {
    ModelConfig config;
    Matrix embedding;  // [vocab x d]
    std::vector<LayerWeights> layers;
    std::vector<float> final_norm;
    Matrix head;  // [d x vocab]
};

inline std::uint64_t parameter_count(const ModelConfig & c) {
    const std::uint64_t d = c.hidden_dim;
    const std::uint64_t per_layer = 4 * d * d + 3 * d * c.ffn_dim + 2 * d;
    return static_cast<std::uint64_t>(c.vocab_size) * d * 2 + c.num_layers * per_layer + d;
}

namespace detail {

// Deterministic uniform in [0,1) built directly from mt19937_64 output, so
// weight initialization is identical across platforms and library versions.
inline float next_unit(std::mt19937_64 & rng) {
    return static_cast<float>(rng() >> 40) * 0x1.0p-24f;
}

inline void fill_scaled(std::vector<float> & data, std::size_t fan_in, std::mt19937_64 & rng) {
    const float scale = 1.0f / std::sqrt(static_cast<float>(fan_in));
    for (float & w : data) w = (2.0f * next_unit(rng) - 1.0f) * scale;
}

}  // namespace detail

inline ModelWeights init_toy_model(const ModelConfig & config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    const std::size_t d = config.hidden_dim;
    const std::size_t ffn = config.ffn_dim;

    ModelWeights w;
    w.config = config;
    w.embedding = Matrix(config.vocab_size, d);
    detail::fill_scaled(w.embedding.data, d, rng);

    w.layers.resize(config.num_layers);
    for (auto & layer : w.layers) {
        layer.attn_norm.assign(d, 1.0f);
        layer.wq = Matrix(d, d);
        layer.wk = Matrix(d, d);
        layer.wv = Matrix(d, d);
        layer.wo = Matrix(d, d);
        detail::fill_scaled(layer.wq.data, d, rng);
        detail::fill_scaled(layer.wk.data, d, rng);
        detail::fill_scaled(layer.wv.data, d, rng);
        detail::fill_scaled(layer.wo.data, d, rng);
        layer.ffn_norm.assign(d, 1.0f);
        layer.w_gate = Matrix(d, ffn);
        layer.w_up = Matrix(d, ffn);
        layer.w_down = Matrix(ffn, d);
        detail::fill_scaled(layer.w_gate.data, d, rng);
        detail::fill_scaled(layer.w_up.data, d, rng);
        detail::fill_scaled(layer.w_down.data, ffn, rng);
    }
    w.final_norm.assign(d, 1.0f);
    w.head = Matrix(d, config.vocab_size);
    detail::fill_scaled(w.head.data, d, rng);
    return w;
}

namespace detail {

inline constexpr char kWeightMagic[4] = {'E', 'S', 'D', 'L'};
inline constexpr std::uint32_t kWeightVersion = 1;

struct SectionWriter {
    std::ofstream out;

    explicit SectionWriter(const std::string & path) : out(path, std::ios::binary) {
        if (!out) throw format_error("cannot open '" + path + "' for writing");
    }
    void write_u32(std::uint32_t v) { out.write(reinterpret_cast<const char *>(&v), 4); }
    void write_f32(float v) { out.write(reinterpret_cast<const char *>(&v), 4); }
    void write_floats(const std::vector<float> & v) {
        out.write(reinterpret_cast<const char *>(v.data()), static_cast<std::streamsize>(v.size() * 4));
    }
};

struct SectionReader {
    std::ifstream in;
    std::string path;
    std::uint64_t offset = 0;

    explicit SectionReader(const std::string & p) : in(p, std::ios::binary), path(p) {
        if (!in) throw format_error("cannot open weight file '" + p + "'");
    }
    void read_bytes(void * dst, std::size_t n, const char * section) {
        in.read(reinterpret_cast<char *>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) {
            throw format_error("truncated weight file '" + path + "': missing " + section + " at byte offset " +
                               std::to_string(offset));
        }
        offset += n;
    }
    std::uint32_t read_u32(const char * section) {
        std::uint32_t v;
        read_bytes(&v, 4, section);
        return v;
    }
    float read_f32(const char * section) {
        float v;
        read_bytes(&v, 4, section);
        return v;
    }
    void read_floats(std::vector<float> & dst, const char * section) {
        read_bytes(dst.data(), dst.size() * 4, section);
    }
};

}  // namespace detail

inline void save_weights(const ModelWeights & w, const std::string & path) {
    detail::SectionWriter sw(path);
    sw.out.write(detail::kWeightMagic, 4);
    sw.write_u32(detail::kWeightVersion);
    sw.write_u32(w.config.num_layers);
    sw.write_u32(w.config.hidden_dim);
    sw.write_u32(w.config.num_heads);
    sw.write_u32(w.config.ffn_dim);
    sw.write_u32(w.config.vocab_size);
    sw.write_u32(w.config.mask_token_id);
    sw.write_u32(w.config.eos_token_id);
    sw.write_f32(w.config.rope_base);
    sw.write_floats(w.embedding.data);
    for (const auto & layer : w.layers) {
        sw.write_floats(layer.attn_norm);
        sw.write_floats(layer.wq.data);
        sw.write_floats(layer.wk.data);
        sw.write_floats(layer.wv.data);
        sw.write_floats(layer.wo.data);
        sw.write_floats(layer.ffn_norm);
        sw.write_floats(layer.w_gate.data);
        sw.write_floats(layer.w_up.data);
        sw.write_floats(layer.w_down.data);
    }
    sw.write_floats(w.final_norm);
    sw.write_floats(w.head.data);
    if (!sw.out) throw format_error("failed while writing '" + path + "'");
}

inline ModelWeights load_weights(const std::string & path) {
    detail::SectionReader sr(path);
    char magic[4];
    sr.read_bytes(magic, 4, "magic");
    if (std::memcmp(magic, detail::kWeightMagic, 4) != 0) {
        throw format_error("bad magic in '" + path + "': not a weight file");
    }
    const std::uint32_t version = sr.read_u32("version");
    if (version != detail::kWeightVersion) {
        throw format_error("unsupported weight file version " + std::to_string(version) + " in '" + path + "'");
    }
    ModelConfig c;
    c.num_layers = sr.read_u32("config.num_layers");
    c.hidden_dim = sr.read_u32("config.hidden_dim");
    c.num_heads = sr.read_u32("config.num_heads");
    c.ffn_dim = sr.read_u32("config.ffn_dim");
    c.vocab_size = sr.read_u32("config.vocab_size");
    c.mask_token_id = sr.read_u32("config.mask_token_id");
    c.eos_token_id = sr.read_u32("config.eos_token_id");
    c.rope_base = sr.read_f32("config.rope_base");
    try {
        c.validate();
    } catch (const config_error & e) {
        throw format_error("inconsistent config in '" + path + "': " + e.what());
    }

    const std::size_t d = c.hidden_dim;
    ModelWeights w;
    w.config = c;
    w.embedding = Matrix(c.vocab_size, d);
    sr.read_floats(w.embedding.data, "embedding");
    w.layers.resize(c.num_layers);
    for (std::uint32_t l = 0; l < c.num_layers; l++) {
        const std::string tag = "layer " + std::to_string(l);
        auto & layer = w.layers[l];
        layer.attn_norm.resize(d);
        sr.read_floats(layer.attn_norm, (tag + " attn_norm").c_str());
        layer.wq = Matrix(d, d);
        sr.read_floats(layer.wq.data, (tag + " wq").c_str());
        layer.wk = Matrix(d, d);
        sr.read_floats(layer.wk.data, (tag + " wk").c_str());
        layer.wv = Matrix(d, d);
        sr.read_floats(layer.wv.data, (tag + " wv").c_str());
        layer.wo = Matrix(d, d);
        sr.read_floats(layer.wo.data, (tag + " wo").c_str());
        layer.ffn_norm.resize(d);
        sr.read_floats(layer.ffn_norm, (tag + " ffn_norm").c_str());
        layer.w_gate = Matrix(d, c.ffn_dim);
        sr.read_floats(layer.w_gate.data, (tag + " w_gate").c_str());
        layer.w_up = Matrix(d, c.ffn_dim);
        sr.read_floats(layer.w_up.data, (tag + " w_up").c_str());
        layer.w_down = Matrix(c.ffn_dim, d);
        sr.read_floats(layer.w_down.data, (tag + " w_down").c_str());
    }
    w.final_norm.resize(d);
    sr.read_floats(w.final_norm, "final_norm");
    w.head = Matrix(d, c.vocab_size);
    sr.read_floats(w.head.data, "head");
    return w;
}

// Everything a full-sequence pass produces: logits for all positions plus the
// per-layer tensors needed to seed caches. Keys/values are post-rotary.
struct ForwardResult {
    Matrix logits;                // [n x vocab]
    std::vector<Matrix> hidden;   // per layer, [n x d] block output
    std::vector<Matrix> keys;     // per layer, [n x d]
    std::vector<Matrix> values;   // per layer, [n x d]
    std::vector<Matrix> queries;  // per layer, [n x d]
};

inline Matrix embed_tokens(const ModelWeights & w, const std::vector<std::uint32_t> & tokens) {
    Matrix x(tokens.size(), w.config.hidden_dim);
    for (std::size_t i = 0; i < tokens.size(); i++) {
        if (tokens[i] >= w.config.vocab_size) {
            throw input_error("token id " + std::to_string(tokens[i]) + " out of range at position " +
                              std::to_string(i));
        }
        std::copy_n(w.embedding.row(tokens[i]).data(), w.config.hidden_dim, x.row(i).data());
    }
    return x;
}

// Bidirectional forward over the whole sequence. The FLOP breakdown uses the
// layer index as scope and num_layers for the output head.
inline ForwardResult full_forward(const ModelWeights & w, const std::vector<std::uint32_t> & tokens,
                                  FlopCounter & counter) {
    const ModelConfig & c = w.config;
    PositionSet positions(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); i++) positions[i] = static_cast<std::uint32_t>(i);

    ForwardResult res;
    Matrix x = embed_tokens(w, tokens);
    for (std::uint32_t l = 0; l < c.num_layers; l++) {
        counter.scope = static_cast<int>(l);
        const LayerWeights & lw = w.layers[l];
        Matrix x_norm = rmsnorm(x, lw.attn_norm);
        Matrix q = matmul(x_norm, lw.wq, counter);
        Matrix k = matmul(x_norm, lw.wk, counter);
        Matrix v = matmul(x_norm, lw.wv, counter);
        rope_apply(q, positions, c.rope_base, c.head_dim());
        rope_apply(k, positions, c.rope_base, c.head_dim());
        Matrix attn = attention(q, k, v, c.num_heads, counter);
        Matrix attn_out = matmul(attn, lw.wo, counter);
        for (std::size_t i = 0; i < attn_out.data.size(); i++) attn_out.data[i] += x.data[i];
        Matrix h = gated_ffn(rmsnorm(attn_out, lw.ffn_norm), lw.w_gate, lw.w_up, lw.w_down, counter);
        for (std::size_t i = 0; i < h.data.size(); i++) h.data[i] += attn_out.data[i];
        res.queries.push_back(std::move(q));
        res.keys.push_back(std::move(k));
        res.values.push_back(std::move(v));
        res.hidden.push_back(h);
        x = std::move(h);
    }
    counter.scope = static_cast<int>(c.num_layers);
    res.logits = matmul(rmsnorm(x, w.final_norm), w.head, counter);
    return res;
}

}  // namespace esdllm

#include "asc/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "asc/errors.hpp"
#include "asc/rng.hpp"
#include "json.hpp"

namespace asc {

using nlohmann::json;

void ModelConfig::validate() const {
    std::vector<std::string> bad;
    if (n_layers < 1) bad.emplace_back("n_layers");
    if (n_heads < 1) bad.emplace_back("n_heads");
    if (d_model < 1) bad.emplace_back("d_model");
    if (d_ff < 1) bad.emplace_back("d_ff");
    if (vocab_size < 1) bad.emplace_back("vocab_size");
    if (max_seq_len < 2) bad.emplace_back("max_seq_len");
    if (!(layer_norm_eps > 0.0)) bad.emplace_back("layer_norm_eps");
    if (!bad.empty()) {
        std::string msg = "invalid model config:";
        for (const auto& f : bad) msg += " " + f;
        throw ConfigError(msg, bad);
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("invalid model config: d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                              std::to_string(n_heads) + ")",
                          {"d_model", "n_heads"});
    }
}

std::string ModelConfig::to_json() const {
    json j{{"n_layers", n_layers},       {"n_heads", n_heads},       {"d_model", d_model},
           {"d_ff", d_ff},               {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len},
           {"layer_norm_eps", layer_norm_eps}};
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    ModelConfig c;
    try {
        const json j = json::parse(text);
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.d_model = j.at("d_model").get<std::size_t>();
        c.d_ff = j.at("d_ff").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
        c.layer_norm_eps = j.value("layer_norm_eps", 1e-5);
    } catch (const json::exception& e) {
        throw LoadError(std::string("model config JSON: ") + e.what());
    }
    c.validate();
    return c;
}

TransformerWeights TransformerWeights::zeros(const ModelConfig& cfg) {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    TransformerWeights w;
    w.token_embedding = Matrix(cfg.vocab_size, d);
    w.positional_embedding = Matrix(cfg.max_seq_len, d);
    w.blocks.resize(cfg.n_layers);
    for (auto& b : w.blocks) {
        b.ln1_gain.assign(d, 0.0);
        b.ln1_bias.assign(d, 0.0);
        b.w_q = Matrix(d, d);
        b.w_k = Matrix(d, d);
        b.w_v = Matrix(d, d);
        b.w_o = Matrix(d, d);
        b.ln2_gain.assign(d, 0.0);
        b.ln2_bias.assign(d, 0.0);
        b.ffn_w1 = Matrix(d, cfg.d_ff);
        b.ffn_b1.assign(cfg.d_ff, 0.0);
        b.ffn_w2 = Matrix(cfg.d_ff, d);
        b.ffn_b2.assign(d, 0.0);
    }
    w.final_ln_gain.assign(d, 0.0);
    w.final_ln_bias.assign(d, 0.0);
    w.unembedding = Matrix(d, cfg.vocab_size);
    return w;
}

namespace {

void expect_shape(const Matrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows() != r || m.cols() != c)
        throw ShapeError(std::string("weights: ") + name + " is " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + ", expected " + std::to_string(r) + "x" + std::to_string(c));
}

void expect_len(const Vector& v, std::size_t n, const char* name) {
    if (v.size() != n)
        throw ShapeError(std::string("weights: ") + name + " has length " + std::to_string(v.size()) + ", expected " +
                         std::to_string(n));
}

}  // namespace

void TransformerWeights::validate(const ModelConfig& cfg) const {
    cfg.validate();
    const std::size_t d = cfg.d_model;
    expect_shape(token_embedding, cfg.vocab_size, d, "token_embedding");
    expect_shape(positional_embedding, cfg.max_seq_len, d, "positional_embedding");
    if (blocks.size() != cfg.n_layers)
        throw ShapeError("weights: " + std::to_string(blocks.size()) + " blocks, expected " +
                         std::to_string(cfg.n_layers));
    for (const auto& b : blocks) {
        expect_len(b.ln1_gain, d, "ln1_gain");
        expect_len(b.ln1_bias, d, "ln1_bias");
        expect_shape(b.w_q, d, d, "W_Q");
        expect_shape(b.w_k, d, d, "W_K");
        expect_shape(b.w_v, d, d, "W_V");
        expect_shape(b.w_o, d, d, "W_O");
        expect_len(b.ln2_gain, d, "ln2_gain");
        expect_len(b.ln2_bias, d, "ln2_bias");
        expect_shape(b.ffn_w1, d, cfg.d_ff, "ffn_W1");
        expect_len(b.ffn_b1, cfg.d_ff, "ffn_b1");
        expect_shape(b.ffn_w2, cfg.d_ff, d, "ffn_W2");
        expect_len(b.ffn_b2, d, "ffn_b2");
    }
    expect_len(final_ln_gain, d, "final_ln_gain");
    expect_len(final_ln_bias, d, "final_ln_bias");
    expect_shape(unembedding, d, cfg.vocab_size, "unembedding");
    bool finite = true;
    for_each_tensor([&](std::span<const double> t) { finite = finite && all_finite(t); });
    if (!finite) throw InputError("weights: non-finite entries");
}

std::size_t TransformerWeights::parameter_count() const {
    std::size_t n = 0;
    for_each_tensor([&](std::span<const double> t) { n += t.size(); });
    return n;
}

bool operator==(const TransformerWeights& a, const TransformerWeights& b) {
    std::vector<std::span<const double>> ta, tb;
    a.for_each_tensor([&](std::span<const double> t) { ta.push_back(t); });
    b.for_each_tensor([&](std::span<const double> t) { tb.push_back(t); });
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i)
        if (!std::equal(ta[i].begin(), ta[i].end(), tb[i].begin(), tb[i].end())) return false;
    return true;
}

TransformerWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
    TransformerWeights w = TransformerWeights::zeros(cfg);
    Rng rng(derive_seed(seed, "init_weights"));
    constexpr double kStd = 0.02;
    const double resid_std = kStd / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    auto gaussian = [&](Matrix& m, double std) {
        for (double& x : m.storage()) x = std * rng.normal();
    };
    gaussian(w.token_embedding, kStd);
    gaussian(w.positional_embedding, kStd);
    for (auto& b : w.blocks) {
        std::fill(b.ln1_gain.begin(), b.ln1_gain.end(), 1.0);
        gaussian(b.w_q, kStd);
        gaussian(b.w_k, kStd);
        gaussian(b.w_v, kStd);
        gaussian(b.w_o, resid_std);
        std::fill(b.ln2_gain.begin(), b.ln2_gain.end(), 1.0);
        gaussian(b.ffn_w1, kStd);
        gaussian(b.ffn_w2, resid_std);
    }
    std::fill(w.final_ln_gain.begin(), w.final_ln_gain.end(), 1.0);
    gaussian(w.unembedding, kStd);
    return w;
}

void InterventionSpec::validate(std::size_t n_layers) const {
    for (std::size_t l : short_circuited_layers)
        if (l >= n_layers)
            throw PlanError("intervention layer " + std::to_string(l) + " out of range for " +
                            std::to_string(n_layers) + "-layer model");
}

std::string InterventionSpec::label() const {
    if (short_circuited_layers.empty()) return "none";
    std::string s;
    for (std::size_t l : short_circuited_layers) {
        if (!s.empty()) s += ',';
        s += std::to_string(l);
    }
    return s;
}

void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens) {
    if (tokens.empty()) throw InputError("token sequence is empty");
    if (tokens.size() > cfg.max_seq_len)
        throw InputError("sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                         std::to_string(cfg.max_seq_len));
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] >= cfg.vocab_size)
            throw InputError("token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                             " is outside the vocabulary of " + std::to_string(cfg.vocab_size));
}

Matrix causal_attention_weights(const Matrix& q, const Matrix& k) {
    if (q.rows() != k.rows() || q.cols() != k.cols()) throw ShapeError("attention: Q and K shapes differ");
    const std::size_t n = q.rows();
    const double scale_ = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix a(n, n);
    Vector scores;
    for (std::size_t i = 0; i < n; ++i) {
        scores.assign(i + 1, 0.0);
        for (std::size_t j = 0; j <= i; ++j) scores[j] = dot(q.row(i), k.row(j)) * scale_;
        const Vector p = softmax(scores);
        std::copy(p.begin(), p.end(), a.row(i).begin());
    }
    return a;
}

Matrix short_circuit_attention(const Matrix& values) { return values; }

BlockOutput block_forward(const BlockWeights& b, const ModelConfig& cfg, const Matrix& x, bool short_circuit,
                          BlockOptions opts) {
    const std::size_t n = x.rows();
    const std::size_t dh = cfg.d_head();
    const Matrix h = opts.layer_norm ? layer_norm_rows(x, b.ln1_gain, b.ln1_bias, cfg.layer_norm_eps) : x;

    BlockOutput out;
    const Matrix v = matmul(h, b.w_v);
    Matrix concat(n, cfg.d_model);
    if (short_circuit) {
        // Q and K are dead computation under identity attention.
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            concat.set_col_block(head * dh, short_circuit_attention(v.col_block(head * dh, dh)));
            if (opts.keep_attention) out.attention.push_back(Matrix::identity(n));
        }
    } else {
        const Matrix q = matmul(h, b.w_q);
        const Matrix k = matmul(h, b.w_k);
        for (std::size_t head = 0; head < cfg.n_heads; ++head) {
            Matrix a = causal_attention_weights(q.col_block(head * dh, dh), k.col_block(head * dh, dh));
            concat.set_col_block(head * dh, matmul(a, v.col_block(head * dh, dh)));
            if (opts.keep_attention) out.attention.push_back(std::move(a));
        }
    }
    out.post_attention = add(x, matmul(concat, b.w_o));

    const Matrix h2 = opts.layer_norm
                          ? layer_norm_rows(out.post_attention, b.ln2_gain, b.ln2_bias, cfg.layer_norm_eps)
                          : out.post_attention;
    Matrix u = matmul(h2, b.ffn_w1);
    for (std::size_t r = 0; r < n; ++r) {
        auto row = u.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += b.ffn_b1[c];
    }
    gelu_inplace(u.storage());
    Matrix f = matmul(u, b.ffn_w2);
    out.post_ffn = out.post_attention;
    for (std::size_t r = 0; r < n; ++r) {
        auto dst = out.post_ffn.row(r);
        const auto src = f.row(r);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c] + b.ffn_b2[c];
    }
    return out;
}

namespace {

Matrix embed(const TransformerWeights& w, std::span<const TokenId> tokens) {
    const std::size_t d = w.token_embedding.cols();
    Matrix x(tokens.size(), d);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        auto dst = x.row(i);
        const auto te = w.token_embedding.row(tokens[i]);
        const auto pe = w.positional_embedding.row(i);
        for (std::size_t c = 0; c < d; ++c) dst[c] = te[c] + pe[c];
    }
    return x;
}

Vector last_row(const Matrix& m) {
    const auto r = m.row(m.rows() - 1);
    return {r.begin(), r.end()};
}

// Runs every block, reporting each block output through `on_block`; returns the final residual.
template <typename OnBlock>
Matrix run_blocks(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> tokens,
                  const InterventionSpec& spec, bool keep_attention, OnBlock&& on_block) {
    check_tokens(cfg, tokens);
    spec.validate(cfg.n_layers);
    Matrix x = embed(w, tokens);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        BlockOutput o = block_forward(w.blocks[l], cfg, x, spec.contains(l), {.layer_norm = true, .keep_attention = keep_attention});
        x = o.post_ffn;
        on_block(std::move(o));
    }
    return x;
}

}  // namespace

ForwardTrace forward(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> tokens,
                     const InterventionSpec& spec, TraceLevel level) {
    ForwardTrace trace;
    const bool full = level == TraceLevel::full;
    Matrix x = run_blocks(w, cfg, tokens, spec, full, [&](BlockOutput&& o) {
        if (level == TraceLevel::logits_only) return;
        trace.post_attention_last.push_back(last_row(o.post_attention));
        trace.post_ffn_last.push_back(last_row(o.post_ffn));
        if (full) {
            trace.post_attention.push_back(std::move(o.post_attention));
            trace.post_ffn.push_back(std::move(o.post_ffn));
            trace.attention.push_back(std::move(o.attention));
        }
    });
    trace.logits = matmul(layer_norm_rows(x, w.final_ln_gain, w.final_ln_bias, cfg.layer_norm_eps), w.unembedding);
    return trace;
}

Vector last_logits(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> tokens,
                   const InterventionSpec& spec) {
    Matrix x = run_blocks(w, cfg, tokens, spec, false, [](BlockOutput&&) {});
    const Vector h = layer_norm(x.row(x.rows() - 1), w.final_ln_gain, w.final_ln_bias, cfg.layer_norm_eps);
    Matrix hm(1, h.size(), h);
    return matmul(hm, w.unembedding).storage();
}

TokenId argmax_token(std::span<const double> logits) {
    if (logits.empty()) throw InputError("argmax of empty logits");
    // max_element returns the first maximum, i.e. the lowest token id on ties.
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

namespace {

void check_capacity(const ModelConfig& cfg, std::span<const TokenId> prefix, std::size_t n_new) {
    if (prefix.empty()) throw InputError("generation prefix is empty");
    if (prefix.size() + n_new > cfg.max_seq_len)
        throw InputError("prefix length " + std::to_string(prefix.size()) + " + " + std::to_string(n_new) +
                         " new tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
}

}  // namespace

Tokens greedy_generate(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> prefix,
                       std::size_t n_new, const InterventionSpec& spec) {
    check_capacity(cfg, prefix, n_new);
    check_tokens(cfg, prefix);
    Tokens seq(prefix.begin(), prefix.end());
    Tokens out;
    out.reserve(n_new);
    for (std::size_t i = 0; i < n_new; ++i) {
        const TokenId next = argmax_token(last_logits(w, cfg, seq, spec));
        seq.push_back(next);
        out.push_back(next);
    }
    return out;
}

Tokens sample_generate(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> prefix,
                       std::size_t n_new, const InterventionSpec& spec, double temperature, std::uint64_t rng_seed) {
    if (!(temperature > 0.0) || !std::isfinite(temperature))
        throw InputError("temperature must be positive, got " + std::to_string(temperature));
    check_capacity(cfg, prefix, n_new);
    check_tokens(cfg, prefix);
    Rng rng(rng_seed);
    Tokens seq(prefix.begin(), prefix.end());
    Tokens out;
    out.reserve(n_new);
    for (std::size_t i = 0; i < n_new; ++i) {
        Vector logits = last_logits(w, cfg, seq, spec);
        for (double& z : logits) z /= temperature;
        const Vector p = softmax(logits);
        const auto next = static_cast<TokenId>(rng.categorical(p));
        seq.push_back(next);
        out.push_back(next);
    }
    return out;
}

}  // namespace asc

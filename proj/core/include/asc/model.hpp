#pragma once

// Decoder-only pre-LN transformer with per-block attention short-circuiting.
//
// Row-vector convention throughout: a sequence is an n x d_model matrix, and
// projections are right-multiplications (Q = X W_Q). Head i owns the contiguous
// column group [i * d_head, (i + 1) * d_head) of W_Q, W_K and W_V.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "asc/tensor.hpp"

namespace asc {

using TokenId = std::uint32_t;
using Tokens = std::vector<TokenId>;

struct ModelConfig {
    std::size_t n_layers = 8;
    std::size_t n_heads = 4;
    std::size_t d_model = 128;
    std::size_t d_ff = 512;
    std::size_t vocab_size = 512;
    std::size_t max_seq_len = 64;
    double layer_norm_eps = 1e-5;

    std::size_t d_head() const noexcept { return n_heads == 0 ? 0 : d_model / n_heads; }

    // Throws ConfigError naming the offending fields.
    void validate() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct BlockWeights {
    Vector ln1_gain, ln1_bias;
    Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
    Vector ln2_gain, ln2_bias;
    Matrix ffn_w1;  // d_model x d_ff
    Vector ffn_b1;
    Matrix ffn_w2;  // d_ff x d_model
    Vector ffn_b2;

    // Visits every tensor in checkpoint order.
    template <typename Self, typename F>
    static void visit(Self& self, F&& f) {
        f(span_of(self.ln1_gain));
        f(span_of(self.ln1_bias));
        f(span_of(self.w_q.storage()));
        f(span_of(self.w_k.storage()));
        f(span_of(self.w_v.storage()));
        f(span_of(self.w_o.storage()));
        f(span_of(self.ln2_gain));
        f(span_of(self.ln2_bias));
        f(span_of(self.ffn_w1.storage()));
        f(span_of(self.ffn_b1));
        f(span_of(self.ffn_w2.storage()));
        f(span_of(self.ffn_b2));
    }

    template <typename V>
    static auto span_of(V& v) {
        return std::span(v.data(), v.size());
    }
};

struct TransformerWeights {
    Matrix token_embedding;       // vocab x d_model
    Matrix positional_embedding;  // max_seq_len x d_model
    std::vector<BlockWeights> blocks;
    Vector final_ln_gain, final_ln_bias;
    Matrix unembedding;  // d_model x vocab

    // All-zero weights with the shapes implied by cfg.
    static TransformerWeights zeros(const ModelConfig& cfg);

    // Throws ShapeError on any inconsistency with cfg or InputError on non-finite entries.
    void validate(const ModelConfig& cfg) const;

    std::size_t parameter_count() const;

    // Calls f(std::span<double>) / f(std::span<const double>) for every tensor in canonical order:
    // token_embedding, positional_embedding, per block (ln1 gain/bias, W_Q, W_K, W_V, W_O,
    // ln2 gain/bias, ffn_W1, ffn_b1, ffn_W2, ffn_b2), final ln gain/bias, unembedding.
    template <typename F>
    void for_each_tensor(F&& f) {
        visit_all(*this, f);
    }
    template <typename F>
    void for_each_tensor(F&& f) const {
        visit_all(*this, f);
    }

    friend bool operator==(const TransformerWeights&, const TransformerWeights&);

private:
    template <typename Self, typename F>
    static void visit_all(Self& self, F& f) {
        f(BlockWeights::span_of(self.token_embedding.storage()));
        f(BlockWeights::span_of(self.positional_embedding.storage()));
        for (auto& b : self.blocks) BlockWeights::visit(b, f);
        f(BlockWeights::span_of(self.final_ln_gain));
        f(BlockWeights::span_of(self.final_ln_bias));
        f(BlockWeights::span_of(self.unembedding.storage()));
    }
};

// Gaussian init (std 0.02, residual output projections scaled by 1/sqrt(2L)), unit LN gains.
TransformerWeights init_weights(const ModelConfig& cfg, std::uint64_t seed);

// Blocks whose attention weights are replaced by the identity in every head.
struct InterventionSpec {
    std::set<std::size_t> short_circuited_layers;

    static InterventionSpec vanilla() { return {}; }
    static InterventionSpec single(std::size_t layer) { return {{layer}}; }

    bool is_vanilla() const noexcept { return short_circuited_layers.empty(); }
    bool contains(std::size_t layer) const { return short_circuited_layers.contains(layer); }
    // Throws PlanError when an index is >= n_layers.
    void validate(std::size_t n_layers) const;
    // "none" or a comma-separated ascending list, e.g. "6,7".
    std::string label() const;
    std::vector<std::size_t> layers() const { return {short_circuited_layers.begin(), short_circuited_layers.end()}; }

    friend bool operator==(const InterventionSpec&, const InterventionSpec&) = default;
    friend auto operator<=>(const InterventionSpec&, const InterventionSpec&) = default;
};

enum class TraceLevel { logits_only, last_token, full };

struct ForwardTrace {
    Matrix logits;  // seq_len x vocab
    // Last-token rows of X' (after attention residual) and X'' (after FFN residual), one per block.
    std::vector<Vector> post_attention_last;
    std::vector<Vector> post_ffn_last;
    // Populated for TraceLevel::full only.
    std::vector<Matrix> post_attention;
    std::vector<Matrix> post_ffn;
    // [block][head] -> seq_len x seq_len weights; identity for short-circuited blocks. Full only.
    std::vector<std::vector<Matrix>> attention;
};

struct BlockOptions {
    bool layer_norm = true;
    bool keep_attention = false;
};

struct BlockOutput {
    Matrix post_attention;  // X' = X + MHA(LN1(X))
    Matrix post_ffn;        // X'' = X' + FFN(LN2(X'))
    std::vector<Matrix> attention;
};

// One transformer block over an n x d_model residual stream. With layer_norm = false the two
// layer norms are skipped (used to compare against the bare block of the bound checker).
BlockOutput block_forward(const BlockWeights& block, const ModelConfig& cfg, const Matrix& x, bool short_circuit,
                          BlockOptions opts = {});

// Causal softmax(Q Kᵀ / sqrt(d_k)) for one head; strictly-future entries are exactly 0.
Matrix causal_attention_weights(const Matrix& q, const Matrix& k);

// The identity-attention head output: I · V.
Matrix short_circuit_attention(const Matrix& values);

ForwardTrace forward(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> tokens,
                     const InterventionSpec& spec, TraceLevel level = TraceLevel::logits_only);

// Logits of the final position only.
Vector last_logits(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> tokens,
                   const InterventionSpec& spec);

// Lowest index among the maxima.
TokenId argmax_token(std::span<const double> logits);

Tokens greedy_generate(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> prefix,
                       std::size_t n_new, const InterventionSpec& spec);

Tokens sample_generate(const TransformerWeights& w, const ModelConfig& cfg, std::span<const TokenId> prefix,
                       std::size_t n_new, const InterventionSpec& spec, double temperature, std::uint64_t rng_seed);

// Throws InputError for empty/overlong sequences or out-of-vocab ids.
void check_tokens(const ModelConfig& cfg, std::span<const TokenId> tokens);

}  // namespace asc

#include "asc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "asc/errors.hpp"
#include "asc/rng.hpp"

namespace asc {

void TrainConfig::validate(const ModelConfig& cfg) const {
    std::vector<std::string> bad;
    if (!(learning_rate > 0.0)) bad.emplace_back("learning_rate");
    if (!(beta1 > 0.0 && beta1 < 1.0)) bad.emplace_back("beta1");
    if (!(beta2 > 0.0 && beta2 < 1.0)) bad.emplace_back("beta2");
    if (!(adam_eps > 0.0)) bad.emplace_back("adam_eps");
    if (batch_size < 1) bad.emplace_back("batch_size");
    if (seq_len < 1 || seq_len > cfg.max_seq_len) bad.emplace_back("seq_len");
    if (!(grad_clip_norm > 0.0)) bad.emplace_back("grad_clip_norm");
    if (!bad.empty()) {
        std::string msg = "invalid train config:";
        for (const auto& f : bad) msg += " " + f;
        throw ConfigError(msg, bad);
    }
}

namespace {

struct LayerNormCache {
    Matrix xhat;
    Vector rstd;
};

Matrix layer_norm_forward(const Matrix& x, const Vector& gain, const Vector& bias, double eps, LayerNormCache& cache) {
    const std::size_t n = x.rows(), d = x.cols();
    Matrix out(n, d);
    cache.xhat = Matrix(n, d);
    cache.rstd.assign(n, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        const auto row = x.row(r);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= static_cast<double>(d);
        const double rstd = 1.0 / std::sqrt(var + eps);
        cache.rstd[r] = rstd;
        auto xh = cache.xhat.row(r);
        auto o = out.row(r);
        for (std::size_t c = 0; c < d; ++c) {
            xh[c] = (row[c] - mean) * rstd;
            o[c] = xh[c] * gain[c] + bias[c];
        }
    }
    return out;
}

// dx += LN'(dy); dgain/dbias accumulate.
void layer_norm_backward(const Matrix& dy, const LayerNormCache& cache, const Vector& gain, Matrix& dx, Vector& dgain,
                         Vector& dbias) {
    const std::size_t n = dy.rows(), d = dy.cols();
    Vector dxhat(d);
    for (std::size_t r = 0; r < n; ++r) {
        const auto g = dy.row(r);
        const auto xh = cache.xhat.row(r);
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            dgain[c] += g[c] * xh[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        auto out = dx.row(r);
        const double rstd = cache.rstd[r];
        for (std::size_t c = 0; c < d; ++c) out[c] += rstd * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
    }
}

constexpr double kGeluC = 0.7978845608028654;
constexpr double kGeluA = 0.044715;

struct BlockCache {
    LayerNormCache ln1, ln2;
    Matrix h1, q, k, v;
    std::vector<Matrix> attn;  // [window * n_heads + head], T x T
    Matrix concat;
    Matrix h2, u, tanh_u, g;
};

Matrix slice(const Matrix& m, std::size_t r0, std::size_t rows, std::size_t c0, std::size_t cols) {
    Matrix out(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = m.data() + (r0 + r) * m.cols() + c0;
        std::copy(src, src + cols, out.row(r).begin());
    }
    return out;
}

void put_slice(Matrix& m, std::size_t r0, std::size_t c0, const Matrix& block) {
    for (std::size_t r = 0; r < block.rows(); ++r) {
        const auto src = block.row(r);
        std::copy(src.begin(), src.end(), m.row(r0 + r).begin() + static_cast<std::ptrdiff_t>(c0));
    }
}

struct Batch {
    std::size_t windows = 0;
    std::size_t len = 0;  // predicted positions per window
};

void check_windows(const ModelConfig& cfg, std::span<const Tokens> windows) {
    if (windows.empty()) throw InputError("loss: no windows");
    const std::size_t n = windows.front().size();
    if (n < 2) throw InputError("loss: windows need at least 2 tokens");
    for (const auto& wdw : windows) {
        if (wdw.size() != n) throw InputError("loss: windows must share one length");
        check_tokens(cfg, std::span<const TokenId>(wdw).first(n - 1));
        for (TokenId t : wdw)
            if (t >= cfg.vocab_size) throw InputError("loss: token id outside the vocabulary");
    }
}

}  // namespace

double loss_and_grad(const TransformerWeights& w, const ModelConfig& cfg, std::span<const Tokens> windows,
                     TransformerWeights* grad) {
    check_windows(cfg, windows);
    const Batch batch{windows.size(), windows.front().size() - 1};
    const std::size_t T = batch.len;
    const std::size_t N = batch.windows * T;
    const std::size_t d = cfg.d_model, H = cfg.n_heads, dh = cfg.d_head();
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix x(N, d);
    for (std::size_t b = 0; b < batch.windows; ++b)
        for (std::size_t t = 0; t < T; ++t) {
            auto dst = x.row(b * T + t);
            const auto te = w.token_embedding.row(windows[b][t]);
            const auto pe = w.positional_embedding.row(t);
            for (std::size_t c = 0; c < d; ++c) dst[c] = te[c] + pe[c];
        }

    std::vector<BlockCache> caches(cfg.n_layers);
    Vector scores;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const BlockWeights& bw = w.blocks[l];
        BlockCache& c = caches[l];
        c.h1 = layer_norm_forward(x, bw.ln1_gain, bw.ln1_bias, cfg.layer_norm_eps, c.ln1);
        c.q = matmul(c.h1, bw.w_q);
        c.k = matmul(c.h1, bw.w_k);
        c.v = matmul(c.h1, bw.w_v);
        c.concat = Matrix(N, d);
        c.attn.assign(batch.windows * H, Matrix());
        for (std::size_t b = 0; b < batch.windows; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                const std::size_t r0 = b * T, off = h * dh;
                Matrix a = matmul_nt(slice(c.q, r0, T, off, dh), slice(c.k, r0, T, off, dh));
                for (std::size_t i = 0; i < T; ++i) {
                    auto arow = a.row(i);
                    double mx = -std::numeric_limits<double>::infinity();
                    for (std::size_t j = 0; j <= i; ++j) {
                        arow[j] *= att_scale;
                        mx = std::max(mx, arow[j]);
                    }
                    double sum = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        arow[j] = std::exp(arow[j] - mx);
                        sum += arow[j];
                    }
                    for (std::size_t j = 0; j <= i; ++j) arow[j] /= sum;
                    for (std::size_t j = i + 1; j < T; ++j) arow[j] = 0.0;
                }
                put_slice(c.concat, r0, off, matmul(a, slice(c.v, r0, T, off, dh)));
                c.attn[b * H + h] = std::move(a);
            }
        }
        add_matmul(x, c.concat, bw.w_o);

        c.h2 = layer_norm_forward(x, bw.ln2_gain, bw.ln2_bias, cfg.layer_norm_eps, c.ln2);
        c.u = matmul(c.h2, bw.ffn_w1);
        for (std::size_t r = 0; r < N; ++r) {
            auto u = c.u.row(r);
            for (std::size_t j = 0; j < cfg.d_ff; ++j) u[j] += bw.ffn_b1[j];
        }
        c.tanh_u = Matrix(N, cfg.d_ff);
        c.g = c.u;
        gelu_inplace(c.g.storage(), c.tanh_u.storage());
        add_matmul(x, c.g, bw.ffn_w2);
        for (std::size_t r = 0; r < N; ++r) {
            auto row = x.row(r);
            for (std::size_t j = 0; j < d; ++j) row[j] += bw.ffn_b2[j];
        }
    }

    LayerNormCache lnf;
    const Matrix hf = layer_norm_forward(x, w.final_ln_gain, w.final_ln_bias, cfg.layer_norm_eps, lnf);
    Matrix logits = matmul(hf, w.unembedding);

    // Softmax in place; logits becomes dL/dlogits when a gradient is requested.
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(N);
    for (std::size_t b = 0; b < batch.windows; ++b)
        for (std::size_t t = 0; t < T; ++t) {
            auto row = logits.row(b * T + t);
            const TokenId target = windows[b][t + 1];
            const double mx = *std::max_element(row.begin(), row.end());
            double sum = 0.0;
            for (double z : row) sum += std::exp(z - mx);
            const double lse = mx + std::log(sum);
            loss -= row[target] - lse;
            if (grad) {
                for (double& z : row) z = std::exp(z - lse) * inv_n;
                row[target] -= inv_n;
            }
        }
    loss *= inv_n;
    if (!grad) return loss;

    TransformerWeights& gw = *grad;
    gw = TransformerWeights::zeros(cfg);
    const Matrix& dlogits = logits;
    add_matmul_tn(gw.unembedding, hf, dlogits);
    const Matrix dhf = matmul_nt(dlogits, w.unembedding);
    Matrix dx(N, d);
    layer_norm_backward(dhf, lnf, w.final_ln_gain, dx, gw.final_ln_gain, gw.final_ln_bias);

    for (std::size_t l = cfg.n_layers; l-- > 0;) {
        const BlockWeights& bw = w.blocks[l];
        BlockWeights& gb = gw.blocks[l];
        BlockCache& c = caches[l];

        // FFN branch: x += gelu(h2 W1 + b1) W2 + b2
        for (std::size_t r = 0; r < N; ++r) {
            const auto row = dx.row(r);
            for (std::size_t j = 0; j < d; ++j) gb.ffn_b2[j] += row[j];
        }
        add_matmul_tn(gb.ffn_w2, c.g, dx);
        Matrix du = matmul_nt(dx, bw.ffn_w2);
        for (std::size_t r = 0; r < N; ++r) {
            auto g = du.row(r);
            const auto u = c.u.row(r);
            const auto th = c.tanh_u.row(r);
            for (std::size_t j = 0; j < cfg.d_ff; ++j) {
                const double z = u[j], t = th[j];
                g[j] *= 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * z * z);
                gb.ffn_b1[j] += g[j];
            }
        }
        add_matmul_tn(gb.ffn_w1, c.h2, du);
        const Matrix dh2 = matmul_nt(du, bw.ffn_w1);
        layer_norm_backward(dh2, c.ln2, bw.ln2_gain, dx, gb.ln2_gain, gb.ln2_bias);

        // Attention branch: x += concat W_O
        add_matmul_tn(gb.w_o, c.concat, dx);
        const Matrix dconcat = matmul_nt(dx, bw.w_o);
        Matrix dq(N, d), dk(N, d), dv(N, d);
        for (std::size_t b = 0; b < batch.windows; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                const Matrix& a = c.attn[b * H + h];
                const std::size_t r0 = b * T, off = h * dh;
                const Matrix dout = slice(dconcat, r0, T, off, dh);
                put_slice(dv, r0, off, matmul_tn(a, dout));
                // Softmax backward: dS = A * (dA - rowsum(dA * A)), then the 1/sqrt(d_k) scale.
                Matrix ds = matmul_nt(dout, slice(c.v, r0, T, off, dh));
                for (std::size_t i = 0; i < T; ++i) {
                    auto drow = ds.row(i);
                    const auto arow = a.row(i);
                    double dot_ada = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) dot_ada += drow[j] * arow[j];
                    for (std::size_t j = 0; j <= i; ++j) drow[j] = arow[j] * (drow[j] - dot_ada) * att_scale;
                    for (std::size_t j = i + 1; j < T; ++j) drow[j] = 0.0;
                }
                put_slice(dq, r0, off, matmul(ds, slice(c.k, r0, T, off, dh)));
                put_slice(dk, r0, off, matmul_tn(ds, slice(c.q, r0, T, off, dh)));
            }
        }
        add_matmul_tn(gb.w_q, c.h1, dq);
        add_matmul_tn(gb.w_k, c.h1, dk);
        add_matmul_tn(gb.w_v, c.h1, dv);
        Matrix dh1 = matmul_nt(dq, bw.w_q);
        add_matmul(dh1, dk, bw.w_k.transpose());
        add_matmul(dh1, dv, bw.w_v.transpose());
        layer_norm_backward(dh1, c.ln1, bw.ln1_gain, dx, gb.ln1_gain, gb.ln1_bias);
    }

    for (std::size_t b = 0; b < batch.windows; ++b)
        for (std::size_t t = 0; t < T; ++t) {
            const auto row = dx.row(b * T + t);
            auto te = gw.token_embedding.row(windows[b][t]);
            auto pe = gw.positional_embedding.row(t);
            for (std::size_t c = 0; c < d; ++c) {
                te[c] += row[c];
                pe[c] += row[c];
            }
        }
    return loss;
}

double reference_loss(const TransformerWeights& w, const ModelConfig& cfg, std::span<const Tokens> windows) {
    check_windows(cfg, windows);
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& wdw : windows) {
        const std::span<const TokenId> inputs(wdw.data(), wdw.size() - 1);
        const ForwardTrace tr = forward(w, cfg, inputs, InterventionSpec::vanilla());
        for (std::size_t t = 0; t < inputs.size(); ++t) {
            const Vector p = softmax(tr.logits.row(t));
            total -= std::log(p[wdw[t + 1]]);
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

namespace {

struct AdamState {
    std::vector<double> m, v;
    std::size_t t = 0;
};

std::vector<std::span<double>> spans_of(TransformerWeights& w) {
    std::vector<std::span<double>> out;
    w.for_each_tensor([&](std::span<double> s) { out.push_back(s); });
    return out;
}

double global_norm(TransformerWeights& g) {
    double s = 0.0;
    g.for_each_tensor([&](std::span<const double> t) {
        for (double v : t) s += v * v;
    });
    return std::sqrt(s);
}

void adam_update(TransformerWeights& w, TransformerWeights& g, AdamState& st, const TrainConfig& tc, double lr) {
    const auto ws = spans_of(w);
    const auto gs = spans_of(g);
    ++st.t;
    const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(st.t));
    std::size_t k = 0;
    for (std::size_t i = 0; i < ws.size(); ++i) {
        for (std::size_t j = 0; j < ws[i].size(); ++j, ++k) {
            const double gr = gs[i][j];
            st.m[k] = tc.beta1 * st.m[k] + (1.0 - tc.beta1) * gr;
            st.v[k] = tc.beta2 * st.v[k] + (1.0 - tc.beta2) * gr * gr;
            const double mhat = st.m[k] / bc1;
            const double vhat = st.v[k] / bc2;
            ws[i][j] -= lr * mhat / (std::sqrt(vhat) + tc.adam_eps);
        }
    }
}

std::vector<Tokens> canary_windows(const Corpus& corpus, const ModelConfig& cfg, std::size_t n) {
    std::vector<Tokens> out;
    for (const auto& c : corpus.canaries) {
        if (out.size() >= n) break;
        Tokens j = c.joined();
        if (j.size() - 1 > cfg.max_seq_len) j.resize(cfg.max_seq_len + 1);
        out.push_back(std::move(j));
    }
    return out;
}

std::vector<Tokens> heldout_windows(const Corpus& corpus, std::size_t len, std::size_t n) {
    std::vector<Tokens> out;
    if (corpus.heldout.size() < len + 1 || n == 0) return out;
    const std::size_t span = corpus.heldout.size() - len - 1;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t start = n == 1 ? 0 : span * i / (n - 1);
        out.emplace_back(corpus.heldout.begin() + static_cast<std::ptrdiff_t>(start),
                         corpus.heldout.begin() + static_cast<std::ptrdiff_t>(start + len + 1));
    }
    return out;
}

}  // namespace

TransformerWeights initial_weights(const ModelConfig& cfg, const TrainConfig& tcfg) {
    return init_weights(cfg, derive_seed(tcfg.rng_seed, "init"));
}

TrainResult train(const ModelConfig& cfg, const TrainConfig& tcfg, const Corpus& corpus, const TrainProgress& progress) {
    return train_from(cfg, tcfg, corpus, initial_weights(cfg, tcfg), progress);
}

TrainResult train_from(const ModelConfig& cfg, const TrainConfig& tcfg, const Corpus& corpus, TransformerWeights start,
                       const TrainProgress& progress) {
    cfg.validate();
    tcfg.validate(cfg);
    start.validate(cfg);
    TrainResult result;
    result.weights = std::move(start);
    if (tcfg.steps == 0) return result;
    if (corpus.stream.size() < tcfg.seq_len + 1)
        throw InputError("training stream shorter than one window of " + std::to_string(tcfg.seq_len + 1) + " tokens");

    const std::vector<Tokens> canary_eval = canary_windows(corpus, cfg, tcfg.eval_canaries);
    const std::vector<Tokens> heldout_eval = heldout_windows(corpus, tcfg.seq_len, tcfg.eval_heldout_windows);
    auto evaluate = [&](LossRecord& rec) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        rec.canary_loss = canary_eval.empty() ? nan : loss_and_grad(result.weights, cfg, canary_eval, nullptr);
        rec.heldout_loss = heldout_eval.empty() ? nan : loss_and_grad(result.weights, cfg, heldout_eval, nullptr);
    };

    AdamState adam;
    const std::size_t n_params = result.weights.parameter_count();
    adam.m.assign(n_params, 0.0);
    adam.v.assign(n_params, 0.0);

    Rng rng(derive_seed(tcfg.rng_seed, "batches"));
    const std::size_t max_start = corpus.stream.size() - tcfg.seq_len - 1;
    std::vector<Tokens> batch(tcfg.batch_size);
    TransformerWeights grad;
    double interval_loss = 0.0;
    std::size_t interval_count = 0;

    for (std::size_t step = 0; step < tcfg.steps; ++step) {
        for (auto& wdw : batch) {
            const std::size_t s = rng.below(max_start + 1);
            wdw.assign(corpus.stream.begin() + static_cast<std::ptrdiff_t>(s),
                       corpus.stream.begin() + static_cast<std::ptrdiff_t>(s + tcfg.seq_len + 1));
        }
        const double loss = loss_and_grad(result.weights, cfg, batch, &grad);
        if (!std::isfinite(loss))
            throw TrainingDivergence("non-finite training loss at step " + std::to_string(step), step);

        const double norm = global_norm(grad);
        if (!std::isfinite(norm))
            throw TrainingDivergence("non-finite gradient norm at step " + std::to_string(step), step);
        if (norm > tcfg.grad_clip_norm) {
            const double f = tcfg.grad_clip_norm / norm;
            grad.for_each_tensor([f](std::span<double> t) {
                for (double& v : t) v *= f;
            });
        }
        double lr = tcfg.learning_rate;
        if (tcfg.warmup_steps > 0 && step < tcfg.warmup_steps)
            lr *= static_cast<double>(step + 1) / static_cast<double>(tcfg.warmup_steps);
        adam_update(result.weights, grad, adam, tcfg, lr);

        interval_loss += loss;
        ++interval_count;
        const std::size_t done = step + 1;
        const bool last = done == tcfg.steps;
        if ((tcfg.eval_every > 0 && done % tcfg.eval_every == 0) || last) {
            LossRecord rec;
            rec.step = done;
            rec.train_loss = interval_loss / static_cast<double>(interval_count);
            if (tcfg.eval_every > 0) {
                evaluate(rec);
            } else {
                rec.canary_loss = rec.heldout_loss = std::numeric_limits<double>::quiet_NaN();
            }
            interval_loss = 0.0;
            interval_count = 0;
            result.history.push_back(rec);
            if (progress) progress(rec);
        }
    }
    return result;
}

std::string loss_history_csv(const std::vector<LossRecord>& history) {
    std::ostringstream os;
    os.precision(10);
    os << "step,train_loss,canary_loss,heldout_loss\n";
    for (const auto& r : history) os << r.step << ',' << r.train_loss << ',' << r.canary_loss << ',' << r.heldout_loss << '\n';
    return os.str();
}

double& parameter_at(TransformerWeights& w, std::size_t flat_index) {
    double* found = nullptr;
    std::size_t base = 0;
    w.for_each_tensor([&](std::span<double> t) {
        if (!found && flat_index < base + t.size()) found = &t[flat_index - base];
        base += t.size();
    });
    if (!found) throw InputError("parameter index " + std::to_string(flat_index) + " out of range");
    return *found;
}

double central_difference(const TransformerWeights& w, const ModelConfig& cfg, std::span<const Tokens> windows,
                          std::size_t flat_index, double h) {
    TransformerWeights probe = w;
    double& p = parameter_at(probe, flat_index);
    const double orig = p;
    p = orig + h;
    const double up = reference_loss(probe, cfg, windows);
    p = orig - h;
    const double down = reference_loss(probe, cfg, windows);
    return (up - down) / (2.0 * h);
}

double gradient_relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckReport grad_check(const ModelConfig& cfg, std::size_t probe_dims, std::uint64_t seed, double h) {
    cfg.validate();
    if (cfg.d_model > 8 || cfg.n_layers > 2 || cfg.max_seq_len > 6)
        throw ConfigError("grad_check expects a tiny model (d_model <= 8, n_layers <= 2, max_seq_len <= 6)",
                          {"d_model", "n_layers", "max_seq_len"});
    Rng rng(derive_seed(seed, "grad-check"));
    TransformerWeights w = TransformerWeights::zeros(cfg);
    // Larger-than-training scale so every path carries signal.
    w.for_each_tensor([&](std::span<double> t) {
        for (double& v : t) v = 0.5 * rng.normal();
    });
    for (auto& b : w.blocks) {
        for (double& g : b.ln1_gain) g += 1.0;
        for (double& g : b.ln2_gain) g += 1.0;
    }
    for (double& g : w.final_ln_gain) g += 1.0;

    const std::size_t len = std::min<std::size_t>(cfg.max_seq_len, 5) + 1;
    std::vector<Tokens> windows(2);
    for (auto& wdw : windows)
        for (std::size_t i = 0; i < len; ++i) wdw.push_back(static_cast<TokenId>(rng.below(cfg.vocab_size)));

    TransformerWeights grad;
    loss_and_grad(w, cfg, windows, &grad);
    const std::size_t n = w.parameter_count();

    GradCheckReport report;
    report.step = h;
    for (std::size_t i = 0; i < probe_dims; ++i) {
        GradProbe p;
        p.parameter_index = rng.below(n);
        p.analytic = parameter_at(grad, p.parameter_index);
        p.numeric = central_difference(w, cfg, windows, p.parameter_index, h);
        p.relative_error = gradient_relative_error(p.analytic, p.numeric);
        report.max_relative_error = std::max(report.max_relative_error, p.relative_error);
        report.probes.push_back(p);
    }
    return report;
}

}  // namespace asc

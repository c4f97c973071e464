#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "stable/matrix.hpp"
#include "stable/rng.hpp"
#include "stable/vocab.hpp"

namespace stable {

enum class PositionEncoding { learned, sinusoidal };

inline std::string to_string(PositionEncoding p) {
    return p == PositionEncoding::learned ? "learned" : "sinusoidal";
}

inline PositionEncoding position_encoding_from(const std::string& s) {
    if (s == "learned") return PositionEncoding::learned;
    if (s == "sinusoidal") return PositionEncoding::sinusoidal;
    fail(ErrorKind::config, "unknown position encoding '" + s + "'");
}

struct ModelConfig {
    int vocab_size = 30;
    int embed_dim = 32;
    int num_layers = 2;
    int num_heads = 2;
    int context_len = 64;
    PositionEncoding pos_encoding = PositionEncoding::learned;

    int head_dim() const { return embed_dim / num_heads; }
    int mlp_dim() const { return 4 * embed_dim; }

    void validate() const {
        if (vocab_size < 4) fail(ErrorKind::config, "vocab_size must be >= 4");
        if (embed_dim < 1 || num_layers < 1 || num_heads < 1 || context_len < 1) {
            fail(ErrorKind::config, "model dimensions must be >= 1");
        }
        if (embed_dim % num_heads != 0) {
            fail(ErrorKind::config, "embed_dim must be divisible by num_heads");
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

// Full model state: config, token alphabet and named weight tensors. Values
// are immutable by convention — training and merging build new instances.
struct Model {
    ModelConfig config;
    Vocabulary vocab;
    std::map<std::string, Matrix> tensors;

    const Matrix& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) fail(ErrorKind::conformance, "model has no tensor '" + name + "'");
        return it->second;
    }

    Matrix& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end()) fail(ErrorKind::conformance, "model has no tensor '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return tensors.count(name) != 0; }
};

namespace detail {

inline std::string blk(int layer, const char* suffix) {
    return "blk" + std::to_string(layer) + "." + suffix;
}

}  // namespace detail

// Expected tensor name -> shape map for a config. The attention projection
// names ("blk{i}.attn.w{q,k,v,o}") are the LoRA target layers.
inline std::map<std::string, std::pair<int, int>> tensor_shapes(const ModelConfig& cfg) {
    using detail::blk;
    const int d = cfg.embed_dim;
    const int m = cfg.mlp_dim();
    std::map<std::string, std::pair<int, int>> shapes;
    shapes["tok_emb"] = {cfg.vocab_size, d};
    if (cfg.pos_encoding == PositionEncoding::learned) shapes["pos_emb"] = {cfg.context_len, d};
    for (int l = 0; l < cfg.num_layers; ++l) {
        shapes[blk(l, "ln1.g")] = {1, d};
        shapes[blk(l, "ln1.b")] = {1, d};
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) shapes[blk(l, w)] = {d, d};
        for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) shapes[blk(l, b)] = {1, d};
        shapes[blk(l, "ln2.g")] = {1, d};
        shapes[blk(l, "ln2.b")] = {1, d};
        shapes[blk(l, "mlp.w1")] = {m, d};
        shapes[blk(l, "mlp.b1")] = {1, m};
        shapes[blk(l, "mlp.w2")] = {d, m};
        shapes[blk(l, "mlp.b2")] = {1, d};
    }
    shapes["ln_f.g"] = {1, d};
    shapes["ln_f.b"] = {1, d};
    shapes["unembed.w"] = {cfg.vocab_size, d};
    shapes["unembed.b"] = {1, cfg.vocab_size};
    return shapes;
}

inline std::vector<std::string> attention_projection_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    for (int l = 0; l < cfg.num_layers; ++l) {
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) {
            names.push_back(detail::blk(l, w));
        }
    }
    return names;
}

inline void validate_shapes(const Model& model) {
    const auto expected = tensor_shapes(model.config);
    if (model.tensors.size() != expected.size()) {
        fail(ErrorKind::shape, "model tensor set does not match config");
    }
    for (const auto& [name, shape] : expected) {
        auto it = model.tensors.find(name);
        if (it == model.tensors.end()) fail(ErrorKind::shape, "missing tensor '" + name + "'");
        if (it->second.rows != shape.first || it->second.cols != shape.second) {
            fail(ErrorKind::shape, "tensor '" + name + "' has wrong shape");
        }
    }
}

// Gaussian weights, zero biases, unit norm gains.
inline Model init_model(const ModelConfig& cfg, const Vocabulary& vocab, uint64_t seed,
                        double init_std = 0.02) {
    cfg.validate();
    if (vocab.size() != cfg.vocab_size) {
        fail(ErrorKind::config, "vocabulary size does not match config.vocab_size");
    }
    Model model;
    model.config = cfg;
    model.vocab = vocab;
    Rng rng(derive_seed(seed, 0x6d6f64656cull));  // "model"
    for (const auto& [name, shape] : tensor_shapes(cfg)) {
        Matrix t(shape.first, shape.second);
        const bool is_gain = name.size() >= 2 && name.substr(name.size() - 2) == ".g" &&
                             name.find("ln") != std::string::npos;
        const bool is_bias = !is_gain && (name.find(".b") != std::string::npos);
        if (is_gain) {
            std::fill(t.data.begin(), t.data.end(), 1.0);
        } else if (!is_bias) {
            for (double& v : t.data) v = rng.gaussian(0.0, init_std);
        }
        model.tensors.emplace(name, std::move(t));
    }
    return model;
}

namespace detail {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028653559;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

inline double gelu(double x) {
    const double u = kGeluC * (x + kGeluK * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
    const double u = kGeluC * (x + kGeluK * x * x * x);
    const double t = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * kGeluK * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

struct LnCache {
    Matrix hat;                // normalized rows before gain/bias
    std::vector<double> rstd;  // per row
};

inline Matrix layernorm(const Matrix& x, const Matrix& g, const Matrix& b, LnCache& cache) {
    Matrix out(x.rows, x.cols);
    cache.hat = Matrix(x.rows, x.cols);
    cache.rstd.assign(static_cast<size_t>(x.rows), 0.0);
    for (int i = 0; i < x.rows; ++i) {
        double mean = 0.0;
        for (int j = 0; j < x.cols; ++j) mean += x(i, j);
        mean /= x.cols;
        double var = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            const double c = x(i, j) - mean;
            var += c * c;
        }
        var /= x.cols;
        const double rstd = 1.0 / std::sqrt(var + kLnEps);
        cache.rstd[static_cast<size_t>(i)] = rstd;
        for (int j = 0; j < x.cols; ++j) {
            const double hat = (x(i, j) - mean) * rstd;
            cache.hat(i, j) = hat;
            out(i, j) = g(0, j) * hat + b(0, j);
        }
    }
    return out;
}

// returns dx; accumulates dg/db when provided
inline Matrix layernorm_backward(const Matrix& dy, const LnCache& cache, const Matrix& g,
                                 Matrix* dg, Matrix* db) {
    Matrix dx(dy.rows, dy.cols);
    for (int i = 0; i < dy.rows; ++i) {
        double mean_dhat = 0.0;
        double mean_dhat_hat = 0.0;
        for (int j = 0; j < dy.cols; ++j) {
            const double dhat = dy(i, j) * g(0, j);
            mean_dhat += dhat;
            mean_dhat_hat += dhat * cache.hat(i, j);
        }
        mean_dhat /= dy.cols;
        mean_dhat_hat /= dy.cols;
        const double rstd = cache.rstd[static_cast<size_t>(i)];
        for (int j = 0; j < dy.cols; ++j) {
            const double dhat = dy(i, j) * g(0, j);
            dx(i, j) = rstd * (dhat - mean_dhat - cache.hat(i, j) * mean_dhat_hat);
            if (dg) (*dg)(0, j) += dy(i, j) * cache.hat(i, j);
            if (db) (*db)(0, j) += dy(i, j);
        }
    }
    return dx;
}

inline Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
    Matrix out = matmul_bt(x, w);
    for (int i = 0; i < out.rows; ++i) {
        for (int j = 0; j < out.cols; ++j) out(i, j) += b(0, j);
    }
    return out;
}

struct LayerCache {
    LnCache ln1, ln2;
    Matrix n1, q, k, v, att, o;
    std::vector<Matrix> probs;  // per head, rows = query position
    Matrix x_mid, n2, a, g;
};

struct ForwardCache {
    Matrix x0;
    std::vector<LayerCache> layers;
    Matrix x_final;
    LnCache lnf;
    Matrix nf;
    Matrix logits;
};

inline void sinusoidal_row(int pos, int d, std::vector<double>& row) {
    row.assign(static_cast<size_t>(d), 0.0);
    for (int j = 0; j < d; j += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(j) / d);
        row[static_cast<size_t>(j)] = std::sin(pos * freq);
        if (j + 1 < d) row[static_cast<size_t>(j + 1)] = std::cos(pos * freq);
    }
}

inline ForwardCache forward_pass(const Model& model, const std::vector<int>& ids) {
    const ModelConfig& cfg = model.config;
    const int T = static_cast<int>(ids.size());
    if (T > cfg.context_len) {
        fail(ErrorKind::capacity, "context of " + std::to_string(T) + " tokens exceeds limit " +
                                      std::to_string(cfg.context_len));
    }
    for (int id : ids) {
        if (id < 0 || id >= cfg.vocab_size) {
            fail(ErrorKind::rejected_input, "token id " + std::to_string(id) + " out of range");
        }
    }
    const int d = cfg.embed_dim;
    const int H = cfg.num_heads;
    const int hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    ForwardCache fc;
    fc.x0 = Matrix(T, d);
    const Matrix& tok_emb = model.at("tok_emb");
    std::vector<double> posrow;
    for (int t = 0; t < T; ++t) {
        if (cfg.pos_encoding == PositionEncoding::learned) {
            const Matrix& pos_emb = model.at("pos_emb");
            for (int j = 0; j < d; ++j) fc.x0(t, j) = tok_emb(ids[t], j) + pos_emb(t, j);
        } else {
            sinusoidal_row(t, d, posrow);
            for (int j = 0; j < d; ++j) fc.x0(t, j) = tok_emb(ids[t], j) + posrow[static_cast<size_t>(j)];
        }
    }

    Matrix x = fc.x0;
    fc.layers.resize(static_cast<size_t>(cfg.num_layers));
    for (int l = 0; l < cfg.num_layers; ++l) {
        LayerCache& lc = fc.layers[static_cast<size_t>(l)];
        using detail::blk;
        lc.n1 = layernorm(x, model.at(blk(l, "ln1.g")), model.at(blk(l, "ln1.b")), lc.ln1);
        lc.q = linear(lc.n1, model.at(blk(l, "attn.wq")), model.at(blk(l, "attn.bq")));
        lc.k = linear(lc.n1, model.at(blk(l, "attn.wk")), model.at(blk(l, "attn.bk")));
        lc.v = linear(lc.n1, model.at(blk(l, "attn.wv")), model.at(blk(l, "attn.bv")));

        lc.att = Matrix(T, d);
        lc.probs.assign(static_cast<size_t>(H), Matrix(T, T));
        for (int h = 0; h < H; ++h) {
            const int off = h * hd;
            Matrix& p = lc.probs[static_cast<size_t>(h)];
            std::vector<double> scores(static_cast<size_t>(T));
            for (int i = 0; i < T; ++i) {
                double mx = -1e300;
                for (int j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) s += lc.q(i, off + c) * lc.k(j, off + c);
                    s *= inv_sqrt_hd;
                    scores[static_cast<size_t>(j)] = s;
                    if (s > mx) mx = s;
                }
                double denom = 0.0;
                for (int j = 0; j <= i; ++j) {
                    const double e = std::exp(scores[static_cast<size_t>(j)] - mx);
                    p(i, j) = e;
                    denom += e;
                }
                for (int j = 0; j <= i; ++j) {
                    p(i, j) /= denom;
                    for (int c = 0; c < hd; ++c) lc.att(i, off + c) += p(i, j) * lc.v(j, off + c);
                }
            }
        }
        lc.o = linear(lc.att, model.at(blk(l, "attn.wo")), model.at(blk(l, "attn.bo")));
        lc.x_mid = x;
        add_inplace(lc.x_mid, lc.o);

        lc.n2 = layernorm(lc.x_mid, model.at(blk(l, "ln2.g")), model.at(blk(l, "ln2.b")), lc.ln2);
        lc.a = linear(lc.n2, model.at(blk(l, "mlp.w1")), model.at(blk(l, "mlp.b1")));
        lc.g = lc.a;
        for (double& v : lc.g.data) v = gelu(v);
        Matrix m = linear(lc.g, model.at(blk(l, "mlp.w2")), model.at(blk(l, "mlp.b2")));
        x = lc.x_mid;
        add_inplace(x, m);
    }

    fc.x_final = x;
    fc.nf = layernorm(x, model.at("ln_f.g"), model.at("ln_f.b"), fc.lnf);
    fc.logits = linear(fc.nf, model.at("unembed.w"), model.at("unembed.b"));
    return fc;
}

inline Matrix log_softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows, logits.cols);
    for (int i = 0; i < logits.rows; ++i) {
        double mx = -1e300;
        for (int j = 0; j < logits.cols; ++j) mx = std::max(mx, logits(i, j));
        double sum = 0.0;
        for (int j = 0; j < logits.cols; ++j) sum += std::exp(logits(i, j) - mx);
        const double lse = mx + std::log(sum);
        for (int j = 0; j < logits.cols; ++j) out(i, j) = logits(i, j) - lse;
    }
    return out;
}

}  // namespace detail

// Raw next-token logits for every position; row t scores the token at t+1.
inline Matrix forward_logits(const Model& model, const TokenSequence& context) {
    if (context.ids.empty()) return Matrix(0, model.config.vocab_size);
    return detail::forward_pass(model, context.ids).logits;
}

// Per-position log-probability distributions over the vocabulary. Row t is
// the model's distribution for the token at position t+1.
inline Matrix forward_logprobs(const Model& model, const TokenSequence& context) {
    if (context.ids.empty()) return Matrix(0, model.config.vocab_size);
    return detail::log_softmax_rows(forward_logits(model, context));
}

struct SequenceScore {
    double total_logprob = 0.0;  // natural log
    int token_count = 0;
};

// Log-probability of the continuation after prompt_len under the model.
inline SequenceScore sequence_logprob(const Model& model, const TokenSequence& seq) {
    if (seq.prompt_len < 1) {
        fail(ErrorKind::degenerate_input, "continuation must follow at least one context token");
    }
    if (seq.continuation_len() < 1) {
        fail(ErrorKind::degenerate_input, "sequence has an empty continuation");
    }
    const Matrix lp = forward_logprobs(model, seq);
    SequenceScore score;
    for (int t = seq.prompt_len; t < seq.length(); ++t) {
        score.total_logprob += lp(t - 1, seq.ids[static_cast<size_t>(t)]);
        score.token_count += 1;
    }
    return score;
}

struct GenMode {
    enum Kind { greedy, sample } kind = greedy;
    double temperature = 1.0;
    uint64_t seed = 0;

    static GenMode greedy_mode() { return GenMode{}; }
    static GenMode sample_mode(double temp, uint64_t seed) { return GenMode{sample, temp, seed}; }
};

// Autoregressive decoding. Stops at the end-of-answer token (which is kept in
// the output), after max_tokens, or when the context window is full. Greedy
// ties resolve to the lowest token id.
inline TokenSequence generate(const Model& model, const TokenSequence& prompt, int max_tokens,
                              const GenMode& mode) {
    if (prompt.ids.empty()) fail(ErrorKind::degenerate_input, "generation needs a nonempty prompt");
    if (prompt.length() > model.config.context_len) {
        fail(ErrorKind::capacity, "prompt exceeds the model context");
    }
    if (mode.kind == GenMode::sample && mode.temperature <= 0.0) {
        fail(ErrorKind::rejected_input, "sampling temperature must be positive");
    }
    TokenSequence out;
    out.ids = prompt.ids;
    out.prompt_len = prompt.length();
    Rng rng(mode.seed);
    std::vector<double> weights(static_cast<size_t>(model.config.vocab_size));
    for (int produced = 0; produced < max_tokens; ++produced) {
        if (out.length() >= model.config.context_len) break;
        const Matrix lp = forward_logprobs(model, out);
        const int last = lp.rows - 1;
        int next = 0;
        if (mode.kind == GenMode::greedy) {
            double best = lp(last, 0);
            for (int j = 1; j < lp.cols; ++j) {
                if (lp(last, j) > best) {
                    best = lp(last, j);
                    next = j;
                }
            }
        } else {
            double mx = -1e300;
            for (int j = 0; j < lp.cols; ++j) mx = std::max(mx, lp(last, j));
            for (int j = 0; j < lp.cols; ++j) {
                weights[static_cast<size_t>(j)] = std::exp((lp(last, j) - mx) / mode.temperature);
            }
            next = rng.categorical(weights);
        }
        out.ids.push_back(next);
        if (next == Vocabulary::eoa_id) break;
    }
    return out;
}

struct LossGrads {
    double loss = 0.0;
    long token_count = 0;
    std::map<std::string, Matrix> grads;
};

// Mean cross-entropy over continuation tokens of the batch plus gradients for
// the trainable tensors. Pass nullptr to train everything.
inline LossGrads loss_and_grads(const Model& model, const std::vector<TokenSequence>& batch,
                                const std::set<std::string>* trainable = nullptr) {
    if (batch.empty()) fail(ErrorKind::rejected_input, "loss_and_grads needs a nonempty batch");
    const ModelConfig& cfg = model.config;
    const auto want = [&](const std::string& name) {
        return trainable == nullptr || trainable->count(name) != 0;
    };

    LossGrads result;
    const auto shapes = tensor_shapes(cfg);
    if (trainable != nullptr) {
        for (const auto& name : *trainable) {
            if (shapes.find(name) == shapes.end()) {
                fail(ErrorKind::conformance, "trainable mask names unknown tensor '" + name + "'");
            }
        }
    }
    for (const auto& [name, shape] : shapes) {
        if (want(name)) result.grads.emplace(name, Matrix(shape.first, shape.second));
    }

    long total_tokens = 0;
    for (const TokenSequence& seq : batch) {
        if (seq.prompt_len < 1) {
            fail(ErrorKind::degenerate_input, "continuation must follow at least one context token");
        }
        if (seq.continuation_len() < 1) {
            fail(ErrorKind::degenerate_input, "sequence has an empty continuation");
        }
        total_tokens += seq.continuation_len();
    }

    double loss_sum = 0.0;
    using detail::blk;
    const int H = cfg.num_heads;
    const int hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    for (const TokenSequence& seq : batch) {
        detail::ForwardCache fc = detail::forward_pass(model, seq.ids);
        const int T = seq.length();
        const Matrix lp = detail::log_softmax_rows(fc.logits);

        // dlogits = (softmax - onehot) / total_tokens at scoring rows
        Matrix dlogits(T, cfg.vocab_size);
        for (int t = seq.prompt_len; t < T; ++t) {
            const int row = t - 1;
            const int target = seq.ids[static_cast<size_t>(t)];
            loss_sum -= lp(row, target);
            for (int j = 0; j < cfg.vocab_size; ++j) {
                dlogits(row, j) = std::exp(lp(row, j)) / static_cast<double>(total_tokens);
            }
            dlogits(row, target) -= 1.0 / static_cast<double>(total_tokens);
        }

        // unembed + final norm
        if (want("unembed.w")) add_inplace(result.grads.at("unembed.w"), matmul_at(dlogits, fc.nf));
        if (want("unembed.b")) {
            Matrix& db = result.grads.at("unembed.b");
            for (int i = 0; i < T; ++i) {
                for (int j = 0; j < cfg.vocab_size; ++j) db(0, j) += dlogits(i, j);
            }
        }
        Matrix dnf = matmul(dlogits, model.at("unembed.w"));
        Matrix dx = detail::layernorm_backward(
            dnf, fc.lnf, model.at("ln_f.g"),
            want("ln_f.g") ? &result.grads.at("ln_f.g") : nullptr,
            want("ln_f.b") ? &result.grads.at("ln_f.b") : nullptr);

        for (int l = cfg.num_layers - 1; l >= 0; --l) {
            const detail::LayerCache& lc = fc.layers[static_cast<size_t>(l)];
            // mlp path: x = x_mid + W2(gelu(W1 n2 + b1)) + b2
            const Matrix& dm = dx;
            if (want(blk(l, "mlp.w2"))) add_inplace(result.grads.at(blk(l, "mlp.w2")), matmul_at(dm, lc.g));
            if (want(blk(l, "mlp.b2"))) {
                Matrix& db = result.grads.at(blk(l, "mlp.b2"));
                for (int i = 0; i < T; ++i) {
                    for (int j = 0; j < dm.cols; ++j) db(0, j) += dm(i, j);
                }
            }
            Matrix dg = matmul(dm, model.at(blk(l, "mlp.w2")));
            Matrix da(dg.rows, dg.cols);
            for (size_t i = 0; i < da.data.size(); ++i) {
                da.data[i] = dg.data[i] * detail::gelu_grad(lc.a.data[i]);
            }
            if (want(blk(l, "mlp.w1"))) add_inplace(result.grads.at(blk(l, "mlp.w1")), matmul_at(da, lc.n2));
            if (want(blk(l, "mlp.b1"))) {
                Matrix& db = result.grads.at(blk(l, "mlp.b1"));
                for (int i = 0; i < T; ++i) {
                    for (int j = 0; j < da.cols; ++j) db(0, j) += da(i, j);
                }
            }
            Matrix dn2 = matmul(da, model.at(blk(l, "mlp.w1")));
            Matrix dx_mid = detail::layernorm_backward(
                dn2, lc.ln2, model.at(blk(l, "ln2.g")),
                want(blk(l, "ln2.g")) ? &result.grads.at(blk(l, "ln2.g")) : nullptr,
                want(blk(l, "ln2.b")) ? &result.grads.at(blk(l, "ln2.b")) : nullptr);
            add_inplace(dx_mid, dx);  // residual

            // attention path: x_mid = x_in + Wo att + bo
            const Matrix& do_ = dx_mid;
            if (want(blk(l, "attn.wo"))) add_inplace(result.grads.at(blk(l, "attn.wo")), matmul_at(do_, lc.att));
            if (want(blk(l, "attn.bo"))) {
                Matrix& db = result.grads.at(blk(l, "attn.bo"));
                for (int i = 0; i < T; ++i) {
                    for (int j = 0; j < do_.cols; ++j) db(0, j) += do_(i, j);
                }
            }
            Matrix datt = matmul(do_, model.at(blk(l, "attn.wo")));

            Matrix dq(T, cfg.embed_dim), dk(T, cfg.embed_dim), dv(T, cfg.embed_dim);
            std::vector<double> dp(static_cast<size_t>(T));
            for (int h = 0; h < H; ++h) {
                const int off = h * hd;
                const Matrix& p = lc.probs[static_cast<size_t>(h)];
                for (int i = 0; i < T; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j <= i; ++j) {
                        double acc = 0.0;
                        for (int c = 0; c < hd; ++c) acc += datt(i, off + c) * lc.v(j, off + c);
                        dp[static_cast<size_t>(j)] = acc;
                        dot += p(i, j) * acc;
                        for (int c = 0; c < hd; ++c) dv(j, off + c) += p(i, j) * datt(i, off + c);
                    }
                    for (int j = 0; j <= i; ++j) {
                        const double ds = p(i, j) * (dp[static_cast<size_t>(j)] - dot) * inv_sqrt_hd;
                        for (int c = 0; c < hd; ++c) {
                            dq(i, off + c) += ds * lc.k(j, off + c);
                            dk(j, off + c) += ds * lc.q(i, off + c);
                        }
                    }
                }
            }

            auto proj_backward = [&](const Matrix& dout, const char* wname, const char* bname) {
                if (want(blk(l, wname))) add_inplace(result.grads.at(blk(l, wname)), matmul_at(dout, lc.n1));
                if (want(blk(l, bname))) {
                    Matrix& db = result.grads.at(blk(l, bname));
                    for (int i = 0; i < T; ++i) {
                        for (int j = 0; j < dout.cols; ++j) db(0, j) += dout(i, j);
                    }
                }
                return matmul(dout, model.at(blk(l, wname)));
            };
            Matrix dn1 = proj_backward(dq, "attn.wq", "attn.bq");
            add_inplace(dn1, proj_backward(dk, "attn.wk", "attn.bk"));
            add_inplace(dn1, proj_backward(dv, "attn.wv", "attn.bv"));

            Matrix dx_in = detail::layernorm_backward(
                dn1, lc.ln1, model.at(blk(l, "ln1.g")),
                want(blk(l, "ln1.g")) ? &result.grads.at(blk(l, "ln1.g")) : nullptr,
                want(blk(l, "ln1.b")) ? &result.grads.at(blk(l, "ln1.b")) : nullptr);
            add_inplace(dx_in, dx_mid);  // residual
            dx = std::move(dx_in);
        }

        // embeddings
        if (want("tok_emb")) {
            Matrix& dte = result.grads.at("tok_emb");
            for (int t = 0; t < T; ++t) {
                for (int j = 0; j < cfg.embed_dim; ++j) dte(seq.ids[static_cast<size_t>(t)], j) += dx(t, j);
            }
        }
        if (cfg.pos_encoding == PositionEncoding::learned && want("pos_emb")) {
            Matrix& dpe = result.grads.at("pos_emb");
            for (int t = 0; t < T; ++t) {
                for (int j = 0; j < cfg.embed_dim; ++j) dpe(t, j) += dx(t, j);
            }
        }
    }

    result.loss = loss_sum / static_cast<double>(total_tokens);
    result.token_count = total_tokens;
    if (!std::isfinite(result.loss)) {
        for (const auto& [name, t] : model.tensors) {
            if (!t.all_finite()) {
                fail(ErrorKind::numerical, "non-finite loss: tensor '" + name + "' holds non-finite values");
            }
        }
        fail(ErrorKind::numerical, "non-finite loss: logits overflow");
    }
    return result;
}

}  // namespace stable

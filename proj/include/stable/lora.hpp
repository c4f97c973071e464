#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "stable/model.hpp"
#include "stable/optim.hpp"
#include "stable/rng.hpp"
#include "stable/tensor_io.hpp"

namespace stable {

// Low-rank factors for one host weight W (d_out x d_in):
//   delta(scale) = scale * (lora_alpha / rank) * B * A
// with A (rank x d_in) Gaussian-initialized and B (d_out x rank) zero, so a
// fresh adapter is an exact no-op at any scale.
struct LoraLayer {
    Matrix a;  // rank x d_in
    Matrix b;  // d_out x rank
};

struct LoraAdapter {
    int rank = 4;
    double lora_alpha = 8.0;
    std::map<std::string, LoraLayer> layers;  // keyed by host tensor name

    double scaling() const { return lora_alpha / static_cast<double>(rank); }
};

struct TrainConfig {
    int epochs = 10;
    double learning_rate = 1e-3;
    int batch_size = 1;
    OptimizerKind optimizer = OptimizerKind::sgd;
    uint64_t seed = 0;

    void validate() const {
        if (epochs < 1) fail(ErrorKind::config, "epochs must be >= 1");
        if (learning_rate <= 0.0) fail(ErrorKind::config, "learning rate must be positive");
        if (batch_size < 1) fail(ErrorKind::config, "batch size must be >= 1");
    }
};

// Fresh adapter over the attention projections: A ~ N(0, 0.02^2), B = 0.
inline LoraAdapter init_adapter(const ModelConfig& cfg, int rank, double lora_alpha, uint64_t seed) {
    if (rank < 1) fail(ErrorKind::shape, "rank must be >= 1");
    if (lora_alpha <= 0.0) fail(ErrorKind::config, "lora_alpha must be positive");
    const auto shapes = tensor_shapes(cfg);
    LoraAdapter adapter;
    adapter.rank = rank;
    adapter.lora_alpha = lora_alpha;
    Rng rng(derive_seed(seed, 0x6c6f7261ull));  // "lora"
    for (const std::string& name : attention_projection_names(cfg)) {
        const auto [d_out, d_in] = shapes.at(name);
        if (rank > std::min(d_out, d_in)) {
            fail(ErrorKind::shape, "rank " + std::to_string(rank) + " exceeds min dimension of '" +
                                       name + "'");
        }
        LoraLayer layer;
        layer.a = Matrix(rank, d_in);
        for (double& v : layer.a.data) v = rng.gaussian(0.0, 0.02);
        layer.b = Matrix(d_out, rank);
        adapter.layers.emplace(name, std::move(layer));
    }
    return adapter;
}

inline void check_conformance(const Model& host, const LoraAdapter& adapter) {
    for (const auto& [name, layer] : adapter.layers) {
        if (!host.has(name)) {
            fail(ErrorKind::conformance, "adapter targets unknown layer '" + name + "'");
        }
        const Matrix& w = host.at(name);
        if (layer.b.rows != w.rows || layer.a.cols != w.cols || layer.a.rows != adapter.rank ||
            layer.b.cols != adapter.rank) {
            fail(ErrorKind::conformance, "adapter factors do not conform to layer '" + name + "'");
        }
    }
}

// Per-layer weight deltas at a scale in [0, 1]; linear in scale.
inline std::map<std::string, Matrix> delta_weight(const LoraAdapter& adapter, double scale) {
    if (scale < 0.0 || scale > 1.0) fail(ErrorKind::rejected_input, "scale must lie in [0, 1]");
    std::map<std::string, Matrix> deltas;
    const double mult = scale * adapter.scaling();
    for (const auto& [name, layer] : adapter.layers) {
        deltas.emplace(name, scaled(matmul(layer.b, layer.a), mult));
    }
    return deltas;
}

// Effective parameters with the scaled adapter folded in; the host value is
// untouched.
inline Model apply_scaled(const Model& host, const LoraAdapter& adapter, double scale) {
    check_conformance(host, adapter);
    Model out = host;
    for (auto& [name, delta] : delta_weight(adapter, scale)) {
        add_inplace(out.at(name), delta);
    }
    return out;
}

// Permanent merge: identical arithmetic to apply_scaled, but the result is a
// standalone checkpoint with no adapter attached.
inline Model merge(const Model& host, const LoraAdapter& adapter, double scale) {
    check_conformance(host, adapter);
    Model out = host;
    const double mult = scale * adapter.scaling();
    for (const auto& [name, layer] : adapter.layers) {
        add_inplace(out.at(name), matmul(layer.b, layer.a), mult);
    }
    return out;
}

struct TrainReport {
    std::vector<double> epoch_loss;  // mean loss per epoch
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

// Train the adapter factors against a frozen host. Gradients with respect to
// the factors come from the effective-weight gradient via the chain rule:
//   dL/dA = s * B^T dW,  dL/dB = s * dW A^T,  s = lora_alpha / rank.
inline LoraAdapter train_lora(const Model& host, LoraAdapter adapter,
                              const std::vector<TokenSequence>& dataset, const TrainConfig& cfg,
                              TrainReport* report = nullptr) {
    cfg.validate();
    if (dataset.empty()) fail(ErrorKind::rejected_input, "train_lora needs a nonempty dataset");
    check_conformance(host, adapter);

    std::set<std::string> target_names;
    std::map<std::string, Matrix> factors;  // "name/a", "name/b" views for the optimizer
    for (const auto& [name, layer] : adapter.layers) {
        target_names.insert(name);
        factors.emplace(name + "/a", layer.a);
        factors.emplace(name + "/b", layer.b);
    }

    Optimizer opt(cfg.optimizer, cfg.learning_rate);
    Rng shuffler(derive_seed(cfg.seed, 0x747261696eull));  // "train"
    std::vector<size_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    const double s = adapter.scaling();
    if (report) report->epoch_loss.clear();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffler.shuffle(order);
        double epoch_loss_sum = 0.0;
        long epoch_batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            std::vector<TokenSequence> batch;
            for (size_t i = start; i < std::min(order.size(), start + static_cast<size_t>(cfg.batch_size)); ++i) {
                batch.push_back(dataset[order[i]]);
            }
            // rebuild effective weights from the current factors
            for (auto& [name, layer] : adapter.layers) {
                layer.a = factors.at(name + "/a");
                layer.b = factors.at(name + "/b");
            }
            Model effective = apply_scaled(host, adapter, 1.0);
            LossGrads lg;
            try {
                lg = loss_and_grads(effective, batch, &target_names);
            } catch (const Error& e) {
                if (e.kind == ErrorKind::numerical) {
                    fail(ErrorKind::training_failure,
                         "training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
                }
                throw;
            }
            epoch_loss_sum += lg.loss;
            ++epoch_batches;

            std::map<std::string, Matrix> factor_grads;
            for (const auto& [name, layer] : adapter.layers) {
                const Matrix& dw = lg.grads.at(name);
                factor_grads.emplace(name + "/a", scaled(matmul_at(layer.b, dw), s));
                factor_grads.emplace(name + "/b", scaled(matmul_bt(dw, layer.a), s));
            }
            opt.step(factors, factor_grads);
        }
        const double mean_loss = epoch_loss_sum / static_cast<double>(epoch_batches);
        if (!std::isfinite(mean_loss)) {
            fail(ErrorKind::training_failure, "training diverged at epoch " + std::to_string(epoch));
        }
        if (report) report->epoch_loss.push_back(mean_loss);
    }

    for (auto& [name, layer] : adapter.layers) {
        layer.a = factors.at(name + "/a");
        layer.b = factors.at(name + "/b");
        if (!layer.a.all_finite() || !layer.b.all_finite()) {
            fail(ErrorKind::training_failure, "trained adapter holds non-finite values in '" + name + "'");
        }
    }
    if (report && !report->epoch_loss.empty()) {
        report->initial_loss = report->epoch_loss.front();
        report->final_loss = report->epoch_loss.back();
    }
    return adapter;
}

// Adapter checkpoints reuse the tensor container with factor tensors stored
// as "<layer>/a" and "<layer>/b".
inline void save_adapter(const std::string& path, const LoraAdapter& adapter,
                         double scale_applied = 0.0) {
    nlohmann::json meta;
    meta["kind"] = "lora_adapter";
    meta["rank"] = adapter.rank;
    meta["lora_alpha"] = adapter.lora_alpha;
    meta["scale_applied"] = scale_applied;
    nlohmann::json targets = nlohmann::json::array();
    std::map<std::string, Matrix> tensors;
    for (const auto& [name, layer] : adapter.layers) {
        targets.push_back(name);
        tensors.emplace(name + "/a", layer.a);
        tensors.emplace(name + "/b", layer.b);
    }
    meta["target_layers"] = targets;
    write_tensor_container(path, meta, tensors);
}

inline LoraAdapter load_adapter(const std::string& path) {
    TensorContainer c = read_tensor_container(path);
    if (c.meta.value("kind", "") != "lora_adapter") {
        fail(ErrorKind::schema, "'" + path + "' does not hold an adapter checkpoint");
    }
    LoraAdapter adapter;
    adapter.rank = c.meta.at("rank").get<int>();
    adapter.lora_alpha = c.meta.at("lora_alpha").get<double>();
    for (const auto& t : c.meta.at("target_layers")) {
        const std::string name = t.get<std::string>();
        LoraLayer layer;
        layer.a = c.tensors.at(name + "/a");
        layer.b = c.tensors.at(name + "/b");
        adapter.layers.emplace(name, std::move(layer));
    }
    return adapter;
}

}  // namespace stable

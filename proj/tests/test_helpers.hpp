#pragma once

#include <filesystem>
#include <string>

#include "stable/dataset.hpp"
#include "stable/harness.hpp"
#include "stable/model.hpp"

namespace testutil {

using namespace stable;

// pad, eoa, 'a', 'b' -> V = 4
inline Vocabulary vocab4() { return Vocabulary("ab"); }

inline ModelConfig tiny_config(int vocab_size, int d = 8, int layers = 1, int heads = 2,
                               int context = 16) {
    ModelConfig cfg;
    cfg.vocab_size = vocab_size;
    cfg.embed_dim = d;
    cfg.num_layers = layers;
    cfg.num_heads = heads;
    cfg.context_len = context;
    return cfg;
}

inline Model zeroed(Model model) {
    for (auto& [name, t] : model.tensors) {
        std::fill(t.data.begin(), t.data.end(), 0.0);
    }
    return model;
}

// all weights zero except a huge unembedding bias on one token
inline Model saturated_model(const ModelConfig& cfg, const Vocabulary& vocab, int token_id,
                             double bias = 1000.0) {
    Model model = zeroed(init_model(cfg, vocab, 0));
    model.at("unembed.b")(0, token_id) = bias;
    return model;
}

inline Model random_model(const ModelConfig& cfg, const Vocabulary& vocab, uint64_t seed,
                          double stddev = 0.1) {
    Model model = init_model(cfg, vocab, seed);
    Rng rng(derive_seed(seed, 0xabcdefull));
    for (auto& [name, t] : model.tensors) {
        const bool is_norm_gain = name.find("ln") != std::string::npos && name.back() == 'g';
        if (is_norm_gain) continue;  // keep gains at 1 for healthy scales
        for (double& v : t.data) v = rng.gaussian(0.0, stddev);
    }
    return model;
}

inline TokenSequence seq_of(std::vector<int> ids, int prompt_len) {
    TokenSequence s;
    s.ids = std::move(ids);
    s.prompt_len = prompt_len;
    return s;
}

// loss as a pure function of one perturbed coordinate, for finite differences
inline double loss_at(Model model, const std::string& name, int r, int c, double value,
                      const std::vector<TokenSequence>& batch) {
    model.at(name)(r, c) = value;
    std::set<std::string> none;  // gradient buffers not needed
    return loss_and_grads(model, batch, &none).loss;
}

struct TempDir {
    std::filesystem::path path;

    explicit TempDir(const std::string& tag) {
        path = std::filesystem::temp_directory_path() /
               ("stable_gate_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path);
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }

    std::string str() const { return path.string(); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace testutil

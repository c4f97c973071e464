#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "stable/model.hpp"
#include "test_helpers.hpp"

using namespace stable;
using testutil::seq_of;

TEST_CASE("tokenize maps symbols bijectively") {
    const Vocabulary v = testutil::vocab4();
    const TokenSequence seq = tokenize("ab", v);
    REQUIRE(seq.ids == std::vector<int>{v.id_of('a'), v.id_of('b')});
    REQUIRE(tokenize("", v).ids.empty());
    REQUIRE(detokenize(tokenize("ba", v), v) == "ba");
}

TEST_CASE("tokenize round-trips random text") {
    const Vocabulary v = Vocabulary::base_charset();
    Rng rng(7);
    const std::string& syms = v.symbols();
    for (int trial = 0; trial < 50; ++trial) {
        std::string text;
        const int len = static_cast<int>(rng.below(40));
        for (int i = 0; i < len; ++i) text.push_back(syms[static_cast<size_t>(rng.below(syms.size()))]);
        REQUIRE(detokenize(tokenize(text, v), v) == text);
    }
}

TEST_CASE("tokenize rejects unknown characters by name") {
    const Vocabulary v = testutil::vocab4();
    try {
        tokenize("ax", v);
        FAIL("expected an error");
    } catch (const Error& e) {
        REQUIRE(e.kind == ErrorKind::rejected_input);
        REQUIRE(std::string(e.what()).find("'x'") != std::string::npos);
    }
}

TEST_CASE("model config validation") {
    ModelConfig cfg = testutil::tiny_config(4);
    cfg.embed_dim = 9;
    cfg.num_heads = 2;
    REQUIRE_THROWS_AS(cfg.validate(), Error);
    cfg = testutil::tiny_config(4);
    cfg.num_layers = 0;
    REQUIRE_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("zero-weight model is uniform at every position") {
    const Vocabulary v = testutil::vocab4();
    const ModelConfig cfg = testutil::tiny_config(v.size());
    const Model model = testutil::zeroed(init_model(cfg, v, 1));
    const TokenSequence ctx = tokenize("abab", v);
    const Matrix lp = forward_logprobs(model, ctx);
    REQUIRE(lp.rows == 4);
    for (int t = 0; t < lp.rows; ++t) {
        for (int j = 0; j < lp.cols; ++j) {
            REQUIRE(std::fabs(lp(t, j) + std::log(4.0)) < 1e-12);
        }
    }
}

TEST_CASE("huge unembedding bias saturates the softmax") {
    const Vocabulary v = testutil::vocab4();
    const ModelConfig cfg = testutil::tiny_config(v.size());
    const Model model = testutil::saturated_model(cfg, v, v.id_of('b'));
    const Matrix lp = forward_logprobs(model, tokenize("aa", v));
    for (int t = 0; t < lp.rows; ++t) {
        REQUIRE(std::exp(lp(t, v.id_of('b'))) >= 1.0 - 1e-9);
    }
}

TEST_CASE("log-probabilities normalize at every position for random params") {
    const Vocabulary v = Vocabulary::base_charset();
    const ModelConfig cfg = testutil::tiny_config(v.size(), 16, 2, 2, 24);
    for (uint64_t seed : {11ull, 12ull, 13ull}) {
        const Model model = testutil::random_model(cfg, v, seed);
        const Matrix lp = forward_logprobs(model, tokenize("abc def.", v));
        for (int t = 0; t < lp.rows; ++t) {
            double sum = 0.0;
            for (int j = 0; j < lp.cols; ++j) sum += std::exp(lp(t, j));
            REQUIRE(std::fabs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("forward rejects over-long contexts") {
    const Vocabulary v = testutil::vocab4();
    ModelConfig cfg = testutil::tiny_config(v.size());
    cfg.context_len = 4;
    const Model model = testutil::zeroed(init_model(cfg, v, 1));
    try {
        forward_logprobs(model, tokenize("aaaaa", v));
        FAIL("expected an error");
    } catch (const Error& e) {
        REQUIRE(e.kind == ErrorKind::capacity);
    }
}

TEST_CASE("sequence_logprob of a saturated model scoring its forced output is ~0") {
    const Vocabulary v = testutil::vocab4();
    const ModelConfig cfg = testutil::tiny_config(v.size());
    const Model model = testutil::saturated_model(cfg, v, v.id_of('a'));
    const TokenSequence seq = seq_of({v.id_of('a'), v.id_of('a'), v.id_of('a')}, 1);
    const SequenceScore s = sequence_logprob(model, seq);
    REQUIRE(s.token_count == 2);
    REQUIRE(std::fabs(s.total_logprob) < 1e-9);
}

TEST_CASE("sequence_logprob on the uniform model is T * -ln V") {
    const Vocabulary v = testutil::vocab4();
    const ModelConfig cfg = testutil::tiny_config(v.size());
    const Model model = testutil::zeroed(init_model(cfg, v, 1));
    const TokenSequence seq = seq_of({2, 3, 2, 3}, 1);
    const SequenceScore s = sequence_logprob(model, seq);
    REQUIRE(s.token_count == 3);
    REQUIRE(std::fabs(s.total_logprob - 3.0 * -std::log(4.0)) < 1e-12);
}

TEST_CASE("sequence_logprob equals the sum of per-position log-probs") {
    const Vocabulary v = Vocabulary::base_charset();
    const ModelConfig cfg = testutil::tiny_config(v.size(), 16, 2, 2, 24);
    const Model model = testutil::random_model(cfg, v, 99);
    const TokenSequence seq = [&] {
        TokenSequence s = tokenize("word place.", v);
        s.prompt_len = 4;
        return s;
    }();
    const Matrix lp = forward_logprobs(model, seq);
    double expected = 0.0;
    for (int t = seq.prompt_len; t < seq.length(); ++t) {
        expected += lp(t - 1, seq.ids[static_cast<size_t>(t)]);
    }
    const SequenceScore s = sequence_logprob(model, seq);
    REQUIRE(s.token_count == seq.continuation_len());
    REQUIRE(std::fabs(s.total_logprob - expected) < 1e-12);
}

TEST_CASE("sequence_logprob rejects empty continuations") {
    const Vocabulary v = testutil::vocab4();
    const Model model = testutil::zeroed(init_model(testutil::tiny_config(v.size()), v, 1));
    try {
        sequence_logprob(model, seq_of({2, 3}, 2));
        FAIL("expected an error");
    } catch (const Error& e) {
        REQUIRE(e.kind == ErrorKind::degenerate_input);
    }
}

TEST_CASE("greedy generation is deterministic") {
    const Vocabulary v = Vocabulary::base_charset();
    const ModelConfig cfg = testutil::tiny_config(v.size(), 16, 1, 2, 32);
    const Model model = testutil::random_model(cfg, v, 5);
    const TokenSequence prompt = tokenize("abc", v);
    const TokenSequence g1 = generate(model, prompt, 10, GenMode::greedy_mode());
    const TokenSequence g2 = generate(model, prompt, 10, GenMode::greedy_mode());
    REQUIRE(g1.ids == g2.ids);
    REQUIRE(g1.prompt_len == prompt.length());
}

TEST_CASE("saturated model emits its forced token until the cap") {
    const Vocabulary v = testutil::vocab4();
    const ModelConfig cfg = testutil::tiny_config(v.size());
    const Model model = testutil::saturated_model(cfg, v, v.id_of('b'));
    const TokenSequence out = generate(model, tokenize("a", v), 5, GenMode::greedy_mode());
    REQUIRE(out.continuation_len() == 5);
    for (int t = out.prompt_len; t < out.length(); ++t) {
        REQUIRE(out.ids[static_cast<size_t>(t)] == v.id_of('b'));
    }
}

TEST_CASE("generation stops at the end-of-answer token") {
    const Vocabulary v = testutil::vocab4();
    const ModelConfig cfg = testutil::tiny_config(v.size());
    const Model model = testutil::saturated_model(cfg, v, Vocabulary::eoa_id);
    const TokenSequence out = generate(model, tokenize("a", v), 5, GenMode::greedy_mode());
    REQUIRE(out.continuation_len() == 1);
    REQUIRE(out.ids.back() == Vocabulary::eoa_id);
}

TEST_CASE("seeded sampling is reproducible") {
    const Vocabulary v = Vocabulary::base_charset();
    const ModelConfig cfg = testutil::tiny_config(v.size(), 16, 1, 2, 32);
    const Model model = testutil::random_model(cfg, v, 6);
    const TokenSequence prompt = tokenize("abc", v);
    const TokenSequence g1 = generate(model, prompt, 16, GenMode::sample_mode(1.0, 1234));
    const TokenSequence g2 = generate(model, prompt, 16, GenMode::sample_mode(1.0, 1234));
    REQUIRE(g1.ids == g2.ids);
    const TokenSequence g3 = generate(model, prompt, 16, GenMode::sample_mode(1.0, 1235));
    // different seed should usually differ; not asserted, just exercised
    (void)g3;
}

TEST_CASE("uniform model loss equals ln V") {
    const Vocabulary v = testutil::vocab4();
    const ModelConfig cfg = testutil::tiny_config(v.size());
    const Model model = testutil::zeroed(init_model(cfg, v, 1));
    const LossGrads lg = loss_and_grads(model, {seq_of({2, 3, 2}, 1)});
    REQUIRE(std::fabs(lg.loss - std::log(4.0)) < 1e-12);
    REQUIRE(lg.token_count == 2);
}

TEST_CASE("masked parameters receive no gradient entries") {
    const Vocabulary v = testutil::vocab4();
    const ModelConfig cfg = testutil::tiny_config(v.size());
    const Model model = testutil::random_model(cfg, v, 3);
    const std::set<std::string> mask = {"blk0.attn.wq", "blk0.attn.wv"};
    const LossGrads lg = loss_and_grads(model, {seq_of({2, 3, 2}, 1)}, &mask);
    REQUIRE(lg.grads.size() == 2);
    REQUIRE(lg.grads.count("blk0.attn.wq") == 1);
    REQUIRE(lg.grads.count("blk0.attn.wv") == 1);
}

TEST_CASE("analytic gradients match central differences") {
    const Vocabulary v = Vocabulary::base_charset();
    const ModelConfig cfg = testutil::tiny_config(v.size(), 8, 1, 2, 16);
    Model model = testutil::random_model(cfg, v, 17);
    const std::vector<TokenSequence> batch = {
        [&] { TokenSequence s = tokenize("ab cd.", v); s.prompt_len = 2; return s; }(),
        [&] { TokenSequence s = tokenize("ef gh.", v); s.prompt_len = 3; return s; }(),
    };
    const LossGrads lg = loss_and_grads(model, batch);

    Rng rng(555);
    std::vector<std::string> names;
    for (const auto& [name, t] : lg.grads) names.push_back(name);
    const double h = 1e-6;
    for (int trial = 0; trial < 30; ++trial) {
        const std::string& name = names[static_cast<size_t>(rng.below(names.size()))];
        const Matrix& g = lg.grads.at(name);
        const int r = static_cast<int>(rng.below(static_cast<uint64_t>(g.rows)));
        const int c = static_cast<int>(rng.below(static_cast<uint64_t>(g.cols)));
        const double orig = model.at(name)(r, c);
        const double lp = testutil::loss_at(model, name, r, c, orig + h, batch);
        const double lm = testutil::loss_at(model, name, r, c, orig - h, batch);
        const double numeric = (lp - lm) / (2.0 * h);
        const double analytic = g(r, c);
        const double rel = std::fabs(analytic - numeric) /
                           std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
        INFO(name << "[" << r << "," << c << "] analytic=" << analytic << " numeric=" << numeric);
        REQUIRE(rel <= 1e-5);
    }
}

TEST_CASE("non-finite parameters surface as a numerical error naming the tensor") {
    const Vocabulary v = testutil::vocab4();
    const ModelConfig cfg = testutil::tiny_config(v.size());
    Model model = testutil::random_model(cfg, v, 3);
    model.at("blk0.mlp.w1")(0, 0) = std::numeric_limits<double>::infinity();
    try {
        loss_and_grads(model, {seq_of({2, 3, 2}, 1)});
        FAIL("expected an error");
    } catch (const Error& e) {
        REQUIRE(e.kind == ErrorKind::numerical);
        REQUIRE(std::string(e.what()).find("blk0.mlp.w1") != std::string::npos);
    }
}

TEST_CASE("loss_and_grads rejects an empty batch") {
    const Vocabulary v = testutil::vocab4();
    const Model model = testutil::zeroed(init_model(testutil::tiny_config(v.size()), v, 1));
    REQUIRE_THROWS_AS(loss_and_grads(model, {}), Error);
}

TEST_CASE("init_model is deterministic per seed") {
    const Vocabulary v = Vocabulary::base_charset();
    const ModelConfig cfg = testutil::tiny_config(v.size(), 16, 2, 2, 24);
    const Model a = init_model(cfg, v, 42);
    const Model b = init_model(cfg, v, 42);
    for (const auto& [name, t] : a.tensors) {
        REQUIRE(t.data == b.at(name).data);
    }
}

TEST_CASE("sinusoidal position encoding works without a pos_emb tensor") {
    const Vocabulary v = testutil::vocab4();
    ModelConfig cfg = testutil::tiny_config(v.size());
    cfg.pos_encoding = PositionEncoding::sinusoidal;
    const Model model = init_model(cfg, v, 9);
    REQUIRE_FALSE(model.has("pos_emb"));
    const Matrix lp = forward_logprobs(model, tokenize("ab", v));
    REQUIRE(lp.rows == 2);
    double sum = 0.0;
    for (int j = 0; j < lp.cols; ++j) sum += std::exp(lp(1, j));
    REQUIRE(std::fabs(sum - 1.0) < 1e-12);
}

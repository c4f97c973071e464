#pragma once

#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stable/model.hpp"

namespace stable {

constexpr double kLn2 = 0.6931471805599453094;

struct DecodeConfig {
    int max_answer_tokens = 32;  // greedy decoding throughout
};

struct AnchorItem {
    std::string prompt;
    std::string gold;
    std::string source_id;
    int source_step = 0;
};

struct AnchorSet {
    std::vector<AnchorItem> items;

    int count() const { return static_cast<int>(items.size()); }
    bool empty() const { return items.empty(); }
};

enum class MetricKind { em_drop, bits_increase, kl_drift };

inline std::string to_string(MetricKind k) {
    switch (k) {
        case MetricKind::em_drop: return "em";
        case MetricKind::bits_increase: return "bits";
        case MetricKind::kl_drift: return "kl";
    }
    return "em";
}

inline MetricKind metric_from(const std::string& s) {
    if (s == "em") return MetricKind::em_drop;
    if (s == "bits") return MetricKind::bits_increase;
    if (s == "kl") return MetricKind::kl_drift;
    fail(ErrorKind::config, "unknown metric '" + s + "' (expected em|bits|kl)");
}

struct AnchorBreakdown {
    std::string anchor_id;
    double ref_value = 0.0;
    double cand_value = 0.0;
};

// One measured forgetting value. `value` is already clamped at zero for the
// EM and bits kinds; the KL kind keeps the raw signed estimate and clamps
// only through gate_f(), so records preserve negative finite-sample drift.
struct MetricValue {
    MetricKind kind = MetricKind::em_drop;
    double value = 0.0;
    double ref_value = 0.0;
    double cand_value = 0.0;
    std::vector<AnchorBreakdown> per_anchor;
    std::optional<double> std_error;  // populated for sampled KL estimates
    long token_count = 0;

    double gate_f() const { return value > 0.0 ? value : 0.0; }
};

inline nlohmann::json metric_value_to_json(const MetricValue& m) {
    nlohmann::json per_anchor = nlohmann::json::array();
    for (const auto& a : m.per_anchor) {
        per_anchor.push_back({{"anchor", a.anchor_id}, {"ref", a.ref_value}, {"cand", a.cand_value}});
    }
    return {{"kind", to_string(m.kind)},
            {"value", m.value},
            {"ref_value", m.ref_value},
            {"cand_value", m.cand_value},
            {"std_error", m.std_error ? nlohmann::json(*m.std_error) : nlohmann::json(nullptr)},
            {"token_count", m.token_count},
            {"per_anchor", per_anchor}};
}

inline MetricValue metric_value_from_json(const nlohmann::json& j) {
    MetricValue m;
    m.kind = metric_from(j.at("kind").get<std::string>());
    m.value = j.at("value").get<double>();
    m.ref_value = j.at("ref_value").get<double>();
    m.cand_value = j.at("cand_value").get<double>();
    if (!j.at("std_error").is_null()) m.std_error = j.at("std_error").get<double>();
    m.token_count = j.at("token_count").get<long>();
    for (const auto& a : j.at("per_anchor")) {
        m.per_anchor.push_back({a.at("anchor").get<std::string>(), a.at("ref").get<double>(),
                                a.at("cand").get<double>()});
    }
    return m;
}

// Per-anchor breakdown as JSON lines: {anchor id, kind, ref, cand, clamped f}.
inline std::string metric_to_jsonl(const MetricValue& m) {
    std::string out;
    for (const auto& a : m.per_anchor) {
        nlohmann::json line = {{"anchor", a.anchor_id},
                               {"kind", to_string(m.kind)},
                               {"ref", a.ref_value},
                               {"cand", a.cand_value},
                               {"f", m.gate_f()}};
        out += line.dump();
        out += '\n';
    }
    return out;
}

// lowercase, trim, collapse internal whitespace, strip terminal punctuation
inline std::string normalize_answer(const std::string& text) {
    std::string collapsed;
    collapsed.reserve(text.size());
    bool in_space = false;
    for (char c : text) {
        const bool ws = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (ws) {
            in_space = true;
            continue;
        }
        if (in_space && !collapsed.empty()) collapsed.push_back(' ');
        in_space = false;
        collapsed.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    const std::string strip = ".,!?;: ";
    while (!collapsed.empty() && strip.find(collapsed.back()) != std::string::npos) {
        collapsed.pop_back();
    }
    return collapsed;
}

inline int grade_answer(const std::string& predicted, const std::string& gold) {
    if (gold.empty()) fail(ErrorKind::rejected_input, "gold answer must be nonempty");
    return normalize_answer(predicted) == normalize_answer(gold) ? 1 : 0;
}

// Greedy answer text for a prompt: everything generated after the prompt,
// with reserved tokens dropped.
inline std::string answer_text(const Model& model, const std::string& prompt,
                               const DecodeConfig& cfg) {
    const TokenSequence seq = tokenize(prompt, model.vocab);
    const TokenSequence out = generate(model, seq, cfg.max_answer_tokens, GenMode::greedy_mode());
    std::vector<int> continuation(out.ids.begin() + out.prompt_len, out.ids.end());
    return detokenize(continuation, model.vocab);
}

struct EmEvaluation {
    double accuracy = 0.0;
    std::vector<int> grades;
    std::vector<std::string> answers;
};

inline EmEvaluation em_evaluate(const Model& model, const AnchorSet& anchors,
                                const DecodeConfig& cfg) {
    if (anchors.empty()) fail(ErrorKind::rejected_input, "anchor set is empty");
    EmEvaluation ev;
    int correct = 0;
    for (const AnchorItem& a : anchors.items) {
        const std::string answer = answer_text(model, a.prompt, cfg);
        const int grade = grade_answer(answer, a.gold);
        correct += grade;
        ev.grades.push_back(grade);
        ev.answers.push_back(answer);
    }
    ev.accuracy = static_cast<double>(correct) / anchors.count();
    return ev;
}

inline double em_accuracy(const Model& model, const AnchorSet& anchors, const DecodeConfig& cfg) {
    return em_evaluate(model, anchors, cfg).accuracy;
}

// f_EM = max(0, EM_ref - EM_cand)
inline MetricValue em_drop(const Model& ref, const Model& cand, const AnchorSet& anchors,
                           const DecodeConfig& cfg) {
    const EmEvaluation ref_ev = em_evaluate(ref, anchors, cfg);
    const EmEvaluation cand_ev = em_evaluate(cand, anchors, cfg);
    MetricValue m;
    m.kind = MetricKind::em_drop;
    m.ref_value = ref_ev.accuracy;
    m.cand_value = cand_ev.accuracy;
    m.value = std::max(0.0, ref_ev.accuracy - cand_ev.accuracy);
    for (int i = 0; i < anchors.count(); ++i) {
        m.per_anchor.push_back({anchors.items[static_cast<size_t>(i)].source_id,
                                static_cast<double>(ref_ev.grades[static_cast<size_t>(i)]),
                                static_cast<double>(cand_ev.grades[static_cast<size_t>(i)])});
    }
    return m;
}

struct SelfBits {
    double mean_bits = 0.0;           // uniform mean over anchors
    std::vector<double> per_anchor;   // bits/token per anchor
};

// bits(model) = -(1 / (T ln 2)) sum log p over the model's own greedy answer,
// per anchor, then averaged uniformly across anchors.
inline SelfBits self_bits(const Model& model, const AnchorSet& anchors, const DecodeConfig& cfg) {
    if (anchors.empty()) fail(ErrorKind::rejected_input, "anchor set is empty");
    SelfBits out;
    double sum = 0.0;
    for (const AnchorItem& a : anchors.items) {
        const TokenSequence prompt = tokenize(a.prompt, model.vocab);
        const TokenSequence gen = generate(model, prompt, cfg.max_answer_tokens, GenMode::greedy_mode());
        if (gen.continuation_len() < 1) {
            fail(ErrorKind::degenerate_input,
                 "anchor '" + a.source_id + "' produced a zero-length generation");
        }
        const SequenceScore score = sequence_logprob(model, gen);
        const double bits = -score.total_logprob / (static_cast<double>(score.token_count) * kLn2);
        out.per_anchor.push_back(bits);
        sum += bits;
    }
    out.mean_bits = sum / anchors.count();
    return out;
}

// f_bits = max(0, bits_cand - bits_ref); each model scores its own answers.
inline MetricValue bits_increase(const Model& ref, const Model& cand, const AnchorSet& anchors,
                                 const DecodeConfig& cfg) {
    const SelfBits ref_bits = self_bits(ref, anchors, cfg);
    const SelfBits cand_bits = self_bits(cand, anchors, cfg);
    MetricValue m;
    m.kind = MetricKind::bits_increase;
    m.ref_value = ref_bits.mean_bits;
    m.cand_value = cand_bits.mean_bits;
    m.value = std::max(0.0, cand_bits.mean_bits - ref_bits.mean_bits);
    for (int i = 0; i < anchors.count(); ++i) {
        m.per_anchor.push_back({anchors.items[static_cast<size_t>(i)].source_id,
                                ref_bits.per_anchor[static_cast<size_t>(i)],
                                cand_bits.per_anchor[static_cast<size_t>(i)]});
    }
    return m;
}

// 0.08 bits/token -> the candidate stays 2^-0.08 ~ 94.6% as confident.
inline double bits_confidence_ratio(double delta_bits) { return std::exp2(-delta_bits); }

struct KlConfig {
    int max_new_tokens = 32;
    int rounds = 2;          // independent sampled continuations per anchor
    double temperature = 1.0;
    uint64_t seed = 0;
    // optional floor on the reference probability; 0 disables it. Extreme
    // ratios are normally handled statistically downstream, not clipped here.
    double prob_floor = 0.0;
};

// Sampled drift estimate: tokens are drawn from the candidate over the anchor
// prompts and scored under both models,
//   f_KL = (1 / (T ln 2)) * sum (ln p_cand(x_t) - ln p_ref(x_t)),
// pooled over every sampled token. The raw value may be negative on finite
// samples; the gate clamps through MetricValue::gate_f().
inline MetricValue kl_drift(const Model& ref, const Model& cand, const AnchorSet& anchors,
                            const KlConfig& cfg) {
    if (anchors.empty()) fail(ErrorKind::rejected_input, "anchor set is empty");
    MetricValue m;
    m.kind = MetricKind::kl_drift;

    std::vector<double> token_diffs;  // log2 ratios, pooled
    double ref_sum = 0.0;
    double cand_sum = 0.0;
    std::vector<double> anchor_ref_sum(anchors.items.size(), 0.0);
    std::vector<double> anchor_cand_sum(anchors.items.size(), 0.0);
    std::vector<long> anchor_tokens(anchors.items.size(), 0);

    for (int round = 0; round < cfg.rounds; ++round) {
        for (size_t ai = 0; ai < anchors.items.size(); ++ai) {
            const AnchorItem& a = anchors.items[ai];
            const TokenSequence prompt = tokenize(a.prompt, cand.vocab);
            const uint64_t seed = derive_seed(cfg.seed, static_cast<uint64_t>(round), ai);
            const TokenSequence gen = generate(cand, prompt, cfg.max_new_tokens,
                                               GenMode::sample_mode(cfg.temperature, seed));
            if (gen.continuation_len() < 1) continue;
            const Matrix lp_cand = forward_logprobs(cand, gen);
            const Matrix lp_ref = forward_logprobs(ref, gen);
            for (int t = gen.prompt_len; t < gen.length(); ++t) {
                const int id = gen.ids[static_cast<size_t>(t)];
                const double lc = lp_cand(t - 1, id) / kLn2;
                double ref_logprob = lp_ref(t - 1, id);
                if (cfg.prob_floor > 0.0) {
                    ref_logprob = std::max(ref_logprob, std::log(cfg.prob_floor));
                }
                const double lr = ref_logprob / kLn2;
                token_diffs.push_back(lc - lr);
                cand_sum += lc;
                ref_sum += lr;
                anchor_cand_sum[ai] += lc;
                anchor_ref_sum[ai] += lr;
                anchor_tokens[ai] += 1;
            }
        }
    }

    const long T = static_cast<long>(token_diffs.size());
    if (T < 1) fail(ErrorKind::degenerate_input, "kl_drift sampled zero tokens");
    double mean = 0.0;
    for (double d : token_diffs) mean += d;
    mean /= static_cast<double>(T);
    m.value = mean;
    m.ref_value = ref_sum / static_cast<double>(T);
    m.cand_value = cand_sum / static_cast<double>(T);
    m.token_count = T;
    if (T >= 2) {
        double var = 0.0;
        for (double d : token_diffs) var += (d - mean) * (d - mean);
        var /= static_cast<double>(T - 1);
        m.std_error = std::sqrt(var / static_cast<double>(T));
    }
    for (size_t ai = 0; ai < anchors.items.size(); ++ai) {
        const double n = anchor_tokens[ai] > 0 ? static_cast<double>(anchor_tokens[ai]) : 1.0;
        m.per_anchor.push_back({anchors.items[ai].source_id, anchor_ref_sum[ai] / n,
                                anchor_cand_sum[ai] / n});
    }
    return m;
}

// Exact KL(cand || ref) in bits over the next-token distribution at the end
// of each prompt, averaged across prompts. Full-vocabulary summation; only
// viable because the vocabulary is small.
inline double kl_exact(const Model& ref, const Model& cand,
                       const std::vector<TokenSequence>& prompts) {
    if (prompts.empty()) fail(ErrorKind::rejected_input, "kl_exact needs at least one prompt");
    double total = 0.0;
    for (const TokenSequence& prompt : prompts) {
        if (prompt.ids.empty()) fail(ErrorKind::degenerate_input, "kl_exact prompt is empty");
        const Matrix lp_cand = forward_logprobs(cand, prompt);
        const Matrix lp_ref = forward_logprobs(ref, prompt);
        const int last = prompt.length() - 1;
        double kl = 0.0;
        for (int v = 0; v < lp_cand.cols; ++v) {
            const double p = std::exp(lp_cand(last, v));
            kl += p * (lp_cand(last, v) - lp_ref(last, v));
        }
        total += kl / kLn2;
    }
    return std::max(0.0, total / static_cast<double>(prompts.size()));
}

}  // namespace stable

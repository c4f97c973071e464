#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "stable/lora.hpp"
#include "stable/metrics.hpp"

namespace stable {

constexpr int kGateSchemaVersion = 1;

struct GateEvalConfig {
    DecodeConfig decode;
    KlConfig kl;
    uint64_t seed = 0;  // pinned for every evaluation within one gate call
};

struct GateConfig {
    MetricKind metric = MetricKind::em_drop;
    double epsilon = 0.07;
    double alpha_min = 0.1;
    int search_passes = 5;
    GateEvalConfig eval;

    void validate() const {
        if (!(epsilon >= 0.0)) fail(ErrorKind::config, "epsilon must be nonnegative");
        if (alpha_min <= 0.0 || alpha_min > 1.0) fail(ErrorKind::config, "alpha_min must lie in (0, 1]");
        if (search_passes < 1) fail(ErrorKind::config, "search_passes must be >= 1");
    }
};

enum class GateStatus { accepted_full, accepted_scaled, rejected };

inline std::string to_string(GateStatus s) {
    switch (s) {
        case GateStatus::accepted_full: return "accepted_full";
        case GateStatus::accepted_scaled: return "accepted_scaled";
        case GateStatus::rejected: return "rejected";
    }
    return "rejected";
}

inline GateStatus gate_status_from(const std::string& s) {
    if (s == "accepted_full") return GateStatus::accepted_full;
    if (s == "accepted_scaled") return GateStatus::accepted_scaled;
    if (s == "rejected") return GateStatus::rejected;
    fail(ErrorKind::schema, "unknown gate status '" + s + "'");
}

struct GateDecision {
    GateStatus status = GateStatus::rejected;
    double alpha = 0.0;  // merge scale for accepted decisions
    double f_at_full = 0.0;
    std::optional<double> f_at_accepted;
    std::vector<std::pair<double, double>> evaluations;  // (alpha, f) in call order
    MetricKind metric = MetricKind::em_drop;
    double epsilon = 0.0;
    std::string reference_model = "preceding-model";
    std::string error;  // nonempty when a metric evaluation failed

    bool accepted() const { return status != GateStatus::rejected; }
};

// Accept / rescale / reject against a forgetting budget. `f` must be the
// clamped (nonnegative) forgetting score at a given adapter scale.
//
// Probes f(1); on budget, accepts the full merge. Otherwise probes
// f(alpha_min); if even the minimum scale violates the budget the merge is
// rejected. Otherwise bisects [alpha_min, 1] for search_passes rounds keeping
// the invariant "lo feasible, hi infeasible" and accepts the largest feasible
// scale found. Total evaluations never exceed search_passes + 2; the bisection
// budget matches the configured pass count with the two probes extra.
inline GateDecision gate_search(const std::function<double(double)>& f, const GateConfig& cfg) {
    cfg.validate();
    GateDecision d;
    d.metric = cfg.metric;
    d.epsilon = cfg.epsilon;

    try {
        const double f_full = f(1.0);
        d.evaluations.emplace_back(1.0, f_full);
        d.f_at_full = f_full;
        if (f_full <= cfg.epsilon) {
            d.status = GateStatus::accepted_full;
            d.alpha = 1.0;
            d.f_at_accepted = f_full;
            return d;
        }

        const double f_min = f(cfg.alpha_min);
        d.evaluations.emplace_back(cfg.alpha_min, f_min);
        if (f_min > cfg.epsilon) {
            d.status = GateStatus::rejected;
            return d;
        }

        double lo = cfg.alpha_min;
        double f_lo = f_min;
        double hi = 1.0;
        for (int pass = 0; pass < cfg.search_passes; ++pass) {
            const double mid = 0.5 * (lo + hi);
            const double f_mid = f(mid);
            d.evaluations.emplace_back(mid, f_mid);
            if (f_mid <= cfg.epsilon) {
                lo = mid;
                f_lo = f_mid;
            } else {
                hi = mid;
            }
        }
        d.status = GateStatus::accepted_scaled;
        d.alpha = lo;
        d.f_at_accepted = f_lo;
        return d;
    } catch (const Error& e) {
        d.status = GateStatus::rejected;
        d.alpha = 0.0;
        d.f_at_accepted.reset();
        d.error = e.what();
        return d;
    }
}

namespace detail {

// Reference-side EM/bits values do not depend on alpha, so one gate call
// computes them once and reuses them across bisection probes. The numbers are
// identical to the direct metric calls because greedy decoding is pure.
struct GateEvaluator {
    const Model& ref;
    const LoraAdapter& adapter;
    const AnchorSet& anchors;
    const GateConfig& cfg;
    std::optional<double> ref_em;
    std::optional<double> ref_bits;

    double eval(double alpha) {
        const Model cand = apply_scaled(ref, adapter, alpha);
        switch (cfg.metric) {
            case MetricKind::em_drop: {
                if (!ref_em) ref_em = em_accuracy(ref, anchors, cfg.eval.decode);
                const double cand_em = em_accuracy(cand, anchors, cfg.eval.decode);
                return std::max(0.0, *ref_em - cand_em);
            }
            case MetricKind::bits_increase: {
                if (!ref_bits) ref_bits = self_bits(ref, anchors, cfg.eval.decode).mean_bits;
                const double cand_bits = self_bits(cand, anchors, cfg.eval.decode).mean_bits;
                return std::max(0.0, cand_bits - *ref_bits);
            }
            case MetricKind::kl_drift: {
                KlConfig kl_cfg = cfg.eval.kl;
                kl_cfg.seed = cfg.eval.seed;
                return kl_drift(ref, cand, anchors, kl_cfg).gate_f();
            }
        }
        fail(ErrorKind::config, "unreachable metric kind");
    }
};

}  // namespace detail

// Clamped forgetting score of the adapter at a scale, measured between the
// reference model and apply_scaled(ref, adapter, alpha). Pure given the
// pinned evaluation seed.
inline double evaluate_f(const Model& ref, const LoraAdapter& adapter, double alpha,
                         const AnchorSet& anchors, const GateConfig& cfg) {
    if (alpha < 0.0 || alpha > 1.0) fail(ErrorKind::rejected_input, "alpha must lie in [0, 1]");
    detail::GateEvaluator ev{ref, adapter, anchors, cfg, {}, {}};
    return ev.eval(alpha);
}

// Algorithm: gated LoRA merge. Decides only; the caller performs the merge at
// the returned alpha.
inline GateDecision gate_merge(const Model& ref, const LoraAdapter& adapter,
                               const AnchorSet& anchors, const GateConfig& cfg) {
    if (anchors.empty()) fail(ErrorKind::rejected_input, "gate_merge needs a nonempty anchor set");
    check_conformance(ref, adapter);
    detail::GateEvaluator ev{ref, adapter, anchors, cfg, {}, {}};
    return gate_search([&ev](double alpha) { return ev.eval(alpha); }, cfg);
}

inline nlohmann::json gate_decision_to_json(const GateDecision& d) {
    nlohmann::json evals = nlohmann::json::array();
    for (const auto& [alpha, f] : d.evaluations) evals.push_back({{"alpha", alpha}, {"f", f}});
    nlohmann::json j = {{"schema_version", kGateSchemaVersion},
                        {"status", to_string(d.status)},
                        {"alpha", d.alpha},
                        {"f_at_full", d.f_at_full},
                        {"metric", to_string(d.metric)},
                        {"epsilon", std::isinf(d.epsilon) ? nlohmann::json("inf") : nlohmann::json(d.epsilon)},
                        {"evaluations", evals},
                        {"reference_model", d.reference_model}};
    if (d.f_at_accepted) {
        j["f_at_accepted"] = *d.f_at_accepted;
    } else {
        j["f_at_accepted"] = nullptr;
    }
    if (!d.error.empty()) j["error"] = d.error;
    return j;
}

inline GateDecision gate_decision_from_json(const nlohmann::json& j) {
    if (j.value("schema_version", -1) != kGateSchemaVersion) {
        fail(ErrorKind::schema, "gate decision has unsupported schema version");
    }
    GateDecision d;
    d.status = gate_status_from(j.at("status").get<std::string>());
    d.alpha = j.at("alpha").get<double>();
    d.f_at_full = j.at("f_at_full").get<double>();
    d.metric = metric_from(j.at("metric").get<std::string>());
    d.epsilon = j.at("epsilon").is_string() ? std::numeric_limits<double>::infinity()
                                            : j.at("epsilon").get<double>();
    d.reference_model = j.value("reference_model", "preceding-model");
    if (!j.at("f_at_accepted").is_null()) d.f_at_accepted = j.at("f_at_accepted").get<double>();
    for (const auto& e : j.at("evaluations")) {
        d.evaluations.emplace_back(e.at("alpha").get<double>(), e.at("f").get<double>());
    }
    d.error = j.value("error", "");
    return d;
}

}  // namespace stable

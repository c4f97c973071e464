#pragma once

#include <atomic>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "stable/dataset.hpp"
#include "stable/gate.hpp"
#include "stable/lora.hpp"
#include "stable/metrics.hpp"
#include "stable/model.hpp"

namespace stable {

constexpr int kRecordSchemaVersion = 1;

struct LoraSettings {
    int rank = 4;
    double lora_alpha = 8.0;
};

// How the pristine base model is built: random init from the master seed,
// then full-parameter training on a synthetic format corpus whose words are
// disjoint from the edit dataset.
struct BaseModelConfig {
    int pretrain_datapoints = 256;
    int pretrain_qa_per_datapoint = 2;
    int epochs = 32;
    double learning_rate = 2e-3;
    int batch_size = 8;
    OptimizerKind optimizer = OptimizerKind::adam;
};

struct DatasetGenConfig {
    int n_datapoints = 24;
    int qa_per_datapoint = 2;
};

struct RunConfig {
    int num_runs = 12;
    int edits_per_run = 8;
    uint64_t seed = 53;
    ModelConfig model;
    BaseModelConfig base;
    LoraSettings lora;
    TrainConfig train{/*epochs=*/60, /*learning_rate=*/5e-3, /*batch_size=*/1,
                      OptimizerKind::adam, /*seed=*/0};
    GateConfig gate;
    DecodeConfig decode;
    KlConfig kl_record;
    std::string dataset_path = "dataset.jsonl";
    DatasetGenConfig dataset_gen;

    void validate() const {
        if (num_runs < 1) fail(ErrorKind::config, "num_runs must be >= 1");
        if (edits_per_run < 1) fail(ErrorKind::config, "edits_per_run must be >= 1");
        model.validate();
        train.validate();
        gate.validate();
        if (lora.rank < 1) fail(ErrorKind::config, "lora rank must be >= 1");
        if (lora.lora_alpha <= 0.0) fail(ErrorKind::config, "lora_alpha must be positive");
    }
};

struct StepRecord {
    int step = 0;  // 1-based
    std::string datapoint_id;
    int anchor_count = 0;  // anchors visible to the gate at this step
    GateDecision decision;
    double baseline_em = 0.0;  // pristine base on this step's QA
    double final_em = 0.0;     // final model on this step's QA
    double delta = 0.0;
    std::optional<MetricValue> step_kl;  // absent at step 1 and for rejected steps
};

struct RunRecord {
    int run_index = 0;
    uint64_t run_seed = 0;
    bool failed = false;
    std::string error;
    std::vector<StepRecord> steps;
    std::optional<MetricValue> total_kl;  // pristine base -> final model
    std::vector<double> cumulative_delta;
    int accept_count = 0;    // steps 2..T, per the scaling-table convention
    int scaled_count = 0;
    int rejected_count = 0;
    std::vector<double> scales;  // alpha of each non-rejected step 2..T
};

// Full-parameter training; used to pretrain the base model.
inline Model train_full(Model model, const std::vector<TokenSequence>& dataset,
                        const TrainConfig& cfg, TrainReport* report = nullptr) {
    cfg.validate();
    if (dataset.empty()) fail(ErrorKind::rejected_input, "train_full needs a nonempty dataset");
    Optimizer opt(cfg.optimizer, cfg.learning_rate);
    Rng shuffler(derive_seed(cfg.seed, 0x70726574ull));  // "pret"
    std::vector<size_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (report) report->epoch_loss.clear();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffler.shuffle(order);
        double loss_sum = 0.0;
        long batches = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
            std::vector<TokenSequence> batch;
            for (size_t i = start;
                 i < std::min(order.size(), start + static_cast<size_t>(cfg.batch_size)); ++i) {
                batch.push_back(dataset[order[i]]);
            }
            LossGrads lg;
            try {
                lg = loss_and_grads(model, batch);
            } catch (const Error& e) {
                if (e.kind == ErrorKind::numerical) {
                    fail(ErrorKind::training_failure,
                         "pretraining diverged at epoch " + std::to_string(epoch) + ": " + e.what());
                }
                throw;
            }
            loss_sum += lg.loss;
            ++batches;
            opt.step(model.tensors, lg.grads);
        }
        if (report) report->epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    }
    if (report && !report->epoch_loss.empty()) {
        report->initial_loss = report->epoch_loss.front();
        report->final_loss = report->epoch_loss.back();
    }
    return model;
}

namespace detail {

inline std::set<std::string> dataset_words(const std::vector<EditDatapoint>& dataset) {
    std::set<std::string> words;
    for (const EditDatapoint& dp : dataset) {
        for (const QaPair& qa : dp.qa) {
            const auto space = qa.prompt.find(' ');
            words.insert(qa.prompt.substr(0, space));
            words.insert(qa.gold);
        }
    }
    return words;
}

}  // namespace detail

// Deterministic pristine base: random init + format pretraining on facts
// disjoint from the edit dataset. Pure function of (cfg, dataset).
inline Model build_base_model(const RunConfig& cfg, const std::vector<EditDatapoint>& dataset) {
    const Vocabulary vocab = Vocabulary::base_charset();
    ModelConfig mc = cfg.model;
    if (mc.vocab_size != vocab.size()) {
        fail(ErrorKind::config, "model.vocab_size must equal the base charset size (" +
                                    std::to_string(vocab.size()) + ")");
    }
    Model model = init_model(mc, vocab, derive_seed(cfg.seed, 0x62617365ull));  // "base"

    const std::set<std::string> avoid = detail::dataset_words(dataset);
    const auto corpus = generate_dataset(cfg.base.pretrain_datapoints,
                                         cfg.base.pretrain_qa_per_datapoint, vocab,
                                         derive_seed(cfg.seed, 0x636f7270ull),  // "corp"
                                         &avoid);
    std::vector<TokenSequence> seqs;
    for (const EditDatapoint& dp : corpus) {
        for (TokenSequence& s : training_sequences(dp, vocab)) seqs.push_back(std::move(s));
    }
    TrainConfig tc;
    tc.epochs = cfg.base.epochs;
    tc.learning_rate = cfg.base.learning_rate;
    tc.batch_size = cfg.base.batch_size;
    tc.optimizer = cfg.base.optimizer;
    tc.seed = derive_seed(cfg.seed, 0x70726562ull);
    return train_full(std::move(model), seqs, tc);
}

namespace detail {

inline GateDecision auto_accept_decision(const GateConfig& gate) {
    GateDecision d;
    d.status = GateStatus::accepted_full;
    d.alpha = 1.0;
    d.f_at_full = 0.0;
    d.f_at_accepted = 0.0;
    d.metric = gate.metric;
    d.epsilon = gate.epsilon;
    d.reference_model = "preceding-model";
    return d;
}

inline RunRecord run_one(const RunConfig& cfg, const std::vector<EditDatapoint>& dataset,
                         const Model& base, int run_index) {
    RunRecord rec;
    rec.run_index = run_index;
    rec.run_seed = derive_seed(cfg.seed, 0x72756eull, static_cast<uint64_t>(run_index));  // "run"

    // distinct edit sequence per run: shuffle and take the first edits_per_run
    std::vector<size_t> indices(dataset.size());
    for (size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    Rng sampler(derive_seed(rec.run_seed, 0x73616d70ull));  // "samp"
    sampler.shuffle(indices);
    std::vector<EditDatapoint> edits;
    for (int t = 0; t < cfg.edits_per_run; ++t) edits.push_back(dataset[indices[static_cast<size_t>(t)]]);

    Model model = base;
    AnchorSet anchors;

    for (int t = 1; t <= cfg.edits_per_run; ++t) {
        const EditDatapoint& dp = edits[static_cast<size_t>(t - 1)];
        StepRecord srec;
        srec.step = t;
        srec.datapoint_id = dp.id;
        srec.anchor_count = anchors.count();
        try {
            LoraAdapter adapter = init_adapter(cfg.model, cfg.lora.rank, cfg.lora.lora_alpha,
                                               derive_seed(rec.run_seed, static_cast<uint64_t>(t), 1));
            TrainConfig tc = cfg.train;
            tc.seed = derive_seed(rec.run_seed, static_cast<uint64_t>(t), 2);
            adapter = train_lora(model, adapter, training_sequences(dp, model.vocab), tc);

            if (anchors.empty()) {
                // step 1: no prior knowledge to protect, merge at full scale
                srec.decision = auto_accept_decision(cfg.gate);
            } else {
                GateConfig gc = cfg.gate;
                gc.eval.seed = derive_seed(rec.run_seed, static_cast<uint64_t>(t), 3);
                srec.decision = gate_merge(model, adapter, anchors, gc);
            }

            if (srec.decision.accepted()) {
                Model next = merge(model, adapter, srec.decision.alpha);
                if (!anchors.empty()) {
                    KlConfig kc = cfg.kl_record;
                    kc.seed = derive_seed(rec.run_seed, static_cast<uint64_t>(t), 4);
                    srec.step_kl = kl_drift(model, next, anchors, kc);
                }
                model = std::move(next);
            }
        } catch (const Error& e) {
            rec.failed = true;
            rec.error = "step " + std::to_string(t) + ": " + e.what();
            rec.steps.push_back(std::move(srec));
            return rec;
        }
        for (const QaPair& qa : dp.qa) anchors.items.push_back({qa.prompt, qa.gold, dp.id, t});
        rec.steps.push_back(std::move(srec));
    }

    try {
        KlConfig kc = cfg.kl_record;
        kc.seed = derive_seed(rec.run_seed, 0, 5);
        rec.total_kl = kl_drift(base, model, anchors, kc);

        double cum = 0.0;
        for (StepRecord& srec : rec.steps) {
            AnchorSet own = anchors_from({edits[static_cast<size_t>(srec.step - 1)]}, srec.step);
            srec.baseline_em = em_accuracy(base, own, cfg.decode);
            srec.final_em = em_accuracy(model, own, cfg.decode);
            srec.delta = srec.final_em - srec.baseline_em;
            cum += srec.delta;
            rec.cumulative_delta.push_back(cum);
            if (srec.step >= 2) {
                switch (srec.decision.status) {
                    case GateStatus::accepted_full: rec.accept_count += 1; break;
                    case GateStatus::accepted_scaled: rec.scaled_count += 1; break;
                    case GateStatus::rejected: rec.rejected_count += 1; break;
                }
                if (srec.decision.accepted()) rec.scales.push_back(srec.decision.alpha);
            }
        }
    } catch (const Error& e) {
        rec.failed = true;
        rec.error = std::string("final evaluation: ") + e.what();
    }
    return rec;
}

}  // namespace detail

// The sequential continual-editing protocol: per run, sample edits_per_run
// datapoints, train a fresh adapter per datapoint against the current model,
// gate against the anchors accumulated from prior steps, merge at the
// accepted scale, and record per-step and total drift.
inline std::vector<RunRecord> run_experiment(const RunConfig& cfg,
                                             const std::vector<EditDatapoint>& dataset,
                                             int workers = 1, const Model* base = nullptr) {
    cfg.validate();
    if (static_cast<int>(dataset.size()) < cfg.edits_per_run) {
        fail(ErrorKind::config, "dataset has " + std::to_string(dataset.size()) +
                                    " datapoints, need >= " + std::to_string(cfg.edits_per_run));
    }
    Model built;
    if (base == nullptr) {
        built = build_base_model(cfg, dataset);
        base = &built;
    }

    std::vector<RunRecord> records(static_cast<size_t>(cfg.num_runs));
    const int n_threads = std::max(1, std::min(workers, cfg.num_runs));
    if (n_threads == 1) {
        for (int r = 0; r < cfg.num_runs; ++r) records[static_cast<size_t>(r)] = detail::run_one(cfg, dataset, *base, r);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int w = 0; w < n_threads; ++w) {
            pool.emplace_back([&] {
                while (true) {
                    const int r = next.fetch_add(1);
                    if (r >= cfg.num_runs) break;
                    records[static_cast<size_t>(r)] = detail::run_one(cfg, dataset, *base, r);
                }
            });
        }
        for (std::thread& th : pool) th.join();
    }
    return records;
}

// Unconstrained arm: every adapter merges at full scale. Identical to
// run_experiment with an infinite budget, decision-for-decision.
inline std::vector<RunRecord> ungated_baseline(const RunConfig& cfg,
                                               const std::vector<EditDatapoint>& dataset,
                                               int workers = 1, const Model* base = nullptr) {
    RunConfig unconstrained = cfg;
    unconstrained.gate.epsilon = std::numeric_limits<double>::infinity();
    return run_experiment(unconstrained, dataset, workers, base);
}

inline nlohmann::json step_record_to_json(const StepRecord& s) {
    return {{"step", s.step},
            {"datapoint_id", s.datapoint_id},
            {"anchor_count", s.anchor_count},
            {"decision", gate_decision_to_json(s.decision)},
            {"baseline_em", s.baseline_em},
            {"final_em", s.final_em},
            {"delta", s.delta},
            {"step_kl", s.step_kl ? metric_value_to_json(*s.step_kl) : nlohmann::json(nullptr)}};
}

inline StepRecord step_record_from_json(const nlohmann::json& j) {
    StepRecord s;
    s.step = j.at("step").get<int>();
    s.datapoint_id = j.at("datapoint_id").get<std::string>();
    s.anchor_count = j.at("anchor_count").get<int>();
    s.decision = gate_decision_from_json(j.at("decision"));
    s.baseline_em = j.at("baseline_em").get<double>();
    s.final_em = j.at("final_em").get<double>();
    s.delta = j.at("delta").get<double>();
    if (!j.at("step_kl").is_null()) s.step_kl = metric_value_from_json(j.at("step_kl"));
    return s;
}

inline nlohmann::json run_record_to_json(const RunRecord& r) {
    nlohmann::json steps = nlohmann::json::array();
    for (const StepRecord& s : r.steps) steps.push_back(step_record_to_json(s));
    return {{"schema_version", kRecordSchemaVersion},
            {"run_index", r.run_index},
            {"run_seed", r.run_seed},
            {"kl_estimator", "sampled-drift"},  // vs. the exact full-vocabulary oracle
            {"failed", r.failed},
            {"error", r.error},
            {"steps", steps},
            {"total_kl", r.total_kl ? metric_value_to_json(*r.total_kl) : nlohmann::json(nullptr)},
            {"cumulative_delta", r.cumulative_delta},
            {"accept_count", r.accept_count},
            {"scaled_count", r.scaled_count},
            {"rejected_count", r.rejected_count},
            {"scales", r.scales}};
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
    if (j.value("schema_version", -1) != kRecordSchemaVersion) {
        fail(ErrorKind::schema, "run record has unsupported schema version");
    }
    RunRecord r;
    r.run_index = j.at("run_index").get<int>();
    r.run_seed = j.at("run_seed").get<uint64_t>();
    r.failed = j.at("failed").get<bool>();
    r.error = j.at("error").get<std::string>();
    for (const auto& s : j.at("steps")) r.steps.push_back(step_record_from_json(s));
    if (!j.at("total_kl").is_null()) r.total_kl = metric_value_from_json(j.at("total_kl"));
    r.cumulative_delta = j.at("cumulative_delta").get<std::vector<double>>();
    r.accept_count = j.at("accept_count").get<int>();
    r.scaled_count = j.at("scaled_count").get<int>();
    r.rejected_count = j.at("rejected_count").get<int>();
    r.scales = j.at("scales").get<std::vector<double>>();
    return r;
}

}  // namespace stable

#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stable/harness.hpp"
#include "stable/report.hpp"

namespace stable::cli {

constexpr int kManifestSchemaVersion = 1;

struct ReportConfig {
    FilterConfig filter;
};

struct EffectiveConfig {
    RunConfig run;
    ReportConfig report;
};

namespace detail {

inline void expect_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                        const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
            fail(ErrorKind::config, "unknown key '" + it.key() + "' in " + where);
        }
    }
}

template <class T>
void maybe(const nlohmann::json& j, const char* key, T& into) {
    if (j.contains(key)) into = j.at(key).get<T>();
}

inline double epsilon_from_json(const nlohmann::json& v) {
    if (v.is_string()) {
        if (v.get<std::string>() == "inf") return std::numeric_limits<double>::infinity();
        fail(ErrorKind::config, "epsilon must be a number or \"inf\"");
    }
    return v.get<double>();
}

}  // namespace detail

inline EffectiveConfig config_from_json(const nlohmann::json& j) {
    using detail::expect_keys;
    using detail::maybe;
    EffectiveConfig cfg;
    expect_keys(j, {"schema_version", "num_runs", "edits_per_run", "seed", "model", "base", "lora",
                    "train", "gate", "decode", "kl_eval", "dataset", "report"},
                "config");
    maybe(j, "num_runs", cfg.run.num_runs);
    maybe(j, "edits_per_run", cfg.run.edits_per_run);
    maybe(j, "seed", cfg.run.seed);
    if (j.contains("model")) {
        const auto& m = j.at("model");
        expect_keys(m, {"embed_dim", "num_layers", "num_heads", "context_len", "pos_encoding"},
                    "config.model");
        maybe(m, "embed_dim", cfg.run.model.embed_dim);
        maybe(m, "num_layers", cfg.run.model.num_layers);
        maybe(m, "num_heads", cfg.run.model.num_heads);
        maybe(m, "context_len", cfg.run.model.context_len);
        if (m.contains("pos_encoding")) {
            cfg.run.model.pos_encoding = position_encoding_from(m.at("pos_encoding").get<std::string>());
        }
    }
    if (j.contains("base")) {
        const auto& b = j.at("base");
        expect_keys(b, {"pretrain_datapoints", "pretrain_qa_per_datapoint", "epochs",
                        "learning_rate", "batch_size", "optimizer"},
                    "config.base");
        maybe(b, "pretrain_datapoints", cfg.run.base.pretrain_datapoints);
        maybe(b, "pretrain_qa_per_datapoint", cfg.run.base.pretrain_qa_per_datapoint);
        maybe(b, "epochs", cfg.run.base.epochs);
        maybe(b, "learning_rate", cfg.run.base.learning_rate);
        maybe(b, "batch_size", cfg.run.base.batch_size);
        if (b.contains("optimizer")) {
            cfg.run.base.optimizer = optimizer_from(b.at("optimizer").get<std::string>());
        }
    }
    if (j.contains("lora")) {
        const auto& l = j.at("lora");
        expect_keys(l, {"rank", "lora_alpha"}, "config.lora");
        maybe(l, "rank", cfg.run.lora.rank);
        maybe(l, "lora_alpha", cfg.run.lora.lora_alpha);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        expect_keys(t, {"epochs", "learning_rate", "batch_size", "optimizer"}, "config.train");
        maybe(t, "epochs", cfg.run.train.epochs);
        maybe(t, "learning_rate", cfg.run.train.learning_rate);
        maybe(t, "batch_size", cfg.run.train.batch_size);
        if (t.contains("optimizer")) {
            cfg.run.train.optimizer = optimizer_from(t.at("optimizer").get<std::string>());
        }
    }
    if (j.contains("gate")) {
        const auto& g = j.at("gate");
        expect_keys(g, {"metric", "epsilon", "alpha_min", "search_passes"}, "config.gate");
        if (g.contains("metric")) cfg.run.gate.metric = metric_from(g.at("metric").get<std::string>());
        if (g.contains("epsilon")) cfg.run.gate.epsilon = detail::epsilon_from_json(g.at("epsilon"));
        maybe(g, "alpha_min", cfg.run.gate.alpha_min);
        maybe(g, "search_passes", cfg.run.gate.search_passes);
    }
    if (j.contains("decode")) {
        const auto& d = j.at("decode");
        expect_keys(d, {"max_answer_tokens"}, "config.decode");
        maybe(d, "max_answer_tokens", cfg.run.decode.max_answer_tokens);
    }
    if (j.contains("kl_eval")) {
        const auto& k = j.at("kl_eval");
        expect_keys(k, {"max_new_tokens", "rounds", "temperature", "prob_floor"}, "config.kl_eval");
        maybe(k, "max_new_tokens", cfg.run.kl_record.max_new_tokens);
        maybe(k, "rounds", cfg.run.kl_record.rounds);
        maybe(k, "temperature", cfg.run.kl_record.temperature);
        maybe(k, "prob_floor", cfg.run.kl_record.prob_floor);
    }
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        expect_keys(d, {"path", "n_datapoints", "qa_per_datapoint"}, "config.dataset");
        maybe(d, "path", cfg.run.dataset_path);
        maybe(d, "n_datapoints", cfg.run.dataset_gen.n_datapoints);
        maybe(d, "qa_per_datapoint", cfg.run.dataset_gen.qa_per_datapoint);
    }
    if (j.contains("report")) {
        const auto& r = j.at("report");
        expect_keys(r, {"filter_k"}, "config.report");
        maybe(r, "filter_k", cfg.report.filter.k);
    }
    // gate evaluation shares the per-answer decode settings and the sampled-KL
    // settings of the recording config; seeds are derived per step
    cfg.run.gate.eval.decode = cfg.run.decode;
    cfg.run.gate.eval.kl = cfg.run.kl_record;
    return cfg;
}

inline nlohmann::json config_to_json(const EffectiveConfig& cfg) {
    const RunConfig& r = cfg.run;
    nlohmann::json j;
    j["schema_version"] = 1;
    j["num_runs"] = r.num_runs;
    j["edits_per_run"] = r.edits_per_run;
    j["seed"] = r.seed;
    j["model"] = {{"embed_dim", r.model.embed_dim},
                  {"num_layers", r.model.num_layers},
                  {"num_heads", r.model.num_heads},
                  {"context_len", r.model.context_len},
                  {"pos_encoding", to_string(r.model.pos_encoding)}};
    j["base"] = {{"pretrain_datapoints", r.base.pretrain_datapoints},
                 {"pretrain_qa_per_datapoint", r.base.pretrain_qa_per_datapoint},
                 {"epochs", r.base.epochs},
                 {"learning_rate", r.base.learning_rate},
                 {"batch_size", r.base.batch_size},
                 {"optimizer", to_string(r.base.optimizer)}};
    j["lora"] = {{"rank", r.lora.rank}, {"lora_alpha", r.lora.lora_alpha}};
    j["train"] = {{"epochs", r.train.epochs},
                  {"learning_rate", r.train.learning_rate},
                  {"batch_size", r.train.batch_size},
                  {"optimizer", to_string(r.train.optimizer)}};
    j["gate"] = {{"metric", to_string(r.gate.metric)},
                 {"epsilon", std::isinf(r.gate.epsilon) ? nlohmann::json("inf")
                                                        : nlohmann::json(r.gate.epsilon)},
                 {"alpha_min", r.gate.alpha_min},
                 {"search_passes", r.gate.search_passes}};
    j["decode"] = {{"max_answer_tokens", r.decode.max_answer_tokens}};
    j["kl_eval"] = {{"max_new_tokens", r.kl_record.max_new_tokens},
                    {"rounds", r.kl_record.rounds},
                    {"temperature", r.kl_record.temperature},
                    {"prob_floor", r.kl_record.prob_floor}};
    j["dataset"] = {{"path", r.dataset_path},
                    {"n_datapoints", r.dataset_gen.n_datapoints},
                    {"qa_per_datapoint", r.dataset_gen.qa_per_datapoint}};
    j["report"] = {{"filter_k", cfg.report.filter.k}};
    return j;
}

struct Overrides {
    std::optional<std::string> metric;
    std::optional<double> epsilon;
    std::optional<uint64_t> seed;
    std::optional<int> runs;
    std::optional<int> edits;
    bool ungated = false;
    std::optional<std::string> preset;
};

// Named threshold presets for one-flag reproduction of the six reported
// configurations.
inline std::pair<MetricKind, double> preset_config(const std::string& name) {
    if (name == "em-10") return {MetricKind::em_drop, 0.10};
    if (name == "em-7") return {MetricKind::em_drop, 0.07};
    if (name == "bits-0.08") return {MetricKind::bits_increase, 0.08};
    if (name == "bits-0.06") return {MetricKind::bits_increase, 0.06};
    if (name == "kl-0.7") return {MetricKind::kl_drift, 0.7};
    if (name == "kl-0.5") return {MetricKind::kl_drift, 0.5};
    fail(ErrorKind::config,
         "unknown preset '" + name + "' (expected em-10|em-7|bits-0.08|bits-0.06|kl-0.7|kl-0.5)");
}

inline void apply_overrides(EffectiveConfig& cfg, const Overrides& o) {
    if (o.preset) {
        const auto [metric, epsilon] = preset_config(*o.preset);
        cfg.run.gate.metric = metric;
        cfg.run.gate.epsilon = epsilon;
    }
    if (o.metric) cfg.run.gate.metric = metric_from(*o.metric);
    if (o.epsilon) cfg.run.gate.epsilon = *o.epsilon;
    if (o.seed) cfg.run.seed = *o.seed;
    if (o.runs) cfg.run.num_runs = *o.runs;
    if (o.edits) cfg.run.edits_per_run = *o.edits;
    if (o.ungated) cfg.run.gate.epsilon = std::numeric_limits<double>::infinity();
}

inline EffectiveConfig load_config(const std::optional<std::string>& path, const Overrides& o) {
    EffectiveConfig cfg;
    if (path) {
        std::ifstream is(*path);
        if (!is) fail(ErrorKind::config, "cannot open config file '" + *path + "'");
        nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
        if (j.is_discarded()) fail(ErrorKind::config, "config file is not valid JSON");
        cfg = config_from_json(j);
    }
    apply_overrides(cfg, o);
    cfg.run.gate.eval.decode = cfg.run.decode;
    cfg.run.gate.eval.kl = cfg.run.kl_record;
    cfg.run.validate();
    cfg.report.filter.validate();
    return cfg;
}

inline std::string config_hash(const EffectiveConfig& cfg) {
    return hex64(fnv1a(config_to_json(cfg).dump()));
}

namespace detail {

inline std::string resolve_out_dir(const std::optional<std::string>& out) {
    if (out) return *out;
    if (const char* env = std::getenv("STABLE_GATE_OUT"); env != nullptr && env[0] != '\0') {
        return env;
    }
    return "stable-gate-out";
}

inline std::string dataset_file(const EffectiveConfig& cfg, const std::string& out_dir) {
    std::filesystem::path p(cfg.run.dataset_path);
    if (p.is_absolute()) return p.string();
    return (std::filesystem::path(out_dir) / p).string();
}

inline void write_manifest(const std::string& out_dir, const std::string& command,
                           const EffectiveConfig& cfg, const std::vector<std::string>& artifacts) {
    nlohmann::json j;
    j["schema_version"] = kManifestSchemaVersion;
    j["command"] = command;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = cfg.run.seed;
    j["effective_config"] = config_to_json(cfg);
    nlohmann::json arts = nlohmann::json::array();
    for (const std::string& a : artifacts) {
        arts.push_back(std::filesystem::relative(a, out_dir).generic_string());
    }
    j["artifacts"] = arts;
    std::ofstream os(std::filesystem::path(out_dir) / "manifest.json", std::ios::binary);
    if (!os) fail(ErrorKind::io, "cannot write manifest");
    os << j.dump(2) << "\n";
}

inline std::string run_file_name(int run_index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "run_%03d.json", run_index);
    return buf;
}

}  // namespace detail

inline std::vector<std::string> write_run_artifacts(const std::vector<RunRecord>& records,
                                                    const std::string& out_dir) {
    std::vector<std::string> artifacts;
    for (const RunRecord& rec : records) {
        const std::string path =
            (std::filesystem::path(out_dir) / detail::run_file_name(rec.run_index)).string();
        std::ofstream os(path, std::ios::binary);
        if (!os) fail(ErrorKind::io, "cannot write '" + path + "'");
        os << run_record_to_json(rec).dump(2) << "\n";
        artifacts.push_back(path);

        // per-anchor metric breakdowns of the drift measurements, one JSON line each
        std::string jsonl;
        for (const StepRecord& s : rec.steps) {
            if (s.step_kl) jsonl += metric_to_jsonl(*s.step_kl);
        }
        if (rec.total_kl) jsonl += metric_to_jsonl(*rec.total_kl);
        char mbuf[48];
        std::snprintf(mbuf, sizeof(mbuf), "run_%03d_anchors.jsonl", rec.run_index);
        const std::string mpath = (std::filesystem::path(out_dir) / mbuf).string();
        std::ofstream ms(mpath, std::ios::binary);
        if (!ms) fail(ErrorKind::io, "cannot write '" + mpath + "'");
        ms << jsonl;
        artifacts.push_back(mpath);
    }
    return artifacts;
}

inline std::vector<RunRecord> load_run_records(const std::string& out_dir) {
    std::vector<std::string> files;
    if (std::filesystem::is_directory(out_dir)) {
        for (const auto& entry : std::filesystem::directory_iterator(out_dir)) {
            const std::string name = entry.path().filename().string();
            if (name.rfind("run_", 0) == 0 && name.size() > 9 &&
                name.compare(name.size() - 5, 5, ".json") == 0 &&
                name.find("anchors") == std::string::npos) {
                files.push_back(entry.path().string());
            }
        }
    }
    std::sort(files.begin(), files.end());
    std::vector<RunRecord> records;
    for (const std::string& f : files) {
        std::ifstream is(f);
        nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
        if (j.is_discarded()) fail(ErrorKind::schema, "'" + f + "' is not valid JSON");
        records.push_back(run_record_from_json(j));
    }
    return records;
}

inline int cmd_gen_data(const EffectiveConfig& cfg, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    const Vocabulary vocab = Vocabulary::base_charset();
    const auto dataset = generate_dataset(cfg.run.dataset_gen.n_datapoints,
                                          cfg.run.dataset_gen.qa_per_datapoint, vocab,
                                          derive_seed(cfg.run.seed, 0x676e64ull));  // "gnd"
    const std::string path = detail::dataset_file(cfg, out_dir);
    save_dataset_jsonl(path, dataset);
    detail::write_manifest(out_dir, "gen-data", cfg, {path});
    std::cout << "wrote " << dataset.size() << " datapoints to " << path << "\n";
    return 0;
}

inline int cmd_run(const EffectiveConfig& cfg, const std::string& out_dir, int workers) {
    std::filesystem::create_directories(out_dir);
    const std::string dataset_path = detail::dataset_file(cfg, out_dir);
    if (!std::filesystem::exists(dataset_path)) {
        std::cerr << "error [dataset]: dataset file '" << dataset_path
                  << "' not found (run gen-data first)\n";
        return 2;
    }
    const auto dataset = load_dataset_jsonl(dataset_path);
    std::cout << "building base model...\n";
    const Model base = build_base_model(cfg.run, dataset);
    std::cout << "running " << cfg.run.num_runs << " x " << cfg.run.edits_per_run
              << " edits (metric " << to_string(cfg.run.gate.metric) << ", epsilon "
              << cfg.run.gate.epsilon << ")...\n";
    const auto records = run_experiment(cfg.run, dataset, workers, &base);
    auto artifacts = write_run_artifacts(records, out_dir);
    detail::write_manifest(out_dir, "run", cfg, artifacts);
    int failed = 0;
    for (const auto& r : records) failed += r.failed ? 1 : 0;
    std::cout << "completed " << (records.size() - static_cast<size_t>(failed)) << "/"
              << records.size() << " runs\n";
    return failed == static_cast<int>(records.size()) ? 1 : 0;
}

inline int cmd_report(const EffectiveConfig& cfg, const std::string& out_dir) {
    const auto records = load_run_records(out_dir);
    if (records.empty()) {
        std::cerr << "error [report]: no run records found in '" << out_dir << "'\n";
        return 2;
    }
    const ReportBundle bundle = build_report(records, cfg.report.filter);
    auto artifacts = emit_tables(bundle, out_dir, config_hash(cfg));
    detail::write_manifest(out_dir, "report", cfg, artifacts);
    std::cout << render_report_text(bundle);
    return 0;
}

// Full command-line driver; returns the process exit status.
inline int cli_run(const std::vector<std::string>& args) {
    CLI::App app{"gated continual self-editing experiments on a micro language model"};
    app.require_subcommand(1);

    std::optional<std::string> config_path;
    std::optional<std::string> out_dir_opt;
    Overrides overrides;
    int workers = 1;

    const auto add_common = [&](CLI::App* sub, bool run_opts) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--out", out_dir_opt, "output directory (fallback: $STABLE_GATE_OUT)");
        if (run_opts) {
            sub->add_option("--metric", overrides.metric, "gate metric: em|bits|kl");
            sub->add_option("--epsilon", overrides.epsilon, "forgetting budget");
            sub->add_option("--seed", overrides.seed, "master seed");
            sub->add_option("--runs", overrides.runs, "number of runs");
            sub->add_option("--edits", overrides.edits, "edits per run");
            sub->add_flag("--ungated", overrides.ungated, "bypass the gate (epsilon = inf)");
            sub->add_option("--workers", workers, "parallel runs")->check(CLI::PositiveNumber);
            sub->add_option("--preset", overrides.preset,
                            "threshold preset: em-10|em-7|bits-0.08|bits-0.06|kl-0.7|kl-0.5");
        }
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic fact dataset");
    add_common(gen, true);
    CLI::App* run = app.add_subcommand("run", "run the continual-editing experiment");
    add_common(run, true);
    CLI::App* report = app.add_subcommand("report", "aggregate run records into tables");
    add_common(report, false);
    CLI::App* all = app.add_subcommand("all", "gen-data + run + report");
    add_common(all, true);

    std::vector<const char*> argv;
    argv.push_back("stable-gate");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {  // --help
            return app.exit(e);
        }
        app.exit(e);
        return 2;
    }

    try {
        EffectiveConfig cfg;
        try {
            cfg = load_config(config_path, overrides);
        } catch (const Error& e) {
            std::cerr << "error [config]: " << e.what() << "\n";
            return 2;
        }
        const std::string out_dir = detail::resolve_out_dir(out_dir_opt);
        if (gen->parsed()) return cmd_gen_data(cfg, out_dir);
        if (run->parsed()) return cmd_run(cfg, out_dir, workers);
        if (report->parsed()) return cmd_report(cfg, out_dir);
        if (all->parsed()) {
            if (const int rc = cmd_gen_data(cfg, out_dir); rc != 0) return rc;
            if (const int rc = cmd_run(cfg, out_dir, workers); rc != 0) return rc;
            return cmd_report(cfg, out_dir);
        }
        return 2;
    } catch (const Error& e) {
        const char* module = "runtime";
        switch (e.kind) {
            case ErrorKind::config: module = "config"; break;
            case ErrorKind::schema: module = "schema"; break;
            case ErrorKind::io: module = "io"; break;
            case ErrorKind::training_failure: module = "training"; break;
            default: module = "runtime"; break;
        }
        std::cerr << "error [" << module << "]: " << e.what() << "\n";
        return e.kind == ErrorKind::config ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace stable::cli

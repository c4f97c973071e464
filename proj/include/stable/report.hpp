#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stable/harness.hpp"

namespace stable {

constexpr int kReportSchemaVersion = 1;

struct FilterConfig {
    double k = 5.0;  // exclusion threshold in sample standard deviations from the median

    void validate() const {
        if (k <= 0.0) fail(ErrorKind::config, "filter k must be positive");
    }
};

struct OutlierResult {
    std::vector<double> kept;          // input order preserved
    std::vector<size_t> excluded;      // indices into the input
};

namespace detail {

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double sample_stddev(const std::vector<double>& v) {
    const size_t n = v.size();
    if (n < 2) return 0.0;
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / static_cast<double>(n - 1));
}

}  // namespace detail

// Single-pass exclusion of values more than k standard deviations from the
// sample median. The deviation of each candidate is measured against the
// spread of the REMAINING values; a spike among a dozen points inflates the
// all-inclusive deviation so much that it could never reach 5 sigma of it.
// Zero spread keeps everything; samples of fewer than 3 values are kept as-is.
inline OutlierResult outlier_filter(const std::vector<double>& values, const FilterConfig& cfg) {
    cfg.validate();
    if (values.empty()) fail(ErrorKind::rejected_input, "outlier_filter needs values");
    OutlierResult out;
    const size_t n = values.size();
    if (n < 3) {
        out.kept = values;
        return out;
    }
    const double med = detail::median_of(values);
    double sum = 0.0, sumsq = 0.0;
    for (double v : values) {
        sum += v;
        sumsq += v * v;
    }
    for (size_t i = 0; i < n; ++i) {
        const double v = values[i];
        const double rest_mean = (sum - v) / static_cast<double>(n - 1);
        double rest_ss = (sumsq - v * v) - static_cast<double>(n - 1) * rest_mean * rest_mean;
        if (rest_ss < 0.0) rest_ss = 0.0;  // rounding guard
        const double rest_sd = std::sqrt(rest_ss / static_cast<double>(n - 2));
        if (std::fabs(v - med) > cfg.k * rest_sd) {
            out.excluded.push_back(i);
        } else {
            out.kept.push_back(v);
        }
    }
    return out;
}

struct AggregateCell {
    std::optional<double> mean;
    std::optional<double> se;  // sample stddev / sqrt(n_kept); null when n_kept < 2
    int n_kept = 0;
    int n_outlier = 0;
    int n_rejected = 0;
};

enum class StepQuantity { baseline_em, final_em, delta, step_kl, scale };

namespace detail {

inline AggregateCell cell_from_values(std::vector<double> values, int n_rejected,
                                      bool apply_outlier_filter, const FilterConfig& cfg) {
    AggregateCell cell;
    cell.n_rejected = n_rejected;
    if (values.empty()) return cell;
    if (apply_outlier_filter) {
        OutlierResult filtered = outlier_filter(values, cfg);
        cell.n_outlier = static_cast<int>(filtered.excluded.size());
        values = std::move(filtered.kept);
    }
    cell.n_kept = static_cast<int>(values.size());
    if (values.empty()) return cell;
    double mean = 0.0;
    for (double v : values) mean += v;
    cell.mean = mean / static_cast<double>(values.size());
    if (values.size() >= 2) {
        cell.se = sample_stddev(values) / std::sqrt(static_cast<double>(values.size()));
    }
    return cell;
}

}  // namespace detail

// One table cell: gather the quantity at a step across completed runs, apply
// the exclusions for that quantity, then mean and standard error. Per-step KL
// drops rejected steps and then outlier-filters; scale drops rejected steps
// only; the EM quantities keep every completed run.
inline AggregateCell aggregate_step(const std::vector<RunRecord>& records, int step,
                                    StepQuantity quantity, const FilterConfig& cfg) {
    std::vector<double> values;
    int n_rejected = 0;
    for (const RunRecord& rec : records) {
        if (rec.failed) continue;
        const auto it = std::find_if(rec.steps.begin(), rec.steps.end(),
                                     [step](const StepRecord& s) { return s.step == step; });
        if (it == rec.steps.end()) continue;
        const StepRecord& s = *it;
        switch (quantity) {
            case StepQuantity::baseline_em: values.push_back(s.baseline_em); break;
            case StepQuantity::final_em: values.push_back(s.final_em); break;
            case StepQuantity::delta: values.push_back(s.delta); break;
            case StepQuantity::step_kl:
                if (s.decision.status == GateStatus::rejected) {
                    ++n_rejected;
                } else if (s.step_kl) {
                    values.push_back(s.step_kl->value);
                }
                break;
            case StepQuantity::scale:
                if (s.decision.status == GateStatus::rejected) {
                    ++n_rejected;
                } else {
                    values.push_back(s.decision.alpha);
                }
                break;
        }
    }
    const bool outliers = quantity == StepQuantity::step_kl;
    if (values.empty()) {
        AggregateCell cell;
        cell.n_rejected = n_rejected;
        return cell;
    }
    return detail::cell_from_values(std::move(values), n_rejected, outliers, cfg);
}

struct PerformanceRow {
    std::string step_label;  // "1".."T" or "total"
    AggregateCell baseline, final_em, delta, kl;
};

struct GatingRow {
    int step = 0;
    int accept = 0, scaled = 0, rejected = 0;
    AggregateCell mean_scale;
};

struct SeriesData {
    std::vector<int> steps;
    std::vector<double> cumulative_delta;
    std::vector<double> cumulative_kl;
    AggregateCell overall_kl;  // base -> final drift; distinct from the series endpoint
};

struct ReportBundle {
    std::vector<PerformanceRow> performance;  // per-step rows then a total row
    std::vector<GatingRow> gating;            // steps 2..T
    SeriesData series;
};

inline int completed_run_count(const std::vector<RunRecord>& records) {
    int n = 0;
    for (const RunRecord& r : records) {
        if (!r.failed) ++n;
    }
    return n;
}

inline ReportBundle build_report(const std::vector<RunRecord>& records, const FilterConfig& cfg) {
    cfg.validate();
    if (completed_run_count(records) < 1) {
        fail(ErrorKind::rejected_input, "report needs at least one completed run");
    }
    int steps = 0;
    for (const RunRecord& r : records) {
        if (r.failed) continue;
        if (steps == 0) steps = static_cast<int>(r.steps.size());
        if (static_cast<int>(r.steps.size()) != steps) {
            fail(ErrorKind::rejected_input, "completed runs disagree on step count");
        }
    }

    ReportBundle bundle;
    PerformanceRow total;
    total.step_label = "total";
    double base_sum = 0.0, final_sum = 0.0, delta_sum = 0.0;
    for (int t = 1; t <= steps; ++t) {
        PerformanceRow row;
        row.step_label = std::to_string(t);
        row.baseline = aggregate_step(records, t, StepQuantity::baseline_em, cfg);
        row.final_em = aggregate_step(records, t, StepQuantity::final_em, cfg);
        row.delta = aggregate_step(records, t, StepQuantity::delta, cfg);
        if (t >= 2) row.kl = aggregate_step(records, t, StepQuantity::step_kl, cfg);
        base_sum += row.baseline.mean.value_or(0.0);
        final_sum += row.final_em.mean.value_or(0.0);
        delta_sum += row.delta.mean.value_or(0.0);
        bundle.performance.push_back(std::move(row));

        if (t >= 2) {
            GatingRow g;
            g.step = t;
            for (const RunRecord& rec : records) {
                if (rec.failed) continue;
                const StepRecord& s = rec.steps[static_cast<size_t>(t - 1)];
                switch (s.decision.status) {
                    case GateStatus::accepted_full: ++g.accept; break;
                    case GateStatus::accepted_scaled: ++g.scaled; break;
                    case GateStatus::rejected: ++g.rejected; break;
                }
            }
            g.mean_scale = aggregate_step(records, t, StepQuantity::scale, cfg);
            bundle.gating.push_back(std::move(g));
        }
    }

    // Total row: column sums for the EM columns; the KL cell aggregates the
    // separate base->final drift, which is not the sum of per-step values.
    total.baseline.mean = base_sum;
    total.baseline.n_kept = completed_run_count(records);
    total.final_em.mean = final_sum;
    total.final_em.n_kept = completed_run_count(records);
    total.delta.mean = delta_sum;
    total.delta.n_kept = completed_run_count(records);
    {
        std::vector<double> totals;
        for (const RunRecord& r : records) {
            if (!r.failed && r.total_kl) totals.push_back(r.total_kl->value);
        }
        if (!totals.empty()) {
            total.kl = detail::cell_from_values(std::move(totals), 0, true, cfg);
        }
    }
    bundle.performance.push_back(std::move(total));

    // cumulative series; step 1 contributes no KL
    double cum_delta = 0.0, cum_kl = 0.0;
    for (int t = 1; t <= steps; ++t) {
        const PerformanceRow& row = bundle.performance[static_cast<size_t>(t - 1)];
        cum_delta += row.delta.mean.value_or(0.0);
        cum_kl += row.kl.mean.value_or(0.0);
        bundle.series.steps.push_back(t);
        bundle.series.cumulative_delta.push_back(cum_delta);
        bundle.series.cumulative_kl.push_back(cum_kl);
    }
    bundle.series.overall_kl = bundle.performance.back().kl;
    return bundle;
}

namespace detail {

inline std::string csv_opt(const std::optional<double>& v) {
    return v ? double_to_string(*v) : std::string();
}

inline nlohmann::json cell_to_json(const AggregateCell& c) {
    return {{"mean", c.mean ? nlohmann::json(*c.mean) : nlohmann::json(nullptr)},
            {"se", c.se ? nlohmann::json(*c.se) : nlohmann::json(nullptr)},
            {"n_kept", c.n_kept},
            {"n_outlier", c.n_outlier},
            {"n_rejected", c.n_rejected}};
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
    os << text;
    if (!os) fail(ErrorKind::io, "write failed for '" + path + "'");
}

}  // namespace detail

// Writes performance/gating tables and the cumulative series as CSV plus JSON
// mirrors. Returns the emitted paths.
inline std::vector<std::string> emit_tables(const ReportBundle& bundle, const std::string& dir,
                                            const std::string& config_hash) {
    std::vector<std::string> paths;
    const std::string prefix = "# schema_version=" + std::to_string(kReportSchemaVersion) +
                               "\n# config_hash=" + config_hash + "\n";

    {
        std::ostringstream csv;
        csv << prefix
            << "step,baseline_mean,baseline_se,final_mean,final_se,delta,"
               "kl_mean,kl_se,kl_n_kept,kl_n_outlier,kl_n_rejected\n";
        for (const PerformanceRow& row : bundle.performance) {
            csv << row.step_label << ',' << detail::csv_opt(row.baseline.mean) << ','
                << detail::csv_opt(row.baseline.se) << ',' << detail::csv_opt(row.final_em.mean)
                << ',' << detail::csv_opt(row.final_em.se) << ',' << detail::csv_opt(row.delta.mean)
                << ',' << detail::csv_opt(row.kl.mean) << ',' << detail::csv_opt(row.kl.se) << ','
                << row.kl.n_kept << ',' << row.kl.n_outlier << ',' << row.kl.n_rejected << '\n';
        }
        detail::write_text(dir + "/performance.csv", csv.str());
        paths.push_back(dir + "/performance.csv");

        nlohmann::json rows = nlohmann::json::array();
        for (const PerformanceRow& row : bundle.performance) {
            rows.push_back({{"step", row.step_label},
                            {"baseline", detail::cell_to_json(row.baseline)},
                            {"final", detail::cell_to_json(row.final_em)},
                            {"delta", detail::cell_to_json(row.delta)},
                            {"kl", detail::cell_to_json(row.kl)}});
        }
        nlohmann::json j = {{"schema_version", kReportSchemaVersion},
                            {"config_hash", config_hash},
                            {"rows", rows}};
        detail::write_text(dir + "/performance.json", j.dump(2) + "\n");
        paths.push_back(dir + "/performance.json");
    }

    {
        std::ostringstream csv;
        csv << prefix << "step,accept,scaled,rejected,mean_scale,scale_se,scale_n_kept\n";
        for (const GatingRow& g : bundle.gating) {
            csv << g.step << ',' << g.accept << ',' << g.scaled << ',' << g.rejected << ','
                << detail::csv_opt(g.mean_scale.mean) << ',' << detail::csv_opt(g.mean_scale.se)
                << ',' << g.mean_scale.n_kept << '\n';
        }
        detail::write_text(dir + "/gating.csv", csv.str());
        paths.push_back(dir + "/gating.csv");

        nlohmann::json rows = nlohmann::json::array();
        for (const GatingRow& g : bundle.gating) {
            rows.push_back({{"step", g.step},
                            {"accept", g.accept},
                            {"scaled", g.scaled},
                            {"rejected", g.rejected},
                            {"mean_scale", detail::cell_to_json(g.mean_scale)}});
        }
        nlohmann::json j = {{"schema_version", kReportSchemaVersion},
                            {"config_hash", config_hash},
                            {"rows", rows}};
        detail::write_text(dir + "/gating.json", j.dump(2) + "\n");
        paths.push_back(dir + "/gating.json");
    }

    {
        std::ostringstream csv;
        csv << prefix << "step,cumulative_delta,cumulative_kl\n";
        for (size_t i = 0; i < bundle.series.steps.size(); ++i) {
            csv << bundle.series.steps[i] << ',' << double_to_string(bundle.series.cumulative_delta[i])
                << ',' << double_to_string(bundle.series.cumulative_kl[i]) << '\n';
        }
        detail::write_text(dir + "/series.csv", csv.str());
        paths.push_back(dir + "/series.csv");

        nlohmann::json j = {{"schema_version", kReportSchemaVersion},
                            {"config_hash", config_hash},
                            {"steps", bundle.series.steps},
                            {"cumulative_delta", bundle.series.cumulative_delta},
                            {"cumulative_kl", bundle.series.cumulative_kl},
                            {"overall_kl", detail::cell_to_json(bundle.series.overall_kl)}};
        detail::write_text(dir + "/series.json", j.dump(2) + "\n");
        paths.push_back(dir + "/series.json");
    }
    return paths;
}

// Minimal CSV reader for the emitted tables (no quoting; fields never contain
// commas). Skips "#" comment lines; returns header + rows.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline CsvTable parse_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::io, "cannot open '" + path + "'");
    CsvTable table;
    std::string line;
    bool have_header = false;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::string field;
        std::istringstream ls(line);
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (line.back() == ',') fields.push_back("");
        if (!have_header) {
            table.header = std::move(fields);
            have_header = true;
        } else {
            table.rows.push_back(std::move(fields));
        }
    }
    return table;
}

// Human-readable summary printed by the CLI.
inline std::string render_report_text(const ReportBundle& bundle) {
    std::ostringstream os;
    os << "step | baseline        | final           | delta   | kl (mean ± se)\n";
    for (const PerformanceRow& row : bundle.performance) {
        char buf[160];
        const auto cell = [](const AggregateCell& c) {
            if (!c.mean) return std::string("--");
            if (!c.se) {
                char b[48];
                std::snprintf(b, sizeof(b), "%.3f", *c.mean);
                return std::string(b);
            }
            return format_mean_se(*c.mean, *c.se);
        };
        std::snprintf(buf, sizeof(buf), "%-5s| %-16s| %-16s| %+.3f  | %s\n", row.step_label.c_str(),
                      cell(row.baseline).c_str(), cell(row.final_em).c_str(),
                      row.delta.mean.value_or(0.0), cell(row.kl).c_str());
        os << buf;
    }
    os << "\nstep | accept | scaled | rejected | mean scale\n";
    for (const GatingRow& g : bundle.gating) {
        char buf[160];
        const std::string scale_cell =
            g.mean_scale.mean
                ? (g.mean_scale.se ? format_mean_se(*g.mean_scale.mean, *g.mean_scale.se)
                                   : double_to_string(*g.mean_scale.mean))
                : std::string("--");
        std::snprintf(buf, sizeof(buf), "%-5d| %-7d| %-7d| %-9d| %s\n", g.step, g.accept, g.scaled,
                      g.rejected, scale_cell.c_str());
        os << buf;
    }
    return os.str();
}

}  // namespace stable

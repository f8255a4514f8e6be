#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "cal/das.hpp"
#include "cal/diagnostics.hpp"
#include "cal/vacuity.hpp"

namespace cal {

// ---------------------------------------------------------------------------
// Experiment plumbing: a single JSON config drives every run, each run emits
// one CSV row plus a JSON sidecar, and sweeps expand a grid crossed with
// seeds. Row ordering and file contents are deterministic for a fixed
// config; only the wall-clock column varies between repeats.
// ---------------------------------------------------------------------------

// Hash of the canonical (key-sorted) JSON dump, stable under key reordering
// in the source file.
inline std::string config_hash(const json& config) {
    const std::string canon = config.dump();  // object keys are already sorted
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(rng::fnv1a64(canon)));
    return buf;
}

inline std::string git_describe() {
    FILE* pipe = ::popen("git describe --always --dirty 2>/dev/null", "r");
    if (!pipe) return "unknown";
    char buf[128];
    std::string out;
    while (std::fgets(buf, sizeof(buf), pipe)) out += buf;
    ::pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

struct RunRecord {
    std::string config_hash;
    std::string git_rev;
    std::uint64_t seed = 0;
    std::string task, alg, family;
    std::size_t layer = 0;
    std::size_t intervention_size = 0;
    std::size_t revnet_blocks = 0;
    std::size_t revnet_hidden = 0;
    double iia = 0.0;
    double loss = 0.0;
    std::size_t epochs = 0;
    std::string status = "ok";  // ok | failed
    std::string error;
    std::string artifact;  // checkpoint path, when one was written
    long long wall_ms = 0;

    static std::string csv_header() {
        return "config_hash,git_rev,seed,task,alg,family,layer,intervention_size,"
               "revnet_blocks,revnet_hidden,iia,loss,epochs,status,artifact,wall_ms";
    }

    std::string csv_row() const {
        char num[128];
        std::string row = config_hash + "," + git_rev + "," + std::to_string(seed) + "," +
                          task + "," + alg + "," + family + "," + std::to_string(layer) + "," +
                          std::to_string(intervention_size) + "," +
                          std::to_string(revnet_blocks) + "," + std::to_string(revnet_hidden);
        std::snprintf(num, sizeof(num), ",%.17g,%.17g", iia, loss);
        row += num;
        row += "," + std::to_string(epochs) + "," + status + "," + artifact + "," +
               std::to_string(wall_ms);
        return row;
    }

    json to_json() const {
        return {{"config_hash", config_hash},
                {"git_rev", git_rev},
                {"seed", seed},
                {"task", task},
                {"alg", alg},
                {"family", family},
                {"layer", layer},
                {"intervention_size", intervention_size},
                {"revnet_blocks", revnet_blocks},
                {"revnet_hidden", revnet_hidden},
                {"iia", iia},
                {"loss", loss},
                {"epochs", epochs},
                {"status", status},
                {"error", error},
                {"artifact", artifact},
                {"wall_ms", wall_ms}};
    }
};

inline void write_run_records_csv(const std::filesystem::path& path,
                                  const std::vector<RunRecord>& records) {
    std::string csv = RunRecord::csv_header() + "\n";
    for (const auto& r : records) csv += r.csv_row() + "\n";
    atomic_write(path, csv);
}

// ---------------------------------------------------------------------------
// Small fixed-size job pool. Jobs must be independent; exceptions are caught
// per job so one failure cannot take the sweep down.
// ---------------------------------------------------------------------------

inline std::vector<std::string> run_parallel(std::vector<std::function<void()>> jobs,
                                             std::size_t n_jobs) {
    if (n_jobs == 0) n_jobs = 1;
    std::vector<std::string> errors(jobs.size());
    std::size_t next = 0;
    std::mutex mu;
    auto worker = [&] {
        for (;;) {
            std::size_t i;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= jobs.size()) return;
                i = next++;
            }
            try {
                jobs[i]();
            } catch (const std::exception& e) {
                errors[i] = e.what();
            }
        }
    };
    if (n_jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> threads;
        for (std::size_t t = 0; t < std::min(n_jobs, jobs.size()); ++t)
            threads.emplace_back(worker);
        for (auto& t : threads) t.join();
    }
    return errors;
}

// ---------------------------------------------------------------------------
// One alignment-training run: generate data, train the map against a frozen
// network, record eval and test scores.
// ---------------------------------------------------------------------------

struct AlignmentRunResult {
    RunRecord record;
    DasTrainResult train;
    std::unique_ptr<AlignmentMap> map;
    Partition part;
};

inline AlignmentRunResult run_alignment_job(const Mlp& m, DasConfig cfg, const json& config_js) {
    AlignmentRunResult out;
    RunRecord& rec = out.record;
    rec.config_hash = config_hash(config_js);
    rec.seed = cfg.seed;
    rec.task = cfg.task;
    rec.alg = cfg.alg;
    rec.family = cfg.family;
    rec.layer = cfg.layer;
    rec.intervention_size = cfg.intervention_size;
    rec.revnet_blocks = cfg.revnet_blocks;
    rec.revnet_hidden = cfg.revnet_hidden;

    const auto started = std::chrono::steady_clock::now();
    cfg.validate(m.cfg);
    const TaskSpec task = TaskSpec::by_name(cfg.task);
    const CausalModel alg = algorithm_by_name(cfg.alg);
    const NodePolicy policy = default_policy(alg);
    InterchangeDataset train_ds =
        gen_interchange_dataset(alg, task, cfg.n_train, cfg.seed, policy);
    InterchangeDataset eval_ds =
        gen_interchange_dataset(alg, task, cfg.n_eval, cfg.seed + 1, policy);
    InterchangeDataset test_ds =
        gen_interchange_dataset(alg, task, cfg.n_test, cfg.seed + 2, policy);

    out.map = make_map(cfg.map_spec(m.cfg.width), cfg.seed);
    out.part = cfg.partition(m.cfg);
    out.train = train_das(m, *out.map, out.part, cfg, train_ds, eval_ds);
    const IiaReport test = eval_iia(m, *out.map, out.part, cfg.layer, test_ds);

    rec.iia = test.iia;
    rec.loss = test.loss;
    rec.epochs = out.train.epochs_run;
    rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - started)
                      .count();
    return out;
}

// ---------------------------------------------------------------------------
// Sweeps: a grid section maps DasConfig field names to value lists; the grid
// is crossed with the seed list. Points are expanded in a fixed order (grid
// keys sorted, values in listed order, seeds innermost).
// ---------------------------------------------------------------------------

struct SweepPoint {
    json overrides;  // field -> value
    std::uint64_t seed = 0;
};

inline void apply_das_override(DasConfig& cfg, const std::string& key, const json& value) {
    if (key == "task") cfg.task = value.get<std::string>();
    else if (key == "alg") cfg.alg = value.get<std::string>();
    else if (key == "family") cfg.family = value.get<std::string>();
    else if (key == "layer") cfg.layer = value.get<std::size_t>();
    else if (key == "intervention_size") cfg.intervention_size = value.get<std::size_t>();
    else if (key == "revnet_blocks") cfg.revnet_blocks = value.get<std::size_t>();
    else if (key == "revnet_hidden") cfg.revnet_hidden = value.get<std::size_t>();
    else if (key == "batch") cfg.batch = value.get<std::size_t>();
    else if (key == "max_epochs") cfg.max_epochs = value.get<std::size_t>();
    else if (key == "patience") cfg.patience = value.get<std::size_t>();
    else if (key == "lr") cfg.lr = value.get<double>();
    else if (key == "improvement_threshold") cfg.improvement_threshold = value.get<double>();
    else if (key == "n_train") cfg.n_train = value.get<std::size_t>();
    else if (key == "n_eval") cfg.n_eval = value.get<std::size_t>();
    else if (key == "n_test") cfg.n_test = value.get<std::size_t>();
    else throw ValidationError("unknown sweep field: " + key);
}

inline std::vector<SweepPoint> expand_grid(const json& grid, const std::vector<std::uint64_t>& seeds) {
    std::vector<std::string> keys;
    for (auto it = grid.begin(); it != grid.end(); ++it) {
        if (!it.value().is_array() || it.value().empty())
            throw ValidationError("grid entry " + it.key() + " must be a non-empty list");
        keys.push_back(it.key());
    }
    std::vector<SweepPoint> points;
    std::vector<std::size_t> digits(keys.size(), 0);
    for (;;) {
        json overrides;
        for (std::size_t i = 0; i < keys.size(); ++i)
            overrides[keys[i]] = grid.at(keys[i])[digits[i]];
        for (std::uint64_t seed : seeds) points.push_back({overrides, seed});
        std::size_t i = 0;
        for (; i < digits.size(); ++i) {
            if (++digits[i] < grid.at(keys[i]).size()) break;
            digits[i] = 0;
        }
        if (i == digits.size()) break;
        if (keys.empty()) break;
    }
    return points;
}

struct SweepAggregate {
    json overrides;
    std::size_t n = 0;       // successful runs
    double max_iia = 0.0;
    double mean_iia = 0.0;
    double ci95 = 0.0;       // 1.96 * sd / sqrt(n)
};

struct SweepResult {
    std::vector<RunRecord> records;       // one per point, grid order
    std::vector<SweepAggregate> groups;   // one per grid point
};

inline SweepResult run_sweep(const Mlp& m, const DasConfig& base_cfg, const json& grid,
                             const std::vector<std::uint64_t>& seeds, const json& config_js,
                             std::size_t n_jobs) {
    if (seeds.empty()) throw ValidationError("sweep needs at least one seed");
    const std::vector<SweepPoint> points = expand_grid(grid, seeds);
    SweepResult out;
    out.records.resize(points.size());

    std::vector<std::function<void()>> jobs;
    for (std::size_t i = 0; i < points.size(); ++i) {
        jobs.push_back([&, i] {
            DasConfig cfg = base_cfg;
            for (auto it = points[i].overrides.begin(); it != points[i].overrides.end(); ++it)
                apply_das_override(cfg, it.key(), it.value());
            cfg.seed = points[i].seed;
            out.records[i] = run_alignment_job(m, cfg, config_js).record;
        });
    }
    const std::vector<std::string> errors = run_parallel(std::move(jobs), n_jobs);
    for (std::size_t i = 0; i < points.size(); ++i) {
        if (errors[i].empty()) continue;
        RunRecord& rec = out.records[i];
        rec.config_hash = config_hash(config_js);
        rec.seed = points[i].seed;
        rec.status = "failed";
        rec.error = errors[i];
    }

    // Aggregate per grid point, seeds collapsed.
    for (std::size_t i = 0; i < points.size(); i += seeds.size()) {
        SweepAggregate agg;
        agg.overrides = points[i].overrides;
        std::vector<double> vals;
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            const RunRecord& rec = out.records[i + s];
            if (rec.status != "ok") continue;
            vals.push_back(rec.iia);
        }
        agg.n = vals.size();
        if (!vals.empty()) {
            for (double v : vals) {
                agg.max_iia = std::max(agg.max_iia, v);
                agg.mean_iia += v;
            }
            agg.mean_iia /= static_cast<double>(vals.size());
            if (vals.size() > 1) {
                double var = 0.0;
                for (double v : vals) var += (v - agg.mean_iia) * (v - agg.mean_iia);
                var /= static_cast<double>(vals.size() - 1);
                agg.ci95 = 1.96 * std::sqrt(var / static_cast<double>(vals.size()));
            }
        }
        out.groups.push_back(std::move(agg));
    }
    return out;
}

inline void write_sweep_aggregate_csv(const std::filesystem::path& path,
                                      const std::vector<SweepAggregate>& groups) {
    std::string csv = "overrides,n,max_iia,mean_iia,ci95\n";
    for (const auto& g : groups) {
        char num[128];
        std::snprintf(num, sizeof(num), ",%zu,%.17g,%.17g,%.17g\n", g.n, g.max_iia, g.mean_iia,
                      g.ci95);
        std::string overrides = g.overrides.dump();
        std::string quoted = "\"";
        for (char c : overrides) {
            if (c == '"') quoted += "\"\"";
            else quoted += c;
        }
        quoted += "\"";
        csv += quoted + num;
    }
    atomic_write(path, csv);
}

}  // namespace cal

// Command line front end: every experiment in the framework is reachable as
// a subcommand driven by a single JSON config. Failures print a machine
// readable JSON object and exit with a code that names the failure class.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cal/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalidConfig = 2;
constexpr int kExitMissingArtifact = 3;
constexpr int kExitBudget = 4;
constexpr int kExitInternal = 5;

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "JSON config file")->required();
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--seed", opts.seed, "override the config seed")
        ->each([&](const std::string&) { opts.seed_set = true; });
    cmd->add_option("--jobs", opts.jobs, "parallel jobs for sweeps");
}

std::filesystem::path resolve_out_dir(const CommonOpts& opts, const cal::json& config) {
    if (!opts.out_dir.empty()) return opts.out_dir;
    if (const char* env = std::getenv("CAL_OUT_DIR"); env && *env) return env;
    if (config.contains("out_dir")) return config.at("out_dir").get<std::string>();
    return "out";
}

cal::json load_config(const CommonOpts& opts) {
    cal::json config = cal::read_json(opts.config_path);
    if (!config.is_object()) throw cal::ValidationError("config must be a JSON object");
    if (opts.seed_set) config["seed"] = opts.seed;
    return config;
}

std::uint64_t config_seed(const cal::json& config) { return config.value("seed", 0ull); }

cal::Mlp load_dnn(const cal::json& config) {
    if (!config.contains("dnn")) throw cal::ValidationError("config needs a dnn checkpoint path");
    return cal::Mlp::load(config.at("dnn").get<std::string>());
}

void emit(const cal::json& payload) { std::cout << payload.dump(2) << "\n"; }

// --- subcommand bodies ------------------------------------------------------

int cmd_gen_data(const CommonOpts& opts) {
    const cal::json config = load_config(opts);
    const auto out = resolve_out_dir(opts, config);
    std::filesystem::create_directories(out);
    const std::string kind = config.value("kind", "base");
    const std::uint64_t seed = config_seed(config);
    const std::size_t n = config.at("n").get<std::size_t>();
    const std::string name = config.value("name", kind + "-data");
    if (kind == "base") {
        const cal::TaskSpec task = cal::TaskSpec::by_name(config.at("task").get<std::string>());
        cal::BaseDataset ds = cal::gen_base_dataset(task, n, seed);
        cal::save_base_dataset(out / name, ds);
        emit({{"kind", kind}, {"n", ds.n}, {"path", (out / name).string()}});
    } else if (kind == "interchange") {
        const std::string alg_name = config.at("alg").get<std::string>();
        const cal::CausalModel alg = cal::algorithm_by_name(alg_name);
        const cal::TaskSpec task = cal::TaskSpec::by_name(cal::task_for_algorithm(alg_name));
        const cal::NodePolicy policy =
            config.contains("policy") ? cal::NodePolicy::from_json(config.at("policy"))
                                      : cal::default_policy(alg);
        cal::InterchangeDataset ds = cal::gen_interchange_dataset(alg, task, n, seed, policy);
        cal::save_interchange_dataset(out / name, ds);
        emit({{"kind", kind}, {"n", ds.samples.size()}, {"path", (out / name).string()}});
    } else {
        throw cal::ValidationError("unknown dataset kind: " + kind);
    }
    return kExitOk;
}

int cmd_train_dnn(const CommonOpts& opts) {
    const cal::json config = load_config(opts);
    const auto out = resolve_out_dir(opts, config);
    std::filesystem::create_directories(out);
    const std::uint64_t seed = config_seed(config);
    const cal::TaskSpec task = cal::TaskSpec::by_name(config.at("task").get<std::string>());

    cal::MlpConfig mcfg;
    mcfg.input_dim = task.input_dim;
    mcfg.width = task.input_dim;
    if (config.contains("mlp")) mcfg = cal::MlpConfig::from_json(config.at("mlp"));
    mcfg.validate();
    if (mcfg.input_dim != task.input_dim)
        throw cal::ValidationError("mlp input dim does not match task");

    cal::MlpTrainConfig tcfg;
    if (config.contains("train")) {
        const cal::json& t = config.at("train");
        tcfg.batch = t.value("batch", tcfg.batch);
        tcfg.max_epochs = t.value("max_epochs", tcfg.max_epochs);
        tcfg.patience = t.value("patience", tcfg.patience);
        tcfg.lr = t.value("lr", tcfg.lr);
        tcfg.improvement_threshold = t.value("improvement_threshold", tcfg.improvement_threshold);
    }
    const cal::json data = config.value("data", cal::json::object());
    const std::size_t n_train = data.value("n_train", std::size_t{262144});
    const std::size_t n_eval = data.value("n_eval", std::size_t{10000});
    const std::size_t n_test = data.value("n_test", std::size_t{10000});

    cal::BaseDataset train = cal::gen_base_dataset(task, n_train, seed);
    cal::BaseDataset eval = cal::gen_base_dataset(task, n_eval, seed + 1);
    cal::BaseDataset test = cal::gen_base_dataset(task, n_test, seed + 2);

    cal::Mlp m = cal::Mlp::init(mcfg, seed);
    const cal::TrainResult result = cal::train_mlp(m, train, eval, tcfg, seed);
    const double test_acc = cal::accuracy(m, test);

    const std::string name = config.value("name", "dnn-" + task.name);
    m.save(out / name);
    cal::write_metrics_csv(out / (name + "-metrics.csv"), result, "eval_acc");
    const cal::json record = {{"config_hash", cal::config_hash(config)},
                              {"git_rev", cal::git_describe()},
                              {"seed", seed},
                              {"task", task.name},
                              {"best_eval_acc", result.best_eval},
                              {"best_epoch", result.best_epoch},
                              {"epochs_run", result.epochs_run},
                              {"test_acc", test_acc},
                              {"artifact", (out / name).string()}};
    cal::write_json(out / (name + "-record.json"), record);
    emit(record);
    return kExitOk;
}

int cmd_train_align(const CommonOpts& opts) {
    const cal::json config = load_config(opts);
    const auto out = resolve_out_dir(opts, config);
    std::filesystem::create_directories(out);
    cal::Mlp m = load_dnn(config);
    cal::DasConfig cfg = cal::DasConfig::from_json(config.value("das", cal::json::object()));
    if (opts.seed_set) cfg.seed = opts.seed;

    cal::AlignmentRunResult run = cal::run_alignment_job(m, cfg, config);
    run.record.git_rev = cal::git_describe();

    const std::string name = config.value("name", "map-" + cfg.alg);
    cal::save_map(out / name, *run.map, &run.part);
    run.record.artifact = (out / name).string();

    cal::write_run_records_csv(out / (name + "-record.csv"), {run.record});
    cal::write_json(out / (name + "-record.json"), run.record.to_json());
    emit(run.record.to_json());
    return kExitOk;
}

int cmd_eval_iia(const CommonOpts& opts) {
    const cal::json config = load_config(opts);
    cal::Mlp m = load_dnn(config);
    cal::DasConfig cfg = cal::DasConfig::from_json(config.value("das", cal::json::object()));
    if (opts.seed_set) cfg.seed = opts.seed;
    cfg.validate(m.cfg);

    const cal::TaskSpec task = cal::TaskSpec::by_name(cfg.task);
    const cal::CausalModel alg = cal::algorithm_by_name(cfg.alg);
    const cal::NodePolicy policy = cal::default_policy(alg);
    cal::InterchangeDataset ds =
        cal::gen_interchange_dataset(alg, task, cfg.n_test, cfg.seed + 2, policy);

    cal::Partition part = cfg.partition(m.cfg);
    std::unique_ptr<cal::AlignmentMap> map;
    if (config.contains("map")) {
        cal::Partition loaded_part;
        map = cal::load_map(config.at("map").get<std::string>(), &loaded_part);
        if (!loaded_part.slices.empty()) part = loaded_part;
    } else {
        map = cal::make_map(cfg.map_spec(m.cfg.width), cfg.seed);
    }
    const cal::IiaReport report = cal::eval_iia(m, *map, part, cfg.layer, ds);
    emit({{"iia", report.iia}, {"loss", report.loss}, {"n", report.n}});
    return kExitOk;
}

int cmd_greedy_id(const CommonOpts& opts) {
    const cal::json config = load_config(opts);
    const auto out = resolve_out_dir(opts, config);
    std::filesystem::create_directories(out);
    cal::Mlp m = load_dnn(config);
    const std::string alg_name = config.at("alg").get<std::string>();
    const cal::CausalModel alg = cal::algorithm_by_name(alg_name);
    const cal::TaskSpec task = cal::TaskSpec::by_name(cal::task_for_algorithm(alg_name));
    const std::size_t layer = config.value("layer", std::size_t{1});
    const std::size_t max_size = config.at("max_size").get<std::size_t>();
    const std::size_t n_samples = config.value("n_samples", std::size_t{10000});
    const std::uint64_t seed = config_seed(config);

    const cal::NodePolicy policy = cal::default_policy(alg);
    cal::InterchangeDataset ds =
        cal::gen_interchange_dataset(alg, task, n_samples, seed, policy);
    cal::GreedyResult result = cal::greedy_identity_search(m, alg, layer, max_size, ds);

    std::string csv = "round,node,coord,loss,iia\n";
    for (const auto& r : result.rounds) {
        for (const auto& [node, coord] : r.picked) {
            char num[160];
            std::snprintf(num, sizeof(num), "%zu,%s,%zu,%.17g,%.17g\n", r.round, node.c_str(),
                          coord, r.loss, r.iia);
            csv += num;
        }
    }
    const std::string name = config.value("name", "greedy-" + alg_name);
    cal::atomic_write(out / (name + "-rounds.csv"), csv);
    const cal::json report = {{"partition", result.partition.to_json()},
                              {"loss", result.final_loss},
                              {"iia", result.final_iia},
                              {"rounds", result.rounds.size()}};
    cal::write_json(out / (name + ".json"), report);
    emit(report);
    return kExitOk;
}

int cmd_sweep(const CommonOpts& opts) {
    const cal::json config = load_config(opts);
    const auto out = resolve_out_dir(opts, config);
    std::filesystem::create_directories(out);
    cal::Mlp m = load_dnn(config);
    const cal::DasConfig base = cal::DasConfig::from_json(config.value("das", cal::json::object()));
    if (!config.contains("grid")) throw cal::ValidationError("sweep config needs a grid section");
    std::vector<std::uint64_t> seeds;
    for (const auto& s : config.value("seeds", cal::json::array({0})))
        seeds.push_back(s.get<std::uint64_t>());

    cal::SweepResult result = cal::run_sweep(m, base, config.at("grid"), seeds, config, opts.jobs);
    const std::string git = cal::git_describe();
    for (auto& rec : result.records) rec.git_rev = git;

    const std::string name = config.value("name", "sweep");
    cal::write_run_records_csv(out / (name + "-runs.csv"), result.records);
    cal::write_sweep_aggregate_csv(out / (name + "-aggregate.csv"), result.groups);
    cal::json groups = cal::json::array();
    for (const auto& g : result.groups)
        groups.push_back({{"overrides", g.overrides},
                          {"n", g.n},
                          {"max_iia", g.max_iia},
                          {"mean_iia", g.mean_iia},
                          {"ci95", g.ci95}});
    emit({{"runs", result.records.size()}, {"groups", groups}});
    return kExitOk;
}

int cmd_vacuity_demo(const CommonOpts& opts) {
    const cal::json config = load_config(opts);
    const auto out = resolve_out_dir(opts, config);
    std::filesystem::create_directories(out);
    cal::Mlp m = load_dnn(config);
    const std::string alg_name = config.value("alg", "both_equality");
    const cal::CausalModel alg = cal::algorithm_by_name(alg_name);
    const cal::TaskSpec task = cal::TaskSpec::by_name(cal::task_for_algorithm(alg_name));
    const std::uint64_t seed = config_seed(config);

    cal::FiniteWorld world = cal::make_finite_world(
        m, alg, task, config.value("n_inputs", std::size_t{8}),
        config.value("layer", std::size_t{1}), seed);
    world.depth = config.value("depth", std::size_t{1});
    if (config.contains("enum_cap")) world.enum_cap = config.at("enum_cap").get<std::size_t>();

    const cal::VacuityReport report = cal::run_vacuity_demo(m, world, seed);
    const std::string name = config.value("name", "vacuity-" + alg_name);
    cal::write_json(out / (name + ".json"), report.to_json());
    emit(report.to_json());
    return kExitOk;
}

int cmd_injectivity_probe(const CommonOpts& opts) {
    const cal::json config = load_config(opts);
    const auto out = resolve_out_dir(opts, config);
    std::filesystem::create_directories(out);
    cal::Mlp m = load_dnn(config);
    const std::string task_name = config.value("task", "heq");
    const cal::TaskSpec task = cal::TaskSpec::by_name(task_name);
    const std::string alg_name =
        config.value("alg", task_name == "heq" ? "both_equality" : "and_or_and");
    const cal::CausalModel alg = cal::algorithm_by_name(alg_name);
    const std::size_t n = config.value("n", std::size_t{100000});
    const std::size_t n_ref = config.value("n_ref", std::size_t{10000});
    std::vector<std::uint64_t> seeds;
    for (const auto& s : config.value("seeds", cal::json::array({0})))
        seeds.push_back(s.get<std::uint64_t>());

    cal::json collisions = cal::json::array();
    std::vector<cal::DistanceTable> tables;
    for (std::uint64_t seed : seeds) {
        collisions.push_back(cal::collision_probe(m, task, n, seed).to_json());
        tables.push_back(cal::min_distance_table(m, alg, task, n, n_ref, seed));
    }
    const std::string name = config.value("name", "probe-" + task_name);
    cal::write_distance_csv(out / (name + "-distances.csv"), tables);
    const cal::json report = {{"collisions", collisions},
                              {"distances", tables.front().to_json()}};
    cal::write_json(out / (name + ".json"), report);
    emit(report);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"causal alignment lab"};
    app.require_subcommand(1);

    CommonOpts opts;
    int (*body)(const CommonOpts&) = nullptr;

    auto hook = [&](CLI::App* cmd, int (*fn)(const CommonOpts&)) {
        add_common(cmd, opts);
        cmd->callback([&body, fn] { body = fn; });
    };
    hook(app.add_subcommand("gen-data", "generate a dataset"), cmd_gen_data);
    hook(app.add_subcommand("train-dnn", "train a task network"), cmd_train_dnn);
    hook(app.add_subcommand("train-align", "train an alignment map"), cmd_train_align);
    hook(app.add_subcommand("eval-iia", "evaluate interchange accuracy"), cmd_eval_iia);
    hook(app.add_subcommand("greedy-id", "greedy identity coordinate search"), cmd_greedy_id);
    hook(app.add_subcommand("sweep", "grid sweep of alignment runs"), cmd_sweep);
    hook(app.add_subcommand("vacuity-demo", "finite perfect-score construction"),
         cmd_vacuity_demo);
    hook(app.add_subcommand("injectivity-probe", "collision and distance diagnostics"),
         cmd_injectivity_probe);

    CLI11_PARSE(app, argc, argv);

    auto fail = [](const char* kind, const std::exception& e, int code) {
        cal::json err = {{"error", kind}, {"message", e.what()}};
        std::cout << err.dump(2) << "\n";
        return code;
    };
    try {
        return body ? body(opts) : kExitInternal;
    } catch (const cal::ValidationError& e) {
        return fail("invalid_config", e, kExitInvalidConfig);
    } catch (const cal::ArtifactError& e) {
        return fail("missing_artifact", e, kExitMissingArtifact);
    } catch (const cal::BudgetError& e) {
        return fail("budget_exceeded", e, kExitBudget);
    } catch (const std::exception& e) {
        return fail("internal", e, kExitInternal);
    }
}

#pragma once

#include <cstring>
#include <string>
#include <vector>

#include "cal/causal.hpp"
#include "cal/errors.hpp"
#include "cal/rng.hpp"
#include "cal/serialize.hpp"

namespace cal {

// ---------------------------------------------------------------------------
// Tasks. Inputs are flat f64 vectors in [-0.5, 0.5)^dim split into blocks of
// four; equality between blocks is bitwise, which sampling makes meaningful
// by literally copying a block when an equality should hold.
//
//   heq  (dim 16): T(x) = ((x1 == x2) == (x3 == x4))
//   dlaw (dim 24): T(x) = ((x1 == x2) && (x3 == x4)) || ((x3 == x4) && (x5 == x6))
// ---------------------------------------------------------------------------

struct TaskSpec {
    std::string name;
    std::size_t input_dim = 0;
    std::size_t block = 4;
    double lo = -0.5;
    double hi = 0.5;

    std::size_t n_blocks() const { return input_dim / block; }

    static TaskSpec heq() { return {"heq", 16}; }
    static TaskSpec dlaw() { return {"dlaw", 24}; }

    static TaskSpec by_name(const std::string& n) {
        if (n == "heq") return heq();
        if (n == "dlaw") return dlaw();
        throw ValidationError("unknown task: " + n);
    }

    bool blocks_equal(const std::vector<double>& x, std::size_t a, std::size_t b) const {
        return std::memcmp(x.data() + a * block, x.data() + b * block,
                           block * sizeof(double)) == 0;
    }

    int label(const std::vector<double>& x) const {
        if (x.size() != input_dim) throw ValidationError("task input has wrong dimension");
        if (name == "heq") {
            return (blocks_equal(x, 0, 1) == blocks_equal(x, 2, 3)) ? 1 : 0;
        }
        const bool e12 = blocks_equal(x, 0, 1);
        const bool e34 = blocks_equal(x, 2, 3);
        const bool e56 = blocks_equal(x, 4, 5);
        return ((e12 && e34) || (e34 && e56)) ? 1 : 0;
    }
};

// One input with each block-pair equality holding with probability 1/2,
// arranged by copying the first block of the pair.
inline std::vector<double> sample_task_input(const TaskSpec& task, rng::Stream& rs) {
    std::vector<double> x(task.input_dim);
    const std::size_t pairs = task.n_blocks() / 2;
    for (std::size_t p = 0; p < pairs; ++p) {
        double* a = x.data() + (2 * p) * task.block;
        double* b = a + task.block;
        for (std::size_t i = 0; i < task.block; ++i) a[i] = rs.uniform(task.lo, task.hi);
        if (rs.bernoulli(0.5)) {
            std::memcpy(b, a, task.block * sizeof(double));
        } else {
            for (std::size_t i = 0; i < task.block; ++i) b[i] = rs.uniform(task.lo, task.hi);
        }
    }
    return x;
}

// ---------------------------------------------------------------------------
// Algorithm library: the five candidate causal models.
// ---------------------------------------------------------------------------

namespace detail {

inline Node input_node(const std::string& id, std::size_t block_index, std::size_t block) {
    Node n;
    n.id = id;
    n.kind = NodeKind::input;
    n.lo = block_index * block;
    n.hi = (block_index + 1) * block;
    return n;
}

inline Node fn_node(const std::string& id, NodeKind kind, const std::string& fn,
                    std::vector<std::string> parents) {
    Node n;
    n.id = id;
    n.kind = kind;
    n.fn = fn;
    n.parents = std::move(parents);
    return n;
}

}  // namespace detail

inline CausalModel make_both_equality() {
    CausalModel m;
    m.name = "both_equality";
    for (std::size_t i = 0; i < 4; ++i)
        m.add_node(detail::input_node("x" + std::to_string(i + 1), i, 4));
    m.add_node(detail::fn_node("eq12", NodeKind::inner, "eq", {"x1", "x2"}));
    m.add_node(detail::fn_node("eq34", NodeKind::inner, "eq", {"x3", "x4"}));
    m.add_node(detail::fn_node("y", NodeKind::output, "eq", {"eq12", "eq34"}));
    m.validate();
    return m;
}

inline CausalModel make_left_equality() {
    CausalModel m;
    m.name = "left_equality";
    for (std::size_t i = 0; i < 4; ++i)
        m.add_node(detail::input_node("x" + std::to_string(i + 1), i, 4));
    m.add_node(detail::fn_node("eq12", NodeKind::inner, "eq", {"x1", "x2"}));
    m.add_node(detail::fn_node("y", NodeKind::output, "eq_of_eq", {"eq12", "x3", "x4"}));
    m.validate();
    return m;
}

inline CausalModel make_identity_of_first() {
    CausalModel m;
    m.name = "identity_of_first";
    for (std::size_t i = 0; i < 4; ++i)
        m.add_node(detail::input_node("x" + std::to_string(i + 1), i, 4));
    m.add_node(detail::fn_node("vx1", NodeKind::inner, "copy", {"x1"}));
    m.add_node(
        detail::fn_node("y", NodeKind::output, "first_eq_then_eq", {"vx1", "x2", "x3", "x4"}));
    m.validate();
    return m;
}

inline CausalModel make_and_or_and() {
    CausalModel m;
    m.name = "and_or_and";
    for (std::size_t i = 0; i < 6; ++i)
        m.add_node(detail::input_node("x" + std::to_string(i + 1), i, 4));
    m.add_node(
        detail::fn_node("and12_34", NodeKind::inner, "eq_and_eq", {"x1", "x2", "x3", "x4"}));
    m.add_node(
        detail::fn_node("and34_56", NodeKind::inner, "eq_and_eq", {"x3", "x4", "x5", "x6"}));
    m.add_node(detail::fn_node("y", NodeKind::output, "or", {"and12_34", "and34_56"}));
    m.validate();
    return m;
}

inline CausalModel make_and_or() {
    CausalModel m;
    m.name = "and_or";
    for (std::size_t i = 0; i < 6; ++i)
        m.add_node(detail::input_node("x" + std::to_string(i + 1), i, 4));
    m.add_node(detail::fn_node("eq34", NodeKind::inner, "eq", {"x3", "x4"}));
    m.add_node(detail::fn_node("or12_56", NodeKind::inner, "eq_or_eq", {"x1", "x2", "x5", "x6"}));
    m.add_node(detail::fn_node("y", NodeKind::output, "and", {"eq34", "or12_56"}));
    m.validate();
    return m;
}

inline CausalModel algorithm_by_name(const std::string& name) {
    if (name == "both_equality") return make_both_equality();
    if (name == "left_equality") return make_left_equality();
    if (name == "identity_of_first") return make_identity_of_first();
    if (name == "and_or_and") return make_and_or_and();
    if (name == "and_or") return make_and_or();
    throw ValidationError("unknown algorithm: " + name);
}

inline std::vector<std::string> algorithm_names() {
    return {"both_equality", "left_equality", "identity_of_first", "and_or_and", "and_or"};
}

inline std::string task_for_algorithm(const std::string& alg) {
    if (alg == "and_or_and" || alg == "and_or") return "dlaw";
    return "heq";
}

// ---------------------------------------------------------------------------
// Node policies: the distribution over which inner nodes an interchange
// sample intervenes on.
// ---------------------------------------------------------------------------

struct NodePolicy {
    // Each choice is a set of inner node ids with a sampling weight.
    std::vector<std::pair<std::vector<std::string>, double>> choices;

    static NodePolicy always(const std::string& a) { return {{{{a}, 1.0}}}; }

    // One, the other, or both, each with probability 1/3.
    static NodePolicy thirds(const std::string& a, const std::string& b) {
        return {{{{a}, 1.0}, {{b}, 1.0}, {{a, b}, 1.0}}};
    }

    // None, one, the other, or both, each with probability 1/4. Used for
    // counterfactual DNN training where a quarter of samples are plain.
    static NodePolicy quarters(const std::string& a, const std::string& b) {
        return {{{{}, 1.0}, {{a}, 1.0}, {{b}, 1.0}, {{a, b}, 1.0}}};
    }

    const std::vector<std::string>& sample(rng::Stream& rs) const {
        if (choices.empty()) throw ValidationError("empty node policy");
        double total = 0.0;
        for (const auto& [nodes, w] : choices) total += w;
        double r = rs.uniform() * total;
        for (const auto& [nodes, w] : choices) {
            r -= w;
            if (r < 0.0) return nodes;
        }
        return choices.back().first;
    }

    json to_json() const {
        json j = json::array();
        for (const auto& [nodes, w] : choices) j.push_back({{"nodes", nodes}, {"weight", w}});
        return j;
    }

    static NodePolicy from_json(const json& j) {
        NodePolicy p;
        for (const auto& e : j)
            p.choices.emplace_back(e.at("nodes").get<std::vector<std::string>>(),
                                   e.at("weight").get<double>());
        return p;
    }
};

inline NodePolicy default_policy(const CausalModel& alg) {
    const std::vector<std::string> inner = alg.inner_ids();
    if (inner.size() == 1) return NodePolicy::always(inner[0]);
    if (inner.size() == 2) return NodePolicy::thirds(inner[0], inner[1]);
    throw ValidationError("no default policy for " + alg.name);
}

// ---------------------------------------------------------------------------
// Datasets.
// ---------------------------------------------------------------------------

struct BaseDataset {
    std::string task;
    std::size_t n = 0;
    std::size_t dim = 0;
    std::uint64_t seed = 0;
    std::vector<double> x;  // n rows of dim
    std::vector<int> y;

    std::vector<double> row(std::size_t i) const {
        return {x.begin() + static_cast<std::ptrdiff_t>(i * dim),
                x.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim)};
    }
};

struct InterchangeSample {
    std::vector<double> x_base;
    // Source input per intervened node, keyed by node id, in sorted id order.
    std::vector<std::pair<std::string, std::vector<double>>> sources;
    int y_gold = 0;
};

struct InterchangeDataset {
    std::string task;
    std::string alg;
    std::uint64_t seed = 0;
    NodePolicy policy;
    std::vector<InterchangeSample> samples;
};

inline BaseDataset gen_base_dataset(const TaskSpec& task, std::size_t n, std::uint64_t seed) {
    rng::Stream rs(seed, "data/base/" + task.name);
    BaseDataset ds;
    ds.task = task.name;
    ds.n = n;
    ds.dim = task.input_dim;
    ds.seed = seed;
    ds.x.reserve(n * task.input_dim);
    ds.y.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> x;
        if (task.name == "dlaw") {
            // Balance the label to 50/50 by choosing the target first and
            // rejection-sampling inputs until the label matches.
            const int target = rs.bernoulli(0.5) ? 1 : 0;
            std::size_t attempts = 0;
            do {
                if (++attempts > 1000)
                    throw BudgetError("dlaw base sampling exceeded 1000 attempts");
                x = sample_task_input(task, rs);
            } while (task.label(x) != target);
        } else {
            x = sample_task_input(task, rs);
        }
        ds.x.insert(ds.x.end(), x.begin(), x.end());
        ds.y.push_back(task.label(x));
    }
    return ds;
}

// Counterfactual gold label: pin each intervened node to the value it takes
// on its source input, then read the algorithm's output on the base input.
inline int counterfactual_label(const CausalModel& alg, const std::vector<double>& x_base,
                                const std::vector<std::pair<std::string, std::vector<double>>>&
                                    sources,
                                const std::vector<std::string>& order) {
    Intervention iv;
    for (const auto& [node, x_src] : sources) iv[node] = alg.run_until(x_src, {}, node, &order);
    return alg.output_label(x_base, iv, &order);
}

inline InterchangeDataset gen_interchange_dataset(const CausalModel& alg, const TaskSpec& task,
                                                  std::size_t n, std::uint64_t seed,
                                                  const NodePolicy& policy) {
    rng::Stream rs(seed, "data/interchange/" + alg.name);
    const std::vector<std::string> order = alg.topo_order();
    InterchangeDataset ds;
    ds.task = task.name;
    ds.alg = alg.name;
    ds.seed = seed;
    ds.policy = policy;
    ds.samples.reserve(n);

    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::string> subset = policy.sample(rs);
        std::sort(subset.begin(), subset.end());
        InterchangeSample s;
        if (task.name == "dlaw" && !subset.empty()) {
            // Sample base and sources jointly until the intervention flips the
            // base output exactly when the coin says it should, so half of all
            // interventions change the outcome.
            const bool want_change = rs.bernoulli(0.5);
            std::size_t attempts = 0;
            while (true) {
                if (++attempts > 1000)
                    throw BudgetError("dlaw interchange sampling exceeded 1000 attempts");
                s.x_base = sample_task_input(task, rs);
                s.sources.clear();
                for (const auto& node : subset)
                    s.sources.emplace_back(node, sample_task_input(task, rs));
                s.y_gold = counterfactual_label(alg, s.x_base, s.sources, order);
                const int y_base = alg.output_label(s.x_base, {}, &order);
                if ((s.y_gold != y_base) == want_change) break;
            }
        } else {
            s.x_base = sample_task_input(task, rs);
            for (const auto& node : subset)
                s.sources.emplace_back(node, sample_task_input(task, rs));
            s.y_gold = counterfactual_label(alg, s.x_base, s.sources, order);
        }
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Dataset files: one little-endian f64 blob of fixed-width rows plus a JSON
// manifest describing the column layout.
//
//   base row:        x[dim], y
//   interchange row: x_base[dim], then per inner node (sorted by id):
//                    present flag, x_src[dim] (zeros when absent), then y_gold
// ---------------------------------------------------------------------------

inline void save_base_dataset(const std::filesystem::path& base_path, const BaseDataset& ds) {
    const std::size_t width = ds.dim + 1;
    std::string blob(ds.n * width * sizeof(double), '\0');
    double* out = reinterpret_cast<double*>(blob.data());
    for (std::size_t i = 0; i < ds.n; ++i) {
        std::memcpy(out + i * width, ds.x.data() + i * ds.dim, ds.dim * sizeof(double));
        out[i * width + ds.dim] = static_cast<double>(ds.y[i]);
    }
    json manifest;
    manifest["kind"] = "base";
    manifest["task"] = ds.task;
    manifest["n"] = ds.n;
    manifest["dim"] = ds.dim;
    manifest["seed"] = ds.seed;
    manifest["row_width"] = width;
    manifest["columns"] = {"x[0:" + std::to_string(ds.dim) + ")", "y"};
    manifest["blob"] = base_path.filename().string() + ".bin";

    std::filesystem::path bin = base_path;
    bin += ".bin";
    std::filesystem::path man = base_path;
    man += ".json";
    atomic_write(bin, blob);
    write_json(man, manifest);
}

inline BaseDataset load_base_dataset(const std::filesystem::path& base_path) {
    std::filesystem::path man = base_path;
    man += ".json";
    json manifest = read_json(man);
    if (manifest.value("kind", "") != "base")
        throw ArtifactError("not a base dataset: " + man.string());
    BaseDataset ds;
    ds.task = manifest.at("task").get<std::string>();
    ds.n = manifest.at("n").get<std::size_t>();
    ds.dim = manifest.at("dim").get<std::size_t>();
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    const std::size_t width = manifest.at("row_width").get<std::size_t>();

    std::string blob = read_file(base_path.parent_path() / manifest.at("blob").get<std::string>());
    if (blob.size() != ds.n * width * sizeof(double))
        throw ArtifactError("base dataset blob has wrong size: " + base_path.string());
    const double* in = reinterpret_cast<const double*>(blob.data());
    ds.x.resize(ds.n * ds.dim);
    ds.y.resize(ds.n);
    for (std::size_t i = 0; i < ds.n; ++i) {
        std::memcpy(ds.x.data() + i * ds.dim, in + i * width, ds.dim * sizeof(double));
        ds.y[i] = static_cast<int>(in[i * width + ds.dim]);
    }
    return ds;
}

inline void save_interchange_dataset(const std::filesystem::path& base_path,
                                     const InterchangeDataset& ds) {
    const TaskSpec task = TaskSpec::by_name(ds.task);
    const std::vector<std::string> nodes = algorithm_by_name(ds.alg).inner_ids();
    const std::size_t dim = task.input_dim;
    const std::size_t width = dim + nodes.size() * (1 + dim) + 1;

    std::string blob(ds.samples.size() * width * sizeof(double), '\0');
    double* out = reinterpret_cast<double*>(blob.data());
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const InterchangeSample& s = ds.samples[i];
        double* row = out + i * width;
        std::memcpy(row, s.x_base.data(), dim * sizeof(double));
        std::size_t at = dim;
        for (const auto& node : nodes) {
            const std::vector<double>* src = nullptr;
            for (const auto& [id, x] : s.sources)
                if (id == node) src = &x;
            row[at++] = src ? 1.0 : 0.0;
            if (src) std::memcpy(row + at, src->data(), dim * sizeof(double));
            at += dim;
        }
        row[at] = static_cast<double>(s.y_gold);
    }

    json manifest;
    manifest["kind"] = "interchange";
    manifest["task"] = ds.task;
    manifest["alg"] = ds.alg;
    manifest["n"] = ds.samples.size();
    manifest["dim"] = dim;
    manifest["seed"] = ds.seed;
    manifest["nodes"] = nodes;
    manifest["policy"] = ds.policy.to_json();
    manifest["row_width"] = width;
    json cols = json::array();
    cols.push_back("x_base[0:" + std::to_string(dim) + ")");
    for (const auto& node : nodes) {
        cols.push_back(node + ".present");
        cols.push_back(node + ".x_src[0:" + std::to_string(dim) + ")");
    }
    cols.push_back("y_gold");
    manifest["columns"] = cols;
    manifest["blob"] = base_path.filename().string() + ".bin";

    std::filesystem::path bin = base_path;
    bin += ".bin";
    std::filesystem::path man = base_path;
    man += ".json";
    atomic_write(bin, blob);
    write_json(man, manifest);
}

inline InterchangeDataset load_interchange_dataset(const std::filesystem::path& base_path) {
    std::filesystem::path man = base_path;
    man += ".json";
    json manifest = read_json(man);
    if (manifest.value("kind", "") != "interchange")
        throw ArtifactError("not an interchange dataset: " + man.string());

    InterchangeDataset ds;
    ds.task = manifest.at("task").get<std::string>();
    ds.alg = manifest.at("alg").get<std::string>();
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    ds.policy = NodePolicy::from_json(manifest.at("policy"));
    const std::size_t n = manifest.at("n").get<std::size_t>();
    const std::size_t dim = manifest.at("dim").get<std::size_t>();
    const std::vector<std::string> nodes = manifest.at("nodes").get<std::vector<std::string>>();
    const std::size_t width = manifest.at("row_width").get<std::size_t>();

    std::string blob = read_file(base_path.parent_path() / manifest.at("blob").get<std::string>());
    if (blob.size() != n * width * sizeof(double))
        throw ArtifactError("interchange dataset blob has wrong size: " + base_path.string());
    const double* in = reinterpret_cast<const double*>(blob.data());

    ds.samples.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = in + i * width;
        InterchangeSample& s = ds.samples[i];
        s.x_base.assign(row, row + dim);
        std::size_t at = dim;
        for (const auto& node : nodes) {
            const bool present = row[at++] != 0.0;
            if (present) s.sources.emplace_back(node, std::vector<double>(row + at, row + at + dim));
            at += dim;
        }
        s.y_gold = static_cast<int>(row[at]);
    }
    return ds;
}

}  // namespace cal

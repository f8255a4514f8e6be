#pragma once

#include <cstring>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "cal/das.hpp"
#include "cal/diagnostics.hpp"

namespace cal {

// ---------------------------------------------------------------------------
// Constructive demonstration that a perfect interchange-intervention score
// can be manufactured for any algorithm on any network that merely solves
// the task, by hand-building the alignment map as a pair of lookup tables.
//
// The world is finite: a small input set X, a single construction layer, one
// latent coordinate per algorithm node, at least one coordinate left over.
// The forward table writes each input's algorithm trace into the node
// coordinates, tagged with the input's index so every coordinate stays
// injective. The inverse table sends every reachable patched code to a fresh
// hidden state that the frozen network classifies as the algorithm's
// counterfactual answer. Every interchange intervention then lands on the
// gold label by construction.
// ---------------------------------------------------------------------------

struct FiniteWorld {
    TaskSpec task;
    CausalModel alg;
    std::size_t layer = 1;  // construction layer, 1-based
    std::size_t depth = 1;  // interventions may draw sources from runs this deep
    std::vector<std::vector<double>> inputs;           // X
    std::map<std::string, std::size_t> node_coord;     // inner node -> latent coordinate
    std::size_t enum_cap = 1000000;
    double tag_eps = 0x1.0p-30;

    void validate(const MlpConfig& mlp) const {
        if (inputs.empty()) throw ValidationError("finite world has no inputs");
        std::set<std::string> seen;
        for (const auto& x : inputs) {
            if (x.size() != task.input_dim)
                throw ValidationError("finite world input has wrong dimension");
            if (!seen.insert(detail::row_bytes(x.data(), x.size())).second)
                throw ValidationError("finite world inputs must be distinct");
        }
        if (layer < 1 || layer > mlp.layers)
            throw ValidationError("construction layer out of range");
        if (depth < 1) throw ValidationError("intervention depth must be >= 1");
        const auto inner = alg.inner_ids();
        std::set<std::size_t> coords;
        for (const auto& id : inner) {
            auto it = node_coord.find(id);
            if (it == node_coord.end())
                throw ValidationError("node " + id + " has no latent coordinate");
            if (it->second >= mlp.width)
                throw ValidationError("latent coordinate out of range");
            if (!coords.insert(it->second).second)
                throw ValidationError("latent coordinates must be distinct");
        }
        if (node_coord.size() != inner.size())
            throw ValidationError("coordinate assignment names unknown nodes");
        if (coords.size() >= mlp.width)
            throw ValidationError("at least one latent coordinate must stay unused");
    }
};

// Inputs the network classifies correctly, drawn from the task distribution.
inline FiniteWorld make_finite_world(const Mlp& m, const CausalModel& alg, const TaskSpec& task,
                                     std::size_t n_inputs, std::size_t layer,
                                     std::uint64_t seed) {
    FiniteWorld world;
    world.task = task;
    world.alg = alg;
    world.layer = layer;
    rng::Stream rs(seed, "vacuity/world/" + task.name);
    std::set<std::string> seen;
    std::size_t attempts = 0;
    while (world.inputs.size() < n_inputs) {
        if (++attempts > n_inputs * 1000)
            throw BudgetError("could not collect correctly classified world inputs");
        std::vector<double> x = sample_task_input(task, rs);
        if (!seen.insert(detail::row_bytes(x.data(), x.size())).second) continue;
        Tensor row = Tensor::from({1, task.input_dim}, std::vector<double>(x));
        const auto pred = m.predict(row);
        if (pred[0] != static_cast<std::ptrdiff_t>(task.label(x) ? 1 : 0)) continue;
        world.inputs.push_back(std::move(x));
    }
    std::size_t coord = 0;
    for (const auto& id : alg.inner_ids()) world.node_coord[id] = coord++;
    return world;
}

// ---------------------------------------------------------------------------
// Assumption checks: the construction is only honest if the network solves
// the task on X, distinct inputs keep distinct hidden states, and every
// class is strictly realizable from the construction layer.
// ---------------------------------------------------------------------------

struct AssumptionReport {
    bool injective_per_layer = false;
    bool strictly_surjective = false;
    bool solves_task_on_x = false;
    std::vector<std::vector<double>> class_states;  // one realizing state per class
    std::vector<double> class_margins;

    bool all_hold() const { return injective_per_layer && strictly_surjective && solves_task_on_x; }

    json to_json() const {
        return {{"injective_per_layer", injective_per_layer},
                {"strictly_surjective", strictly_surjective},
                {"solves_task_on_x", solves_task_on_x},
                {"class_margins", class_margins}};
    }
};

namespace detail {

// Margin of class y over the other class on a single hidden row.
inline double class_margin(const Mlp& m, const Tensor& h, std::size_t layer, std::size_t y) {
    Tensor logits = m.forward_from_layer(nullptr, h, layer);
    return logits.data()[y] - logits.data()[1 - y];
}

// Gradient ascent on the class margin from random restarts. Returns the best
// strictly realizing hidden state found, or empty when every restart fails.
inline std::vector<double> find_class_state(const Mlp& m, std::size_t layer, std::size_t y,
                                            rng::Stream& rs, std::size_t restarts = 32,
                                            std::size_t steps = 2000, double lr = 0.05,
                                            double* margin_out = nullptr) {
    const std::size_t d = m.cfg.width;
    std::vector<double> best;
    double best_margin = 0.0;
    std::vector<double> sel(2, 0.0);
    sel[y] = 1.0;
    sel[1 - y] = -1.0;
    for (std::size_t r = 0; r < restarts; ++r) {
        rng::Stream rr = rs.fork("restart", r);
        std::vector<double> hv(d);
        for (double& v : hv) v = rr.uniform(-1.0, 1.0);
        Tensor h = Tensor::from({1, d}, std::move(hv));
        h.set_requires_grad(true);
        Tensor selector = Tensor::from({2, 1}, std::vector<double>(sel));
        for (std::size_t s = 0; s < steps; ++s) {
            h.clear_grad();
            Tape tape;
            Tensor logits = m.forward_from_layer(&tape, h, layer);
            Tensor margin = matmul(&tape, logits, selector);
            tape.backward(margin);
            const std::vector<double>& g = h.ensure_grad();
            for (std::size_t k = 0; k < d; ++k) h.data()[k] += lr * g[k];
        }
        const double margin = class_margin(m, h, layer, y);
        if (margin > best_margin) {
            best_margin = margin;
            best.assign(h.data(), h.data() + d);
        }
    }
    if (margin_out) *margin_out = best_margin;
    return best;
}

}  // namespace detail

inline AssumptionReport check_assumptions(const Mlp& m, const FiniteWorld& world,
                                          std::uint64_t seed) {
    world.validate(m.cfg);
    AssumptionReport report;

    std::vector<double> flat;
    for (const auto& x : world.inputs) flat.insert(flat.end(), x.begin(), x.end());
    Tensor x = Tensor::from({world.inputs.size(), world.task.input_dim}, std::move(flat));

    report.injective_per_layer = true;
    for (const Tensor& h : m.all_hidden(x))
        if (detail::count_bit_collisions(h) > 0) report.injective_per_layer = false;

    report.solves_task_on_x = true;
    const auto preds = m.predict(x);
    for (std::size_t i = 0; i < world.inputs.size(); ++i)
        if (preds[i] != static_cast<std::ptrdiff_t>(world.task.label(world.inputs[i]) ? 1 : 0))
            report.solves_task_on_x = false;

    rng::Stream rs(seed, "vacuity/surjectivity");
    report.strictly_surjective = true;
    for (std::size_t y = 0; y < m.cfg.classes; ++y) {
        rng::Stream ry = rs.fork("class", y);
        double margin = 0.0;
        std::vector<double> state = detail::find_class_state(m, world.layer, y, ry, 32, 2000,
                                                             0.05, &margin);
        if (state.empty()) {
            report.strictly_surjective = false;
            report.class_states.emplace_back();
            report.class_margins.push_back(0.0);
        } else {
            report.class_states.push_back(std::move(state));
            report.class_margins.push_back(margin);
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// The lookup alignment map. Both directions are bit-exact keyed tables; the
// map is a bijection between the hidden states it has seen and their codes.
// ---------------------------------------------------------------------------

class LookupMap {
  public:
    std::size_t dim = 0;

    void add_pair(const std::vector<double>& h, const std::vector<double>& z) {
        if (h.size() != dim || z.size() != dim)
            throw ValidationError("lookup entry has wrong dimension");
        const std::string hk = detail::row_bytes(h.data(), dim);
        const std::string zk = detail::row_bytes(z.data(), dim);
        if (fwd_.count(hk) || bwd_.count(zk))
            throw ValidationError("lookup entry collides with an existing key");
        fwd_[hk] = z;
        bwd_[zk] = h;
    }

    bool has_state(const std::vector<double>& h) const {
        return fwd_.count(detail::row_bytes(h.data(), dim)) > 0;
    }
    bool has_code(const std::vector<double>& z) const {
        return bwd_.count(detail::row_bytes(z.data(), dim)) > 0;
    }

    const std::vector<double>& apply(const std::vector<double>& h) const {
        auto it = fwd_.find(detail::row_bytes(h.data(), dim));
        if (it == fwd_.end()) throw ValidationError("hidden state not in lookup domain");
        return it->second;
    }
    const std::vector<double>& invert(const std::vector<double>& z) const {
        auto it = bwd_.find(detail::row_bytes(z.data(), dim));
        if (it == bwd_.end()) throw ValidationError("code not in lookup image");
        return it->second;
    }

    // Redirect one code to a different hidden state (used by the mutation
    // check). The old state's forward entry is dropped.
    void rebind_code(const std::vector<double>& z, const std::vector<double>& h_new) {
        const std::string zk = detail::row_bytes(z.data(), dim);
        auto it = bwd_.find(zk);
        if (it == bwd_.end()) throw ValidationError("code to rebind not found");
        fwd_.erase(detail::row_bytes(it->second.data(), dim));
        it->second = h_new;
        fwd_[detail::row_bytes(h_new.data(), dim)] = z;
    }

    std::size_t size() const { return fwd_.size(); }

    // Both tables must be mutually inverse bijections.
    void validate() const {
        if (fwd_.size() != bwd_.size())
            throw ValidationError("lookup tables have mismatched sizes");
        for (const auto& [hk, z] : fwd_) {
            auto it = bwd_.find(detail::row_bytes(z.data(), dim));
            if (it == bwd_.end() || detail::row_bytes(it->second.data(), dim) != hk)
                throw ValidationError("lookup tables are not mutually inverse");
        }
    }

    const std::map<std::string, std::vector<double>>& forward_entries() const { return fwd_; }
    const std::map<std::string, std::vector<double>>& backward_entries() const { return bwd_; }

  private:
    std::map<std::string, std::vector<double>> fwd_;  // state bytes -> code
    std::map<std::string, std::vector<double>> bwd_;  // code bytes -> state
};

// ---------------------------------------------------------------------------
// Intervention enumeration. Per node, the candidate write values are the
// codes the sources in X produce at that node's coordinate; deeper rounds
// re-read coordinates from already patched runs, which at a single layer
// reproduces the same value set, so the enumeration closes quickly.
// ---------------------------------------------------------------------------

struct EnumeratedIntervention {
    std::vector<std::pair<std::string, double>> writes;  // node -> coordinate value, sorted
    Intervention alg_iv;                                 // matching algorithm-side setting
};

struct NodeValuePool {
    std::vector<double> values;          // distinct coordinate values
    std::vector<NodeValue> alg_values;   // algorithm value matching each entry
};

struct VacuityConstruction {
    LookupMap map;
    std::vector<std::vector<double>> codes;          // code of each world input
    std::vector<std::vector<double>> hidden;         // hidden state of each world input
    std::map<std::string, NodeValuePool> pools;      // per-node write candidates
    std::vector<EnumeratedIntervention> interventions;  // includes the empty one
    std::size_t raw_combos = 0;                      // before deduplication
    std::size_t inverse_entries = 0;
};

namespace detail {

inline std::uint64_t combo_count(const std::map<std::string, NodeValuePool>& pools,
                                 std::size_t cap) {
    std::uint64_t total = 1;
    for (const auto& [id, pool] : pools) {
        total *= static_cast<std::uint64_t>(pool.values.size()) + 1;
        if (total > cap) throw BudgetError("intervention enumeration exceeds budget");
    }
    return total;
}

}  // namespace detail

// Fresh hidden states for the inverse table: jitter a realizing state and
// keep candidates the network still strictly classifies as the target class.
class FreshStateSource {
  public:
    FreshStateSource(const Mlp& m, std::size_t layer, const AssumptionReport& assumptions,
                     std::uint64_t seed)
        : m_(m), layer_(layer), base_(assumptions.class_states), rs_(seed, "vacuity/fresh") {}

    std::vector<double> take(std::size_t y, const LookupMap& map) {
        if (y >= base_.size() || base_[y].empty())
            throw ValidationError("no realizing state available for class");
        for (std::size_t attempt = 0; attempt < 1000; ++attempt) {
            std::vector<double> h = base_[y];
            rng::Stream rj = rs_.fork("jitter", counter_++);
            for (double& v : h) v += rj.uniform(-1e-6, 1e-6);
            const std::string key = detail::row_bytes(h.data(), h.size());
            if (used_.count(key) || map.has_state(h)) continue;
            Tensor row = Tensor::from({1, h.size()}, std::vector<double>(h));
            Tensor logits = m_.forward_from_layer(nullptr, row, layer_);
            if (strict_argmax_rows(logits)[0] != static_cast<std::ptrdiff_t>(y)) continue;
            used_.insert(key);
            return h;
        }
        throw BudgetError("could not produce a fresh class-realizing state");
    }

  private:
    const Mlp& m_;
    std::size_t layer_;
    std::vector<std::vector<double>> base_;
    rng::Stream rs_;
    std::size_t counter_ = 0;
    std::set<std::string> used_;
};

inline VacuityConstruction construct_map(const Mlp& m, const FiniteWorld& world,
                                         const AssumptionReport& assumptions,
                                         std::uint64_t seed) {
    world.validate(m.cfg);
    if (!assumptions.all_hold())
        throw ValidationError("construction requires all assumptions to hold");

    VacuityConstruction out;
    out.map.dim = m.cfg.width;
    const std::size_t d = m.cfg.width;
    const auto inner = world.alg.inner_ids();
    const auto order = world.alg.topo_order();

    // Forward table: each input's algorithm trace goes into the node
    // coordinates, every coordinate tagged with the input index so the map
    // stays injective in every single dimension.
    std::vector<std::map<std::string, NodeValue>> traces;
    for (std::size_t k = 0; k < world.inputs.size(); ++k) {
        const auto setting = world.alg.evaluate_in_order(order, world.inputs[k], {});
        Tensor row = Tensor::from({1, world.task.input_dim},
                                  std::vector<double>(world.inputs[k]));
        Tensor h = m.forward_to_layer(nullptr, row, world.layer);
        std::vector<double> hv(h.data(), h.data() + d);
        std::vector<double> z(d, 0.0);
        const double tag = static_cast<double>(k) * world.tag_eps;
        for (std::size_t c = 0; c < d; ++c) z[c] = tag;
        for (const auto& id : inner) {
            const NodeValue& v = setting.at(id);
            double base = 0.0;
            if (std::holds_alternative<bool>(v)) base = std::get<bool>(v) ? 1.0 : 0.0;
            z[world.node_coord.at(id)] = base + tag;
        }
        out.map.add_pair(hv, z);
        out.hidden.push_back(std::move(hv));
        out.codes.push_back(std::move(z));
        traces.push_back(std::map<std::string, NodeValue>(setting.begin(), setting.end()));
    }

    // Candidate write values per node, one per distinct source code. Deeper
    // rounds read coordinates from patched runs; at a single layer a patched
    // coordinate is always one of these values already, so the pools are
    // stable and the loop exits after the first unchanged round.
    for (const auto& id : inner) {
        NodeValuePool pool;
        std::set<std::string> seen;
        const std::size_t c = world.node_coord.at(id);
        for (std::size_t round = 0; round < world.depth; ++round) {
            const std::size_t before = pool.values.size();
            for (std::size_t k = 0; k < world.inputs.size(); ++k) {
                const double v = out.codes[k][c];
                if (!seen.insert(detail::row_bytes(&v, 1)).second) continue;
                pool.values.push_back(v);
                pool.alg_values.push_back(traces[k].at(id));
            }
            if (pool.values.size() == before) break;
        }
        out.pools[id] = std::move(pool);
    }

    // Enumerate intervention combos: for each node choose "leave alone" or
    // one candidate value. Mixed-radix counter over the node pools.
    out.raw_combos = detail::combo_count(out.pools, world.enum_cap);
    std::vector<std::string> ids;
    std::vector<std::size_t> radix;
    for (const auto& [id, pool] : out.pools) {
        ids.push_back(id);
        radix.push_back(pool.values.size() + 1);
    }
    std::set<std::string> combo_seen;
    std::vector<std::size_t> digits(ids.size(), 0);
    for (std::uint64_t n = 0; n < out.raw_combos; ++n) {
        EnumeratedIntervention iv;
        std::string key;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (digits[i] == 0) continue;
            const auto& pool = out.pools[ids[i]];
            const double v = pool.values[digits[i] - 1];
            iv.writes.emplace_back(ids[i], v);
            iv.alg_iv[ids[i]] = pool.alg_values[digits[i] - 1];
            key += ids[i];
            key += detail::row_bytes(&v, 1);
        }
        if (combo_seen.insert(key).second) out.interventions.push_back(std::move(iv));
        for (std::size_t i = 0; i < digits.size(); ++i) {
            if (++digits[i] < radix[i]) break;
            digits[i] = 0;
        }
    }

    // Inverse entries: every patched code that is not already a forward code
    // gets a fresh hidden state realizing the algorithm's counterfactual
    // label. Codes reachable from different bases never collide because the
    // unused coordinates keep the base tag.
    FreshStateSource fresh(m, world.layer, assumptions, seed);
    std::set<std::string> patched_seen;
    for (std::size_t k = 0; k < world.inputs.size(); ++k) {
        for (const auto& iv : out.interventions) {
            if (iv.writes.empty()) continue;
            std::vector<double> z = out.codes[k];
            for (const auto& [id, v] : iv.writes) z[world.node_coord.at(id)] = v;
            const std::string zk = detail::row_bytes(z.data(), d);
            if (!patched_seen.insert(zk).second) continue;  // same effective patch
            if (out.map.has_code(z)) continue;               // patch equals a base code
            const bool label = world.alg.output_label(world.inputs[k], iv.alg_iv);
            out.map.add_pair(fresh.take(label ? 1 : 0, out.map), z);
            ++out.inverse_entries;
        }
    }
    out.map.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Exhaustive verification: every base input crossed with every enumerated
// intervention must land on the algorithm's counterfactual label.
// ---------------------------------------------------------------------------

struct VacuityVerification {
    std::size_t checks = 0;
    std::size_t hits = 0;
    double iia = 0.0;

    json to_json() const { return {{"checks", checks}, {"hits", hits}, {"iia", iia}}; }
};

inline VacuityVerification verify_perfect_iia(const Mlp& m, const FiniteWorld& world,
                                              const VacuityConstruction& built) {
    VacuityVerification v;
    const std::size_t d = m.cfg.width;
    for (std::size_t k = 0; k < world.inputs.size(); ++k) {
        const std::vector<double>& z_base = built.map.apply(built.hidden[k]);
        for (const auto& iv : built.interventions) {
            std::vector<double> z = z_base;
            for (const auto& [id, val] : iv.writes) z[world.node_coord.at(id)] = val;
            const std::vector<double>& h = built.map.invert(z);
            Tensor row = Tensor::from({1, d}, std::vector<double>(h));
            Tensor logits = m.forward_from_layer(nullptr, row, world.layer);
            const auto pred = strict_argmax_rows(logits);
            const bool gold = world.alg.output_label(world.inputs[k], iv.alg_iv);
            ++v.checks;
            if (pred[0] == static_cast<std::ptrdiff_t>(gold ? 1 : 0)) ++v.hits;
        }
    }
    v.iia = v.checks ? static_cast<double>(v.hits) / static_cast<double>(v.checks) : 0.0;
    return v;
}

// Corrupt a single inverse entry so it realizes the wrong class, then
// re-verify. A sound checker must notice.
inline VacuityVerification mutated_verification(const Mlp& m, const FiniteWorld& world,
                                                const VacuityConstruction& built,
                                                const AssumptionReport& assumptions,
                                                std::uint64_t seed) {
    VacuityConstruction mutated = built;
    FreshStateSource fresh(m, world.layer, assumptions, seed ^ 0x5eedULL);

    // Find an inverse-only code: one that is not any base input's own code.
    std::set<std::string> base_codes;
    for (const auto& z : built.codes) base_codes.insert(detail::row_bytes(z.data(), z.size()));
    for (const auto& [zk, h] : built.map.backward_entries()) {
        if (base_codes.count(zk)) continue;
        std::vector<double> z(zk.size() / sizeof(double));
        std::memcpy(z.data(), zk.data(), zk.size());
        Tensor row = Tensor::from({1, h.size()}, std::vector<double>(h));
        Tensor logits = m.forward_from_layer(nullptr, row, world.layer);
        const std::size_t current = static_cast<std::size_t>(strict_argmax_rows(logits)[0]);
        mutated.map.rebind_code(z, fresh.take(1 - current, mutated.map));
        return verify_perfect_iia(m, world, mutated);
    }
    throw ValidationError("no inverse entry available to mutate");
}

// ---------------------------------------------------------------------------
// End-to-end demonstration with a JSON report.
// ---------------------------------------------------------------------------

struct VacuityReport {
    std::size_t n_inputs = 0;
    std::size_t layer = 0;
    std::size_t depth = 0;
    AssumptionReport assumptions;
    std::size_t raw_combos = 0;
    std::size_t distinct_interventions = 0;
    std::size_t forward_entries = 0;
    std::size_t inverse_entries = 0;
    VacuityVerification intact;
    VacuityVerification mutated;

    json to_json() const {
        return {{"n_inputs", n_inputs},
                {"layer", layer},
                {"depth", depth},
                {"assumptions", assumptions.to_json()},
                {"enumeration",
                 {{"raw_combos", raw_combos},
                  {"distinct_interventions", distinct_interventions}}},
                {"construction",
                 {{"forward_entries", forward_entries}, {"inverse_entries", inverse_entries}}},
                {"verification", intact.to_json()},
                {"mutated_verification", mutated.to_json()}};
    }
};

inline VacuityReport run_vacuity_demo(const Mlp& m, const FiniteWorld& world,
                                      std::uint64_t seed) {
    VacuityReport report;
    report.n_inputs = world.inputs.size();
    report.layer = world.layer;
    report.depth = world.depth;
    report.assumptions = check_assumptions(m, world, seed);
    if (!report.assumptions.all_hold()) return report;
    VacuityConstruction built = construct_map(m, world, report.assumptions, seed);
    report.raw_combos = built.raw_combos;
    report.distinct_interventions = built.interventions.size();
    report.forward_entries = built.codes.size();
    report.inverse_entries = built.inverse_entries;
    report.intact = verify_perfect_iia(m, world, built);
    report.mutated = mutated_verification(m, world, built, report.assumptions, seed);
    return report;
}

}  // namespace cal

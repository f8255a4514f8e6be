#pragma once

#include <array>
#include <cmath>
#include <cstring>
#include <string>
#include <unordered_map>
#include <vector>

#include "cal/mlp.hpp"
#include "cal/tasks.hpp"

namespace cal {

// ---------------------------------------------------------------------------
// Injectivity diagnostics: do distinct inputs ever collide in hidden space,
// and how close do hidden states get, split by what the algorithm says about
// the pair. Distances are Euclidean and computed per pair by direct
// subtraction, which stays exact for the near-zero minima of interest.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string row_bytes(const double* row, std::size_t dim) {
    return std::string(reinterpret_cast<const char*>(row), dim * sizeof(double));
}

// Count rows that repeat an earlier row's exact bit pattern.
inline std::size_t count_bit_collisions(const Tensor& rows) {
    std::unordered_map<std::string, std::size_t> seen;
    seen.reserve(rows.rows() * 2);
    std::size_t collisions = 0;
    for (std::size_t i = 0; i < rows.rows(); ++i) {
        auto [it, fresh] = seen.emplace(row_bytes(rows.data() + i * rows.cols(), rows.cols()), i);
        if (!fresh) ++collisions;
    }
    return collisions;
}

}  // namespace detail

struct CollisionReport {
    std::size_t n_sampled = 0;
    std::size_t duplicate_inputs = 0;  // removed before probing
    std::size_t n_probed = 0;
    std::vector<std::size_t> collisions_per_layer;  // index 0 = layer 1

    json to_json() const {
        return {{"n_sampled", n_sampled},
                {"duplicate_inputs", duplicate_inputs},
                {"n_probed", n_probed},
                {"collisions_per_layer", collisions_per_layer}};
    }
};

// Task-distribution inputs, deduplicated bitwise so identical inputs cannot
// masquerade as hidden-state collisions.
inline Tensor sample_distinct_inputs(const TaskSpec& task, std::size_t n, std::uint64_t seed,
                                     std::size_t* duplicates_out = nullptr) {
    rng::Stream rs(seed, "diagnostics/inputs/" + task.name);
    std::unordered_map<std::string, std::size_t> seen;
    seen.reserve(n * 2);
    std::vector<double> rows;
    rows.reserve(n * task.input_dim);
    std::size_t duplicates = 0, kept = 0;
    while (kept < n) {
        const std::vector<double> x = sample_task_input(task, rs);
        auto [it, fresh] = seen.emplace(detail::row_bytes(x.data(), x.size()), kept);
        if (!fresh) {
            ++duplicates;
            continue;
        }
        rows.insert(rows.end(), x.begin(), x.end());
        ++kept;
    }
    if (duplicates_out) *duplicates_out = duplicates;
    return Tensor::from({n, task.input_dim}, std::move(rows));
}

inline CollisionReport collision_probe(const Mlp& m, const TaskSpec& task, std::size_t n,
                                       std::uint64_t seed) {
    CollisionReport report;
    report.n_sampled = n;
    Tensor x = sample_distinct_inputs(task, n, seed, &report.duplicate_inputs);
    report.n_probed = x.rows();
    for (const Tensor& h : m.all_hidden(x))
        report.collisions_per_layer.push_back(detail::count_bit_collisions(h));
    return report;
}

// ---------------------------------------------------------------------------
// Minimum-distance table. Pairs run between every probed sample and a
// reference subset; each pair lands in "all" plus the output and
// equality-variable classes derived from the algorithm's trace.
// ---------------------------------------------------------------------------

inline constexpr std::array<const char*, 5> kDistanceClasses = {
    "all", "same_output", "not_same_output", "same_variables", "not_same_variables"};

struct DistanceTable {
    std::vector<std::string> row_names;                // input, layer1..L
    std::vector<std::array<double, 5>> mins;           // per row, per class
    std::size_t n_all = 0;
    std::size_t n_ref = 0;

    json to_json() const {
        json rows = json::array();
        for (std::size_t r = 0; r < row_names.size(); ++r) {
            json cells;
            for (std::size_t c = 0; c < kDistanceClasses.size(); ++c)
                cells[kDistanceClasses[c]] = mins[r][c];
            rows.push_back({{"row", row_names[r]}, {"min", cells}});
        }
        return {{"n_all", n_all}, {"n_ref", n_ref}, {"rows", rows}};
    }
};

// Trace signature: packed inner-node boolean values plus the output bit.
// Vector-valued inner nodes are not supported here; the diagnostics run on
// the equality algorithms whose traces are boolean.
inline std::pair<std::vector<std::uint32_t>, std::vector<std::uint8_t>> trace_signatures(
    const CausalModel& alg, const Tensor& x) {
    const std::vector<std::string> order = alg.topo_order();
    const std::vector<std::string> inner = alg.inner_ids();
    std::vector<std::uint32_t> vars(x.rows());
    std::vector<std::uint8_t> outs(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const std::vector<double> row(x.data() + i * x.cols(), x.data() + (i + 1) * x.cols());
        const auto setting = alg.evaluate_in_order(order, row, {});
        std::uint32_t sig = 0;
        for (std::size_t k = 0; k < inner.size(); ++k)
            if (value_bool(setting.at(inner[k]))) sig |= (1u << k);
        vars[i] = sig;
        outs[i] = static_cast<std::uint8_t>(value_bool(setting.at(alg.output_id())) ? 1 : 0);
    }
    return {vars, outs};
}

namespace detail {

// Exact minimum squared distances over all x ref pairs for one layer,
// blocked into tiles so the reference rows stay cache resident.
inline void min_distance_pass(const Tensor& rows, std::size_t n_ref,
                              const std::vector<std::uint32_t>& vars,
                              const std::vector<std::uint8_t>& outs,
                              std::array<double, 5>& mins) {
    const std::size_t n = rows.rows(), d = rows.cols();
    constexpr std::size_t tile = 1024;
    mins.fill(std::numeric_limits<double>::infinity());
    for (std::size_t j0 = 0; j0 < n_ref; j0 += tile) {
        const std::size_t j1 = std::min(j0 + tile, n_ref);
        for (std::size_t i0 = 0; i0 < n; i0 += tile) {
            const std::size_t i1 = std::min(i0 + tile, n);
            for (std::size_t i = i0; i < i1; ++i) {
                const double* a = rows.data() + i * d;
                for (std::size_t j = j0; j < j1; ++j) {
                    if (i == j) continue;
                    const double* b = rows.data() + j * d;
                    double d2 = 0.0;
                    for (std::size_t k = 0; k < d; ++k) {
                        const double diff = a[k] - b[k];
                        d2 += diff * diff;
                    }
                    mins[0] = std::min(mins[0], d2);
                    mins[outs[i] == outs[j] ? 1 : 2] =
                        std::min(mins[outs[i] == outs[j] ? 1 : 2], d2);
                    mins[vars[i] == vars[j] ? 3 : 4] =
                        std::min(mins[vars[i] == vars[j] ? 3 : 4], d2);
                }
            }
        }
    }
}

}  // namespace detail

inline DistanceTable min_distance_table(const Mlp& m, const CausalModel& alg,
                                        const TaskSpec& task, std::size_t n_all,
                                        std::size_t n_ref, std::uint64_t seed) {
    if (n_ref == 0 || n_ref > n_all)
        throw ValidationError("distance table needs 0 < n_ref <= n_all");
    Tensor x = sample_distinct_inputs(task, n_all, seed);
    const auto [vars, outs] = trace_signatures(alg, x);

    DistanceTable table;
    table.n_all = n_all;
    table.n_ref = n_ref;
    table.row_names.push_back("input");
    std::vector<Tensor> layers{x};
    for (std::size_t l = 0; l < m.cfg.layers; ++l)
        table.row_names.push_back("layer" + std::to_string(l + 1));
    for (Tensor& h : m.all_hidden(x)) layers.push_back(std::move(h));

    for (const Tensor& rows : layers) {
        std::array<double, 5> mins{};
        detail::min_distance_pass(rows, n_ref, vars, outs, mins);
        for (double& v : mins) v = std::sqrt(v);
        table.mins.push_back(mins);
    }
    return table;
}

// CSV in the table's layout: one row per layer, one mean/sd column pair per
// pair class, aggregated over per-seed tables.
inline void write_distance_csv(const std::filesystem::path& path,
                               const std::vector<DistanceTable>& per_seed) {
    if (per_seed.empty()) throw ValidationError("no distance tables to aggregate");
    std::string csv = "row";
    for (const char* cls : kDistanceClasses)
        csv += std::string(",") + cls + "_mean," + cls + "_sd";
    csv += "\n";
    const std::size_t rows = per_seed.front().row_names.size();
    for (std::size_t r = 0; r < rows; ++r) {
        csv += per_seed.front().row_names[r];
        for (std::size_t c = 0; c < kDistanceClasses.size(); ++c) {
            double mean = 0.0;
            for (const auto& t : per_seed) mean += t.mins[r][c];
            mean /= static_cast<double>(per_seed.size());
            double var = 0.0;
            for (const auto& t : per_seed) {
                const double dv = t.mins[r][c] - mean;
                var += dv * dv;
            }
            const double sd =
                per_seed.size() > 1 ? std::sqrt(var / static_cast<double>(per_seed.size() - 1))
                                    : 0.0;
            char cell[80];
            std::snprintf(cell, sizeof(cell), ",%.17g,%.17g", mean, sd);
            csv += cell;
        }
        csv += "\n";
    }
    atomic_write(path, csv);
}

}  // namespace cal

#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cal/alignment.hpp"
#include "cal/errors.hpp"
#include "cal/mlp.hpp"
#include "cal/optim.hpp"
#include "cal/tasks.hpp"

namespace cal {

// ---------------------------------------------------------------------------
// Distributed alignment search. The map is trained so that overwriting its
// latent slices with source values makes the network produce the algorithm's
// counterfactual output:
//
//   z      = apply(map, h_base)
//   z'     = z with coords(v) <- apply(map, h_src_v)[coords(v)] for each v
//   logits = forward_from_layer(invert(map, z'), layer)
//
// The network is frozen during DAS; gradients reach the map through both the
// base and source paths.
// ---------------------------------------------------------------------------

struct DasConfig {
    std::string task = "heq";
    std::string alg = "both_equality";
    std::string family = "revnet";
    std::size_t layer = 1;
    std::size_t intervention_size = 8;
    std::size_t revnet_blocks = 1;   // L_rn
    std::size_t revnet_hidden = 16;  // d_rn
    std::size_t batch = 6400;
    std::size_t max_epochs = 50;
    std::size_t patience = 5;
    double lr = 1e-3;
    double improvement_threshold = 1e-3;
    std::size_t n_train = 128000;
    std::size_t n_eval = 10000;
    std::size_t n_test = 10000;
    std::uint64_t seed = 0;

    void validate(const MlpConfig& mlp) const {
        TaskSpec::by_name(task);
        const CausalModel alg_model = algorithm_by_name(alg);
        if (task_for_algorithm(alg) != task)
            throw ValidationError("algorithm " + alg + " does not run on task " + task);
        if (layer < 1 || layer > mlp.layers)
            throw ValidationError("das layer out of range: " + std::to_string(layer));
        if (intervention_size == 0)
            throw ValidationError("intervention size must be positive");
        const std::size_t inner = alg_model.inner_ids().size();
        if (intervention_size * inner > mlp.width)
            throw ValidationError("intervention size " + std::to_string(intervention_size) +
                                  " x " + std::to_string(inner) + " nodes exceeds layer dim " +
                                  std::to_string(mlp.width));
        MapSpec spec{family, mlp.width, revnet_blocks, revnet_hidden};
        spec.validate();
        if (batch == 0 || max_epochs == 0) throw ValidationError("batch and epochs must be positive");
    }

    MapSpec map_spec(std::size_t dim) const {
        return MapSpec{family, dim, revnet_blocks, revnet_hidden};
    }

    Partition partition(const MlpConfig& mlp) const {
        return Partition::contiguous(algorithm_by_name(alg).inner_ids(), intervention_size,
                                     mlp.width);
    }

    json to_json() const {
        return {{"task", task},
                {"alg", alg},
                {"family", family},
                {"layer", layer},
                {"intervention_size", intervention_size},
                {"revnet_blocks", revnet_blocks},
                {"revnet_hidden", revnet_hidden},
                {"batch", batch},
                {"max_epochs", max_epochs},
                {"patience", patience},
                {"lr", lr},
                {"improvement_threshold", improvement_threshold},
                {"n_train", n_train},
                {"n_eval", n_eval},
                {"n_test", n_test},
                {"seed", seed}};
    }

    static DasConfig from_json(const json& js) {
        DasConfig cfg;
        cfg.task = js.value("task", cfg.task);
        cfg.alg = js.value("alg", cfg.alg);
        cfg.family = js.value("family", cfg.family);
        cfg.layer = js.value("layer", cfg.layer);
        cfg.intervention_size = js.value("intervention_size", cfg.intervention_size);
        cfg.revnet_blocks = js.value("revnet_blocks", cfg.revnet_blocks);
        cfg.revnet_hidden = js.value("revnet_hidden", cfg.revnet_hidden);
        cfg.batch = js.value("batch", cfg.batch);
        cfg.max_epochs = js.value("max_epochs", cfg.max_epochs);
        cfg.patience = js.value("patience", cfg.patience);
        cfg.lr = js.value("lr", cfg.lr);
        cfg.improvement_threshold = js.value("improvement_threshold", cfg.improvement_threshold);
        cfg.n_train = js.value("n_train", cfg.n_train);
        cfg.n_eval = js.value("n_eval", cfg.n_eval);
        cfg.n_test = js.value("n_test", cfg.n_test);
        cfg.seed = js.value("seed", cfg.seed);
        return cfg;
    }
};

// ---------------------------------------------------------------------------
// Batching: samples grouped by intervened node subset so each group patches
// one fixed coordinate set.
// ---------------------------------------------------------------------------

struct GroupedBatch {
    std::vector<std::string> subset;  // sorted node ids, possibly empty
    Tensor x_base;                    // [g x input_dim]
    std::vector<Tensor> x_src;        // one per subset entry, [g x input_dim]
    std::vector<int> y_gold;
};

inline std::vector<GroupedBatch> group_samples(const InterchangeDataset& ds,
                                               const std::vector<std::size_t>& idx,
                                               std::size_t from, std::size_t to,
                                               std::size_t input_dim) {
    std::map<std::vector<std::string>, std::vector<std::size_t>> by_subset;
    for (std::size_t i = from; i < to; ++i) {
        const InterchangeSample& s = ds.samples[idx[i]];
        std::vector<std::string> key;
        key.reserve(s.sources.size());
        for (const auto& [node, x] : s.sources) key.push_back(node);
        by_subset[key].push_back(idx[i]);
    }
    std::vector<GroupedBatch> groups;
    groups.reserve(by_subset.size());
    for (const auto& [subset, members] : by_subset) {
        GroupedBatch g;
        g.subset = subset;
        g.x_base = Tensor({members.size(), input_dim});
        g.x_src.reserve(subset.size());
        // one distinct tensor per source column; Tensor copies share storage
        for (std::size_t k = 0; k < subset.size(); ++k)
            g.x_src.emplace_back(Tensor({members.size(), input_dim}));
        g.y_gold.reserve(members.size());
        for (std::size_t r = 0; r < members.size(); ++r) {
            const InterchangeSample& s = ds.samples[members[r]];
            std::memcpy(g.x_base.data() + r * input_dim, s.x_base.data(),
                        input_dim * sizeof(double));
            for (std::size_t k = 0; k < subset.size(); ++k)
                std::memcpy(g.x_src[k].data() + r * input_dim, s.sources[k].second.data(),
                            input_dim * sizeof(double));
            g.y_gold.push_back(s.y_gold);
        }
        groups.push_back(std::move(g));
    }
    return groups;
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    return idx;
}

// Intervened forward pass for one group. With train_dnn the hidden states go
// on the tape so network parameters receive gradients; otherwise they are
// constants and only the map trains.
inline Tensor intervened_logits(Tape* tape, const Mlp& m, const AlignmentMap& map,
                                const Partition& part, std::size_t layer,
                                const GroupedBatch& g, bool train_dnn = false) {
    Tape* dnn_tape = train_dnn ? tape : nullptr;
    Tensor h_base = m.forward_to_layer(dnn_tape, g.x_base, layer);
    Tensor z = map.apply(tape, h_base);
    for (std::size_t k = 0; k < g.subset.size(); ++k) {
        Tensor h_src = m.forward_to_layer(dnn_tape, g.x_src[k], layer);
        Tensor z_src = map.apply(tape, h_src);
        z = overwrite_cols(tape, z, z_src, part.coords(g.subset[k]));
    }
    Tensor h_patched = map.invert(tape, z);
    return m.forward_from_layer(tape, h_patched, layer);
}

// ---------------------------------------------------------------------------
// IIA evaluation: fraction of samples whose intervened strict-argmax equals
// the algorithm's counterfactual label. Also reports mean cross-entropy.
// ---------------------------------------------------------------------------

struct IiaReport {
    double iia = 0.0;
    double loss = 0.0;
    std::size_t n = 0;
};

inline IiaReport eval_iia(const Mlp& m, AlignmentMap& map, const Partition& part,
                          std::size_t layer, const InterchangeDataset& ds) {
    map.prepare(nullptr);
    const std::vector<std::size_t> idx = iota_indices(ds.samples.size());
    const std::vector<GroupedBatch> groups =
        group_samples(ds, idx, 0, idx.size(), m.cfg.input_dim);
    IiaReport report;
    double loss_weighted = 0.0;
    std::size_t hits = 0;
    for (const GroupedBatch& g : groups) {
        Tensor logits = intervened_logits(nullptr, m, map, part, layer, g);
        loss_weighted +=
            softmax_cross_entropy(nullptr, logits, g.y_gold).item() * static_cast<double>(g.y_gold.size());
        const std::vector<int> pred = strict_argmax_rows(logits);
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == g.y_gold[i]) ++hits;
        report.n += g.y_gold.size();
    }
    report.iia = static_cast<double>(hits) / static_cast<double>(report.n);
    report.loss = loss_weighted / static_cast<double>(report.n);
    return report;
}

// ---------------------------------------------------------------------------
// DAS training.
// ---------------------------------------------------------------------------

struct DasEpochMetric {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double eval_loss = 0.0;
    double eval_iia = 0.0;
};

struct DasTrainResult {
    std::vector<DasEpochMetric> history;
    double best_eval_iia = 0.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
};

inline DasTrainResult train_das(const Mlp& m, AlignmentMap& map, const Partition& part,
                                const DasConfig& cfg, const InterchangeDataset& train_ds,
                                const InterchangeDataset& eval_ds) {
    cfg.validate(m.cfg);
    part.validate();
    const std::string frozen = m.param_bytes();

    std::vector<Tensor> params = map.params();
    Adam opt(params, {cfg.lr});
    rng::Stream rs(cfg.seed, "das/train");

    DasTrainResult result;
    auto best = detail::snapshot_params(params);
    std::size_t bad_epochs = 0;
    const std::size_t n = train_ds.samples.size();

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng::Stream shuffle_rs = rs.fork("epoch", epoch);
        std::vector<std::size_t> idx = shuffle_rs.permutation(n);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t at = 0; at < n; at += cfg.batch) {
            const std::size_t hi = std::min(at + cfg.batch, n);
            const std::vector<GroupedBatch> groups =
                group_samples(train_ds, idx, at, hi, m.cfg.input_dim);
            Tape tape;
            map.prepare(&tape);
            Tensor loss;
            bool first = true;
            for (const GroupedBatch& g : groups) {
                Tensor logits = intervened_logits(&tape, m, map, part, cfg.layer, g);
                Tensor part_loss =
                    scale(&tape, softmax_cross_entropy(&tape, logits, g.y_gold),
                          static_cast<double>(g.y_gold.size()) / static_cast<double>(hi - at));
                loss = first ? part_loss : add(&tape, loss, part_loss);
                first = false;
            }
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
            loss_sum += loss.item();
            ++batches;
        }
        const IiaReport eval = eval_iia(m, map, part, cfg.layer, eval_ds);
        result.history.push_back(
            {epoch, loss_sum / static_cast<double>(batches), eval.loss, eval.iia});
        result.epochs_run = epoch;
        if (eval.iia > result.best_eval_iia + cfg.improvement_threshold ||
            result.history.size() == 1) {
            result.best_eval_iia = eval.iia;
            result.best_epoch = epoch;
            best = detail::snapshot_params(params);
            bad_epochs = 0;
        } else if (++bad_epochs >= cfg.patience) {
            break;
        }
    }
    detail::restore_params(params, best);

    if (m.param_bytes() != frozen)
        throw NumericError("network parameters changed during DAS training");
    return result;
}

// ---------------------------------------------------------------------------
// Greedy partition search for the identity map. Each round adds one neuron
// per inner node: with at most two nodes every ordered candidate combination
// is scored jointly; with more, nodes pick sequentially in sorted order.
// Scores are the Eq.-7 style cross-entropy of the intervened forward pass on
// the scoring dataset. Hidden states are constant here, so they are computed
// once up front.
// ---------------------------------------------------------------------------

struct GreedyRound {
    std::size_t round = 0;
    std::vector<std::pair<std::string, std::size_t>> picked;  // node -> neuron
    double loss = 0.0;
    double iia = 0.0;
};

struct GreedyResult {
    Partition partition;
    std::vector<GreedyRound> rounds;
    double final_iia = 0.0;
    double final_loss = 0.0;
};

namespace detail {

struct PreparedGroup {
    std::vector<std::string> subset;
    Tensor h_base;               // [g x d] at the search layer
    std::vector<Tensor> h_src;   // per subset entry
    std::vector<int> y_gold;
};

inline std::vector<PreparedGroup> prepare_hidden_groups(const Mlp& m, std::size_t layer,
                                                        const InterchangeDataset& ds) {
    const std::vector<std::size_t> idx = iota_indices(ds.samples.size());
    std::vector<PreparedGroup> out;
    for (const GroupedBatch& g : group_samples(ds, idx, 0, idx.size(), m.cfg.input_dim)) {
        PreparedGroup p;
        p.subset = g.subset;
        p.h_base = m.forward_to_layer(nullptr, g.x_base, layer);
        for (const Tensor& xs : g.x_src)
            p.h_src.push_back(m.forward_to_layer(nullptr, xs, layer));
        p.y_gold = g.y_gold;
        out.push_back(std::move(p));
    }
    return out;
}

// Identity-map scoring of a coordinate assignment on prepared hidden states.
inline std::pair<double, double> score_assignment(
    const Mlp& m, std::size_t layer,
    const std::map<std::string, std::vector<std::size_t>>& assign,
    const std::vector<PreparedGroup>& groups) {
    double loss_weighted = 0.0;
    std::size_t hits = 0, n = 0;
    for (const PreparedGroup& g : groups) {
        Tensor patched({g.h_base.rows(), g.h_base.cols()});
        patched.value() = g.h_base.value();
        const std::size_t d = g.h_base.cols();
        for (std::size_t k = 0; k < g.subset.size(); ++k) {
            auto it = assign.find(g.subset[k]);
            if (it == assign.end()) continue;
            for (std::size_t r = 0; r < patched.rows(); ++r)
                for (std::size_t c : it->second)
                    patched.data()[r * d + c] = g.h_src[k].data()[r * d + c];
        }
        Tensor logits = m.forward_from_layer(nullptr, patched, layer);
        loss_weighted += softmax_cross_entropy(nullptr, logits, g.y_gold).item() *
                         static_cast<double>(g.y_gold.size());
        const std::vector<int> pred = strict_argmax_rows(logits);
        for (std::size_t i = 0; i < pred.size(); ++i)
            if (pred[i] == g.y_gold[i]) ++hits;
        n += g.y_gold.size();
    }
    return {loss_weighted / static_cast<double>(n),
            static_cast<double>(hits) / static_cast<double>(n)};
}

}  // namespace detail

inline GreedyResult greedy_identity_search(const Mlp& m, const CausalModel& alg,
                                           std::size_t layer, std::size_t max_size,
                                           const InterchangeDataset& score_ds) {
    const std::vector<std::string> nodes = alg.inner_ids();
    const std::size_t d = m.cfg.width;
    if (max_size == 0) throw ValidationError("greedy search needs max_size >= 1");
    if (max_size * nodes.size() > d - 1)
        throw ValidationError("greedy search must leave at least one unused neuron");
    if (layer < 1 || layer > m.cfg.layers)
        throw ValidationError("greedy search layer out of range");

    const auto groups = detail::prepare_hidden_groups(m, layer, score_ds);
    std::map<std::string, std::vector<std::size_t>> assign;
    for (const auto& node : nodes) assign[node] = {};
    std::vector<bool> taken(d, false);

    GreedyResult result;
    for (std::size_t round = 1; round <= max_size; ++round) {
        GreedyRound rec;
        rec.round = round;
        if (nodes.size() <= 2) {
            // Joint exhaustive scoring of one new neuron per node.
            double best_loss = 0.0, best_iia = 0.0;
            std::vector<std::size_t> best_pick;
            bool have = false;
            std::vector<std::size_t> free;
            for (std::size_t c = 0; c < d; ++c)
                if (!taken[c]) free.push_back(c);
            std::vector<std::size_t> pick(nodes.size());
            auto consider = [&](const std::vector<std::size_t>& cand) {
                auto trial = assign;
                for (std::size_t k = 0; k < nodes.size(); ++k)
                    trial[nodes[k]].push_back(cand[k]);
                const auto [loss, iia] = detail::score_assignment(m, layer, trial, groups);
                if (!have || loss < best_loss) {
                    have = true;
                    best_loss = loss;
                    best_iia = iia;
                    best_pick = cand;
                }
            };
            if (nodes.size() == 1) {
                for (std::size_t c : free) consider({c});
            } else {
                for (std::size_t c1 : free)
                    for (std::size_t c2 : free)
                        if (c1 != c2) consider({c1, c2});
            }
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                assign[nodes[k]].push_back(best_pick[k]);
                taken[best_pick[k]] = true;
                rec.picked.emplace_back(nodes[k], best_pick[k]);
            }
            rec.loss = best_loss;
            rec.iia = best_iia;
        } else {
            // Sequential per-node picks in sorted node order.
            for (const auto& node : nodes) {
                double best_loss = 0.0, best_iia = 0.0;
                std::size_t best_c = 0;
                bool have = false;
                for (std::size_t c = 0; c < d; ++c) {
                    if (taken[c]) continue;
                    auto trial = assign;
                    trial[node].push_back(c);
                    const auto [loss, iia] = detail::score_assignment(m, layer, trial, groups);
                    if (!have || loss < best_loss) {
                        have = true;
                        best_loss = loss;
                        best_iia = iia;
                        best_c = c;
                    }
                }
                assign[node].push_back(best_c);
                taken[best_c] = true;
                rec.picked.emplace_back(node, best_c);
                rec.loss = best_loss;
                rec.iia = best_iia;
            }
        }
        result.rounds.push_back(std::move(rec));
    }

    Partition part;
    part.layer_dim = d;
    for (const auto& node : nodes) {
        std::vector<std::size_t> coords = assign[node];
        std::sort(coords.begin(), coords.end());
        part.slices.emplace_back(node, std::move(coords));
    }
    part.validate();
    const auto [loss, iia] = detail::score_assignment(
        m, layer,
        std::map<std::string, std::vector<std::size_t>>(assign.begin(), assign.end()), groups);
    result.partition = part;
    result.final_loss = loss;
    result.final_iia = iia;
    return result;
}

// ---------------------------------------------------------------------------
// Counterfactual network training: the identity map is fixed to the given
// partition and the network itself is trained on a mixture of plain and
// intervened samples (the dataset's node policy controls the mixture), with
// gradients flowing through base and source paths alike.
// ---------------------------------------------------------------------------

struct CounterfactualTrainConfig {
    std::size_t batch = 1024;
    std::size_t max_epochs = 20;
    std::size_t patience = 3;
    double lr = 1e-3;
    double improvement_threshold = 0.0;
};

inline double eval_intervened_accuracy(const Mlp& m, const Partition& part, std::size_t layer,
                                       const InterchangeDataset& ds) {
    IdentityMap id(m.cfg.width);
    return eval_iia(m, id, part, layer, ds).iia;
}

inline TrainResult train_with_interventions(Mlp& m, const Partition& part, std::size_t layer,
                                            const CounterfactualTrainConfig& cfg,
                                            const InterchangeDataset& train_ds,
                                            const InterchangeDataset& eval_ds,
                                            std::uint64_t seed) {
    part.validate();
    if (layer < 1 || layer > m.cfg.layers)
        throw ValidationError("intervention layer out of range");
    m.set_requires_grad(true);
    IdentityMap id(m.cfg.width);
    std::vector<Tensor> params = m.params();
    Adam opt(params, {cfg.lr});
    rng::Stream rs(seed, "mlp/counterfactual");

    TrainResult result;
    auto best = detail::snapshot_params(params);
    std::size_t bad_epochs = 0;
    const std::size_t n = train_ds.samples.size();

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng::Stream shuffle_rs = rs.fork("epoch", epoch);
        std::vector<std::size_t> idx = shuffle_rs.permutation(n);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t at = 0; at < n; at += cfg.batch) {
            const std::size_t hi = std::min(at + cfg.batch, n);
            const std::vector<GroupedBatch> groups =
                group_samples(train_ds, idx, at, hi, m.cfg.input_dim);
            Tape tape;
            Tensor loss;
            bool first = true;
            for (const GroupedBatch& g : groups) {
                Tensor logits = intervened_logits(&tape, m, id, part, layer, g, true);
                Tensor part_loss =
                    scale(&tape, softmax_cross_entropy(&tape, logits, g.y_gold),
                          static_cast<double>(g.y_gold.size()) / static_cast<double>(hi - at));
                loss = first ? part_loss : add(&tape, loss, part_loss);
                first = false;
            }
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
            loss_sum += loss.item();
            ++batches;
        }
        const double eval_acc = eval_intervened_accuracy(m, part, layer, eval_ds);
        result.history.push_back({epoch, loss_sum / static_cast<double>(batches), eval_acc});
        result.epochs_run = epoch;
        if (eval_acc > result.best_eval + cfg.improvement_threshold ||
            result.history.size() == 1) {
            result.best_eval = eval_acc;
            result.best_epoch = epoch;
            best = detail::snapshot_params(params);
            bad_epochs = 0;
        } else if (++bad_epochs >= cfg.patience) {
            break;
        }
    }
    detail::restore_params(params, best);
    return result;
}

}  // namespace cal

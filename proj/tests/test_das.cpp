#include <catch2/catch_amalgamated.hpp>

#include "cal/das.hpp"
#include "gradcheck.hpp"

using namespace cal;

namespace {

Mlp trained_heq_mlp() {
    // trained once, shared across test cases
    static Mlp m = [] {
        MlpConfig cfg;
        cfg.input_dim = 16;
        cfg.width = 16;
        cfg.layers = 3;
        cfg.classes = 2;
        Mlp net = Mlp::init(cfg, 11);
        BaseDataset train = gen_base_dataset(TaskSpec::heq(), 65536, 12);
        BaseDataset eval = gen_base_dataset(TaskSpec::heq(), 4000, 13);
        MlpTrainConfig tcfg;
        tcfg.max_epochs = 12;
        tcfg.patience = 12;
        train_mlp(net, train, eval, tcfg, 14);
        return net;
    }();
    return m;
}

// Straight line per sample recomputation of the interchange score, no
// batching and no grouping, used as the oracle for eval_iia.
double oracle_iia(const Mlp& m, AlignmentMap& map, const Partition& part, std::size_t layer,
                  const InterchangeDataset& ds) {
    map.prepare(nullptr);
    std::size_t hits = 0;
    for (const auto& s : ds.samples) {
        Tensor x_base = Tensor::from({1, m.cfg.input_dim}, std::vector<double>(s.x_base));
        Tensor z = map.apply(nullptr, m.forward_to_layer(nullptr, x_base, layer));
        std::vector<double> patched(z.data(), z.data() + z.numel());
        for (const auto& [node, x_src] : s.sources) {
            Tensor src = Tensor::from({1, m.cfg.input_dim}, std::vector<double>(x_src));
            Tensor z_src = map.apply(nullptr, m.forward_to_layer(nullptr, src, layer));
            for (std::size_t c : part.coords(node)) patched[c] = z_src.data()[c];
        }
        Tensor h = map.invert(nullptr, Tensor::from({1, z.numel()}, std::move(patched)));
        Tensor logits = m.forward_from_layer(nullptr, h, layer);
        if (strict_argmax_rows(logits)[0] == s.y_gold) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(ds.samples.size());
}

}  // namespace

TEST_CASE("grouping partitions the dataset by intervened subset") {
    const CausalModel alg = algorithm_by_name("both_equality");
    InterchangeDataset ds =
        gen_interchange_dataset(alg, TaskSpec::heq(), 600, 21, default_policy(alg));
    const auto idx = iota_indices(ds.samples.size());
    const auto groups = group_samples(ds, idx, 0, idx.size(), 16);
    REQUIRE(groups.size() == 3);
    std::size_t total = 0;
    for (const auto& g : groups) {
        REQUIRE(g.x_base.rows() == g.y_gold.size());
        REQUIRE(g.x_src.size() == g.subset.size());
        for (std::size_t i = 1; i < g.subset.size(); ++i)
            REQUIRE(g.subset[i - 1] < g.subset[i]);
        total += g.y_gold.size();
    }
    REQUIRE(total == 600);
}

TEST_CASE("eval_iia matches the per sample oracle exactly") {
    Mlp m = trained_heq_mlp();
    const CausalModel alg = algorithm_by_name("both_equality");
    InterchangeDataset ds =
        gen_interchange_dataset(alg, TaskSpec::heq(), 100, 22, default_policy(alg));
    DasConfig cfg;
    const Partition part = cfg.partition(m.cfg);

    // a perturbed orthogonal map makes the check non trivial
    OrthogonalMap map(16);
    rng::Stream rs(23, "das-test/perturb");
    for (Tensor& p : map.params())
        for (std::size_t i = 0; i < p.numel(); ++i) p.data()[i] = rs.uniform(-0.2, 0.2);

    const IiaReport fast = eval_iia(m, map, part, 1, ds);
    const double slow = oracle_iia(m, map, part, 1, ds);
    REQUIRE(fast.iia == slow);
    REQUIRE(fast.n == 100);
}

TEST_CASE("training loss gradients match finite differences end to end") {
    // The full objective: base and source forwards, splice, inverse, readout,
    // cross entropy — differentiated into the map parameters only.
    Mlp m = trained_heq_mlp();
    const CausalModel alg = algorithm_by_name("both_equality");
    InterchangeDataset ds =
        gen_interchange_dataset(alg, TaskSpec::heq(), 60, 25, default_policy(alg));
    const auto idx = iota_indices(ds.samples.size());
    const auto groups = group_samples(ds, idx, 0, idx.size(), m.cfg.input_dim);
    DasConfig dcfg;
    const Partition part = dcfg.partition(m.cfg);
    const double inv_n = 1.0 / static_cast<double>(ds.samples.size());

    auto check_map = [&](AlignmentMap& map) {
        auto fn = [&](Tape* tape) {
            map.prepare(tape);
            Tensor loss;
            bool first = true;
            for (const auto& g : groups) {
                Tensor logits = intervened_logits(tape, m, map, part, 1, g);
                Tensor part_loss = scale(tape, softmax_cross_entropy(tape, logits, g.y_gold),
                                         static_cast<double>(g.y_gold.size()) * inv_n);
                loss = first ? part_loss : add(tape, loss, part_loss);
                first = false;
            }
            return loss;
        };
        return gradcheck::run(map.params(), fn);
    };

    RevNetMap rev(16, 1, 4, 26);
    const auto rr = check_map(rev);
    REQUIRE(rr.checked > 0);
    REQUIRE(rr.max_abs_err < 1e-6);

    OrthogonalMap orth(16);
    rng::Stream rs(27, "das-test/orth-init");
    for (Tensor& p : orth.params())
        for (std::size_t i = 0; i < p.numel(); ++i) p.data()[i] = rs.uniform(-0.2, 0.2);
    const auto orr = check_map(orth);
    REQUIRE(orr.checked > 0);
    REQUIRE(orr.max_abs_err < 1e-6);
}

TEST_CASE("iia is at chance for a frozen random network") {
    MlpConfig cfg;
    cfg.input_dim = 16;
    cfg.width = 16;
    cfg.layers = 3;
    cfg.classes = 2;
    Mlp random_net = Mlp::init(cfg, 31);
    const CausalModel alg = algorithm_by_name("both_equality");
    InterchangeDataset ds =
        gen_interchange_dataset(alg, TaskSpec::heq(), 10000, 32, default_policy(alg));
    IdentityMap map(16);
    DasConfig dcfg;
    const IiaReport r = eval_iia(random_net, map, dcfg.partition(cfg), 1, ds);
    REQUIRE(r.iia > 0.45);
    REQUIRE(r.iia < 0.55);
}

TEST_CASE("das training improves iia and freezes the network") {
    Mlp m = trained_heq_mlp();
    const std::string before = m.param_bytes();

    DasConfig cfg;
    cfg.family = "orthogonal";
    cfg.layer = 1;
    cfg.intervention_size = 8;
    cfg.batch = 1600;
    cfg.max_epochs = 6;
    cfg.patience = 6;
    cfg.n_train = 8000;
    cfg.n_eval = 1500;
    cfg.seed = 33;
    cfg.validate(m.cfg);

    const CausalModel alg = algorithm_by_name(cfg.alg);
    const TaskSpec task = TaskSpec::by_name(cfg.task);
    InterchangeDataset train_ds =
        gen_interchange_dataset(alg, task, cfg.n_train, cfg.seed, default_policy(alg));
    InterchangeDataset eval_ds =
        gen_interchange_dataset(alg, task, cfg.n_eval, cfg.seed + 1, default_policy(alg));

    auto map = make_map(cfg.map_spec(16), cfg.seed);
    const Partition part = cfg.partition(m.cfg);
    const IiaReport start = eval_iia(m, *map, part, cfg.layer, eval_ds);
    const DasTrainResult r = train_das(m, *map, part, cfg, train_ds, eval_ds);

    REQUIRE(r.epochs_run >= 1);
    REQUIRE(r.best_eval_iia > start.iia);
    REQUIRE(m.param_bytes() == before);  // the network must not move
}

TEST_CASE("das training is deterministic in the seed") {
    Mlp m = trained_heq_mlp();
    DasConfig cfg;
    cfg.family = "revnet";
    cfg.revnet_blocks = 1;
    cfg.revnet_hidden = 4;
    cfg.batch = 1000;
    cfg.max_epochs = 2;
    cfg.n_train = 2000;
    cfg.n_eval = 500;
    cfg.seed = 41;

    const CausalModel alg = algorithm_by_name(cfg.alg);
    const TaskSpec task = TaskSpec::by_name(cfg.task);
    InterchangeDataset train_ds =
        gen_interchange_dataset(alg, task, cfg.n_train, cfg.seed, default_policy(alg));
    InterchangeDataset eval_ds =
        gen_interchange_dataset(alg, task, cfg.n_eval, cfg.seed + 1, default_policy(alg));
    const Partition part = cfg.partition(m.cfg);

    auto m1 = make_map(cfg.map_spec(16), cfg.seed);
    auto m2 = make_map(cfg.map_spec(16), cfg.seed);
    train_das(m, *m1, part, cfg, train_ds, eval_ds);
    train_das(m, *m2, part, cfg, train_ds, eval_ds);

    Tensor probe = Tensor::from({2, 16}, std::vector<double>(32, 0.25));
    REQUIRE(max_abs_diff(m1->apply(nullptr, probe), m2->apply(nullptr, probe)) == 0.0);
}

TEST_CASE("greedy identity search returns a valid partition") {
    Mlp m = trained_heq_mlp();
    const CausalModel alg = algorithm_by_name("both_equality");
    InterchangeDataset ds =
        gen_interchange_dataset(alg, TaskSpec::heq(), 3000, 51, default_policy(alg));

    GreedyResult r = greedy_identity_search(m, alg, 1, 2, ds);
    r.partition.validate();
    REQUIRE(r.partition.coords("eq12").size() == 2);
    REQUIRE(r.partition.coords("eq34").size() == 2);
    REQUIRE(r.rounds.size() == 2);
    REQUIRE(r.final_iia >= 0.0);
    REQUIRE(r.final_iia <= 1.0);

    // deterministic: the same call picks the same coordinates
    GreedyResult r2 = greedy_identity_search(m, alg, 1, 2, ds);
    REQUIRE(r2.partition.coords("eq12") == r.partition.coords("eq12"));
    REQUIRE(r2.partition.coords("eq34") == r.partition.coords("eq34"));
}

TEST_CASE("greedy search rejects budgets beyond the layer size") {
    Mlp m = trained_heq_mlp();
    const CausalModel alg = algorithm_by_name("both_equality");
    InterchangeDataset ds =
        gen_interchange_dataset(alg, TaskSpec::heq(), 100, 52, default_policy(alg));
    // 8 coords x 2 nodes = 16 > 15 available under the strict bound
    REQUIRE_THROWS_AS(greedy_identity_search(m, alg, 1, 8, ds), ValidationError);
}

TEST_CASE("counterfactual training raises intervened accuracy") {
    MlpConfig cfg;
    cfg.input_dim = 16;
    cfg.width = 16;
    cfg.layers = 3;
    cfg.classes = 2;
    Mlp m = Mlp::init(cfg, 61);

    // plain task training first so the starting point solves the task
    BaseDataset train = gen_base_dataset(TaskSpec::heq(), 32768, 62);
    BaseDataset eval = gen_base_dataset(TaskSpec::heq(), 2000, 63);
    MlpTrainConfig tcfg;
    tcfg.max_epochs = 8;
    tcfg.patience = 8;
    train_mlp(m, train, eval, tcfg, 64);

    const CausalModel alg = algorithm_by_name("both_equality");
    const NodePolicy quarters = NodePolicy::quarters("eq12", "eq34");
    InterchangeDataset cf_train =
        gen_interchange_dataset(alg, TaskSpec::heq(), 8000, 65, quarters);
    InterchangeDataset cf_eval =
        gen_interchange_dataset(alg, TaskSpec::heq(), 1500, 66, quarters);

    const Partition part = Partition::contiguous(alg.inner_ids(), 8, 16);
    const double before = eval_intervened_accuracy(m, part, 1, cf_eval);
    CounterfactualTrainConfig ccfg;
    ccfg.max_epochs = 4;
    ccfg.patience = 4;
    train_with_interventions(m, part, 1, ccfg, cf_train, cf_eval, 67);
    const double after = eval_intervened_accuracy(m, part, 1, cf_eval);
    REQUIRE(after > before);
}

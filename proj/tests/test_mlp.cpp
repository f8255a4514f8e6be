#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "cal/mlp.hpp"

using namespace cal;

namespace {
std::filesystem::path tmp_dir() {
    auto p = std::filesystem::temp_directory_path() / "cal-mlp-test";
    std::filesystem::create_directories(p);
    return p;
}

Mlp small_mlp(std::uint64_t seed = 1) {
    MlpConfig cfg;
    cfg.input_dim = 16;
    cfg.width = 16;
    cfg.layers = 3;
    cfg.classes = 2;
    return Mlp::init(cfg, seed);
}

Tensor random_batch(std::size_t n, std::size_t dim, std::uint64_t seed) {
    rng::Stream rs(seed, "mlp-test/batch");
    std::vector<double> v(n * dim);
    for (double& x : v) x = rs.uniform(-0.5, 0.5);
    return Tensor::from({n, dim}, std::move(v));
}
}  // namespace

TEST_CASE("init bounds follow fan in") {
    Mlp m = small_mlp();
    const double bound0 = 1.0 / std::sqrt(16.0);
    for (std::size_t i = 0; i < m.W[0].numel(); ++i) {
        REQUIRE(m.W[0].data()[i] <= bound0);
        REQUIRE(m.W[0].data()[i] >= -bound0);
    }
    for (const Tensor& bias : m.b)
        for (std::size_t i = 0; i < bias.numel(); ++i) REQUIRE(std::abs(bias.data()[i]) <= bound0);
}

TEST_CASE("splicing the forward pass at any layer is exact") {
    Mlp m = small_mlp();
    Tensor x = random_batch(32, 16, 7);
    Tensor full = m.logits(nullptr, x);
    for (std::size_t l = 1; l <= m.cfg.layers; ++l) {
        Tensor h = m.forward_to_layer(nullptr, x, l);
        Tensor spliced = m.forward_from_layer(nullptr, h, l);
        REQUIRE(max_abs_diff(spliced, full) == 0.0);
    }
}

TEST_CASE("hidden layer dimensions are as configured") {
    Mlp m = small_mlp();
    Tensor x = random_batch(8, 16, 9);
    const auto hs = m.all_hidden(x);
    REQUIRE(hs.size() == 3);
    for (const Tensor& h : hs) {
        REQUIRE(h.rows() == 8);
        REQUIRE(h.cols() == 16);
    }
}

TEST_CASE("first hidden layer is a plain matmul without bias") {
    Mlp m = small_mlp();
    Tensor x = random_batch(4, 16, 11);
    Tensor h1 = m.forward_to_layer(nullptr, x, 1);
    Tensor manual = matmul(nullptr, x, m.W[0]);
    REQUIRE(max_abs_diff(h1, manual) == 0.0);
}

TEST_CASE("checkpoint round trip is bit exact") {
    Mlp m = small_mlp(3);
    const auto base = tmp_dir() / "mlp";
    m.save(base);
    Mlp back = Mlp::load(base);
    REQUIRE(back.cfg.width == m.cfg.width);
    REQUIRE(back.param_bytes() == m.param_bytes());
    Tensor x = random_batch(16, 16, 13);
    REQUIRE(max_abs_diff(back.logits(nullptr, x), m.logits(nullptr, x)) == 0.0);
}

TEST_CASE("training improves a small equality problem") {
    const TaskSpec task = TaskSpec::heq();
    // the task's learning curve has a knee around 400 optimizer steps, so the
    // budget stays safely past it: 64 batches x 12 epochs
    BaseDataset train = gen_base_dataset(task, 65536, 21);
    BaseDataset eval = gen_base_dataset(task, 2000, 22);
    Mlp m = small_mlp(5);
    const double before = accuracy(m, eval);
    MlpTrainConfig cfg;
    cfg.max_epochs = 12;
    cfg.patience = 12;
    const TrainResult r = train_mlp(m, train, eval, cfg, 23);
    REQUIRE(r.epochs_run >= 1);
    REQUIRE(r.best_eval > before);
    REQUIRE(r.best_eval > 0.6);
}

TEST_CASE("early stopping restores the best parameters") {
    const TaskSpec task = TaskSpec::heq();
    BaseDataset train = gen_base_dataset(task, 8192, 31);
    BaseDataset eval = gen_base_dataset(task, 2000, 32);
    Mlp m = small_mlp(6);
    MlpTrainConfig cfg;
    cfg.max_epochs = 8;
    cfg.patience = 2;
    const TrainResult r = train_mlp(m, train, eval, cfg, 33);
    REQUIRE(accuracy(m, eval) == Catch::Approx(r.best_eval).epsilon(1e-12));
}

TEST_CASE("training is deterministic in the seed") {
    const TaskSpec task = TaskSpec::heq();
    BaseDataset train = gen_base_dataset(task, 4096, 41);
    BaseDataset eval = gen_base_dataset(task, 1000, 42);
    MlpTrainConfig cfg;
    cfg.max_epochs = 2;
    Mlp a = small_mlp(7);
    Mlp b = small_mlp(7);
    train_mlp(a, train, eval, cfg, 43);
    train_mlp(b, train, eval, cfg, 43);
    REQUIRE(a.param_bytes() == b.param_bytes());
}

TEST_CASE("predict is the argmax of the logits") {
    Mlp m = small_mlp(8);
    Tensor x = random_batch(64, 16, 15);
    Tensor logits = m.logits(nullptr, x);
    const auto pred = m.predict(x);
    const auto am = strict_argmax_rows(logits);
    for (std::size_t i = 0; i < 64; ++i) REQUIRE(pred[i] == am[i]);
}

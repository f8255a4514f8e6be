#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cal/errors.hpp"
#include "cal/optim.hpp"
#include "cal/rng.hpp"
#include "cal/serialize.hpp"
#include "cal/tasks.hpp"
#include "cal/tensor.hpp"

namespace cal {

// ---------------------------------------------------------------------------
// The classifier under study:
//
//   h_1     = x W_0
//   h_{l+1} = relu(h_l) W_l + b_l        for l = 1 .. L-1
//   p(y|x)  = softmax(h_L W_L)
//
// Hidden states h_l are the pre-relu vectors; interventions act on them.
// Weights are stored input-major, so a layer is a row-batch matmul.
// ---------------------------------------------------------------------------

struct MlpConfig {
    std::size_t input_dim = 16;
    std::size_t width = 16;
    std::size_t layers = 3;  // number of hidden states h_1 .. h_L
    std::size_t classes = 2;

    void validate() const {
        if (input_dim == 0 || width == 0 || classes < 2)
            throw ValidationError("mlp config has a zero dimension");
        if (layers < 1) throw ValidationError("mlp needs at least one hidden layer");
    }

    json to_json() const {
        return {{"input_dim", input_dim},
                {"width", width},
                {"layers", layers},
                {"classes", classes}};
    }

    static MlpConfig from_json(const json& j) {
        MlpConfig c;
        c.input_dim = j.at("input_dim").get<std::size_t>();
        c.width = j.at("width").get<std::size_t>();
        c.layers = j.at("layers").get<std::size_t>();
        c.classes = j.at("classes").get<std::size_t>();
        c.validate();
        return c;
    }
};

class Mlp {
public:
    MlpConfig cfg;
    std::vector<Tensor> W;  // W[0]: in x w, W[1..L-1]: w x w, W[L]: w x classes
    std::vector<Tensor> b;  // b[l-1] pairs with W[l] for l = 1 .. L-1

    static Mlp init(const MlpConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Mlp m;
        m.cfg = cfg;
        rng::Stream rs(seed, "mlp/init");
        auto uniform_fan_in = [&rs](std::size_t in, std::size_t out) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(in));
            Tensor t({in, out}, true);
            for (std::size_t i = 0; i < t.numel(); ++i)
                t.data()[i] = rs.uniform(-bound, bound);
            return t;
        };
        m.W.push_back(uniform_fan_in(cfg.input_dim, cfg.width));
        for (std::size_t l = 1; l < cfg.layers; ++l) {
            m.W.push_back(uniform_fan_in(cfg.width, cfg.width));
            const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.width));
            Tensor bias({cfg.width}, true);
            for (std::size_t i = 0; i < bias.numel(); ++i)
                bias.data()[i] = rs.uniform(-bound, bound);
            m.b.push_back(bias);
        }
        m.W.push_back(uniform_fan_in(cfg.width, cfg.classes));
        return m;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p(W.begin(), W.end());
        p.insert(p.end(), b.begin(), b.end());
        return p;
    }

    void set_requires_grad(bool rg) {
        for (auto& t : W) t.set_requires_grad(rg);
        for (auto& t : b) t.set_requires_grad(rg);
    }

    // Pre-relu hidden state h_layer for 1 <= layer <= L.
    Tensor forward_to_layer(Tape* tape, const Tensor& x, std::size_t layer) const {
        check_layer(layer);
        Tensor h = matmul(tape, x, W[0]);
        for (std::size_t l = 1; l < layer; ++l)
            h = add_rowvec(tape, matmul(tape, relu(tape, h), W[l]), b[l - 1]);
        return h;
    }

    // Logits from hidden state h_layer.
    Tensor forward_from_layer(Tape* tape, const Tensor& h, std::size_t layer) const {
        check_layer(layer);
        Tensor t = h;
        for (std::size_t l = layer; l < cfg.layers; ++l)
            t = add_rowvec(tape, matmul(tape, relu(tape, t), W[l]), b[l - 1]);
        return matmul(tape, t, W[cfg.layers]);
    }

    Tensor logits(Tape* tape, const Tensor& x) const {
        return forward_from_layer(tape, forward_to_layer(tape, x, 1), 1);
    }

    // All hidden states h_1 .. h_L without recording, for diagnostics.
    std::vector<Tensor> all_hidden(const Tensor& x) const {
        std::vector<Tensor> hs;
        Tensor h = matmul(nullptr, x, W[0]);
        hs.push_back(h);
        for (std::size_t l = 1; l < cfg.layers; ++l) {
            h = add_rowvec(nullptr, matmul(nullptr, relu(nullptr, h), W[l]), b[l - 1]);
            hs.push_back(h);
        }
        return hs;
    }

    std::vector<int> predict(const Tensor& x) const {
        return strict_argmax_rows(logits(nullptr, x));
    }

    void save(const std::filesystem::path& base) const {
        TensorBundle bundle;
        bundle.meta = {{"kind", "mlp"}, {"config", cfg.to_json()}};
        for (std::size_t i = 0; i < W.size(); ++i) bundle.add("W" + std::to_string(i), W[i]);
        for (std::size_t i = 0; i < b.size(); ++i) bundle.add("b" + std::to_string(i + 1), b[i]);
        save_bundle(base, bundle);
    }

    static Mlp load(const std::filesystem::path& base) {
        TensorBundle bundle = load_bundle(base);
        if (bundle.meta.value("kind", "") != "mlp")
            throw ArtifactError("checkpoint is not an mlp: " + base.string());
        Mlp m;
        m.cfg = MlpConfig::from_json(bundle.meta.at("config"));
        for (std::size_t i = 0; i <= m.cfg.layers; ++i) {
            m.W.push_back(bundle.get("W" + std::to_string(i)));
            m.W.back().set_requires_grad(true);
        }
        for (std::size_t i = 1; i < m.cfg.layers; ++i) {
            m.b.push_back(bundle.get("b" + std::to_string(i)));
            m.b.back().set_requires_grad(true);
        }
        return m;
    }

    // Concatenated parameter bytes, for bit-exact freeze checks.
    std::string param_bytes() const {
        std::string bytes;
        for (const Tensor& t : params()) {
            const std::size_t at = bytes.size();
            bytes.resize(at + t.numel() * sizeof(double));
            std::memcpy(bytes.data() + at, t.data(), t.numel() * sizeof(double));
        }
        return bytes;
    }

private:
    void check_layer(std::size_t layer) const {
        if (layer < 1 || layer > cfg.layers)
            throw ValidationError("layer index out of range: " + std::to_string(layer));
    }
};

// ---------------------------------------------------------------------------
// Plain task training: Adam, cross-entropy, early stopping on eval accuracy.
// The best-eval parameters are restored at the end.
// ---------------------------------------------------------------------------

struct MlpTrainConfig {
    std::size_t batch = 1024;
    std::size_t max_epochs = 20;
    std::size_t patience = 3;
    double lr = 1e-3;
    double improvement_threshold = 0.0;  // ties do not count as improvement
};

struct EpochMetric {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double eval_metric = 0.0;
};

struct TrainResult {
    std::vector<EpochMetric> history;
    double best_eval = 0.0;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
};

inline Tensor gather_rows(const std::vector<double>& flat, std::size_t dim,
                          const std::vector<std::size_t>& idx, std::size_t from,
                          std::size_t to) {
    Tensor out({to - from, dim});
    for (std::size_t i = from; i < to; ++i)
        std::memcpy(out.data() + (i - from) * dim, flat.data() + idx[i] * dim,
                    dim * sizeof(double));
    return out;
}

inline double accuracy(const Mlp& m, const Tensor& x, const std::vector<int>& y) {
    const std::vector<int> pred = m.predict(x);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == y[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

inline double accuracy(const Mlp& m, const BaseDataset& ds) {
    return accuracy(m, Tensor::from({ds.n, ds.dim}, ds.x), ds.y);
}

namespace detail {

inline std::vector<std::vector<double>> snapshot_params(const std::vector<Tensor>& params) {
    std::vector<std::vector<double>> snap;
    snap.reserve(params.size());
    for (const auto& p : params) snap.push_back(p.value());
    return snap;
}

inline void restore_params(std::vector<Tensor>& params,
                           const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].value() = snap[i];
}

}  // namespace detail

inline TrainResult train_mlp(Mlp& m, const BaseDataset& train, const BaseDataset& eval,
                             const MlpTrainConfig& cfg, std::uint64_t seed) {
    if (train.dim != m.cfg.input_dim)
        throw ValidationError("training data dimension does not match the model");
    m.set_requires_grad(true);
    std::vector<Tensor> params = m.params();
    Adam opt(params, {cfg.lr});
    rng::Stream rs(seed, "mlp/train");
    const Tensor eval_x = Tensor::from({eval.n, eval.dim}, eval.x);

    TrainResult result;
    auto best = detail::snapshot_params(params);
    std::size_t bad_epochs = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng::Stream shuffle_rs = rs.fork("epoch", epoch);
        std::vector<std::size_t> idx = shuffle_rs.permutation(train.n);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t at = 0; at < train.n; at += cfg.batch) {
            const std::size_t hi = std::min(at + cfg.batch, train.n);
            Tensor x = gather_rows(train.x, train.dim, idx, at, hi);
            std::vector<int> y(hi - at);
            for (std::size_t i = at; i < hi; ++i) y[i - at] = train.y[idx[i]];
            Tape tape;
            Tensor loss = softmax_cross_entropy(&tape, m.logits(&tape, x), y);
            opt.zero_grad();
            tape.backward(loss);
            opt.step();
            loss_sum += loss.item();
            ++batches;
        }
        const double eval_acc = accuracy(m, eval_x, eval.y);
        result.history.push_back({epoch, loss_sum / static_cast<double>(batches), eval_acc});
        result.epochs_run = epoch;
        if (eval_acc > result.best_eval + cfg.improvement_threshold || result.history.size() == 1) {
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

inline void write_metrics_csv(const std::filesystem::path& path, const TrainResult& r,
                              const std::string& eval_name) {
    std::string csv = "epoch,train_loss," + eval_name + "\n";
    for (const auto& e : r.history) {
        char line[128];
        std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g\n", e.epoch, e.train_loss,
                      e.eval_metric);
        csv += line;
    }
    atomic_write(path, csv);
}

}  // namespace cal

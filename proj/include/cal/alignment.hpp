#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "cal/errors.hpp"
#include "cal/rng.hpp"
#include "cal/serialize.hpp"
#include "cal/tensor.hpp"

namespace cal {

// ---------------------------------------------------------------------------
// Partition: which latent coordinates belong to which algorithm node. Slices
// must be non-empty and disjoint; leftover coordinates are the unused block.
// ---------------------------------------------------------------------------

struct Partition {
    std::size_t layer_dim = 0;
    std::vector<std::pair<std::string, std::vector<std::size_t>>> slices;  // sorted by node id

    void validate() const {
        std::vector<bool> taken(layer_dim, false);
        if (slices.empty()) throw ValidationError("partition has no node slices");
        for (const auto& [node, coords] : slices) {
            if (coords.empty())
                throw ValidationError("partition slice for " + node + " is empty");
            for (std::size_t c : coords) {
                if (c >= layer_dim)
                    throw ValidationError("partition coordinate out of range for " + node);
                if (taken[c])
                    throw ValidationError("partition slices overlap at coordinate " +
                                          std::to_string(c));
                taken[c] = true;
            }
        }
        for (std::size_t i = 1; i < slices.size(); ++i)
            if (slices[i - 1].first >= slices[i].first)
                throw ValidationError("partition slices must be sorted by node id");
    }

    const std::vector<std::size_t>& coords(const std::string& node) const {
        for (const auto& [id, c] : slices)
            if (id == node) return c;
        throw ValidationError("partition has no slice for node " + node);
    }

    std::vector<std::size_t> unused() const {
        std::vector<bool> taken(layer_dim, false);
        for (const auto& [node, coords] : slices)
            for (std::size_t c : coords) taken[c] = true;
        std::vector<std::size_t> free;
        for (std::size_t c = 0; c < layer_dim; ++c)
            if (!taken[c]) free.push_back(c);
        return free;
    }

    // Contiguous equal-size slices in sorted node order, remainder unused.
    static Partition contiguous(std::vector<std::string> nodes, std::size_t size,
                                std::size_t layer_dim) {
        std::sort(nodes.begin(), nodes.end());
        if (size == 0) throw ValidationError("partition slice size must be positive");
        if (size * nodes.size() > layer_dim)
            throw ValidationError("partition does not fit: " + std::to_string(size) + " x " +
                                  std::to_string(nodes.size()) + " > " +
                                  std::to_string(layer_dim));
        Partition p;
        p.layer_dim = layer_dim;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            std::vector<std::size_t> coords(size);
            for (std::size_t j = 0; j < size; ++j) coords[j] = i * size + j;
            p.slices.emplace_back(nodes[i], std::move(coords));
        }
        p.validate();
        return p;
    }

    json to_json() const {
        json j;
        j["layer_dim"] = layer_dim;
        json s = json::array();
        for (const auto& [node, coords] : slices) s.push_back({{"node", node}, {"coords", coords}});
        j["slices"] = s;
        return j;
    }

    static Partition from_json(const json& j) {
        Partition p;
        p.layer_dim = j.at("layer_dim").get<std::size_t>();
        for (const auto& e : j.at("slices"))
            p.slices.emplace_back(e.at("node").get<std::string>(),
                                  e.at("coords").get<std::vector<std::size_t>>());
        p.validate();
        return p;
    }
};

// ---------------------------------------------------------------------------
// Alignment maps: bijections on a layer's activation space. apply() moves
// activations into the aligned basis, invert() moves them back. Both are
// differentiable so DAS can train map parameters through intervened
// forward passes.
//
// prepare(tape) is called once per recorded graph before any apply/invert;
// maps that derive per-step tensors from their parameters (the orthogonal
// family materializes Q there) rebuild them on the given tape.
// ---------------------------------------------------------------------------

class AlignmentMap {
public:
    virtual ~AlignmentMap() = default;
    virtual std::string family() const = 0;
    virtual std::size_t dim() const = 0;
    virtual void prepare(Tape* tape) { (void)tape; }
    virtual Tensor apply(Tape* tape, const Tensor& h) const = 0;
    virtual Tensor invert(Tape* tape, const Tensor& z) const = 0;
    virtual std::vector<Tensor> params() { return {}; }
    virtual json config() const { return json::object(); }
    virtual void collect(TensorBundle& bundle) const { (void)bundle; }
};

class IdentityMap final : public AlignmentMap {
public:
    explicit IdentityMap(std::size_t d) : d_(d) {}
    std::string family() const override { return "identity"; }
    std::size_t dim() const override { return d_; }
    Tensor apply(Tape*, const Tensor& h) const override { return h; }
    Tensor invert(Tape*, const Tensor& z) const override { return z; }

private:
    std::size_t d_;
};

// Orthogonal family via the Cayley transform: S = L - L^T from the strictly
// lower triangle of parameter A, then Q = (I - S)(I + S)^-1, computed as the
// solve (I + S) Q = (I - S). A = 0 gives Q = I. Q is orthogonal for every A,
// so invert() is multiplication by Q itself.
class OrthogonalMap final : public AlignmentMap {
public:
    explicit OrthogonalMap(std::size_t d) : d_(d), a_({d, d}, true) {
        if (d < 2) throw ValidationError("orthogonal map needs dim >= 2");
    }

    std::string family() const override { return "orthogonal"; }
    std::size_t dim() const override { return d_; }
    std::vector<Tensor> params() override { return {a_}; }

    void prepare(Tape* tape) override {
        Tensor i_plus_s({d_, d_});
        Tensor i_minus_s({d_, d_});
        // Skew part assembled as a constant copy of A's strictly lower
        // triangle; gradients route back through a dedicated backward rule.
        for (std::size_t r = 0; r < d_; ++r) {
            for (std::size_t c = 0; c < d_; ++c) {
                const double s =
                    r > c ? a_.data()[r * d_ + c] : (c > r ? -a_.data()[c * d_ + r] : 0.0);
                i_plus_s.data()[r * d_ + c] = (r == c ? 1.0 : 0.0) + s;
                i_minus_s.data()[r * d_ + c] = (r == c ? 1.0 : 0.0) - s;
            }
        }
        if (tape) {
            tape->trace(i_plus_s);
            tape->trace(i_minus_s);
            Tensor a = a_;
            const std::size_t d = d_;
            tape->record([a, i_plus_s, i_minus_s, d]() mutable {
                if (!a.wants_grad()) return;
                auto& ga = a.ensure_grad();
                const bool gp = i_plus_s.has_grad();
                const bool gm = i_minus_s.has_grad();
                if (!gp && !gm) return;
                for (std::size_t r = 1; r < d; ++r)
                    for (std::size_t c = 0; c < r; ++c) {
                        double g = 0.0;
                        if (gp)
                            g += i_plus_s.grad_view()[r * d + c] -
                                 i_plus_s.grad_view()[c * d + r];
                        if (gm)
                            g -= i_minus_s.grad_view()[r * d + c] -
                                 i_minus_s.grad_view()[c * d + r];
                        ga[r * d + c] += g;
                    }
            });
        }
        q_ = gauss_solve(tape, i_plus_s, i_minus_s);
        qt_ = transpose(tape, q_);
        prepared_for_ = tape;
        prepared_ = true;
    }

    Tensor apply(Tape* tape, const Tensor& h) const override {
        check_prepared(tape);
        return matmul(tape, h, qt_);
    }

    Tensor invert(Tape* tape, const Tensor& z) const override {
        check_prepared(tape);
        return matmul(tape, z, q_);
    }

    // Fresh Q with no recording, for orthogonality checks.
    Tensor materialize() {
        prepare(nullptr);
        return q_;
    }

    json config() const override { return json::object(); }

    void collect(TensorBundle& bundle) const override { bundle.add("A", a_); }

    void restore(const TensorBundle& bundle) {
        a_.value() = bundle.get("A").value();
        prepared_ = false;
    }

private:
    void check_prepared(Tape* tape) const {
        if (!prepared_ || prepared_for_ != tape)
            throw ValidationError("orthogonal map used without prepare() on this tape");
    }

    std::size_t d_;
    Tensor a_;
    Tensor q_, qt_;
    Tape* prepared_for_ = nullptr;
    bool prepared_ = false;
};

// RevNet family: additive coupling blocks on the two halves of the vector.
//
//   forward:  y1 = x1 + F(x2), y2 = x2 + G(y1)
//   inverse:  x2 = y2 - G(y1), x1 = y1 - F(x2)
//
// F and G are linear -> relu -> linear with hidden width d_rn. The closing
// linear layers start at zero so the whole map starts as the identity.
class RevNetMap final : public AlignmentMap {
public:
    struct Subnet {
        Tensor w1, b1, w2, b2;

        Tensor operator()(Tape* tape, const Tensor& x) const {
            Tensor h = relu(tape, add_rowvec(tape, matmul(tape, x, w1), b1));
            return add_rowvec(tape, matmul(tape, h, w2), b2);
        }
    };

    struct Block {
        Subnet f, g;
    };

    RevNetMap(std::size_t d, std::size_t n_blocks, std::size_t hidden, std::uint64_t seed)
        : d_(d), hidden_(hidden) {
        if (d < 2 || d % 2 != 0)
            throw ValidationError("revnet map needs an even dim >= 2");
        if (n_blocks < 1 || hidden < 1)
            throw ValidationError("revnet map needs at least one block and hidden unit");
        rng::Stream rs(seed, "alignment/revnet");
        const std::size_t half = d / 2;
        for (std::size_t i = 0; i < n_blocks; ++i) {
            Block blk;
            blk.f = init_subnet(half, rs);
            blk.g = init_subnet(half, rs);
            blocks_.push_back(std::move(blk));
        }
    }

    std::string family() const override { return "revnet"; }
    std::size_t dim() const override { return d_; }
    std::size_t n_blocks() const { return blocks_.size(); }
    std::size_t hidden() const { return hidden_; }

    std::vector<Tensor> params() override {
        std::vector<Tensor> out;
        for (auto& blk : blocks_)
            for (Tensor* t : {&blk.f.w1, &blk.f.b1, &blk.f.w2, &blk.f.b2, &blk.g.w1, &blk.g.b1,
                              &blk.g.w2, &blk.g.b2})
                out.push_back(*t);
        return out;
    }

    Tensor apply(Tape* tape, const Tensor& h) const override {
        const std::size_t half = d_ / 2;
        Tensor x1 = slice_cols(tape, h, 0, half);
        Tensor x2 = slice_cols(tape, h, half, d_);
        for (const Block& blk : blocks_) {
            Tensor y1 = add(tape, x1, blk.f(tape, x2));
            Tensor y2 = add(tape, x2, blk.g(tape, y1));
            x1 = y1;
            x2 = y2;
        }
        return concat_cols(tape, x1, x2);
    }

    Tensor invert(Tape* tape, const Tensor& z) const override {
        const std::size_t half = d_ / 2;
        Tensor y1 = slice_cols(tape, z, 0, half);
        Tensor y2 = slice_cols(tape, z, half, d_);
        for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
            Tensor x2 = sub(tape, y2, it->g(tape, y1));
            Tensor x1 = sub(tape, y1, it->f(tape, x2));
            y1 = x1;
            y2 = x2;
        }
        return concat_cols(tape, y1, y2);
    }

    json config() const override {
        return {{"n_blocks", blocks_.size()}, {"hidden", hidden_}};
    }

    void collect(TensorBundle& bundle) const override {
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string p = "block" + std::to_string(i);
            bundle.add(p + ".F.w1", blocks_[i].f.w1);
            bundle.add(p + ".F.b1", blocks_[i].f.b1);
            bundle.add(p + ".F.w2", blocks_[i].f.w2);
            bundle.add(p + ".F.b2", blocks_[i].f.b2);
            bundle.add(p + ".G.w1", blocks_[i].g.w1);
            bundle.add(p + ".G.b1", blocks_[i].g.b1);
            bundle.add(p + ".G.w2", blocks_[i].g.w2);
            bundle.add(p + ".G.b2", blocks_[i].g.b2);
        }
    }

    void restore(const TensorBundle& bundle) {
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string p = "block" + std::to_string(i);
            blocks_[i].f.w1.value() = bundle.get(p + ".F.w1").value();
            blocks_[i].f.b1.value() = bundle.get(p + ".F.b1").value();
            blocks_[i].f.w2.value() = bundle.get(p + ".F.w2").value();
            blocks_[i].f.b2.value() = bundle.get(p + ".F.b2").value();
            blocks_[i].g.w1.value() = bundle.get(p + ".G.w1").value();
            blocks_[i].g.b1.value() = bundle.get(p + ".G.b1").value();
            blocks_[i].g.w2.value() = bundle.get(p + ".G.w2").value();
            blocks_[i].g.b2.value() = bundle.get(p + ".G.b2").value();
        }
    }

private:
    Subnet init_subnet(std::size_t half, rng::Stream& rs) {
        Subnet s;
        const double bound = 1.0 / std::sqrt(static_cast<double>(half));
        s.w1 = Tensor({half, hidden_}, true);
        for (std::size_t i = 0; i < s.w1.numel(); ++i) s.w1.data()[i] = rs.uniform(-bound, bound);
        s.b1 = Tensor({hidden_}, true);
        for (std::size_t i = 0; i < s.b1.numel(); ++i) s.b1.data()[i] = rs.uniform(-bound, bound);
        // Zero closing layer: the subnet outputs 0 until training moves it.
        s.w2 = Tensor({hidden_, half}, true);
        s.b2 = Tensor({half}, true);
        return s;
    }

    std::size_t d_;
    std::size_t hidden_;
    std::vector<Block> blocks_;
};

// ---------------------------------------------------------------------------
// Factory and checkpoints.
// ---------------------------------------------------------------------------

struct MapSpec {
    std::string family = "identity";  // identity | orthogonal | revnet
    std::size_t dim = 0;
    std::size_t revnet_blocks = 1;    // L_rn
    std::size_t revnet_hidden = 16;   // d_rn

    void validate() const {
        if (family != "identity" && family != "orthogonal" && family != "revnet")
            throw ValidationError("unknown alignment map family: " + family);
        if (dim == 0) throw ValidationError("alignment map dim must be positive");
        if (family == "revnet" && dim % 2 != 0)
            throw ValidationError("revnet map needs an even dim");
    }
};

inline std::unique_ptr<AlignmentMap> make_map(const MapSpec& spec, std::uint64_t seed) {
    spec.validate();
    if (spec.family == "identity") return std::make_unique<IdentityMap>(spec.dim);
    if (spec.family == "orthogonal") return std::make_unique<OrthogonalMap>(spec.dim);
    return std::make_unique<RevNetMap>(spec.dim, spec.revnet_blocks, spec.revnet_hidden, seed);
}

inline void save_map(const std::filesystem::path& base, const AlignmentMap& map,
                     const Partition* partition = nullptr) {
    TensorBundle bundle;
    bundle.meta["kind"] = "alignment_map";
    bundle.meta["family"] = map.family();
    bundle.meta["dim"] = map.dim();
    bundle.meta["config"] = map.config();
    if (partition) bundle.meta["partition"] = partition->to_json();
    map.collect(bundle);
    save_bundle(base, bundle);
}

inline std::unique_ptr<AlignmentMap> load_map(const std::filesystem::path& base,
                                              Partition* partition_out = nullptr) {
    TensorBundle bundle = load_bundle(base);
    if (bundle.meta.value("kind", "") != "alignment_map")
        throw ArtifactError("checkpoint is not an alignment map: " + base.string());
    MapSpec spec;
    spec.family = bundle.meta.at("family").get<std::string>();
    spec.dim = bundle.meta.at("dim").get<std::size_t>();
    if (spec.family == "revnet") {
        spec.revnet_blocks = bundle.meta.at("config").at("n_blocks").get<std::size_t>();
        spec.revnet_hidden = bundle.meta.at("config").at("hidden").get<std::size_t>();
    }
    auto map = make_map(spec, 0);
    if (auto* ortho = dynamic_cast<OrthogonalMap*>(map.get())) ortho->restore(bundle);
    if (auto* rev = dynamic_cast<RevNetMap*>(map.get())) rev->restore(bundle);
    if (partition_out && bundle.meta.contains("partition"))
        *partition_out = Partition::from_json(bundle.meta.at("partition"));
    return map;
}

}  // namespace cal

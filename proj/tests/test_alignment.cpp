#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "cal/alignment.hpp"
#include "gradcheck.hpp"

using namespace cal;

namespace {
std::filesystem::path tmp_dir() {
    auto p = std::filesystem::temp_directory_path() / "cal-alignment-test";
    std::filesystem::create_directories(p);
    return p;
}

Tensor random_batch(std::size_t n, std::size_t d, std::uint64_t seed) {
    rng::Stream rs(seed, "alignment-test/batch");
    std::vector<double> v(n * d);
    for (double& x : v) x = rs.uniform(-2.0, 2.0);
    return Tensor::from({n, d}, std::move(v));
}

void randomize_params(AlignmentMap& map, std::uint64_t seed) {
    rng::Stream rs(seed, "alignment-test/params");
    for (Tensor& p : map.params())
        for (std::size_t i = 0; i < p.numel(); ++i) p.data()[i] = rs.uniform(-0.3, 0.3);
}
}  // namespace

TEST_CASE("partition validation") {
    Partition p = Partition::contiguous({"a", "b"}, 3, 8);
    REQUIRE(p.coords("a") == std::vector<std::size_t>{0, 1, 2});
    REQUIRE(p.coords("b") == std::vector<std::size_t>{3, 4, 5});
    REQUIRE(p.unused() == std::vector<std::size_t>{6, 7});

    // full occupancy is allowed
    Partition full = Partition::contiguous({"a", "b"}, 4, 8);
    REQUIRE(full.unused().empty());

    REQUIRE_THROWS_AS(Partition::contiguous({"a", "b"}, 5, 8), ValidationError);

    Partition bad;
    bad.layer_dim = 4;
    bad.slices = {{"x", {1, 1}}};
    REQUIRE_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("identity map is exactly the identity") {
    IdentityMap map(6);
    Tensor h = random_batch(5, 6, 1);
    Tensor z = map.apply(nullptr, h);
    Tensor back = map.invert(nullptr, z);
    REQUIRE(max_abs_diff(z, h) == 0.0);
    REQUIRE(max_abs_diff(back, h) == 0.0);
}

TEST_CASE("orthogonal map starts as the identity") {
    OrthogonalMap map(8);
    map.prepare(nullptr);
    Tensor h = random_batch(4, 8, 2);
    REQUIRE(max_abs_diff(map.apply(nullptr, h), h) < 1e-14);
}

TEST_CASE("orthogonal map round trips and is orthogonal after perturbation") {
    OrthogonalMap map(8);
    randomize_params(map, 4);
    map.prepare(nullptr);

    Tensor h = random_batch(16, 8, 5);
    Tensor z = map.apply(nullptr, h);
    Tensor back = map.invert(nullptr, z);
    REQUIRE(max_abs_diff(back, h) < 1e-8);

    // Q^T Q must be the identity to near machine precision
    Tensor q = map.materialize();
    Tensor qtq = matmul(nullptr, transpose(nullptr, q), q);
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 0; c < 8; ++c) {
            const double want = r == c ? 1.0 : 0.0;
            REQUIRE(std::abs(qtq.data()[r * 8 + c] - want) < 1e-10);
        }
}

TEST_CASE("orthogonal map gradients match finite differences") {
    OrthogonalMap map(4);
    randomize_params(map, 7);
    Tensor h = random_batch(3, 4, 8);
    auto res = gradcheck::run(map.params(), [&](Tape* t) {
        map.prepare(t);
        return gradcheck::project(t, map.apply(t, h), 9);
    });
    REQUIRE(res.max_rel_err < 1e-4);

    auto res_inv = gradcheck::run(map.params(), [&](Tape* t) {
        map.prepare(t);
        return gradcheck::project(t, map.invert(t, h), 10);
    });
    REQUIRE(res_inv.max_rel_err < 1e-4);
}

TEST_CASE("revnet starts as the identity") {
    RevNetMap map(8, 3, 16, 11);
    Tensor h = random_batch(4, 8, 12);
    REQUIRE(max_abs_diff(map.apply(nullptr, h), h) == 0.0);
    REQUIRE(max_abs_diff(map.invert(nullptr, h), h) == 0.0);
}

TEST_CASE("revnet round trips after perturbation") {
    RevNetMap map(8, 4, 8, 13);
    randomize_params(map, 14);
    Tensor h = random_batch(16, 8, 15);
    Tensor z = map.apply(nullptr, h);
    REQUIRE(max_abs_diff(z, h) > 1e-3);  // genuinely non identity now
    Tensor back = map.invert(nullptr, z);
    REQUIRE(max_abs_diff(back, h) < 1e-8);

    // invert then apply is also the identity
    Tensor fwd = map.apply(nullptr, map.invert(nullptr, h));
    REQUIRE(max_abs_diff(fwd, h) < 1e-8);
}

TEST_CASE("revnet apply and invert gradients match finite differences") {
    RevNetMap map(4, 2, 6, 16);
    randomize_params(map, 17);
    Tensor h = random_batch(3, 4, 18);

    auto res = gradcheck::run(map.params(), [&](Tape* t) {
        return gradcheck::project(t, map.apply(t, h), 19);
    });
    REQUIRE(res.max_rel_err < 1e-4);

    auto res_inv = gradcheck::run(map.params(), [&](Tape* t) {
        return gradcheck::project(t, map.invert(t, h), 20);
    });
    REQUIRE(res_inv.max_rel_err < 1e-4);

    // gradient also flows into the hidden input
    auto res_h = gradcheck::run({h}, [&](Tape* t) {
        return gradcheck::project(t, map.apply(t, h), 21);
    });
    REQUIRE(res_h.max_rel_err < 1e-4);
}

TEST_CASE("revnet rejects odd dimensions") {
    REQUIRE_THROWS_AS(RevNetMap(7, 1, 4, 1), ValidationError);
}

TEST_CASE("map factory builds each family") {
    REQUIRE(make_map({"identity", 8, 1, 16}, 1)->family() == "identity");
    REQUIRE(make_map({"orthogonal", 8, 1, 16}, 1)->family() == "orthogonal");
    REQUIRE(make_map({"revnet", 8, 2, 4}, 1)->family() == "revnet");
    REQUIRE_THROWS_AS(make_map({"unknown", 8, 1, 16}, 1), ValidationError);
}

TEST_CASE("map checkpoints round trip bit exactly") {
    const auto base = tmp_dir();
    for (const char* family : {"identity", "orthogonal", "revnet"}) {
        MapSpec spec{family, 8, 2, 4};
        auto map = make_map(spec, 23);
        randomize_params(*map, 24);
        Partition part = Partition::contiguous({"a", "b"}, 3, 8);
        save_map(base / family, *map, &part);

        Partition loaded_part;
        auto back = load_map(base / family, &loaded_part);
        REQUIRE(back->family() == map->family());
        REQUIRE(loaded_part.coords("a") == part.coords("a"));

        Tensor h = random_batch(4, 8, 25);
        if (map->family() == "orthogonal") {
            map->prepare(nullptr);
            back->prepare(nullptr);
        }
        REQUIRE(max_abs_diff(back->apply(nullptr, h), map->apply(nullptr, h)) == 0.0);
    }
}

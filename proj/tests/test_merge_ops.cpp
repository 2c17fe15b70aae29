#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "mergeforge/merge_ops.hpp"
#include "oracles.hpp"

using namespace mergeforge;

namespace {

WeightMap make_map(const std::vector<float>& values, const char* name = "w") {
    WeightMap wm;
    Tensor t;
    t.values = values;
    t.shape = {values.size()};
    wm.tensors.emplace(name, std::move(t));
    return wm;
}

// Returns by value: the argument is usually a temporary merge result.
std::vector<float> vals(const WeightMap& wm, const char* name = "w") {
    return wm.tensors.at(name).values;
}

bool bitwise_equal(const std::vector<float>& a, const std::vector<float>& b) {
    return a.size() == b.size() &&
           (a.empty() || std::memcmp(a.data(), b.data(), 4 * a.size()) == 0);
}

}  // namespace

TEST_CASE("task vectors") {
    const WeightMap base = make_map({1.0f, 2.0f});
    SUBCASE("self-delta is zero") {
        const TaskVectorSet tv = task_vectors(base, std::vector<WeightMap>{base}, {"self"});
        CHECK(tv.deltas[0].tensors.at("w") == std::vector<float>{0.0f, 0.0f});
    }
    SUBCASE("elementwise difference") {
        const TaskVectorSet tv =
            task_vectors(base, std::vector<WeightMap>{make_map({3.0f, 1.0f})}, {"e"});
        CHECK(tv.deltas[0].tensors.at("w") == std::vector<float>{2.0f, -1.0f});
    }
    SUBCASE("strict mode rejects missing tensors") {
        WeightMap expert = make_map({3.0f, 1.0f});
        expert.tensors.emplace("extra", Tensor{{1.0f}, {1}, DType::F32});
        CHECK_THROWS_AS(task_vectors(base, std::vector<WeightMap>{expert}, {"e"}), MergeError);
        WeightMap missing;
        CHECK_THROWS_AS(task_vectors(base, std::vector<WeightMap>{missing}, {"e"}), MergeError);
    }
    SUBCASE("relaxed mode zero-fills and warns") {
        WeightMap missing;
        const TaskVectorSet tv = task_vectors(base, std::vector<WeightMap>{missing}, {"e"}, true);
        CHECK(tv.deltas[0].tensors.at("w") == std::vector<float>{0.0f, 0.0f});
        CHECK(tv.warnings.size() == 1);
    }
}

TEST_CASE("slerp endpoint identity is bitwise") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<float> dist(-2.0f, 2.0f);
    std::vector<float> a(64), b(64);
    for (auto& v : a) v = dist(rng);
    for (auto& v : b) v = dist(rng);
    a[0] = -0.0f;  // signed zero must survive the endpoint copy
    const WeightMap base = make_map(a), expert = make_map(b);
    CHECK(bitwise_equal(vals(slerp_merge(base, expert, {0.0, 0.9995})), a));
    CHECK(bitwise_equal(vals(slerp_merge(base, expert, {1.0, 0.9995})), b));
}

TEST_CASE("slerp quarter-circle midpoint") {
    const WeightMap e1 = make_map({1.0f, 0.0f});
    const WeightMap e2 = make_map({0.0f, 1.0f});
    const std::vector<float>& r = vals(slerp_merge(e1, e2, {0.5, 0.9995}));
    CHECK(r[0] == doctest::Approx(0.7071067811865476).epsilon(1e-6));
    CHECK(r[1] == doctest::Approx(0.7071067811865476).epsilon(1e-6));
}

TEST_CASE("slerp colinear inputs use the lerp fallback") {
    const WeightMap v = make_map({1.0f, 2.0f, 3.0f});
    const std::vector<float>& r = vals(slerp_merge(v, v, {0.5, 0.9995}));
    CHECK(r == std::vector<float>{1.0f, 2.0f, 3.0f});
    // Near-colinear but not identical: still lerp, so strictly between.
    const WeightMap w = make_map({2.0f, 4.0f, 6.0f});
    const std::vector<float>& r2 = vals(slerp_merge(v, w, {0.5, 0.9995}));
    CHECK(r2[0] == doctest::Approx(1.5).epsilon(1e-6));
}

TEST_CASE("slerp preserves the norm of equal-norm inputs") {
    std::mt19937_64 rng(11);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    std::vector<float> a(128), b(128);
    for (auto& v : a) v = dist(rng);
    for (auto& v : b) v = dist(rng);
    auto norm = [](const std::vector<float>& v) {
        double s = 0.0;
        for (float x : v) s += static_cast<double>(x) * x;
        return std::sqrt(s);
    };
    const double na = norm(a);
    const double nb = norm(b);
    for (auto& v : b) v = static_cast<float>(v * (na / nb));  // equalize norms
    const WeightMap base = make_map(a), expert = make_map(b);
    for (double t : {0.1, 0.25, 0.5, 0.9}) {
        const double nr = norm(vals(slerp_merge(base, expert, {t, 0.9995})));
        CHECK(std::fabs(nr - na) / na < 1e-5);
    }
}

TEST_CASE("task arithmetic") {
    SUBCASE("hand-computed case") {
        const WeightMap base = make_map({0.0f, 0.0f});
        const TaskVectorSet tv = task_vectors(
            base,
            std::vector<WeightMap>{make_map({1.0f, -2.0f}), make_map({3.0f, 4.0f})},
            {"a", "b"});
        const WeightMap r = task_arithmetic_merge(base, tv, {0.5, 0.5}, 2.0);
        CHECK(vals(r) == std::vector<float>{4.0f, 2.0f});
    }
    SUBCASE("single expert with unit weight reproduces the expert") {
        const WeightMap base = make_map({1.0f, 2.0f, 3.0f});
        const WeightMap expert = make_map({4.0f, 0.5f, -1.0f});
        const TaskVectorSet tv = task_vectors(base, std::vector<WeightMap>{expert}, {"e"});
        CHECK(vals(task_arithmetic_merge(base, tv, {1.0}, 1.0)) == vals(expert));
    }
    SUBCASE("zero weights leave the base unchanged") {
        const WeightMap base = make_map({1.0f, 2.0f});
        const TaskVectorSet tv =
            task_vectors(base, std::vector<WeightMap>{make_map({9.0f, 9.0f})}, {"e"});
        CHECK(bitwise_equal(vals(task_arithmetic_merge(base, tv, {0.0}, 1.0)), vals(base)));
    }
}

TEST_CASE("ties worked example: trim, elect, disjoint mean") {
    const WeightMap base = make_map({0.0f, 0.0f, 0.0f});
    const TaskVectorSet tv = task_vectors(
        base,
        std::vector<WeightMap>{make_map({1.0f, -2.0f, 0.3f}), make_map({0.5f, 1.0f, -0.4f})},
        {"a", "b"});
    TiesParams p;
    p.density = 2.0 / 3.0;
    const std::vector<float>& r = vals(ties_merge(base, tv, p));
    CHECK(r[0] == doctest::Approx(0.75).epsilon(1e-7));
    CHECK(r[1] == doctest::Approx(-2.0).epsilon(1e-7));
    CHECK(r[2] == 0.0f);
}

TEST_CASE("ties degenerate cases") {
    const WeightMap base = make_map({1.0f, -1.0f, 2.0f});
    const WeightMap expert = make_map({2.0f, 1.0f, -4.0f});
    const TaskVectorSet tv = task_vectors(base, std::vector<WeightMap>{expert}, {"e"});
    SUBCASE("single expert, density 1 equals task arithmetic") {
        TiesParams p;
        p.lambda = 0.7;
        CHECK(bitwise_equal(vals(ties_merge(base, tv, p)),
                            vals(task_arithmetic_merge(base, tv, {1.0}, 0.7))));
    }
    SUBCASE("identical experts merge to that delta") {
        const TaskVectorSet tv2 =
            task_vectors(base, std::vector<WeightMap>{expert, expert}, {"a", "b"});
        CHECK(bitwise_equal(vals(ties_merge(base, tv2, TiesParams{})), vals(expert)));
    }
    SUBCASE("density out of range") {
        TiesParams p;
        p.density = 0.0;
        CHECK_THROWS_AS(ties_merge(base, tv, p), MergeError);
        p.density = 1.5;
        CHECK_THROWS_AS(ties_merge(base, tv, p), MergeError);
    }
}

TEST_CASE("breadcrumbs worked example drops outliers and noise") {
    const WeightMap base = make_map({0.0f, 0.0f, 0.0f, 0.0f, 0.0f});
    const TaskVectorSet tv = task_vectors(
        base, std::vector<WeightMap>{make_map({0.1f, 0.5f, -3.0f, 0.2f, 0.05f})}, {"e"});
    BreadcrumbsParams p;
    p.beta_top = 0.2;
    p.gamma_bottom = 0.2;
    CHECK(vals(breadcrumbs_merge(base, tv, p)) ==
          std::vector<float>{0.1f, 0.5f, 0.0f, 0.2f, 0.0f});
}

TEST_CASE("breadcrumbs degenerate cases") {
    const WeightMap base = make_map({1.0f, 2.0f, 3.0f, 4.0f});
    const TaskVectorSet tv =
        task_vectors(base, std::vector<WeightMap>{make_map({0.0f, 5.0f, 1.0f, 2.0f})}, {"e"});
    SUBCASE("empty masks equal task arithmetic") {
        BreadcrumbsParams p;
        p.lambda = 1.3;
        CHECK(bitwise_equal(vals(breadcrumbs_merge(base, tv, p)),
                            vals(task_arithmetic_merge(base, tv, {1.0}, 1.3))));
    }
    SUBCASE("floor semantics keep single entries alive") {
        const WeightMap tiny = make_map({2.0f});
        const TaskVectorSet tv1 =
            task_vectors(tiny, std::vector<WeightMap>{make_map({5.0f})}, {"e"});
        BreadcrumbsParams p;
        p.beta_top = 0.2;
        CHECK(vals(breadcrumbs_merge(tiny, tv1, p)) == std::vector<float>{5.0f});
    }
    SUBCASE("mask fractions must leave something") {
        BreadcrumbsParams p;
        p.beta_top = 0.6;
        p.gamma_bottom = 0.5;
        CHECK_THROWS_AS(breadcrumbs_merge(base, tv, p), MergeError);
    }
}

TEST_CASE("dare drop and rescale") {
    const WeightMap base = make_map(std::vector<float>(16, 0.0f));
    const TaskVectorSet tv = task_vectors(
        base, std::vector<WeightMap>{make_map(std::vector<float>(16, 2.0f))}, {"e"});
    SUBCASE("p = 0 is the identity") {
        DareParams p;
        const TaskVectorSet out = dare_preprocess(tv, p);
        CHECK(out.deltas[0].tensors.at("w") == tv.deltas[0].tensors.at("w"));
    }
    SUBCASE("survivors are scaled exactly by 1/(1-p)") {
        DareParams p;
        p.drop_p = 0.25;
        p.seed = 3;
        const std::vector<float> out = dare_preprocess(tv, p).deltas[0].tensors.at("w");
        const float scaled = 2.0f / 0.75f;
        for (float v : out) CHECK((v == 0.0f || v == scaled));
    }
    SUBCASE("empirical mean approaches the original at large n") {
        const size_t n = 1'000'000;
        const WeightMap big = make_map(std::vector<float>(n, 0.0f));
        const TaskVectorSet tvb = task_vectors(
            big, std::vector<WeightMap>{make_map(std::vector<float>(n, 1.0f))}, {"e"});
        DareParams p;
        p.drop_p = 0.9;
        p.seed = 42;
        const std::vector<float> out = dare_preprocess(tvb, p).deltas[0].tensors.at("w");
        double mean = 0.0;
        for (float v : out) mean += v;
        mean /= static_cast<double>(n);
        CHECK(std::fabs(mean - 1.0) < 0.02);
    }
    SUBCASE("identical output for 1, 4, and 8 threads") {
        DareParams p;
        p.drop_p = 0.5;
        p.seed = 99;
        const std::vector<float> one = dare_preprocess(tv, p, 1).deltas[0].tensors.at("w");
        CHECK(bitwise_equal(dare_preprocess(tv, p, 4).deltas[0].tensors.at("w"), one));
        CHECK(bitwise_equal(dare_preprocess(tv, p, 8).deltas[0].tensors.at("w"), one));
    }
    SUBCASE("drop_p = 1 is rejected") {
        DareParams p;
        p.drop_p = 1.0;
        CHECK_THROWS_AS(dare_preprocess(tv, p), MergeError);
    }
}

TEST_CASE("ties and breadcrumbs match brute-force references on random cases") {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<float> dist(-3.0f, 3.0f);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int trial = 0; trial < 400; ++trial) {
        const size_t n = 1 + rng() % 16;
        const size_t n_experts = 1 + rng() % 4;
        std::vector<float> bvals(n);
        for (auto& v : bvals) v = dist(rng);
        const WeightMap base = make_map(bvals);
        std::vector<WeightMap> experts;
        std::vector<std::string> names;
        std::vector<double> weights;
        for (size_t e = 0; e < n_experts; ++e) {
            std::vector<float> ev(n);
            for (auto& v : ev) v = dist(rng);
            if (rng() % 4 == 0) ev[rng() % n] = bvals[0];  // provoke magnitude ties
            experts.push_back(make_map(ev));
            names.push_back("expert_" + std::to_string(e));
            weights.push_back(unit(rng) * 1.5);
        }
        const TaskVectorSet tv = task_vectors(base, experts, names);

        TiesParams tp;
        tp.density = std::max(0.05, unit(rng));
        tp.lambda = 0.25 + unit(rng);
        tp.weights = weights;
        REQUIRE(bitwise_equal(vals(ties_merge(base, tv, tp)),
                              vals(oracle::naive_ties(base, tv, tp))));

        BreadcrumbsParams bp;
        bp.beta_top = 0.45 * unit(rng);
        bp.gamma_bottom = 0.45 * unit(rng);
        bp.lambda = 0.25 + unit(rng);
        bp.weights = weights;
        REQUIRE(bitwise_equal(vals(breadcrumbs_merge(base, tv, bp)),
                              vals(oracle::naive_breadcrumbs(base, tv, bp))));
    }
}

TEST_CASE("permutation of experts leaves merges bitwise unchanged") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
    std::vector<float> bvals(12);
    for (auto& v : bvals) v = dist(rng);
    const WeightMap base = make_map(bvals);
    std::vector<WeightMap> experts;
    std::vector<std::string> names{"alpha", "beta", "gamma"};
    std::vector<double> weights{0.3, 0.9, 1.2};
    for (int e = 0; e < 3; ++e) {
        std::vector<float> ev(12);
        for (auto& v : ev) v = dist(rng);
        experts.push_back(make_map(ev));
    }
    const TaskVectorSet fwd = task_vectors(base, experts, names);
    const TaskVectorSet rev = task_vectors(
        base, std::vector<WeightMap>{experts[2], experts[0], experts[1]},
        {"gamma", "alpha", "beta"});
    const std::vector<double> rev_w{1.2, 0.3, 0.9};

    CHECK(bitwise_equal(vals(task_arithmetic_merge(base, fwd, weights, 1.1)),
                        vals(task_arithmetic_merge(base, rev, rev_w, 1.1))));
    TiesParams tp;
    tp.density = 0.5;
    tp.weights = weights;
    TiesParams tpr = tp;
    tpr.weights = rev_w;
    CHECK(bitwise_equal(vals(ties_merge(base, fwd, tp)), vals(ties_merge(base, rev, tpr))));
    BreadcrumbsParams bp;
    bp.beta_top = 0.2;
    bp.gamma_bottom = 0.1;
    bp.weights = weights;
    BreadcrumbsParams bpr = bp;
    bpr.weights = rev_w;
    CHECK(bitwise_equal(vals(breadcrumbs_merge(base, fwd, bp)),
                        vals(breadcrumbs_merge(base, rev, bpr))));
}

TEST_CASE("zero deltas absorb into the base for every operator") {
    const WeightMap base = make_map({1.5f, -2.25f, 0.125f});
    const TaskVectorSet tv = task_vectors(base, std::vector<WeightMap>{base, base}, {"a", "b"});
    CHECK(bitwise_equal(vals(task_arithmetic_merge(base, tv, {1.0, 1.0}, 1.0)), vals(base)));
    TiesParams tp;
    tp.density = 0.5;
    CHECK(bitwise_equal(vals(ties_merge(base, tv, tp)), vals(base)));
    BreadcrumbsParams bp;
    bp.beta_top = 0.3;
    CHECK(bitwise_equal(vals(breadcrumbs_merge(base, tv, bp)), vals(base)));
}

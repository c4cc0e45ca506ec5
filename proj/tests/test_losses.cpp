#include <cmath>

#include "catch_amalgamated.hpp"
#include "rawpipe/gradcheck.hpp"
#include "rawpipe/losses.hpp"
#include "test_util.hpp"

using namespace rawpipe;

TEST_CASE("ohem: equal hardness reduces to plain mean CE for any fraction") {
    Tensor probs({2, 2, 3});
    LabelMap labels(2, 2);
    for (int i = 0; i < 4; ++i) {
        labels.v[std::size_t(i)] = i % 3;
        for (int c = 0; c < 3; ++c)
            probs[std::size_t(i) * 3 + std::size_t(c)] = (c == i % 3) ? 0.6 : 0.2;
    }
    const double mean_ce = -std::log(0.6);
    for (double frac : {0.25, 0.5, 1.0}) {
        auto r = ohem_ce(probs, labels, OhemConfig{frac, 1});
        CHECK(r.value == Catch::Approx(mean_ce).epsilon(1e-12));
    }
}

TEST_CASE("ohem: keeps exactly the hardest pixel for fraction 1/4") {
    Tensor probs({1, 4, 2});
    LabelMap labels(1, 4, 0);
    const double ces[] = {1.0, 2.0, 3.0, 4.0};
    for (int i = 0; i < 4; ++i) {
        probs[std::size_t(i) * 2] = std::exp(-ces[i]);
        probs[std::size_t(i) * 2 + 1] = 1.0 - std::exp(-ces[i]);
    }
    auto r = ohem_ce(probs, labels, OhemConfig{0.25, 1});
    CHECK(r.value == Catch::Approx(4.0).epsilon(1e-12));
    // gradient confined to the selected pixel
    for (int i = 0; i < 3; ++i) CHECK(r.dprobs[std::size_t(i) * 2] == 0.0);
    CHECK(r.dprobs[3 * 2] != 0.0);
}

TEST_CASE("ohem: hard_fraction 1.0 equals plain mean CE exactly") {
    Tensor probs = testutil::random_probs(4, 4, 3, 9);
    LabelMap labels = testutil::random_labels(4, 4, 3, 9, 0.2);
    auto r = ohem_ce(probs, labels, OhemConfig{1.0, 1});
    double mean = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels.v[i] == kIgnoreLabel) continue;
        mean += -std::log(std::max(probs[i * 3 + std::size_t(labels.v[i])], 1e-12));
        ++n;
    }
    mean /= double(n);
    CHECK(r.value == Catch::Approx(mean).epsilon(1e-15));
}

TEST_CASE("ohem: perfect predictions give (almost) zero loss") {
    Tensor probs({2, 2, 2});
    LabelMap labels(2, 2, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        probs[i * 2] = 0.0;
        probs[i * 2 + 1] = 1.0;
    }
    auto r = ohem_ce(probs, labels, OhemConfig{0.5, 1});
    CHECK(r.value >= 0.0);
    CHECK(r.value <= 1e-12);
}

TEST_CASE("ohem: min_kept floors the selection and errors are reported") {
    Tensor probs = testutil::random_probs(4, 4, 3, 10);
    LabelMap labels = testutil::random_labels(4, 4, 3, 10);
    auto small = ohem_ce(probs, labels, OhemConfig{0.1, 8});
    int touched = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (small.dprobs[i * 3 + std::size_t(labels.v[i])] != 0.0) ++touched;
    CHECK(touched == 8);

    LabelMap all_ignore(4, 4, kIgnoreLabel);
    CHECK_THROWS_AS(ohem_ce(probs, all_ignore, OhemConfig{0.5, 1}), ConfigError);
    CHECK_THROWS_AS(ohem_ce(probs, labels, OhemConfig{0.0, 1}), ConfigError);
    CHECK_THROWS_AS(ohem_ce(probs, labels, OhemConfig{0.5, 0}), ConfigError);
}

TEST_CASE("lovasz: perfect hard predictions give exactly zero") {
    Tensor probs({2, 3, 4});
    LabelMap labels(2, 3);
    for (std::size_t i = 0; i < 6; ++i) {
        labels.v[i] = int(i % 4);
        for (int c = 0; c < 4; ++c) probs[i * 4 + std::size_t(c)] = (c == labels.v[i]) ? 1.0 : 0.0;
    }
    auto r = lovasz_softmax(probs, labels);
    CHECK(r.value == 0.0);
}

TEST_CASE("lovasz: 2-pixel binary instance matches the brute-force extension") {
    Tensor probs = Tensor::from({1, 2, 2}, {0.8, 0.2, 0.4, 0.6});
    LabelMap labels(1, 2);
    labels.v = {0, 1};
    auto r = lovasz_softmax(probs, labels);
    CHECK(r.value ==
          Catch::Approx(testutil::lovasz_softmax_bruteforce(probs, labels)).margin(1e-12));
}

TEST_CASE("lovasz: uniform probabilities match the brute-force oracle") {
    const int C = 3;
    Tensor probs({2, 3, std::size_t(C)}, 1.0 / C);
    LabelMap labels = testutil::random_labels(2, 3, C, 17);
    auto r = lovasz_softmax(probs, labels);
    CHECK(r.value ==
          Catch::Approx(testutil::lovasz_softmax_bruteforce(probs, labels)).margin(1e-12));
}

TEST_CASE("lovasz: 1000 random binary instances up to 6 pixels match the oracle") {
    RngKey key = RngKey{}.fold(0x10a5);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        RngKey tk = key.fold(std::uint64_t(trial));
        const int n = 1 + int(tk.uniform_index(0, 6));
        Tensor probs({1, std::size_t(n), 2});
        LabelMap labels(1, n);
        bool has_fg = false, has_bg = false;
        for (int i = 0; i < n; ++i) {
            const double p = tk.uniform(10 + 2 * std::uint64_t(i));
            probs[std::size_t(i) * 2] = 1.0 - p;
            probs[std::size_t(i) * 2 + 1] = p;
            labels.v[std::size_t(i)] = int(tk.uniform_index(11 + 2 * std::uint64_t(i), 2));
            has_fg = has_fg || labels.v[std::size_t(i)] == 1;
            has_bg = has_bg || labels.v[std::size_t(i)] == 0;
        }
        (void)has_fg;
        (void)has_bg;
        auto r = lovasz_softmax(probs, labels);
        worst = std::max(worst,
                         std::fabs(r.value - testutil::lovasz_softmax_bruteforce(probs, labels)));
    }
    INFO("worst |impl - oracle| = " << worst);
    CHECK(worst < 1e-9);
}

TEST_CASE("lovasz: ignore pixels are excluded") {
    Tensor probs = testutil::random_probs(3, 3, 3, 4);
    LabelMap labels = testutil::random_labels(3, 3, 3, 4, 0.3);
    auto r = lovasz_softmax(probs, labels);
    CHECK(r.value == Catch::Approx(testutil::lovasz_softmax_bruteforce(probs, labels)).margin(1e-12));
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels.v[i] == kIgnoreLabel)
            for (int c = 0; c < 3; ++c) CHECK(r.dprobs[i * 3 + std::size_t(c)] == 0.0);
}

TEST_CASE("smoothness: constant probability maps cost exactly zero") {
    Tensor probs({4, 4, 3}, 1.0 / 3.0);
    Tensor guide = testutil::random_probs(4, 4, 3, 2);  // any 3-channel guide
    auto r = smoothness(probs, guide, SmoothnessConfig{0.1});
    CHECK(r.value == 0.0);
    for (std::size_t i = 0; i < r.dprobs.size(); ++i) CHECK(r.dprobs[i] == 0.0);
}

TEST_CASE("smoothness: hand-evaluated 2x1 instance") {
    Tensor probs = Tensor::from({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor guide({1, 2, 3}, 0.5);  // identical neighbors -> w = 1
    auto r = smoothness(probs, guide, SmoothnessConfig{0.1});
    CHECK(r.value == Catch::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("smoothness: weights fall with guide contrast") {
    Tensor probs = Tensor::from({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor flat({1, 2, 3}, 0.5);
    Tensor edge({1, 2, 3}, 0.5);
    for (int c = 0; c < 3; ++c) edge.at(0, 1, std::size_t(c)) = 0.9;
    const double tau = 0.1;
    auto flat_r = smoothness(probs, flat, SmoothnessConfig{tau});
    auto edge_r = smoothness(probs, edge, SmoothnessConfig{tau});
    CHECK(edge_r.value == Catch::Approx(2.0 * std::exp(-0.4 / tau)).epsilon(1e-9));
    CHECK(edge_r.value < flat_r.value);
}

TEST_CASE("loss stages pass finite-difference gradient checks") {
    ParamSet params;
    Tensor probs = testutil::random_probs(4, 4, 3, 77);
    LabelMap labels = testutil::random_labels(4, 4, 3, 77);
    {
        auto rep = gradcheck(OhemStage(labels, OhemConfig{0.5, 2}), probs, params);
        INFO("ohem worst " << rep.worst);
        CHECK(rep.pass);
    }
    {
        auto rep = gradcheck(LovaszStage(labels), probs, params);
        INFO("lovasz worst " << rep.worst);
        CHECK(rep.pass);
    }
    {
        Tensor guide = testutil::random_probs(4, 4, 3, 78);
        auto rep = gradcheck(SmoothnessStage(guide, SmoothnessConfig{0.1}), probs, params);
        INFO("smooth worst " << rep.worst);
        CHECK(rep.pass);
    }
}

TEST_CASE("total_loss: fixed-weight arithmetic from the objective") {
    LossWeights w;
    CHECK(total_loss(1.0, 1.0, 0.0, w) == Catch::Approx(1.0).epsilon(1e-15));
    CHECK(total_loss(0.0, 0.0, 0.0, w) == 0.0);
    w.lambda_smooth = 0.1;
    CHECK(total_loss(1.0, 0.5, 2.0, w) == Catch::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("total_loss: linear in each component") {
    LossWeights w;
    w.lambda_smooth = 0.3;
    RngKey key = RngKey{}.fold(31);
    for (int i = 0; i < 20; ++i) {
        const double a = key.uniform(3 * std::uint64_t(i)), b = key.uniform(3 * std::uint64_t(i) + 1),
                     c = key.uniform(3 * std::uint64_t(i) + 2);
        const double lhs = total_loss(2.0 * a, 2.0 * b, 2.0 * c, w);
        const double rhs = 2.0 * total_loss(a, b, c, w);
        CHECK(lhs == Catch::Approx(rhs).epsilon(1e-12));
    }
}

TEST_CASE("total_loss: adaptive ramps over the first half of training") {
    CHECK(adaptive_hard_fraction(0.25, 0.0) == 1.0);
    CHECK(adaptive_hard_fraction(0.25, 0.25) == Catch::Approx(0.625).epsilon(1e-12));
    CHECK(adaptive_hard_fraction(0.25, 0.5) == Catch::Approx(0.25).epsilon(1e-12));
    CHECK(adaptive_hard_fraction(0.25, 1.0) == Catch::Approx(0.25).epsilon(1e-12));
    CHECK(adaptive_lambda(0.1, 0.0) == 0.0);
    CHECK(adaptive_lambda(0.1, 0.25) == Catch::Approx(0.05).epsilon(1e-12));
    CHECK(adaptive_lambda(0.1, 0.5) == Catch::Approx(0.1).epsilon(1e-12));
    CHECK(adaptive_lambda(0.1, 0.8) == Catch::Approx(0.1).epsilon(1e-12));

    LossWeights neg;
    neg.w_ohem = -0.1;
    CHECK_THROWS_AS(total_loss(1.0, 1.0, 1.0, neg), ConfigError);
}

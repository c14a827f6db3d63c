#include <catch2/catch_amalgamated.hpp>

#include "mdba/core/rng.hpp"
#include "mdba/losses.hpp"
#include "mdba/nn/network.hpp"

using namespace mdba;

TEST_CASE("dice_score_soft examples") {
    SECTION("perfect hard prediction scores 1 within epsilon effect") {
        NdArray<double> t({2, 2, 2}, 0.0);
        t[0] = t[3] = 1.0;
        REQUIRE(std::abs(dice_score_soft(t, t) - 1.0) < 1e-4);
    }
    SECTION("disjoint supports score ~0") {
        NdArray<double> p({8}), t({8});
        for (int i = 0; i < 4; ++i) p[i] = 1.0;
        for (int i = 4; i < 8; ++i) t[i] = 1.0;
        REQUIRE(dice_score_soft(p, t) < 1e-4);
    }
    SECTION("uniform half prediction on half-positive target") {
        NdArray<double> p({8}, 0.5), t({8}, 0.0);
        for (int i = 0; i < 4; ++i) t[i] = 1.0;
        // (2*2 + eps) / (4 + 4 + eps)
        REQUIRE(dice_score_soft(p, t) == Catch::Approx((4.0 + kDiceEpsilon) / (8.0 + kDiceEpsilon)).epsilon(1e-12));
    }
    SECTION("shape mismatch rejected") {
        REQUIRE_THROWS(dice_score_soft(NdArray<double>({4}), NdArray<double>({5})));
    }
}

TEST_CASE("cross_entropy examples") {
    SECTION("exact hard prediction costs ~0") {
        NdArray<double> t({16}, 0.0);
        for (int i = 0; i < 7; ++i) t[i] = 1.0;
        REQUIRE(cross_entropy(t, t) < 1e-6);
    }
    SECTION("uniform 0.5 costs ln 2") {
        NdArray<double> p({10}, 0.5), t({10}, 0.0);
        for (int i = 0; i < 5; ++i) t[i] = 1.0;
        REQUIRE(cross_entropy(p, t) == Catch::Approx(std::log(2.0)).epsilon(1e-10));
    }
    SECTION("maximally wrong prediction costs -ln(clamp)") {
        NdArray<double> p({6}, 0.0), t({6}, 1.0);
        REQUIRE(cross_entropy(p, t) == Catch::Approx(-std::log(kCeClamp)).epsilon(1e-10));
        REQUIRE(cross_entropy(p, t) == Catch::Approx(16.1181).margin(1e-3));
    }
}

TEST_CASE("total_loss anchors") {
    SECTION("perfect predictions on both branches reach ~-2") {
        NdArray<double> scar({4, 4, 4}, 0.0), la({4, 4, 4}, 0.0);
        for (int i = 0; i < 10; ++i) scar[i] = 1.0;
        for (int i = 0; i < 30; ++i) la[i] = 1.0;
        LossBreakdown lb = total_loss(scar, scar, &la, &la);
        REQUIRE(lb.total == Catch::Approx(-2.0).margin(1e-3));
        REQUIRE(lb.total == -lb.dcs_scar + lb.ce_scar - lb.dcs_la + lb.ce_la);  // exact identity
    }
    SECTION("uniform 0.5 on half-positive targets gives 2(ln2 - 1/2)") {
        NdArray<double> p({8}, 0.5), t({8}, 0.0);
        for (int i = 0; i < 4; ++i) t[i] = 1.0;
        LossBreakdown lb = total_loss(p, t, &p, &t);
        const double expected = 2.0 * (-((4.0 + kDiceEpsilon) / (8.0 + kDiceEpsilon)) + std::log(2.0));
        REQUIRE(lb.total == Catch::Approx(expected).epsilon(1e-10));
        REQUIRE(lb.total == Catch::Approx(0.386).margin(2e-3));
    }
    SECTION("missing LA branch zeroes its terms") {
        NdArray<double> p({8}, 0.5), t({8}, 1.0);
        LossBreakdown lb = total_loss<double>(p, t, nullptr, nullptr);
        REQUIRE(lb.dcs_la == 0.0);
        REQUIRE(lb.ce_la == 0.0);
        REQUIRE(lb.total == -lb.dcs_scar + lb.ce_scar);
    }
}

TEST_CASE("total_loss analytic gradient matches central finite differences") {
    Rng rng(101);
    NdArray<double> scar({4, 4, 4}), la({4, 4, 4}), ts({4, 4, 4}), tl({4, 4, 4});
    for (int64_t i = 0; i < scar.size(); ++i) {
        scar[i] = rng.uniform(0.1, 0.9);  // stay inside the CE clamp band
        la[i] = rng.uniform(0.1, 0.9);
        ts[i] = rng.bernoulli(0.4);
        tl[i] = rng.bernoulli(0.6);
    }
    NdArray<double> gs({4, 4, 4}), gl({4, 4, 4});
    total_loss_grad(scar, ts, &la, &tl, gs, &gl, LossForm::literal);

    const double h = 1e-6;
    double worst = 0.0;
    for (int64_t i = 0; i < scar.size(); ++i) {
        for (int side = 0; side < 2; ++side) {
            NdArray<double>& pred = side == 0 ? scar : la;
            const NdArray<double>& grad = side == 0 ? gs : gl;
            const double keep = pred[i];
            pred[i] = keep + h;
            const double up = total_loss(scar, ts, &la, &tl).total;
            pred[i] = keep - h;
            const double dn = total_loss(scar, ts, &la, &tl).total;
            pred[i] = keep;
            const double fd = (up - dn) / (2 * h);
            worst = std::max(worst, std::abs(fd - grad[i]) / std::max({std::abs(fd), std::abs(grad[i]), 1e-6}));
        }
    }
    REQUIRE(worst < 1e-3);
}

TEST_CASE("literal and (1-DCS) loss forms have identical gradients") {
    Rng rng(55);
    NdArray<double> p({4, 4, 4}), t({4, 4, 4});
    for (int64_t i = 0; i < p.size(); ++i) {
        p[i] = rng.uniform(0.05, 0.95);
        t[i] = rng.bernoulli(0.5);
    }
    NdArray<double> g_lit({4, 4, 4}), g_omd({4, 4, 4});
    total_loss_grad<double>(p, t, nullptr, nullptr, g_lit, nullptr, LossForm::literal);
    total_loss_grad<double>(p, t, nullptr, nullptr, g_omd, nullptr, LossForm::one_minus_dice);
    for (int64_t i = 0; i < p.size(); ++i) REQUIRE(std::abs(g_lit[i] - g_omd[i]) < 1e-10);
}

TEST_CASE("total_loss depends only on the fused map (per-depth permutation invariance)") {
    Rng rng(7);
    std::vector<Tensor> maps;
    for (int k = 0; k < 3; ++k) {
        Tensor m({1, 1, 4, 4, 4});
        for (int64_t i = 0; i < m.size(); ++i) m[i] = float(rng.uniform(0, 1));
        maps.push_back(m);
    }
    NdArray<float> target({1, 1, 4, 4, 4});
    for (int64_t i = 0; i < target.size(); ++i) target[i] = rng.bernoulli(0.5);

    nn::BranchOutput out_a{maps, nn::fuse_outputs(maps)};
    std::swap(maps[0], maps[2]);
    std::swap(maps[0], maps[1]);
    nn::BranchOutput out_b{maps, nn::fuse_outputs(maps)};
    LossBreakdown a = nn::total_loss(out_a, target, nullptr, nullptr);
    LossBreakdown b = nn::total_loss(out_b, target, nullptr, nullptr);
    REQUIRE(a.total == b.total);
}

TEST_CASE("gradient is finite everywhere, including clamped extremes") {
    NdArray<double> p({8}), t({8});
    for (int i = 0; i < 8; ++i) {
        p[i] = (i % 3 == 0) ? 0.0 : (i % 3 == 1 ? 1.0 : 0.5);
        t[i] = i % 2;
    }
    NdArray<double> g({8});
    total_loss_grad<double>(p, t, nullptr, nullptr, g, nullptr);
    for (int i = 0; i < 8; ++i) REQUIRE(std::isfinite(g[i]));
}

TEST_CASE("moving the prediction toward the target strictly decreases the loss") {
    Rng rng(13);
    NdArray<double> t({4, 4, 4}), wrong({4, 4, 4});
    for (int64_t i = 0; i < t.size(); ++i) {
        t[i] = rng.bernoulli(0.5);
        wrong[i] = 1.0 - t[i];
    }
    double prev = 0;
    for (int step = 0; step <= 10; ++step) {
        const double a = double(step) / 10.0;
        NdArray<double> p({4, 4, 4});
        for (int64_t i = 0; i < p.size(); ++i) p[i] = (1 - a) * wrong[i] + a * t[i];
        const double total = total_loss<double>(p, t, nullptr, nullptr).total;
        if (step > 0) REQUIRE(total < prev);
        prev = total;
    }
}

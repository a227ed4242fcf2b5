#include "doctest.h"

#include <cmath>
#include <random>

#include "../support/gradcheck.hpp"
#include "rsed/objective.hpp"

using namespace rsed;
using ad::Tensor;
using testing::gradcheck;
using testing::random_vector;

TEST_SUITE("objective") {

TEST_CASE("node confidence loss closed forms") {
    // (N,1+C) logits; confidence in column 0
    Tensor logits = Tensor::constant({1, 5}, {0.0, 9.0, 9.0, 9.0, 9.0});
    CHECK(node_conf_loss(logits, {0.5}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(node_conf_loss(logits, {0.0}).item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Tensor saturated = Tensor::constant({1, 5}, {20.0, 0.0, 0.0, 0.0, 0.0});
    CHECK(node_conf_loss(saturated, {1.0}).item() < 1e-8);
}

TEST_CASE("node classification loss masks background") {
    SUBCASE("all background gives exactly zero") {
        Tensor logits = Tensor::constant({3, 5}, 1.0);
        CHECK(node_cls_loss(logits, {-1, -1, -1}, 4).item() == 0.0);
    }
    SUBCASE("uniform logits on one foreground node give ln 4") {
        Tensor logits = Tensor::constant({2, 5}, 0.0);
        CHECK(node_cls_loss(logits, {-1, 2}, 4).item() ==
              doctest::Approx(std::log(4.0)).epsilon(1e-12));
    }
    SUBCASE("confident correct logits vanish") {
        Tensor logits = Tensor::constant({1, 5}, {0.0, 20.0, 0.0, 0.0, 0.0});
        CHECK(node_cls_loss(logits, {0}, 4).item() < 1e-8);
    }
}

TEST_CASE("interval confidence loss closed forms") {
    SUBCASE("background batch with very negative logits") {
        Tensor logits = Tensor::constant({4, 1}, -20.0);
        CHECK(interval_conf_loss(logits, {0.0, 0.0, 0.0, 0.0}).item() < 1e-8);
    }
    SUBCASE("logit zero is ln 2 for any soft target") {
        Tensor logits = Tensor::constant({1, 1}, 0.0);
        CHECK(interval_conf_loss(logits, {0.4286}).item() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("logit ln 3 against soft label 0.75") {
        Tensor logits = Tensor::constant({1, 1}, std::log(3.0));
        const double want = -(0.75 * std::log(0.75) + 0.25 * std::log(0.25));
        CHECK(interval_conf_loss(logits, {0.75}).item() == doctest::Approx(want).epsilon(1e-9));
        CHECK(interval_conf_loss(logits, {0.75}).item() == doctest::Approx(0.5623).epsilon(1e-3));
    }
}

TEST_CASE("interval classification loss masks background") {
    Tensor logits = Tensor::constant({2, 4}, 0.0);
    CHECK(interval_cls_loss(logits, {-1, -1}).item() == 0.0);
    CHECK(interval_cls_loss(logits, {-1, 1}).item() ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
    Tensor confident = Tensor::constant({1, 4}, {0.0, 0.0, 20.0, 0.0});
    CHECK(interval_cls_loss(confident, {2}).item() < 1e-8);
}

TEST_CASE("interval localization loss closed forms") {
    ObjectiveConfig cfg;
    SUBCASE("perfect boxes give zero") {
        Tensor pred = Tensor::constant({1, 2}, {1.0, 2.0});
        CHECK(interval_loc_loss(pred, {1.0, 2.0}, {0}, cfg).item() ==
              doctest::Approx(0.0).epsilon(1e-6));
    }
    SUBCASE("pred [1,2] vs target [1.5,2.5] is ln 3") {
        Tensor pred = Tensor::constant({1, 2}, {1.0, 2.0});
        CHECK(interval_loc_loss(pred, {1.5, 2.5}, {0}, cfg).item() ==
              doctest::Approx(std::log(3.0)).epsilon(1e-9));
    }
    SUBCASE("disjoint boxes hit the clip floor") {
        Tensor pred = Tensor::constant({1, 2}, {0.0, 1.0});
        CHECK(interval_loc_loss(pred, {5.0, 6.0}, {0}, cfg).item() ==
              doctest::Approx(-std::log(1e-6)).epsilon(1e-9));
        CHECK(interval_loc_loss(pred, {5.0, 6.0}, {0}, cfg).item() ==
              doctest::Approx(13.8155).epsilon(1e-4));
    }
    SUBCASE("no foreground rows give zero") {
        Tensor pred = Tensor::constant({2, 2}, {1.0, 2.0, 3.0, 4.0});
        CHECK(interval_loc_loss(pred, {}, {}, cfg).item() == 0.0);
    }
    SUBCASE("span and union denominators agree on overlapping intervals") {
        // in 1-D, |a|+|g|-inter == max(ends)-min(starts) whenever inter > 0,
        // so both modes coincide away from the disjoint (floored) regime
        ObjectiveConfig span = cfg;
        span.loc_iou_mode = ad::IouMode::EnclosingSpan;
        for (auto [ps, pe] : {std::pair{1.0, 3.0}, {2.2, 3.8}, {1.5, 3.5}}) {
            Tensor pred = Tensor::constant({1, 2}, {ps, pe});
            const double u = interval_loc_loss(pred, {2.0, 4.0}, {0}, cfg).item();
            const double s = interval_loc_loss(pred, {2.0, 4.0}, {0}, span).item();
            CHECK(u == doctest::Approx(s).epsilon(1e-12));
        }
        Tensor disjoint = Tensor::constant({1, 2}, {0.0, 1.0});
        CHECK(interval_loc_loss(disjoint, {5.0, 6.0}, {0}, span).item() ==
              doctest::Approx(-std::log(1e-6)));
    }
}

TEST_CASE("total is the weighted sum and scales linearly") {
    std::mt19937_64 rng(81);
    Tensor node_logits = Tensor::constant({4, 5}, random_vector(20, rng));
    const std::vector<double> conf_t{0.2, 0.0, 1.0, 0.6};
    const std::vector<int> cls_t{0, -1, 2, 1};

    const auto total_with = [&](const LossWeights& w) {
        Tensor t1 = node_conf_loss(node_logits, conf_t);
        Tensor t2 = node_cls_loss(node_logits, cls_t, 4);
        return w.node_conf * t1.item() + w.node_cls * t2.item();
    };
    LossWeights unit;
    LossWeights zero;
    zero.node_conf = zero.node_cls = zero.interval_conf = zero.interval_cls =
        zero.interval_loc = 0.0;
    CHECK(total_with(zero) == 0.0);
    LossWeights doubled = unit;
    doubled.node_conf = 2.0;
    const double base = node_conf_loss(node_logits, conf_t).item();
    CHECK(total_with(doubled) - total_with(unit) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("foreground masking blocks background gradients") {
    std::mt19937_64 rng(82);
    Tensor logits = Tensor::param({4, 4}, random_vector(16, rng));
    const std::vector<int> labels{-1, 1, -1, 3};
    Tensor loss = interval_cls_loss(logits, labels);
    logits.zero_grad();
    loss.backward();
    for (int r = 0; r < 4; ++r) {
        double g = 0.0;
        for (int c = 0; c < 4; ++c)
            g += std::abs(logits.grad()[static_cast<std::size_t>(r) * 4 + c]);
        if (labels[static_cast<std::size_t>(r)] == -1)
            CHECK(g == 0.0);
        else
            CHECK(g > 0.0);
    }

    // perturbing background logits leaves the loss unchanged
    const double before = interval_cls_loss(logits, labels).item();
    logits.data()[0] += 5.0;
    logits.data()[9] -= 2.0; // row 2 is background
    const double after = interval_cls_loss(logits, labels).item();
    CHECK(after == doctest::Approx(before).epsilon(1e-15));
}

TEST_CASE("component gradients match finite differences") {
    std::mt19937_64 rng(83);
    Tensor node_logits = Tensor::param({5, 5}, random_vector(25, rng));
    const std::vector<double> conf_t{0.2, 0.0, 1.0, 0.6, 0.4};
    const std::vector<int> cls_t{0, -1, 2, 1, -1};
    CHECK(gradcheck(node_logits, [&] { return node_conf_loss(node_logits, conf_t); }) < 1e-6);
    CHECK(gradcheck(node_logits, [&] { return node_cls_loss(node_logits, cls_t, 4); }) < 1e-6);

    Tensor iv = Tensor::param({3, 2}, {1.0, 2.0, 4.0, 5.5, 7.0, 8.0});
    const std::vector<double> targets{1.2, 2.2, 3.8, 5.0, 6.5, 8.1};
    ObjectiveConfig cfg;
    CHECK(gradcheck(iv, [&] {
              return interval_loc_loss(iv, targets, {0, 1, 2}, cfg);
          }) < 1e-6);
    ObjectiveConfig span = cfg;
    span.loc_iou_mode = ad::IouMode::EnclosingSpan;
    CHECK(gradcheck(iv, [&] {
              return interval_loc_loss(iv, targets, {0, 1, 2}, span);
          }) < 1e-6);
}

TEST_CASE("non-negativity over random inputs") {
    std::mt19937_64 rng(84);
    for (int it = 0; it < 20; ++it) {
        Tensor logits = Tensor::constant({6, 5}, random_vector(30, rng, 2.0));
        std::vector<double> conf(6);
        std::vector<int> cls(6);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::uniform_int_distribution<int> l(-1, 3);
        for (int i = 0; i < 6; ++i) {
            conf[static_cast<std::size_t>(i)] = u(rng);
            cls[static_cast<std::size_t>(i)] = l(rng);
        }
        CHECK(node_conf_loss(logits, conf).item() >= 0.0);
        CHECK(node_cls_loss(logits, cls, 4).item() >= 0.0);
    }
}

} // TEST_SUITE

// Copyright 2026 The PIDM Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <doctest.h>

#include <cmath>
#include <random>

#include "pidm/gradcheck.hpp"
#include "pidm/objective.hpp"
#include "test_util.hpp"

using namespace pidm;
using namespace pidm::objective;

namespace {

template <typename T>
double scalar(const Var<T> &v) {
    return static_cast<double>(v.value().data.at(0));
}

// Direct evaluation of the action loss over all rows.
double reference_inv(const std::vector<double> &pa, const std::vector<double> &ta, const std::vector<double> &pg,
                     const std::vector<double> &tg) {
    double arm = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const double d = std::abs(pa[i] - ta[i]);
        arm += d < 1.0 ? 0.5 * d * d : d - 0.5;
    }
    double grip = 0;
    for (std::size_t i = 0; i < pg.size(); ++i) {
        const double p = std::clamp(pg[i], kBceEpsilon, 1.0 - kBceEpsilon);
        grip -= tg[i] * std::log(p) + (1 - tg[i]) * std::log(1 - p);
    }
    return arm / pa.size() + 0.01 * grip / pg.size();
}

Tensor<double> binary_targets(std::mt19937_64 &rng, Shape shape) {
    Tensor<double> t(shape);
    for (auto &v : t.data) v = std::bernoulli_distribution(0.5)(rng) ? 1.0 : 0.0;
    return t;
}

template <typename T>
void composition_identities(double tol) {
    std::mt19937_64 rng(11);
    double worst_inv = 0, worst_total = 0;
    for (int trial = 0; trial < 100; ++trial) {
        Graph<T> g;
        const int R = 2 + trial % 5, n = 3;
        const auto pa = g.constant(testing::random_tensor<T>(rng, {R * n, 2}, -1.5, 1.5));
        const auto ta = g.constant(testing::random_tensor<T>(rng, {R * n, 2}, -1, 1));
        const auto pg = g.constant(testing::random_tensor<T>(rng, {R * n, 1}, 0.01, 0.99));
        Tensor<T> tg({R * n, 1});
        for (auto &v : tg.data) v = std::bernoulli_distribution(0.5)(rng) ? T(1) : T(0);
        const auto img = g.constant(testing::random_tensor<T>(rng, {R * 2, 4, 12}, 0, 1));
        const auto timg = g.constant(testing::random_tensor<T>(rng, {R * 2, 4, 12}, 0, 1));
        const auto inv = loss_inv(pa, pg, ta, g.constant(tg));
        const auto fore = loss_fore(img, timg);
        const auto total = total_loss<T>(fore, inv.l_inv, {});
        worst_inv = std::max(worst_inv, std::abs(scalar(inv.l_inv) - (scalar(inv.l_arm) + 0.01 * scalar(inv.l_gripper))));
        worst_total = std::max(worst_total, std::abs(scalar(total) - (0.5 * scalar(fore) + scalar(inv.l_inv))));
    }
    CHECK(worst_inv <= tol);
    CHECK(worst_total <= tol);
}

} // namespace

TEST_CASE("weights") {
    CHECK(kLambda == 0.01);
    CHECK(kAlpha == 0.5);
}

TEST_CASE("foresight loss") {
    Graph<double> g;
    std::mt19937_64 rng(1);
    const auto target = testing::random_tensor(rng, {6, 4, 12}, 0, 1);
    CHECK(scalar(loss_fore(g.constant(target), g.constant(target))) == 0.0);
    Tensor<double> shifted = target;
    for (auto &v : shifted.data) v += 0.1;
    CHECK(scalar(loss_fore(g.constant(shifted), g.constant(target))) == doctest::Approx(0.01).epsilon(1e-12));

    // Three timesteps of two views; invalidating one keeps the mean when per-step errors agree.
    const std::vector<std::uint8_t> all{1, 1, 1}, some{1, 0, 1};
    CHECK(scalar(loss_fore(g.constant(shifted), g.constant(target), some)) ==
          doctest::Approx(scalar(loss_fore(g.constant(shifted), g.constant(target), all))).epsilon(1e-12));

    // Invalid rows contribute nothing, whatever they hold.
    Tensor<double> noisy = shifted;
    for (int i = 2 * 4 * 12; i < 4 * 4 * 12; ++i) noisy.data[i] = 100.0;
    CHECK(scalar(loss_fore(g.constant(noisy), g.constant(target), some)) == doctest::Approx(0.01).epsilon(1e-12));

    const std::vector<std::uint8_t> none{0, 0, 0};
    CHECK_THROWS_AS(loss_fore(g.constant(shifted), g.constant(target), none), Error);
}

TEST_CASE("action loss examples") {
    Graph<double> g;
    {
        // One slot, one timestep: arm error 0.5 in one of two dims, gripper p = 0.5 with y = 1.
        const auto r = loss_inv(g.constant(Tensor<double>({1, 2}, {0.5, 0.0})), g.constant(Tensor<double>({1, 1}, {0.5})),
                                g.constant(Tensor<double>({1, 2}, {0.0, 0.0})), g.constant(Tensor<double>({1, 1}, {1.0})));
        CHECK(scalar(r.l_arm) == doctest::Approx(0.0625).epsilon(1e-12));
        CHECK(scalar(r.l_gripper) == doctest::Approx(0.693147).epsilon(1e-6));
        CHECK(std::abs(scalar(r.l_inv) - 0.06943147) <= 1e-8);
    }
    {
        // Exact arm, gripper saturated at the clamp boundary.
        const auto r = loss_inv(g.constant(Tensor<double>({2, 2}, {0.3, -0.2, 0.1, 0.9})),
                                g.constant(Tensor<double>({2, 1}, {1.0, 1.0})),
                                g.constant(Tensor<double>({2, 2}, {0.3, -0.2, 0.1, 0.9})),
                                g.constant(Tensor<double>({2, 1}, {1.0, 1.0})));
        CHECK(scalar(r.l_arm) == 0.0);
        CHECK(scalar(r.l_inv) == doctest::Approx(1e-9).epsilon(1e-3));
    }
    {
        // Doubling the gripper term with the arm term fixed moves l_inv by 0.01 of the change.
        const auto arm = g.constant(Tensor<double>({1, 2}, {0.2, 0.0}));
        const auto zero = g.constant(Tensor<double>({1, 2}, {0.0, 0.0}));
        const auto y = g.constant(Tensor<double>({1, 1}, {1.0}));
        const double p1 = 0.6, p2 = p1 * p1; // -log(p^2) = 2 * -log(p)
        const auto a = loss_inv(arm, g.constant(Tensor<double>({1, 1}, {p1})), zero, y);
        const auto b = loss_inv(arm, g.constant(Tensor<double>({1, 1}, {p2})), zero, y);
        CHECK(scalar(b.l_gripper) == doctest::Approx(2 * scalar(a.l_gripper)).epsilon(1e-12));
        CHECK(scalar(b.l_inv) - scalar(a.l_inv) ==
              doctest::Approx(0.01 * (scalar(b.l_gripper) - scalar(a.l_gripper))).epsilon(1e-10));
    }
}

TEST_CASE("action loss against a direct evaluation") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Graph<double> g;
        const auto pa = testing::random_tensor(rng, {9, 2}, -2, 2);
        const auto ta = testing::random_tensor(rng, {9, 2}, -1, 1);
        const auto pg = testing::random_tensor(rng, {9, 1}, 0, 1);
        const auto tg = binary_targets(rng, {9, 1});
        const auto r = loss_inv(g.constant(pa), g.constant(pg), g.constant(ta), g.constant(tg));
        CHECK(scalar(r.l_inv) == doctest::Approx(reference_inv(pa.data, ta.data, pg.data, tg.data)).epsilon(1e-12));
    }
}

TEST_CASE("action loss masking") {
    Graph<double> g;
    // Two timesteps with two slots each; the second timestep is invalid.
    const auto pa = g.constant(Tensor<double>({4, 2}, {0.5, 0, 0.5, 0, 9, 9, 9, 9}));
    const auto ta = g.constant(Tensor<double>({4, 2}, {0, 0, 0, 0, 0, 0, 0, 0}));
    const auto pg = g.constant(Tensor<double>({4, 1}, {0.5, 0.5, 0.01, 0.01}));
    const auto tg = g.constant(Tensor<double>({4, 1}, {1, 1, 1, 1}));
    const std::vector<std::uint8_t> valid{1, 0};
    const auto r = loss_inv(pa, pg, ta, tg, valid);
    CHECK(std::abs(scalar(r.l_inv) - 0.06943147) <= 1e-8);
    const std::vector<std::uint8_t> none{0, 0};
    CHECK_THROWS_AS(loss_inv(pa, pg, ta, tg, none), Error);
    const std::vector<std::uint8_t> wrong{1, 1, 1};
    CHECK_THROWS_AS(loss_inv(pa, pg, ta, tg, wrong), Error);
}

TEST_CASE("total loss") {
    Graph<double> g;
    const auto fore = g.constant(Tensor<double>({}, {0.2}));
    const auto inv = g.constant(Tensor<double>({}, {0.05}));
    CHECK(scalar(total_loss<double>(fore, inv, {})) == doctest::Approx(0.15).epsilon(1e-12));
    CHECK(scalar(total_loss<double>(fore, inv, {.no_fore = true})) == 0.05);
    CHECK(scalar(total_loss<double>(std::nullopt, inv, {.no_fore = true})) == 0.05);
    CHECK(scalar(total_loss<double>(fore, inv, {.no_inv = true})) == doctest::Approx(0.1).epsilon(1e-12));
    const auto zero = g.constant(Tensor<double>({}, {0.0}));
    CHECK(scalar(total_loss<double>(zero, zero, {})) == 0.0);
    CHECK_THROWS_AS(total_loss<double>(fore, inv, {.no_fore = true, .no_inv = true}), Error);
    CHECK_THROWS_AS(total_loss<double>(std::nullopt, inv, {}), Error);
}

TEST_CASE("composition identities in double") { composition_identities<double>(1e-12); }
TEST_CASE("composition identities in float") { composition_identities<float>(1e-6); }

TEST_CASE("losses are invariant to row order") {
    std::mt19937_64 rng(5);
    Graph<double> g;
    const int R = 5, n = 2;
    const auto pa = testing::random_tensor(rng, {R * n, 2}, -2, 2);
    const auto ta = testing::random_tensor(rng, {R * n, 2}, -1, 1);
    const auto pg = testing::random_tensor(rng, {R * n, 1}, 0.05, 0.95);
    const auto tg = binary_targets(rng, {R * n, 1});
    const auto pi = testing::random_tensor(rng, {R, 3, 6}, 0, 1);
    const auto ti = testing::random_tensor(rng, {R, 3, 6}, 0, 1);
    const std::vector<std::uint8_t> valid{1, 0, 1, 1, 0};

    std::vector<int> perm(R);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto permute = [&](const Tensor<double> &t) {
        Tensor<double> out = t;
        const std::size_t row = t.data.size() / R;
        for (int r = 0; r < R; ++r)
            std::copy_n(t.data.begin() + perm[r] * row, row, out.data.begin() + r * row);
        return out;
    };
    std::vector<std::uint8_t> pvalid(R);
    for (int r = 0; r < R; ++r) pvalid[r] = valid[perm[r]];

    const auto a = loss_inv(g.constant(pa), g.constant(pg), g.constant(ta), g.constant(tg), valid);
    const auto b = loss_inv(g.constant(permute(pa)), g.constant(permute(pg)), g.constant(permute(ta)),
                            g.constant(permute(tg)), pvalid);
    CHECK(scalar(a.l_arm) == doctest::Approx(scalar(b.l_arm)).epsilon(1e-13));
    CHECK(scalar(a.l_gripper) == doctest::Approx(scalar(b.l_gripper)).epsilon(1e-13));
    CHECK(scalar(a.l_inv) == doctest::Approx(scalar(b.l_inv)).epsilon(1e-13));
    CHECK(scalar(loss_fore(g.constant(pi), g.constant(ti), valid)) ==
          doctest::Approx(scalar(loss_fore(g.constant(permute(pi)), g.constant(permute(ti)), pvalid))).epsilon(1e-13));
}

TEST_CASE("total loss gradients match finite differences") {
    std::mt19937_64 rng(9);
    ParamMap<double> params;
    params["arm"] = {testing::random_tensor(rng, {6, 2}, -1.8, 1.8), false};
    params["grip"] = {testing::random_tensor(rng, {6, 1}, 0.1, 0.9), false};
    params["img"] = {testing::random_tensor(rng, {4, 2, 3}, 0, 1), false};
    // Keep arm errors away from the smooth-L1 kink at |d| = 1.
    const auto ta = testing::random_tensor(rng, {6, 2}, -0.2, 0.2);
    for (std::size_t i = 0; i < ta.data.size(); ++i)
        if (std::abs(std::abs(params["arm"].value.data[i] - ta.data[i]) - 1.0) < 0.05) params["arm"].value.data[i] += 0.2;
    const auto tg = binary_targets(rng, {6, 1});
    const auto ti = testing::random_tensor(rng, {4, 2, 3}, 0, 1);
    const std::vector<std::uint8_t> valid{1, 0, 1};
    const LossBuilder loss = [&](Binder<double> &p) {
        Graph<double> &g = p.graph();
        const auto inv = loss_inv(p("arm"), p("grip"), g.constant(ta), g.constant(tg), valid);
        const std::vector<std::uint8_t> fvalid{1, 1, 0, 1};
        return total_loss<double>(loss_fore(p("img"), g.constant(ti), fvalid), inv.l_inv, {});
    };
    const auto report = gradcheck(loss, params, 1e-6);
    CHECK(report.entries == 12 + 6 + 24);
    CHECK(report.max_relative_error < 1e-6);
}

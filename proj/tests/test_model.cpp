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

#include <random>
#include <set>

#include "mask_oracle.hpp"
#include "pidm/model.hpp"
#include "pidm/sim.hpp"
#include "test_util.hpp"

using namespace pidm;
using namespace pidm::model;

namespace {

ModelConfig small_config(Mode mode, int m = 3, int k = 2, int n = 2) {
    ModelConfig c = preset("tiny");
    c.vocab = sim::instruction_vocabulary();
    c.mode = mode;
    c.history = m;
    c.latents = k;
    c.chunk = n;
    c.heads = 2;
    c.resampler_heads = 2;
    c.decoder_heads = 2;
    return c;
}

const Trajectory &demo() {
    static const Trajectory t = sim::gen_demos(sim::make_task(sim::Family::pick_place), 1, 3)[0];
    return t;
}

const Trajectory &play() {
    static const Trajectory t = sim::gen_play(1, 24, 5)[0];
    return t;
}

Batch<double> batch_for(const ModelConfig &c, std::vector<int> focus) {
    const Trajectory &tr = c.mode == Mode::finetune ? demo() : play();
    std::vector<data::TrainingWindow> ws;
    for (int t : focus) ws.push_back(data::sample_window(tr, t, c.history, c.chunk, c.mode));
    return make_batch<double>(c, ws);
}

ParamMap<double> params_for(const ModelConfig &c, std::uint64_t seed) {
    return cast_params<double>(init_params(c, seed));
}

// Token-space perturbation that touches only the listed (timestep, group) cells.
Tensor<double> delta_at(const ModelConfig &c, int batch, const std::function<bool(const TokenSlot &)> &where,
                        std::uint64_t seed) {
    const TokenLayout lay = layout(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor<double> d({batch, lay.length(), c.embed_dim});
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < lay.length(); ++i)
            if (where(lay.slot(i)))
                for (int e = 0; e < c.embed_dim; ++e) d.data[(static_cast<std::size_t>(b) * lay.length() + i) * c.embed_dim + e] = nd(rng);
    return d;
}

struct Latents {
    std::vector<double> frs;
    std::vector<double> inv;
};

Latents run(const ModelConfig &c, const ParamMap<double> &p, const Batch<double> &b, const Tensor<double> *delta) {
    Graph<double> g;
    Binder<double> bind(g, p);
    const auto r = forward(c, bind, b, build_mask(c), delta);
    return {r.frs.value().data, r.inv.value().data};
}

// Entries of a [B, m, G, d] latent belonging to timestep tau.
std::vector<double> at_step(const std::vector<double> &v, int B, int m, int G, int d, int tau) {
    std::vector<double> out;
    for (int b = 0; b < B; ++b)
        for (int g = 0; g < G; ++g)
            for (int e = 0; e < d; ++e)
                out.push_back(v[((static_cast<std::size_t>(b) * m + tau) * G + g) * d + e]);
    return out;
}

bool is_input(Group g) { return g == Group::goal || g == Group::img || g == Group::state; }

} // namespace

TEST_CASE("token layout") {
    ModelConfig c = preset("toy");
    const TokenLayout lay = layout(c);
    CHECK(lay.width() == 15);
    CHECK(lay.length() == 105);
    std::set<std::tuple<int, int, int>> seen;
    for (int i = 0; i < lay.length(); ++i) {
        const TokenSlot s = lay.slot(i);
        CHECK(lay.index(s.timestep, s.group, s.offset) == i);
        seen.insert({s.timestep, static_cast<int>(s.group), s.offset});
    }
    CHECK(seen.size() == 105u);
    CHECK(lay.group_size(Group::img) == 8);
    CHECK(lay.group_offset(Group::inv) == 12);
    CHECK_THROWS(lay.slot(105));
}

TEST_CASE("presets and validation") {
    const ModelConfig tiny = preset("tiny");
    CHECK(tiny.embed_dim == 16);
    CHECK(tiny.layers == 1);
    CHECK(tiny.heads == 1);
    CHECK(tiny.latents == 1);
    CHECK(tiny.history == 2);
    CHECK(tiny.chunk == 3);
    CHECK(tiny.image_side == 8);
    CHECK(tiny.patch == 4);
    const ModelConfig toy = preset("toy");
    CHECK(toy.embed_dim == 64);
    CHECK(toy.layers == 4);
    CHECK(toy.heads == 4);
    CHECK(toy.latents == 4);
    CHECK(toy.history == 7);
    CHECK(toy.chunk == 3);
    CHECK(toy.patches_per_view() == 16);
    const ModelConfig paper = preset("paper");
    CHECK(paper.embed_dim == 384);
    CHECK(paper.layers == 24);
    CHECK(paper.heads == 12);
    CHECK(paper.resampler_dim == 768);
    CHECK(paper.resampler_layers == 3);
    CHECK(paper.resampler_heads == 8);
    CHECK(paper.decoder_dim == 384);
    CHECK(paper.decoder_layers == 2);
    CHECK(paper.decoder_heads == 16);
    CHECK_THROWS(preset("huge"));

    ModelConfig bad = toy;
    bad.vocab = sim::instruction_vocabulary();
    bad.heads = 3;
    CHECK_THROWS(validate(bad));
    bad = toy;
    bad.patch = 5;
    CHECK_THROWS(validate(bad));
    bad = toy;
    bad.chunk = 0;
    CHECK_THROWS(validate(bad));

    ModelConfig other = toy;
    other.embed_dim = 32;
    other.mode = Mode::pretrain;
    const auto diff = architecture_mismatch(toy, other);
    REQUIRE(diff.size() == 1);
    CHECK(diff[0].find("embed dim") != std::string::npos);
}

TEST_CASE("mask equals the rule enumerator") {
    int configs = 0;
    for (int m = 1; m <= 3; ++m)
        for (int k = 1; k <= 2; ++k)
            for (int n = 1; n <= 3; ++n)
                for (Mode mode : {Mode::finetune, Mode::pretrain})
                    for (bool detach : {false, true}) {
                        ModelConfig c = preset("tiny");
                        c.history = m;
                        c.latents = k;
                        c.chunk = n;
                        c.mode = mode;
                        c.detach_frs = detach;
                        const AttentionMask mask = build_mask(c);
                        const auto expected = testing::enumerate_mask(m, k, n, mode == Mode::pretrain, detach);
                        REQUIRE(mask.allowed.size() == expected.size());
                        std::size_t wrong = 0;
                        for (std::size_t i = 0; i < expected.size(); ++i) wrong += mask.allowed[i] != expected[i];
                        CHECK(wrong == 0u);
                        ++configs;
                    }
    CHECK(configs == 72);
}

TEST_CASE("mask examples and invariants on the toy layout") {
    ModelConfig c = preset("toy");
    const TokenLayout lay = layout(c);
    const AttentionMask ft = build_mask(c);
    CHECK(ft.at(lay.index(1, Group::inv, 0), lay.index(1, Group::frs, 0)));
    CHECK_FALSE(ft.at(lay.index(2, Group::inv, 0), lay.index(1, Group::frs, 0)));
    c.mode = Mode::pretrain;
    const AttentionMask pt = build_mask(c);
    CHECK_FALSE(pt.at(lay.index(3, Group::frs, 0), lay.index(2, Group::img, 0)));
    CHECK(pt.at(lay.index(3, Group::frs, 0), lay.index(3, Group::img, 0)));

    for (const AttentionMask *mask : {&ft, &pt}) {
        for (int q = 0; q < lay.length(); ++q) {
            const TokenSlot a = lay.slot(q);
            CHECK(mask->at(q, q));
            for (int k = 0; k < lay.length(); ++k) {
                const TokenSlot b = lay.slot(k);
                if (!mask->at(q, k)) continue;
                CHECK(b.timestep <= a.timestep);
                if (is_input(a.group)) CHECK(is_input(b.group));
                if (a.group == Group::frs) CHECK(b.group != Group::inv);
            }
        }
    }
}

TEST_CASE("forward shapes and determinism") {
    const ModelConfig c = small_config(Mode::finetune);
    const auto p = params_for(c, 1);
    const auto b = batch_for(c, {2, 5});
    Graph<double> g;
    Binder<double> bind(g, p);
    const auto r = forward(c, bind, b, build_mask(c));
    CHECK(r.frs.shape() == Shape{2, c.history, 2, c.embed_dim});
    CHECK(r.inv.shape() == Shape{2, c.history, c.chunk, c.embed_dim});
    CHECK(r.tokens.shape() == Shape{2, layout(c).length(), c.embed_dim});
    const auto again = run(c, p, b, nullptr);
    CHECK(again.frs == r.frs.value().data);
    CHECK(again.inv == r.inv.value().data);
}

TEST_CASE("future inputs never reach earlier latents") {
    for (Mode mode : {Mode::finetune, Mode::pretrain}) {
        const ModelConfig c = small_config(mode);
        const auto p = params_for(c, 2);
        const auto b = batch_for(c, {4, 6});
        const auto base = run(c, p, b, nullptr);
        const int m = c.history, d = c.embed_dim;
        for (int t = 1; t < m; ++t) {
            const auto delta = delta_at(c, 2, [&](const TokenSlot &s) { return s.timestep >= t && is_input(s.group); }, 10 + t);
            const auto hit = run(c, p, b, &delta);
            for (int tau = 0; tau < t; ++tau) {
                CHECK(at_step(hit.frs, 2, m, 2, d, tau) == at_step(base.frs, 2, m, 2, d, tau));
                CHECK(at_step(hit.inv, 2, m, c.chunk, d, tau) == at_step(base.inv, 2, m, c.chunk, d, tau));
            }
            CHECK(at_step(hit.inv, 2, m, c.chunk, d, t) != at_step(base.inv, 2, m, c.chunk, d, t));
        }
    }
}

TEST_CASE("last-step image perturbation leaves earlier latents unchanged") {
    const ModelConfig c = small_config(Mode::finetune);
    const auto p = params_for(c, 3);
    auto b = batch_for(c, {5});
    const auto base = run(c, p, b, nullptr);
    const int m = c.history, d = c.embed_dim;
    const std::size_t image_values = static_cast<std::size_t>(c.patches_per_view()) * c.patch_values();
    std::mt19937_64 rng(7);
    for (int v = 0; v < 2; ++v)
        for (std::size_t i = 0; i < image_values; ++i)
            b.patches.data[((m - 1) * 2 + v) * image_values + i] = std::uniform_real_distribution<double>(0, 1)(rng);
    const auto hit = run(c, p, b, nullptr);
    for (int tau = 0; tau < m - 1; ++tau) {
        CHECK(at_step(hit.frs, 1, m, 2, d, tau) == at_step(base.frs, 1, m, 2, d, tau));
        CHECK(at_step(hit.inv, 1, m, c.chunk, d, tau) == at_step(base.inv, 1, m, c.chunk, d, tau));
    }
    CHECK(at_step(hit.frs, 1, m, 2, d, m - 1) != at_step(base.frs, 1, m, 2, d, m - 1));
}

TEST_CASE("pretrain readouts ignore earlier history") {
    const ModelConfig c = small_config(Mode::pretrain);
    const auto p = params_for(c, 4);
    const auto b = batch_for(c, {6, 9});
    const auto base = run(c, p, b, nullptr);
    const int m = c.history, d = c.embed_dim;
    for (int tau = 1; tau < m; ++tau) {
        const auto delta = delta_at(
            c, 2, [&](const TokenSlot &s) { return s.timestep < tau && (s.group == Group::img || s.group == Group::state); },
            20 + tau);
        const auto hit = run(c, p, b, &delta);
        CHECK(at_step(hit.frs, 2, m, 2, d, tau) == at_step(base.frs, 2, m, 2, d, tau));
        CHECK(at_step(hit.inv, 2, m, c.chunk, d, tau) == at_step(base.inv, 2, m, c.chunk, d, tau));
    }
    // The same perturbation does move finetune readouts.
    const ModelConfig f = small_config(Mode::finetune);
    const auto pf = params_for(f, 4);
    const auto bf = batch_for(f, {6, 9});
    const auto delta = delta_at(f, 2, [](const TokenSlot &s) { return s.timestep == 0 && s.group == Group::img; }, 30);
    CHECK(at_step(run(f, pf, bf, &delta).inv, 2, m, f.chunk, d, m - 1) !=
          at_step(run(f, pf, bf, nullptr).inv, 2, m, f.chunk, d, m - 1));
}

TEST_CASE("foresight latents ignore action readouts") {
    for (Mode mode : {Mode::finetune, Mode::pretrain}) {
        const ModelConfig c = small_config(mode);
        const auto p = params_for(c, 5);
        const auto b = batch_for(c, {5, 7});
        const auto delta = delta_at(c, 2, [](const TokenSlot &s) { return s.group == Group::inv; }, 40);
        CHECK(run(c, p, b, &delta).frs == run(c, p, b, nullptr).frs);
    }
}

TEST_CASE("action readouts see foresight readouts of their own step") {
    for (bool detach : {false, true}) {
        ModelConfig c = small_config(Mode::finetune);
        c.detach_frs = detach;
        const auto p = params_for(c, 6);
        const auto b = batch_for(c, {5, 7});
        const int m = c.history, d = c.embed_dim;
        for (int t = 0; t < m; ++t) {
            const auto delta = delta_at(
                c, 2, [&](const TokenSlot &s) { return s.timestep == t && s.group == Group::frs; }, 50 + t);
            const auto hit = run(c, p, b, &delta);
            const auto base = run(c, p, b, nullptr);
            for (int tau = 0; tau < m; ++tau) {
                const bool same = at_step(hit.inv, 2, m, c.chunk, d, tau) == at_step(base.inv, 2, m, c.chunk, d, tau);
                CHECK(same == (detach || tau != t));
            }
        }
    }
}

TEST_CASE("action-only loss reaches foresight and image parameters") {
    for (bool detach : {false, true}) {
        ModelConfig c = small_config(Mode::finetune);
        c.detach_frs = detach;
        const auto p = params_for(c, 7);
        const auto b = batch_for(c, {4, 6});
        Graph<double> g;
        Binder<double> bind(g, p);
        const auto r = forward(c, bind, b, build_mask(c));
        const auto act = decode_actions(c, bind, reshape(r.inv, {2 * c.history * c.chunk, c.embed_dim}));
        g.backward(add(mean(act.arm), mean(act.gripper)));
        const auto grads = bind.gradients();
        auto norm = [&](const std::string &name) {
            double s = 0;
            for (double v : grads.at(name).data) s += v * v;
            return s;
        };
        CHECK(norm("img.patch.w") > 0.0);
        if (detach) {
            CHECK(norm("readout.frs") == 0.0);
        } else {
            CHECK(norm("readout.frs") > 0.0);
        }
        CHECK(norm("dec.head.w") == 0.0);
    }
}

TEST_CASE("inputs do not depend on targets") {
    const ModelConfig c = small_config(Mode::finetune);
    const auto p = params_for(c, 8);
    const int t = 4;
    Trajectory other = demo();
    for (auto &a : other.actions) a = -a;
    const auto first = static_cast<std::size_t>(other.image(t + 1, 0) - other.images.data());
    for (std::size_t i = first; i < other.images.size(); ++i) other.images[i] = 255 - other.images[i];
    const auto wa = data::sample_window(demo(), t, c.history, c.chunk, Mode::finetune);
    const auto wb = data::sample_window(other, t, c.history, c.chunk, Mode::finetune);
    const auto a = make_batch<double>(c, {wa});
    const auto b = make_batch<double>(c, {wb});
    CHECK(a.target_arm.data != b.target_arm.data);
    CHECK(a.target_patches.data != b.target_patches.data);
    Graph<double> g1, g2;
    Binder<double> b1(g1, p), b2(g2, p);
    CHECK(tokenize(c, b1, a).value().data == tokenize(c, b2, b).value().data);
}

TEST_CASE("pretrain goal token is the state token of the goal state") {
    const ModelConfig c = small_config(Mode::pretrain);
    const auto p = params_for(c, 9);
    auto b = batch_for(c, {6});
    // Set the goal to the last history state: both tokens then get the same
    // timestep embedding and must coincide.
    const int m = c.history, sd = c.state_dim;
    std::copy_n(b.states.data.begin() + (m - 1) * sd, sd, b.goal_states.data.begin());
    Graph<double> g;
    Binder<double> bind(g, p);
    const auto tok = tokenize(c, bind, b).value();
    const TokenLayout lay = layout(c);
    const int d = c.embed_dim;
    const int gi = lay.index(m - 1, Group::goal, 0), si = lay.index(m - 1, Group::state, 0);
    for (int e = 0; e < d; ++e) CHECK(tok.data[gi * d + e] == doctest::Approx(tok.data[si * d + e]).epsilon(1e-12));
    CHECK(b.goal_states.size() == sd);
    const auto w = data::sample_window(play(), 6, m, c.chunk, Mode::pretrain);
    for (int i = 0; i < sd; ++i) CHECK(w.goal_state[i] == play().state(6 + c.chunk + 1)[i]);
}

TEST_CASE("instruction words") {
    const ModelConfig c = small_config(Mode::finetune);
    const auto w = word_weights<double>(c, "press the button");
    double s = 0;
    for (double v : w) s += v;
    CHECK(s == doctest::Approx(1.0));
    try {
        word_weights<double>(c, "press the lever");
        FAIL("expected an error");
    } catch (const Error &e) {
        CHECK(std::string(e.what()).find("lever") != std::string::npos);
    }
    data::TrainingWindow win = data::sample_window(demo(), 3, c.history, c.chunk, Mode::finetune);
    win.instruction.reset();
    CHECK_THROWS(make_batch<double>(c, {win}));
}

TEST_CASE("resampler") {
    const ModelConfig c = small_config(Mode::finetune);
    int differing = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto p = params_for(c, 100 + seed);
        std::mt19937_64 rng(seed);
        const auto x1 = testing::random_tensor(rng, {1, c.patches_per_view(), c.resampler_dim});
        const auto x2 = testing::random_tensor(rng, {1, c.patches_per_view(), c.resampler_dim});
        Graph<double> g;
        Binder<double> bind(g, p);
        const auto y1 = resample(c, bind, g.constant(x1));
        const auto y2 = resample(c, bind, g.constant(x2));
        const auto y1b = resample(c, bind, g.constant(x1));
        CHECK(y1.shape() == Shape{1, c.latents, c.resampler_dim});
        CHECK(y1.value().data == y1b.value().data);
        differing += y1.value().data != y2.value().data;
    }
    CHECK(differing == 20);
}

TEST_CASE("action decoder bounds") {
    const ModelConfig c = small_config(Mode::finetune);
    auto p = params_for(c, 11);
    std::mt19937_64 rng(12);
    {
        Graph<double> g;
        Binder<double> bind(g, p);
        const auto out = decode_actions(c, bind, g.constant(testing::random_tensor(rng, {1000, c.embed_dim}, -30, 30)));
        for (double v : out.arm.value().data) CHECK((v >= -1.0 && v <= 1.0));
        for (double v : out.gripper.value().data) CHECK((v >= 0.0 && v <= 1.0));
    }
    for (const char *name : {"act.arm.w", "act.arm.b", "act.grip.w", "act.grip.b"})
        for (auto &v : p.at(name).value.data) v = 0.0;
    Graph<double> g;
    Binder<double> bind(g, p);
    const auto out = decode_actions(c, bind, g.constant(testing::random_tensor(rng, {5, c.embed_dim})));
    for (double v : out.arm.value().data) CHECK(v == 0.0);
    for (double v : out.gripper.value().data) CHECK(v == 0.5);
    CHECK(0.5 >= sim::kGripperThreshold);
}

TEST_CASE("image decoder") {
    ModelConfig c = preset("toy");
    c.vocab = sim::instruction_vocabulary();
    const auto p = cast_params<double>(init_params(c, 13));
    std::mt19937_64 rng(14);
    const auto rows = testing::random_tensor(rng, {3, c.embed_dim});
    Graph<double> g;
    Binder<double> bind(g, p);
    const auto y = decode_images(c, bind, g.constant(rows));
    CHECK(y.shape() == Shape{3, 16, 192});
    const auto again = decode_images(c, bind, g.constant(rows));
    CHECK(y.value().data == again.value().data);
    // Rows decode independently.
    Tensor<double> first({1, c.embed_dim}, std::vector<double>(rows.data.begin(), rows.data.begin() + c.embed_dim));
    const auto alone = decode_images(c, bind, g.constant(first));
    CHECK(std::equal(alone.value().data.begin(), alone.value().data.end(), y.value().data.begin(),
                     [](double a, double b) { return std::abs(a - b) < 1e-12; }));
    const auto img = unpatchify<double>(std::span<const double>(y.value().data.data(), 16 * 192), 32, 8);
    CHECK(img.size() == 32u * 32u * 3u);
}

TEST_CASE("patchify") {
    std::vector<std::uint8_t> img(32 * 32 * 3);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<std::uint8_t>(i * 7);
    const auto px = patchify<double>(img.data(), 32, 32, 8);
    const auto back = unpatchify<double>(px, 32, 8);
    for (std::size_t i = 0; i < img.size(); ++i) CHECK(back[i] == doctest::Approx(img[i] / 255.0));
    // 4x4 box filter down to 8x8.
    const auto small = patchify<double>(img.data(), 32, 8, 4);
    double acc = 0;
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) acc += img[(y * 32 + x) * 3];
    CHECK(small[0] == doctest::Approx(acc / 16.0 / 255.0));
    const auto table = sincos_2d(4, 16);
    CHECK(table.size() == 16u * 16u);
}

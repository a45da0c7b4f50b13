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
#include <limits>
#include <random>

#include "pidm/sim.hpp"
#include "pidm/tensor.hpp"

using namespace pidm;
using namespace pidm::sim;

namespace {

int count_kind(const SimState &s, ObjectKind k) {
    int n = 0;
    for (const auto &o : s.objects) n += o.kind == k;
    return n;
}

int count_color(const Image &img, std::array<std::uint8_t, 3> rgb) {
    int n = 0;
    for (std::size_t i = 0; i < img.size(); i += 3) n += img[i] == rgb[0] && img[i + 1] == rgb[1] && img[i + 2] == rgb[2];
    return n;
}

bool valid_state(const SimState &s) {
    auto in01 = [](Vec2 p) { return p.x >= 0 && p.x <= 1 && p.y >= 0 && p.y <= 1; };
    if (!in01(s.ee)) return false;
    for (const auto &o : s.objects) {
        if (!in01(o.position)) return false;
        if (o.kind == ObjectKind::drawer && (o.aux < 0 || o.aux > 1)) return false;
        if (s.held == o.id && !(o.position == s.ee)) return false;
    }
    return true;
}

Action act(double x, double y, double g) {
    Action a;
    a.arm = {x, y};
    a.gripper = g;
    return a;
}

} // namespace

TEST_CASE("reset is deterministic and seed dependent") {
    for (Family f : kAllFamilies) {
        const TaskSpec task = make_task(f);
        CHECK(reset(task, 7) == reset(task, 7));
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            const SimState a = reset(task, 2 * seed);
            const SimState b = reset(task, 2 * seed + 1);
            CHECK_FALSE(a.objects.front().position == b.objects.front().position);
            CHECK(valid_state(a));
        }
    }
}

TEST_CASE("pick-place scene holds one block and one pad") {
    const SimState s = reset(make_task(Family::pick_place), 3);
    CHECK(s.objects.size() == 2);
    CHECK(count_kind(s, ObjectKind::block) == 1);
    CHECK(count_kind(s, ObjectKind::pad) == 1);
}

TEST_CASE("step moves the end effector and keeps others fixed") {
    SimState s;
    s.ee = {0.5, 0.5};
    SimState n = step(s, act(1, 0, 0));
    CHECK(n.ee.x == doctest::Approx(0.55).epsilon(1e-12));
    CHECK(n.ee.y == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(n.step_count == 1);

    SimState scene = reset(make_task(Family::open_drawer), 11);
    SimState idle = step(scene, act(0, 0, 0));
    CHECK(idle.step_count == scene.step_count + 1);
    idle.step_count = scene.step_count;
    CHECK(idle == scene);

    SimState edge;
    edge.ee = {0.98, 0.01};
    n = step(edge, act(1, -1, 0));
    CHECK(n.ee == Vec2{1.0, 0.0});
}

TEST_CASE("grasp within radius and release") {
    SimState s;
    s.ee = {0.5, 0.5};
    s.objects.push_back({0, ObjectKind::block, {0.53, 0.5}, Color::red, 0.0});
    SimState n = step(s, act(0, 0, 1));
    REQUIRE(n.held.has_value());
    CHECK(*n.held == 0);
    CHECK(n.objects[0].position == n.ee);
    n = step(n, act(1, 0, 1));
    CHECK(n.objects[0].position == n.ee);
    n = step(n, act(0, 0, 0));
    CHECK_FALSE(n.held.has_value());
    const Vec2 dropped = n.objects[0].position;
    n = step(n, act(1, 1, 0));
    CHECK(n.objects[0].position == dropped);

    SimState far = s;
    far.objects[0].position = {0.55, 0.5};
    CHECK_FALSE(step(far, act(0, 0, 1)).held.has_value());
}

TEST_CASE("gripper threshold at one half") {
    SimState s;
    CHECK(step(s, act(0, 0, 0.5)).gripper == 1);
    CHECK(step(s, act(0, 0, 0.49)).gripper == 0);
}

TEST_CASE("button lights under a closed gripper and stays lit") {
    SimState s;
    s.ee = {0.5, 0.5};
    s.objects.push_back({0, ObjectKind::button, {0.52, 0.5}, Color::magenta, 0.0});
    CHECK(step(s, act(0, 0, 0)).objects[0].aux == 0.0);
    SimState n = step(s, act(0, 0, 1));
    CHECK(n.objects[0].aux == 1.0);
    n = step(n, act(-1, -1, 0));
    CHECK(n.objects[0].aux == 1.0);
}

TEST_CASE("drawer fraction follows the handle along its slide axis") {
    SimState s;
    const Vec2 anchor{0.4, 0.5};
    s.objects.push_back({0, ObjectKind::drawer, anchor, Color::brown, 0.0});
    s.ee = {0.41, 0.51};
    SimState n = step(s, act(0, 0, 1));
    REQUIRE(n.held == 0);
    CHECK(n.ee == anchor);
    n = step(n, act(1, 1, 1));
    CHECK(n.objects[0].aux == doctest::Approx(0.25));
    CHECK(n.ee.y == doctest::Approx(0.5));
    for (int i = 0; i < 10; ++i) n = step(n, act(1, 0, 1));
    CHECK(n.objects[0].aux == 1.0);
    CHECK(n.ee.x == doctest::Approx(0.6));
    for (int i = 0; i < 10; ++i) n = step(n, act(-1, 0, 1));
    CHECK(n.objects[0].aux == 0.0);
    CHECK(valid_state(n));
}

TEST_CASE("closed empty gripper pushes nearby blocks") {
    SimState s;
    s.ee = {0.455, 0.5};
    s.gripper = 1;
    s.objects.push_back({0, ObjectKind::block, {0.5, 0.5}, Color::cyan, 0.0});
    const SimState n = step(s, act(1, 0, 1));
    CHECK(n.objects[0].position.x == doctest::Approx(0.55));
    CHECK_FALSE(n.held.has_value());
}

TEST_CASE("step is total over random inputs") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> wide(-50.0, 50.0);
    const double inf = std::numeric_limits<double>::infinity();
    for (Family f : kAllFamilies) {
        SimState s = reset(make_task(f), 1);
        for (int i = 0; i < 400; ++i) {
            Action a = act(wide(rng), wide(rng), wide(rng));
            if (i % 50 == 0) a = act(inf, -inf, inf);
            s = step(s, a);
            REQUIRE(valid_state(s));
        }
    }
}

TEST_CASE("render") {
    SimState empty;
    empty.ee = {-10, -10};
    // ee placed off the table leaves only background.
    const Image bg = render(empty, View::base);
    CHECK(bg.size() == kImageBytes);
    CHECK(count_color(bg, {40, 40, 40}) == kImageSide * kImageSide);

    const SimState s = reset(make_task(Family::stack), 9);
    CHECK(render(s, View::base) == render(s, View::base));
    CHECK(render(s, View::hand) == render(s, View::hand));
    CHECK_FALSE(render(s, View::base) == render(s, View::hand));

    SimState held;
    held.ee = {0.5, 0.5};
    held.gripper = 1;
    held.held = 0;
    held.objects.push_back({0, ObjectKind::block, {0.5, 0.5}, Color::red, 0.0});
    const std::array<std::uint8_t, 3> red{220, 40, 40};
    const int base_px = count_color(render(held, View::base), red);
    const int hand_px = count_color(render(held, View::hand), red);
    CHECK(hand_px > base_px);

    SimState open = held;
    open.gripper = 0;
    open.held.reset();
    CHECK(count_color(render(open, View::base), {255, 255, 255}) > 0);
    CHECK(count_color(render(held, View::base), {255, 0, 0}) > 0);
}

TEST_CASE("expert waypoint rule and grasp transition") {
    const TaskSpec task = make_task(Family::pick_place);
    SimState s;
    s.ee = {0.2, 0.2};
    s.objects.push_back({0, ObjectKind::block, {0.5, 0.2}, Color::red, 0.0});
    s.objects.push_back({1, ObjectKind::pad, {0.5, 0.8}, Color::blue, 0.0});
    Action a = expert_action(s, task);
    CHECK(a.arm[0] == 1.0);
    CHECK(a.arm[1] == 0.0);
    CHECK(a.gripper == 0.0);

    s.ee = {0.495, 0.2};
    a = expert_action(s, task);
    CHECK(a.gripper == 1.0);

    SimState missing;
    CHECK_THROWS_AS(expert_action(missing, task), Error);
}

TEST_CASE("expert solves every family from 100 resets") {
    for (Family f : kAllFamilies) {
        const TaskSpec task = make_task(f);
        int solved = 0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            SimState s = reset(task, seed);
            std::vector<bool> seen(task.stages.size(), false);
            bool monotone = true;
            while (!task_success(task, s) && s.step_count < kEpisodeCap) {
                s = step(s, expert_action(s, task));
                for (std::size_t k = 0; k < seen.size(); ++k) {
                    const bool now = stage_satisfied(task, s, k);
                    if (seen[k] && !now) monotone = false;
                    seen[k] = seen[k] || now;
                }
            }
            solved += task_success(task, s);
            for (std::size_t k = 0; k < seen.size(); ++k) CHECK(stage_satisfied(task, s, k));
            if (f == Family::pick_place || f == Family::stack || f == Family::press_button) CHECK(monotone);
        }
        INFO(family_name(f));
        CHECK(solved == 100);
    }
}

TEST_CASE("chain scenes hold the union of objects") {
    const std::vector<TaskSpec> chain = {make_task(Family::open_drawer), make_task(Family::pick_place),
                                         make_task(Family::press_button), make_task(Family::close_drawer),
                                         make_task(Family::stack)};
    const SimState s = reset_scene(chain, 4);
    CHECK(count_kind(s, ObjectKind::drawer) == 1);
    CHECK(count_kind(s, ObjectKind::block) == 3);
    CHECK(count_kind(s, ObjectKind::pad) == 1);
    CHECK(count_kind(s, ObjectKind::button) == 1);
    CHECK(task_applicable(chain[0], s));
    CHECK_FALSE(task_applicable(chain[3], s));
}

TEST_CASE("family names round-trip") {
    for (Family f : kAllFamilies) CHECK(parse_family(family_name(f)) == f);
    CHECK_THROWS_AS(parse_family("juggle"), Error);
    CHECK(parse_families("stack,press-button").size() == 2);
    const auto &vocab = instruction_vocabulary();
    CHECK(std::is_sorted(vocab.begin(), vocab.end()));
}

TEST_CASE("demos and play") {
    const TaskSpec task = make_task(Family::press_button);
    const auto demos = gen_demos(task, 3, 42);
    REQUIRE(demos.size() == 3);
    CHECK(demos == gen_demos(task, 3, 42));
    for (const auto &d : demos) {
        CHECK(d.instruction == task.instruction);
        CHECK(d.images.size() == static_cast<std::size_t>(d.length) * 2 * kImageBytes);
        CHECK(d.states.size() == static_cast<std::size_t>(d.length) * kStateDim);
        CHECK(d.actions.size() == static_cast<std::size_t>(d.length) * kActionDim);
        CHECK_FALSE(d.stages.empty());
        // Replaying the recorded actions regenerates the images bit for bit.
        SimState s = reset(task, d.seed);
        Trajectory replay;
        replay.height = replay.width = kImageSide;
        for (int t = 0; t < d.length; ++t) {
            record_observation(replay, s);
            const float *a = d.action(t);
            s = step(s, act(a[0], a[1], a[2]));
        }
        CHECK(replay.images == d.images);
        SimState last = reset(task, d.seed);
        for (int t = 0; t + 1 < d.length; ++t) {
            const float *a = d.action(t);
            last = step(last, act(a[0], a[1], a[2]));
        }
        CHECK(task_success(task, last));
    }

    const auto play = gen_play(4, 60, 9);
    CHECK(play == gen_play(4, 60, 9));
    for (const auto &p : play) {
        CHECK_FALSE(p.instruction.has_value());
        CHECK(p.length == 60);
        CHECK(p.task == "play");
    }
}

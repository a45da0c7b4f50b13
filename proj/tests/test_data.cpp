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

#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>

#include "pidm/data.hpp"
#include "pidm/sim.hpp"
#include "pidm/tensor.hpp"
#include "test_util.hpp"

using namespace pidm;
using namespace pidm::data;
namespace fs = std::filesystem;

namespace {

// Synthetic trajectory with distinguishable per-step contents.
Trajectory synthetic(int T, bool with_instruction, std::string task = "stack", std::uint64_t seed = 1) {
    Trajectory t;
    t.task = std::move(task);
    if (with_instruction) t.instruction = "stack the yellow block on the green block";
    t.length = T;
    t.seed = seed;
    t.stages = {{3, 0}, {7, 1}};
    std::mt19937_64 rng(seed);
    t.images.resize(static_cast<std::size_t>(T) * 2 * t.image_bytes());
    for (auto &b : t.images) b = static_cast<std::uint8_t>(rng());
    for (int i = 0; i < T * t.state_dim; ++i) t.states.push_back(static_cast<float>(i) * 0.25f);
    for (int i = 0; i < T * t.action_dim; ++i) t.actions.push_back(static_cast<float>(i % 7) / 7.0f);
    return t;
}

TrajectoryList as_list(std::vector<Trajectory> v) {
    TrajectoryList out;
    for (auto &t : v) out.push_back(std::make_shared<const Trajectory>(std::move(t)));
    return out;
}

std::string error_of(const std::function<void()> &fn) {
    try {
        fn();
    } catch (const Error &e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST_CASE("trajectory round trip is bit exact") {
    const fs::path dir = pidm::testing::temp_dir("traj_roundtrip");
    auto demos = sim::gen_demos(sim::make_task(sim::Family::pick_place), 2, 5);
    auto play = sim::gen_play(1, 60, 5);
    for (const auto &t : {demos[0], demos[1], play[0], synthetic(12, false)}) {
        write_trajectory(t, dir / "x.traj");
        CHECK(read_trajectory(dir / "x.traj") == t);
        CHECK(encode_trajectory(read_trajectory(dir / "x.traj")) == encode_trajectory(t));
    }
}

TEST_CASE("trajectory decode errors carry offsets") {
    const Trajectory t = synthetic(5, true);
    auto bytes = encode_trajectory(t);

    auto bad = bytes;
    bad[0] = 'X';
    CHECK(error_of([&] { decode_trajectory(bad); }).find("bad magic") != std::string::npos);

    bad = bytes;
    bad[4] = 9;
    CHECK(error_of([&] { decode_trajectory(bad); }).find("version") != std::string::npos);

    std::uint32_t header_len = 0;
    std::memcpy(&header_len, bytes.data() + 8, 4);
    const std::size_t images_at = 12 + header_len;
    bad.assign(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(images_at + 1000));
    const std::string msg = error_of([&] { decode_trajectory(bad); });
    CHECK(msg.find("images") != std::string::npos);
    CHECK(msg.find("offset " + std::to_string(images_at)) != std::string::npos);

    bad.assign(bytes.begin(), bytes.end() - 1);
    CHECK(error_of([&] { decode_trajectory(bad); }).find("actions") != std::string::npos);

    Trajectory zero = t;
    zero.length = 0;
    zero.images.clear();
    zero.states.clear();
    zero.actions.clear();
    CHECK_THROWS_AS(encode_trajectory(zero), Error);

    // Hand-built header with T=0.
    const std::string header =
        R"({"H":32,"T":0,"W":32,"action_dim":3,"instruction":null,"seed":0,"stages":[],"state_dim":4,"task":"x","views":2})";
    std::vector<std::uint8_t> raw = {'P', 'I', 'D', 'M', 1, 0, 0, 0};
    const auto len = static_cast<std::uint32_t>(header.size());
    raw.insert(raw.end(), reinterpret_cast<const std::uint8_t *>(&len), reinterpret_cast<const std::uint8_t *>(&len) + 4);
    raw.insert(raw.end(), header.begin(), header.end());
    CHECK(error_of([&] { decode_trajectory(raw); }).find("T=0") != std::string::npos);
}

TEST_CASE("window history and targets") {
    const Trajectory t = synthetic(20, true);
    const TrainingWindow w = sample_window(t, 5, 7, 3, Mode::finetune);
    CHECK(w.history == std::vector<int>{0, 0, 1, 2, 3, 4, 5});
    CHECK(w.valid == std::vector<std::uint8_t>(7, 1));
    CHECK(w.foresight_step(6) == 8);
    CHECK(w.instruction == t.instruction);

    const TrainingWindow last = sample_window(t, 16, 7, 3, Mode::finetune);
    CHECK(last.valid.back() == 1);
    CHECK(last.foresight_step(6) == 19);
    CHECK_THROWS_AS(sample_window(t, 17, 7, 3, Mode::finetune), Error);
    CHECK_THROWS_AS(sample_window(t, -1, 7, 3, Mode::finetune), Error);

    const TrainingWindow pre = sample_window(t, 4, 7, 3, Mode::pretrain);
    CHECK_FALSE(pre.instruction.has_value());
    CHECK(pre.goal_state == std::vector<float>(t.state(8), t.state(8) + 4));
    CHECK_THROWS_AS(sample_window(t, 16, 7, 3, Mode::pretrain), Error);

    const Trajectory silent = synthetic(20, false);
    CHECK_THROWS_AS(sample_window(silent, 3, 7, 3, Mode::finetune), Error);
    CHECK_NOTHROW(sample_window(silent, 3, 7, 3, Mode::pretrain));
}

TEST_CASE("window sampler never reads past the end") {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 2000; ++trial) {
        const int n = 1 + static_cast<int>(rng() % 4);
        const int m = 1 + static_cast<int>(rng() % 8);
        const int T = n + 2 + static_cast<int>(rng() % 20);
        const Mode mode = rng() % 2 ? Mode::pretrain : Mode::finetune;
        const Trajectory t = synthetic(T, true);
        const auto [lo, hi] = valid_focus_range(t, n, mode);
        REQUIRE(hi >= lo);
        const int focus = lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
        const TrainingWindow w = sample_window(t, focus, m, n, mode);
        REQUIRE(static_cast<int>(w.history.size()) == m);
        REQUIRE(w.history.back() == focus);
        for (int j = 0; j < m; ++j) {
            REQUIRE(w.history[j] >= 0);
            if (w.valid[j]) {
                REQUIRE(w.foresight_step(j) <= T - 1);
                REQUIRE(w.action_step(j) + n - 1 <= T - 1);
                if (mode == Mode::pretrain) REQUIRE(w.history[j] + n + 1 <= T - 1);
            }
        }
    }
}

TEST_CASE("batches cover every window once per epoch") {
    // T = 13 with n = 3 leaves focus steps 0..9.
    auto trajs = as_list({synthetic(13, true)});
    BatchIter it(trajs, Mode::finetune, 7, 3, 4, 99);
    CHECK(it.windows_per_epoch() == 10);
    std::vector<std::size_t> sizes;
    std::multiset<int> seen;
    for (int b = 0; b < 3; ++b) {
        const auto refs = it.next_refs();
        sizes.push_back(refs.size());
        for (const auto &r : refs) seen.insert(r.t);
    }
    CHECK(sizes == std::vector<std::size_t>{4, 4, 2});
    CHECK(seen.size() == 10);
    CHECK(std::set<int>(seen.begin(), seen.end()).size() == 10);
    CHECK(it.epoch() == 0);
    it.next_refs();
    CHECK(it.epoch() == 1);

    BatchIter a(trajs, Mode::finetune, 7, 3, 4, 5), b(trajs, Mode::finetune, 7, 3, 4, 5);
    for (int i = 0; i < 6; ++i) CHECK(a.next_refs() == b.next_refs());
    CHECK_THROWS_AS(BatchIter(trajs, Mode::finetune, 7, 3, 0, 1), Error);
    CHECK_THROWS_AS(BatchIter(as_list({synthetic(14, false)}), Mode::finetune, 7, 3, 4, 1), Error);

    auto many = as_list({synthetic(14, true), synthetic(9, true), synthetic(4, true), synthetic(20, true)});
    BatchIter c(many, Mode::pretrain, 3, 3, 7, 2);
    std::multiset<std::pair<std::size_t, int>> epoch;
    while (c.epoch() == 0) {
        const auto refs = c.next_refs();
        if (c.epoch() != 0) break;
        for (const auto &r : refs) epoch.insert({r.traj, r.t});
    }
    const auto expected = enumerate_windows(many, 3, Mode::pretrain);
    CHECK(epoch.size() == expected.size());
    for (const auto &r : expected) CHECK(epoch.count({r.traj, r.t}) == 1);
}

TEST_CASE("stratified subsampling") {
    std::vector<std::string> groups;
    for (int i = 0; i < 100; ++i) groups.push_back(i < 34 ? "a" : (i < 67 ? "b" : "c"));
    const auto pick = stratified_subsample(groups, 0.1, 3);
    CHECK(pick.size() == 10);
    CHECK(pick == stratified_subsample(groups, 0.1, 3));
    CHECK_FALSE(pick == stratified_subsample(groups, 0.1, 4));
    std::map<std::string, int> per;
    for (auto i : pick) ++per[groups[i]];
    for (const auto &[g, c] : per) CHECK(c >= 3);

    for (double f : {0.1, 0.2, 0.3, 0.4, 0.7, 1.0})
        for (std::size_t n : {1u, 7u, 10u, 30u, 600u}) {
            std::vector<std::string> g(n, "x");
            for (std::size_t i = 0; i < n; i += 3) g[i] = "y";
            const auto s = stratified_subsample(g, f, 1);
            CHECK(s.size() == static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9)));
            CHECK(std::set<std::size_t>(s.begin(), s.end()).size() == s.size());
        }
    CHECK_THROWS_AS(stratified_subsample(groups, 0.0, 1), Error);
    CHECK_THROWS_AS(stratified_subsample(groups, 1.5, 1), Error);
}

TEST_CASE("dataset directory round trip") {
    const fs::path dir = pidm::testing::temp_dir("dataset");
    std::vector<Trajectory> demos;
    for (auto f : {sim::Family::press_button, sim::Family::open_drawer}) {
        auto d = sim::gen_demos(sim::make_task(f), 5, 1);
        demos.insert(demos.end(), d.begin(), d.end());
    }
    const auto play = sim::gen_play(3, 20, 2);
    write_dataset(dir, demos, play);
    const auto manifest = read_manifest(dir);
    CHECK(manifest.size() == 13);
    const DatasetSplit split = load_dataset(dir);
    CHECK(split.finetune.size() == 10);
    CHECK(split.pretrain.size() == 3);
    for (std::size_t i = 0; i < demos.size(); ++i) CHECK(*split.finetune[i] == demos[i]);
    for (const auto &p : split.pretrain) CHECK_FALSE(p->instruction.has_value());

    const DatasetSplit half = apply_fraction(split, 0.5, 8);
    CHECK(half.finetune.size() == 5);
    CHECK(half.pretrain.size() == 3);
    CHECK(half.fraction == 0.5);
}

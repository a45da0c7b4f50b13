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

// Deterministic planar tabletop world: an end effector with a binary gripper
// over blocks, pads, a button and a sliding drawer, rendered from a fixed
// overhead camera and a zoomed camera that follows the end effector.

#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pidm::sim {

inline constexpr double kMaxStep = 0.05;
inline constexpr double kGraspRadius = 0.04;
inline constexpr double kOnRadius = 0.05;
inline constexpr double kPushRadius = 0.05;
inline constexpr double kDrawerTravel = 0.2;
inline constexpr double kHandViewSide = 0.25;
inline constexpr double kGripperThreshold = 0.5;
inline constexpr int kEpisodeCap = 120;
inline constexpr int kImageSide = 32;
inline constexpr int kViews = 2;
inline constexpr int kArmDim = 2;
inline constexpr int kStateDim = 4;
inline constexpr int kActionDim = kArmDim + 1;
inline constexpr std::size_t kImageBytes = static_cast<std::size_t>(kImageSide) * kImageSide * 3;

struct Vec2 {
    double x = 0.0;
    double y = 0.0;

    bool operator==(const Vec2 &) const = default;
};

double distance(Vec2 a, Vec2 b);

enum class ObjectKind : std::uint8_t { block, pad, button, drawer };

enum class Color : std::uint8_t { red, green, blue, yellow, magenta, cyan, orange, brown };

struct Object {
    int id = 0;
    ObjectKind kind = ObjectKind::block;
    // Drawers report the current handle position.
    Vec2 position;
    Color color = Color::red;
    // Button: lit flag (0 or 1). Drawer: opening fraction in [0, 1].
    double aux = 0.0;

    bool operator==(const Object &) const = default;
};

struct SimState {
    Vec2 ee{0.5, 0.5};
    int gripper = 0; // 0 open, 1 closed
    std::optional<int> held;
    std::vector<Object> objects;
    int step_count = 0;

    bool operator==(const SimState &) const = default;
};

// Closed-handle position of a drawer.
Vec2 drawer_anchor(const Object &drawer);

enum class Family : std::uint8_t { pick_place, stack, press_button, open_drawer, close_drawer, push_to_zone };

inline constexpr std::array<Family, 6> kAllFamilies = {Family::pick_place,  Family::stack,
                                                       Family::press_button, Family::open_drawer,
                                                       Family::close_drawer, Family::push_to_zone};

std::string family_name(Family f);
Family parse_family(const std::string &name);
std::vector<Family> parse_families(const std::string &comma_list);

// Objects are addressed by (kind, color), which is unique within a scene.
struct ObjectRef {
    ObjectKind kind = ObjectKind::block;
    Color color = Color::red;

    bool operator==(const ObjectRef &) const = default;
};

struct TaskSpec {
    Family family = Family::pick_place;
    std::string instruction;
    // What the task manipulates and, for placing tasks, where it goes.
    ObjectRef subject;
    std::optional<ObjectRef> target;
    std::vector<std::string> stages;
};

TaskSpec make_task(Family family);

// Words used by every instruction template, sorted.
const std::vector<std::string> &instruction_vocabulary();

const Object *find_object(const SimState &s, ObjectRef ref);

bool stage_satisfied(const TaskSpec &task, const SimState &s, std::size_t stage);
bool task_success(const TaskSpec &task, const SimState &s);
// Whether the task's goal is not yet met in `s`, so it can start from here.
bool task_applicable(const TaskSpec &task, const SimState &s);

struct Action {
    std::array<double, kArmDim> arm{0.0, 0.0};
    double gripper = 0.0;
};

Action clamp_action(Action a);

// Single-task scene with placements drawn from `seed`.
SimState reset(const TaskSpec &task, std::uint64_t seed);
// Scene holding the objects of every listed task, for multi-task chains.
SimState reset_scene(std::span<const TaskSpec> tasks, std::uint64_t seed);

SimState step(const SimState &s, const Action &a);

enum class View : std::uint8_t { base = 0, hand = 1 };

using Image = std::vector<std::uint8_t>; // [32][32][3]

Image render(const SimState &s, View view);

// Scripted phase machine; a function of the state only.
Action expert_action(const SimState &s, const TaskSpec &task);

// Robot state vector: (x, y, open one-hot, closed one-hot).
std::array<float, kStateDim> robot_state(const SimState &s);

// SplitMix64 step used to derive per-episode seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

} // namespace pidm::sim

#include "pidm/trajectory.hpp"

namespace pidm::sim {

// Scripted expert demonstrations; each carries its instruction and stage log.
// Episode i uses reset seed mix_seed(seed, i).
std::vector<Trajectory> gen_demos(const TaskSpec &task, int count, std::uint64_t seed);

// Language-free play: a seeded sampler of random waypoints, grasp attempts,
// button presses and drawer jiggles, `horizon` steps each.
std::vector<Trajectory> gen_play(int count, int horizon, std::uint64_t seed);

// Appends the observation and state of `s` to a trajectory under construction.
void record_observation(Trajectory &traj, const SimState &s);

} // namespace pidm::sim

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

#include "pidm/sim.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <sstream>

#include "pidm/tensor.hpp"

namespace pidm::sim {
namespace {

constexpr double kBlockHalf = 0.04;
constexpr double kPadHalf = 0.08;
constexpr double kButtonRadius = 0.05;
constexpr double kBodyDepth = 0.14;
constexpr double kBodyHalfWidth = 0.07;
constexpr double kHandleHalf = 0.03;
constexpr double kCrossHalf = 0.05;
constexpr double kCrossThick = 0.016;
constexpr double kReachTolerance = 0.01;
constexpr double kPushOffset = 0.045;
constexpr double kOpenFraction = 0.8;
constexpr double kClosedFraction = 0.2;
constexpr double kNearZone = 0.15;

using Rgb = std::array<std::uint8_t, 3>;

constexpr Rgb kBackground{40, 40, 40};
constexpr Rgb kHandleColor{190, 190, 190};
constexpr Rgb kLitColor{255, 190, 255};
constexpr Rgb kCrossOpen{255, 255, 255};
constexpr Rgb kCrossClosed{255, 0, 0};

Rgb palette(Color c) {
    switch (c) {
    case Color::red: return {220, 40, 40};
    case Color::green: return {40, 200, 60};
    case Color::blue: return {50, 90, 230};
    case Color::yellow: return {230, 210, 40};
    case Color::magenta: return {210, 50, 200};
    case Color::cyan: return {40, 210, 220};
    case Color::orange: return {240, 140, 30};
    case Color::brown: return {130, 90, 50};
    }
    return kBackground;
}

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }
Vec2 clip01(Vec2 p) { return {clip01(p.x), clip01(p.y)}; }

double clip_unit(double v) {
    if (!std::isfinite(v)) return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
    return std::clamp(v, -1.0, 1.0);
}

Object *find_mut(SimState &s, int id) {
    for (auto &o : s.objects)
        if (o.id == id) return &o;
    return nullptr;
}

const Object *find_id(const SimState &s, int id) {
    for (const auto &o : s.objects)
        if (o.id == id) return &o;
    return nullptr;
}

// Arm command that heads straight for `target` at full speed.
std::array<double, kArmDim> toward(Vec2 from, Vec2 target) {
    return {std::clamp((target.x - from.x) / kMaxStep, -1.0, 1.0),
            std::clamp((target.y - from.y) / kMaxStep, -1.0, 1.0)};
}

Action make_action(std::array<double, kArmDim> arm, int gripper) {
    Action a;
    a.arm = arm;
    a.gripper = gripper;
    return a;
}

bool placed_on(const SimState &s, const Object &subject, const Object &target) {
    return distance(subject.position, target.position) < kOnRadius && s.held != subject.id;
}

struct Pair {
    const Object *subject = nullptr;
    const Object *target = nullptr;
};

Pair resolve(const TaskSpec &task, const SimState &s) {
    Pair p{find_object(s, task.subject), nullptr};
    if (p.subject == nullptr) throw Error("task " + family_name(task.family) + ": subject object missing");
    if (task.target) {
        p.target = find_object(s, *task.target);
        if (p.target == nullptr) throw Error("task " + family_name(task.family) + ": target object missing");
    }
    return p;
}

// Object reached by an approaching end effector; nearest wins, ties by id.
std::optional<int> grasp_candidate(const SimState &s) {
    std::optional<int> best;
    double best_d = kGraspRadius;
    for (const auto &o : s.objects) {
        if (o.kind != ObjectKind::block && o.kind != ObjectKind::drawer) continue;
        const double d = distance(o.position, s.ee);
        if (d <= best_d && (!best || d < best_d)) {
            best = o.id;
            best_d = d;
        }
    }
    return best;
}

// --- placement -------------------------------------------------------------

struct Slot {
    ObjectKind kind;
    Color color;
    double aux;
};

// Shortest distance from p to the drawer's footprint (body plus fully open handle).
double drawer_clearance(Vec2 p, Vec2 anchor) {
    const double x0 = anchor.x - kBodyDepth;
    const double x1 = anchor.x + kDrawerTravel + kHandleHalf;
    const double dx = p.x < x0 ? x0 - p.x : (p.x > x1 ? p.x - x1 : 0.0);
    const double dy = std::max(0.0, std::abs(p.y - anchor.y) - kBodyHalfWidth);
    return std::hypot(dx, dy);
}

SimState place(const std::vector<Slot> &slots, std::uint64_t seed, const std::vector<std::pair<int, int>> &far_pairs) {
    std::mt19937_64 rng(mix_seed(seed, 0x5CE7E));
    std::uniform_real_distribution<double> uni(0.15, 0.85);
    std::uniform_real_distribution<double> anchor_x(0.3, 0.5);
    std::uniform_real_distribution<double> anchor_y(0.2, 0.8);
    std::uniform_real_distribution<double> ee_uni(0.1, 0.9);
    const double sep = slots.size() <= 3 ? 0.2 : 0.15;

    for (int attempt = 0; attempt < 100000; ++attempt) {
        SimState s;
        std::optional<Vec2> anchor;
        bool ok = true;
        for (std::size_t i = 0; i < slots.size() && ok; ++i) {
            Object o;
            o.id = static_cast<int>(i);
            o.kind = slots[i].kind;
            o.color = slots[i].color;
            o.aux = slots[i].aux;
            if (o.kind == ObjectKind::drawer) {
                anchor = Vec2{anchor_x(rng), anchor_y(rng)};
                o.position = {anchor->x + kDrawerTravel * o.aux, anchor->y};
            } else {
                o.position = {uni(rng), uni(rng)};
            }
            s.objects.push_back(o);
        }
        for (std::size_t i = 0; i < s.objects.size() && ok; ++i) {
            const auto &a = s.objects[i];
            if (a.kind == ObjectKind::drawer) continue;
            if (anchor && drawer_clearance(a.position, *anchor) < sep * 0.75) ok = false;
            for (std::size_t j = i + 1; j < s.objects.size() && ok; ++j) {
                const auto &b = s.objects[j];
                if (b.kind != ObjectKind::drawer && distance(a.position, b.position) < sep) ok = false;
            }
        }
        for (auto [i, j] : far_pairs)
            if (ok && distance(s.objects[i].position, s.objects[j].position) < 0.25) ok = false;
        if (!ok) continue;
        s.ee = {ee_uni(rng), ee_uni(rng)};
        for (const auto &o : s.objects)
            if (distance(o.position, s.ee) < 2 * kGraspRadius) ok = false;
        if (ok) return s;
    }
    throw Error("scene placement failed");
}

} // namespace

double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

Vec2 drawer_anchor(const Object &drawer) {
    return {drawer.position.x - kDrawerTravel * drawer.aux, drawer.position.y};
}

std::string family_name(Family f) {
    switch (f) {
    case Family::pick_place: return "pick-place";
    case Family::stack: return "stack";
    case Family::press_button: return "press-button";
    case Family::open_drawer: return "open-drawer";
    case Family::close_drawer: return "close-drawer";
    case Family::push_to_zone: return "push-to-zone";
    }
    return "unknown";
}

Family parse_family(const std::string &name) {
    for (Family f : kAllFamilies)
        if (family_name(f) == name) return f;
    throw Error("unknown task family '" + name + "'");
}

std::vector<Family> parse_families(const std::string &comma_list) {
    std::vector<Family> out;
    std::stringstream ss(comma_list);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(parse_family(item));
    if (out.empty()) throw Error("empty task list");
    return out;
}

TaskSpec make_task(Family family) {
    TaskSpec t;
    t.family = family;
    switch (family) {
    case Family::pick_place:
        t.instruction = "put the red block on the blue pad";
        t.subject = {ObjectKind::block, Color::red};
        t.target = ObjectRef{ObjectKind::pad, Color::blue};
        t.stages = {"grasp block", "place block"};
        break;
    case Family::stack:
        t.instruction = "stack the yellow block on the green block";
        t.subject = {ObjectKind::block, Color::yellow};
        t.target = ObjectRef{ObjectKind::block, Color::green};
        t.stages = {"grasp block", "stack block"};
        break;
    case Family::press_button:
        t.instruction = "press the button";
        t.subject = {ObjectKind::button, Color::magenta};
        t.stages = {"press button"};
        break;
    case Family::open_drawer:
        t.instruction = "open the drawer";
        t.subject = {ObjectKind::drawer, Color::brown};
        t.stages = {"grasp handle", "open drawer"};
        break;
    case Family::close_drawer:
        t.instruction = "close the drawer";
        t.subject = {ObjectKind::drawer, Color::brown};
        t.stages = {"grasp handle", "close drawer"};
        break;
    case Family::push_to_zone:
        t.instruction = "push the cyan block to the orange zone";
        t.subject = {ObjectKind::block, Color::cyan};
        t.target = ObjectRef{ObjectKind::pad, Color::orange};
        t.stages = {"approach zone", "reach zone"};
        break;
    }
    return t;
}

const std::vector<std::string> &instruction_vocabulary() {
    static const std::vector<std::string> vocab = [] {
        std::set<std::string> words;
        for (Family f : kAllFamilies) {
            std::stringstream ss(make_task(f).instruction);
            std::string w;
            while (ss >> w) words.insert(w);
        }
        return std::vector<std::string>(words.begin(), words.end());
    }();
    return vocab;
}

const Object *find_object(const SimState &s, ObjectRef ref) {
    for (const auto &o : s.objects)
        if (o.kind == ref.kind && o.color == ref.color) return &o;
    return nullptr;
}

bool stage_satisfied(const TaskSpec &task, const SimState &s, std::size_t stage) {
    if (stage >= task.stages.size()) throw Error("stage index out of range");
    const Pair p = resolve(task, s);
    const Object &sub = *p.subject;
    switch (task.family) {
    case Family::pick_place:
    case Family::stack: {
        const bool on = placed_on(s, sub, *p.target);
        return stage == 0 ? (s.held == sub.id || on) : on;
    }
    case Family::press_button: return sub.aux > 0.5;
    case Family::open_drawer: {
        const bool open = sub.aux >= kOpenFraction;
        return stage == 0 ? (s.held == sub.id || open) : open;
    }
    case Family::close_drawer: {
        const bool closed = sub.aux <= kClosedFraction;
        return stage == 0 ? (s.held == sub.id || closed) : closed;
    }
    case Family::push_to_zone: {
        const double d = distance(sub.position, p.target->position);
        return stage == 0 ? d < kNearZone : d < kOnRadius && s.held != sub.id;
    }
    }
    return false;
}

bool task_success(const TaskSpec &task, const SimState &s) {
    return stage_satisfied(task, s, task.stages.size() - 1);
}

bool task_applicable(const TaskSpec &task, const SimState &s) { return !task_success(task, s); }

Action clamp_action(Action a) {
    for (double &v : a.arm) v = clip_unit(v);
    a.gripper = std::isnan(a.gripper) ? 0.0 : std::clamp(a.gripper, 0.0, 1.0);
    return a;
}

SimState reset(const TaskSpec &task, std::uint64_t seed) {
    return reset_scene(std::span<const TaskSpec>(&task, 1), seed);
}

SimState reset_scene(std::span<const TaskSpec> tasks, std::uint64_t seed) {
    if (tasks.empty()) throw Error("reset_scene needs at least one task");
    bool opens = false, closes = false;
    for (const auto &t : tasks) {
        opens |= t.family == Family::open_drawer;
        closes |= t.family == Family::close_drawer;
    }
    // A drawer that only needs closing starts open.
    const double drawer_frac = closes && !opens ? 1.0 : 0.0;

    std::vector<ObjectRef> refs;
    auto add = [&](ObjectRef r) {
        if (std::find(refs.begin(), refs.end(), r) == refs.end()) refs.push_back(r);
    };
    for (const auto &t : tasks) {
        add(t.subject);
        if (t.target) add(*t.target);
    }
    std::vector<Slot> slots;
    for (auto r : refs) slots.push_back({r.kind, r.color, r.kind == ObjectKind::drawer ? drawer_frac : 0.0});

    std::vector<std::pair<int, int>> far;
    auto index_of = [&](ObjectRef r) {
        return static_cast<int>(std::find(refs.begin(), refs.end(), r) - refs.begin());
    };
    for (const auto &t : tasks)
        if (t.family == Family::push_to_zone) far.emplace_back(index_of(t.subject), index_of(*t.target));
    return place(slots, seed, far);
}

SimState step(const SimState &s, const Action &raw) {
    const Action a = clamp_action(raw);
    SimState n = s;
    const int grip = a.gripper >= kGripperThreshold ? 1 : 0;

    if (s.gripper == 0 && grip == 1) {
        n.gripper = 1;
        if (auto id = grasp_candidate(n)) {
            n.held = *id;
            Object *o = find_mut(n, *id);
            if (o->kind == ObjectKind::drawer) n.ee = o->position;
            else o->position = n.ee;
        }
    } else if (s.gripper == 1 && grip == 0) {
        n.gripper = 0;
        n.held.reset();
    }

    const Vec2 before = n.ee;
    const Vec2 proposed = clip01({before.x + kMaxStep * a.arm[0], before.y + kMaxStep * a.arm[1]});
    Object *held = n.held ? find_mut(n, *n.held) : nullptr;
    if (held != nullptr && held->kind == ObjectKind::drawer) {
        const Vec2 anchor = drawer_anchor(*held);
        held->aux = clip01(held->aux + (proposed.x - before.x) / kDrawerTravel);
        held->position = {anchor.x + kDrawerTravel * held->aux, anchor.y};
        n.ee = held->position;
    } else {
        n.ee = proposed;
        if (held != nullptr) {
            held->position = n.ee;
        } else if (n.gripper == 1) {
            // A closed, empty gripper shoves nearby blocks along with it.
            const Vec2 delta{n.ee.x - before.x, n.ee.y - before.y};
            for (auto &o : n.objects)
                if (o.kind == ObjectKind::block && distance(o.position, before) < kPushRadius)
                    o.position = clip01(Vec2{o.position.x + delta.x, o.position.y + delta.y});
        }
    }

    if (n.gripper == 1)
        for (auto &o : n.objects)
            if (o.kind == ObjectKind::button && distance(o.position, n.ee) <= kGraspRadius) o.aux = 1.0;

    ++n.step_count;
    return n;
}

Image render(const SimState &s, View view) {
    double x0 = 0.0, y0 = 0.0, side = 1.0;
    if (view == View::hand) {
        side = kHandViewSide;
        x0 = std::clamp(s.ee.x - side / 2, 0.0, 1.0 - side);
        y0 = std::clamp(s.ee.y - side / 2, 0.0, 1.0 - side);
    }
    Image img(kImageBytes);
    for (std::size_t i = 0; i < kImageBytes; i += 3) std::copy(kBackground.begin(), kBackground.end(), img.begin() + i);

    const double px = side / kImageSide;
    auto paint = [&](Rgb color, auto &&inside) {
        for (int r = 0; r < kImageSide; ++r) {
            const double y = y0 + (r + 0.5) * px;
            for (int c = 0; c < kImageSide; ++c) {
                const double x = x0 + (c + 0.5) * px;
                if (inside(x, y)) std::copy(color.begin(), color.end(), img.begin() + (r * kImageSide + c) * 3);
            }
        }
    };
    auto box = [](Vec2 center, double hx, double hy) {
        return [=](double x, double y) { return std::abs(x - center.x) <= hx && std::abs(y - center.y) <= hy; };
    };

    for (const auto &o : s.objects) {
        if (o.kind != ObjectKind::drawer) continue;
        const Vec2 anchor = drawer_anchor(o);
        const double left = anchor.x - kBodyDepth;
        const Vec2 body{(left + o.position.x) / 2, anchor.y};
        paint(palette(o.color), box(body, (o.position.x - left) / 2, kBodyHalfWidth));
        paint(kHandleColor, box(o.position, kHandleHalf, kHandleHalf));
    }
    for (const auto &o : s.objects)
        if (o.kind == ObjectKind::pad) paint(palette(o.color), box(o.position, kPadHalf, kPadHalf));
    for (const auto &o : s.objects)
        if (o.kind == ObjectKind::button) {
            const Vec2 c = o.position;
            paint(o.aux > 0.5 ? kLitColor : palette(o.color),
                  [=](double x, double y) { return std::hypot(x - c.x, y - c.y) <= kButtonRadius; });
        }
    for (const auto &o : s.objects)
        if (o.kind == ObjectKind::block && s.held != o.id) paint(palette(o.color), box(o.position, kBlockHalf, kBlockHalf));
    if (s.held)
        if (const Object *o = find_id(s, *s.held); o != nullptr && o->kind == ObjectKind::block)
            paint(palette(o->color), box(o->position, kBlockHalf, kBlockHalf));

    const Vec2 e = s.ee;
    paint(s.gripper == 1 ? kCrossClosed : kCrossOpen, [=](double x, double y) {
        const double dx = std::abs(x - e.x), dy = std::abs(y - e.y);
        return (dx <= kCrossThick && dy <= kCrossHalf) || (dy <= kCrossThick && dx <= kCrossHalf);
    });
    return img;
}

Action expert_action(const SimState &s, const TaskSpec &task) {
    const Pair p = resolve(task, s);
    const Object &sub = *p.subject;
    const std::array<double, kArmDim> still{0.0, 0.0};

    // Approach `where` with an open gripper, then close on arrival.
    auto approach = [&](Vec2 where) {
        if (s.gripper == 1) return make_action(toward(s.ee, where), 0);
        if (distance(s.ee, where) > kReachTolerance) return make_action(toward(s.ee, where), 0);
        return make_action(still, 1);
    };

    switch (task.family) {
    case Family::pick_place:
    case Family::stack: {
        if (placed_on(s, sub, *p.target)) return make_action(still, 0);
        if (s.held == sub.id) {
            if (distance(s.ee, p.target->position) > kReachTolerance)
                return make_action(toward(s.ee, p.target->position), 1);
            return make_action(still, 0);
        }
        return approach(sub.position);
    }
    case Family::press_button: {
        if (sub.aux > 0.5) return make_action(still, 0);
        return approach(sub.position);
    }
    case Family::open_drawer:
    case Family::close_drawer: {
        const bool open = task.family == Family::open_drawer;
        if (open ? sub.aux >= kOpenFraction : sub.aux <= kClosedFraction) return make_action(still, 0);
        if (s.held == sub.id) {
            const Vec2 anchor = drawer_anchor(sub);
            const Vec2 goal{anchor.x + (open ? kDrawerTravel : 0.0), anchor.y};
            return make_action(toward(s.ee, goal), 1);
        }
        return approach(sub.position);
    }
    case Family::push_to_zone: {
        const Vec2 b = sub.position, z = p.target->position;
        if (distance(b, z) < kOnRadius && s.held != sub.id) return make_action(still, 0);
        if (s.held) return make_action(toward(s.ee, b), 0);
        if (s.gripper == 1 && distance(s.ee, b) < kPushRadius) return make_action(toward(b, z), 1);
        const double d = distance(b, z);
        const Vec2 pre{b.x - kPushOffset * (z.x - b.x) / d, b.y - kPushOffset * (z.y - b.y) / d};
        return approach(clip01(pre));
    }
    }
    throw Error("expert reached an unreachable phase");
}

std::array<float, kStateDim> robot_state(const SimState &s) {
    return {static_cast<float>(s.ee.x), static_cast<float>(s.ee.y), s.gripper == 0 ? 1.0f : 0.0f,
            s.gripper == 1 ? 1.0f : 0.0f};
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// --- recorded data ------------------------------------------------------------

void record_observation(Trajectory &traj, const SimState &s) {
    for (View v : {View::base, View::hand}) {
        const Image img = render(s, v);
        traj.images.insert(traj.images.end(), img.begin(), img.end());
    }
    const auto st = robot_state(s);
    traj.states.insert(traj.states.end(), st.begin(), st.end());
    ++traj.length;
}

namespace {

// Stores the action as f32 and returns exactly what was stored, so stepping
// with the result keeps the recording replayable.
Action record_action(Trajectory &traj, const Action &a) {
    Action c = clamp_action(a);
    for (double &v : c.arm) v = static_cast<float>(v);
    c.gripper = static_cast<float>(c.gripper);
    traj.actions.push_back(static_cast<float>(c.arm[0]));
    traj.actions.push_back(static_cast<float>(c.arm[1]));
    traj.actions.push_back(static_cast<float>(c.gripper));
    return c;
}

Trajectory empty_trajectory(std::string task, std::optional<std::string> instruction, std::uint64_t seed) {
    Trajectory t;
    t.task = std::move(task);
    t.instruction = std::move(instruction);
    t.views = kViews;
    t.height = t.width = kImageSide;
    t.state_dim = kStateDim;
    t.action_dim = kActionDim;
    t.seed = seed;
    return t;
}

} // namespace

std::vector<Trajectory> gen_demos(const TaskSpec &task, int count, std::uint64_t seed) {
    if (count < 1) throw Error("gen_demos: count must be >= 1");
    std::vector<Trajectory> out;
    for (int i = 0; i < count; ++i) {
        const std::uint64_t ep_seed = mix_seed(seed, static_cast<std::uint64_t>(i));
        SimState s = reset(task, ep_seed);
        Trajectory traj = empty_trajectory(family_name(task.family), task.instruction, ep_seed);
        std::vector<bool> done(task.stages.size(), false);
        auto log_stages = [&](int t) {
            for (std::size_t k = 0; k < done.size(); ++k)
                if (!done[k] && stage_satisfied(task, s, k)) {
                    done[k] = true;
                    traj.stages.push_back({t, static_cast<int>(k)});
                }
        };
        while (!task_success(task, s)) {
            if (s.step_count >= kEpisodeCap) throw Error("expert failed on seed " + std::to_string(ep_seed));
            record_observation(traj, s);
            s = step(s, record_action(traj, expert_action(s, task)));
            log_stages(s.step_count);
        }
        // Terminal frame so the last action chunk has a foresight target.
        record_observation(traj, s);
        record_action(traj, expert_action(s, task));
        out.push_back(std::move(traj));
    }
    return out;
}

std::vector<Trajectory> gen_play(int count, int horizon, std::uint64_t seed) {
    if (count < 1) throw Error("gen_play: count must be >= 1");
    if (horizon < 2) throw Error("gen_play: horizon must be >= 2");
    std::vector<Trajectory> out;
    for (int i = 0; i < count; ++i) {
        const std::uint64_t ep_seed = mix_seed(seed, static_cast<std::uint64_t>(i));
        std::mt19937_64 rng(ep_seed);
        const Family family = kAllFamilies[std::uniform_int_distribution<std::size_t>(0, kAllFamilies.size() - 1)(rng)];
        SimState s = reset(make_task(family), ep_seed);
        Trajectory traj = empty_trajectory("play", std::nullopt, ep_seed);
        std::uniform_real_distribution<double> uni(0.05, 0.95);
        std::uniform_real_distribution<double> coin(0.0, 1.0);

        auto act = [&](const Action &a) {
            if (traj.length >= horizon) return false;
            record_observation(traj, s);
            s = step(s, record_action(traj, a));
            return true;
        };
        // Moves toward `wp` holding the gripper command; gives up after a budget.
        auto go = [&](Vec2 wp, int gripper, int budget) {
            for (int k = 0; k < budget && distance(s.ee, wp) > 1e-9; ++k)
                if (!act(make_action(toward(s.ee, wp), gripper))) return;
        };
        auto toggle = [&](int gripper) { act(make_action({0.0, 0.0}, gripper)); };

        while (traj.length < horizon) {
            const double r = coin(rng);
            std::vector<const Object *> graspable, buttons;
            for (const auto &o : s.objects) {
                if (o.kind == ObjectKind::block || o.kind == ObjectKind::drawer) graspable.push_back(&o);
                if (o.kind == ObjectKind::button) buttons.push_back(&o);
            }
            if (r < 0.3 || (graspable.empty() && buttons.empty())) {
                const int g = coin(rng) < 0.8 ? 0 : 1;
                go({uni(rng), uni(rng)}, g, 20);
            } else if (r < 0.75 && !graspable.empty()) {
                const Object target = *graspable[std::uniform_int_distribution<std::size_t>(0, graspable.size() - 1)(rng)];
                if (s.gripper == 1) toggle(0);
                // Imprecise approach so some grasps miss.
                const Vec2 aim = clip01(Vec2{target.position.x + 0.02 * (coin(rng) - 0.5),
                                             target.position.y + 0.02 * (coin(rng) - 0.5)});
                go(aim, 0, 30);
                toggle(1);
                if (target.kind == ObjectKind::drawer) {
                    const Vec2 a = drawer_anchor(target);
                    go({a.x + kDrawerTravel * coin(rng), a.y}, 1, 10);
                } else {
                    go({uni(rng), uni(rng)}, 1, 20);
                }
                toggle(0);
            } else if (!buttons.empty()) {
                if (s.gripper == 1) toggle(0);
                go(buttons.front()->position, 0, 30);
                toggle(1);
                toggle(0);
            } else {
                go({uni(rng), uni(rng)}, 0, 20);
            }
        }
        out.push_back(std::move(traj));
    }
    return out;
}

} // namespace pidm::sim

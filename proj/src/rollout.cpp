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

#include "pidm/rollout.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>
#include <thread>

#include "pidm/config.hpp"

namespace pidm::rollout {

namespace {

constexpr std::uint64_t kChainSalt = 0xC4A15;

} // namespace

double temporal_ensemble(std::span<const double> by_age, double decay, bool newest_favored) {
    if (by_age.empty()) throw Error("temporal_ensemble: no predictions cover this step");
    const auto oldest = static_cast<double>(by_age.size() - 1);
    double num = 0.0, den = 0.0;
    for (std::size_t age = 0; age < by_age.size(); ++age) {
        const double a = static_cast<double>(age);
        const double w = std::exp(-decay * (newest_favored ? a : oldest - a));
        num += w * by_age[age];
        den += w;
    }
    return num / den;
}

ChunkBuffer::ChunkBuffer(int n) : n_(n) {
    if (n < 1) throw Error("ChunkBuffer: chunk length must be >= 1");
}

void ChunkBuffer::push(int step, ActionChunk chunk) {
    if (static_cast<int>(chunk.size()) != n_) throw Error("ChunkBuffer: chunk has the wrong length");
    if (!entries_.empty() && step <= entries_.back().first) throw Error("ChunkBuffer: steps must increase");
    entries_.emplace_back(step, std::move(chunk));
    // Chunks older than n steps no longer cover anything.
    std::erase_if(entries_, [&](const auto &e) { return e.first + n_ <= step; });
}

std::vector<ChunkAction> ChunkBuffer::covering(int step) const {
    std::vector<ChunkAction> out;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        const int age = step - it->first;
        if (age >= 0 && age < n_) out.push_back(it->second[static_cast<std::size_t>(age)]);
    }
    return out;
}

sim::Action ensemble_action(const std::vector<ChunkAction> &by_age, double decay, bool newest_favored) {
    if (by_age.empty()) throw Error("ensemble_action: no predictions cover this step");
    sim::Action a;
    const std::size_t dims = by_age.front().arm.size();
    if (dims != a.arm.size()) throw Error("ensemble_action: arm dimension mismatch");
    std::vector<double> v(by_age.size());
    for (std::size_t d = 0; d < dims; ++d) {
        for (std::size_t i = 0; i < by_age.size(); ++i) v[i] = by_age[i].arm[d];
        a.arm[d] = temporal_ensemble(v, decay, newest_favored);
    }
    for (std::size_t i = 0; i < by_age.size(); ++i) v[i] = by_age[i].gripper;
    a.gripper = temporal_ensemble(v, decay, newest_favored) >= sim::kGripperThreshold ? 1.0 : 0.0;
    return a;
}

std::string policy_mode_name(PolicyMode mode) { return mode == PolicyMode::ensemble ? "ensemble" : "first-only"; }

PolicyMode parse_policy_mode(const std::string &name) {
    if (name == "ensemble") return PolicyMode::ensemble;
    if (name == "first-only") return PolicyMode::first_only;
    throw Error("unknown policy mode '" + name + "' (expected ensemble or first-only)");
}

// --- learned policy ------------------------------------------------------------------------

ModelController::ModelController(const train::Checkpoint &ckpt, PolicyOptions opts)
    : cfg_(ckpt.model), params_(ckpt.params), opts_(opts), buffer_(ckpt.model.chunk) {
    if (cfg_.mode != data::Mode::finetune)
        throw Error("checkpoint was trained in pretrain mode and has no language conditioning; finetune it first");
    if (cfg_.arm_dim != sim::kArmDim || cfg_.state_dim != sim::kStateDim)
        throw Error("checkpoint arm/state dims do not match the simulator");
    mask_ = model::build_mask(cfg_);
}

void ModelController::begin(const sim::TaskSpec &task) {
    instruction_ = task.instruction;
    history_ = Trajectory{};
    history_.task = sim::family_name(task.family);
    history_.instruction = task.instruction;
    history_.views = sim::kViews;
    history_.height = history_.width = sim::kImageSide;
    history_.state_dim = sim::kStateDim;
    history_.action_dim = sim::kActionDim;
    buffer_.clear();
    step_ = 0;
}

ActionChunk ModelController::predict_latest() {
    data::TrainingWindow w;
    w.traj = &history_;
    w.mode = data::Mode::finetune;
    w.t = history_.length - 1;
    w.m = cfg_.history;
    w.n = cfg_.chunk;
    for (int j = 0; j < w.m; ++j) w.history.push_back(std::max(0, w.t - w.m + 1 + j));
    w.valid.assign(static_cast<std::size_t>(w.m), 1);
    w.instruction = instruction_;
    const auto batch = model::make_batch<float>(cfg_, {w}, {false, false});

    Graph<float> g;
    Binder<float> p(g, params_);
    const auto r = model::forward(cfg_, p, batch, mask_);
    const std::int64_t n = cfg_.chunk, d = cfg_.embed_dim;
    const Var<float> rows = slice(reshape(r.inv, {cfg_.history * n, d}), 0, (cfg_.history - 1) * n, cfg_.history * n);
    const auto out = model::decode_actions(cfg_, p, rows);
    const auto &arm = out.arm.value().data;
    const auto &grip = out.gripper.value().data;
    ActionChunk chunk(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        chunk[i].arm.assign(arm.begin() + i * cfg_.arm_dim, arm.begin() + (i + 1) * cfg_.arm_dim);
        chunk[i].gripper = grip[i];
    }
    return chunk;
}

ActionChunk ModelController::predict(const sim::SimState &s) {
    sim::record_observation(history_, s);
    return predict_latest();
}

sim::Action ModelController::act(const sim::SimState &s) {
    if (instruction_.empty()) throw Error("ModelController: act called before begin");
    ActionChunk chunk = predict(s);
    const int t = step_++;
    if (opts_.mode == PolicyMode::first_only) {
        sim::Action a;
        for (std::size_t d = 0; d < a.arm.size(); ++d) a.arm[d] = chunk[0].arm[d];
        a.gripper = chunk[0].gripper >= sim::kGripperThreshold ? 1.0 : 0.0;
        return a;
    }
    buffer_.push(t, std::move(chunk));
    return ensemble_action(buffer_.covering(t), opts_.decay, opts_.newest_favored);
}

// --- episodes --------------------------------------------------------------------------------

void write_ppm(const std::filesystem::path &path, const sim::Image &image) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << "P6\n" << sim::kImageSide << " " << sim::kImageSide << "\n255\n";
    out.write(reinterpret_cast<const char *>(image.data()), static_cast<std::streamsize>(image.size()));
}

namespace {

void dump_frames(const std::filesystem::path &dir, int index, const sim::SimState &s) {
    char name[64];
    for (int v = 0; v < sim::kViews; ++v) {
        std::snprintf(name, sizeof name, "frame_%05d_view%d.ppm", index, v);
        write_ppm(dir / name, sim::render(s, static_cast<sim::View>(v)));
    }
}

} // namespace

EpisodeResult run_task(Controller &ctl, const sim::TaskSpec &task, sim::SimState &state, int cap,
                       const std::optional<std::filesystem::path> &frames, int *frame_index) {
    int local_index = 0;
    int &fi = frame_index != nullptr ? *frame_index : local_index;
    EpisodeResult r;
    std::vector<bool> done(task.stages.size(), false);
    auto credit = [&] {
        for (std::size_t i = 0; i < done.size(); ++i)
            if (!done[i] && sim::stage_satisfied(task, state, i)) {
                done[i] = true;
                ++r.score;
            }
    };
    ctl.begin(task);
    if (frames) dump_frames(*frames, fi++, state);
    if (sim::task_success(task, state)) {
        credit();
        r.success = true;
        return r;
    }
    while (r.steps < cap) {
        state = sim::step(state, ctl.act(state));
        ++r.steps;
        credit();
        if (frames) dump_frames(*frames, fi++, state);
        if (sim::task_success(task, state)) {
            r.success = true;
            break;
        }
    }
    return r;
}

EpisodeResult run_episode(Controller &ctl, const sim::TaskSpec &task, std::uint64_t seed, int cap,
                          const std::optional<std::filesystem::path> &frames) {
    if (frames) std::filesystem::create_directories(*frames);
    sim::SimState s = sim::reset(task, seed);
    EpisodeResult r = run_task(ctl, task, s, cap, frames);
    r.seed = seed;
    return r;
}

// --- metrics ---------------------------------------------------------------------------------

double average_length(std::span<const int> completed) {
    if (completed.empty()) throw Error("average_length: no chains");
    double sum = 0.0;
    for (int c : completed) sum += c;
    return sum / static_cast<double>(completed.size());
}

std::vector<double> position_success_rates(std::span<const int> completed, int length) {
    if (completed.empty()) throw Error("position_success_rates: no chains");
    std::vector<double> out(static_cast<std::size_t>(length), 0.0);
    for (int i = 0; i < length; ++i) {
        int hits = 0;
        for (int c : completed) hits += c > i ? 1 : 0;
        out[static_cast<std::size_t>(i)] = static_cast<double>(hits) / static_cast<double>(completed.size());
    }
    return out;
}

Chain make_chain(const std::vector<sim::TaskSpec> &tasks, std::uint64_t seed, int length) {
    if (tasks.empty()) throw Error("make_chain: no tasks");
    Chain c;
    c.seed = seed;
    c.start = sim::reset_scene(tasks, seed);
    std::mt19937_64 rng(sim::mix_seed(seed, kChainSalt));
    sim::SimState s = c.start;
    ExpertController expert;
    while (static_cast<int>(c.tasks.size()) < length) {
        std::vector<const sim::TaskSpec *> open;
        for (const auto &t : tasks)
            if (sim::task_applicable(t, s)) open.push_back(&t);
        if (open.empty()) break;
        const sim::TaskSpec &next = *open[std::uniform_int_distribution<std::size_t>(0, open.size() - 1)(rng)];
        if (!run_task(expert, next, s, sim::kEpisodeCap).success) break;
        c.tasks.push_back(next);
    }
    return c;
}

// --- benchmark -------------------------------------------------------------------------------

int thread_count(int requested) {
    if (requested > 0) return requested;
    if (const char *env = std::getenv("PIDM_THREADS")) {
        char *end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) return static_cast<int>(v);
        throw Error(std::string("PIDM_THREADS must be a positive integer, got '") + env + "'");
    }
    return 1;
}

std::uint64_t episode_seed(std::uint64_t seed, sim::Family family, int episode) {
    return sim::mix_seed(sim::mix_seed(seed, static_cast<std::uint64_t>(family) + 1), static_cast<std::uint64_t>(episode));
}

namespace {

// Runs job(i) for i < count on up to `threads` workers; results land by index.
template <typename Job>
void fan_out(int count, int threads, Job job) {
    threads = std::max(1, std::min(threads, count));
    if (threads == 1) {
        for (int i = 0; i < count; ++i) job(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w)
        pool.emplace_back([&, w] {
            try {
                for (int i = next++; i < count; i = next++) job(i);
            } catch (...) {
                errors[static_cast<std::size_t>(w)] = std::current_exception();
            }
        });
    for (auto &t : pool) t.join();
    for (auto &e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace

TaskReport eval_task(const ControllerFactory &make, const sim::TaskSpec &task, const EvalOptions &opts) {
    if (opts.episodes < 1) throw Error("eval: episodes must be >= 1");
    TaskReport r;
    r.task = sim::family_name(task.family);
    r.full_score = static_cast<int>(task.stages.size());
    r.episodes.resize(static_cast<std::size_t>(opts.episodes));
    fan_out(opts.episodes, thread_count(opts.threads), [&](int e) {
        auto ctl = make();
        std::optional<std::filesystem::path> frames;
        if (opts.frames && e == 0) frames = *opts.frames / r.task;
        r.episodes[static_cast<std::size_t>(e)] = run_episode(*ctl, task, episode_seed(opts.seed, task.family, e), opts.cap, frames);
    });
    double succ = 0, score = 0, steps = 0;
    for (const auto &ep : r.episodes) {
        succ += ep.success ? 1 : 0;
        score += ep.score;
        steps += ep.steps;
    }
    const double k = static_cast<double>(opts.episodes);
    r.success_rate = succ / k;
    r.mean_score = score / k;
    r.mean_steps = steps / k;
    return r;
}

SequenceReport eval_sequences(const ControllerFactory &make, const std::vector<sim::TaskSpec> &tasks,
                              const EvalOptions &opts) {
    if (opts.chains < 1) throw Error("eval: chains must be >= 1");
    SequenceReport r;
    r.chains.resize(static_cast<std::size_t>(opts.chains));
    fan_out(opts.chains, thread_count(opts.threads), [&](int c) {
        const std::uint64_t seed = sim::mix_seed(sim::mix_seed(opts.seed, kChainSalt), static_cast<std::uint64_t>(c));
        const Chain chain = make_chain(tasks, seed);
        ChainLog log;
        log.seed = seed;
        for (const auto &t : chain.tasks) log.tasks.push_back(sim::family_name(t.family));
        auto ctl = make();
        sim::SimState s = chain.start;
        for (const auto &t : chain.tasks) {
            if (!run_task(*ctl, t, s, opts.cap).success) break;
            ++log.completed;
        }
        r.chains[static_cast<std::size_t>(c)] = std::move(log);
    });
    std::vector<int> completed;
    for (const auto &c : r.chains) {
        completed.push_back(c.completed);
        r.chain_length = std::max(r.chain_length, static_cast<int>(c.tasks.size()));
    }
    r.avg_len = average_length(completed);
    r.position_success = position_success_rates(completed, kChainLength);
    return r;
}

EvalReport eval_benchmark(const ControllerFactory &make, const std::vector<sim::TaskSpec> &tasks,
                          const EvalOptions &opts, const std::string &policy, const std::string &fp) {
    if (tasks.empty()) throw Error("eval: no tasks");
    EvalReport r;
    r.policy = policy;
    r.fingerprint = fp;
    r.seed = opts.seed;
    for (const auto &t : tasks) r.tasks.push_back(eval_task(make, t, opts));
    if (opts.chains > 0) r.sequences = eval_sequences(make, tasks, opts);
    return r;
}

std::string fingerprint(const train::Checkpoint &ckpt) {
    std::uint64_t h = 1469598103934665603ull;
    auto feed = [&](const void *data, std::size_t n) {
        const auto *p = static_cast<const std::uint8_t *>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    const std::string cfg = config::to_json(ckpt.model).dump();
    feed(cfg.data(), cfg.size());
    for (const auto &[name, p] : ckpt.params) {
        feed(name.data(), name.size());
        feed(p.value.data.data(), p.value.data.size() * sizeof(float));
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

nlohmann::json to_json(const EvalReport &r) {
    using nlohmann::json;
    json tasks = json::array();
    for (const auto &t : r.tasks) {
        json eps = json::array();
        for (const auto &e : t.episodes)
            eps.push_back({{"seed", e.seed}, {"success", e.success}, {"score", e.score}, {"steps", e.steps}});
        tasks.push_back({{"task", t.task},
                         {"success_rate", t.success_rate},
                         {"mean_score", t.mean_score},
                         {"full_score", t.full_score},
                         {"mean_steps", t.mean_steps},
                         {"episodes", eps}});
    }
    json j{{"policy", r.policy}, {"fingerprint", r.fingerprint}, {"seed", r.seed}, {"tasks", tasks}};
    if (r.sequences) {
        json chains = json::array();
        for (const auto &c : r.sequences->chains)
            chains.push_back({{"seed", c.seed}, {"tasks", c.tasks}, {"completed", c.completed}});
        j["sequences"] = {{"chain_length", r.sequences->chain_length},
                          {"position_success", r.sequences->position_success},
                          {"avg_len", r.sequences->avg_len},
                          {"chains", chains}};
    }
    return j;
}

void write_report(const EvalReport &report, const std::filesystem::path &path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json(report).dump(2) << "\n";
}

} // namespace pidm::rollout

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

// Closed-loop evaluation: chunked policies, temporal ensembling, episodes,
// per-task benchmarks and five-task chains.

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pidm/sim.hpp"
#include "pidm/train.hpp"

namespace pidm::rollout {

inline constexpr double kEnsembleDecay = 0.1;
inline constexpr int kChainLength = 5;

// Weighted mean of predictions for one step, indexed by chunk age (0 = newest).
// Weights are exp(-decay * age), or exp(-decay * (A - age)) when the oldest
// chunk is favored instead.
double temporal_ensemble(std::span<const double> by_age, double decay = kEnsembleDecay, bool newest_favored = true);

struct ChunkAction {
    std::vector<double> arm;
    double gripper = 0.0; // probability of closing
};

using ActionChunk = std::vector<ChunkAction>;

// The last n chunks together with the step at which each was emitted.
class ChunkBuffer {
public:
    explicit ChunkBuffer(int n);

    void push(int step, ActionChunk chunk);
    // Predictions covering `step`, newest first.
    std::vector<ChunkAction> covering(int step) const;
    void clear() { entries_.clear(); }
    std::size_t size() const { return entries_.size(); }

private:
    int n_;
    std::vector<std::pair<int, ActionChunk>> entries_;
};

// Per-dimension ensemble of arm values and gripper probabilities, then one
// threshold of the averaged probability.
sim::Action ensemble_action(const std::vector<ChunkAction> &by_age, double decay = kEnsembleDecay,
                            bool newest_favored = true);

enum class PolicyMode : std::uint8_t { first_only, ensemble };

std::string policy_mode_name(PolicyMode mode);
PolicyMode parse_policy_mode(const std::string &name);

struct PolicyOptions {
    PolicyMode mode = PolicyMode::ensemble;
    double decay = kEnsembleDecay;
    bool newest_favored = true;
};

// Anything that maps the current state to an action within one task.
class Controller {
public:
    virtual ~Controller() = default;
    // Starts a new task; clears any history.
    virtual void begin(const sim::TaskSpec &task) = 0;
    virtual sim::Action act(const sim::SimState &s) = 0;
};

// Scripted expert, reading the true state.
class ExpertController : public Controller {
public:
    void begin(const sim::TaskSpec &task) override { task_ = task; }
    sim::Action act(const sim::SimState &s) override { return sim::expert_action(s, task_); }

private:
    sim::TaskSpec task_;
};

// Learned policy; sees only rendered views and the robot state.
class ModelController : public Controller {
public:
    ModelController(const train::Checkpoint &ckpt, PolicyOptions opts = {});

    void begin(const sim::TaskSpec &task) override;
    sim::Action act(const sim::SimState &s) override;

    // Records `s` and predicts the chunk for the latest observation without acting.
    ActionChunk predict(const sim::SimState &s);
    int steps() const { return step_; }

private:
    ActionChunk predict_latest();

    model::ModelConfig cfg_;
    ParamMap<float> params_;
    model::AttentionMask mask_;
    PolicyOptions opts_;
    std::string instruction_;
    Trajectory history_;
    ChunkBuffer buffer_;
    int step_ = 0;
};

struct EpisodeResult {
    std::uint64_t seed = 0;
    bool success = false;
    int score = 0;
    int steps = 0;
};

// Runs `task` from `start` until success or `cap` steps. Score counts stages
// the first time each is satisfied. Frames, when a directory is given, are
// written for every observation as P6 files.
EpisodeResult run_task(Controller &ctl, const sim::TaskSpec &task, sim::SimState &state, int cap,
                       const std::optional<std::filesystem::path> &frames = std::nullopt, int *frame_index = nullptr);

EpisodeResult run_episode(Controller &ctl, const sim::TaskSpec &task, std::uint64_t seed, int cap = sim::kEpisodeCap,
                          const std::optional<std::filesystem::path> &frames = std::nullopt);

void write_ppm(const std::filesystem::path &path, const sim::Image &image);

struct TaskReport {
    std::string task;
    int full_score = 0;
    std::vector<EpisodeResult> episodes;
    double success_rate = 0.0;
    double mean_score = 0.0;
    double mean_steps = 0.0;
};

struct ChainLog {
    std::uint64_t seed = 0;
    std::vector<std::string> tasks;
    int completed = 0;
};

struct SequenceReport {
    int chain_length = 0;
    std::vector<ChainLog> chains;
    std::vector<double> position_success; // fraction of chains completing at least i+1 tasks
    double avg_len = 0.0;
};

// Mean number of consecutively completed tasks.
double average_length(std::span<const int> completed);
// Fraction of chains with at least i+1 completed tasks, for i < length.
std::vector<double> position_success_rates(std::span<const int> completed, int length);

struct Chain {
    std::uint64_t seed = 0;
    sim::SimState start;
    std::vector<sim::TaskSpec> tasks;
};

// One chain over a shared scene holding every listed task's objects. Each
// element is drawn uniformly among the listed tasks that are still applicable
// after the scripted expert has solved the earlier ones; the chain stops early
// when nothing is applicable.
Chain make_chain(const std::vector<sim::TaskSpec> &tasks, std::uint64_t seed, int length = kChainLength);

struct EvalOptions {
    int episodes = 20;
    int chains = 0;
    std::uint64_t seed = 0;
    int cap = sim::kEpisodeCap;
    std::optional<std::filesystem::path> frames;
    // Parallel episodes; 0 reads PIDM_THREADS and defaults to 1.
    int threads = 0;
};

struct EvalReport {
    std::string policy;
    std::string fingerprint;
    std::uint64_t seed = 0;
    std::vector<TaskReport> tasks;
    std::optional<SequenceReport> sequences;
};

using ControllerFactory = std::function<std::unique_ptr<Controller>()>;

std::uint64_t episode_seed(std::uint64_t seed, sim::Family family, int episode);

TaskReport eval_task(const ControllerFactory &make, const sim::TaskSpec &task, const EvalOptions &opts);
SequenceReport eval_sequences(const ControllerFactory &make, const std::vector<sim::TaskSpec> &tasks,
                              const EvalOptions &opts);
EvalReport eval_benchmark(const ControllerFactory &make, const std::vector<sim::TaskSpec> &tasks,
                          const EvalOptions &opts, const std::string &policy, const std::string &fingerprint);

// Stable hash of the model config and parameters.
std::string fingerprint(const train::Checkpoint &ckpt);

nlohmann::json to_json(const EvalReport &report);
void write_report(const EvalReport &report, const std::filesystem::path &path);

int thread_count(int requested);

} // namespace pidm::rollout

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

// Trajectory files, dataset manifests, training windows and batching.

#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pidm/trajectory.hpp"

namespace pidm::data {

inline constexpr char kTrajMagic[4] = {'P', 'I', 'D', 'M'};
inline constexpr std::uint32_t kTrajVersion = 1;
inline constexpr const char *kManifestName = "manifest.json";

std::vector<std::uint8_t> encode_trajectory(const Trajectory &traj);
// `source` names the input in error messages.
Trajectory decode_trajectory(std::span<const std::uint8_t> bytes, const std::string &source = "<memory>");

void write_trajectory(const Trajectory &traj, const std::filesystem::path &path);
Trajectory read_trajectory(const std::filesystem::path &path);

struct ManifestEntry {
    std::string path; // relative to the dataset directory
    std::string split; // "pretrain" or "finetune"
    std::string task;

    bool operator==(const ManifestEntry &) const = default;
};

void write_manifest(const std::filesystem::path &dir, const std::vector<ManifestEntry> &entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path &dir);

// Writes play trajectories to the pretrain split and demos to the finetune
// split, plus the manifest. The directory is created if needed.
void write_dataset(const std::filesystem::path &dir, const std::vector<Trajectory> &demos,
                   const std::vector<Trajectory> &play);

using TrajectoryList = std::vector<std::shared_ptr<const Trajectory>>;

struct DatasetSplit {
    TrajectoryList pretrain;
    TrajectoryList finetune;
    std::vector<std::string> pretrain_files;
    std::vector<std::string> finetune_files;
    std::optional<double> fraction;
};

DatasetSplit load_dataset(const std::filesystem::path &dir);

// Picks floor(fraction * N) indices, stratified over `groups` with largest
// remainder apportionment and a seeded shuffle inside each group. Sorted.
std::vector<std::size_t> stratified_subsample(const std::vector<std::string> &groups, double fraction,
                                              std::uint64_t seed);

// Subsamples the finetune split; fraction must lie in (0, 1].
DatasetSplit apply_fraction(const DatasetSplit &split, double fraction, std::uint64_t seed);

enum class Mode : std::uint8_t { pretrain, finetune };

std::string mode_name(Mode mode);
Mode parse_mode(const std::string &name);

// Inclusive range of focus steps with full targets, or an empty range (first > last).
std::pair<int, int> valid_focus_range(const Trajectory &traj, int n, Mode mode);

struct TrainingWindow {
    const Trajectory *traj = nullptr;
    Mode mode = Mode::finetune;
    int t = 0;
    int m = 0;
    int n = 0;
    std::vector<int> history;              // m source step indices, oldest first
    std::optional<std::string> instruction; // finetune only
    std::vector<float> goal_state;         // pretrain only: s_{t+n+1}
    std::vector<std::uint8_t> valid;       // per window timestep

    // Step of the foresight image target for window timestep j.
    int foresight_step(int j) const { return history[j] + n; }
    // First step of the action chunk target for window timestep j.
    int action_step(int j) const { return history[j]; }
};

TrainingWindow sample_window(const Trajectory &traj, int t, int m, int n, Mode mode);

struct WindowRef {
    std::size_t traj = 0;
    int t = 0;

    bool operator==(const WindowRef &) const = default;
};

// Every admissible (trajectory, focus step) pair, in file then step order.
std::vector<WindowRef> enumerate_windows(const TrajectoryList &trajs, int n, Mode mode);

// Endless stream of shuffled batches. Each epoch visits every window exactly
// once; the last batch of an epoch may be short.
class BatchIter {
public:
    BatchIter(TrajectoryList trajs, Mode mode, int m, int n, int batch_size, std::uint64_t seed);

    std::vector<WindowRef> next_refs();
    std::vector<TrainingWindow> next();

    TrainingWindow window(const WindowRef &ref) const;
    int epoch() const { return epoch_; }
    // True right after the last batch of an epoch was handed out.
    bool epoch_finished() const { return cursor_ >= order_.size(); }
    std::size_t windows_per_epoch() const { return windows_.size(); }
    std::size_t batches_per_epoch() const;

private:
    void reshuffle();

    TrajectoryList trajs_;
    Mode mode_;
    int m_;
    int n_;
    int batch_size_;
    std::uint64_t seed_;
    std::vector<WindowRef> windows_;
    std::vector<WindowRef> order_;
    std::size_t cursor_ = 0;
    int epoch_ = 0;
};

} // namespace pidm::data

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

// Dataset generation and the data-efficiency / ablation sweep.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "pidm/config.hpp"
#include "pidm/rollout.hpp"
#include "pidm/sim.hpp"

namespace pidm::experiment {

struct DataSpec {
    std::vector<sim::Family> families;
    int demos_per_task = 200;
    int play = 500;
    int horizon = 60;
    std::uint64_t seed = 0;
};

// Writes demos for every family and play trajectories. A non-empty `dir`
// is an error unless `force` is set, in which case it is cleared first.
void generate_dataset(const std::filesystem::path &dir, const DataSpec &spec, bool force);

// Tasks with demos in the finetune split, in family order.
std::vector<sim::TaskSpec> finetune_tasks(const data::DatasetSplit &split);

enum class Variant : std::uint8_t { scratch, pretrained, detach_frs };

std::string variant_name(Variant v);

struct SweepConfig {
    std::filesystem::path data;
    // Checkpoints, logs and reports; runs already present here are reused.
    std::filesystem::path work;
    config::RunConfig pretrain;
    config::RunConfig finetune;
    std::vector<double> fractions{0.1, 0.2, 0.4, 0.7, 1.0};
    int seeds = 3;
    // Fractions at which the detach_frs ablation also runs (from scratch).
    std::vector<double> detach_fractions;
    rollout::EvalOptions eval;
    rollout::PolicyOptions policy;
};

struct SweepRow {
    double fraction = 1.0;
    int seed = 0;
    Variant variant = Variant::scratch;
    double sr = 0.0;
    double avg_len = 0.0;
    std::string checkpoint;
};

// Finetune seeds are finetune.train.seed + i for i < seeds; the pretrain
// checkpoint is shared by every pretrained run.
std::vector<SweepRow> run_sweep(const SweepConfig &cfg, std::ostream *progress = nullptr);

void write_sweep_csv(const std::vector<SweepRow> &rows, const std::filesystem::path &path);

// Mean SR over the rows with the given variant and fraction; nullopt when none match.
std::optional<double> mean_sr(const std::vector<SweepRow> &rows, Variant v, double fraction);

// Mean SR over every task of a report.
double mean_success(const rollout::EvalReport &report);

} // namespace pidm::experiment

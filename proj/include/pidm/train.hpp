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

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

#include "pidm/data.hpp"
#include "pidm/gradcheck.hpp"
#include "pidm/model.hpp"
#include "pidm/objective.hpp"
#include "pidm/params.hpp"

namespace pidm::train {

using data::Mode;

struct TrainConfig {
    Mode mode = Mode::finetune;
    int epochs = 1;
    // When positive, overrides the epoch budget with a fixed step count.
    int steps = 0;
    int batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 0;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;
    bool freeze_encoders = false;
    // Steps of full training before the encoders freeze.
    int freeze_after = 0;
    objective::Ablation ablation;
    bool loss_last_only = false;
    // Finetune data fraction; 1 keeps every demo.
    double fraction = 1.0;

    bool operator==(const TrainConfig &) const = default;
};

TrainConfig default_train_config(Mode mode);

void validate(const TrainConfig &cfg);

// peak * 0.5 * (1 + cos(pi * step / total)); steps past the end give 0.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double peak);

struct Moments {
    Tensor<float> m;
    Tensor<float> v;

    bool operator==(const Moments &) const = default;
};

struct OptimizerState {
    std::int64_t step = 0;
    std::map<std::string, Moments> moments;

    bool operator==(const OptimizerState &) const = default;
};

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// One AdamW update of every parameter that has a gradient and is not in `frozen`.
// Increments state.step first, so the first call uses bias correction for step 1.
void adamw_step(ParamMap<float> &params, const GradMap<float> &grads, OptimizerState &state, double lr,
                const AdamHyper &hyper, const std::function<bool(const std::string &)> &frozen = {});

// Scales gradients so their global L2 norm is at most max_norm. Returns the norm before clipping.
double clip_global_norm(GradMap<float> &grads, double max_norm);

template <typename T>
struct BatchResult {
    objective::LossTerms<T> terms;
    model::Readouts<T> readouts;
};

// Full pipeline for one batch: tokenize, backbone, both decoders, losses.
template <typename T>
BatchResult<T> evaluate_batch(const model::ModelConfig &cfg, Binder<T> &p, const model::Batch<T> &batch,
                              const model::AttentionMask &mask, const objective::Ablation &ablation);

struct Checkpoint {
    model::ModelConfig model;
    TrainConfig train;
    std::int64_t step = 0;
    ParamMap<float> params;
    OptimizerState optimizer;

    bool operator==(const Checkpoint &) const = default;
};

void save_checkpoint(const Checkpoint &ckpt, const std::filesystem::path &path);
Checkpoint load_checkpoint(const std::filesystem::path &path);
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint &ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string &source = "<memory>");

// Throws listing every differing architecture field.
void check_compatible(const model::ModelConfig &expected, const model::ModelConfig &found);

struct StepStats {
    int epoch = 0;
    std::int64_t step = 0;
    std::optional<double> l_fore;
    double l_arm = 0.0;
    double l_gripper = 0.0;
    double l_inv = 0.0;
    double total = 0.0;
    double lr = 0.0;
};

struct FitOptions {
    // Parameters to start from; their architecture must match.
    const Checkpoint *init = nullptr;
    // Receives the CSV loss log.
    std::ostream *log = nullptr;
    std::function<void(const StepStats &)> on_step;
    // Path written after every epoch (optional); "{epoch}" is replaced by the
    // 1-based epoch number.
    std::optional<std::filesystem::path> checkpoint_every_epoch;
};

Checkpoint fit(const data::DatasetSplit &split, model::ModelConfig model_cfg, const TrainConfig &train_cfg,
               const FitOptions &opts = {});

// Total optimizer steps the run will take.
std::int64_t planned_steps(const data::DatasetSplit &split, const model::ModelConfig &model_cfg,
                           const TrainConfig &train_cfg);

// Sibling checkpoint written after `epoch` for a run saved at `path`.
std::filesystem::path epoch_checkpoint_path(const std::filesystem::path &path, int epoch);

inline constexpr double kGradcheckJitter = 0.2;
inline constexpr double kReluMargin = 2e-3;

// Finite-difference check of the whole pipeline (tokenizers, resampler,
// masked backbone, both decoders, total loss) in f64 on a small fixed batch
// of scripted demos. Parameters are the seed's init plus truncated-normal
// jitter of std kGradcheckJitter, redrawn until no relu input lies within
// kReluMargin of its kink.
GradcheckReport pipeline_gradcheck(model::ModelConfig cfg, std::uint64_t seed, double eps);

} // namespace pidm::train

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

// JSON (de)serialization of model and training configs, preset files and
// flat key=value overrides.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "pidm/model.hpp"
#include "pidm/train.hpp"

namespace pidm::config {

using nlohmann::json;

json to_json(const model::ModelConfig &cfg);
// Unknown keys are errors; missing keys keep the defaults of `base`.
model::ModelConfig model_from_json(const json &j, const model::ModelConfig &base);
model::ModelConfig model_from_json(const json &j);

json to_json(const train::TrainConfig &cfg);
train::TrainConfig train_from_json(const json &j, const train::TrainConfig &base);
train::TrainConfig train_from_json(const json &j);

struct RunConfig {
    model::ModelConfig model;
    train::TrainConfig train;
};

// A config file holds {"model": {...}, "pretrain": {...}, "finetune": {...}}.
// "model" may name a "preset" whose values the remaining keys override.
RunConfig load_run_config(const std::filesystem::path &path, data::Mode mode);
RunConfig preset_run_config(const std::string &preset, data::Mode mode);
json preset_file(const std::string &preset);

// key=value where key is a model or train field, optionally prefixed with
// "model." or "train.". Unknown keys are errors.
void apply_override(RunConfig &run, const std::string &assignment);
void apply_overrides(RunConfig &run, const std::vector<std::string> &assignments);

} // namespace pidm::config

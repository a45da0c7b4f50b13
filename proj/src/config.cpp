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

#include "pidm/config.hpp"

#include <fstream>

namespace pidm::config {
namespace {

template <typename Obj, typename Field>
void read_field(const json &j, const char *key, Obj &obj, Field Obj::*member) {
    if (j.contains(key)) obj.*member = j.at(key).get<Field>();
}

void reject_unknown(const json &j, const std::vector<std::string> &known, const std::string &where) {
    if (!j.is_object()) throw Error(where + ": expected an object");
    for (const auto &[key, value] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw Error(where + ": unknown key '" + key + "'");
}

const std::vector<std::string> kModelKeys = {
    "preset",          "embed_dim",      "layers",         "heads",        "latents",    "resampler_dim",
    "resampler_layers", "resampler_heads", "decoder_dim",   "decoder_layers", "decoder_heads", "action_hidden",
    "image_side",      "patch",          "views",          "history",      "chunk",      "arm_dim",
    "state_dim",       "vocab",          "mode",           "detach_frs"};

const std::vector<std::string> kTrainKeys = {
    "mode",      "epochs",      "steps",   "batch_size", "lr",         "seed",    "weight_decay",
    "beta1",     "beta2",       "eps",     "clip_norm",  "freeze_encoders", "freeze_after", "no_fore",
    "no_inv",    "detach_frs",  "loss_last_only", "fraction"};

json parse_scalar(const std::string &text) {
    try {
        return json::parse(text);
    } catch (const json::exception &) {
        return json(text);
    }
}

} // namespace

json to_json(const model::ModelConfig &c) {
    return {{"preset", c.preset},
            {"embed_dim", c.embed_dim},
            {"layers", c.layers},
            {"heads", c.heads},
            {"latents", c.latents},
            {"resampler_dim", c.resampler_dim},
            {"resampler_layers", c.resampler_layers},
            {"resampler_heads", c.resampler_heads},
            {"decoder_dim", c.decoder_dim},
            {"decoder_layers", c.decoder_layers},
            {"decoder_heads", c.decoder_heads},
            {"action_hidden", c.action_hidden},
            {"image_side", c.image_side},
            {"patch", c.patch},
            {"views", c.views},
            {"history", c.history},
            {"chunk", c.chunk},
            {"arm_dim", c.arm_dim},
            {"state_dim", c.state_dim},
            {"vocab", c.vocab},
            {"mode", data::mode_name(c.mode)},
            {"detach_frs", c.detach_frs}};
}

model::ModelConfig model_from_json(const json &j, const model::ModelConfig &base) {
    reject_unknown(j, kModelKeys, "model config");
    model::ModelConfig c = base;
    try {
        if (j.contains("preset")) {
            const std::string name = j.at("preset").get<std::string>();
            if (name != c.preset) c = model::preset(name);
        }
        using M = model::ModelConfig;
        read_field(j, "embed_dim", c, &M::embed_dim);
        read_field(j, "layers", c, &M::layers);
        read_field(j, "heads", c, &M::heads);
        read_field(j, "latents", c, &M::latents);
        read_field(j, "resampler_dim", c, &M::resampler_dim);
        read_field(j, "resampler_layers", c, &M::resampler_layers);
        read_field(j, "resampler_heads", c, &M::resampler_heads);
        read_field(j, "decoder_dim", c, &M::decoder_dim);
        read_field(j, "decoder_layers", c, &M::decoder_layers);
        read_field(j, "decoder_heads", c, &M::decoder_heads);
        read_field(j, "action_hidden", c, &M::action_hidden);
        read_field(j, "image_side", c, &M::image_side);
        read_field(j, "patch", c, &M::patch);
        read_field(j, "views", c, &M::views);
        read_field(j, "history", c, &M::history);
        read_field(j, "chunk", c, &M::chunk);
        read_field(j, "arm_dim", c, &M::arm_dim);
        read_field(j, "state_dim", c, &M::state_dim);
        read_field(j, "vocab", c, &M::vocab);
        read_field(j, "detach_frs", c, &M::detach_frs);
        if (j.contains("mode")) c.mode = data::parse_mode(j.at("mode").get<std::string>());
    } catch (const json::exception &e) {
        throw Error(std::string("model config: ") + e.what());
    }
    model::validate(c);
    return c;
}

model::ModelConfig model_from_json(const json &j) {
    const std::string name = j.contains("preset") ? j.at("preset").get<std::string>() : "toy";
    return model_from_json(j, model::preset(name));
}

json to_json(const train::TrainConfig &c) {
    return {{"mode", data::mode_name(c.mode)},
            {"epochs", c.epochs},
            {"steps", c.steps},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"seed", c.seed},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"clip_norm", c.clip_norm},
            {"freeze_encoders", c.freeze_encoders},
            {"freeze_after", c.freeze_after},
            {"no_fore", c.ablation.no_fore},
            {"no_inv", c.ablation.no_inv},
            {"detach_frs", c.ablation.detach_frs},
            {"loss_last_only", c.loss_last_only},
            {"fraction", c.fraction}};
}

train::TrainConfig train_from_json(const json &j, const train::TrainConfig &base) {
    reject_unknown(j, kTrainKeys, "train config");
    train::TrainConfig c = base;
    try {
        using TC = train::TrainConfig;
        if (j.contains("mode")) c.mode = data::parse_mode(j.at("mode").get<std::string>());
        read_field(j, "epochs", c, &TC::epochs);
        read_field(j, "steps", c, &TC::steps);
        read_field(j, "batch_size", c, &TC::batch_size);
        read_field(j, "lr", c, &TC::lr);
        read_field(j, "seed", c, &TC::seed);
        read_field(j, "weight_decay", c, &TC::weight_decay);
        read_field(j, "beta1", c, &TC::beta1);
        read_field(j, "beta2", c, &TC::beta2);
        read_field(j, "eps", c, &TC::eps);
        read_field(j, "clip_norm", c, &TC::clip_norm);
        read_field(j, "freeze_encoders", c, &TC::freeze_encoders);
        read_field(j, "freeze_after", c, &TC::freeze_after);
        read_field(j, "loss_last_only", c, &TC::loss_last_only);
        read_field(j, "fraction", c, &TC::fraction);
        if (j.contains("no_fore")) c.ablation.no_fore = j.at("no_fore").get<bool>();
        if (j.contains("no_inv")) c.ablation.no_inv = j.at("no_inv").get<bool>();
        if (j.contains("detach_frs")) c.ablation.detach_frs = j.at("detach_frs").get<bool>();
    } catch (const json::exception &e) {
        throw Error(std::string("train config: ") + e.what());
    }
    train::validate(c);
    return c;
}

train::TrainConfig train_from_json(const json &j) {
    const data::Mode mode = j.contains("mode") ? data::parse_mode(j.at("mode").get<std::string>()) : data::Mode::finetune;
    return train_from_json(j, train::default_train_config(mode));
}

json preset_file(const std::string &preset) {
    model::ModelConfig m = model::preset(preset);
    json model = to_json(m);
    model.erase("mode");
    model.erase("detach_frs");
    model.erase("vocab");
    json out{{"model", model}};
    for (data::Mode mode : {data::Mode::pretrain, data::Mode::finetune}) {
        json t = to_json(train::default_train_config(mode));
        t.erase("mode");
        out[data::mode_name(mode)] = t;
    }
    return out;
}

RunConfig preset_run_config(const std::string &preset, data::Mode mode) {
    RunConfig run{model::preset(preset), train::default_train_config(mode)};
    run.model.mode = mode;
    return run;
}

RunConfig load_run_config(const std::filesystem::path &path, data::Mode mode) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception &e) {
        throw Error(path.string() + ": " + e.what());
    }
    reject_unknown(doc, {"model", "pretrain", "finetune"}, path.string());
    RunConfig run;
    run.model = doc.contains("model") ? model_from_json(doc.at("model")) : model::preset("toy");
    run.model.mode = mode;
    const std::string section = data::mode_name(mode);
    run.train = train::default_train_config(mode);
    if (doc.contains(section)) run.train = train_from_json(doc.at(section), run.train);
    run.train.mode = mode;
    return run;
}

void apply_override(RunConfig &run, const std::string &assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw Error("override '" + assignment + "' is not key=value");
    std::string key = assignment.substr(0, eq);
    const json value = parse_scalar(assignment.substr(eq + 1));
    std::string scope;
    if (key.starts_with("model.")) {
        scope = "model";
        key = key.substr(6);
    } else if (key.starts_with("train.")) {
        scope = "train";
        key = key.substr(6);
    }
    const bool in_model = std::find(kModelKeys.begin(), kModelKeys.end(), key) != kModelKeys.end();
    const bool in_train = std::find(kTrainKeys.begin(), kTrainKeys.end(), key) != kTrainKeys.end();
    if (key == "mode") throw Error("override: mode is chosen by the command, not by overrides");
    // Bare keys present in both (detach_frs) resolve to the training side.
    if (scope.empty()) scope = in_train ? "train" : "model";
    if (scope == "model") {
        if (!in_model) throw Error("unknown config key '" + assignment.substr(0, eq) + "'");
        run.model = model_from_json(json{{key, value}}, run.model);
    } else {
        if (!in_train) throw Error("unknown config key '" + assignment.substr(0, eq) + "'");
        run.train = train_from_json(json{{key, value}}, run.train);
    }
}

void apply_overrides(RunConfig &run, const std::vector<std::string> &assignments) {
    for (const auto &a : assignments) apply_override(run, a);
}

} // namespace pidm::config

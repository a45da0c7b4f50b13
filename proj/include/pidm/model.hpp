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

// Multi-view policy transformer with foresight and action readout tokens.
//
// Every timestep contributes W = 4 + 2k + n tokens in the order
//   GOAL | IMG (view 0: k, view 1: k) | STATE | FRS (one per view) | INV (n)
// and a window of m timesteps is one sequence of m * W tokens. FRS outputs
// decode into the image n steps ahead; INV outputs decode into the next n
// actions and see the FRS tokens of their own timestep.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pidm/data.hpp"
#include "pidm/params.hpp"
#include "pidm/tensor.hpp"

namespace pidm::model {

using data::Mode;

struct ModelConfig {
    std::string preset = "toy";
    int embed_dim = 64;
    int layers = 4;
    int heads = 4;
    int latents = 4; // k, per view
    int resampler_dim = 64;
    int resampler_layers = 1;
    int resampler_heads = 4;
    int decoder_dim = 64;
    int decoder_layers = 1;
    int decoder_heads = 4;
    int action_hidden = 64;
    int image_side = 32;
    int patch = 8;
    int views = 2;
    int history = 7; // m
    int chunk = 3;   // n
    int arm_dim = 2;
    int state_dim = 4;
    std::vector<std::string> vocab;
    Mode mode = Mode::finetune;
    // Drops the INV -> FRS attention edges.
    bool detach_frs = false;

    int patches_per_view() const { return (image_side / patch) * (image_side / patch); }
    int patch_values() const { return patch * patch * 3; }
    int vocab_size() const { return static_cast<int>(vocab.size()); }

    bool operator==(const ModelConfig &) const = default;
};

ModelConfig preset(const std::string &name);

// Throws on broken invariants (head divisibility, patch tiling, sizes).
void validate(const ModelConfig &cfg);

// Names of architecture fields whose values differ; mode and ablations excluded.
std::vector<std::string> architecture_mismatch(const ModelConfig &a, const ModelConfig &b);

enum class Group : std::uint8_t { goal, img, state, frs, inv };

struct TokenSlot {
    int timestep = 0;
    Group group = Group::goal;
    int offset = 0; // view * k + latent for IMG, view for FRS, slot for INV

    bool operator==(const TokenSlot &) const = default;
};

struct TokenLayout {
    int m = 0;
    int k = 0;
    int n = 0;

    int width() const { return 4 + 2 * k + n; }
    int length() const { return m * width(); }
    int group_offset(Group g) const;
    int group_size(Group g) const;
    int index(int timestep, Group g, int offset) const;
    TokenSlot slot(int index) const;
};

TokenLayout layout(const ModelConfig &cfg);

// Row-major [L, L]; entry (q, k) is 1 when query q may attend key k.
struct AttentionMask {
    int length = 0;
    std::vector<std::uint8_t> allowed;

    bool at(int q, int k) const { return allowed[static_cast<std::size_t>(q) * length + k] != 0; }
    MaskView view() const { return {allowed, length, length}; }
};

AttentionMask build_mask(const ModelConfig &cfg);

ParamMap<float> init_params(const ModelConfig &cfg, std::uint64_t seed);

// Parameter-name prefixes of the visual and language encoders.
bool is_encoder_param(const std::string &name);
bool is_image_decoder_param(const std::string &name);

// Dense inputs and targets for a batch of windows, already patchified.
template <typename T>
struct Batch {
    int batch = 0;
    int m = 0;
    int n = 0;
    Mode mode = Mode::finetune;
    Tensor<T> patches;        // [B*m*views, P, patch_values], pixels in [0, 1]
    Tensor<T> states;         // [B*m, state_dim]
    Tensor<T> goal_states;    // pretrain: [B, state_dim]
    Tensor<T> word_weights;   // finetune: [B, vocab] mean-pooling weights
    Tensor<T> target_patches; // [B*m*views, P, patch_values]
    Tensor<T> target_arm;     // [B*m*n, arm_dim]
    Tensor<T> target_gripper; // [B*m*n, 1]
    std::vector<std::uint8_t> valid; // [B*m]
    bool has_targets = true;
};

struct BatchOptions {
    bool last_only = false; // supervise only the final window timestep
    bool targets = true;
};

template <typename T>
Batch<T> make_batch(const ModelConfig &cfg, const std::vector<data::TrainingWindow> &windows,
                    const BatchOptions &opts = {});

// Box-filters a [S, S, 3] u8 image to [side, side, 3] floats in [0, 1] and
// cuts it into row-major patches of patch_values each.
template <typename T>
std::vector<T> patchify(const std::uint8_t *image, int source_side, int side, int patch);

// Mean-pooling weights over the vocabulary; unknown words are an error naming the word.
template <typename T>
std::vector<T> word_weights(const ModelConfig &cfg, const std::string &instruction);

template <typename T>
struct Readouts {
    Var<T> frs;    // [B, m, views, d]
    Var<T> inv;    // [B, m, n, d]
    Var<T> tokens; // [B, m*W, d] backbone input
};

template <typename T>
Var<T> tokenize(const ModelConfig &cfg, Binder<T> &p, const Batch<T> &batch);

// patch tokens [N, P, resampler_dim] -> latents [N, k, resampler_dim]
template <typename T>
Var<T> resample(const ModelConfig &cfg, Binder<T> &p, Var<T> patch_tokens);

// `token_delta`, when given, is added to the backbone input ([B, L, d]).
template <typename T>
Readouts<T> forward(const ModelConfig &cfg, Binder<T> &p, const Batch<T> &batch, const AttentionMask &mask,
                    const Tensor<T> *token_delta = nullptr);

template <typename T>
struct ActionOutputs {
    Var<T> arm;     // [N, arm_dim] in [-1, 1]
    Var<T> gripper; // [N, 1] in [0, 1]
};

// rows [N, d] -> per-row action
template <typename T>
ActionOutputs<T> decode_actions(const ModelConfig &cfg, Binder<T> &p, Var<T> rows);

// rows [N, d] -> predicted patches [N, P, patch_values]
template <typename T>
Var<T> decode_images(const ModelConfig &cfg, Binder<T> &p, Var<T> rows);

// Reassembles row-major patches into a [side, side, 3] image.
template <typename T>
std::vector<T> unpatchify(std::span<const T> patches, int side, int patch);

// Fixed sine-cosine table [P, dim] over the patch grid.
std::vector<double> sincos_2d(int grid, int dim);

} // namespace pidm::model

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
#include <optional>
#include <span>

#include "pidm/tensor.hpp"

namespace pidm::objective {

// Gripper weight inside the action loss.
inline constexpr double kLambda = 0.01;
// Foresight weight in the total loss.
inline constexpr double kAlpha = 0.5;

struct Ablation {
    bool no_fore = false;
    bool no_inv = false;
    bool detach_frs = false;

    bool operator==(const Ablation &) const = default;
};

template <typename T>
struct LossTerms {
    std::optional<Var<T>> l_fore;
    Var<T> l_arm;
    Var<T> l_gripper;
    Var<T> l_inv;
    Var<T> total;
};

// Mean squared error over the rows of pred/target ([R, ...]) whose `valid`
// flag is set. An empty `valid` means every row counts.
template <typename T>
Var<T> loss_fore(Var<T> pred, Var<T> target, std::span<const std::uint8_t> valid = {});

template <typename T>
struct InvTerms {
    Var<T> l_arm;
    Var<T> l_gripper;
    Var<T> l_inv;
};

// pred/target arm [R*n, arm_dim], gripper [R*n, 1]; `valid` has R entries
// (one per timestep, covering its n chunk slots) or is empty.
template <typename T>
InvTerms<T> loss_inv(Var<T> pred_arm, Var<T> pred_gripper, Var<T> target_arm, Var<T> target_gripper,
                     std::span<const std::uint8_t> valid = {});

template <typename T>
Var<T> total_loss(std::optional<Var<T>> l_fore, Var<T> l_inv, const Ablation &ablation);

} // namespace pidm::objective

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

#include "pidm/objective.hpp"

#include <vector>

namespace pidm::objective {
namespace {

// Row indices to keep, expanding each valid flag to `repeat` consecutive rows.
std::vector<std::int64_t> kept_rows(std::span<const std::uint8_t> valid, std::int64_t rows, std::int64_t repeat,
                                    const char *what) {
    std::vector<std::int64_t> keep;
    if (valid.empty()) {
        for (std::int64_t r = 0; r < rows; ++r) keep.push_back(r);
    } else {
        if (static_cast<std::int64_t>(valid.size()) * repeat != rows)
            throw Error(std::string(what) + ": validity mask covers " + std::to_string(valid.size()) +
                        " timesteps but there are " + std::to_string(rows) + " rows");
        for (std::size_t i = 0; i < valid.size(); ++i)
            if (valid[i])
                for (std::int64_t s = 0; s < repeat; ++s) keep.push_back(static_cast<std::int64_t>(i) * repeat + s);
    }
    if (keep.empty()) throw Error(std::string(what) + ": no valid timesteps");
    return keep;
}

template <typename T>
Var<T> select_rows(Var<T> x, const std::vector<std::int64_t> &keep) {
    if (static_cast<std::int64_t>(keep.size()) == x.dim(0)) return x;
    return index_select(x, std::span<const std::int64_t>(keep));
}

} // namespace

template <typename T>
Var<T> loss_fore(Var<T> pred, Var<T> target, std::span<const std::uint8_t> valid) {
    if (pred.shape() != target.shape()) throw Error("loss_fore: prediction and target shapes differ");
    if (pred.shape().empty()) throw Error("loss_fore: inputs need a row dimension");
    const auto rows = pred.dim(0);
    const std::int64_t repeat = valid.empty() ? 1 : rows / std::max<std::int64_t>(1, valid.size());
    const auto keep = kept_rows(valid, rows, repeat, "loss_fore");
    const Var<T> diff = sub(select_rows(pred, keep), select_rows(target, keep));
    return mean(mul(diff, diff));
}

template <typename T>
InvTerms<T> loss_inv(Var<T> pred_arm, Var<T> pred_gripper, Var<T> target_arm, Var<T> target_gripper,
                     std::span<const std::uint8_t> valid) {
    if (pred_arm.shape() != target_arm.shape() || pred_gripper.shape() != target_gripper.shape())
        throw Error("loss_inv: prediction and target shapes differ");
    if (pred_arm.dim(0) != pred_gripper.dim(0)) throw Error("loss_inv: arm and gripper row counts differ");
    const auto rows = pred_arm.dim(0);
    const std::int64_t repeat = valid.empty() ? 1 : rows / std::max<std::int64_t>(1, valid.size());
    const auto keep = kept_rows(valid, rows, repeat, "loss_inv");
    InvTerms<T> out;
    out.l_arm = mean(smooth_l1(sub(select_rows(pred_arm, keep), select_rows(target_arm, keep))));
    out.l_gripper = mean(bce(select_rows(pred_gripper, keep), select_rows(target_gripper, keep)));
    out.l_inv = add(out.l_arm, scale(out.l_gripper, kLambda));
    return out;
}

template <typename T>
Var<T> total_loss(std::optional<Var<T>> l_fore, Var<T> l_inv, const Ablation &ablation) {
    if (ablation.no_fore && ablation.no_inv) throw Error("total_loss: cannot drop both loss terms");
    if (ablation.no_fore) return l_inv;
    if (!l_fore) throw Error("total_loss: foresight loss missing");
    const Var<T> fore = scale(*l_fore, kAlpha);
    if (ablation.no_inv) return fore;
    return add(fore, l_inv);
}

#define PIDM_INSTANTIATE_OBJECTIVE(T)                                                                          \
    template Var<T> loss_fore<T>(Var<T>, Var<T>, std::span<const std::uint8_t>);                              \
    template InvTerms<T> loss_inv<T>(Var<T>, Var<T>, Var<T>, Var<T>, std::span<const std::uint8_t>);          \
    template Var<T> total_loss<T>(std::optional<Var<T>>, Var<T>, const Ablation &);

PIDM_INSTANTIATE_OBJECTIVE(float)
PIDM_INSTANTIATE_OBJECTIVE(double)

} // namespace pidm::objective

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

#include <functional>
#include <string>

#include "pidm/params.hpp"

namespace pidm {

using LossBuilder = std::function<Var<double>(Binder<double> &)>;

struct GradcheckReport {
    double max_relative_error = 0.0;
    std::string worst_parameter;
    std::int64_t worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::int64_t entries = 0;
};

// Compares reverse-mode gradients with central differences
// (L(p + eps) - L(p - eps)) / (2 eps) over every entry of every parameter.
// Relative error is |ad - fd| / max(|ad|, |fd|, 1e-8).
// `params` is perturbed in place and restored exactly before returning.
GradcheckReport gradcheck(const LossBuilder &loss, ParamMap<double> &params, double eps);

} // namespace pidm

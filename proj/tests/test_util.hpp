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

#include <filesystem>
#include <random>
#include <string>

#include "pidm/tensor.hpp"

namespace pidm::testing {

template <typename T = double>
Tensor<T> random_tensor(std::mt19937_64 &rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto &v : t.data) {
        v = static_cast<T>(dist(rng));
    }
    return t;
}

// Uniform in [lo, hi] but at least `gap` away from `kink` (for relu/smooth-l1).
inline Tensor<double> random_away_from(std::mt19937_64 &rng, Shape shape, double kink, double gap, double lo,
                                       double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor<double> t(std::move(shape));
    for (auto &v : t.data) {
        do {
            v = dist(rng);
        } while (std::abs(std::abs(v) - kink) < gap);
    }
    return t;
}

inline std::filesystem::path temp_dir(const std::string &name) {
    auto p = std::filesystem::temp_directory_path() / ("pidm_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace pidm::testing

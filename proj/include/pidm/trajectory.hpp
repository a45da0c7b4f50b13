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
#include <string>
#include <vector>

namespace pidm {

struct StageEvent {
    int step = 0;
    int stage = 0;

    bool operator==(const StageEvent &) const = default;
};

// One recorded episode: observation, robot state and action at every step.
struct Trajectory {
    std::string task; // family name, or "play"
    std::optional<std::string> instruction;
    int length = 0;
    int views = 2;
    int height = 32;
    int width = 32;
    int state_dim = 4;
    int action_dim = 3;
    std::uint64_t seed = 0;
    std::vector<StageEvent> stages;
    std::vector<std::uint8_t> images; // [T][views][H][W][3]
    std::vector<float> states;        // [T][state_dim]
    std::vector<float> actions;       // [T][action_dim]

    std::size_t image_bytes() const { return static_cast<std::size_t>(height) * width * 3; }
    const std::uint8_t *image(int t, int view) const {
        return images.data() + (static_cast<std::size_t>(t) * views + view) * image_bytes();
    }
    const float *state(int t) const { return states.data() + static_cast<std::size_t>(t) * state_dim; }
    const float *action(int t) const { return actions.data() + static_cast<std::size_t>(t) * action_dim; }

    bool operator==(const Trajectory &) const = default;
};

} // namespace pidm

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
#include <map>
#include <random>
#include <string>

#include "pidm/tensor.hpp"

namespace pidm {

template <typename T>
struct Param {
    Tensor<T> value;
    // Decoupled weight decay applies only to weight matrices.
    bool decay = false;

    bool operator==(const Param &) const = default;
};

// Sorted by name, which is also the serialization order.
template <typename T>
using ParamMap = std::map<std::string, Param<T>>;

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

template <typename T>
std::int64_t parameter_count(const ParamMap<T> &params);

template <typename T, typename U>
ParamMap<T> cast_params(const ParamMap<U> &params);

// Seeded initializers: truncated normal (cut at two standard deviations)
// for weights, constants for biases and layer-norm parameters.
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    template <typename T>
    Tensor<T> truncated_normal(Shape shape, double stddev);

private:
    std::mt19937_64 rng_;
};

// Binds parameters into a graph on first use, so parameters a forward pass
// never touches stay out of the graph and report zero gradients.
template <typename T>
class Binder {
public:
    Binder(Graph<T> &graph, const ParamMap<T> &params) : graph_(graph), params_(params) {}

    Var<T> operator()(const std::string &name);
    Graph<T> &graph() const { return graph_; }
    const ParamMap<T> &params() const { return params_; }
    bool has(const std::string &name) const { return params_.count(name) != 0; }

    // One entry per parameter; call after graph().backward().
    GradMap<T> gradients() const;

private:
    Graph<T> &graph_;
    const ParamMap<T> &params_;
    std::map<std::string, Var<T>> bound_;
};

} // namespace pidm

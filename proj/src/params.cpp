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

#include "pidm/params.hpp"

namespace pidm {

template <typename T>
std::int64_t parameter_count(const ParamMap<T> &params) {
    std::int64_t n = 0;
    for (const auto &[name, p] : params) {
        n += p.value.size();
    }
    return n;
}

template <typename T, typename U>
ParamMap<T> cast_params(const ParamMap<U> &params) {
    ParamMap<T> out;
    for (const auto &[name, p] : params) {
        Param<T> q;
        q.decay = p.decay;
        q.value.shape = p.value.shape;
        q.value.data.assign(p.value.data.begin(), p.value.data.end());
        out.emplace(name, std::move(q));
    }
    return out;
}

template <typename T>
Tensor<T> Initializer::truncated_normal(Shape shape, double stddev) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto &v : t.data) {
        double z = dist(rng_);
        while (z < -2.0 || z > 2.0) {
            z = dist(rng_);
        }
        v = static_cast<T>(z * stddev);
    }
    return t;
}

template <typename T>
Var<T> Binder<T>::operator()(const std::string &name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) {
        return it->second;
    }
    auto p = params_.find(name);
    if (p == params_.end()) {
        throw Error("unknown parameter '" + name + "'");
    }
    Var<T> v = graph_.parameter(p->second.value);
    bound_.emplace(name, v);
    return v;
}

template <typename T>
GradMap<T> Binder<T>::gradients() const {
    GradMap<T> out;
    for (const auto &[name, p] : params_) {
        auto it = bound_.find(name);
        if (it == bound_.end()) {
            out.emplace(name, Tensor<T>(p.value.shape));
        } else {
            out.emplace(name, graph_.grad(it->second.id()));
        }
    }
    return out;
}

template std::int64_t parameter_count(const ParamMap<float> &);
template std::int64_t parameter_count(const ParamMap<double> &);
template ParamMap<float> cast_params(const ParamMap<double> &);
template ParamMap<double> cast_params(const ParamMap<float> &);
template ParamMap<float> cast_params(const ParamMap<float> &);
template ParamMap<double> cast_params(const ParamMap<double> &);
template Tensor<float> Initializer::truncated_normal(Shape, double);
template Tensor<double> Initializer::truncated_normal(Shape, double);
template class Binder<float>;
template class Binder<double>;

} // namespace pidm

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

#include "pidm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace pidm {

namespace {

double evaluate(const LossBuilder &loss, const ParamMap<double> &params) {
    Graph<double> g;
    Binder<double> binder(g, params);
    Var<double> l = loss(binder);
    if (l.value().size() != 1) {
        throw Error("gradcheck: loss must be a scalar, got shape " + to_string(l.shape()));
    }
    return l.value().data[0];
}

} // namespace

GradcheckReport gradcheck(const LossBuilder &loss, ParamMap<double> &params, double eps) {
    if (!(eps >= 1e-6 && eps <= 1e-3)) {
        throw Error("gradcheck: eps must lie in [1e-6, 1e-3]");
    }
    const double first = evaluate(loss, params);
    const double second = evaluate(loss, params);
    if (first != second) {
        throw Error("gradcheck: loss function is not deterministic");
    }

    GradMap<double> analytic;
    {
        Graph<double> g;
        Binder<double> binder(g, params);
        Var<double> l = loss(binder);
        g.backward(l);
        analytic = binder.gradients();
    }

    GradcheckReport report;
    for (auto &[name, p] : params) {
        const auto &ad = analytic.at(name).data;
        for (std::size_t i = 0; i < p.value.data.size(); ++i) {
            const double original = p.value.data[i];
            p.value.data[i] = original + eps;
            const double up = evaluate(loss, params);
            p.value.data[i] = original - eps;
            const double down = evaluate(loss, params);
            p.value.data[i] = original;
            const double fd = (up - down) / (2.0 * eps);
            const double denom = std::max({std::abs(ad[i]), std::abs(fd), 1e-8});
            const double rel = std::abs(ad[i] - fd) / denom;
            ++report.entries;
            if (rel > report.max_relative_error) {
                report.max_relative_error = rel;
                report.worst_parameter = name;
                report.worst_index = static_cast<std::int64_t>(i);
                report.worst_analytic = ad[i];
                report.worst_numeric = fd;
            }
        }
    }
    return report;
}

} // namespace pidm

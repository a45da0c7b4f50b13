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

#include "pidm/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace pidm {

std::int64_t numel(const Shape &shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) {
            throw Error("negative dimension in shape " + to_string(shape));
        }
        n *= d;
    }
    return n;
}

std::string to_string(const Shape &shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? ", " : "") << shape[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape s, T fill) : shape(std::move(s)), data(static_cast<std::size_t>(numel(shape)), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
    if (numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw Error("tensor shape " + to_string(shape) + " does not match " + std::to_string(data.size()) +
                    " values");
    }
}

template <typename T>
std::int64_t Tensor<T>::dim(int i) const {
    const int r = rank();
    const int idx = i < 0 ? r + i : i;
    if (idx < 0 || idx >= r) {
        throw Error("dim " + std::to_string(i) + " out of range for shape " + to_string(shape));
    }
    return shape[static_cast<std::size_t>(idx)];
}

template <typename T>
Graph<T> &Var<T>::graph() const {
    if (graph_ == nullptr) {
        throw Error("use of an unbound Var");
    }
    return *graph_;
}

template <typename T>
const Tensor<T> &Var<T>::value() const {
    return graph().value(id_);
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
    Node node;
    node.op = "constant";
    node.value = std::move(value);
    nodes_.push_back(std::move(node));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Var<T> Graph<T>::parameter(Tensor<T> value) {
    Node node;
    node.op = "parameter";
    node.value = std::move(value);
    node.requires_grad = true;
    nodes_.push_back(std::move(node));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

namespace {

template <typename T>
void check_finite(const char *op, const Tensor<T> &t) {
    // A value is inf or NaN exactly when all exponent bits are set.
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exp_mask = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
    bool bad = false;
    for (T v : t.data) {
        bad |= (std::bit_cast<Bits>(v) & exp_mask) == exp_mask;
    }
    if (bad) {
        throw Error(std::string("non-finite output in ") + op);
    }
}

} // namespace

template <typename T>
Var<T> Graph<T>::record(const char *op, Tensor<T> value, std::vector<int> inputs, BackwardFn backward) {
    if (std::string_view(op) != "masked_fill") {
        check_finite(op, value);
    }
    Node node;
    node.op = op;
    node.value = std::move(value);
    for (int in : inputs) {
        if (in < 0 || in >= static_cast<int>(nodes_.size())) {
            throw Error(std::string("invalid input id for ") + op);
        }
        node.requires_grad = node.requires_grad || nodes_[static_cast<std::size_t>(in)].requires_grad;
    }
    node.inputs = std::move(inputs);
    if (node.requires_grad) {
        node.backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
}

template <typename T>
Tensor<T> Graph<T>::grad(int id) const {
    const Node &n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.empty()) {
        return Tensor<T>(n.value.shape);
    }
    return Tensor<T>(n.value.shape, n.grad);
}

template <typename T>
std::vector<T> &Graph<T>::grad_buffer(int id) {
    Node &n = nodes_.at(static_cast<std::size_t>(id));
    if (n.grad.empty()) {
        n.grad.assign(n.value.data.size(), T(0));
    }
    return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
    if (&loss.graph() != this) {
        throw Error("backward called with a Var from another graph");
    }
    if (loss.value().size() != 1) {
        throw Error("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    for (auto &n : nodes_) {
        n.grad.clear();
    }
    grad_buffer(loss.id())[0] = T(1);
    for (int id = loss.id(); id >= 0; --id) {
        Node &n = nodes_[static_cast<std::size_t>(id)];
        if (n.backward && !n.grad.empty()) {
            n.backward(*this, id);
        }
    }
}

template class Tensor<float>;
template class Tensor<double>;
template class Var<float>;
template class Var<double>;
template class Graph<float>;
template class Graph<double>;

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutStrided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

bool is_suffix(const Shape &small, const Shape &big) {
    if (small.size() > big.size()) {
        return false;
    }
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

enum class BinOp { add, sub, mul };

template <typename T>
Var<T> binary(Var<T> a, Var<T> b, BinOp op, const char *name) {
    Graph<T> &g = a.graph();
    if (&b.graph() != &g) {
        throw Error(std::string(name) + ": operands belong to different graphs");
    }
    const Shape &sa = a.shape();
    const Shape &sb = b.shape();
    bool a_big = true;
    if (sa != sb) {
        if (is_suffix(sb, sa)) {
            a_big = true;
        } else if (is_suffix(sa, sb)) {
            a_big = false;
        } else {
            throw Error(std::string(name) + ": shape mismatch " + to_string(sa) + " vs " + to_string(sb));
        }
    }
    const Tensor<T> &ta = a.value();
    const Tensor<T> &tb = b.value();
    const Shape out_shape = a_big ? sa : sb;
    const std::int64_t n = numel(out_shape);
    const std::int64_t na = ta.size();
    const std::int64_t nb = tb.size();
    Tensor<T> out(out_shape);
    // The smaller operand is a shape suffix of the larger, so it repeats in
    // contiguous blocks of its own size.
    const std::int64_t ns = std::min(na, nb);
    const T *pa = ta.data.data();
    const T *pb = tb.data.data();
    T *po = out.data.data();
    for (std::int64_t blk = 0; blk < n; blk += ns) {
        const T *xa = pa + (na == n ? blk : 0);
        const T *xb = pb + (nb == n ? blk : 0);
        T *xo = po + blk;
        switch (op) {
        case BinOp::add:
            for (std::int64_t j = 0; j < ns; ++j) xo[j] = xa[j] + xb[j];
            break;
        case BinOp::sub:
            for (std::int64_t j = 0; j < ns; ++j) xo[j] = xa[j] - xb[j];
            break;
        default:
            for (std::int64_t j = 0; j < ns; ++j) xo[j] = xa[j] * xb[j];
            break;
        }
    }
    const int ia = a.id();
    const int ib = b.id();
    return g.record(name, std::move(out), {ia, ib}, [ia, ib, op, n, na, nb, ns](Graph<T> &gr, int self) {
        const T *dout = gr.output_grad(self).data();
        if (gr.requires_grad(ia)) {
            T *da = gr.grad_buffer(ia).data();
            const T *vb = gr.value(ib).data.data();
            for (std::int64_t blk = 0; blk < n; blk += ns) {
                T *xa = da + (na == n ? blk : 0);
                const T *xd = dout + blk;
                if (op == BinOp::mul) {
                    const T *xb = vb + (nb == n ? blk : 0);
                    for (std::int64_t j = 0; j < ns; ++j) xa[j] += xd[j] * xb[j];
                } else {
                    for (std::int64_t j = 0; j < ns; ++j) xa[j] += xd[j];
                }
            }
        }
        if (gr.requires_grad(ib)) {
            T *db = gr.grad_buffer(ib).data();
            const T *va = gr.value(ia).data.data();
            for (std::int64_t blk = 0; blk < n; blk += ns) {
                T *xb = db + (nb == n ? blk : 0);
                const T *xd = dout + blk;
                switch (op) {
                case BinOp::add:
                    for (std::int64_t j = 0; j < ns; ++j) xb[j] += xd[j];
                    break;
                case BinOp::sub:
                    for (std::int64_t j = 0; j < ns; ++j) xb[j] -= xd[j];
                    break;
                default: {
                    const T *xa = va + (na == n ? blk : 0);
                    for (std::int64_t j = 0; j < ns; ++j) xb[j] += xd[j] * xa[j];
                    break;
                }
                }
            }
        }
    });
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(Var<T> a, const char *name, Fwd fwd, Deriv deriv) {
    Graph<T> &g = a.graph();
    const Tensor<T> &ta = a.value();
    Tensor<T> out(ta.shape);
    for (std::size_t i = 0; i < ta.data.size(); ++i) {
        out.data[i] = fwd(ta.data[i]);
    }
    const int ia = a.id();
    return g.record(name, std::move(out), {ia}, [ia, deriv](Graph<T> &gr, int self) {
        const auto &dout = gr.output_grad(self);
        const auto &x = gr.value(ia).data;
        const auto &y = gr.value(self).data;
        auto &da = gr.grad_buffer(ia);
        for (std::size_t i = 0; i < x.size(); ++i) {
            da[i] += dout[i] * deriv(x[i], y[i]);
        }
    });
}

} // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    return binary(a, b, BinOp::add, "add");
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    return binary(a, b, BinOp::sub, "sub");
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    return binary(a, b, BinOp::mul, "mul");
}

template <typename T>
Var<T> scale(Var<T> a, double factor) {
    const T f = static_cast<T>(factor);
    return unary(a, "scale", [f](T x) { return x * f; }, [f](T, T) { return f; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, double value) {
    const T c = static_cast<T>(value);
    return unary(a, "add_scalar", [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Graph<T> &g = a.graph();
    const Shape &sa = a.shape();
    const Shape &sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        throw Error("matmul: operands need rank >= 2, got " + to_string(sa) + " and " + to_string(sb));
    }
    const std::int64_t m = sa[sa.size() - 2];
    const std::int64_t k = sa.back();
    const std::int64_t kb = sb[sb.size() - 2];
    const std::int64_t nn = sb.back();
    if (k != kb) {
        throw Error("matmul: inner dims differ " + to_string(sa) + " x " + to_string(sb));
    }
    const bool shared = sb.size() == 2;
    Shape lead(sa.begin(), sa.end() - 2);
    if (!shared) {
        Shape lead_b(sb.begin(), sb.end() - 2);
        if (lead != lead_b) {
            throw Error("matmul: batch dims differ " + to_string(sa) + " x " + to_string(sb));
        }
    }
    const std::int64_t batch = numel(lead);
    Shape out_shape = lead;
    out_shape.push_back(m);
    out_shape.push_back(nn);
    Tensor<T> out(out_shape);
    const T *pa = a.value().data.data();
    const T *pb = b.value().data.data();
    T *po = out.data.data();
    if (shared) {
        MutMap<T>(po, batch * m, nn).noalias() = ConstMap<T>(pa, batch * m, k) * ConstMap<T>(pb, k, nn);
    } else {
        for (std::int64_t i = 0; i < batch; ++i) {
            MutMap<T>(po + i * m * nn, m, nn).noalias() =
                ConstMap<T>(pa + i * m * k, m, k) * ConstMap<T>(pb + i * k * nn, k, nn);
        }
    }
    const int ia = a.id();
    const int ib = b.id();
    return g.record("matmul", std::move(out), {ia, ib}, [=](Graph<T> &gr, int self) {
        const T *dout = gr.output_grad(self).data();
        const T *va = gr.value(ia).data.data();
        const T *vb = gr.value(ib).data.data();
        if (shared) {
            if (gr.requires_grad(ia)) {
                MutMap<T>(gr.grad_buffer(ia).data(), batch * m, k).noalias() +=
                    ConstMap<T>(dout, batch * m, nn) * ConstMap<T>(vb, k, nn).transpose();
            }
            if (gr.requires_grad(ib)) {
                MutMap<T>(gr.grad_buffer(ib).data(), k, nn).noalias() +=
                    ConstMap<T>(va, batch * m, k).transpose() * ConstMap<T>(dout, batch * m, nn);
            }
            return;
        }
        for (std::int64_t i = 0; i < batch; ++i) {
            if (gr.requires_grad(ia)) {
                MutMap<T>(gr.grad_buffer(ia).data() + i * m * k, m, k).noalias() +=
                    ConstMap<T>(dout + i * m * nn, m, nn) * ConstMap<T>(vb + i * k * nn, k, nn).transpose();
            }
            if (gr.requires_grad(ib)) {
                MutMap<T>(gr.grad_buffer(ib).data() + i * k * nn, k, nn).noalias() +=
                    ConstMap<T>(va + i * m * k, m, k).transpose() * ConstMap<T>(dout + i * m * nn, m, nn);
            }
        }
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    Graph<T> &g = a.graph();
    const Shape &sa = a.shape();
    if (sa.size() < 2) {
        throw Error("transpose: rank >= 2 required, got " + to_string(sa));
    }
    const std::int64_t r = sa[sa.size() - 2];
    const std::int64_t c = sa.back();
    const std::int64_t batch = numel(sa) / std::max<std::int64_t>(r * c, 1);
    Shape out_shape = sa;
    std::swap(out_shape[sa.size() - 2], out_shape[sa.size() - 1]);
    Tensor<T> out(out_shape);
    const auto &x = a.value().data;
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t i = 0; i < r; ++i) {
            for (std::int64_t j = 0; j < c; ++j) {
                out.data[static_cast<std::size_t>(b * r * c + j * r + i)] =
                    x[static_cast<std::size_t>(b * r * c + i * c + j)];
            }
        }
    }
    const int ia = a.id();
    return g.record("transpose", std::move(out), {ia}, [=](Graph<T> &gr, int self) {
        const auto &dout = gr.output_grad(self);
        auto &da = gr.grad_buffer(ia);
        for (std::int64_t b = 0; b < batch; ++b) {
            for (std::int64_t i = 0; i < r; ++i) {
                for (std::int64_t j = 0; j < c; ++j) {
                    da[static_cast<std::size_t>(b * r * c + i * c + j)] +=
                        dout[static_cast<std::size_t>(b * r * c + j * r + i)];
                }
            }
        }
    });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
    Graph<T> &g = a.graph();
    const std::int64_t total = a.value().size();
    int infer = -1;
    std::int64_t known = 1;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] == -1) {
            if (infer >= 0) {
                throw Error("reshape: more than one -1 in " + to_string(shape));
            }
            infer = static_cast<int>(i);
        } else {
            known *= shape[i];
        }
    }
    if (infer >= 0) {
        if (known == 0 || total % known != 0) {
            throw Error("reshape: cannot infer dim of " + to_string(shape) + " from " + to_string(a.shape()));
        }
        shape[static_cast<std::size_t>(infer)] = total / known;
    }
    if (numel(shape) != total) {
        throw Error("reshape: " + to_string(a.shape()) + " cannot become " + to_string(shape));
    }
    Tensor<T> out(shape, a.value().data);
    const int ia = a.id();
    return g.record("reshape", std::move(out), {ia}, [ia](Graph<T> &gr, int self) {
        const auto &dout = gr.output_grad(self);
        auto &da = gr.grad_buffer(ia);
        for (std::size_t i = 0; i < dout.size(); ++i) {
            da[i] += dout[i];
        }
    });
}

namespace {

int normalize_axis(int axis, int rank, const char *op) {
    const int a = axis < 0 ? axis + rank : axis;
    if (a < 0 || a >= rank) {
        throw Error(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                    std::to_string(rank));
    }
    return a;
}

} // namespace

template <typename T>
Var<T> concat(const std::vector<Var<T>> &parts, int axis) {
    if (parts.empty()) {
        throw Error("concat: no inputs");
    }
    Graph<T> &g = parts.front().graph();
    const Shape &s0 = parts.front().shape();
    const int ax = normalize_axis(axis, static_cast<int>(s0.size()), "concat");
    Shape out_shape = s0;
    out_shape[static_cast<std::size_t>(ax)] = 0;
    std::vector<std::int64_t> lens;
    std::vector<int> ids;
    for (const auto &p : parts) {
        if (&p.graph() != &g) {
            throw Error("concat: inputs belong to different graphs");
        }
        const Shape &s = p.shape();
        bool ok = s.size() == s0.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) {
            ok = static_cast<int>(i) == ax || s[i] == s0[i];
        }
        if (!ok) {
            throw Error("concat: shape mismatch " + to_string(s0) + " vs " + to_string(s));
        }
        lens.push_back(s[static_cast<std::size_t>(ax)]);
        out_shape[static_cast<std::size_t>(ax)] += s[static_cast<std::size_t>(ax)];
        ids.push_back(p.id());
    }
    std::int64_t outer = 1;
    for (int i = 0; i < ax; ++i) {
        outer *= s0[static_cast<std::size_t>(i)];
    }
    std::int64_t inner = 1;
    for (std::size_t i = static_cast<std::size_t>(ax) + 1; i < s0.size(); ++i) {
        inner *= s0[i];
    }
    const std::int64_t total_len = out_shape[static_cast<std::size_t>(ax)];
    Tensor<T> out(out_shape);
    std::int64_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto &x = parts[p].value().data;
        const std::int64_t chunk = lens[p] * inner;
        for (std::int64_t o = 0; o < outer; ++o) {
            std::copy_n(x.begin() + o * chunk, chunk, out.data.begin() + o * total_len * inner + offset * inner);
        }
        offset += lens[p];
    }
    return g.record("concat", std::move(out), ids, [=](Graph<T> &gr, int self) {
        const auto &dout = gr.output_grad(self);
        std::int64_t off = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
            const std::int64_t chunk = lens[p] * inner;
            if (gr.requires_grad(ids[p])) {
                auto &dp = gr.grad_buffer(ids[p]);
                for (std::int64_t o = 0; o < outer; ++o) {
                    const T *src = dout.data() + o * total_len * inner + off * inner;
                    T *dst = dp.data() + o * chunk;
                    for (std::int64_t i = 0; i < chunk; ++i) {
                        dst[i] += src[i];
                    }
                }
            }
            off += lens[p];
        }
    });
}

template <typename T>
Var<T> slice(Var<T> a, int axis, std::int64_t begin, std::int64_t end) {
    Graph<T> &g = a.graph();
    const Shape &s = a.shape();
    const int ax = normalize_axis(axis, static_cast<int>(s.size()), "slice");
    const std::int64_t len = s[static_cast<std::size_t>(ax)];
    if (begin < 0 || end > len || begin > end) {
        throw Error("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                    to_string(s) + " axis " + std::to_string(ax));
    }
    std::int64_t outer = 1;
    for (int i = 0; i < ax; ++i) {
        outer *= s[static_cast<std::size_t>(i)];
    }
    std::int64_t inner = 1;
    for (std::size_t i = static_cast<std::size_t>(ax) + 1; i < s.size(); ++i) {
        inner *= s[i];
    }
    Shape out_shape = s;
    out_shape[static_cast<std::size_t>(ax)] = end - begin;
    Tensor<T> out(out_shape);
    const std::int64_t chunk = (end - begin) * inner;
    const auto &x = a.value().data;
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(x.begin() + o * len * inner + begin * inner, chunk, out.data.begin() + o * chunk);
    }
    const int ia = a.id();
    return g.record("slice", std::move(out), {ia}, [=](Graph<T> &gr, int self) {
        const auto &dout = gr.output_grad(self);
        auto &da = gr.grad_buffer(ia);
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t i = 0; i < chunk; ++i) {
                da[static_cast<std::size_t>(o * len * inner + begin * inner + i)] +=
                    dout[static_cast<std::size_t>(o * chunk + i)];
            }
        }
    });
}

template <typename T>
Var<T> index_select(Var<T> a, std::span<const std::int64_t> indices) {
    Graph<T> &g = a.graph();
    const Shape &s = a.shape();
    if (s.empty()) {
        throw Error("index_select: scalar input");
    }
    const std::int64_t rows = s[0];
    const std::int64_t row = rows == 0 ? 0 : a.value().size() / rows;
    for (auto i : indices) {
        if (i < 0 || i >= rows) {
            throw Error("index_select: index " + std::to_string(i) + " out of range for " + to_string(s));
        }
    }
    Shape out_shape = s;
    out_shape[0] = static_cast<std::int64_t>(indices.size());
    Tensor<T> out(out_shape);
    const auto &x = a.value().data;
    for (std::size_t r = 0; r < indices.size(); ++r) {
        std::copy_n(x.begin() + indices[r] * row, row, out.data.begin() + static_cast<std::int64_t>(r) * row);
    }
    const int ia = a.id();
    std::vector<std::int64_t> idx(indices.begin(), indices.end());
    return g.record("index_select", std::move(out), {ia}, [ia, row, idx = std::move(idx)](Graph<T> &gr, int self) {
        const auto &dout = gr.output_grad(self);
        auto &da = gr.grad_buffer(ia);
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const T *src = dout.data() + static_cast<std::int64_t>(r) * row;
            T *dst = da.data() + idx[r] * row;
            for (std::int64_t i = 0; i < row; ++i) {
                dst[i] += src[i];
            }
        }
    });
}

template <typename T>
Var<T> embedding(Var<T> table, std::span<const std::int64_t> ids) {
    if (table.shape().size() != 2) {
        throw Error("embedding: table must be [vocab, dim], got " + to_string(table.shape()));
    }
    return index_select(table, ids);
}

template <typename T>
Var<T> softmax(Var<T> a) {
    Graph<T> &g = a.graph();
    const Shape &s = a.shape();
    if (s.empty()) {
        throw Error("softmax: scalar input");
    }
    const std::int64_t c = s.back();
    const std::int64_t r = c == 0 ? 0 : a.value().size() / c;
    Tensor<T> out(s);
    const auto &x = a.value().data;
    for (std::int64_t i = 0; i < r; ++i) {
        const T *xi = x.data() + i * c;
        T *yi = out.data.data() + i * c;
        const T mx = *std::max_element(xi, xi + c);
        if (!std::isfinite(mx)) {
            throw Error("softmax: fully masked or non-finite row " + std::to_string(i));
        }
        T z = 0;
        for (std::int64_t j = 0; j < c; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            z += yi[j];
        }
        for (std::int64_t j = 0; j < c; ++j) {
            yi[j] /= z;
        }
    }
    const int ia = a.id();
    return g.record("softmax", std::move(out), {ia}, [=](Graph<T> &gr, int self) {
        const auto &dout = gr.output_grad(self);
        const auto &y = gr.value(self).data;
        auto &da = gr.grad_buffer(ia);
        for (std::int64_t i = 0; i < r; ++i) {
            T dot = 0;
            for (std::int64_t j = 0; j < c; ++j) {
                dot += dout[static_cast<std::size_t>(i * c + j)] * y[static_cast<std::size_t>(i * c + j)];
            }
            for (std::int64_t j = 0; j < c; ++j) {
                const auto k = static_cast<std::size_t>(i * c + j);
                da[k] += y[k] * (dout[k] - dot);
            }
        }
    });
}

template <typename T>
Var<T> masked_fill(Var<T> a, const MaskView &mask) {
    Graph<T> &g = a.graph();
    const Shape &s = a.shape();
    const std::int64_t block = mask.queries * mask.keys;
    if (s.size() < 2 || s[s.size() - 2] != mask.queries || s.back() != mask.keys ||
        static_cast<std::int64_t>(mask.allowed.size()) != block) {
        throw Error("masked_fill: mask [" + std::to_string(mask.queries) + ", " + std::to_string(mask.keys) +
                    "] does not fit " + to_string(s));
    }
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        if (!mask.allowed[i % static_cast<std::size_t>(block)]) {
            out.data[i] = -std::numeric_limits<T>::infinity();
        }
    }
    std::vector<std::uint8_t> keep(mask.allowed.begin(), mask.allowed.end());
    const int ia = a.id();
    return g.record("masked_fill", std::move(out), {ia}, [ia, keep = std::move(keep)](Graph<T> &gr, int self) {
        const auto &dout = gr.output_grad(self);
        auto &da = gr.grad_buffer(ia);
        for (std::size_t i = 0; i < dout.size(); ++i) {
            if (keep[i % keep.size()]) {
                da[i] += dout[i];
            }
        }
    });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps) {
    Graph<T> &g = x.graph();
    const Shape &s = x.shape();
    if (s.empty()) {
        throw Error("layer_norm: scalar input");
    }
    const std::int64_t d = s.back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw Error("layer_norm: scale/shift must be [" + std::to_string(d) + "], got " + to_string(gamma.shape()) +
                    " and " + to_string(beta.shape()));
    }
    const std::int64_t r = x.value().size() / d;
    Tensor<T> out(s);
    std::vector<T> xhat(x.value().data.size());
    std::vector<T> rstd(static_cast<std::size_t>(r));
    const auto &xv = x.value().data;
    const auto &gv = gamma.value().data;
    const auto &bv = beta.value().data;
    for (std::int64_t i = 0; i < r; ++i) {
        const T *xi = xv.data() + i * d;
        T mu = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            mu += xi[j];
        }
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::int64_t j = 0; j < d; ++j) {
            var += (xi[j] - mu) * (xi[j] - mu);
        }
        var /= static_cast<T>(d);
        const T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
        rstd[static_cast<std::size_t>(i)] = rs;
        for (std::int64_t j = 0; j < d; ++j) {
            const auto k = static_cast<std::size_t>(i * d + j);
            xhat[k] = (xi[j] - mu) * rs;
            out.data[k] = xhat[k] * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
        }
    }
    const int ix = x.id();
    const int ig = gamma.id();
    const int ib = beta.id();
    return g.record("layer_norm", std::move(out), {ix, ig, ib},
                    [=, xhat = std::move(xhat), rstd = std::move(rstd)](Graph<T> &gr, int self) {
                        const auto &dout = gr.output_grad(self);
                        const auto &gvv = gr.value(ig).data;
                        if (gr.requires_grad(ig) || gr.requires_grad(ib)) {
                            auto &dg = gr.grad_buffer(ig);
                            auto &db = gr.grad_buffer(ib);
                            for (std::int64_t i = 0; i < r; ++i) {
                                for (std::int64_t j = 0; j < d; ++j) {
                                    const auto k = static_cast<std::size_t>(i * d + j);
                                    dg[static_cast<std::size_t>(j)] += dout[k] * xhat[k];
                                    db[static_cast<std::size_t>(j)] += dout[k];
                                }
                            }
                        }
                        if (gr.requires_grad(ix)) {
                            auto &dx = gr.grad_buffer(ix);
                            for (std::int64_t i = 0; i < r; ++i) {
                                T mean_dh = 0;
                                T mean_dh_x = 0;
                                for (std::int64_t j = 0; j < d; ++j) {
                                    const auto k = static_cast<std::size_t>(i * d + j);
                                    const T dh = dout[k] * gvv[static_cast<std::size_t>(j)];
                                    mean_dh += dh;
                                    mean_dh_x += dh * xhat[k];
                                }
                                mean_dh /= static_cast<T>(d);
                                mean_dh_x /= static_cast<T>(d);
                                const T rs = rstd[static_cast<std::size_t>(i)];
                                for (std::int64_t j = 0; j < d; ++j) {
                                    const auto k = static_cast<std::size_t>(i * d + j);
                                    const T dh = dout[k] * gvv[static_cast<std::size_t>(j)];
                                    dx[k] += rs * (dh - mean_dh - xhat[k] * mean_dh_x);
                                }
                            }
                        }
                    });
}

template <typename T>
Var<T> relu(Var<T> a) {
    return unary(a, "relu", [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> gelu(Var<T> a) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    static constexpr T k0 = static_cast<T>(0.7978845608028654); // sqrt(2/pi)
    static constexpr T k1 = static_cast<T>(0.044715);
    Graph<T> &g = a.graph();
    const Tensor<T> &ta = a.value();
    const auto n = static_cast<Eigen::Index>(ta.data.size());
    const Eigen::Map<const Arr> x(ta.data.data(), n);
    // The inner tanh is kept for the backward pass.
    auto t = std::make_shared<std::vector<T>>(ta.data.size());
    Eigen::Map<Arr> tv(t->data(), n);
    tv = (k0 * (x + k1 * x.cube())).tanh();
    Tensor<T> out(ta.shape);
    Eigen::Map<Arr>(out.data.data(), n) = T(0.5) * x * (T(1) + tv);
    const int ia = a.id();
    return g.record("gelu", std::move(out), {ia}, [ia, t, n](Graph<T> &gr, int self) {
        const Eigen::Map<const Arr> dout(gr.output_grad(self).data(), n);
        const Eigen::Map<const Arr> xv(gr.value(ia).data.data(), n);
        const Eigen::Map<const Arr> tt(t->data(), n);
        Eigen::Map<Arr> da(gr.grad_buffer(ia).data(), n);
        da += dout * (T(0.5) * (T(1) + tt) + T(0.5) * xv * (T(1) - tt.square()) * k0 * (T(1) + T(3) * k1 * xv.square()));
    });
}

template <typename T>
Var<T> tanh(Var<T> a) {
    return unary(a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    return unary(
        a, "sigmoid",
        [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> smooth_l1(Var<T> diff) {
    return unary(
        diff, "smooth_l1",
        [](T x) { return std::abs(x) < T(1) ? T(0.5) * x * x : std::abs(x) - T(0.5); },
        [](T x, T) { return std::abs(x) < T(1) ? x : (x > T(0) ? T(1) : T(-1)); });
}

template <typename T>
Var<T> sum(Var<T> a) {
    Graph<T> &g = a.graph();
    // Extended accumulator: the result is within one rounding of the exact sum
    // for the sizes used here, which keeps finite differences clean.
    long double acc = 0;
    for (T v : a.value().data) {
        acc += v;
    }
    const int ia = a.id();
    return g.record("sum", Tensor<T>(Shape{}, std::vector<T>{static_cast<T>(acc)}), {ia}, [ia](Graph<T> &gr, int self) {
        const T d = gr.output_grad(self)[0];
        for (auto &v : gr.grad_buffer(ia)) {
            v += d;
        }
    });
}

template <typename T>
Var<T> mean(Var<T> a) {
    const std::int64_t n = a.value().size();
    if (n == 0) {
        throw Error("mean: empty tensor");
    }
    return scale(sum(a), 1.0 / static_cast<double>(n));
}

template <typename T>
Var<T> bce(Var<T> prob, Var<T> target) {
    Graph<T> &g = prob.graph();
    if (prob.shape() != target.shape()) {
        throw Error("bce: shape mismatch " + to_string(prob.shape()) + " vs " + to_string(target.shape()));
    }
    constexpr T lo = static_cast<T>(kBceEpsilon);
    constexpr T hi = T(1) - static_cast<T>(kBceEpsilon);
    const auto &p = prob.value().data;
    const auto &y = target.value().data;
    Tensor<T> out(prob.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
        const T pc = std::clamp(p[i], lo, hi);
        out.data[i] = -(y[i] * std::log(pc) + (T(1) - y[i]) * std::log(T(1) - pc));
    }
    const int ip = prob.id();
    const int iy = target.id();
    return g.record("bce", std::move(out), {ip, iy}, [=](Graph<T> &gr, int self) {
        const auto &dout = gr.output_grad(self);
        const auto &pv = gr.value(ip).data;
        const auto &yv = gr.value(iy).data;
        if (gr.requires_grad(ip)) {
            auto &dp = gr.grad_buffer(ip);
            for (std::size_t i = 0; i < pv.size(); ++i) {
                if (pv[i] > lo && pv[i] < hi) {
                    dp[i] += dout[i] * (-yv[i] / pv[i] + (T(1) - yv[i]) / (T(1) - pv[i]));
                }
            }
        }
        if (gr.requires_grad(iy)) {
            auto &dy = gr.grad_buffer(iy);
            for (std::size_t i = 0; i < pv.size(); ++i) {
                const T pc = std::clamp(pv[i], lo, hi);
                dy[i] += dout[i] * (std::log(T(1) - pc) - std::log(pc));
            }
        }
    });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, const MaskView *mask) {
    Graph<T> &g = q.graph();
    const Shape &sq = q.shape();
    const Shape &sk = k.shape();
    if (sq.size() != 3 || sk.size() != 3 || v.shape() != sk || sq[0] != sk[0] || sq[2] != sk[2]) {
        throw Error("attention: expected q [B, Lq, D] and k == v [B, Lk, D], got " + to_string(sq) + ", " +
                    to_string(sk) + ", " + to_string(v.shape()));
    }
    const std::int64_t batch = sq[0];
    const std::int64_t lq = sq[1];
    const std::int64_t lk = sk[1];
    const std::int64_t dm = sq[2];
    if (heads < 1 || dm % heads != 0) {
        throw Error("attention: width " + std::to_string(dm) + " not divisible by " + std::to_string(heads) +
                    " heads");
    }
    if (mask != nullptr && (mask->queries != lq || mask->keys != lk ||
                            static_cast<std::int64_t>(mask->allowed.size()) != lq * lk)) {
        throw Error("attention: mask does not match [" + std::to_string(lq) + ", " + std::to_string(lk) + "]");
    }
    const std::int64_t dh = dm / heads;
    const T sc = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<std::uint8_t> allowed;
    if (mask != nullptr) {
        allowed.assign(mask->allowed.begin(), mask->allowed.end());
        for (std::int64_t i = 0; i < lq; ++i) {
            if (std::none_of(allowed.begin() + i * lk, allowed.begin() + (i + 1) * lk,
                             [](std::uint8_t x) { return x != 0; })) {
                throw Error("attention: query row " + std::to_string(i) + " is fully masked");
            }
        }
    }
    // probs: [B, H, Lq, Lk]
    std::vector<T> probs(static_cast<std::size_t>(batch * heads * lq * lk));
    Tensor<T> out(Shape{batch, lq, dm});
    const T *pq = q.value().data.data();
    const T *pk = k.value().data.data();
    const T *pv = v.value().data.data();
    const Eigen::OuterStride<> stride(dm);
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t h = 0; h < heads; ++h) {
            ConstStrided<T> qh(pq + b * lq * dm + h * dh, lq, dh, stride);
            ConstStrided<T> kh(pk + b * lk * dm + h * dh, lk, dh, stride);
            ConstStrided<T> vh(pv + b * lk * dm + h * dh, lk, dh, stride);
            T *pp = probs.data() + (b * heads + h) * lq * lk;
            MutMap<T> p(pp, lq, lk);
            p.noalias() = (qh * kh.transpose()) * sc;
            for (std::int64_t i = 0; i < lq; ++i) {
                T mx = -std::numeric_limits<T>::infinity();
                for (std::int64_t j = 0; j < lk; ++j) {
                    if (allowed.empty() || allowed[static_cast<std::size_t>(i * lk + j)]) {
                        mx = std::max(mx, pp[i * lk + j]);
                    }
                }
                T z = 0;
                for (std::int64_t j = 0; j < lk; ++j) {
                    T &e = pp[i * lk + j];
                    if (allowed.empty() || allowed[static_cast<std::size_t>(i * lk + j)]) {
                        e = std::exp(e - mx);
                        z += e;
                    } else {
                        e = 0;
                    }
                }
                for (std::int64_t j = 0; j < lk; ++j) {
                    pp[i * lk + j] /= z;
                }
            }
            MutStrided<T> oh(out.data.data() + b * lq * dm + h * dh, lq, dh, stride);
            oh.noalias() = p * vh;
        }
    }
    const int iq = q.id();
    const int ik = k.id();
    const int iv = v.id();
    return g.record("attention", std::move(out), {iq, ik, iv}, [=, probs = std::move(probs)](Graph<T> &gr, int self) {
        const T *dout = gr.output_grad(self).data();
        const T *qv = gr.value(iq).data.data();
        const T *kv = gr.value(ik).data.data();
        const T *vv = gr.value(iv).data.data();
        T *dq = gr.requires_grad(iq) ? gr.grad_buffer(iq).data() : nullptr;
        T *dk = gr.requires_grad(ik) ? gr.grad_buffer(ik).data() : nullptr;
        T *dv = gr.requires_grad(iv) ? gr.grad_buffer(iv).data() : nullptr;
        const Eigen::OuterStride<> st(dm);
        RowMat<T> ds(lq, lk);
        for (std::int64_t b = 0; b < batch; ++b) {
            for (std::int64_t h = 0; h < heads; ++h) {
                ConstMap<T> p(probs.data() + (b * heads + h) * lq * lk, lq, lk);
                ConstStrided<T> doh(dout + b * lq * dm + h * dh, lq, dh, st);
                ConstStrided<T> qh(qv + b * lq * dm + h * dh, lq, dh, st);
                ConstStrided<T> kh(kv + b * lk * dm + h * dh, lk, dh, st);
                ConstStrided<T> vh(vv + b * lk * dm + h * dh, lk, dh, st);
                if (dv != nullptr) {
                    MutStrided<T>(dv + b * lk * dm + h * dh, lk, dh, st).noalias() += p.transpose() * doh;
                }
                if (dq == nullptr && dk == nullptr) {
                    continue;
                }
                ds.noalias() = doh * vh.transpose();
                for (std::int64_t i = 0; i < lq; ++i) {
                    const T dot = ds.row(i).dot(p.row(i));
                    ds.row(i) = (p.row(i).array() * (ds.row(i).array() - dot)).matrix();
                }
                if (dq != nullptr) {
                    MutStrided<T>(dq + b * lq * dm + h * dh, lq, dh, st).noalias() += (ds * kh) * sc;
                }
                if (dk != nullptr) {
                    MutStrided<T>(dk + b * lk * dm + h * dh, lk, dh, st).noalias() += (ds.transpose() * qh) * sc;
                }
            }
        }
    });
}

#define PIDM_INSTANTIATE_OPS(T)                                                                                \
    template Var<T> add(Var<T>, Var<T>);                                                                       \
    template Var<T> sub(Var<T>, Var<T>);                                                                       \
    template Var<T> mul(Var<T>, Var<T>);                                                                       \
    template Var<T> scale(Var<T>, double);                                                                     \
    template Var<T> add_scalar(Var<T>, double);                                                                \
    template Var<T> matmul(Var<T>, Var<T>);                                                                    \
    template Var<T> transpose(Var<T>);                                                                         \
    template Var<T> reshape(Var<T>, Shape);                                                                    \
    template Var<T> concat(const std::vector<Var<T>> &, int);                                                  \
    template Var<T> slice(Var<T>, int, std::int64_t, std::int64_t);                                            \
    template Var<T> index_select(Var<T>, std::span<const std::int64_t>);                                       \
    template Var<T> embedding(Var<T>, std::span<const std::int64_t>);                                          \
    template Var<T> softmax(Var<T>);                                                                           \
    template Var<T> masked_fill(Var<T>, const MaskView &);                                                     \
    template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, double);                                                \
    template Var<T> relu(Var<T>);                                                                              \
    template Var<T> gelu(Var<T>);                                                                              \
    template Var<T> tanh(Var<T>);                                                                              \
    template Var<T> sigmoid(Var<T>);                                                                           \
    template Var<T> sum(Var<T>);                                                                               \
    template Var<T> mean(Var<T>);                                                                              \
    template Var<T> smooth_l1(Var<T>);                                                                         \
    template Var<T> bce(Var<T>, Var<T>);                                                                       \
    template Var<T> attention(Var<T>, Var<T>, Var<T>, int, const MaskView *);

PIDM_INSTANTIATE_OPS(float)
PIDM_INSTANTIATE_OPS(double)

#undef PIDM_INSTANTIATE_OPS

} // namespace pidm

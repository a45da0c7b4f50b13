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
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pidm {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape &shape);
std::string to_string(const Shape &shape);

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

// Dense row-major array.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0));
    Tensor(Shape s, std::vector<T> values);

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    // Negative indices count from the back.
    std::int64_t dim(int i) const;

    bool operator==(const Tensor &) const = default;
};

template <typename T>
class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
class Var {
public:
    Var() = default;
    Var(Graph<T> *graph, int id) : graph_(graph), id_(id) {}

    Graph<T> &graph() const;
    int id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }
    const Tensor<T> &value() const;
    const Shape &shape() const { return value().shape; }
    std::int64_t dim(int i) const { return value().dim(i); }

private:
    Graph<T> *graph_ = nullptr;
    int id_ = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so the node list
// is topologically sorted by construction.
template <typename T>
class Graph {
public:
    using BackwardFn = std::function<void(Graph &, int)>;

    Graph() = default;
    Graph(const Graph &) = delete;
    Graph &operator=(const Graph &) = delete;

    Var<T> constant(Tensor<T> value);
    Var<T> parameter(Tensor<T> value);

    // Appends an op result. `backward` is dropped when no input needs a gradient.
    Var<T> record(const char *op, Tensor<T> value, std::vector<int> inputs, BackwardFn backward);

    const Tensor<T> &value(int id) const { return nodes_.at(id).value; }
    bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
    const std::vector<int> &inputs(int id) const { return nodes_.at(id).inputs; }
    const char *op(int id) const { return nodes_.at(id).op; }
    std::size_t size() const { return nodes_.size(); }

    // Gradient of the last backward() target with respect to node `id`.
    // Nodes the loss does not depend on get a zero tensor.
    Tensor<T> grad(int id) const;

    // Accumulation buffer used by backward closures; allocated on first use.
    std::vector<T> &grad_buffer(int id);
    const std::vector<T> &output_grad(int id) const { return nodes_.at(id).grad; }

    void backward(Var<T> loss);

private:
    struct Node {
        const char *op = "";
        Tensor<T> value;
        std::vector<int> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        std::vector<T> grad;
    };
    std::vector<Node> nodes_;
};

// Boolean attendability matrix shared across the batch: allowed[q * keys + k].
struct MaskView {
    std::span<const std::uint8_t> allowed;
    std::int64_t queries = 0;
    std::int64_t keys = 0;
};

// Elementwise arithmetic. Shapes must match, or one operand's shape must be a
// suffix of the other's (broadcast over leading dims).
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, double factor);
template <typename T> Var<T> add_scalar(Var<T> a, double value);

template <typename T> Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <typename T> Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <typename T> Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }

// a: [..., M, K]; b: [K, N] (shared) or [..., K, N] with a's leading dims.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// Swaps the last two dims.
template <typename T> Var<T> transpose(Var<T> a);
// One entry of `shape` may be -1.
template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> concat(const std::vector<Var<T>> &parts, int axis);
template <typename T> Var<T> slice(Var<T> a, int axis, std::int64_t begin, std::int64_t end);
// Gathers along dim 0; indices may repeat (gradients accumulate).
template <typename T> Var<T> index_select(Var<T> a, std::span<const std::int64_t> indices);
template <typename T> Var<T> embedding(Var<T> table, std::span<const std::int64_t> ids);

template <typename T> Var<T> softmax(Var<T> a);
// Writes -inf wherever the mask (broadcast over leading dims) is 0.
template <typename T> Var<T> masked_fill(Var<T> a, const MaskView &mask);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, double eps = 1e-5);

template <typename T> Var<T> relu(Var<T> a);
// tanh approximation used by GPT-2.
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> tanh(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);

template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

// Huber with transition at |x| = 1.
template <typename T> Var<T> smooth_l1(Var<T> diff);
inline constexpr double kBceEpsilon = 1e-7;
// -(y log p + (1 - y) log(1 - p)) with p clamped to [eps, 1 - eps].
template <typename T> Var<T> bce(Var<T> prob, Var<T> target);

// Multi-head scaled dot-product attention. q: [B, Lq, D], k and v: [B, Lk, D].
// Heads split D evenly. The optional mask is [Lq, Lk]; a fully masked row is an error.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, const MaskView *mask = nullptr);

} // namespace pidm

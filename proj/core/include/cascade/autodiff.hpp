#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "cascade/kernels.hpp"
#include "cascade/tensor.hpp"

namespace cascade {

/// Learnable state. `decay` is false for parameters exempt from weight decay
/// (importance scores, batch-norm offsets).
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
    bool decay = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, bool decays = true)
        : name(std::move(n)), value(std::move(v)), grad(Tensor<T>::zeros(value.shape())), decay(decays) {}

    void zero_grad() { grad = Tensor<T>::zeros(value.shape()); }
};

enum class OpKind {
    constant,
    parameter,
    conv2d,
    channel_scale,
    dense,
    batch_norm,
    relu,
    max_pool,
    global_avg_pool,
    flatten,
    add,
    scale,
    sum,
    softmax_cross_entropy,
    kd_loss,
    mse_loss,
};

const char* op_name(OpKind op);

template <typename T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    std::size_t id = 0;

    const Tensor<T>& value() const;
    /// Gradient of the last backward() loss w.r.t. this node; zeros if unreached.
    Tensor<T> grad() const;
    const Shape& shape() const { return value().shape(); }
};

template <typename T>
struct Node {
    using BackwardFn = std::function<void(Graph<T>&, const Node&)>;

    OpKind op = OpKind::constant;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;  // empty until reached by backward
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
};

/// Reverse-mode tape. Node ids are assigned in creation order, which is a
/// topological order; backward() walks them in reverse.
template <typename T>
class Graph {
public:
    using BackwardFn = typename Node<T>::BackwardFn;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var<T> constant(Tensor<T> value);
    /// Leaf bound to `p`; backward() adds into p.grad.
    Var<T> parameter(Parameter<T>& p);

    Var<T> record(OpKind op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn fn);

    /// Populates node gradients and accumulates parameter gradients.
    /// Throws ShapeError unless `loss` holds exactly one element.
    void backward(Var<T> loss);

    const Node<T>& node(std::size_t id) const { return nodes_.at(id); }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Zero-initialized on first access; used by backward functions to accumulate.
    Tensor<T>& grad_buffer(std::size_t id);

private:
    std::vector<Node<T>> nodes_;
};

template <typename T>
struct BatchNormState {
    Parameter<T> gamma;
    Parameter<T> beta;
    Tensor<T> running_mean;
    Tensor<T> running_var;

    BatchNormState() = default;
    BatchNormState(const std::string& prefix, std::size_t channels);
};

enum class Mode { train, eval };

struct BatchNormConfig {
    double momentum = 0.9;  // weight on the previous running value
    double epsilon = 1e-5;
};

template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, long stride, Padding padding);
/// Multiplies channel c of an N,C,H,W tensor by scale[c]; the scale is constant.
template <typename T> Var<T> channel_scale(Var<T> x, const Tensor<T>& scale);
template <typename T> Var<T> dense(Var<T> x, Var<T> w);
/// Train mode normalizes with batch statistics and updates `state` running
/// statistics; eval mode uses the running statistics.
template <typename T>
Var<T> batch_norm(Var<T> x, BatchNormState<T>& state, Var<T> gamma, Var<T> beta, Mode mode,
                  const BatchNormConfig& cfg = {});
template <typename T> Var<T> relu(Var<T> x);
/// Valid-mode pooling; backward routes to the first maximum in scan order.
template <typename T> Var<T> max_pool(Var<T> x, std::size_t kernel, std::size_t stride);
template <typename T> Var<T> global_avg_pool(Var<T> x);
template <typename T> Var<T> flatten(Var<T> x);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T factor);
template <typename T> Var<T> sum(Var<T> a);

/// Mean over the batch of -sum(labels * log_softmax(logits)). Rows of
/// `labels` must sum to 1.
template <typename T> Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& labels);
/// tau^2 * mean_n KL(softmax(teacher/tau) || softmax(student/tau)); teacher is constant.
template <typename T> Var<T> kd_loss(Var<T> student, const Tensor<T>& teacher, T tau);
/// Mean squared elementwise error against a constant target.
template <typename T> Var<T> mse_loss(Var<T> a, const Tensor<T>& target);

/// Numerically stable row softmax of [N,K] logits divided by `tau`.
template <typename T> Tensor<T> softmax_rows(const Tensor<T>& logits, T tau = T(1));

}  // namespace cascade

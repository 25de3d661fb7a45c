#include "cascade/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cascade {

const char* op_name(OpKind op) {
    switch (op) {
        case OpKind::constant: return "constant";
        case OpKind::parameter: return "parameter";
        case OpKind::conv2d: return "conv2d";
        case OpKind::channel_scale: return "channel_scale";
        case OpKind::dense: return "dense";
        case OpKind::batch_norm: return "batch_norm";
        case OpKind::relu: return "relu";
        case OpKind::max_pool: return "max_pool";
        case OpKind::global_avg_pool: return "global_avg_pool";
        case OpKind::flatten: return "flatten";
        case OpKind::add: return "add";
        case OpKind::scale: return "scale";
        case OpKind::sum: return "sum";
        case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
        case OpKind::kd_loss: return "kd_loss";
        case OpKind::mse_loss: return "mse_loss";
    }
    return "unknown";
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return graph->node(id).value;
}

template <typename T>
Tensor<T> Var<T>::grad() const {
    const auto& n = graph->node(id);
    return n.grad.empty() ? Tensor<T>::zeros(n.value.shape()) : n.grad;
}

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
    Node<T> n;
    n.op = OpKind::constant;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::parameter(Parameter<T>& p) {
    Node<T> n;
    n.op = OpKind::parameter;
    n.value = p.value;
    n.requires_grad = p.trainable;
    n.param = &p;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Graph<T>::record(OpKind op, std::vector<std::size_t> inputs, Tensor<T> value, BackwardFn fn) {
    Node<T> n;
    n.op = op;
    n.value = std::move(value);
    for (auto id : inputs) n.requires_grad = n.requires_grad || nodes_.at(id).requires_grad;
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <typename T>
Tensor<T>& Graph<T>::grad_buffer(std::size_t id) {
    auto& n = nodes_.at(id);
    if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
    return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
    if (loss.graph != this) throw ShapeError("backward: loss belongs to a different graph");
    if (nodes_.at(loss.id).value.numel() != 1)
        throw ShapeError("backward requires a scalar loss, got shape " +
                         shape_str(nodes_[loss.id].value.shape()));
    for (auto& n : nodes_) n.grad = Tensor<T>();
    grad_buffer(loss.id).fill(T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        const Node<T>& n = nodes_[i];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.backward) n.backward(*this, n);
        if (n.param) n.param->grad += n.grad;
    }
}

template <typename T>
BatchNormState<T>::BatchNormState(const std::string& prefix, std::size_t channels)
    : gamma(prefix + "/gamma", Tensor<T>::ones({channels}), true),
      beta(prefix + "/beta", Tensor<T>::zeros({channels}), false),
      running_mean(Tensor<T>::zeros({channels})),
      running_var(Tensor<T>::ones({channels})) {}

namespace {

template <typename T>
Graph<T>& graph_of(Var<T> a) {
    if (!a.graph) throw ShapeError("operation on a detached variable");
    return *a.graph;
}

template <typename T>
void same_graph(Var<T> a, Var<T> b) {
    if (a.graph != b.graph) throw ShapeError("operands belong to different graphs");
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, long stride, Padding padding) {
    same_graph(x, w);
    auto& g = graph_of(x);
    const ConvGeometry geo = conv_geometry(x.shape(), w.shape(), stride, padding);
    Tensor<T> y = conv2d_forward(x.value(), w.value(), geo);
    return g.record(OpKind::conv2d, {x.id, w.id}, std::move(y), [geo](Graph<T>& gr, const Node<T>& self) {
        const auto xi = self.inputs[0], wi = self.inputs[1];
        Tensor<T> dx, dw;
        const bool need_x = gr.requires_grad(xi), need_w = gr.requires_grad(wi);
        conv2d_backward(gr.node(xi).value, gr.node(wi).value, self.grad, geo, need_x ? &dx : nullptr,
                        need_w ? &dw : nullptr);
        if (need_x) gr.grad_buffer(xi) += dx;
        if (need_w) gr.grad_buffer(wi) += dw;
    });
}

template <typename T>
Var<T> channel_scale(Var<T> x, const Tensor<T>& scale_by) {
    auto& g = graph_of(x);
    const auto& s = x.shape();
    if (s.size() != 4 || scale_by.numel() != s[1])
        throw ShapeError("channel_scale: " + std::to_string(scale_by.numel()) + " factors for input " +
                         shape_str(s));
    const std::size_t plane = s[2] * s[3];
    Tensor<T> y = x.value();
    for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t c = 0; c < s[1]; ++c) {
            T* p = y.data().data() + (n * s[1] + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) p[i] *= scale_by[c];
        }
    return g.record(OpKind::channel_scale, {x.id}, std::move(y),
                    [scale_by, s, plane](Graph<T>& gr, const Node<T>& self) {
                        auto& dx = gr.grad_buffer(self.inputs[0]);
                        for (std::size_t n = 0; n < s[0]; ++n)
                            for (std::size_t c = 0; c < s[1]; ++c) {
                                const std::size_t off = (n * s[1] + c) * plane;
                                for (std::size_t i = 0; i < plane; ++i) dx[off + i] += self.grad[off + i] * scale_by[c];
                            }
                    });
}

template <typename T>
Var<T> dense(Var<T> x, Var<T> w) {
    same_graph(x, w);
    auto& g = graph_of(x);
    Tensor<T> y = matmul(x.value(), w.value());
    return g.record(OpKind::dense, {x.id, w.id}, std::move(y), [](Graph<T>& gr, const Node<T>& self) {
        const auto xi = self.inputs[0], wi = self.inputs[1];
        const auto& xv = gr.node(xi).value;
        const auto& wv = gr.node(wi).value;
        const std::size_t n = xv.dim(0), d = xv.dim(1), m = wv.dim(1);
        if (gr.requires_grad(xi)) {
            auto& dx = gr.grad_buffer(xi);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < d; ++k) {
                    T s = T(0);
                    for (std::size_t j = 0; j < m; ++j) s += self.grad[i * m + j] * wv[k * m + j];
                    dx[i * d + k] += s;
                }
        }
        if (gr.requires_grad(wi)) {
            auto& dw = gr.grad_buffer(wi);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < d; ++k) {
                    const T a = xv[i * d + k];
                    for (std::size_t j = 0; j < m; ++j) dw[k * m + j] += a * self.grad[i * m + j];
                }
        }
    });
}

template <typename T>
Var<T> batch_norm(Var<T> x, BatchNormState<T>& state, Var<T> gamma, Var<T> beta, Mode mode,
                  const BatchNormConfig& cfg) {
    same_graph(x, gamma);
    same_graph(x, beta);
    auto& g = graph_of(x);
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("batch_norm input must be N,C,H,W, got " + shape_str(s));
    const std::size_t N = s[0], C = s[1], plane = s[2] * s[3], M = N * plane;
    if (gamma.value().numel() != C || beta.value().numel() != C || state.running_mean.numel() != C ||
        state.running_var.numel() != C)
        throw ShapeError("batch_norm state length does not match " + std::to_string(C) + " channels");
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();
    const T eps = static_cast<T>(cfg.epsilon);

    Tensor<T> mean({C}), invstd({C});
    if (mode == Mode::train) {
        const T mom = static_cast<T>(cfg.momentum);
        for (std::size_t c = 0; c < C; ++c) {
            T acc = T(0);
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = xv.data().data() + (n * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) acc += p[i];
            }
            const T mu = acc / static_cast<T>(M);
            T var = T(0);
            for (std::size_t n = 0; n < N; ++n) {
                const T* p = xv.data().data() + (n * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mu) * (p[i] - mu);
            }
            var /= static_cast<T>(M);
            mean[c] = mu;
            invstd[c] = T(1) / std::sqrt(var + eps);
            const T unbiased = M > 1 ? var * static_cast<T>(M) / static_cast<T>(M - 1) : var;
            state.running_mean[c] = mom * state.running_mean[c] + (T(1) - mom) * mu;
            state.running_var[c] = mom * state.running_var[c] + (T(1) - mom) * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mean[c] = state.running_mean[c];
            invstd[c] = T(1) / std::sqrt(state.running_var[c] + eps);
        }
    }

    Tensor<T> xhat(s), y(s);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t off = (n * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const T h = (xv[off + i] - mean[c]) * invstd[c];
                xhat[off + i] = h;
                y[off + i] = gv[c] * h + bv[c];
            }
        }

    return g.record(OpKind::batch_norm, {x.id, gamma.id, beta.id}, std::move(y),
                    [xhat = std::move(xhat), invstd, mode, N, C, plane, M](Graph<T>& gr, const Node<T>& self) {
                        const auto xi = self.inputs[0], gi = self.inputs[1], bi = self.inputs[2];
                        const auto& gv = gr.node(gi).value;
                        Tensor<T> dgamma({C}), dbeta({C});
                        for (std::size_t c = 0; c < C; ++c) {
                            T sg = T(0), sb = T(0);
                            for (std::size_t n = 0; n < N; ++n) {
                                const std::size_t off = (n * C + c) * plane;
                                for (std::size_t i = 0; i < plane; ++i) {
                                    sb += self.grad[off + i];
                                    sg += self.grad[off + i] * xhat[off + i];
                                }
                            }
                            dgamma[c] = sg;
                            dbeta[c] = sb;
                        }
                        if (gr.requires_grad(xi)) {
                            auto& dx = gr.grad_buffer(xi);
                            for (std::size_t c = 0; c < C; ++c) {
                                const T k = gv[c] * invstd[c];
                                const T mdb = dbeta[c] / static_cast<T>(M);
                                const T mdg = dgamma[c] / static_cast<T>(M);
                                for (std::size_t n = 0; n < N; ++n) {
                                    const std::size_t off = (n * C + c) * plane;
                                    for (std::size_t i = 0; i < plane; ++i) {
                                        if (mode == Mode::train)
                                            dx[off + i] += k * (self.grad[off + i] - mdb - xhat[off + i] * mdg);
                                        else
                                            dx[off + i] += k * self.grad[off + i];
                                    }
                                }
                            }
                        }
                        if (gr.requires_grad(gi)) gr.grad_buffer(gi) += dgamma;
                        if (gr.requires_grad(bi)) gr.grad_buffer(bi) += dbeta;
                    });
}

template <typename T>
Var<T> relu(Var<T> x) {
    auto& g = graph_of(x);
    Tensor<T> y = x.value();
    for (auto& v : y.data()) v = v > T(0) ? v : T(0);
    return g.record(OpKind::relu, {x.id}, std::move(y), [](Graph<T>& gr, const Node<T>& self) {
        auto& dx = gr.grad_buffer(self.inputs[0]);
        for (std::size_t i = 0; i < dx.numel(); ++i)
            if (self.value[i] > T(0)) dx[i] += self.grad[i];
    });
}

template <typename T>
Var<T> max_pool(Var<T> x, std::size_t kernel, std::size_t stride) {
    auto& g = graph_of(x);
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("max_pool input must be N,C,H,W, got " + shape_str(s));
    if (kernel < 1) throw ShapeError("max_pool kernel must be >= 1");
    const std::size_t oh = conv_out_extent(s[2], kernel, stride, Padding::valid);
    const std::size_t ow = conv_out_extent(s[3], kernel, stride, Padding::valid);
    Tensor<T> y({s[0], s[1], oh, ow});
    std::vector<std::size_t> argmax(y.numel());
    const auto& xv = x.value();
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc) {
        const std::size_t base = nc * s[2] * s[3];
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j, ++o) {
                std::size_t best = base + (i * stride) * s[3] + j * stride;
                for (std::size_t a = 0; a < kernel; ++a)
                    for (std::size_t b = 0; b < kernel; ++b) {
                        const std::size_t idx = base + (i * stride + a) * s[3] + j * stride + b;
                        if (xv[idx] > xv[best]) best = idx;  // strict: first maximum wins
                    }
                argmax[o] = best;
                y[o] = xv[best];
            }
    }
    return g.record(OpKind::max_pool, {x.id}, std::move(y),
                    [argmax = std::move(argmax)](Graph<T>& gr, const Node<T>& self) {
                        auto& dx = gr.grad_buffer(self.inputs[0]);
                        for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += self.grad[i];
                    });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
    auto& g = graph_of(x);
    const auto& s = x.shape();
    if (s.size() != 4) throw ShapeError("global_avg_pool input must be N,C,H,W, got " + shape_str(s));
    const std::size_t plane = s[2] * s[3];
    Tensor<T> y({s[0], s[1]});
    for (std::size_t nc = 0; nc < s[0] * s[1]; ++nc) {
        T acc = T(0);
        for (std::size_t i = 0; i < plane; ++i) acc += x.value()[nc * plane + i];
        y[nc] = acc / static_cast<T>(plane);
    }
    return g.record(OpKind::global_avg_pool, {x.id}, std::move(y), [plane](Graph<T>& gr, const Node<T>& self) {
        auto& dx = gr.grad_buffer(self.inputs[0]);
        for (std::size_t nc = 0; nc < self.value.numel(); ++nc) {
            const T share = self.grad[nc] / static_cast<T>(plane);
            for (std::size_t i = 0; i < plane; ++i) dx[nc * plane + i] += share;
        }
    });
}

template <typename T>
Var<T> flatten(Var<T> x) {
    auto& g = graph_of(x);
    const auto& s = x.shape();
    const std::size_t n = s[0];
    Tensor<T> y = x.value().reshaped({n, x.value().numel() / n});
    return g.record(OpKind::flatten, {x.id}, std::move(y), [](Graph<T>& gr, const Node<T>& self) {
        auto& dx = gr.grad_buffer(self.inputs[0]);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += self.grad[i];
    });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    same_graph(a, b);
    auto& g = graph_of(a);
    if (a.shape() != b.shape())
        throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> y = a.value();
    y += b.value();
    return g.record(OpKind::add, {a.id, b.id}, std::move(y), [](Graph<T>& gr, const Node<T>& self) {
        for (auto in : self.inputs)
            if (gr.requires_grad(in)) gr.grad_buffer(in) += self.grad;
    });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
    auto& g = graph_of(a);
    Tensor<T> y = a.value();
    for (auto& v : y.data()) v *= factor;
    return g.record(OpKind::scale, {a.id}, std::move(y), [factor](Graph<T>& gr, const Node<T>& self) {
        auto& dx = gr.grad_buffer(self.inputs[0]);
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += self.grad[i] * factor;
    });
}

template <typename T>
Var<T> sum(Var<T> a) {
    auto& g = graph_of(a);
    T acc = T(0);
    for (auto v : a.value().data()) acc += v;
    return g.record(OpKind::sum, {a.id}, Tensor<T>::scalar(acc), [](Graph<T>& gr, const Node<T>& self) {
        auto& dx = gr.grad_buffer(self.inputs[0]);
        for (auto& v : dx.data()) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits, T tau) {
    if (logits.rank() != 2) throw ShapeError("softmax expects [N,K], got " + shape_str(logits.shape()));
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    Tensor<T> p(logits.shape());
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = logits.data().data() + i * k;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, row[j] / tau);
        T z = T(0);
        for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] / tau - mx);
        for (std::size_t j = 0; j < k; ++j) p[i * k + j] = std::exp(row[j] / tau - mx) / z;
    }
    return p;
}

namespace {

// log_softmax of row i of logits / tau
template <typename T>
void log_softmax_row(const T* row, std::size_t k, T tau, T* out) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, row[j] / tau);
    T z = T(0);
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] / tau - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) out[j] = row[j] / tau - lse;
}

}  // namespace

template <typename T>
Var<T> softmax_cross_entropy(Var<T> logits, const Tensor<T>& labels) {
    auto& g = graph_of(logits);
    if (logits.shape().size() != 2 || logits.shape() != labels.shape())
        throw ShapeError("softmax_cross_entropy shape mismatch: " + shape_str(logits.shape()) + " vs " +
                         shape_str(labels.shape()));
    const std::size_t n = labels.dim(0), k = labels.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < k; ++j) s += labels[i * k + j];
        if (std::abs(s - 1.0) > 1e-5)
            throw ShapeError("label row " + std::to_string(i) + " sums to " + std::to_string(s) + ", expected 1");
    }
    std::vector<T> logp(k);
    T loss = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        log_softmax_row(logits.value().data().data() + i * k, k, T(1), logp.data());
        for (std::size_t j = 0; j < k; ++j)
            if (labels[i * k + j] != T(0)) loss -= labels[i * k + j] * logp[j];
    }
    loss /= static_cast<T>(n);
    return g.record(OpKind::softmax_cross_entropy, {logits.id}, Tensor<T>::scalar(loss),
                    [labels](Graph<T>& gr, const Node<T>& self) {
                        const auto li = self.inputs[0];
                        const auto p = softmax_rows(gr.node(li).value, T(1));
                        auto& dx = gr.grad_buffer(li);
                        const T scale_by = self.grad[0] / static_cast<T>(labels.dim(0));
                        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += (p[i] - labels[i]) * scale_by;
                    });
}

template <typename T>
Var<T> kd_loss(Var<T> student, const Tensor<T>& teacher, T tau) {
    auto& g = graph_of(student);
    if (student.shape().size() != 2 || student.shape() != teacher.shape())
        throw ShapeError("kd_loss shape mismatch: " + shape_str(student.shape()) + " vs " +
                         shape_str(teacher.shape()));
    if (!(tau > T(0))) throw ShapeError("kd_loss temperature must be positive");
    const std::size_t n = teacher.dim(0), k = teacher.dim(1);
    std::vector<T> ls(k), lt(k);
    T loss = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        log_softmax_row(student.value().data().data() + i * k, k, tau, ls.data());
        log_softmax_row(teacher.data().data() + i * k, k, tau, lt.data());
        for (std::size_t j = 0; j < k; ++j) {
            const T pt = std::exp(lt[j]);
            if (pt > T(0)) loss += pt * (lt[j] - ls[j]);
        }
    }
    loss *= tau * tau / static_cast<T>(n);
    return g.record(OpKind::kd_loss, {student.id}, Tensor<T>::scalar(loss),
                    [teacher, tau](Graph<T>& gr, const Node<T>& self) {
                        const auto si = self.inputs[0];
                        const auto ps = softmax_rows(gr.node(si).value, tau);
                        const auto pt = softmax_rows(teacher, tau);
                        auto& dx = gr.grad_buffer(si);
                        const T f = self.grad[0] * tau / static_cast<T>(teacher.dim(0));
                        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += (ps[i] - pt[i]) * f;
                    });
}

template <typename T>
Var<T> mse_loss(Var<T> a, const Tensor<T>& target) {
    auto& g = graph_of(a);
    if (a.shape() != target.shape())
        throw ShapeError("mse_loss shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(target.shape()));
    T acc = T(0);
    for (std::size_t i = 0; i < target.numel(); ++i) {
        const T d = a.value()[i] - target[i];
        acc += d * d;
    }
    acc /= static_cast<T>(target.numel());
    return g.record(OpKind::mse_loss, {a.id}, Tensor<T>::scalar(acc), [target](Graph<T>& gr, const Node<T>& self) {
        const auto ai = self.inputs[0];
        const auto& av = gr.node(ai).value;
        auto& dx = gr.grad_buffer(ai);
        const T f = T(2) * self.grad[0] / static_cast<T>(target.numel());
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += (av[i] - target[i]) * f;
    });
}

#define CASCADE_INSTANTIATE(T)                                                                        \
    template struct Var<T>;                                                                           \
    template class Graph<T>;                                                                          \
    template struct BatchNormState<T>;                                                                \
    template Var<T> conv2d(Var<T>, Var<T>, long, Padding);                                            \
    template Var<T> channel_scale(Var<T>, const Tensor<T>&);                                          \
    template Var<T> dense(Var<T>, Var<T>);                                                            \
    template Var<T> batch_norm(Var<T>, BatchNormState<T>&, Var<T>, Var<T>, Mode, const BatchNormConfig&); \
    template Var<T> relu(Var<T>);                                                                     \
    template Var<T> max_pool(Var<T>, std::size_t, std::size_t);                                       \
    template Var<T> global_avg_pool(Var<T>);                                                          \
    template Var<T> flatten(Var<T>);                                                                  \
    template Var<T> add(Var<T>, Var<T>);                                                              \
    template Var<T> scale(Var<T>, T);                                                                 \
    template Var<T> sum(Var<T>);                                                                      \
    template Var<T> softmax_cross_entropy(Var<T>, const Tensor<T>&);                                  \
    template Var<T> kd_loss(Var<T>, const Tensor<T>&, T);                                             \
    template Var<T> mse_loss(Var<T>, const Tensor<T>&);                                               \
    template Tensor<T> softmax_rows(const Tensor<T>&, T);

CASCADE_INSTANTIATE(float)
CASCADE_INSTANTIATE(double)

#undef CASCADE_INSTANTIATE

}  // namespace cascade

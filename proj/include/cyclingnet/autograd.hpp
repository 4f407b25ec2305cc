#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "cyclingnet/tensor.hpp"

namespace cyclingnet {

enum class Mode { train, infer };

/// Reverse-mode tape. Operations append nodes in execution order; backward()
/// replays them once, in reverse, accumulating gradients into parent nodes
/// and finally into any bound Parameters.
///
/// A tape is built per forward pass and is not thread-safe; concurrent
/// forward passes use separate tapes.
template <typename T>
class Tape {
public:
    using Var = std::size_t;

    Var constant(Tensor<T> value) {
        return push(std::move(value), {}, nullptr, nullptr);
    }

    /// Leaf bound to a Parameter: backward() adds the leaf gradient into
    /// param.grad. The value is copied at record time.
    Var leaf(Parameter<T>& param) {
        return push(param.value, {}, nullptr, &param);
    }

    const Tensor<T>& value(Var v) const { return nodes_[v].value; }
    const Shape& shape(Var v) const { return nodes_[v].value.shape(); }

    /// Gradient of a node (valid after backward; zeros if the node does not
    /// influence the loss).
    const Tensor<T>& grad(Var v) {
        ensure_grad(v);
        return nodes_[v].grad;
    }

    std::size_t node_count() const { return nodes_.size(); }

    // ----- elementwise -----

    Var add(Var a, Var b) {
        require_same_shape(a, b, "add");
        Tensor<T> out = nodes_[a].value;
        const Tensor<T>& bv = nodes_[b].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            t.accumulate(n.parents[0], n.grad.values());
            t.accumulate(n.parents[1], n.grad.values());
        });
    }

    Var sub(Var a, Var b) {
        require_same_shape(a, b, "sub");
        Tensor<T> out = nodes_[a].value;
        const Tensor<T>& bv = nodes_[b].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            t.accumulate(n.parents[0], n.grad.values());
            Tensor<T>& gb = t.mutable_grad(n.parents[1]);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i];
        });
    }

    Var mul(Var a, Var b) {
        require_same_shape(a, b, "mul");
        Tensor<T> out = nodes_[a].value;
        const Tensor<T>& bv = nodes_[b].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
        return push(std::move(out), {a, b}, [](Tape& t, const Node& n) {
            const Tensor<T>& av = t.nodes_[n.parents[0]].value;
            const Tensor<T>& bv2 = t.nodes_[n.parents[1]].value;
            Tensor<T>& ga = t.mutable_grad(n.parents[0]);
            Tensor<T>& gb = t.mutable_grad(n.parents[1]);
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                ga[i] += n.grad[i] * bv2[i];
                gb[i] += n.grad[i] * av[i];
            }
        });
    }

    Var scale(Var a, T s) {
        Tensor<T> out = nodes_[a].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
        return push(std::move(out), {a}, [s](Tape& t, const Node& n) {
            Tensor<T>& ga = t.mutable_grad(n.parents[0]);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * s;
        });
    }

    /// x + b with b broadcast over the last axis (bias add).
    Var add_bias(Var x, Var b) {
        const Tensor<T>& xv = nodes_[x].value;
        const Tensor<T>& bv = nodes_[b].value;
        const std::size_t m = xv.shape().back();
        if (bv.size() != m)
            throw std::invalid_argument("add_bias: bias length " + std::to_string(bv.size()) +
                                        " != last extent " + std::to_string(m));
        Tensor<T> out = xv;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % m];
        return push(std::move(out), {x, b}, [m](Tape& t, const Node& n) {
            t.accumulate(n.parents[0], n.grad.values());
            Tensor<T>& gb = t.mutable_grad(n.parents[1]);
            for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i % m] += n.grad[i];
        });
    }

    /// x + s with the single-element tensor s broadcast everywhere.
    Var add_scalar_param(Var x, Var s) {
        const Tensor<T>& sv = nodes_[s].value;
        if (sv.size() != 1)
            throw std::invalid_argument("add_scalar_param: expected a single-element tensor");
        Tensor<T> out = nodes_[x].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += sv[0];
        return push(std::move(out), {x, s}, [](Tape& t, const Node& n) {
            t.accumulate(n.parents[0], n.grad.values());
            Tensor<T>& gs = t.mutable_grad(n.parents[1]);
            T acc = T(0);
            for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i];
            gs[0] += acc;
        });
    }

    // ----- activations -----

    Var relu(Var x) {
        Tensor<T> out = nodes_[x].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > T(0) ? out[i] : T(0);
        return push(std::move(out), {x}, [](Tape& t, const Node& n) {
            const Tensor<T>& xv = t.nodes_[n.parents[0]].value;
            Tensor<T>& gx = t.mutable_grad(n.parents[0]);
            // subgradient at 0 defined as 0
            for (std::size_t i = 0; i < gx.size(); ++i)
                if (xv[i] > T(0)) gx[i] += n.grad[i];
        });
    }

    Var sigmoid(Var x) {
        Tensor<T> out = nodes_[x].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-out[i]));
        return push(std::move(out), {x}, [](Tape& t, const Node& n) {
            Tensor<T>& gx = t.mutable_grad(n.parents[0]);
            for (std::size_t i = 0; i < gx.size(); ++i) {
                const T y = n.value[i];
                gx[i] += n.grad[i] * y * (T(1) - y);
            }
        });
    }

    Var tanh_act(Var x) {
        Tensor<T> out = nodes_[x].value;
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
        return push(std::move(out), {x}, [](Tape& t, const Node& n) {
            Tensor<T>& gx = t.mutable_grad(n.parents[0]);
            for (std::size_t i = 0; i < gx.size(); ++i) {
                const T y = n.value[i];
                gx[i] += n.grad[i] * (T(1) - y * y);
            }
        });
    }

    /// Softmax over the last axis; rows are every leading-index combination.
    Var softmax_last(Var x) {
        const Tensor<T>& xv = nodes_[x].value;
        const std::size_t m = xv.shape().back();
        const std::size_t rows = xv.size() / m;
        Tensor<T> out(xv.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const T* in = xv.data() + r * m;
            T* o = out.data() + r * m;
            T mx = in[0];
            for (std::size_t k = 1; k < m; ++k) mx = std::max(mx, in[k]);
            T sum = T(0);
            for (std::size_t k = 0; k < m; ++k) {
                o[k] = std::exp(in[k] - mx);
                sum += o[k];
            }
            for (std::size_t k = 0; k < m; ++k) o[k] /= sum;
        }
        return push(std::move(out), {x}, [m, rows](Tape& t, const Node& n) {
            Tensor<T>& gx = t.mutable_grad(n.parents[0]);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* y = n.value.data() + r * m;
                const T* g = n.grad.data() + r * m;
                T dot = T(0);
                for (std::size_t k = 0; k < m; ++k) dot += g[k] * y[k];
                T* go = gx.data() + r * m;
                for (std::size_t k = 0; k < m; ++k) go[k] += y[k] * (g[k] - dot);
            }
        });
    }

    // ----- shape manipulation -----

    Var reshape(Var x, Shape new_shape) {
        Tensor<T> out = nodes_[x].value.reshaped(std::move(new_shape));
        return push(std::move(out), {x}, [](Tape& t, const Node& n) {
            t.accumulate(n.parents[0], n.grad.values());
        });
    }

    /// Concatenate two tensors along the last axis; leading extents must match.
    Var concat_last(Var a, Var b) {
        const Tensor<T>& av = nodes_[a].value;
        const Tensor<T>& bv = nodes_[b].value;
        if (av.rank() != bv.rank())
            throw std::invalid_argument("concat_last: rank mismatch");
        Shape out_shape = av.shape();
        const std::size_t ma = av.shape().back(), mb = bv.shape().back();
        for (std::size_t i = 0; i + 1 < av.rank(); ++i)
            if (av.shape()[i] != bv.shape()[i])
                throw std::invalid_argument("concat_last: leading extent mismatch");
        out_shape.back() = ma + mb;
        const std::size_t rows = av.size() / ma;
        Tensor<T> out(out_shape);
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(av.data() + r * ma, ma, out.data() + r * (ma + mb));
            std::copy_n(bv.data() + r * mb, mb, out.data() + r * (ma + mb) + ma);
        }
        return push(std::move(out), {a, b}, [ma, mb, rows](Tape& t, const Node& n) {
            Tensor<T>& ga = t.mutable_grad(n.parents[0]);
            Tensor<T>& gb = t.mutable_grad(n.parents[1]);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* g = n.grad.data() + r * (ma + mb);
                for (std::size_t k = 0; k < ma; ++k) ga[r * ma + k] += g[k];
                for (std::size_t k = 0; k < mb; ++k) gb[r * mb + k] += g[ma + k];
            }
        });
    }

    /// Select index t along axis 1 of a rank-3 (B, T, F) tensor -> (B, F).
    Var slice_step(Var x, std::size_t t) {
        const Tensor<T>& xv = nodes_[x].value;
        if (xv.rank() != 3) throw std::invalid_argument("slice_step: expected rank-3 input");
        const std::size_t B = xv.shape()[0], S = xv.shape()[1], F = xv.shape()[2];
        if (t >= S) throw std::invalid_argument("slice_step: index out of range");
        Tensor<T> out(Shape{B, F});
        for (std::size_t b = 0; b < B; ++b)
            std::copy_n(xv.data() + (b * S + t) * F, F, out.data() + b * F);
        return push(std::move(out), {x}, [t, B, S, F](Tape& t_, const Node& n) {
            Tensor<T>& gx = t_.mutable_grad(n.parents[0]);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t k = 0; k < F; ++k)
                    gx[(b * S + t) * F + k] += n.grad[b * F + k];
        });
    }

    /// Stack S rank-2 (B, F) tensors into (B, S, F), step-major along axis 1.
    Var stack_steps(const std::vector<Var>& steps) {
        if (steps.empty()) throw std::invalid_argument("stack_steps: empty sequence");
        const std::size_t B = nodes_[steps[0]].value.shape()[0];
        const std::size_t F = nodes_[steps[0]].value.shape()[1];
        const std::size_t S = steps.size();
        Tensor<T> out(Shape{B, S, F});
        for (std::size_t t = 0; t < S; ++t) {
            const Tensor<T>& sv = nodes_[steps[t]].value;
            if (sv.rank() != 2 || sv.shape()[0] != B || sv.shape()[1] != F)
                throw std::invalid_argument("stack_steps: inconsistent step shapes");
            for (std::size_t b = 0; b < B; ++b)
                std::copy_n(sv.data() + b * F, F, out.data() + (b * S + t) * F);
        }
        return push(std::move(out), steps, [B, S, F](Tape& t_, const Node& n) {
            for (std::size_t t = 0; t < S; ++t) {
                Tensor<T>& gs = t_.mutable_grad(n.parents[t]);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t k = 0; k < F; ++k)
                        gs[b * F + k] += n.grad[(b * S + t) * F + k];
            }
        });
    }

    // ----- linear algebra -----

    /// x (.., n) times W (n, m): leading axes of x are flattened into rows.
    /// A rank-1 x is a single row.
    Var matmul(Var x, Var w) {
        const Tensor<T>& xv = nodes_[x].value;
        const Tensor<T>& wv = nodes_[w].value;
        if (wv.rank() != 2) throw std::invalid_argument("matmul: weights must be rank 2");
        const std::size_t n = wv.shape()[0], m = wv.shape()[1];
        if (xv.shape().back() != n)
            throw std::invalid_argument("matmul: inner extents disagree (" +
                                        std::to_string(xv.shape().back()) + " vs " + std::to_string(n) + ")");
        const std::size_t rows = xv.size() / n;
        Shape out_shape = xv.shape();
        out_shape.back() = m;
        Tensor<T> out(out_shape);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv.data() + r * n;
            T* yr = out.data() + r * m;
            for (std::size_t i = 0; i < n; ++i) {
                const T xi = xr[i];
                const T* wrow = wv.data() + i * m;
                for (std::size_t j = 0; j < m; ++j) yr[j] += xi * wrow[j];
            }
        }
        return push(std::move(out), {x, w}, [rows, n, m](Tape& t, const Node& nd) {
            const Tensor<T>& xv2 = t.nodes_[nd.parents[0]].value;
            const Tensor<T>& wv2 = t.nodes_[nd.parents[1]].value;
            Tensor<T>& gx = t.mutable_grad(nd.parents[0]);
            Tensor<T>& gw = t.mutable_grad(nd.parents[1]);
            for (std::size_t r = 0; r < rows; ++r) {
                const T* g = nd.grad.data() + r * m;
                const T* xr = xv2.data() + r * n;
                T* gxr = gx.data() + r * n;
                for (std::size_t i = 0; i < n; ++i) {
                    const T* wrow = wv2.data() + i * m;
                    T acc = T(0);
                    for (std::size_t j = 0; j < m; ++j) acc += g[j] * wrow[j];
                    gxr[i] += acc;
                    T* gwrow = gw.data() + i * m;
                    const T xi = xr[i];
                    for (std::size_t j = 0; j < m; ++j) gwrow[j] += xi * g[j];
                }
            }
        });
    }

    /// Batched matmul: (B, M, K) x (B, K, N) -> (B, M, N).
    Var bmm_nn(Var a, Var b) {
        const Tensor<T>& av = nodes_[a].value;
        const Tensor<T>& bv = nodes_[b].value;
        if (av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] ||
            av.shape()[2] != bv.shape()[1])
            throw std::invalid_argument("bmm_nn: shape mismatch");
        const std::size_t B = av.shape()[0], M = av.shape()[1], K = av.shape()[2], N = bv.shape()[2];
        Tensor<T> out(Shape{B, M, N});
        for (std::size_t bb = 0; bb < B; ++bb)
            for (std::size_t i = 0; i < M; ++i)
                for (std::size_t k = 0; k < K; ++k) {
                    const T aik = av[(bb * M + i) * K + k];
                    const T* brow = bv.data() + (bb * K + k) * N;
                    T* orow = out.data() + (bb * M + i) * N;
                    for (std::size_t j = 0; j < N; ++j) orow[j] += aik * brow[j];
                }
        return push(std::move(out), {a, b}, [B, M, K, N](Tape& t, const Node& nd) {
            const Tensor<T>& av2 = t.nodes_[nd.parents[0]].value;
            const Tensor<T>& bv2 = t.nodes_[nd.parents[1]].value;
            Tensor<T>& ga = t.mutable_grad(nd.parents[0]);
            Tensor<T>& gb = t.mutable_grad(nd.parents[1]);
            for (std::size_t bb = 0; bb < B; ++bb)
                for (std::size_t i = 0; i < M; ++i) {
                    const T* g = nd.grad.data() + (bb * M + i) * N;
                    for (std::size_t k = 0; k < K; ++k) {
                        const T* brow = bv2.data() + (bb * K + k) * N;
                        T acc = T(0);
                        for (std::size_t j = 0; j < N; ++j) acc += g[j] * brow[j];
                        ga[(bb * M + i) * K + k] += acc;
                        const T aik = av2[(bb * M + i) * K + k];
                        T* gbrow = gb.data() + (bb * K + k) * N;
                        for (std::size_t j = 0; j < N; ++j) gbrow[j] += aik * g[j];
                    }
                }
        });
    }

    /// Batched matmul with transposed second operand:
    /// (B, M, K) x (B, N, K) -> (B, M, N).
    Var bmm_nt(Var a, Var b) {
        const Tensor<T>& av = nodes_[a].value;
        const Tensor<T>& bv = nodes_[b].value;
        if (av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] ||
            av.shape()[2] != bv.shape()[2])
            throw std::invalid_argument("bmm_nt: shape mismatch");
        const std::size_t B = av.shape()[0], M = av.shape()[1], K = av.shape()[2], N = bv.shape()[1];
        Tensor<T> out(Shape{B, M, N});
        for (std::size_t bb = 0; bb < B; ++bb)
            for (std::size_t i = 0; i < M; ++i) {
                const T* arow = av.data() + (bb * M + i) * K;
                T* orow = out.data() + (bb * M + i) * N;
                for (std::size_t j = 0; j < N; ++j) {
                    const T* brow = bv.data() + (bb * N + j) * K;
                    T acc = T(0);
                    for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
                    orow[j] = acc;
                }
            }
        return push(std::move(out), {a, b}, [B, M, K, N](Tape& t, const Node& nd) {
            const Tensor<T>& av2 = t.nodes_[nd.parents[0]].value;
            const Tensor<T>& bv2 = t.nodes_[nd.parents[1]].value;
            Tensor<T>& ga = t.mutable_grad(nd.parents[0]);
            Tensor<T>& gb = t.mutable_grad(nd.parents[1]);
            for (std::size_t bb = 0; bb < B; ++bb)
                for (std::size_t i = 0; i < M; ++i) {
                    const T* g = nd.grad.data() + (bb * M + i) * N;
                    const T* arow = av2.data() + (bb * M + i) * K;
                    T* garow = ga.data() + (bb * M + i) * K;
                    for (std::size_t j = 0; j < N; ++j) {
                        const T gij = g[j];
                        const T* brow = bv2.data() + (bb * N + j) * K;
                        T* gbrow = gb.data() + (bb * N + j) * K;
                        for (std::size_t k = 0; k < K; ++k) {
                            garow[k] += gij * brow[k];
                            gbrow[k] += gij * arow[k];
                        }
                    }
                }
        });
    }

    /// H[b, t, t', k] = P[b, t, k] + Q[b, t', k] for P, Q of shape (B, S, U).
    Var pairwise_sum(Var p, Var q) {
        const Tensor<T>& pv = nodes_[p].value;
        const Tensor<T>& qv = nodes_[q].value;
        if (pv.rank() != 3 || !pv.same_shape(qv))
            throw std::invalid_argument("pairwise_sum: expected matching rank-3 inputs");
        const std::size_t B = pv.shape()[0], S = pv.shape()[1], U = pv.shape()[2];
        Tensor<T> out(Shape{B, S, S, U});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t1 = 0; t1 < S; ++t1)
                for (std::size_t t2 = 0; t2 < S; ++t2) {
                    const T* pr = pv.data() + (b * S + t1) * U;
                    const T* qr = qv.data() + (b * S + t2) * U;
                    T* o = out.data() + ((b * S + t1) * S + t2) * U;
                    for (std::size_t k = 0; k < U; ++k) o[k] = pr[k] + qr[k];
                }
        return push(std::move(out), {p, q}, [B, S, U](Tape& t, const Node& nd) {
            Tensor<T>& gp = t.mutable_grad(nd.parents[0]);
            Tensor<T>& gq = t.mutable_grad(nd.parents[1]);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t1 = 0; t1 < S; ++t1)
                    for (std::size_t t2 = 0; t2 < S; ++t2) {
                        const T* g = nd.grad.data() + ((b * S + t1) * S + t2) * U;
                        T* gpr = gp.data() + (b * S + t1) * U;
                        T* gqr = gq.data() + (b * S + t2) * U;
                        for (std::size_t k = 0; k < U; ++k) {
                            gpr[k] += g[k];
                            gqr[k] += g[k];
                        }
                    }
        });
    }

    // ----- reductions -----

    Var sum_all(Var x) {
        const Tensor<T>& xv = nodes_[x].value;
        T acc = T(0);
        for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
        return push(Tensor<T>::scalar(acc), {x}, [](Tape& t, const Node& n) {
            Tensor<T>& gx = t.mutable_grad(n.parents[0]);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[0];
        });
    }

    Var mean_all(Var x) {
        const Tensor<T>& xv = nodes_[x].value;
        const std::size_t n = xv.size();
        T acc = T(0);
        for (std::size_t i = 0; i < n; ++i) acc += xv[i];
        acc /= static_cast<T>(n);
        return push(Tensor<T>::scalar(acc), {x}, [n](Tape& t, const Node& nd) {
            Tensor<T>& gx = t.mutable_grad(nd.parents[0]);
            const T s = nd.grad[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s;
        });
    }

    // ----- structured layers -----

    /// Valid (unpadded) cross-correlation. Input is (H, W, C) or (B, H, W, C);
    /// kernels are (kh, kw, C, F), bias (F). Output extents are
    /// floor((H-kh)/stride)+1 by floor((W-kw)/stride)+1.
    Var conv2d(Var input, Var kernels, Var bias, std::size_t stride) {
        const Tensor<T>& xv = nodes_[input].value;
        const Tensor<T>& kv = nodes_[kernels].value;
        const Tensor<T>& bv = nodes_[bias].value;
        if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
        const bool batched = xv.rank() == 4;
        if (!batched && xv.rank() != 3)
            throw std::invalid_argument("conv2d: input must be rank 3 or 4");
        if (kv.rank() != 4) throw std::invalid_argument("conv2d: kernels must be rank 4");
        const std::size_t B = batched ? xv.shape()[0] : 1;
        const std::size_t H = xv.shape()[batched ? 1 : 0];
        const std::size_t W = xv.shape()[batched ? 2 : 1];
        const std::size_t C = xv.shape()[batched ? 3 : 2];
        const std::size_t KH = kv.shape()[0], KW = kv.shape()[1];
        const std::size_t F = kv.shape()[3];
        if (kv.shape()[2] != C)
            throw std::invalid_argument("conv2d: kernel channels " + std::to_string(kv.shape()[2]) +
                                        " != input channels " + std::to_string(C));
        if (bv.size() != F) throw std::invalid_argument("conv2d: bias length != filter count");
        if (KH > H || KW > W)
            throw std::invalid_argument("conv2d: kernel " + std::to_string(KH) + "x" + std::to_string(KW) +
                                        " larger than input " + std::to_string(H) + "x" + std::to_string(W));
        const std::size_t OH = (H - KH) / stride + 1;
        const std::size_t OW = (W - KW) / stride + 1;

        Shape out_shape = batched ? Shape{B, OH, OW, F} : Shape{OH, OW, F};
        Tensor<T> out(out_shape);
        std::vector<T> acc(F);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    for (std::size_t f = 0; f < F; ++f) acc[f] = bv[f];
                    for (std::size_t ky = 0; ky < KH; ++ky) {
                        const std::size_t iy = oy * stride + ky;
                        const T* in_row = xv.data() + ((b * H + iy) * W + ox * stride) * C;
                        const T* k_row = kv.data() + ky * KW * C * F;
                        for (std::size_t kx = 0; kx < KW; ++kx)
                            for (std::size_t c = 0; c < C; ++c) {
                                const T v = in_row[kx * C + c];
                                const T* kf = k_row + (kx * C + c) * F;
                                for (std::size_t f = 0; f < F; ++f) acc[f] += v * kf[f];
                            }
                    }
                    T* o = out.data() + ((b * OH + oy) * OW + ox) * F;
                    for (std::size_t f = 0; f < F; ++f) o[f] = acc[f];
                }

        auto bw = [B, H, W, C, KH, KW, F, OH, OW, stride](Tape& t, const Node& n) {
            const Tensor<T>& xv2 = t.nodes_[n.parents[0]].value;
            const Tensor<T>& kv2 = t.nodes_[n.parents[1]].value;
            Tensor<T>& gx = t.mutable_grad(n.parents[0]);
            Tensor<T>& gk = t.mutable_grad(n.parents[1]);
            Tensor<T>& gb = t.mutable_grad(n.parents[2]);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t oy = 0; oy < OH; ++oy)
                    for (std::size_t ox = 0; ox < OW; ++ox) {
                        const T* g = n.grad.data() + ((b * OH + oy) * OW + ox) * F;
                        for (std::size_t f = 0; f < F; ++f) gb[f] += g[f];
                        for (std::size_t ky = 0; ky < KH; ++ky) {
                            const std::size_t iy = oy * stride + ky;
                            const std::size_t in_base = ((b * H + iy) * W + ox * stride) * C;
                            for (std::size_t kx = 0; kx < KW; ++kx)
                                for (std::size_t c = 0; c < C; ++c) {
                                    const std::size_t xi = in_base + kx * C + c;
                                    const std::size_t ki = ((ky * KW + kx) * C + c) * F;
                                    const T xval = xv2[xi];
                                    T gacc = T(0);
                                    for (std::size_t f = 0; f < F; ++f) {
                                        gacc += g[f] * kv2[ki + f];
                                        gk[ki + f] += g[f] * xval;
                                    }
                                    gx[xi] += gacc;
                                }
                        }
                    }
        };
        return push(std::move(out), {input, kernels, bias}, std::move(bw));
    }

    /// Non-overlapping max pooling with square window `pool`; trailing rows
    /// and columns that do not fill a window are dropped.
    Var max_pool2d(Var input, std::size_t pool = 2) {
        const Tensor<T>& xv = nodes_[input].value;
        const bool batched = xv.rank() == 4;
        if (!batched && xv.rank() != 3)
            throw std::invalid_argument("max_pool2d: input must be rank 3 or 4");
        const std::size_t B = batched ? xv.shape()[0] : 1;
        const std::size_t H = xv.shape()[batched ? 1 : 0];
        const std::size_t W = xv.shape()[batched ? 2 : 1];
        const std::size_t C = xv.shape()[batched ? 3 : 2];
        if (H < pool || W < pool)
            throw std::invalid_argument("max_pool2d: input smaller than pool window");
        const std::size_t OH = H / pool, OW = W / pool;

        Shape out_shape = batched ? Shape{B, OH, OW, C} : Shape{OH, OW, C};
        Tensor<T> out(out_shape);
        std::vector<std::size_t> argmax(out.size());
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox)
                    for (std::size_t c = 0; c < C; ++c) {
                        T best = -std::numeric_limits<T>::infinity();
                        std::size_t best_i = 0;
                        for (std::size_t py = 0; py < pool; ++py)
                            for (std::size_t px = 0; px < pool; ++px) {
                                const std::size_t i =
                                    ((b * H + oy * pool + py) * W + ox * pool + px) * C + c;
                                if (xv[i] > best) {
                                    best = xv[i];
                                    best_i = i;
                                }
                            }
                        const std::size_t oi = ((b * OH + oy) * OW + ox) * C + c;
                        out[oi] = best;
                        argmax[oi] = best_i;
                    }
        return push(std::move(out), {input},
                    [argmax = std::move(argmax)](Tape& t, const Node& n) {
                        Tensor<T>& gx = t.mutable_grad(n.parents[0]);
                        for (std::size_t i = 0; i < n.grad.size(); ++i) gx[argmax[i]] += n.grad[i];
                    });
    }

    /// Batch normalization over all axes except the last (channel) axis.
    /// Train mode uses batch statistics (biased variance) and updates the
    /// moving statistics in place: m <- momentum*m + (1-momentum)*batch_stat.
    /// Infer mode normalizes with the moving statistics.
    Var batch_norm(Var x, Var gamma, Var beta, Tensor<T>& moving_mean, Tensor<T>& moving_var,
                   Mode mode, T momentum = T(0.99), T epsilon = T(0.001)) {
        const Tensor<T>& xv = nodes_[x].value;
        const std::size_t C = xv.shape().back();
        const std::size_t N = xv.size() / C;
        if (nodes_[gamma].value.size() != C || nodes_[beta].value.size() != C ||
            moving_mean.size() != C || moving_var.size() != C)
            throw std::invalid_argument("batch_norm: per-channel parameter length != channel count");
        const Tensor<T>& gv = nodes_[gamma].value;
        const Tensor<T>& bv = nodes_[beta].value;

        Tensor<T> out(xv.shape());
        std::vector<T> mean(C), istd(C);
        if (mode == Mode::train) {
            std::vector<T> var(C, T(0));
            for (std::size_t c = 0; c < C; ++c) mean[c] = T(0);
            for (std::size_t i = 0; i < xv.size(); ++i) mean[i % C] += xv[i];
            for (std::size_t c = 0; c < C; ++c) mean[c] /= static_cast<T>(N);
            for (std::size_t i = 0; i < xv.size(); ++i) {
                const T d = xv[i] - mean[i % C];
                var[i % C] += d * d;
            }
            for (std::size_t c = 0; c < C; ++c) {
                var[c] /= static_cast<T>(N);
                istd[c] = T(1) / std::sqrt(var[c] + epsilon);
                moving_mean[c] = momentum * moving_mean[c] + (T(1) - momentum) * mean[c];
                moving_var[c] = momentum * moving_var[c] + (T(1) - momentum) * var[c];
            }
        } else {
            for (std::size_t c = 0; c < C; ++c) {
                mean[c] = moving_mean[c];
                istd[c] = T(1) / std::sqrt(moving_var[c] + epsilon);
            }
        }
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const std::size_t c = i % C;
            out[i] = gv[c] * (xv[i] - mean[c]) * istd[c] + bv[c];
        }

        if (mode == Mode::infer) {
            // affine in x; mean/istd are constants here
            return push(std::move(out), {x, gamma, beta},
                        [mean, istd, C](Tape& t, const Node& n) {
                            const Tensor<T>& xv2 = t.nodes_[n.parents[0]].value;
                            const Tensor<T>& gv2 = t.nodes_[n.parents[1]].value;
                            Tensor<T>& gx = t.mutable_grad(n.parents[0]);
                            Tensor<T>& gg = t.mutable_grad(n.parents[1]);
                            Tensor<T>& gb = t.mutable_grad(n.parents[2]);
                            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                                const std::size_t c = i % C;
                                const T xhat = (xv2[i] - mean[c]) * istd[c];
                                gx[i] += n.grad[i] * gv2[c] * istd[c];
                                gg[c] += n.grad[i] * xhat;
                                gb[c] += n.grad[i];
                            }
                        });
        }
        const std::size_t n_per_c = N;
        return push(std::move(out), {x, gamma, beta},
                    [mean, istd, C, n_per_c](Tape& t, const Node& n) {
                        const Tensor<T>& xv2 = t.nodes_[n.parents[0]].value;
                        const Tensor<T>& gv2 = t.nodes_[n.parents[1]].value;
                        Tensor<T>& gx = t.mutable_grad(n.parents[0]);
                        Tensor<T>& gg = t.mutable_grad(n.parents[1]);
                        Tensor<T>& gb = t.mutable_grad(n.parents[2]);
                        // dL/dx = gamma*istd * (g - mean(g) - xhat * mean(g*xhat)), per channel
                        std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
                        for (std::size_t i = 0; i < n.grad.size(); ++i) {
                            const std::size_t c = i % C;
                            const T xhat = (xv2[i] - mean[c]) * istd[c];
                            sum_g[c] += n.grad[i];
                            sum_gx[c] += n.grad[i] * xhat;
                            gg[c] += n.grad[i] * xhat;
                            gb[c] += n.grad[i];
                        }
                        const T invN = T(1) / static_cast<T>(n_per_c);
                        for (std::size_t i = 0; i < n.grad.size(); ++i) {
                            const std::size_t c = i % C;
                            const T xhat = (xv2[i] - mean[c]) * istd[c];
                            gx[i] += gv2[c] * istd[c] *
                                     (n.grad[i] - sum_g[c] * invN - xhat * sum_gx[c] * invN);
                        }
                    });
    }

    /// Inverted dropout: train mode zeroes each element with probability
    /// `rate` and scales survivors by 1/(1-rate); infer mode is the identity.
    Var dropout(Var x, double rate, Mode mode, Rng& rng) {
        if (rate < 0.0 || rate >= 1.0)
            throw std::invalid_argument("dropout: rate must lie in [0, 1)");
        if (mode == Mode::infer || rate == 0.0) {
            Tensor<T> out = nodes_[x].value;
            return push(std::move(out), {x}, [](Tape& t, const Node& n) {
                t.accumulate(n.parents[0], n.grad.values());
            });
        }
        const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
        Tensor<T> out = nodes_[x].value;
        std::vector<T> mask(out.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            const bool keep = rng.uniform(0.0, 1.0) >= rate;
            mask[i] = keep ? keep_scale : T(0);
            out[i] *= mask[i];
        }
        return push(std::move(out), {x}, [mask = std::move(mask)](Tape& t, const Node& n) {
            Tensor<T>& gx = t.mutable_grad(n.parents[0]);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i] * mask[i];
        });
    }

    /// Mean binary cross-entropy over a batch of probabilities, with the
    /// standard 1e-7 clamp before the logarithm. `targets` holds 0/1 labels;
    /// `weights` (optional, same length) scales each sample's term.
    Var bce_loss(Var pred, const std::vector<T>& targets, const std::vector<T>& weights = {}) {
        const Tensor<T>& pv = nodes_[pred].value;
        if (pv.size() != targets.size())
            throw std::invalid_argument("bce_loss: prediction/target length mismatch");
        if (!weights.empty() && weights.size() != targets.size())
            throw std::invalid_argument("bce_loss: weight length mismatch");
        const std::size_t B = targets.size();
        const T lo = static_cast<T>(1e-7), hi = T(1) - static_cast<T>(1e-7);
        T acc = T(0);
        for (std::size_t i = 0; i < B; ++i) {
            const T p = std::clamp(pv[i], lo, hi);
            const T w = weights.empty() ? T(1) : weights[i];
            acc -= w * (targets[i] * std::log(p) + (T(1) - targets[i]) * std::log(T(1) - p));
        }
        acc /= static_cast<T>(B);
        return push(Tensor<T>::scalar(acc), {pred},
                    [targets, weights, B, lo, hi](Tape& t, const Node& n) {
                        const Tensor<T>& pv2 = t.nodes_[n.parents[0]].value;
                        Tensor<T>& gp = t.mutable_grad(n.parents[0]);
                        const T gout = n.grad[0] / static_cast<T>(B);
                        for (std::size_t i = 0; i < B; ++i) {
                            const T p = std::clamp(pv2[i], lo, hi);
                            const T w = weights.empty() ? T(1) : weights[i];
                            gp[i] += gout * w * (p - targets[i]) / (p * (T(1) - p));
                        }
                    });
    }

    /// Reverse sweep from a scalar loss. Each recorded operation's backward
    /// rule runs exactly once, in reverse execution order.
    void backward(Var loss) {
        if (nodes_[loss].value.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                        shape_str(nodes_[loss].value.shape()));
        if (backward_done_)
            throw std::logic_error("backward: tape already replayed");
        backward_done_ = true;
        ensure_grad(loss);
        nodes_[loss].grad[0] = T(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.has_grad || !n.backprop) continue;
            n.backprop(*this, n);
        }
        for (Node& n : nodes_)
            if (n.param && n.has_grad)
                for (std::size_t i = 0; i < n.grad.size(); ++i) n.param->grad[i] += n.grad[i];
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool has_grad = false;
        std::vector<Var> parents;
        std::function<void(Tape&, const Node&)> backprop;
        Parameter<T>* param = nullptr;
    };

    template <typename Fn>
    Var push(Tensor<T> value, std::vector<Var> parents, Fn&& backprop,
             Parameter<T>* param = nullptr) {
        Node n;
        n.value = std::move(value);
        n.parents = std::move(parents);
        if constexpr (!std::is_same_v<std::decay_t<Fn>, std::nullptr_t>)
            n.backprop = std::forward<Fn>(backprop);
        n.param = param;
        nodes_.push_back(std::move(n));
        return nodes_.size() - 1;
    }

    void ensure_grad(Var v) {
        Node& n = nodes_[v];
        if (!n.has_grad) {
            n.grad = Tensor<T>(n.value.shape());
            n.has_grad = true;
        }
    }

    Tensor<T>& mutable_grad(Var v) {
        ensure_grad(v);
        return nodes_[v].grad;
    }

    void accumulate(Var v, const std::vector<T>& g) {
        Tensor<T>& dst = mutable_grad(v);
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    void require_same_shape(Var a, Var b, const char* op) const {
        if (!nodes_[a].value.same_shape(nodes_[b].value))
            throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                        shape_str(nodes_[a].value.shape()) + " vs " +
                                        shape_str(nodes_[b].value.shape()));
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

}  // namespace cyclingnet

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <utility>
#include <vector>

#include "p2p/errors.hpp"
#include "p2p/kernels/kernels.hpp"
#include "p2p/mat.hpp"

namespace p2p {

// Reverse-mode autodiff over Mat<T>. Values are computed eagerly as ops are
// recorded; backward() replays the tape in reverse creation order, so every
// node's gradient is complete before its own backward function runs.
// Parameter leaves accumulate into caller-owned gradient sinks, which is what
// makes gradient accumulation across windows work: one Graph per window, one
// shared set of sinks per optimizer step.
template <typename T>
class Graph {
public:
    using NodeId = std::size_t;

    // ------------------------------------------------------------- leaves

    NodeId input(Mat<T> value) {
        return push(std::move(value), false, nullptr);
    }

    // grad_sink may be null (forward-only evaluation); when set it must match
    // the value's shape and receives += of the leaf gradient.
    NodeId param(const Mat<T>& value, Mat<T>* grad_sink) {
        Mat<T> v = value;
        if (!grad_sink) return push(std::move(v), false, nullptr);
        if (!grad_sink->same_shape(value))
            throw ShapeMismatch("param: grad sink shape mismatch");
        const NodeId id = nodes_.size();
        push(std::move(v), true, [id, grad_sink](Graph& g) {
            const Mat<T>& gr = g.nodes_[id].grad;
            kernels::ops<T>().axpy(grad_sink->data(), T(1), gr.data(), gr.size());
        });
        return id;
    }

    // ---------------------------------------------------------------- ops

    NodeId matmul(NodeId a, NodeId b) {
        const Mat<T>& A = val(a);
        const Mat<T>& B = val(b);
        if (A.cols() != B.rows()) throw ShapeMismatch("matmul: inner dimensions disagree");
        Mat<T> out(A.rows(), B.cols());
        kernels::ops<T>().gemm(out.data(), A.data(), B.data(), A.rows(), A.cols(), B.cols(),
                               false);
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a) || needs_grad(b), [id, a, b](Graph& g) {
            const auto& K = kernels::ops<T>();
            const Mat<T>& dy = g.nodes_[id].grad;
            const Mat<T>& A = g.val(a);
            const Mat<T>& B = g.val(b);
            if (Mat<T>* da = g.grad_target(a)) {
                Mat<T> bt(B.cols(), B.rows());
                K.transpose(bt.data(), B.data(), B.rows(), B.cols());
                K.gemm(da->data(), dy.data(), bt.data(), A.rows(), B.cols(), A.cols(), true);
            }
            if (Mat<T>* db = g.grad_target(b)) {
                Mat<T> at(A.cols(), A.rows());
                K.transpose(at.data(), A.data(), A.rows(), A.cols());
                K.gemm(db->data(), at.data(), dy.data(), A.cols(), A.rows(), B.cols(), true);
            }
        });
    }

    NodeId add(NodeId a, NodeId b) {
        const Mat<T>& A = val(a);
        const Mat<T>& B = val(b);
        if (!A.same_shape(B)) throw ShapeMismatch("add: shape mismatch");
        Mat<T> out(A.rows(), A.cols());
        kernels::ops<T>().add(out.data(), A.data(), B.data(), A.size());
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a) || needs_grad(b), [id, a, b](Graph& g) {
            const Mat<T>& dy = g.nodes_[id].grad;
            const auto& K = kernels::ops<T>();
            if (Mat<T>* da = g.grad_target(a)) K.axpy(da->data(), T(1), dy.data(), dy.size());
            if (Mat<T>* db = g.grad_target(b)) K.axpy(db->data(), T(1), dy.data(), dy.size());
        });
    }

    NodeId sub(NodeId a, NodeId b) {
        const Mat<T>& A = val(a);
        const Mat<T>& B = val(b);
        if (!A.same_shape(B)) throw ShapeMismatch("sub: shape mismatch");
        Mat<T> out(A.rows(), A.cols());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] - B[i];
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a) || needs_grad(b), [id, a, b](Graph& g) {
            const Mat<T>& dy = g.nodes_[id].grad;
            const auto& K = kernels::ops<T>();
            if (Mat<T>* da = g.grad_target(a)) K.axpy(da->data(), T(1), dy.data(), dy.size());
            if (Mat<T>* db = g.grad_target(b)) K.axpy(db->data(), T(-1), dy.data(), dy.size());
        });
    }

    // y = a + 1 * bias, bias broadcast over rows (bias is 1 x cols).
    NodeId add_row(NodeId a, NodeId bias) {
        const Mat<T>& A = val(a);
        const Mat<T>& B = val(bias);
        if (B.rows() != 1 || B.cols() != A.cols())
            throw ShapeMismatch("add_row: bias must be 1 x cols");
        Mat<T> out(A.rows(), A.cols());
        for (std::size_t i = 0; i < A.rows(); ++i)
            kernels::ops<T>().add(out.row(i), A.row(i), B.data(), A.cols());
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a) || needs_grad(bias), [id, a, bias](Graph& g) {
            const Mat<T>& dy = g.nodes_[id].grad;
            const auto& K = kernels::ops<T>();
            if (Mat<T>* da = g.grad_target(a)) K.axpy(da->data(), T(1), dy.data(), dy.size());
            if (Mat<T>* db = g.grad_target(bias))
                for (std::size_t i = 0; i < dy.rows(); ++i)
                    K.axpy(db->data(), T(1), dy.row(i), dy.cols());
        });
    }

    NodeId scale(NodeId a, T c) {
        const Mat<T>& A = val(a);
        Mat<T> out = A;
        kernels::ops<T>().scale(out.data(), c, out.size());
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a), [id, a, c](Graph& g) {
            if (Mat<T>* da = g.grad_target(a)) {
                const Mat<T>& dy = g.nodes_[id].grad;
                kernels::ops<T>().axpy(da->data(), c, dy.data(), dy.size());
            }
        });
    }

    NodeId mul_elem(NodeId a, NodeId b) {
        const Mat<T>& A = val(a);
        const Mat<T>& B = val(b);
        if (!A.same_shape(B)) throw ShapeMismatch("mul_elem: shape mismatch");
        Mat<T> out(A.rows(), A.cols());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a) || needs_grad(b), [id, a, b](Graph& g) {
            const Mat<T>& dy = g.nodes_[id].grad;
            const Mat<T>& A = g.val(a);
            const Mat<T>& B = g.val(b);
            if (Mat<T>* da = g.grad_target(a))
                for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * B[i];
            if (Mat<T>* db = g.grad_target(b))
                for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += dy[i] * A[i];
        });
    }

    NodeId leaky_relu(NodeId a, T slope) {
        const Mat<T>& A = val(a);
        Mat<T> out(A.rows(), A.cols());
        kernels::ops<T>().leaky_forward(out.data(), A.data(), slope, A.size());
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a), [id, a, slope](Graph& g) {
            if (Mat<T>* da = g.grad_target(a)) {
                const Mat<T>& dy = g.nodes_[id].grad;
                const Mat<T>& A = g.val(a);
                kernels::ops<T>().leaky_backward(da->data(), A.data(), dy.data(), slope,
                                                 dy.size());
            }
        });
    }

    NodeId abs_val(NodeId a) {
        const Mat<T>& A = val(a);
        Mat<T> out(A.rows(), A.cols());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] < T(0) ? -A[i] : A[i];
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a), [id, a](Graph& g) {
            if (Mat<T>* da = g.grad_target(a)) {
                const Mat<T>& dy = g.nodes_[id].grad;
                const Mat<T>& A = g.val(a);
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    const T s = A[i] > T(0) ? T(1) : (A[i] < T(0) ? T(-1) : T(0));
                    (*da)[i] += dy[i] * s;
                }
            }
        });
    }

    NodeId exp_op(NodeId a) {
        const Mat<T>& A = val(a);
        Mat<T> out(A.rows(), A.cols());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(A[i]);
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a), [id, a](Graph& g) {
            if (Mat<T>* da = g.grad_target(a)) {
                const Mat<T>& dy = g.nodes_[id].grad;
                const Mat<T>& Y = g.nodes_[id].value;
                for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * Y[i];
            }
        });
    }

    NodeId sigmoid(NodeId a) {
        const Mat<T>& A = val(a);
        Mat<T> out(A.rows(), A.cols());
        for (std::size_t i = 0; i < out.size(); ++i) {
            const T x = A[i];
            if (x >= T(0)) {
                out[i] = T(1) / (T(1) + std::exp(-x));
            } else {
                const T e = std::exp(x);
                out[i] = e / (T(1) + e);
            }
        }
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a), [id, a](Graph& g) {
            if (Mat<T>* da = g.grad_target(a)) {
                const Mat<T>& dy = g.nodes_[id].grad;
                const Mat<T>& Y = g.nodes_[id].value;
                for (std::size_t i = 0; i < dy.size(); ++i)
                    (*da)[i] += dy[i] * Y[i] * (T(1) - Y[i]);
            }
        });
    }

    // Per-element weighted BCE from logits:
    //   mask ? pos_weight*y*softplus(-z) + (1-y)*softplus(z) : 0
    // y and mask are constants of z's shape with entries in {0,1}.
    NodeId bce_logits(NodeId z, Mat<T> y, Mat<T> mask, T pos_weight) {
        const Mat<T>& Z = val(z);
        if (!Z.same_shape(y) || !Z.same_shape(mask))
            throw ShapeMismatch("bce_logits: label/mask shape mismatch");
        auto yp = std::make_shared<Mat<T>>(std::move(y));
        auto mp = std::make_shared<Mat<T>>(std::move(mask));
        auto softplus = [](T t) {
            const T a = t > T(0) ? t : T(0);
            return a + std::log1p(std::exp(-std::abs(t)));
        };
        Mat<T> out(Z.rows(), Z.cols());
        for (std::size_t i = 0; i < out.size(); ++i) {
            if ((*mp)[i] == T(0)) continue;
            const T zi = Z[i];
            const T yi = (*yp)[i];
            out[i] = pos_weight * yi * softplus(-zi) + (T(1) - yi) * softplus(zi);
        }
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(z), [id, z, yp, mp, pos_weight](Graph& g) {
            if (Mat<T>* dz = g.grad_target(z)) {
                const Mat<T>& dy = g.nodes_[id].grad;
                const Mat<T>& Z = g.val(z);
                auto sig = [](T x) {
                    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
                    const T e = std::exp(x);
                    return e / (T(1) + e);
                };
                for (std::size_t i = 0; i < dy.size(); ++i) {
                    if ((*mp)[i] == T(0)) continue;
                    const T zi = Z[i];
                    const T yi = (*yp)[i];
                    (*dz)[i] += dy[i] * (-pos_weight * yi * sig(-zi) + (T(1) - yi) * sig(zi));
                }
            }
        });
    }

    // 1x1 node: sum(mask .* a) / count. Caller guarantees count >= 1.
    NodeId masked_mean(NodeId a, Mat<T> mask, std::size_t count) {
        const Mat<T>& A = val(a);
        if (!A.same_shape(mask)) throw ShapeMismatch("masked_mean: mask shape mismatch");
        auto mp = std::make_shared<Mat<T>>(std::move(mask));
        T s = T(0);
        for (std::size_t i = 0; i < A.size(); ++i) s += (*mp)[i] * A[i];
        Mat<T> out(1, 1);
        out[0] = s / T(count);
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a), [id, a, mp, count](Graph& g) {
            if (Mat<T>* da = g.grad_target(a)) {
                const T gr = g.nodes_[id].grad[0] / T(count);
                for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += gr * (*mp)[i];
            }
        });
    }

    NodeId mean_all(NodeId a) {
        const Mat<T>& A = val(a);
        Mat<T> out(1, 1);
        out[0] = kernels::ops<T>().reduce_sum(A.data(), A.size()) / T(A.size());
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a), [id, a](Graph& g) {
            if (Mat<T>* da = g.grad_target(a)) {
                const T gr = g.nodes_[id].grad[0] / T(da->size());
                for (std::size_t i = 0; i < da->size(); ++i) (*da)[i] += gr;
            }
        });
    }

    // m x n -> m x 1, mean over each row.
    NodeId mean_cols(NodeId a) {
        const Mat<T>& A = val(a);
        Mat<T> out(A.rows(), 1);
        for (std::size_t i = 0; i < A.rows(); ++i)
            out[i] = kernels::ops<T>().reduce_sum(A.row(i), A.cols()) / T(A.cols());
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a), [id, a](Graph& g) {
            if (Mat<T>* da = g.grad_target(a)) {
                const Mat<T>& dy = g.nodes_[id].grad;
                const T inv = T(1) / T(da->cols());
                for (std::size_t i = 0; i < da->rows(); ++i) {
                    const T gi = dy[i] * inv;
                    T* row = da->row(i);
                    for (std::size_t j = 0; j < da->cols(); ++j) row[j] += gi;
                }
            }
        });
    }

    NodeId reshape(NodeId a, std::size_t rows, std::size_t cols) {
        const Mat<T>& A = val(a);
        if (A.size() != rows * cols) throw ShapeMismatch("reshape: element count mismatch");
        Mat<T> out(rows, cols);
        for (std::size_t i = 0; i < A.size(); ++i) out[i] = A[i];
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a), [id, a](Graph& g) {
            if (Mat<T>* da = g.grad_target(a)) {
                const Mat<T>& dy = g.nodes_[id].grad;
                kernels::ops<T>().axpy(da->data(), T(1), dy.data(), dy.size());
            }
        });
    }

    // Per-row standardization with affine: y = gain .* (x-mu)/sqrt(var+eps) + shift.
    // gain/shift are 1 x cols nodes. Population variance; zero-variance rows
    // map to shift.
    NodeId layer_norm(NodeId a, NodeId gain, NodeId shift, T eps) {
        const Mat<T>& A = val(a);
        const Mat<T>& G = val(gain);
        const Mat<T>& S = val(shift);
        if (G.rows() != 1 || G.cols() != A.cols() || S.rows() != 1 || S.cols() != A.cols())
            throw ShapeMismatch("layer_norm: gain/shift must be 1 x cols");
        auto xhat = std::make_shared<Mat<T>>(A.rows(), A.cols());
        auto inv = std::make_shared<Mat<T>>(A.rows(), 1);
        Mat<T> out(A.rows(), A.cols());
        for (std::size_t i = 0; i < A.rows(); ++i) {
            T mu, var;
            kernels::ops<T>().mean_var(A.row(i), A.cols(), &mu, &var);
            const T is = T(1) / std::sqrt(var + eps);
            (*inv)[i] = is;
            const T* x = A.row(i);
            T* xh = xhat->row(i);
            T* y = out.row(i);
            for (std::size_t j = 0; j < A.cols(); ++j) {
                xh[j] = (x[j] - mu) * is;
                y[j] = G[j] * xh[j] + S[j];
            }
        }
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a) || needs_grad(gain) || needs_grad(shift),
                    [id, a, gain, shift, xhat, inv](Graph& g) {
                        const Mat<T>& dy = g.nodes_[id].grad;
                        const Mat<T>& G = g.val(gain);
                        const std::size_t rows = dy.rows(), cols = dy.cols();
                        if (Mat<T>* dg = g.grad_target(gain))
                            for (std::size_t i = 0; i < rows; ++i)
                                for (std::size_t j = 0; j < cols; ++j)
                                    (*dg)[j] += dy(i, j) * (*xhat)(i, j);
                        if (Mat<T>* ds = g.grad_target(shift))
                            for (std::size_t i = 0; i < rows; ++i)
                                for (std::size_t j = 0; j < cols; ++j) (*ds)[j] += dy(i, j);
                        if (Mat<T>* da = g.grad_target(a)) {
                            for (std::size_t i = 0; i < rows; ++i) {
                                const T* dyr = dy.row(i);
                                const T* xh = xhat->row(i);
                                T m1 = T(0), m2 = T(0);
                                for (std::size_t j = 0; j < cols; ++j) {
                                    const T h = dyr[j] * G[j];
                                    m1 += h;
                                    m2 += h * xh[j];
                                }
                                m1 /= T(cols);
                                m2 /= T(cols);
                                const T is = (*inv)[i];
                                T* dar = da->row(i);
                                for (std::size_t j = 0; j < cols; ++j)
                                    dar[j] += is * (dyr[j] * G[j] - m1 - xh[j] * m2);
                            }
                        }
                    });
    }

    // Stable softmax per row with a 0/1 mask; masked outputs are exactly 0.
    // mask.rows must divide s.rows (mask row i%mask.rows applies to row i),
    // which lets one n x n band mask cover all flow blocks.
    NodeId masked_softmax_rows(NodeId s, std::shared_ptr<const Mat<T>> mask) {
        const Mat<T>& S = val(s);
        if (mask->cols() != S.cols() || mask->rows() == 0 || S.rows() % mask->rows() != 0)
            throw ShapeMismatch("masked_softmax_rows: mask shape incompatible");
        const T ninf = -std::numeric_limits<T>::infinity();
        Mat<T> out(S.rows(), S.cols());
        for (std::size_t i = 0; i < S.rows(); ++i) {
            const T* mrow = mask->row(i % mask->rows());
            const T* srow = S.row(i);
            T* orow = out.row(i);
            std::size_t unmasked = 0;
            for (std::size_t j = 0; j < S.cols(); ++j) {
                if (mrow[j] != T(0)) {
                    orow[j] = srow[j];
                    ++unmasked;
                } else {
                    orow[j] = ninf;
                }
            }
            if (unmasked == 0) throw EmptyRow("masked_softmax_rows: fully masked row");
            kernels::ops<T>().softmax_row(orow, S.cols());
        }
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(s), [id, s](Graph& g) {
            if (Mat<T>* ds = g.grad_target(s)) {
                const Mat<T>& dy = g.nodes_[id].grad;
                const Mat<T>& Y = g.nodes_[id].value;
                for (std::size_t i = 0; i < dy.rows(); ++i) {
                    const T* dyr = dy.row(i);
                    const T* yr = Y.row(i);
                    const T dot = kernels::ops<T>().dot(dyr, yr, dy.cols());
                    T* dsr = ds->row(i);
                    for (std::size_t j = 0; j < dy.cols(); ++j)
                        dsr[j] += yr[j] * (dyr[j] - dot);
                }
            }
        });
    }

    // m x c -> m x 1 row maxima; backward routes each row's gradient entirely
    // to the first-occurrence argmax.
    NodeId row_max_pool(NodeId a) {
        const Mat<T>& A = val(a);
        auto idx = std::make_shared<std::vector<std::size_t>>(A.rows());
        Mat<T> out(A.rows(), 1);
        for (std::size_t i = 0; i < A.rows(); ++i) {
            const std::size_t j = kernels::ops<T>().argmax(A.row(i), A.cols());
            (*idx)[i] = j;
            out[i] = A(i, j);
        }
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(a), [id, a, idx](Graph& g) {
            if (Mat<T>* da = g.grad_target(a)) {
                const Mat<T>& dy = g.nodes_[id].grad;
#ifdef P2P_MUTATE_MAXPOOL_BWD
                // deliberate fault injection for harness-sensitivity builds
                for (std::size_t i = 0; i < dy.rows(); ++i) (*da)(i, 0) += dy[i];
#else
                for (std::size_t i = 0; i < dy.rows(); ++i) (*da)(i, (*idx)[i]) += dy[i];
#endif
            }
        });
    }

    // Per-head block-diagonal attention logits with optional cross-flow max
    // injection. q,k are (n*L) x d. Output is (n*L) x n: rows [f*n,(f+1)*n)
    // hold flow f's diagonal block scale*Qf*Kf^T, with, when inject is set,
    // sum_{g!=f} max_j(scale*Qf*Kg^T)[i][j] added to every entry of row i.
    // Off-diagonal blocks stream through one n x n scratch; only argmax
    // indices are retained for backward.
    NodeId block_scores(NodeId q, NodeId k, std::size_t L, std::size_t n, T scale, bool inject,
                        std::vector<T>* injected_out = nullptr) {
        const Mat<T>& Q = val(q);
        const Mat<T>& K = val(k);
        if (!Q.same_shape(K) || Q.rows() != n * L)
            throw ShapeMismatch("block_scores: Q/K must be (n*L) x d");
        const std::size_t d = Q.cols();
        const auto& KR = kernels::ops<T>();
        Mat<T> out(n * L, n);
        Mat<T> kt(d, n);       // transposed K block
        Mat<T> scratch(n, n);  // one off-diagonal block at a time
        auto amax = std::make_shared<std::vector<std::uint32_t>>();
        amax->reserve(inject && L > 1 ? L * (L - 1) * n : 0);
        for (std::size_t f = 0; f < L; ++f) {
            KR.transpose(kt.data(), K.row(f * n), n, d);
            KR.gemm(out.row(f * n), Q.row(f * n), kt.data(), n, d, n, false);
            KR.scale(out.row(f * n), scale, n * n);
        }
        if (inject) {
            for (std::size_t f = 0; f < L; ++f)
                for (std::size_t g2 = 0; g2 < L; ++g2) {
                    if (g2 == f) continue;
                    KR.transpose(kt.data(), K.row(g2 * n), n, d);
                    KR.gemm(scratch.data(), Q.row(f * n), kt.data(), n, d, n, false);
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t j = KR.argmax(scratch.row(i), n);
                        amax->push_back(static_cast<std::uint32_t>(j));
                        const T add = scale * scratch(i, j);
                        if (injected_out) injected_out->push_back(add);
                        T* row = out.row(f * n + i);
                        for (std::size_t c = 0; c < n; ++c) row[c] += add;
                    }
                }
        }
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(q) || needs_grad(k),
                    [id, q, k, L, n, d, scale, inject, amax](Graph& g) {
                        const auto& KR = kernels::ops<T>();
                        const Mat<T>& dy = g.nodes_[id].grad;
                        const Mat<T>& Q = g.val(q);
                        const Mat<T>& K = g.val(k);
                        Mat<T>* dq = g.grad_target(q);
                        Mat<T>* dk = g.grad_target(k);
                        Mat<T> tmp(n, d);
                        Mat<T> dyt(n, n);
                        for (std::size_t f = 0; f < L; ++f) {
                            if (dq) {
                                KR.gemm(tmp.data(), dy.row(f * n), K.row(f * n), n, n, d, false);
                                KR.axpy(dq->row(f * n), scale, tmp.data(), n * d);
                            }
                            if (dk) {
                                KR.transpose(dyt.data(), dy.row(f * n), n, n);
                                KR.gemm(tmp.data(), dyt.data(), Q.row(f * n), n, n, d, false);
                                KR.axpy(dk->row(f * n), scale, tmp.data(), n * d);
                            }
                        }
                        if (inject && (dq || dk)) {
                            std::size_t cursor = 0;
                            for (std::size_t f = 0; f < L; ++f) {
                                // row sums of the diagonal-block gradient give
                                // the gradient of each injected scalar
                                for (std::size_t g2 = 0; g2 < L; ++g2) {
                                    if (g2 == f) continue;
                                    for (std::size_t i = 0; i < n; ++i) {
                                        const std::size_t j = (*amax)[cursor++];
                                        const T gs =
                                            scale * KR.reduce_sum(dy.row(f * n + i), n);
                                        if (gs == T(0)) continue;
                                        if (dq)
                                            KR.axpy(dq->row(f * n + i), gs, K.row(g2 * n + j),
                                                    d);
                                        if (dk)
                                            KR.axpy(dk->row(g2 * n + j), gs, Q.row(f * n + i),
                                                    d);
                                    }
                                }
                            }
                        }
                    });
    }

    // Per-flow attention application: weights (n*L) x n, v (n*L) x d ->
    // (n*L) x d where block f is W_f * V_f.
    NodeId block_diag_matmul(NodeId w, NodeId v, std::size_t L, std::size_t n) {
        const Mat<T>& W = val(w);
        const Mat<T>& V = val(v);
        if (W.rows() != n * L || W.cols() != n || V.rows() != n * L)
            throw ShapeMismatch("block_diag_matmul: shape mismatch");
        const std::size_t d = V.cols();
        const auto& KR = kernels::ops<T>();
        Mat<T> out(n * L, d);
        for (std::size_t f = 0; f < L; ++f)
            KR.gemm(out.row(f * n), W.row(f * n), V.row(f * n), n, n, d, false);
        const NodeId id = nodes_.size();
        return push(std::move(out), needs_grad(w) || needs_grad(v), [id, w, v, L, n, d](Graph& g) {
            const auto& KR = kernels::ops<T>();
            const Mat<T>& dy = g.nodes_[id].grad;
            const Mat<T>& W = g.val(w);
            const Mat<T>& V = g.val(v);
            Mat<T>* dw = g.grad_target(w);
            Mat<T>* dv = g.grad_target(v);
            Mat<T> vt(d, n);
            Mat<T> wt(n, n);
            for (std::size_t f = 0; f < L; ++f) {
                if (dw) {
                    KR.transpose(vt.data(), V.row(f * n), n, d);
                    KR.gemm(dw->row(f * n), dy.row(f * n), vt.data(), n, d, n, true);
                }
                if (dv) {
                    KR.transpose(wt.data(), W.row(f * n), n, n);
                    KR.gemm(dv->row(f * n), wt.data(), dy.row(f * n), n, n, d, true);
                }
            }
        });
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        if (parts.empty()) throw ShapeMismatch("concat_cols: no parts");
        const std::size_t rows = val(parts[0]).rows();
        std::size_t cols = 0;
        bool req = false;
        for (NodeId p : parts) {
            if (val(p).rows() != rows) throw ShapeMismatch("concat_cols: row count mismatch");
            cols += val(p).cols();
            req = req || needs_grad(p);
        }
        Mat<T> out(rows, cols);
        std::size_t off = 0;
        for (NodeId p : parts) {
            const Mat<T>& P = val(p);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < P.cols(); ++j) out(i, off + j) = P(i, j);
            off += P.cols();
        }
        const NodeId id = nodes_.size();
        auto parts_copy = std::make_shared<std::vector<NodeId>>(parts);
        return push(std::move(out), req, [id, parts_copy](Graph& g) {
            const Mat<T>& dy = g.nodes_[id].grad;
            std::size_t off = 0;
            for (NodeId p : *parts_copy) {
                const std::size_t pc = g.val(p).cols();
                if (Mat<T>* dp = g.grad_target(p))
                    for (std::size_t i = 0; i < dy.rows(); ++i)
                        for (std::size_t j = 0; j < pc; ++j) (*dp)(i, j) += dy(i, off + j);
                off += pc;
            }
        });
    }

    // Convenience: x*W + bias.
    NodeId linear(NodeId x, NodeId w, NodeId bias) { return add_row(matmul(x, w), bias); }

    // ----------------------------------------------------------- execution

    const Mat<T>& val(NodeId id) const { return nodes_[id].value; }
    Mat<T>& val(NodeId id) { return nodes_[id].value; }
    const Mat<T>& grad_of(NodeId id) const { return nodes_[id].grad; }
    bool needs_grad(NodeId id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Seeds the (1x1) root gradient and replays the tape. Gradients
    // accumulate additively across fan-out; parameter leaves push into their
    // external sinks.
    void backward(NodeId root, T seed = T(1)) {
        if (nodes_[root].value.size() != 1)
            throw ShapeMismatch("backward: root must be a 1x1 scalar node");
        ensure_grad(root)[0] += seed;
        for (std::size_t i = root + 1; i-- > 0;) {
            Node& nd = nodes_[i];
            if (nd.back && !nd.grad.empty()) nd.back(*this);
        }
    }

private:
    struct Node {
        Mat<T> value;
        Mat<T> grad;
        bool requires_grad = false;
        std::function<void(Graph&)> back;
    };

    NodeId push(Mat<T> value, bool requires_grad, std::function<void(Graph&)> back) {
        Node nd;
        nd.value = std::move(value);
        nd.requires_grad = requires_grad;
        if (requires_grad) nd.back = std::move(back);
        nodes_.push_back(std::move(nd));
        return nodes_.size() - 1;
    }

    Mat<T>& ensure_grad(NodeId id) {
        Node& nd = nodes_[id];
        if (nd.grad.empty()) nd.grad.resize(nd.value.rows(), nd.value.cols());
        return nd.grad;
    }

    // Null when the parent does not need gradients; otherwise the parent's
    // gradient buffer, zero-initialized on first touch.
    Mat<T>* grad_target(NodeId id) {
        if (!nodes_[id].requires_grad) return nullptr;
        return &ensure_grad(id);
    }

    std::vector<Node> nodes_;
};

}  // namespace p2p

#pragma once

#include <cmath>

#include "vd/graph.hpp"

namespace vd {

inline constexpr double kGroupNormEps = 1e-5;

// ---------------------------------------------------------------------------
// Raw kernels. Forward kernels return fresh tensors; backward kernels
// accumulate (+=) into caller-provided buffers.
// ---------------------------------------------------------------------------
namespace detail {

template <typename T>
Tensor<T> matmul_nn(const Tensor<T>& a, const Tensor<T>& b) {
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor<T> c({m, n});
    const T* pa = a.data.data();
    const T* pb = b.data.data();
    T* pc = c.data.data();
    for (int64_t i = 0; i < m; ++i) {
        T* crow = pc + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* brow = pb + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// c += a * b^T   (a: m x k, b: n x k, c: m x n)
template <typename T>
void matmul_nt_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
    const T* pa = a.data.data();
    const T* pb = b.data.data();
    T* pc = c.data.data();
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = pa + i * k;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = pb + j * k;
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            pc[i * n + j] += acc;
        }
    }
}

template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> c({a.shape[0], b.shape[0]});
    matmul_nt_acc(a, b, c);
    return c;
}

// c += a^T * b   (a: k x m, b: k x n, c: m x n)
template <typename T>
void matmul_tn_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    const int64_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
    const T* pa = a.data.data();
    const T* pb = b.data.data();
    T* pc = c.data.data();
    for (int64_t p = 0; p < k; ++p) {
        const T* arow = pa + p * m;
        const T* brow = pb + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            T* crow = pc + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c += a * b   (nn orientation)
template <typename T>
void matmul_nn_acc(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
    const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    const T* pa = a.data.data();
    const T* pb = b.data.data();
    T* pc = c.data.data();
    for (int64_t i = 0; i < m; ++i) {
        T* crow = pc + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* brow = pb + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// 3x3 convolution, padding 1, stride 1.
template <typename T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    const int64_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    const int64_t O = w.shape[0];
    Tensor<T> out({O, H, W});
    for (int64_t o = 0; o < O; ++o) {
        T* oplane = out.data.data() + o * H * W;
        const T bias = b.data[o];
        for (int64_t i = 0; i < H * W; ++i) oplane[i] = bias;
        for (int64_t c = 0; c < C; ++c) {
            const T* xplane = x.data.data() + c * H * W;
            const T* wk = w.data.data() + (o * C + c) * 9;
            for (int64_t ky = 0; ky < 3; ++ky) {
                for (int64_t kx = 0; kx < 3; ++kx) {
                    const T wv = wk[ky * 3 + kx];
                    const int64_t y0 = std::max<int64_t>(0, 1 - ky);
                    const int64_t y1 = std::min<int64_t>(H, H + 1 - ky);
                    const int64_t x0 = std::max<int64_t>(0, 1 - kx);
                    const int64_t x1 = std::min<int64_t>(W, W + 1 - kx);
                    for (int64_t y = y0; y < y1; ++y) {
                        T* orow = oplane + y * W;
                        const T* xrow = xplane + (y + ky - 1) * W + (kx - 1);
                        for (int64_t xx = x0; xx < x1; ++xx) orow[xx] += wv * xrow[xx];
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
void conv3x3_bwd_input_acc(const Tensor<T>& gout, const Tensor<T>& w, Tensor<T>& gx) {
    const int64_t O = gout.shape[0], H = gout.shape[1], W = gout.shape[2];
    const int64_t C = gx.shape[0];
    for (int64_t o = 0; o < O; ++o) {
        const T* gplane = gout.data.data() + o * H * W;
        for (int64_t c = 0; c < C; ++c) {
            T* xplane = gx.data.data() + c * H * W;
            const T* wk = w.data.data() + (o * C + c) * 9;
            for (int64_t ky = 0; ky < 3; ++ky) {
                for (int64_t kx = 0; kx < 3; ++kx) {
                    const T wv = wk[ky * 3 + kx];
                    const int64_t y0 = std::max<int64_t>(0, 1 - ky);
                    const int64_t y1 = std::min<int64_t>(H, H + 1 - ky);
                    const int64_t x0 = std::max<int64_t>(0, 1 - kx);
                    const int64_t x1 = std::min<int64_t>(W, W + 1 - kx);
                    for (int64_t y = y0; y < y1; ++y) {
                        const T* grow = gplane + y * W;
                        T* xrow = xplane + (y + ky - 1) * W + (kx - 1);
                        for (int64_t xx = x0; xx < x1; ++xx) xrow[xx] += wv * grow[xx];
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3x3_bwd_weight_acc(const Tensor<T>& gout, const Tensor<T>& x, Tensor<T>& gw,
                            Tensor<T>& gb) {
    const int64_t O = gout.shape[0], H = gout.shape[1], W = gout.shape[2];
    const int64_t C = x.shape[0];
    for (int64_t o = 0; o < O; ++o) {
        const T* gplane = gout.data.data() + o * H * W;
        T acc_b = 0;
        for (int64_t i = 0; i < H * W; ++i) acc_b += gplane[i];
        gb.data[o] += acc_b;
        for (int64_t c = 0; c < C; ++c) {
            const T* xplane = x.data.data() + c * H * W;
            T* wk = gw.data.data() + (o * C + c) * 9;
            for (int64_t ky = 0; ky < 3; ++ky) {
                for (int64_t kx = 0; kx < 3; ++kx) {
                    const int64_t y0 = std::max<int64_t>(0, 1 - ky);
                    const int64_t y1 = std::min<int64_t>(H, H + 1 - ky);
                    const int64_t x0 = std::max<int64_t>(0, 1 - kx);
                    const int64_t x1 = std::min<int64_t>(W, W + 1 - kx);
                    T acc = 0;
                    for (int64_t y = y0; y < y1; ++y) {
                        const T* grow = gplane + y * W;
                        const T* xrow = xplane + (y + ky - 1) * W + (kx - 1);
                        for (int64_t xx = x0; xx < x1; ++xx) acc += grow[xx] * xrow[xx];
                    }
                    wk[ky * 3 + kx] += acc;
                }
            }
        }
    }
}

template <typename T>
T sigmoid(T x) {
    if (x >= 0) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Graph primitives
// ---------------------------------------------------------------------------

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
    const auto& A = g.val(a);
    const auto& B = g.val(b);
    if (A.shape != B.shape) throw ShapeError("add: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor<T> out = A;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += B[i];
    return g.emit({a, b}, std::move(out),
        [](const Graph<T>& gg, const std::vector<Var>& in) {
            Tensor<T> o = gg.val(in[0]);
            const auto& bb = gg.val(in[1]);
            for (int64_t i = 0; i < o.numel(); ++i) o[i] += bb[i];
            return o;
        },
        [a, b](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            if (gg.wants_grad(a)) {
                auto& ga = gg.gbuf(a);
                for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
            }
            if (gg.wants_grad(b)) {
                auto& gb = gg.gbuf(b);
                for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i];
            }
        });
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
    const auto& A = g.val(a);
    const auto& B = g.val(b);
    if (A.shape != B.shape) throw ShapeError("sub: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor<T> out = A;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= B[i];
    return g.emit({a, b}, std::move(out),
        [](const Graph<T>& gg, const std::vector<Var>& in) {
            Tensor<T> o = gg.val(in[0]);
            const auto& bb = gg.val(in[1]);
            for (int64_t i = 0; i < o.numel(); ++i) o[i] -= bb[i];
            return o;
        },
        [a, b](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            if (gg.wants_grad(a)) {
                auto& ga = gg.gbuf(a);
                for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i];
            }
            if (gg.wants_grad(b)) {
                auto& gb = gg.gbuf(b);
                for (int64_t i = 0; i < go.numel(); ++i) gb[i] -= go[i];
            }
        });
}

// Hadamard product.
template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
    const auto& A = g.val(a);
    const auto& B = g.val(b);
    if (A.shape != B.shape) throw ShapeError("mul: " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Tensor<T> out = A;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= B[i];
    return g.emit({a, b}, std::move(out),
        [](const Graph<T>& gg, const std::vector<Var>& in) {
            Tensor<T> o = gg.val(in[0]);
            const auto& bb = gg.val(in[1]);
            for (int64_t i = 0; i < o.numel(); ++i) o[i] *= bb[i];
            return o;
        },
        [a, b](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            const auto& A2 = gg.val(a);
            const auto& B2 = gg.val(b);
            if (gg.wants_grad(a)) {
                auto& ga = gg.gbuf(a);
                for (int64_t i = 0; i < go.numel(); ++i) ga[i] += go[i] * B2[i];
            }
            if (gg.wants_grad(b)) {
                auto& gb = gg.gbuf(b);
                for (int64_t i = 0; i < go.numel(); ++i) gb[i] += go[i] * A2[i];
            }
        });
}

// Multiply by a compile-time-fixed scalar (the one blessed broadcast).
template <typename T>
Var scale(Graph<T>& g, Var a, double c) {
    const T cv = static_cast<T>(c);
    Tensor<T> out = g.val(a);
    for (auto& v : out.data) v *= cv;
    return g.emit({a}, std::move(out),
        [cv](const Graph<T>& gg, const std::vector<Var>& in) {
            Tensor<T> o = gg.val(in[0]);
            for (auto& v : o.data) v *= cv;
            return o;
        },
        [a, cv](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            if (gg.wants_grad(a)) {
                auto& ga = gg.gbuf(a);
                for (int64_t i = 0; i < go.numel(); ++i) ga[i] += cv * go[i];
            }
        });
}

// x[L,D] + row vector b[D] on every row.
template <typename T>
Var add_rowwise(Graph<T>& g, Var x, Var b) {
    const auto& X = g.val(x);
    const auto& B = g.val(b);
    if (X.rank() != 2 || B.numel() != X.shape[1])
        throw ShapeError("add_rowwise: x " + shape_str(X.shape) + " b " + shape_str(B.shape));
    Tensor<T> out = X;
    const int64_t L = X.shape[0], D = X.shape[1];
    for (int64_t i = 0; i < L; ++i)
        for (int64_t j = 0; j < D; ++j) out[i * D + j] += B[j];
    return g.emit({x, b}, std::move(out),
        [](const Graph<T>& gg, const std::vector<Var>& in) {
            Tensor<T> o = gg.val(in[0]);
            const auto& bb = gg.val(in[1]);
            const int64_t L2 = o.shape[0], D2 = o.shape[1];
            for (int64_t i = 0; i < L2; ++i)
                for (int64_t j = 0; j < D2; ++j) o[i * D2 + j] += bb[j];
            return o;
        },
        [x, b](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            const int64_t L2 = go.shape[0], D2 = go.shape[1];
            if (gg.wants_grad(x)) {
                auto& gx = gg.gbuf(x);
                for (int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
            }
            if (gg.wants_grad(b)) {
                auto& gb = gg.gbuf(b);
                for (int64_t i = 0; i < L2; ++i)
                    for (int64_t j = 0; j < D2; ++j) gb[j] += go[i * D2 + j];
            }
        });
}

// x[C,spatial...] + per-channel vector v[C].
template <typename T>
Var add_chanwise(Graph<T>& g, Var x, Var v) {
    const auto& X = g.val(x);
    const auto& V = g.val(v);
    const int64_t C = X.shape[0];
    if (V.numel() != C) throw ShapeError("add_chanwise: channel mismatch");
    const int64_t S = X.numel() / C;
    Tensor<T> out = X;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t s = 0; s < S; ++s) out[c * S + s] += V[c];
    return g.emit({x, v}, std::move(out),
        [](const Graph<T>& gg, const std::vector<Var>& in) {
            Tensor<T> o = gg.val(in[0]);
            const auto& vv = gg.val(in[1]);
            const int64_t C2 = o.shape[0], S2 = o.numel() / C2;
            for (int64_t c = 0; c < C2; ++c)
                for (int64_t s = 0; s < S2; ++s) o[c * S2 + s] += vv[c];
            return o;
        },
        [x, v](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            const int64_t C2 = go.shape[0], S2 = go.numel() / C2;
            if (gg.wants_grad(x)) {
                auto& gx = gg.gbuf(x);
                for (int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
            }
            if (gg.wants_grad(v)) {
                auto& gv = gg.gbuf(v);
                for (int64_t c = 0; c < C2; ++c) {
                    T acc = 0;
                    for (int64_t s = 0; s < S2; ++s) acc += go[c * S2 + s];
                    gv[c] += acc;
                }
            }
        });
}

template <typename T>
Var matmul(Graph<T>& g, Var a, Var b) {
    const auto& A = g.val(a);
    const auto& B = g.val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
        throw ShapeError("matmul: " + shape_str(A.shape) + " x " + shape_str(B.shape));
    return g.emit({a, b}, detail::matmul_nn(A, B),
        [](const Graph<T>& gg, const std::vector<Var>& in) {
            return detail::matmul_nn(gg.val(in[0]), gg.val(in[1]));
        },
        [a, b](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            if (gg.wants_grad(a)) detail::matmul_nt_acc(go, gg.val(b), gg.gbuf(a));
            if (gg.wants_grad(b)) detail::matmul_tn_acc(gg.val(a), go, gg.gbuf(b));
        });
}

// a[m,k] * b[n,k]^T -> [m,n]; the attention-scores orientation.
template <typename T>
Var matmul_nt(Graph<T>& g, Var a, Var b) {
    const auto& A = g.val(a);
    const auto& B = g.val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[1])
        throw ShapeError("matmul_nt: " + shape_str(A.shape) + " x " + shape_str(B.shape) + "^T");
    return g.emit({a, b}, detail::matmul_nt(A, B),
        [](const Graph<T>& gg, const std::vector<Var>& in) {
            return detail::matmul_nt(gg.val(in[0]), gg.val(in[1]));
        },
        [a, b](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            if (gg.wants_grad(a)) detail::matmul_nn_acc(go, gg.val(b), gg.gbuf(a));
            if (gg.wants_grad(b)) detail::matmul_tn_acc(go, gg.val(a), gg.gbuf(b));
        });
}

// 3x3 same-size convolution: x[C,H,W], w[O,C,3,3], b[O] -> [O,H,W].
template <typename T>
Var conv2d_3x3(Graph<T>& g, Var x, Var w, Var b) {
    const auto& X = g.val(x);
    const auto& W = g.val(w);
    const auto& B = g.val(b);
    if (X.rank() != 3) throw ShapeError("conv2d_3x3: input must be CxHxW, got " + shape_str(X.shape));
    if (W.rank() != 4 || W.shape[1] != X.shape[0] || W.shape[2] != 3 || W.shape[3] != 3)
        throw ShapeError("conv2d_3x3: weight " + shape_str(W.shape) + " does not match input " +
                         shape_str(X.shape));
    if (B.numel() != W.shape[0]) throw ShapeError("conv2d_3x3: bias length mismatch");
    if (X.shape[1] < 3 || X.shape[2] < 3) throw ShapeError("conv2d_3x3: spatial dims must be >= 3");
    return g.emit({x, w, b}, detail::conv3x3(X, W, B),
        [](const Graph<T>& gg, const std::vector<Var>& in) {
            return detail::conv3x3(gg.val(in[0]), gg.val(in[1]), gg.val(in[2]));
        },
        [x, w, b](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            if (gg.wants_grad(x)) detail::conv3x3_bwd_input_acc(go, gg.val(w), gg.gbuf(x));
            if (gg.wants_grad(w) || gg.wants_grad(b))
                detail::conv3x3_bwd_weight_acc(go, gg.val(x), gg.gbuf(w), gg.gbuf(b));
        });
}

// 1x1 convolution as a channel-mixing matmul: x[C,H,W], w[O,C], b[O].
template <typename T>
Var conv2d_1x1(Graph<T>& g, Var x, Var w, Var b) {
    const auto& X = g.val(x);
    const auto& W = g.val(w);
    if (W.rank() != 2 || W.shape[1] != X.shape[0]) throw ShapeError("conv2d_1x1: channel mismatch");
    const int64_t C = X.shape[0], S = X.numel() / C, O = W.shape[0];
    auto run = [C, S, O](const Tensor<T>& xx, const Tensor<T>& ww, const Tensor<T>& bb) {
        Tensor<T> out({O, xx.shape[1], xx.shape[2]});
        for (int64_t o = 0; o < O; ++o) {
            T* orow = out.data.data() + o * S;
            for (int64_t s = 0; s < S; ++s) orow[s] = bb[o];
            for (int64_t c = 0; c < C; ++c) {
                const T wv = ww[o * C + c];
                const T* xrow = xx.data.data() + c * S;
                for (int64_t s = 0; s < S; ++s) orow[s] += wv * xrow[s];
            }
        }
        return out;
    };
    return g.emit({x, w, b}, run(X, W, g.val(b)),
        [run](const Graph<T>& gg, const std::vector<Var>& in) {
            return run(gg.val(in[0]), gg.val(in[1]), gg.val(in[2]));
        },
        [x, w, b, C, S, O](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            const auto& X2 = gg.val(x);
            const auto& W2 = gg.val(w);
            if (gg.wants_grad(x)) {
                auto& gx = gg.gbuf(x);
                for (int64_t o = 0; o < O; ++o) {
                    const T* grow = go.data.data() + o * S;
                    for (int64_t c = 0; c < C; ++c) {
                        const T wv = W2[o * C + c];
                        T* xrow = gx.data.data() + c * S;
                        for (int64_t s = 0; s < S; ++s) xrow[s] += wv * grow[s];
                    }
                }
            }
            if (gg.wants_grad(w)) {
                auto& gw = gg.gbuf(w);
                for (int64_t o = 0; o < O; ++o) {
                    const T* grow = go.data.data() + o * S;
                    for (int64_t c = 0; c < C; ++c) {
                        const T* xrow = X2.data.data() + c * S;
                        T acc = 0;
                        for (int64_t s = 0; s < S; ++s) acc += grow[s] * xrow[s];
                        gw[o * C + c] += acc;
                    }
                }
            }
            if (gg.wants_grad(b)) {
                auto& gb = gg.gbuf(b);
                for (int64_t o = 0; o < O; ++o) {
                    const T* grow = go.data.data() + o * S;
                    T acc = 0;
                    for (int64_t s = 0; s < S; ++s) acc += grow[s];
                    gb[o] += acc;
                }
            }
        });
}

// 2x2 average pooling; H and W must be even.
template <typename T>
Var avg_pool2(Graph<T>& g, Var x) {
    const auto& X = g.val(x);
    if (X.rank() != 3 || X.shape[1] % 2 || X.shape[2] % 2)
        throw ShapeError("avg_pool2: need CxHxW with even H,W, got " + shape_str(X.shape));
    auto run = [](const Tensor<T>& xx) {
        const int64_t C = xx.shape[0], H = xx.shape[1], W = xx.shape[2];
        Tensor<T> out({C, H / 2, W / 2});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H / 2; ++y)
                for (int64_t xx2 = 0; xx2 < W / 2; ++xx2) {
                    const T* r0 = xx.data.data() + (c * H + 2 * y) * W + 2 * xx2;
                    const T* r1 = r0 + W;
                    out[(c * (H / 2) + y) * (W / 2) + xx2] =
                        (r0[0] + r0[1] + r1[0] + r1[1]) * T(0.25);
                }
        return out;
    };
    return g.emit({x}, run(X),
        [run](const Graph<T>& gg, const std::vector<Var>& in) { return run(gg.val(in[0])); },
        [x](Graph<T>& gg, Var self) {
            if (!gg.wants_grad(x)) return;
            const auto& go = gg.gout(self);
            auto& gx = gg.gbuf(x);
            const int64_t C = gx.shape[0], H = gx.shape[1], W = gx.shape[2];
            for (int64_t c = 0; c < C; ++c)
                for (int64_t y = 0; y < H / 2; ++y)
                    for (int64_t xx2 = 0; xx2 < W / 2; ++xx2) {
                        const T v = go[(c * (H / 2) + y) * (W / 2) + xx2] * T(0.25);
                        T* r0 = gx.data.data() + (c * H + 2 * y) * W + 2 * xx2;
                        T* r1 = r0 + W;
                        r0[0] += v;
                        r0[1] += v;
                        r1[0] += v;
                        r1[1] += v;
                    }
        });
}

// Nearest-neighbour 2x upsampling.
template <typename T>
Var upsample_nearest2(Graph<T>& g, Var x) {
    const auto& X = g.val(x);
    if (X.rank() != 3) throw ShapeError("upsample_nearest2: need CxHxW");
    auto run = [](const Tensor<T>& xx) {
        const int64_t C = xx.shape[0], H = xx.shape[1], W = xx.shape[2];
        Tensor<T> out({C, 2 * H, 2 * W});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y)
                for (int64_t xx2 = 0; xx2 < W; ++xx2) {
                    const T v = xx[(c * H + y) * W + xx2];
                    T* r0 = out.data.data() + (c * 2 * H + 2 * y) * 2 * W + 2 * xx2;
                    T* r1 = r0 + 2 * W;
                    r0[0] = v;
                    r0[1] = v;
                    r1[0] = v;
                    r1[1] = v;
                }
        return out;
    };
    return g.emit({x}, run(X),
        [run](const Graph<T>& gg, const std::vector<Var>& in) { return run(gg.val(in[0])); },
        [x](Graph<T>& gg, Var self) {
            if (!gg.wants_grad(x)) return;
            const auto& go = gg.gout(self);
            auto& gx = gg.gbuf(x);
            const int64_t C = gx.shape[0], H = gx.shape[1], W = gx.shape[2];
            for (int64_t c = 0; c < C; ++c)
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t xx2 = 0; xx2 < W; ++xx2) {
                        const T* r0 = go.data.data() + (c * 2 * H + 2 * y) * 2 * W + 2 * xx2;
                        const T* r1 = r0 + 2 * W;
                        gx[(c * H + y) * W + xx2] += r0[0] + r0[1] + r1[0] + r1[1];
                    }
        });
}

// GroupNorm over dim 0 (channels); remaining dims are spatial.
// gamma/beta are per-channel. eps fixed to kGroupNormEps.
template <typename T>
Var group_norm(Graph<T>& g, Var x, int64_t groups, Var gamma, Var beta) {
    const auto& X = g.val(x);
    const int64_t C = X.shape[0];
    if (C % groups != 0)
        throw ShapeError("group_norm: channels " + std::to_string(C) + " not divisible by groups " +
                         std::to_string(groups));
    if (g.val(gamma).numel() != C || g.val(beta).numel() != C)
        throw ShapeError("group_norm: gamma/beta must have one entry per channel");
    const int64_t S = X.numel() / C;
    const int64_t cpg = C / groups;
    auto run = [groups, cpg, S](const Tensor<T>& xx, const Tensor<T>& ga, const Tensor<T>& be) {
        const int64_t C2 = xx.shape[0];
        Tensor<T> out(xx.shape);
        const int64_t N = cpg * S;
        for (int64_t grp = 0; grp < groups; ++grp) {
            const T* xp = xx.data.data() + grp * N;
            T mean = 0;
            for (int64_t i = 0; i < N; ++i) mean += xp[i];
            mean /= static_cast<T>(N);
            T var = 0;
            for (int64_t i = 0; i < N; ++i) {
                const T d = xp[i] - mean;
                var += d * d;
            }
            var /= static_cast<T>(N);
            const T istd = T(1) / std::sqrt(var + static_cast<T>(kGroupNormEps));
            T* op = out.data.data() + grp * N;
            for (int64_t cc = 0; cc < cpg; ++cc) {
                const int64_t c = grp * cpg + cc;
                const T gm = ga[c], bt = be[c];
                for (int64_t s = 0; s < S; ++s) {
                    const int64_t i = cc * S + s;
                    op[i] = gm * (xp[i] - mean) * istd + bt;
                }
            }
        }
        (void)C2;
        return out;
    };
    return g.emit({x, gamma, beta}, run(X, g.val(gamma), g.val(beta)),
        [run](const Graph<T>& gg, const std::vector<Var>& in) {
            return run(gg.val(in[0]), gg.val(in[1]), gg.val(in[2]));
        },
        [x, gamma, beta, groups, cpg, S](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            const auto& X2 = gg.val(x);
            const auto& GA = gg.val(gamma);
            const int64_t N = cpg * S;
            const bool wx = gg.wants_grad(x);
            const bool wg = gg.wants_grad(gamma);
            const bool wb = gg.wants_grad(beta);
            for (int64_t grp = 0; grp < groups; ++grp) {
                const T* xp = X2.data.data() + grp * N;
                const T* gp = go.data.data() + grp * N;
                T mean = 0;
                for (int64_t i = 0; i < N; ++i) mean += xp[i];
                mean /= static_cast<T>(N);
                T var = 0;
                for (int64_t i = 0; i < N; ++i) {
                    const T d = xp[i] - mean;
                    var += d * d;
                }
                var /= static_cast<T>(N);
                const T istd = T(1) / std::sqrt(var + static_cast<T>(kGroupNormEps));
                if (wg || wb) {
                    for (int64_t cc = 0; cc < cpg; ++cc) {
                        const int64_t c = grp * cpg + cc;
                        T acc_g = 0, acc_b = 0;
                        for (int64_t s = 0; s < S; ++s) {
                            const int64_t i = cc * S + s;
                            acc_b += gp[i];
                            acc_g += gp[i] * (xp[i] - mean) * istd;
                        }
                        if (wb) gg.gbuf(beta)[c] += acc_b;
                        if (wg) gg.gbuf(gamma)[c] += acc_g;
                    }
                }
                if (wx) {
                    // dx = istd * (h - mean(h) - xhat * mean(h*xhat)), h = gout*gamma
                    T mh = 0, mhx = 0;
                    for (int64_t cc = 0; cc < cpg; ++cc) {
                        const int64_t c = grp * cpg + cc;
                        const T gm = GA[c];
                        for (int64_t s = 0; s < S; ++s) {
                            const int64_t i = cc * S + s;
                            const T h = gp[i] * gm;
                            mh += h;
                            mhx += h * (xp[i] - mean) * istd;
                        }
                    }
                    mh /= static_cast<T>(N);
                    mhx /= static_cast<T>(N);
                    auto& gx = gg.gbuf(x);
                    T* gxp = gx.data.data() + grp * N;
                    for (int64_t cc = 0; cc < cpg; ++cc) {
                        const int64_t c = grp * cpg + cc;
                        const T gm = GA[c];
                        for (int64_t s = 0; s < S; ++s) {
                            const int64_t i = cc * S + s;
                            const T xhat = (xp[i] - mean) * istd;
                            gxp[i] += istd * (gp[i] * gm - mh - xhat * mhx);
                        }
                    }
                }
            }
        });
}

template <typename T>
Var silu(Graph<T>& g, Var x) {
    auto run = [](const Tensor<T>& xx) {
        Tensor<T> out = xx;
        for (auto& v : out.data) v = v * detail::sigmoid(v);
        return out;
    };
    return g.emit({x}, run(g.val(x)),
        [run](const Graph<T>& gg, const std::vector<Var>& in) { return run(gg.val(in[0])); },
        [x](Graph<T>& gg, Var self) {
            if (!gg.wants_grad(x)) return;
            const auto& go = gg.gout(self);
            const auto& X2 = gg.val(x);
            auto& gx = gg.gbuf(x);
            for (int64_t i = 0; i < go.numel(); ++i) {
                const T s = detail::sigmoid(X2[i]);
                gx[i] += go[i] * (s * (T(1) + X2[i] * (T(1) - s)));
            }
        });
}

// Row-wise softmax over the last dimension, max-subtracted for stability.
template <typename T>
Var softmax_lastdim(Graph<T>& g, Var x) {
    const auto& X = g.val(x);
    if (X.rank() < 1) throw ShapeError("softmax_lastdim: rank must be >= 1");
    const int64_t K = X.shape.back();
    auto run = [K](const Tensor<T>& xx) {
        Tensor<T> out = xx;
        const int64_t rows = xx.numel() / K;
        for (int64_t r = 0; r < rows; ++r) {
            T* p = out.data.data() + r * K;
            T mx = p[0];
            for (int64_t j = 1; j < K; ++j) mx = std::max(mx, p[j]);
            T sum = 0;
            for (int64_t j = 0; j < K; ++j) {
                p[j] = std::exp(p[j] - mx);
                sum += p[j];
            }
            for (int64_t j = 0; j < K; ++j) p[j] /= sum;
        }
        return out;
    };
    return g.emit({x}, run(X),
        [run](const Graph<T>& gg, const std::vector<Var>& in) { return run(gg.val(in[0])); },
        [x, K](Graph<T>& gg, Var self) {
            if (!gg.wants_grad(x)) return;
            const auto& go = gg.gout(self);
            const auto& Y = gg.val(self);
            auto& gx = gg.gbuf(x);
            const int64_t rows = Y.numel() / K;
            for (int64_t r = 0; r < rows; ++r) {
                const T* y = Y.data.data() + r * K;
                const T* gy = go.data.data() + r * K;
                T dot = 0;
                for (int64_t j = 0; j < K; ++j) dot += gy[j] * y[j];
                T* gp = gx.data.data() + r * K;
                for (int64_t j = 0; j < K; ++j) gp[j] += (gy[j] - dot) * y[j];
            }
        });
}

// Sum of all entries -> shape [1].
template <typename T>
Var sum_all(Graph<T>& g, Var x) {
    const auto& X = g.val(x);
    auto run = [](const Tensor<T>& xx) {
        Tensor<T> out({1});
        T acc = 0;
        for (T v : xx.data) acc += v;
        out[0] = acc;
        return out;
    };
    return g.emit({x}, run(X),
        [run](const Graph<T>& gg, const std::vector<Var>& in) { return run(gg.val(in[0])); },
        [x](Graph<T>& gg, Var self) {
            if (!gg.wants_grad(x)) return;
            const T go = gg.gout(self)[0];
            auto& gx = gg.gbuf(x);
            for (auto& v : gx.data) v += go;
        });
}

template <typename T>
Var mean_all(Graph<T>& g, Var x) {
    return scale(g, sum_all(g, x), 1.0 / static_cast<double>(g.val(x).numel()));
}

// Mean squared error between two same-shape tensors -> scalar.
template <typename T>
Var mse(Graph<T>& g, Var a, Var b) {
    Var d = sub(g, a, b);
    return mean_all(g, mul(g, d, d));
}

template <typename T>
Var reshape(Graph<T>& g, Var x, Shape target) {
    const auto& X = g.val(x);
    if (shape_numel(target) != X.numel())
        throw ShapeError("reshape: " + shape_str(X.shape) + " -> " + shape_str(target));
    auto run = [target](const Tensor<T>& xx) {
        Tensor<T> out = xx;
        out.shape = target;
        return out;
    };
    return g.emit({x}, run(X),
        [run](const Graph<T>& gg, const std::vector<Var>& in) { return run(gg.val(in[0])); },
        [x](Graph<T>& gg, Var self) {
            if (!gg.wants_grad(x)) return;
            const auto& go = gg.gout(self);
            auto& gx = gg.gbuf(x);
            for (int64_t i = 0; i < go.numel(); ++i) gx[i] += go[i];
        });
}

// [C,H,W] -> [H*W, C] token matrix (and back), for attention over positions.
template <typename T>
Var chw_to_tokens(Graph<T>& g, Var x) {
    const auto& X = g.val(x);
    if (X.rank() != 3) throw ShapeError("chw_to_tokens: need CxHxW");
    const int64_t C = X.shape[0], S = X.shape[1] * X.shape[2];
    auto run = [C, S](const Tensor<T>& xx) {
        Tensor<T> out({S, C});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t s = 0; s < S; ++s) out[s * C + c] = xx[c * S + s];
        return out;
    };
    return g.emit({x}, run(X),
        [run](const Graph<T>& gg, const std::vector<Var>& in) { return run(gg.val(in[0])); },
        [x, C, S](Graph<T>& gg, Var self) {
            if (!gg.wants_grad(x)) return;
            const auto& go = gg.gout(self);
            auto& gx = gg.gbuf(x);
            for (int64_t c = 0; c < C; ++c)
                for (int64_t s = 0; s < S; ++s) gx[c * S + s] += go[s * C + c];
        });
}

template <typename T>
Var tokens_to_chw(Graph<T>& g, Var x, Shape chw) {
    const auto& X = g.val(x);
    if (X.rank() != 2 || chw.size() != 3 || X.shape[0] != chw[1] * chw[2] || X.shape[1] != chw[0])
        throw ShapeError("tokens_to_chw: " + shape_str(X.shape) + " -> " + shape_str(chw));
    const int64_t C = chw[0], S = chw[1] * chw[2];
    auto run = [C, S, chw](const Tensor<T>& xx) {
        Tensor<T> out(chw);
        for (int64_t c = 0; c < C; ++c)
            for (int64_t s = 0; s < S; ++s) out[c * S + s] = xx[s * C + c];
        return out;
    };
    return g.emit({x}, run(X),
        [run](const Graph<T>& gg, const std::vector<Var>& in) { return run(gg.val(in[0])); },
        [x, C, S](Graph<T>& gg, Var self) {
            if (!gg.wants_grad(x)) return;
            const auto& go = gg.gout(self);
            auto& gx = gg.gbuf(x);
            for (int64_t c = 0; c < C; ++c)
                for (int64_t s = 0; s < S; ++s) gx[s * C + c] += go[c * S + s];
        });
}

// Concatenate along dim 0; trailing dims must agree.
template <typename T>
Var concat_dim0(Graph<T>& g, std::vector<Var> parts) {
    if (parts.empty()) throw ShapeError("concat_dim0: empty input list");
    Shape rest(g.val(parts[0]).shape.begin() + 1, g.val(parts[0]).shape.end());
    int64_t total = 0;
    for (Var v : parts) {
        const auto& s = g.val(v).shape;
        if (Shape(s.begin() + 1, s.end()) != rest)
            throw ShapeError("concat_dim0: trailing dims mismatch");
        total += s[0];
    }
    Shape out_shape = rest;
    out_shape.insert(out_shape.begin(), total);
    auto run = [out_shape](const Graph<T>& gg, const std::vector<Var>& in) {
        Tensor<T> out(out_shape);
        int64_t off = 0;
        for (Var v : in) {
            const auto& t = gg.val(v);
            std::copy(t.data.begin(), t.data.end(), out.data.begin() + off);
            off += t.numel();
        }
        return out;
    };
    Tensor<T> first = run(g, parts);
    std::vector<Var> ins = parts;
    return g.emit(std::move(parts), std::move(first), run,
        [ins](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            int64_t off = 0;
            for (Var v : ins) {
                const int64_t n = gg.val(v).numel();
                if (gg.wants_grad(v)) {
                    auto& gv = gg.gbuf(v);
                    for (int64_t i = 0; i < n; ++i) gv[i] += go[off + i];
                }
                off += n;
            }
        });
}

// Column slice of a 2-D tensor: x[L,D] -> x[:, start:start+len].
template <typename T>
Var slice_cols(Graph<T>& g, Var x, int64_t start, int64_t len) {
    const auto& X = g.val(x);
    if (X.rank() != 2 || start < 0 || start + len > X.shape[1])
        throw ShapeError("slice_cols: bad range");
    const int64_t L = X.shape[0], D = X.shape[1];
    auto run = [start, len, L, D](const Tensor<T>& xx) {
        Tensor<T> out({L, len});
        for (int64_t i = 0; i < L; ++i)
            for (int64_t j = 0; j < len; ++j) out[i * len + j] = xx[i * D + start + j];
        return out;
    };
    return g.emit({x}, run(X),
        [run](const Graph<T>& gg, const std::vector<Var>& in) { return run(gg.val(in[0])); },
        [x, start, len, L, D](Graph<T>& gg, Var self) {
            if (!gg.wants_grad(x)) return;
            const auto& go = gg.gout(self);
            auto& gx = gg.gbuf(x);
            for (int64_t i = 0; i < L; ++i)
                for (int64_t j = 0; j < len; ++j) gx[i * D + start + j] += go[i * len + j];
        });
}

// Concatenate 2-D tensors along columns (same row count).
template <typename T>
Var concat_cols(Graph<T>& g, std::vector<Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input list");
    const int64_t L = g.val(parts[0]).shape[0];
    int64_t D = 0;
    for (Var v : parts) {
        if (g.val(v).rank() != 2 || g.val(v).shape[0] != L)
            throw ShapeError("concat_cols: row count mismatch");
        D += g.val(v).shape[1];
    }
    auto run = [L, D](const Graph<T>& gg, const std::vector<Var>& in) {
        Tensor<T> out({L, D});
        int64_t off = 0;
        for (Var v : in) {
            const auto& t = gg.val(v);
            const int64_t d = t.shape[1];
            for (int64_t i = 0; i < L; ++i)
                for (int64_t j = 0; j < d; ++j) out[i * D + off + j] = t[i * d + j];
            off += d;
        }
        return out;
    };
    Tensor<T> first = run(g, parts);
    std::vector<Var> ins = parts;
    return g.emit(std::move(parts), std::move(first), run,
        [ins, L, D](Graph<T>& gg, Var self) {
            const auto& go = gg.gout(self);
            int64_t off = 0;
            for (Var v : ins) {
                const int64_t d = gg.val(v).shape[1];
                if (gg.wants_grad(v)) {
                    auto& gv = gg.gbuf(v);
                    for (int64_t i = 0; i < L; ++i)
                        for (int64_t j = 0; j < d; ++j) gv[i * d + j] += go[i * D + off + j];
                }
                off += d;
            }
        });
}

}  // namespace vd

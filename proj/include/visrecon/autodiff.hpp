#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "visrecon/tensor.hpp"

namespace visrecon {

// Reverse-mode tape. Nodes are created in topological order by the op
// builders below; backward() replays the tape in reverse. Each op stores a
// closure that accumulates into its inputs' gradients. Dead branches are
// skipped via the grad-allocation flag.
class Graph {
public:
    int next_id() const { return static_cast<int>(nodes_.size()); }

    int add_node(Tensor val, bool requires_grad, std::function<void(Graph&)> back = nullptr) {
        nodes_.push_back(Node{std::move(val), Tensor{}, std::move(back), requires_grad, false});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // differentiable leaf (parameter or probed input)
    int leaf(const Tensor& t) { return add_node(t, true); }
    // non-differentiable input
    int input(const Tensor& t) { return add_node(t, false); }

    const Tensor& val(int id) const { return nodes_[id].val; }

    Tensor& grad(int id) {
        Node& n = nodes_[id];
        if (!n.grad_alloc) {
            n.grad = Tensor(n.val.shape);
            n.grad_alloc = true;
        }
        return n.grad;
    }

    bool has_grad(int id) const { return nodes_[id].grad_alloc; }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    void backward(int root) {
        check(val(root).numel() == 1, "backward root must be scalar");
        grad(root)[0] = 1.0;
        for (int i = root; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.back && n.grad_alloc && n.requires_grad) n.back(*this);
        }
    }

    // ---- elementwise ----

    int add(int a, int b) {
        check(val(a).same_shape(val(b)), "add: shape mismatch");
        Tensor y = val(a) + val(b);
        return unop_binop(std::move(y), a, b, [](Graph& g, int a, int b, int out) {
            const Tensor& go = g.grad(out);
            if (g.requires_grad(a)) g.grad(a) += go;
            if (g.requires_grad(b)) g.grad(b) += go;
        });
    }

    int sub(int a, int b) {
        check(val(a).same_shape(val(b)), "sub: shape mismatch");
        Tensor y = val(a) - val(b);
        return unop_binop(std::move(y), a, b, [](Graph& g, int a, int b, int out) {
            const Tensor& go = g.grad(out);
            if (g.requires_grad(a)) g.grad(a) += go;
            if (g.requires_grad(b)) g.grad(b).vec() -= go.vec();
        });
    }

    int mul(int a, int b) {
        check(val(a).same_shape(val(b)), "mul: shape mismatch");
        Tensor y = val(a);
        y.vec().array() *= val(b).vec().array();
        return unop_binop(std::move(y), a, b, [](Graph& g, int a, int b, int out) {
            const Tensor& go = g.grad(out);
            if (g.requires_grad(a)) g.grad(a).vec().array() += go.vec().array() * g.val(b).vec().array();
            if (g.requires_grad(b)) g.grad(b).vec().array() += go.vec().array() * g.val(a).vec().array();
        });
    }

    int scale(int a, double s) {
        Tensor y = val(a);
        y *= s;
        bool rg = requires_grad(a);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [a, s, out](Graph& g) {
            if (g.requires_grad(a)) g.grad(a).vec() += s * g.grad(out).vec();
        });
    }

    int tanh_op(int a) {
        Tensor y = val(a);
        for (double& x : y.v) x = std::tanh(x);
        bool rg = requires_grad(a);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [a, out](Graph& g) {
            if (!g.requires_grad(a)) return;
            const Tensor& yo = g.val(out);
            const Tensor& go = g.grad(out);
            Tensor& ga = g.grad(a);
            for (int i = 0; i < yo.numel(); ++i) ga.v[i] += go.v[i] * (1.0 - yo.v[i] * yo.v[i]);
        });
    }

    int silu(int a) {
        Tensor y = val(a);
        for (double& x : y.v) x = x / (1.0 + std::exp(-x));
        bool rg = requires_grad(a);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [a, out](Graph& g) {
            if (!g.requires_grad(a)) return;
            const Tensor& xa = g.val(a);
            const Tensor& go = g.grad(out);
            Tensor& ga = g.grad(a);
            for (int i = 0; i < xa.numel(); ++i) {
                double s = 1.0 / (1.0 + std::exp(-xa.v[i]));
                ga.v[i] += go.v[i] * s * (1.0 + xa.v[i] * (1.0 - s));
            }
        });
    }

    // ---- shape plumbing ----

    int reshape(int a, std::vector<int> shape) {
        Tensor y = val(a).reshaped(std::move(shape));
        bool rg = requires_grad(a);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [a, out](Graph& g) {
            if (g.requires_grad(a)) g.grad(a).vec() += g.grad(out).vec();
        });
    }

    int transpose2d(int a) {
        const Tensor& x = val(a);
        check(x.rank() == 2, "transpose2d: rank-2 only");
        int n = x.shape[0], m = x.shape[1];
        Tensor y({m, n});
        y.mat(m, n) = x.mat(n, m).transpose();
        bool rg = requires_grad(a);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [a, n, m, out](Graph& g) {
            if (g.requires_grad(a)) g.grad(a).mat(n, m) += g.grad(out).mat(m, n).transpose();
        });
    }

    // y.flat[i] = x.flat[idx[i]]; idx entries may repeat
    int gather(int x, std::vector<int> idx, std::vector<int> out_shape) {
        Tensor y(std::move(out_shape));
        check(static_cast<int>(idx.size()) == y.numel(), "gather: index/shape mismatch");
        const Tensor& xv = val(x);
        for (int i = 0; i < y.numel(); ++i) {
            check(idx[i] >= 0 && idx[i] < xv.numel(), "gather: index out of range");
            y.v[i] = xv.v[idx[i]];
        }
        bool rg = requires_grad(x);
        auto ix = std::make_shared<std::vector<int>>(std::move(idx));
        int out = next_id();
        return add_node(std::move(y), rg, [x, ix, out](Graph& g) {
            if (!g.requires_grad(x)) return;
            const Tensor& go = g.grad(out);
            Tensor& gx = g.grad(x);
            for (int i = 0; i < go.numel(); ++i) gx.v[(*ix)[i]] += go.v[i];
        });
    }

    int concat_cols(const std::vector<int>& parts) {
        check(!parts.empty(), "concat_cols: empty");
        int n = val(parts[0]).shape[0];
        int total = 0;
        bool rg = false;
        for (int p : parts) {
            check(val(p).rank() == 2 && val(p).shape[0] == n, "concat_cols: row mismatch");
            total += val(p).shape[1];
            rg = rg || requires_grad(p);
        }
        Tensor y({n, total});
        int off = 0;
        for (int p : parts) {
            int d = val(p).shape[1];
            y.mat(n, total).block(0, off, n, d) = val(p).mat(n, d);
            off += d;
        }
        std::vector<int> ps = parts;
        int out = next_id();
        return add_node(std::move(y), rg,
                        [ps, n, total, out](Graph& g) {
            auto go = g.grad(out).mat(n, total);
            int off = 0;
            for (int p : ps) {
                int d = g.val(p).shape[1];
                if (g.requires_grad(p)) g.grad(p).mat(n, d) += go.block(0, off, n, d);
                off += d;
            }
        });
    }

    // ---- linear algebra ----

    // x[N,K] * w[M,K]^T + b[M] -> [N,M]; pass b = -1 to skip bias
    int linear(int x, int w, int b) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        check(xv.rank() == 2 && wv.rank() == 2 && xv.shape[1] == wv.shape[1], "linear: shape mismatch");
        int n = xv.shape[0], k = xv.shape[1], m = wv.shape[0];
        Tensor y({n, m});
        y.mat(n, m).noalias() = xv.mat(n, k) * wv.mat(m, k).transpose();
        if (b >= 0) {
            check(val(b).numel() == m, "linear: bias size mismatch");
            y.mat(n, m).rowwise() += val(b).vec().transpose();
        }
        bool rg = requires_grad(x) || requires_grad(w) || (b >= 0 && requires_grad(b));
        int out = next_id();
        return add_node(std::move(y), rg,
                        [x, w, b, n, k, m, out](Graph& g) {
            auto go = g.grad(out).mat(n, m);
            if (g.requires_grad(x)) g.grad(x).mat(n, k).noalias() += go * g.val(w).mat(m, k);
            if (g.requires_grad(w)) g.grad(w).mat(m, k).noalias() += go.transpose() * g.val(x).mat(n, k);
            if (b >= 0 && g.requires_grad(b)) g.grad(b).vec() += go.colwise().sum().transpose();
        });
    }

    // general matmul with transpose flags
    int matmul(int a, int b, bool ta, bool tb) {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        check(av.rank() == 2 && bv.rank() == 2, "matmul: rank-2 only");
        int ar = av.shape[0], ac = av.shape[1], br = bv.shape[0], bc = bv.shape[1];
        int m = ta ? ac : ar, ka = ta ? ar : ac;
        int kb = tb ? bc : br, n = tb ? br : bc;
        check(ka == kb, "matmul: inner dim mismatch");
        Tensor y({m, n});
        auto A = av.mat(ar, ac);
        auto B = bv.mat(br, bc);
        auto Y = y.mat(m, n);
        if (!ta && !tb) Y.noalias() = A * B;
        else if (!ta && tb) Y.noalias() = A * B.transpose();
        else if (ta && !tb) Y.noalias() = A.transpose() * B;
        else Y.noalias() = A.transpose() * B.transpose();
        bool rg = requires_grad(a) || requires_grad(b);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [a, b, ta, tb, ar, ac, br, bc, m, n, out](Graph& g) {
            auto GO = g.grad(out).mat(m, n);
            auto A = g.val(a).mat(ar, ac);
            auto B = g.val(b).mat(br, bc);
            if (g.requires_grad(a)) {
                auto GA = g.grad(a).mat(ar, ac);
                if (!ta && !tb) GA.noalias() += GO * B.transpose();
                else if (!ta && tb) GA.noalias() += GO * B;
                else if (ta && !tb) GA.noalias() += B * GO.transpose();
                else GA.noalias() += B.transpose() * GO.transpose();
            }
            if (g.requires_grad(b)) {
                auto GB = g.grad(b).mat(br, bc);
                if (!ta && !tb) GB.noalias() += A.transpose() * GO;
                else if (!ta && tb) GB.noalias() += GO.transpose() * A;
                else if (ta && !tb) GB.noalias() += A * GO;
                else GB.noalias() += GO.transpose() * A.transpose();
            }
        });
    }

    // rows of x[N,D] scaled to unit length
    int row_normalize(int x) {
        const Tensor& xv = val(x);
        check(xv.rank() == 2, "row_normalize: rank-2 only");
        int n = xv.shape[0], d = xv.shape[1];
        Tensor y = xv;
        std::vector<double> norms(n);
        for (int i = 0; i < n; ++i) {
            double s = ConstVecMap(xv.v.data() + i * d, d).norm();
            check(s > 0.0, "row_normalize: zero row");
            norms[i] = s;
            VecMap(y.v.data() + i * d, d) /= s;
        }
        bool rg = requires_grad(x);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [x, n, d, norms, out](Graph& g) {
            if (!g.requires_grad(x)) return;
            const Tensor& yo = g.val(out);
            const Tensor& go = g.grad(out);
            Tensor& gx = g.grad(x);
            for (int i = 0; i < n; ++i) {
                ConstVecMap yi(yo.v.data() + i * d, d);
                ConstVecMap gi(go.v.data() + i * d, d);
                double dp = gi.dot(yi);
                VecMap(gx.v.data() + i * d, d) += (gi - dp * yi) / norms[i];
            }
        });
    }

    // ---- conv ops (NCHW, square kernels) ----

    // x[N,C,H,W], w[O,C,kh,kw], bias b[O] or -1; zero padding
    int conv2d(int x, int w, int b, int stride, int pad) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        check(xv.rank() == 4 && wv.rank() == 4 && xv.shape[1] == wv.shape[1], "conv2d: shape mismatch");
        int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
        int O = wv.shape[0], kh = wv.shape[2], kw = wv.shape[3];
        int Ho = (H + 2 * pad - kh) / stride + 1;
        int Wo = (W + 2 * pad - kw) / stride + 1;
        check(Ho > 0 && Wo > 0, "conv2d: empty output");
        int K = C * kh * kw, P = Ho * Wo;

        auto cols = std::make_shared<Tensor>(std::vector<int>{N, K, P});
        for (int nIdx = 0; nIdx < N; ++nIdx)
            im2col(xv.v.data() + nIdx * C * H * W, C, H, W, kh, kw, stride, pad, Ho, Wo,
                   cols->v.data() + nIdx * K * P);

        Tensor y({N, O, Ho, Wo});
        ConstMatMap Wm(wv.v.data(), O, K);
        for (int nIdx = 0; nIdx < N; ++nIdx) {
            MatMap Ym(y.v.data() + nIdx * O * P, O, P);
            ConstMatMap Km(cols->v.data() + nIdx * K * P, K, P);
            Ym.noalias() = Wm * Km;
            if (b >= 0) Ym.colwise() += val(b).vec();
        }
        bool rg = requires_grad(x) || requires_grad(w) || (b >= 0 && requires_grad(b));
        int out = next_id();
        return add_node(std::move(y), rg,
                        [x, w, b, stride, pad, N, C, H, W, O, kh, kw, Ho, Wo, K, P, cols, out](Graph& g) {
            const Tensor& go = g.grad(out);
            ConstMatMap Wm(g.val(w).v.data(), O, K);
            for (int nIdx = 0; nIdx < N; ++nIdx) {
                ConstMatMap GYm(go.v.data() + nIdx * O * P, O, P);
                if (g.requires_grad(w)) {
                    ConstMatMap Km(cols->v.data() + nIdx * K * P, K, P);
                    g.grad(w).mat(O, K).noalias() += GYm * Km.transpose();
                }
                if (b >= 0 && g.requires_grad(b)) g.grad(b).vec() += GYm.rowwise().sum();
                if (g.requires_grad(x)) {
                    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> GK = Wm.transpose() * GYm;
                    col2im_add(GK.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                               g.grad(x).v.data() + nIdx * C * H * W);
                }
            }
        });
    }

    // transposed conv, stride-s upsampling, no padding: out = (H-1)*s + kh
    // x[N,C,H,W], w[C,O,kh,kw], bias b[O] or -1
    int conv2d_transpose(int x, int w, int b, int stride) {
        const Tensor& xv = val(x);
        const Tensor& wv = val(w);
        check(xv.rank() == 4 && wv.rank() == 4 && xv.shape[1] == wv.shape[0], "conv2d_transpose: shape mismatch");
        int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
        int O = wv.shape[1], kh = wv.shape[2], kw = wv.shape[3];
        int Ho = (H - 1) * stride + kh, Wo = (W - 1) * stride + kw;
        int K = O * kh * kw, P = H * W;

        Tensor y({N, O, Ho, Wo});
        ConstMatMap Wm(wv.v.data(), C, K);
        for (int nIdx = 0; nIdx < N; ++nIdx) {
            ConstMatMap Xm(xv.v.data() + nIdx * C * P, C, P);
            Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> M = Wm.transpose() * Xm;
            scatter_patches(M.data(), O, kh, kw, H, W, stride, y.v.data() + nIdx * O * Ho * Wo, Ho, Wo);
            if (b >= 0) {
                MatMap Ym(y.v.data() + nIdx * O * Ho * Wo, O, Ho * Wo);
                Ym.colwise() += val(b).vec();
            }
        }
        bool rg = requires_grad(x) || requires_grad(w) || (b >= 0 && requires_grad(b));
        int out = next_id();
        return add_node(std::move(y), rg,
                        [x, w, b, stride, N, C, H, W, O, kh, kw, Ho, Wo, K, P, out](Graph& g) {
            const Tensor& go = g.grad(out);
            ConstMatMap Wm(g.val(w).v.data(), C, K);
            for (int nIdx = 0; nIdx < N; ++nIdx) {
                Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> GM(K, P);
                gather_patches(go.v.data() + nIdx * O * Ho * Wo, O, kh, kw, H, W, stride, Ho, Wo, GM.data());
                if (g.requires_grad(x)) {
                    MatMap GXm(g.grad(x).v.data() + nIdx * C * P, C, P);
                    GXm.noalias() += Wm * GM;
                }
                if (g.requires_grad(w)) {
                    ConstMatMap Xm(g.val(x).v.data() + nIdx * C * P, C, P);
                    g.grad(w).mat(C, K).noalias() += Xm * GM.transpose();
                }
                if (b >= 0 && g.requires_grad(b)) {
                    ConstMatMap GYm(go.v.data() + nIdx * O * Ho * Wo, O, Ho * Wo);
                    g.grad(b).vec() += GYm.rowwise().sum();
                }
            }
        });
    }

    // x[N,C,H,W] + t[N,C] broadcast over spatial dims
    int bias_nchw(int x, int t) {
        const Tensor& xv = val(x);
        const Tensor& tv = val(t);
        check(xv.rank() == 4 && tv.rank() == 2 && xv.shape[0] == tv.shape[0] && xv.shape[1] == tv.shape[1],
              "bias_nchw: shape mismatch");
        int N = xv.shape[0], C = xv.shape[1], HW = xv.shape[2] * xv.shape[3];
        Tensor y = xv;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                double bb = tv.v[n * C + c];
                double* p = y.v.data() + (n * C + c) * HW;
                for (int i = 0; i < HW; ++i) p[i] += bb;
            }
        bool rg = requires_grad(x) || requires_grad(t);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [x, t, N, C, HW, out](Graph& g) {
            const Tensor& go = g.grad(out);
            if (g.requires_grad(x)) g.grad(x).vec() += go.vec();
            if (g.requires_grad(t)) {
                Tensor& gt = g.grad(t);
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const double* p = go.v.data() + (n * C + c) * HW;
                        double s = 0.0;
                        for (int i = 0; i < HW; ++i) s += p[i];
                        gt.v[n * C + c] += s;
                    }
            }
        });
    }

    // ---- token ops (x[N,T,D]) ----

    // y[n,s,:] = sum_t A[s,t] x[n,t,:]
    int token_mix(int x, int a) {
        const Tensor& xv = val(x);
        const Tensor& av = val(a);
        check(xv.rank() == 3 && av.rank() == 2 && av.shape[1] == xv.shape[1], "token_mix: shape mismatch");
        int N = xv.shape[0], T = xv.shape[1], D = xv.shape[2], S = av.shape[0];
        Tensor y({N, S, D});
        ConstMatMap Am(av.v.data(), S, T);
        for (int n = 0; n < N; ++n) {
            ConstMatMap Xm(xv.v.data() + n * T * D, T, D);
            MatMap Ym(y.v.data() + n * S * D, S, D);
            Ym.noalias() = Am * Xm;
        }
        bool rg = requires_grad(x) || requires_grad(a);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [x, a, N, T, D, S, out](Graph& g) {
            const Tensor& go = g.grad(out);
            ConstMatMap Am(g.val(a).v.data(), S, T);
            for (int n = 0; n < N; ++n) {
                ConstMatMap GYm(go.v.data() + n * S * D, S, D);
                if (g.requires_grad(x)) {
                    MatMap GXm(g.grad(x).v.data() + n * T * D, T, D);
                    GXm.noalias() += Am.transpose() * GYm;
                }
                if (g.requires_grad(a)) {
                    ConstMatMap Xm(g.val(x).v.data() + n * T * D, T, D);
                    g.grad(a).mat(S, T).noalias() += GYm * Xm.transpose();
                }
            }
        });
    }

    // softmax(u)-weighted pooling over tokens: c[N,T,D], u[T] -> [N,D]
    int token_pool(int c, int u) {
        const Tensor& cv = val(c);
        const Tensor& uv = val(u);
        check(cv.rank() == 3 && uv.numel() == cv.shape[1], "token_pool: shape mismatch");
        int N = cv.shape[0], T = cv.shape[1], D = cv.shape[2];
        std::vector<double> wts(T);
        double mx = uv.max();
        double z = 0.0;
        for (int t = 0; t < T; ++t) {
            wts[t] = std::exp(uv.v[t] - mx);
            z += wts[t];
        }
        for (double& w : wts) w /= z;
        Tensor y({N, D});
        for (int n = 0; n < N; ++n) {
            VecMap yn(y.v.data() + n * D, D);
            for (int t = 0; t < T; ++t)
                yn += wts[t] * ConstVecMap(cv.v.data() + (n * T + t) * D, D);
        }
        bool rg = requires_grad(c) || requires_grad(u);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [c, u, N, T, D, wts, out](Graph& g) {
            const Tensor& go = g.grad(out);
            const Tensor& cv = g.val(c);
            if (g.requires_grad(c)) {
                Tensor& gc = g.grad(c);
                for (int n = 0; n < N; ++n)
                    for (int t = 0; t < T; ++t)
                        VecMap(gc.v.data() + (n * T + t) * D, D) +=
                            wts[t] * ConstVecMap(go.v.data() + n * D, D);
            }
            if (g.requires_grad(u)) {
                std::vector<double> r(T, 0.0);
                for (int t = 0; t < T; ++t)
                    for (int n = 0; n < N; ++n)
                        r[t] += ConstVecMap(go.v.data() + n * D, D)
                                    .dot(ConstVecMap(cv.v.data() + (n * T + t) * D, D));
                double rbar = 0.0;
                for (int t = 0; t < T; ++t) rbar += wts[t] * r[t];
                Tensor& gu = g.grad(u);
                for (int t = 0; t < T; ++t) gu.v[t] += wts[t] * (r[t] - rbar);
            }
        });
    }

    // mean over tokens: c[N,T,D] -> [N,D]
    int token_mean(int c) {
        const Tensor& cv = val(c);
        check(cv.rank() == 3, "token_mean: rank-3 only");
        int N = cv.shape[0], T = cv.shape[1], D = cv.shape[2];
        Tensor y({N, D});
        for (int n = 0; n < N; ++n) {
            VecMap yn(y.v.data() + n * D, D);
            for (int t = 0; t < T; ++t) yn += ConstVecMap(cv.v.data() + (n * T + t) * D, D);
            yn /= static_cast<double>(T);
        }
        bool rg = requires_grad(c);
        int out = next_id();
        return add_node(std::move(y), rg,
                        [c, N, T, D, out](Graph& g) {
            if (!g.requires_grad(c)) return;
            const Tensor& go = g.grad(out);
            Tensor& gc = g.grad(c);
            for (int n = 0; n < N; ++n)
                for (int t = 0; t < T; ++t)
                    VecMap(gc.v.data() + (n * T + t) * D, D) +=
                        ConstVecMap(go.v.data() + n * D, D) / static_cast<double>(T);
        });
    }

    // ---- reductions and losses ----

    int sum_sq(int a) {
        double s = val(a).vec().squaredNorm();
        bool rg = requires_grad(a);
        int out = next_id();
        return add_node(Tensor::scalar(s), rg,
                        [a, out](Graph& g) {
            if (g.requires_grad(a)) g.grad(a).vec() += 2.0 * g.grad(out)[0] * g.val(a).vec();
        });
    }

    int mean_sq_err(int a, int b) {
        check(val(a).numel() == val(b).numel(), "mean_sq_err: size mismatch");
        int n = val(a).numel();
        double s = (val(a).vec() - val(b).vec()).squaredNorm() / n;
        bool rg = requires_grad(a) || requires_grad(b);
        int out = next_id();
        return add_node(Tensor::scalar(s), rg,
                        [a, b, n, out](Graph& g) {
            double c = 2.0 * g.grad(out)[0] / n;
            Eigen::VectorXd d = g.val(a).vec() - g.val(b).vec();
            if (g.requires_grad(a)) g.grad(a).vec() += c * d;
            if (g.requires_grad(b)) g.grad(b).vec() -= c * d;
        });
    }

    int mean_abs_err(int a, int b) {
        check(val(a).numel() == val(b).numel(), "mean_abs_err: size mismatch");
        int n = val(a).numel();
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += std::abs(val(a).v[i] - val(b).v[i]);
        s /= n;
        bool rg = requires_grad(a) || requires_grad(b);
        int out = next_id();
        return add_node(Tensor::scalar(s), rg,
                        [a, b, n, out](Graph& g) {
            double c = g.grad(out)[0] / n;
            for (int i = 0; i < n; ++i) {
                double d = g.val(a).v[i] - g.val(b).v[i];
                double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                if (g.requires_grad(a)) g.grad(a).v[i] += c * sg;
                if (g.requires_grad(b)) g.grad(b).v[i] -= c * sg;
            }
        });
    }

    // -sum_ij T[i,j] * log softmax_row(S)[i,j]; caller applies 1/N scaling
    int soft_ce_rows(int s, int t) {
        const Tensor& sv = val(s);
        const Tensor& tv = val(t);
        check(sv.rank() == 2 && sv.same_shape(tv), "soft_ce_rows: shape mismatch");
        int n = sv.shape[0], m = sv.shape[1];
        auto probs = std::make_shared<Tensor>(std::vector<int>{n, m});
        double loss = 0.0;
        for (int i = 0; i < n; ++i) {
            const double* row = sv.v.data() + i * m;
            double mx = row[0];
            for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int j = 0; j < m; ++j) z += std::exp(row[j] - mx);
            double logz = std::log(z) + mx;
            for (int j = 0; j < m; ++j) {
                probs->v[i * m + j] = std::exp(row[j] - logz);
                loss -= tv.v[i * m + j] * (row[j] - logz);
            }
        }
        bool rg = requires_grad(s);
        int out = next_id();
        return add_node(Tensor::scalar(loss), rg,
                        [s, t, n, m, probs, out](Graph& g) {
            if (!g.requires_grad(s)) return;
            double c = g.grad(out)[0];
            const Tensor& tv = g.val(t);
            Tensor& gs = g.grad(s);
            for (int i = 0; i < n; ++i) {
                double tsum = 0.0;
                for (int j = 0; j < m; ++j) tsum += tv.v[i * m + j];
                for (int j = 0; j < m; ++j)
                    gs.v[i * m + j] += c * (tsum * probs->v[i * m + j] - tv.v[i * m + j]);
            }
        });
    }

    int sum_scalars(const std::vector<int>& ids) {
        check(!ids.empty(), "sum_scalars: empty");
        double s = 0.0;
        bool rg = false;
        for (int id : ids) {
            check(val(id).numel() == 1, "sum_scalars: non-scalar input");
            s += val(id)[0];
            rg = rg || requires_grad(id);
        }
        std::vector<int> v = ids;
        int out = next_id();
        return add_node(Tensor::scalar(s), rg,
                        [v, out](Graph& g) {
            for (int id : v)
                if (g.requires_grad(id)) g.grad(id)[0] += g.grad(out)[0];
        });
    }

private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Graph&)> back;
        bool requires_grad = false;
        bool grad_alloc = false;
    };

    template <typename Fn>
    int unop_binop(Tensor y, int a, int b, Fn fn) {
        bool rg = requires_grad(a) || requires_grad(b);
        int out = next_id();
        return add_node(std::move(y), rg, [a, b, out, fn](Graph& g) { fn(g, a, b, out); });
    }

    static void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int Ho, int Wo, double* out) {
        int P = Ho * Wo;
        for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    double* row = out + ((c * kh + ki) * kw + kj) * P;
                    for (int oi = 0; oi < Ho; ++oi) {
                        int ii = oi * stride + ki - pad;
                        for (int oj = 0; oj < Wo; ++oj) {
                            int jj = oj * stride + kj - pad;
                            row[oi * Wo + oj] =
                                (ii >= 0 && ii < H && jj >= 0 && jj < W) ? x[(c * H + ii) * W + jj] : 0.0;
                        }
                    }
                }
    }

    static void col2im_add(const double* cols, int C, int H, int W, int kh, int kw, int stride,
                           int pad, int Ho, int Wo, double* gx) {
        int P = Ho * Wo;
        for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    const double* row = cols + ((c * kh + ki) * kw + kj) * P;
                    for (int oi = 0; oi < Ho; ++oi) {
                        int ii = oi * stride + ki - pad;
                        if (ii < 0 || ii >= H) continue;
                        for (int oj = 0; oj < Wo; ++oj) {
                            int jj = oj * stride + kj - pad;
                            if (jj >= 0 && jj < W) gx[(c * H + ii) * W + jj] += row[oi * Wo + oj];
                        }
                    }
                }
    }

    // used by conv2d_transpose: M[O*kh*kw, H*W] patches added into y[O,Ho,Wo]
    static void scatter_patches(const double* m, int O, int kh, int kw, int H, int W, int stride,
                                double* y, int Ho, int Wo) {
        int P = H * W;
        for (int o = 0; o < O; ++o)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    const double* row = m + ((o * kh + ki) * kw + kj) * P;
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j)
                            y[(o * Ho + i * stride + ki) * Wo + j * stride + kj] += row[i * W + j];
                }
    }

    static void gather_patches(const double* gy, int O, int kh, int kw, int H, int W, int stride,
                               int Ho, int Wo, double* gm) {
        int P = H * W;
        for (int o = 0; o < O; ++o)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    double* row = gm + ((o * kh + ki) * kw + kj) * P;
                    for (int i = 0; i < H; ++i)
                        for (int j = 0; j < W; ++j)
                            row[i * W + j] = gy[(o * Ho + i * stride + ki) * Wo + j * stride + kj];
                }
    }

    std::vector<Node> nodes_;
};

}  // namespace visrecon

#include "ntok/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace ntok {

namespace {

template <typename T>
size_t rows_of(const Tensor<T>& t, int trailing) {
    size_t r = 1;
    for (int i = 0; i + trailing < t.rank(); ++i) r *= static_cast<size_t>(t.dim(i));
    return r;
}

} // namespace

template <typename T>
VarId Graph<T>::push(Tensor<T> value, bool rg, std::function<void(Graph<T>&)> back) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size() - 1);
}

template <typename T>
VarId Graph<T>::leaf(Tensor<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

template <typename T>
void Graph<T>::backward(VarId root) {
    Node& r = node(root);
    if (r.value.numel() != 1)
        throw ContractError("backward: root must be a scalar");
    for (Node& n : nodes_) {
        if (n.requires_grad) {
            n.grad = Tensor<T>(n.value.dims);
        }
    }
    if (!r.requires_grad)
        throw ContractError("backward: root does not require grad");
    r.grad.data[0] = T(1);
    for (size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (n.requires_grad && n.back) n.back(*this);
    }
}

// ---------------------------------------------------------------------------
// elementwise / linear algebra
// ---------------------------------------------------------------------------

template <typename T>
VarId Graph<T>::add(VarId a, VarId b) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(b);
    if (va.dims != vb.dims)
        throw DimensionError("add: shape mismatch " + va.shape_str() + " vs " + vb.shape_str());
    Tensor<T> out = va;
    const T* pb = vb.ptr();
    T* po = out.ptr();
    for (size_t i = 0; i < out.numel(); ++i) po[i] += pb[i];
    bool rg = requires_grad(a) || requires_grad(b);
    VarId id = push(std::move(out), rg, nullptr);
    node(id).back = [a, b, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* ga = g.grad_ptr(a))
            for (size_t i = 0; i < dy.numel(); ++i) ga->data[i] += dy.data[i];
        if (auto* gb = g.grad_ptr(b))
            for (size_t i = 0; i < dy.numel(); ++i) gb->data[i] += dy.data[i];
    };
    return id;
}

template <typename T>
VarId Graph<T>::sub(VarId a, VarId b) {
    const Tensor<T>& va = val(a);
    const Tensor<T>& vb = val(b);
    if (va.dims != vb.dims)
        throw DimensionError("sub: shape mismatch");
    Tensor<T> out = va;
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] -= vb.data[i];
    bool rg = requires_grad(a) || requires_grad(b);
    VarId id = push(std::move(out), rg, nullptr);
    node(id).back = [a, b, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* ga = g.grad_ptr(a))
            for (size_t i = 0; i < dy.numel(); ++i) ga->data[i] += dy.data[i];
        if (auto* gb = g.grad_ptr(b))
            for (size_t i = 0; i < dy.numel(); ++i) gb->data[i] -= dy.data[i];
    };
    return id;
}

template <typename T>
VarId Graph<T>::add_broadcast(VarId x, VarId p) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vp = val(p);
    int xr = vx.rank(), pr = vp.rank();
    if (pr > xr)
        throw DimensionError("add_broadcast: operand rank exceeds input rank");
    for (int i = 0; i < pr; ++i)
        if (vp.dim(i) != vx.dim(xr - pr + i))
            throw DimensionError("add_broadcast: " + vp.shape_str() + " is not a suffix of " + vx.shape_str());
    size_t pn = vp.numel();
    size_t reps = vx.numel() / pn;
    Tensor<T> out = vx;
    for (size_t r = 0; r < reps; ++r) {
        T* po = out.ptr() + r * pn;
        const T* pp = vp.ptr();
        for (size_t i = 0; i < pn; ++i) po[i] += pp[i];
    }
    bool rg = requires_grad(x) || requires_grad(p);
    VarId id = push(std::move(out), rg, nullptr);
    node(id).back = [x, p, pn, reps, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gx = g.grad_ptr(x))
            for (size_t i = 0; i < dy.numel(); ++i) gx->data[i] += dy.data[i];
        if (auto* gp = g.grad_ptr(p)) {
            for (size_t r = 0; r < reps; ++r) {
                const T* pd = dy.ptr() + r * pn;
                T* pg = gp->ptr();
                for (size_t i = 0; i < pn; ++i) pg[i] += pd[i];
            }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::scale(VarId x, T c) {
    Tensor<T> out = val(x);
    for (T& v : out.data) v *= c;
    VarId id = push(std::move(out), requires_grad(x), nullptr);
    node(id).back = [x, c, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gx = g.grad_ptr(x))
            for (size_t i = 0; i < dy.numel(); ++i) gx->data[i] += c * dy.data[i];
    };
    return id;
}

template <typename T>
VarId Graph<T>::matmul(VarId x, VarId w) {
    const Tensor<T>& vx = val(x);
    const Tensor<T>& vw = val(w);
    if (vw.rank() != 2)
        throw DimensionError("matmul: weight must be rank 2");
    int K = vw.dim(0), N = vw.dim(1);
    if (vx.dim(vx.rank() - 1) != K)
        throw DimensionError("matmul: inner dims differ, " + vx.shape_str() + " x " + vw.shape_str());
    size_t R = rows_of(vx, 1);
    std::vector<int> odims(vx.dims.begin(), vx.dims.end() - 1);
    odims.push_back(N);
    Tensor<T> out(odims);
    {
        const T* px = vx.ptr();
        const T* pw = vw.ptr();
        T* po = out.ptr();
        for (size_t r = 0; r < R; ++r) {
            const T* xr = px + r * static_cast<size_t>(K);
            T* orow = po + r * static_cast<size_t>(N);
            for (int k = 0; k < K; ++k) {
                T a = xr[k];
                const T* wrow = pw + static_cast<size_t>(k) * N;
                for (int n = 0; n < N; ++n) orow[n] += a * wrow[n];
            }
        }
    }
    bool rg = requires_grad(x) || requires_grad(w);
    VarId id = push(std::move(out), rg, nullptr);
    node(id).back = [x, w, R, K, N, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        const T* pdy = dy.ptr();
        if (auto* gx = g.grad_ptr(x)) {
            const T* pw = g.val(w).ptr();
            T* pgx = gx->ptr();
            for (size_t r = 0; r < R; ++r) {
                const T* dyr = pdy + r * static_cast<size_t>(N);
                T* gxr = pgx + r * static_cast<size_t>(K);
                for (int k = 0; k < K; ++k) {
                    const T* wrow = pw + static_cast<size_t>(k) * N;
                    T acc = T(0);
                    for (int n = 0; n < N; ++n) acc += dyr[n] * wrow[n];
                    gxr[k] += acc;
                }
            }
        }
        if (auto* gw = g.grad_ptr(w)) {
            const T* px = g.val(x).ptr();
            T* pgw = gw->ptr();
            for (size_t r = 0; r < R; ++r) {
                const T* xr = px + r * static_cast<size_t>(K);
                const T* dyr = pdy + r * static_cast<size_t>(N);
                for (int k = 0; k < K; ++k) {
                    T a = xr[k];
                    if (a == T(0)) continue;
                    T* gwrow = pgw + static_cast<size_t>(k) * N;
                    for (int n = 0; n < N; ++n) gwrow[n] += a * dyr[n];
                }
            }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::layer_norm(VarId x, VarId gamma, VarId beta, T eps) {
    const Tensor<T>& vx = val(x);
    int D = vx.dim(vx.rank() - 1);
    const Tensor<T>& vg = val(gamma);
    const Tensor<T>& vb = val(beta);
    if (vg.dims != std::vector<int>{D} || vb.dims != std::vector<int>{D})
        throw DimensionError("layer_norm: affine params must be [D]");
    size_t R = rows_of(vx, 1);
    Tensor<T> out(vx.dims);
    auto xhat = std::make_shared<Tensor<T>>(vx.dims);
    auto inv = std::make_shared<std::vector<T>>(R);
    {
        const T* px = vx.ptr();
        const T* pg = vg.ptr();
        const T* pb = vb.ptr();
        T* po = out.ptr();
        T* ph = xhat->ptr();
        for (size_t r = 0; r < R; ++r) {
            const T* xr = px + r * static_cast<size_t>(D);
            T mu = T(0);
            for (int j = 0; j < D; ++j) mu += xr[j];
            mu /= static_cast<T>(D);
            T var = T(0);
            for (int j = 0; j < D; ++j) {
                T d = xr[j] - mu;
                var += d * d;
            }
            var /= static_cast<T>(D);
            T iv = T(1) / std::sqrt(var + eps);
            (*inv)[r] = iv;
            T* hr = ph + r * static_cast<size_t>(D);
            T* orow = po + r * static_cast<size_t>(D);
            for (int j = 0; j < D; ++j) {
                hr[j] = (xr[j] - mu) * iv;
                orow[j] = pg[j] * hr[j] + pb[j];
            }
        }
    }
    bool rg = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    VarId id = push(std::move(out), rg, nullptr);
    node(id).back = [x, gamma, beta, R, D, xhat, inv, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        const T* pdy = dy.ptr();
        const T* ph = xhat->ptr();
        const T* pg = g.val(gamma).ptr();
        if (auto* gx = g.grad_ptr(x)) {
            T* pgx = gx->ptr();
            for (size_t r = 0; r < R; ++r) {
                const T* dyr = pdy + r * static_cast<size_t>(D);
                const T* hr = ph + r * static_cast<size_t>(D);
                T* gxr = pgx + r * static_cast<size_t>(D);
                T m1 = T(0), m2 = T(0);
                for (int j = 0; j < D; ++j) {
                    T dh = dyr[j] * pg[j];
                    m1 += dh;
                    m2 += dh * hr[j];
                }
                m1 /= static_cast<T>(D);
                m2 /= static_cast<T>(D);
                T iv = (*inv)[r];
                for (int j = 0; j < D; ++j) {
                    T dh = dyr[j] * pg[j];
                    gxr[j] += iv * (dh - m1 - hr[j] * m2);
                }
            }
        }
        if (auto* gg = g.grad_ptr(gamma)) {
            T* p = gg->ptr();
            for (size_t r = 0; r < R; ++r)
                for (int j = 0; j < D; ++j)
                    p[j] += pdy[r * D + j] * ph[r * D + j];
        }
        if (auto* gb = g.grad_ptr(beta)) {
            T* p = gb->ptr();
            for (size_t r = 0; r < R; ++r)
                for (int j = 0; j < D; ++j) p[j] += pdy[r * D + j];
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::gelu(VarId x) {
    const Tensor<T>& vx = val(x);
    Tensor<T> out(vx.dims);
    for (size_t i = 0; i < vx.numel(); ++i) {
        T v = vx.data[i];
        out.data[i] = T(0.5) * v * (T(1) + std::erf(v * T(0.7071067811865475)));
    }
    VarId id = push(std::move(out), requires_grad(x), nullptr);
    node(id).back = [x, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gx = g.grad_ptr(x)) {
            const Tensor<T>& vx = g.val(x);
            for (size_t i = 0; i < dy.numel(); ++i) {
                T v = vx.data[i];
                T cdf = T(0.5) * (T(1) + std::erf(v * T(0.7071067811865475)));
                T pdf = std::exp(T(-0.5) * v * v) * T(0.3989422804014327);
                gx->data[i] += dy.data[i] * (cdf + v * pdf);
            }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::sigmoid(VarId x) {
    const Tensor<T>& vx = val(x);
    Tensor<T> out(vx.dims);
    for (size_t i = 0; i < vx.numel(); ++i) {
        T v = vx.data[i];
        out.data[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                                : std::exp(v) / (T(1) + std::exp(v));
    }
    VarId id = push(std::move(out), requires_grad(x), nullptr);
    node(id).back = [x, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gx = g.grad_ptr(x)) {
            const Tensor<T>& y = g.val(id);
            for (size_t i = 0; i < dy.numel(); ++i) {
                T s = y.data[i];
                gx->data[i] += dy.data[i] * s * (T(1) - s);
            }
        }
    };
    return id;
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

template <typename T>
VarId Graph<T>::reshape(VarId x, std::vector<int> dims) {
    const Tensor<T>& vx = val(x);
    if (Tensor<T>::numel_of(dims) != vx.numel())
        throw DimensionError("reshape: element count mismatch");
    Tensor<T> out;
    out.dims = std::move(dims);
    out.data = vx.data;
    VarId id = push(std::move(out), requires_grad(x), nullptr);
    node(id).back = [x, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gx = g.grad_ptr(x))
            for (size_t i = 0; i < dy.numel(); ++i) gx->data[i] += dy.data[i];
    };
    return id;
}

template <typename T>
VarId Graph<T>::concat_seq(const std::vector<VarId>& parts) {
    if (parts.empty()) throw ContractError("concat_seq: no parts");
    int B = val(parts[0]).dim(0);
    int D = val(parts[0]).dim(2);
    int S = 0;
    bool rg = false;
    for (VarId p : parts) {
        const Tensor<T>& v = val(p);
        if (v.rank() != 3 || v.dim(0) != B || v.dim(2) != D)
            throw DimensionError("concat_seq: incompatible part shape " + v.shape_str());
        S += v.dim(1);
        rg = rg || requires_grad(p);
    }
    Tensor<T> out({B, S, D});
    {
        T* po = out.ptr();
        for (int b = 0; b < B; ++b) {
            size_t off = static_cast<size_t>(b) * S * D;
            for (VarId p : parts) {
                const Tensor<T>& v = val(p);
                size_t n = static_cast<size_t>(v.dim(1)) * D;
                std::copy(v.ptr() + static_cast<size_t>(b) * n, v.ptr() + static_cast<size_t>(b + 1) * n, po + off);
                off += n;
            }
        }
    }
    std::vector<VarId> ps = parts;
    VarId id = push(std::move(out), rg, nullptr);
    node(id).back = [ps, B, S, D, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        const T* pdy = dy.ptr();
        for (int b = 0; b < B; ++b) {
            size_t off = static_cast<size_t>(b) * S * D;
            for (VarId p : ps) {
                size_t n = static_cast<size_t>(g.val(p).dim(1)) * D;
                if (auto* gp = g.grad_ptr(p)) {
                    T* dst = gp->ptr() + static_cast<size_t>(b) * n;
                    for (size_t i = 0; i < n; ++i) dst[i] += pdy[off + i];
                }
                off += n;
            }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::slice_seq(VarId x, int start, int len) {
    const Tensor<T>& vx = val(x);
    if (vx.rank() != 3) throw DimensionError("slice_seq: expected [B,S,D]");
    int B = vx.dim(0), S = vx.dim(1), D = vx.dim(2);
    if (start < 0 || len <= 0 || start + len > S)
        throw ContractError("slice_seq: range out of bounds");
    Tensor<T> out({B, len, D});
    for (int b = 0; b < B; ++b) {
        const T* src = vx.ptr() + (static_cast<size_t>(b) * S + start) * D;
        T* dst = out.ptr() + static_cast<size_t>(b) * len * D;
        std::copy(src, src + static_cast<size_t>(len) * D, dst);
    }
    VarId id = push(std::move(out), requires_grad(x), nullptr);
    node(id).back = [x, start, len, B, S, D, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gx = g.grad_ptr(x)) {
            for (int b = 0; b < B; ++b) {
                const T* src = dy.ptr() + static_cast<size_t>(b) * len * D;
                T* dst = gx->ptr() + (static_cast<size_t>(b) * S + start) * D;
                for (size_t i = 0; i < static_cast<size_t>(len) * D; ++i) dst[i] += src[i];
            }
        }
    };
    return id;
}

// ---------------------------------------------------------------------------
// attention primitives
// ---------------------------------------------------------------------------

template <typename T>
VarId Graph<T>::heads_split(VarId x, int heads) {
    const Tensor<T>& vx = val(x);
    if (vx.rank() != 3) throw DimensionError("heads_split: expected [B,S,D]");
    int B = vx.dim(0), S = vx.dim(1), D = vx.dim(2);
    if (D % heads != 0) throw DimensionError("heads_split: D not divisible by head count");
    int Dh = D / heads;
    Tensor<T> out({B, heads, S, Dh});
    for (int b = 0; b < B; ++b)
        for (int s = 0; s < S; ++s) {
            const T* src = vx.ptr() + (static_cast<size_t>(b) * S + s) * D;
            for (int h = 0; h < heads; ++h) {
                T* dst = out.ptr() + ((static_cast<size_t>(b) * heads + h) * S + s) * Dh;
                std::copy(src + static_cast<size_t>(h) * Dh, src + static_cast<size_t>(h + 1) * Dh, dst);
            }
        }
    VarId id = push(std::move(out), requires_grad(x), nullptr);
    node(id).back = [x, B, S, D, heads, Dh, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gx = g.grad_ptr(x)) {
            for (int b = 0; b < B; ++b)
                for (int s = 0; s < S; ++s) {
                    T* dst = gx->ptr() + (static_cast<size_t>(b) * S + s) * D;
                    for (int h = 0; h < heads; ++h) {
                        const T* src = dy.ptr() + ((static_cast<size_t>(b) * heads + h) * S + s) * Dh;
                        for (int j = 0; j < Dh; ++j) dst[h * Dh + j] += src[j];
                    }
                }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::heads_merge(VarId x) {
    const Tensor<T>& vx = val(x);
    if (vx.rank() != 4) throw DimensionError("heads_merge: expected [B,H,S,Dh]");
    int B = vx.dim(0), H = vx.dim(1), S = vx.dim(2), Dh = vx.dim(3);
    int D = H * Dh;
    Tensor<T> out({B, S, D});
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
            for (int s = 0; s < S; ++s) {
                const T* src = vx.ptr() + ((static_cast<size_t>(b) * H + h) * S + s) * Dh;
                T* dst = out.ptr() + (static_cast<size_t>(b) * S + s) * D + static_cast<size_t>(h) * Dh;
                std::copy(src, src + Dh, dst);
            }
    VarId id = push(std::move(out), requires_grad(x), nullptr);
    node(id).back = [x, B, H, S, Dh, D, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gx = g.grad_ptr(x)) {
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < H; ++h)
                    for (int s = 0; s < S; ++s) {
                        T* dst = gx->ptr() + ((static_cast<size_t>(b) * H + h) * S + s) * Dh;
                        const T* src = dy.ptr() + (static_cast<size_t>(b) * S + s) * D + static_cast<size_t>(h) * Dh;
                        for (int j = 0; j < Dh; ++j) dst[j] += src[j];
                    }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::attn_scores(VarId q, VarId k, T scl) {
    const Tensor<T>& vq = val(q);
    const Tensor<T>& vk = val(k);
    if (vq.rank() != 4 || vk.rank() != 4)
        throw DimensionError("attn_scores: expected [B,H,S,Dh]");
    int B = vq.dim(0), H = vq.dim(1), Sq = vq.dim(2), Dh = vq.dim(3);
    int Sk = vk.dim(2);
    if (vk.dim(0) != B || vk.dim(1) != H || vk.dim(3) != Dh)
        throw DimensionError("attn_scores: q/k shape mismatch");
    Tensor<T> out({B, H, Sq, Sk});
    for (int bh = 0; bh < B * H; ++bh) {
        const T* pq = vq.ptr() + static_cast<size_t>(bh) * Sq * Dh;
        const T* pk = vk.ptr() + static_cast<size_t>(bh) * Sk * Dh;
        T* po = out.ptr() + static_cast<size_t>(bh) * Sq * Sk;
        for (int i = 0; i < Sq; ++i) {
            const T* qr = pq + static_cast<size_t>(i) * Dh;
            T* orow = po + static_cast<size_t>(i) * Sk;
            for (int j = 0; j < Sk; ++j) {
                const T* kr = pk + static_cast<size_t>(j) * Dh;
                T acc = T(0);
                for (int d = 0; d < Dh; ++d) acc += qr[d] * kr[d];
                orow[j] = scl * acc;
            }
        }
    }
    bool rg = requires_grad(q) || requires_grad(k);
    VarId id = push(std::move(out), rg, nullptr);
    node(id).back = [q, k, scl, B, H, Sq, Sk, Dh, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        const T* pdy = dy.ptr();
        Tensor<T>* gq = g.grad_ptr(q);
        Tensor<T>* gk = g.grad_ptr(k);
        const T* pq = g.val(q).ptr();
        const T* pk = g.val(k).ptr();
        for (int bh = 0; bh < B * H; ++bh) {
            const T* dbh = pdy + static_cast<size_t>(bh) * Sq * Sk;
            const T* qbh = pq + static_cast<size_t>(bh) * Sq * Dh;
            const T* kbh = pk + static_cast<size_t>(bh) * Sk * Dh;
            for (int i = 0; i < Sq; ++i) {
                const T* drow = dbh + static_cast<size_t>(i) * Sk;
                if (gq) {
                    T* gqr = gq->ptr() + (static_cast<size_t>(bh) * Sq + i) * Dh;
                    for (int j = 0; j < Sk; ++j) {
                        T c = scl * drow[j];
                        if (c == T(0)) continue;
                        const T* kr = kbh + static_cast<size_t>(j) * Dh;
                        for (int d = 0; d < Dh; ++d) gqr[d] += c * kr[d];
                    }
                }
                if (gk) {
                    const T* qr = qbh + static_cast<size_t>(i) * Dh;
                    for (int j = 0; j < Sk; ++j) {
                        T c = scl * drow[j];
                        if (c == T(0)) continue;
                        T* gkr = gk->ptr() + (static_cast<size_t>(bh) * Sk + j) * Dh;
                        for (int d = 0; d < Dh; ++d) gkr[d] += c * qr[d];
                    }
                }
            }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::masked_softmax(VarId scores, const Tensor<uint8_t>* forbid) {
    const Tensor<T>& vs = val(scores);
    if (vs.rank() != 4) throw DimensionError("masked_softmax: expected [B,H,Sq,Sk]");
    int Sq = vs.dim(2), Sk = vs.dim(3);
    std::shared_ptr<Tensor<uint8_t>> mask;
    if (forbid) {
        if (forbid->dims != std::vector<int>{Sq, Sk})
            throw DimensionError("masked_softmax: mask must be [Sq,Sk]");
        mask = std::make_shared<Tensor<uint8_t>>(*forbid);
    }
    size_t R = rows_of(vs, 1);
    Tensor<T> out(vs.dims);
    {
        const T* ps = vs.ptr();
        T* po = out.ptr();
        for (size_t r = 0; r < R; ++r) {
            int qi = static_cast<int>(r % static_cast<size_t>(Sq));
            const uint8_t* mrow = mask ? mask->ptr() + static_cast<size_t>(qi) * Sk : nullptr;
            const T* srow = ps + r * static_cast<size_t>(Sk);
            T* orow = po + r * static_cast<size_t>(Sk);
            T mx = -std::numeric_limits<T>::infinity();
            for (int j = 0; j < Sk; ++j)
                if (!mrow || !mrow[j]) mx = std::max(mx, srow[j]);
            if (mx == -std::numeric_limits<T>::infinity()) {
                // every key forbidden: zero attention, residual carries the row
                for (int j = 0; j < Sk; ++j) orow[j] = T(0);
                continue;
            }
            T sum = T(0);
            for (int j = 0; j < Sk; ++j) {
                if (mrow && mrow[j]) {
                    orow[j] = T(0);
                } else {
                    orow[j] = std::exp(srow[j] - mx);
                    sum += orow[j];
                }
            }
            T inv = T(1) / sum;
            for (int j = 0; j < Sk; ++j) orow[j] *= inv;
        }
    }
    VarId id = push(std::move(out), requires_grad(scores), nullptr);
    node(id).back = [scores, R, Sk, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gs = g.grad_ptr(scores)) {
            const Tensor<T>& y = g.val(id);
            for (size_t r = 0; r < R; ++r) {
                const T* yr = y.ptr() + r * static_cast<size_t>(Sk);
                const T* dr = dy.ptr() + r * static_cast<size_t>(Sk);
                T* gr = gs->ptr() + r * static_cast<size_t>(Sk);
                T dot = T(0);
                for (int j = 0; j < Sk; ++j) dot += dr[j] * yr[j];
                for (int j = 0; j < Sk; ++j) gr[j] += yr[j] * (dr[j] - dot);
            }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::attn_combine(VarId probs, VarId v) {
    const Tensor<T>& vp = val(probs);
    const Tensor<T>& vv = val(v);
    if (vp.rank() != 4 || vv.rank() != 4)
        throw DimensionError("attn_combine: expected [B,H,Sq,Sk] x [B,H,Sk,Dh]");
    int B = vp.dim(0), H = vp.dim(1), Sq = vp.dim(2), Sk = vp.dim(3);
    int Dh = vv.dim(3);
    if (vv.dim(0) != B || vv.dim(1) != H || vv.dim(2) != Sk)
        throw DimensionError("attn_combine: probs/values shape mismatch");
    Tensor<T> out({B, H, Sq, Dh});
    for (int bh = 0; bh < B * H; ++bh) {
        const T* pp = vp.ptr() + static_cast<size_t>(bh) * Sq * Sk;
        const T* pv = vv.ptr() + static_cast<size_t>(bh) * Sk * Dh;
        T* po = out.ptr() + static_cast<size_t>(bh) * Sq * Dh;
        for (int i = 0; i < Sq; ++i) {
            const T* prow = pp + static_cast<size_t>(i) * Sk;
            T* orow = po + static_cast<size_t>(i) * Dh;
            for (int j = 0; j < Sk; ++j) {
                T c = prow[j];
                if (c == T(0)) continue;
                const T* vrow = pv + static_cast<size_t>(j) * Dh;
                for (int d = 0; d < Dh; ++d) orow[d] += c * vrow[d];
            }
        }
    }
    bool rg = requires_grad(probs) || requires_grad(v);
    VarId id = push(std::move(out), rg, nullptr);
    node(id).back = [probs, v, B, H, Sq, Sk, Dh, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        Tensor<T>* gp = g.grad_ptr(probs);
        Tensor<T>* gv = g.grad_ptr(v);
        const T* pp = g.val(probs).ptr();
        const T* pv = g.val(v).ptr();
        for (int bh = 0; bh < B * H; ++bh) {
            const T* dbh = dy.ptr() + static_cast<size_t>(bh) * Sq * Dh;
            for (int i = 0; i < Sq; ++i) {
                const T* drow = dbh + static_cast<size_t>(i) * Dh;
                if (gp) {
                    T* gprow = gp->ptr() + (static_cast<size_t>(bh) * Sq + i) * Sk;
                    for (int j = 0; j < Sk; ++j) {
                        const T* vrow = pv + (static_cast<size_t>(bh) * Sk + j) * Dh;
                        T acc = T(0);
                        for (int d = 0; d < Dh; ++d) acc += drow[d] * vrow[d];
                        gprow[j] += acc;
                    }
                }
                if (gv) {
                    const T* prow = pp + (static_cast<size_t>(bh) * Sq + i) * Sk;
                    for (int j = 0; j < Sk; ++j) {
                        T c = prow[j];
                        if (c == T(0)) continue;
                        T* gvrow = gv->ptr() + (static_cast<size_t>(bh) * Sk + j) * Dh;
                        for (int d = 0; d < Dh; ++d) gvrow[d] += c * drow[d];
                    }
                }
            }
        }
    };
    return id;
}

// ---------------------------------------------------------------------------
// lookups / losses
// ---------------------------------------------------------------------------

template <typename T>
VarId Graph<T>::embed_rows(VarId table, std::vector<int> ids, std::vector<int> out_lead_dims) {
    const Tensor<T>& vt = val(table);
    if (vt.rank() != 2) throw DimensionError("embed_rows: table must be [V,D]");
    int V = vt.dim(0), D = vt.dim(1);
    size_t R = Tensor<T>::numel_of(out_lead_dims);
    if (R != ids.size()) throw DimensionError("embed_rows: id count mismatch");
    for (int id : ids)
        if (id < 0 || id >= V) throw ContractError("embed_rows: id out of range");
    std::vector<int> odims = out_lead_dims;
    odims.push_back(D);
    Tensor<T> out(odims);
    for (size_t r = 0; r < R; ++r) {
        const T* src = vt.ptr() + static_cast<size_t>(ids[r]) * D;
        std::copy(src, src + D, out.ptr() + r * static_cast<size_t>(D));
    }
    auto ids_p = std::make_shared<std::vector<int>>(std::move(ids));
    VarId id = push(std::move(out), requires_grad(table), nullptr);
    node(id).back = [table, ids_p, R, D, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gt = g.grad_ptr(table)) {
            for (size_t r = 0; r < R; ++r) {
                T* dst = gt->ptr() + static_cast<size_t>((*ids_p)[r]) * D;
                const T* src = dy.ptr() + r * static_cast<size_t>(D);
                for (int j = 0; j < D; ++j) dst[j] += src[j];
            }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::mean_all(VarId x) {
    const Tensor<T>& vx = val(x);
    T acc = T(0);
    for (T v : vx.data) acc += v;
    size_t N = vx.numel();
    Tensor<T> out({1});
    out.data[0] = acc / static_cast<T>(N);
    VarId id = push(std::move(out), requires_grad(x), nullptr);
    node(id).back = [x, N, id](Graph<T>& g) {
        T d = g.grad_ptr(id)->data[0] / static_cast<T>(N);
        if (auto* gx = g.grad_ptr(x))
            for (size_t i = 0; i < N; ++i) gx->data[i] += d;
    };
    return id;
}

template <typename T>
VarId Graph<T>::mse(VarId pred, Tensor<T> target) {
    const Tensor<T>& vp = val(pred);
    if (vp.dims != target.dims)
        throw DimensionError("mse: prediction/target shape mismatch");
    size_t N = vp.numel();
    T acc = T(0);
    for (size_t i = 0; i < N; ++i) {
        T d = vp.data[i] - target.data[i];
        acc += d * d;
    }
    Tensor<T> out({1});
    out.data[0] = acc / static_cast<T>(N);
    auto tgt = std::make_shared<Tensor<T>>(std::move(target));
    VarId id = push(std::move(out), requires_grad(pred), nullptr);
    node(id).back = [pred, tgt, N, id](Graph<T>& g) {
        T d = g.grad_ptr(id)->data[0];
        if (auto* gp = g.grad_ptr(pred)) {
            const Tensor<T>& vp = g.val(pred);
            T c = T(2) * d / static_cast<T>(N);
            for (size_t i = 0; i < N; ++i)
                gp->data[i] += c * (vp.data[i] - tgt->data[i]);
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::softmax_xent(VarId logits, std::vector<int> targets) {
    const Tensor<T>& vl = val(logits);
    int V = vl.dim(vl.rank() - 1);
    size_t R = rows_of(vl, 1);
    if (R != targets.size()) throw DimensionError("softmax_xent: target count mismatch");
    T total = T(0);
    std::vector<T> lse(R);
    for (size_t r = 0; r < R; ++r) {
        int t = targets[r];
        if (t < 0 || t >= V) throw ContractError("softmax_xent: target out of range");
        const T* row = vl.ptr() + r * static_cast<size_t>(V);
        T mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
        lse[r] = mx + std::log(sum);
        total += lse[r] - row[t];
    }
    Tensor<T> out({1});
    out.data[0] = total / static_cast<T>(R);
    auto tgt = std::make_shared<std::vector<int>>(std::move(targets));
    auto lse_p = std::make_shared<std::vector<T>>(std::move(lse));
    VarId id = push(std::move(out), requires_grad(logits), nullptr);
    node(id).back = [logits, tgt, lse_p, R, V, id](Graph<T>& g) {
        T d = g.grad_ptr(id)->data[0];
        if (auto* gl = g.grad_ptr(logits)) {
            const Tensor<T>& vl = g.val(logits);
            T c = d / static_cast<T>(R);
            for (size_t r = 0; r < R; ++r) {
                const T* row = vl.ptr() + r * static_cast<size_t>(V);
                T* grow = gl->ptr() + r * static_cast<size_t>(V);
                for (int j = 0; j < V; ++j)
                    grow[j] += c * std::exp(row[j] - (*lse_p)[r]);
                grow[(*tgt)[r]] -= c;
            }
        }
    };
    return id;
}

// ---------------------------------------------------------------------------
// quantizer support
// ---------------------------------------------------------------------------

template <typename T>
VarId Graph<T>::add_offset_const(VarId z, Tensor<T> offset) {
    const Tensor<T>& vz = val(z);
    if (vz.dims != offset.dims)
        throw DimensionError("add_offset_const: shape mismatch");
    Tensor<T> out = vz;
    for (size_t i = 0; i < out.numel(); ++i) out.data[i] += offset.data[i];
    VarId id = push(std::move(out), requires_grad(z), nullptr);
    node(id).back = [z, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gz = g.grad_ptr(z))
            for (size_t i = 0; i < dy.numel(); ++i) gz->data[i] += dy.data[i];
    };
    return id;
}

template <typename T>
VarId Graph<T>::vq_codebook_loss(VarId cb, std::vector<int> ids, Tensor<T> z_snapshot) {
    const Tensor<T>& vc = val(cb);
    int D = vc.dim(1);
    size_t R = ids.size();
    if (z_snapshot.numel() != R * static_cast<size_t>(D))
        throw DimensionError("vq_codebook_loss: snapshot size mismatch");
    size_t N = R * static_cast<size_t>(D);
    T acc = T(0);
    for (size_t r = 0; r < R; ++r) {
        const T* crow = vc.ptr() + static_cast<size_t>(ids[r]) * D;
        const T* zrow = z_snapshot.ptr() + r * static_cast<size_t>(D);
        for (int j = 0; j < D; ++j) {
            T d = crow[j] - zrow[j];
            acc += d * d;
        }
    }
    Tensor<T> out({1});
    out.data[0] = acc / static_cast<T>(N);
    auto ids_p = std::make_shared<std::vector<int>>(std::move(ids));
    auto z_p = std::make_shared<Tensor<T>>(std::move(z_snapshot));
    VarId id = push(std::move(out), requires_grad(cb), nullptr);
    node(id).back = [cb, ids_p, z_p, R, D, N, id](Graph<T>& g) {
        T d = g.grad_ptr(id)->data[0];
        if (auto* gc = g.grad_ptr(cb)) {
            const Tensor<T>& vc = g.val(cb);
            T c = T(2) * d / static_cast<T>(N);
            for (size_t r = 0; r < R; ++r) {
                const T* crow = vc.ptr() + static_cast<size_t>((*ids_p)[r]) * D;
                const T* zrow = z_p->ptr() + r * static_cast<size_t>(D);
                T* grow = gc->ptr() + static_cast<size_t>((*ids_p)[r]) * D;
                for (int j = 0; j < D; ++j) grow[j] += c * (crow[j] - zrow[j]);
            }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::commit_loss(VarId z, Tensor<T> zq_snapshot, T beta) {
    const Tensor<T>& vz = val(z);
    if (vz.dims != zq_snapshot.dims)
        throw DimensionError("commit_loss: shape mismatch");
    size_t N = vz.numel();
    T acc = T(0);
    for (size_t i = 0; i < N; ++i) {
        T d = vz.data[i] - zq_snapshot.data[i];
        acc += d * d;
    }
    Tensor<T> out({1});
    out.data[0] = beta * acc / static_cast<T>(N);
    auto zq_p = std::make_shared<Tensor<T>>(std::move(zq_snapshot));
    VarId id = push(std::move(out), requires_grad(z), nullptr);
    node(id).back = [z, zq_p, beta, N, id](Graph<T>& g) {
        T d = g.grad_ptr(id)->data[0];
        if (auto* gz = g.grad_ptr(z)) {
            const Tensor<T>& vz = g.val(z);
            T c = T(2) * beta * d / static_cast<T>(N);
            for (size_t i = 0; i < N; ++i)
                gz->data[i] += c * (vz.data[i] - zq_p->data[i]);
        }
    };
    return id;
}

// ---------------------------------------------------------------------------
// pixel <-> patch layout
// ---------------------------------------------------------------------------

template <typename T>
VarId Graph<T>::patchify_px(VarId img, int patch) {
    const Tensor<T>& vi = val(img);
    if (vi.rank() != 4) throw DimensionError("patchify_px: expected [B,C,H,W]");
    int B = vi.dim(0), C = vi.dim(1), H = vi.dim(2), W = vi.dim(3);
    if (H != W || H % patch != 0)
        throw ConfigError("patchify_px: image size must be square and divisible by patch size");
    int G = H / patch;
    int P = G * G;
    int D = C * patch * patch;
    Tensor<T> out({B, P, D});
    for (int b = 0; b < B; ++b)
        for (int gy = 0; gy < G; ++gy)
            for (int gx = 0; gx < G; ++gx) {
                T* dst = out.ptr() + ((static_cast<size_t>(b) * P + gy * G + gx)) * D;
                for (int c = 0; c < C; ++c)
                    for (int py = 0; py < patch; ++py) {
                        const T* src = vi.ptr() + ((static_cast<size_t>(b) * C + c) * H + gy * patch + py) * W + gx * patch;
                        std::copy(src, src + patch, dst + (static_cast<size_t>(c) * patch + py) * patch);
                    }
            }
    VarId id = push(std::move(out), requires_grad(img), nullptr);
    node(id).back = [img, B, C, H, W, patch, G, P, D, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gi = g.grad_ptr(img)) {
            for (int b = 0; b < B; ++b)
                for (int gy = 0; gy < G; ++gy)
                    for (int gx = 0; gx < G; ++gx) {
                        const T* src = dy.ptr() + ((static_cast<size_t>(b) * P + gy * G + gx)) * D;
                        for (int c = 0; c < C; ++c)
                            for (int py = 0; py < patch; ++py) {
                                T* dst = gi->ptr() + ((static_cast<size_t>(b) * C + c) * H + gy * patch + py) * W + gx * patch;
                                const T* s = src + (static_cast<size_t>(c) * patch + py) * patch;
                                for (int px = 0; px < patch; ++px) dst[px] += s[px];
                            }
                    }
        }
    };
    return id;
}

template <typename T>
VarId Graph<T>::unpatchify_px(VarId x, int channels, int image_size, int patch) {
    const Tensor<T>& vx = val(x);
    if (vx.rank() != 3) throw DimensionError("unpatchify_px: expected [B,P,D]");
    int B = vx.dim(0), P = vx.dim(1), D = vx.dim(2);
    int G = image_size / patch;
    if (P != G * G || D != channels * patch * patch)
        throw DimensionError("unpatchify_px: patch layout mismatch");
    Tensor<T> out({B, channels, image_size, image_size});
    for (int b = 0; b < B; ++b)
        for (int gy = 0; gy < G; ++gy)
            for (int gx = 0; gx < G; ++gx) {
                const T* src = vx.ptr() + (static_cast<size_t>(b) * P + gy * G + gx) * D;
                for (int c = 0; c < channels; ++c)
                    for (int py = 0; py < patch; ++py) {
                        T* dst = out.ptr() + ((static_cast<size_t>(b) * channels + c) * image_size + gy * patch + py) * image_size + gx * patch;
                        const T* s = src + (static_cast<size_t>(c) * patch + py) * patch;
                        std::copy(s, s + patch, dst);
                    }
            }
    VarId id = push(std::move(out), requires_grad(x), nullptr);
    node(id).back = [x, B, channels, image_size, patch, G, P, D, id](Graph<T>& g) {
        const Tensor<T>& dy = *g.grad_ptr(id);
        if (auto* gx2 = g.grad_ptr(x)) {
            for (int b = 0; b < B; ++b)
                for (int gy = 0; gy < G; ++gy)
                    for (int gxi = 0; gxi < G; ++gxi) {
                        T* dst = gx2->ptr() + (static_cast<size_t>(b) * P + gy * G + gxi) * D;
                        for (int c = 0; c < channels; ++c)
                            for (int py = 0; py < patch; ++py) {
                                const T* src = dy.ptr() + ((static_cast<size_t>(b) * channels + c) * image_size + gy * patch + py) * image_size + gxi * patch;
                                T* d = dst + (static_cast<size_t>(c) * patch + py) * patch;
                                for (int px = 0; px < patch; ++px) d[px] += src[px];
                            }
                    }
        }
    };
    return id;
}

template class Graph<float>;
template class Graph<double>;

} // namespace ntok

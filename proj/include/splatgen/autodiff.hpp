#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <vector>

#include "splatgen/error.hpp"
#include "splatgen/parallel.hpp"
#include "splatgen/rng.hpp"
#include "splatgen/tensor.hpp"

namespace splatgen {
namespace ad {

// Reverse-mode tape over dense tensors. Nodes are appended in evaluation
// order, so reverse node order is a valid topological order for backward.
// One tape per training step; values stay alive until the tape is cleared.
template <typename T>
class Tape;

template <typename T>
struct Val {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& value() const;
    const std::vector<int64_t>& shape() const { return value().shape; }
    int64_t numel() const { return value().numel(); }
};

template <typename T>
class Tape {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // empty until touched by backward
        bool requires_grad = false;
        std::function<void()> backward;
    };

    Val<T> leaf(Tensor<T> v, bool requires_grad) {
        nodes_.push_back({std::move(v), {}, requires_grad, nullptr});
        return Val<T>{this, static_cast<int>(nodes_.size()) - 1};
    }
    Val<T> constant(Tensor<T> v) { return leaf(std::move(v), false); }

    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }

    Tensor<T>& grad(int id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.data.empty()) n.grad = Tensor<T>::zeros(n.value.shape);
        return n.grad;
    }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    void backward(Val<T> root) {
        if (root.tape != this) fail(ErrorCode::argument, "backward: value from another tape");
        if (nodes_[static_cast<size_t>(root.id)].value.numel() != 1)
            fail(ErrorCode::argument, "backward: root must be scalar");
        grad(root.id).fill(T(1));
        for (int id = root.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<size_t>(id)];
            if (n.requires_grad && n.backward && !n.grad.data.empty()) n.backward();
        }
    }

    void clear() { nodes_.clear(); }
    size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Val<T>::value() const {
    return tape->node(id).value;
}

namespace detail {

template <typename T>
bool any_rg(std::initializer_list<Val<T>> vals) {
    for (const Val<T>& v : vals)
        if (v.tape->node(v.id).requires_grad) return true;
    return false;
}

template <typename T>
void accum(Tape<T>* tp, int id, const Tensor<T>& delta) {
    if (!tp->requires_grad(id)) return;
    Tensor<T>& g = tp->grad(id);
    for (int64_t i = 0; i < delta.numel(); ++i) g[i] += delta[i];
}

// Creates a node then installs a backward closure that receives (tape, out id).
template <typename T, typename F>
Val<T> make_op(Tape<T>* tp, Tensor<T> value, bool req, F&& backward) {
    Val<T> out = tp->leaf(std::move(value), req);
    if (req) {
        int oid = out.id;
        tp->node(oid).backward = [tp, oid, fn = std::forward<F>(backward)]() { fn(tp, oid); };
    }
    return out;
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMat<T>>;
template <typename T>
using CRowMap = Eigen::Map<const RowMat<T>>;

}  // namespace detail

// ---------- elementwise ----------

template <typename T>
Val<T> add(Val<T> a, Val<T> b) {
    if (a.shape() != b.shape()) fail(ErrorCode::argument, "add: shape mismatch");
    Tape<T>* tp = a.tape;
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return detail::make_op(tp, std::move(out), detail::any_rg<T>({a, b}),
                           [aid = a.id, bid = b.id](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               detail::accum(t, aid, g);
                               detail::accum(t, bid, g);
                           });
}

template <typename T>
Val<T> sub(Val<T> a, Val<T> b) {
    if (a.shape() != b.shape()) fail(ErrorCode::argument, "sub: shape mismatch");
    Tape<T>* tp = a.tape;
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return detail::make_op(tp, std::move(out), detail::any_rg<T>({a, b}),
                           [aid = a.id, bid = b.id](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               detail::accum(t, aid, g);
                               if (t->requires_grad(bid)) {
                                   Tensor<T>& gb = t->grad(bid);
                                   for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
                               }
                           });
}

template <typename T>
Val<T> mul(Val<T> a, Val<T> b) {
    if (a.shape() != b.shape()) fail(ErrorCode::argument, "mul: shape mismatch");
    Tape<T>* tp = a.tape;
    Tensor<T> out = a.value();
    const Tensor<T>& bv = b.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    return detail::make_op(tp, std::move(out), detail::any_rg<T>({a, b}),
                           [aid = a.id, bid = b.id](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               if (t->requires_grad(aid)) {
                                   Tensor<T>& ga = t->grad(aid);
                                   const Tensor<T>& bval = t->node(bid).value;
                                   for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bval[i];
                               }
                               if (t->requires_grad(bid)) {
                                   Tensor<T>& gb = t->grad(bid);
                                   const Tensor<T>& aval = t->node(aid).value;
                                   for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * aval[i];
                               }
                           });
}

template <typename T>
Val<T> scale(Val<T> a, double c) {
    Tape<T>* tp = a.tape;
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = static_cast<T>(v * c);
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id, c](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& ga = t->grad(aid);
                               for (int64_t i = 0; i < g.numel(); ++i) ga[i] += static_cast<T>(g[i] * c);
                           });
}

template <typename T>
Val<T> add_scalar(Val<T> a, double c) {
    Tape<T>* tp = a.tape;
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = static_cast<T>(v + c);
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id](Tape<T>* t, int oid) { detail::accum(t, aid, t->node(oid).grad); });
}

template <typename T>
Val<T> sigmoid_op(Val<T> a) {
    Tape<T>* tp = a.tape;
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               const Tensor<T>& y = t->node(oid).value;
                               Tensor<T>& ga = t->grad(aid);
                               for (int64_t i = 0; i < g.numel(); ++i)
                                   ga[i] += g[i] * y[i] * (T(1) - y[i]);
                           });
}

template <typename T>
Val<T> silu(Val<T> a) {
    Tape<T>* tp = a.tape;
    Tensor<T> out = a.value();
    for (auto& v : out.data) {
        double s = 1.0 / (1.0 + std::exp(-static_cast<double>(v)));
        v = static_cast<T>(static_cast<double>(v) * s);
    }
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               const Tensor<T>& x = t->node(aid).value;
                               Tensor<T>& ga = t->grad(aid);
                               for (int64_t i = 0; i < g.numel(); ++i) {
                                   double s = 1.0 / (1.0 + std::exp(-static_cast<double>(x[i])));
                                   ga[i] += g[i] * static_cast<T>(s * (1.0 + static_cast<double>(x[i]) * (1.0 - s)));
                               }
                           });
}

template <typename T>
Val<T> exp_op(Val<T> a) {
    Tape<T>* tp = a.tape;
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = static_cast<T>(std::exp(static_cast<double>(v)));
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               const Tensor<T>& y = t->node(oid).value;
                               Tensor<T>& ga = t->grad(aid);
                               for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i];
                           });
}

template <typename T>
Val<T> clamp_op(Val<T> a, double lo, double hi) {
    Tape<T>* tp = a.tape;
    Tensor<T> out = a.value();
    for (auto& v : out.data) v = static_cast<T>(std::clamp(static_cast<double>(v), lo, hi));
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id, lo, hi](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               const Tensor<T>& x = t->node(aid).value;
                               Tensor<T>& ga = t->grad(aid);
                               for (int64_t i = 0; i < g.numel(); ++i)
                                   if (static_cast<double>(x[i]) > lo && static_cast<double>(x[i]) < hi)
                                       ga[i] += g[i];
                           });
}

// ---------- reductions ----------

template <typename T>
Val<T> sum_all(Val<T> a) {
    Tape<T>* tp = a.tape;
    double acc = 0;
    for (const T& v : a.value().data) acc += static_cast<double>(v);
    Tensor<T> out({1});
    out[0] = static_cast<T>(acc);
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id](Tape<T>* t, int oid) {
                               const T g = t->node(oid).grad[0];
                               Tensor<T>& ga = t->grad(aid);
                               for (auto& v : ga.data) v += g;
                           });
}

template <typename T>
Val<T> mean_all(Val<T> a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

template <typename T>
Val<T> sum_sq(Val<T> a) {
    Tape<T>* tp = a.tape;
    double acc = 0;
    for (const T& v : a.value().data) acc += static_cast<double>(v) * static_cast<double>(v);
    Tensor<T> out({1});
    out[0] = static_cast<T>(acc);
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id](Tape<T>* t, int oid) {
                               const T g = t->node(oid).grad[0];
                               const Tensor<T>& x = t->node(aid).value;
                               Tensor<T>& ga = t->grad(aid);
                               for (int64_t i = 0; i < x.numel(); ++i) ga[i] += T(2) * g * x[i];
                           });
}

template <typename T>
Val<T> mse(Val<T> a, Val<T> b) {
    return scale(sum_sq(sub(a, b)), 1.0 / static_cast<double>(a.numel()));
}

// ---------- structural ----------

template <typename T>
Val<T> reshape(Val<T> a, std::vector<int64_t> shape) {
    if (Tensor<T>::numel_of(shape) != a.numel()) fail(ErrorCode::argument, "reshape: element count mismatch");
    Tape<T>* tp = a.tape;
    Tensor<T> out(std::move(shape), a.value().data);
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& ga = t->grad(aid);
                               for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
                           });
}

// Concatenate [N,C_i,H,W] tensors along the channel axis.
template <typename T>
Val<T> concat_channels(const std::vector<Val<T>>& xs) {
    if (xs.empty()) fail(ErrorCode::argument, "concat_channels: empty input");
    Tape<T>* tp = xs[0].tape;
    const auto& s0 = xs[0].shape();
    if (s0.size() != 4) fail(ErrorCode::argument, "concat_channels: expected 4-d inputs");
    int64_t n = s0[0], h = s0[2], w = s0[3];
    int64_t c_total = 0;
    for (const auto& x : xs) {
        const auto& s = x.shape();
        if (s.size() != 4 || s[0] != n || s[2] != h || s[3] != w)
            fail(ErrorCode::argument, "concat_channels: shape mismatch");
        c_total += s[1];
    }
    Tensor<T> out({n, c_total, h, w});
    const int64_t plane = h * w;
    std::vector<int> ids;
    std::vector<int64_t> chans;
    int64_t c_off = 0;
    for (const auto& x : xs) {
        const Tensor<T>& xv = x.value();
        const int64_t c = xv.dim(1);
        for (int64_t ni = 0; ni < n; ++ni)
            std::copy(xv.ptr() + ni * c * plane, xv.ptr() + (ni + 1) * c * plane,
                      out.ptr() + (ni * c_total + c_off) * plane);
        ids.push_back(x.id);
        chans.push_back(c);
        c_off += c;
    }
    bool req = false;
    for (const auto& x : xs) req = req || tp->requires_grad(x.id);
    return detail::make_op(tp, std::move(out), req,
                           [ids, chans, n, plane, c_total](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               int64_t c_off = 0;
                               for (size_t k = 0; k < ids.size(); ++k) {
                                   const int64_t c = chans[k];
                                   if (t->requires_grad(ids[k])) {
                                       Tensor<T>& gx = t->grad(ids[k]);
                                       for (int64_t ni = 0; ni < n; ++ni) {
                                           const T* src = g.ptr() + (ni * c_total + c_off) * plane;
                                           T* dst = gx.ptr() + ni * c * plane;
                                           for (int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                                       }
                                   }
                                   c_off += c;
                               }
                           });
}

template <typename T>
Val<T> slice_channels(Val<T> x, int64_t c0, int64_t c1) {
    const auto& s = x.shape();
    if (s.size() != 4 || c0 < 0 || c1 > s[1] || c0 >= c1)
        fail(ErrorCode::argument, "slice_channels: bad range");
    Tape<T>* tp = x.tape;
    const int64_t n = s[0], c = s[1], h = s[2], w = s[3], plane = h * w, cs = c1 - c0;
    Tensor<T> out({n, cs, h, w});
    const Tensor<T>& xv = x.value();
    for (int64_t ni = 0; ni < n; ++ni)
        std::copy(xv.ptr() + (ni * c + c0) * plane, xv.ptr() + (ni * c + c1) * plane,
                  out.ptr() + ni * cs * plane);
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id, n, c, c0, cs, plane](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t ni = 0; ni < n; ++ni) {
                                   const T* src = g.ptr() + ni * cs * plane;
                                   T* dst = gx.ptr() + (ni * c + c0) * plane;
                                   for (int64_t i = 0; i < cs * plane; ++i) dst[i] += src[i];
                               }
                           });
}

// ---------- linear algebra ----------

template <typename T>
Val<T> matmul(Val<T> a, Val<T> b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) fail(ErrorCode::argument, "matmul: shape mismatch");
    Tape<T>* tp = a.tape;
    const int64_t m = sa[0], k = sa[1], n = sb[1];
    Tensor<T> out({m, n});
    detail::CRowMap<T>(a.value().ptr(), m, k);
    detail::RowMap<T>(out.ptr(), m, n) =
        detail::CRowMap<T>(a.value().ptr(), m, k) * detail::CRowMap<T>(b.value().ptr(), k, n);
    return detail::make_op(tp, std::move(out), detail::any_rg<T>({a, b}),
                           [aid = a.id, bid = b.id, m, k, n](Tape<T>* t, int oid) {
                               detail::CRowMap<T> g(t->node(oid).grad.ptr(), m, n);
                               if (t->requires_grad(aid)) {
                                   detail::RowMap<T> ga(t->grad(aid).ptr(), m, k);
                                   detail::CRowMap<T> bv(t->node(bid).value.ptr(), k, n);
                                   ga.noalias() += g * bv.transpose();
                               }
                               if (t->requires_grad(bid)) {
                                   detail::RowMap<T> gb(t->grad(bid).ptr(), k, n);
                                   detail::CRowMap<T> av(t->node(aid).value.ptr(), m, k);
                                   gb.noalias() += av.transpose() * g;
                               }
                           });
}

// y = x w^T + bias, x: [n, in], w: [out, in], bias: [out]
template <typename T>
Val<T> linear(Val<T> x, Val<T> w, Val<T> bias) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sx.size() != 2 || sw.size() != 2 || sx[1] != sw[1]) fail(ErrorCode::argument, "linear: shape mismatch");
    if (bias.shape() != std::vector<int64_t>{sw[0]}) fail(ErrorCode::argument, "linear: bias shape mismatch");
    Tape<T>* tp = x.tape;
    const int64_t n = sx[0], in = sx[1], out_dim = sw[0];
    Tensor<T> out({n, out_dim});
    detail::RowMap<T> om(out.ptr(), n, out_dim);
    om.noalias() = detail::CRowMap<T>(x.value().ptr(), n, in) *
                   detail::CRowMap<T>(w.value().ptr(), out_dim, in).transpose();
    om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.value().ptr(), out_dim);
    return detail::make_op(tp, std::move(out), detail::any_rg<T>({x, w, bias}),
                           [xid = x.id, wid = w.id, bid = bias.id, n, in, out_dim](Tape<T>* t, int oid) {
                               detail::CRowMap<T> g(t->node(oid).grad.ptr(), n, out_dim);
                               if (t->requires_grad(xid)) {
                                   detail::RowMap<T> gx(t->grad(xid).ptr(), n, in);
                                   detail::CRowMap<T> wv(t->node(wid).value.ptr(), out_dim, in);
                                   gx.noalias() += g * wv;
                               }
                               if (t->requires_grad(wid)) {
                                   detail::RowMap<T> gw(t->grad(wid).ptr(), out_dim, in);
                                   detail::CRowMap<T> xv(t->node(xid).value.ptr(), n, in);
                                   gw.noalias() += g.transpose() * xv;
                               }
                               if (t->requires_grad(bid)) {
                                   Tensor<T>& gb = t->grad(bid);
                                   for (int64_t r = 0; r < n; ++r)
                                       for (int64_t c = 0; c < out_dim; ++c) gb[c] += g(r, c);
                               }
                           });
}

// Batched matmul, a: [B,m,k], b: [B,k,n].
template <typename T>
Val<T> bmm(Val<T> a, Val<T> b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
        fail(ErrorCode::argument, "bmm: shape mismatch");
    Tape<T>* tp = a.tape;
    const int64_t bsz = sa[0], m = sa[1], k = sa[2], n = sb[2];
    Tensor<T> out({bsz, m, n});
    for (int64_t i = 0; i < bsz; ++i)
        detail::RowMap<T>(out.ptr() + i * m * n, m, n).noalias() =
            detail::CRowMap<T>(a.value().ptr() + i * m * k, m, k) *
            detail::CRowMap<T>(b.value().ptr() + i * k * n, k, n);
    return detail::make_op(tp, std::move(out), detail::any_rg<T>({a, b}),
                           [aid = a.id, bid = b.id, bsz, m, k, n](Tape<T>* t, int oid) {
                               const Tensor<T>& gt = t->node(oid).grad;
                               for (int64_t i = 0; i < bsz; ++i) {
                                   detail::CRowMap<T> g(gt.ptr() + i * m * n, m, n);
                                   if (t->requires_grad(aid)) {
                                       detail::RowMap<T> ga(t->grad(aid).ptr() + i * m * k, m, k);
                                       detail::CRowMap<T> bv(t->node(bid).value.ptr() + i * k * n, k, n);
                                       ga.noalias() += g * bv.transpose();
                                   }
                                   if (t->requires_grad(bid)) {
                                       detail::RowMap<T> gb(t->grad(bid).ptr() + i * k * n, k, n);
                                       detail::CRowMap<T> av(t->node(aid).value.ptr() + i * m * k, m, k);
                                       gb.noalias() += av.transpose() * g;
                                   }
                               }
                           });
}

template <typename T>
Val<T> transpose_last2(Val<T> a) {
    const auto& s = a.shape();
    if (s.size() != 3) fail(ErrorCode::argument, "transpose_last2: expected 3-d");
    Tape<T>* tp = a.tape;
    const int64_t b = s[0], m = s[1], n = s[2];
    Tensor<T> out({b, n, m});
    const Tensor<T>& av = a.value();
    for (int64_t i = 0; i < b; ++i)
        for (int64_t r = 0; r < m; ++r)
            for (int64_t c = 0; c < n; ++c) out[(i * n + c) * m + r] = av[(i * m + r) * n + c];
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id, b, m, n](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& ga = t->grad(aid);
                               for (int64_t i = 0; i < b; ++i)
                                   for (int64_t r = 0; r < m; ++r)
                                       for (int64_t c = 0; c < n; ++c)
                                           ga[(i * m + r) * n + c] += g[(i * n + c) * m + r];
                           });
}

// ---------- softmax ----------

// Softmax over the last dimension.
template <typename T>
Val<T> softmax_lastdim(Val<T> a) {
    const auto& s = a.shape();
    if (s.empty()) fail(ErrorCode::argument, "softmax: scalar input");
    Tape<T>* tp = a.tape;
    const int64_t n = s.back();
    const int64_t rows = a.numel() / n;
    Tensor<T> out = a.value();
    for (int64_t r = 0; r < rows; ++r) {
        T* p = out.ptr() + r * n;
        double mx = -1e300;
        for (int64_t i = 0; i < n; ++i) mx = std::max(mx, static_cast<double>(p[i]));
        double z = 0;
        for (int64_t i = 0; i < n; ++i) {
            double e = std::exp(static_cast<double>(p[i]) - mx);
            p[i] = static_cast<T>(e);
            z += e;
        }
        for (int64_t i = 0; i < n; ++i) p[i] = static_cast<T>(static_cast<double>(p[i]) / z);
    }
    return detail::make_op(tp, std::move(out), tp->requires_grad(a.id),
                           [aid = a.id, rows, n](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               const Tensor<T>& y = t->node(oid).value;
                               Tensor<T>& ga = t->grad(aid);
                               for (int64_t r = 0; r < rows; ++r) {
                                   const T* gp = g.ptr() + r * n;
                                   const T* yp = y.ptr() + r * n;
                                   T* gap = ga.ptr() + r * n;
                                   double dot = 0;
                                   for (int64_t i = 0; i < n; ++i) dot += static_cast<double>(gp[i]) * yp[i];
                                   for (int64_t i = 0; i < n; ++i)
                                       gap[i] += yp[i] * (gp[i] - static_cast<T>(dot));
                               }
                           });
}

// scores [B,m,n] + mask [m,n] (constant, e.g. attention visibility).
template <typename T>
Val<T> add_broadcast_mat(Val<T> x, const Tensor<T>& mask) {
    const auto& s = x.shape();
    if (s.size() != 3 || mask.shape != std::vector<int64_t>{s[1], s[2]})
        fail(ErrorCode::argument, "add_broadcast_mat: shape mismatch");
    Tape<T>* tp = x.tape;
    Tensor<T> out = x.value();
    const int64_t b = s[0], mn = s[1] * s[2];
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < mn; ++j) out[i * mn + j] += mask[j];
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id](Tape<T>* t, int oid) { detail::accum(t, xid, t->node(oid).grad); });
}

// ---------- layout ----------

// [N,C,H,W] -> tokens [N*H*W, C]
template <typename T>
Val<T> nchw_to_tokens(Val<T> x) {
    const auto& s = x.shape();
    if (s.size() != 4) fail(ErrorCode::argument, "nchw_to_tokens: expected 4-d");
    Tape<T>* tp = x.tape;
    const int64_t n = s[0], c = s[1], h = s[2], w = s[3], plane = h * w;
    Tensor<T> out({n * plane, c});
    const Tensor<T>& xv = x.value();
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t p = 0; p < plane; ++p)
                out[(ni * plane + p) * c + ci] = xv[(ni * c + ci) * plane + p];
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id, n, c, plane](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t ni = 0; ni < n; ++ni)
                                   for (int64_t ci = 0; ci < c; ++ci)
                                       for (int64_t p = 0; p < plane; ++p)
                                           gx[(ni * c + ci) * plane + p] += g[(ni * plane + p) * c + ci];
                           });
}

template <typename T>
Val<T> tokens_to_nchw(Val<T> tok, int64_t n, int64_t c, int64_t h, int64_t w) {
    const auto& s = tok.shape();
    if (s.size() != 2 || s[0] != n * h * w || s[1] != c) fail(ErrorCode::argument, "tokens_to_nchw: shape mismatch");
    Tape<T>* tp = tok.tape;
    const int64_t plane = h * w;
    Tensor<T> out({n, c, h, w});
    const Tensor<T>& xv = tok.value();
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t p = 0; p < plane; ++p)
                out[(ni * c + ci) * plane + p] = xv[(ni * plane + p) * c + ci];
    return detail::make_op(tp, std::move(out), tp->requires_grad(tok.id),
                           [xid = tok.id, n, c, plane](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t ni = 0; ni < n; ++ni)
                                   for (int64_t ci = 0; ci < c; ++ci)
                                       for (int64_t p = 0; p < plane; ++p)
                                           gx[(ni * plane + p) * c + ci] += g[(ni * c + ci) * plane + p];
                           });
}

// tokens [Tk, C] -> [heads, Tk, C/heads]
template <typename T>
Val<T> split_heads(Val<T> tok, int64_t heads) {
    const auto& s = tok.shape();
    if (s.size() != 2 || s[1] % heads != 0) fail(ErrorCode::argument, "split_heads: bad shape");
    Tape<T>* tp = tok.tape;
    const int64_t tk = s[0], c = s[1], dh = c / heads;
    Tensor<T> out({heads, tk, dh});
    const Tensor<T>& xv = tok.value();
    for (int64_t hd = 0; hd < heads; ++hd)
        for (int64_t ti = 0; ti < tk; ++ti)
            for (int64_t d = 0; d < dh; ++d) out[(hd * tk + ti) * dh + d] = xv[ti * c + hd * dh + d];
    return detail::make_op(tp, std::move(out), tp->requires_grad(tok.id),
                           [xid = tok.id, heads, tk, c, dh](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t hd = 0; hd < heads; ++hd)
                                   for (int64_t ti = 0; ti < tk; ++ti)
                                       for (int64_t d = 0; d < dh; ++d)
                                           gx[ti * c + hd * dh + d] += g[(hd * tk + ti) * dh + d];
                           });
}

template <typename T>
Val<T> merge_heads(Val<T> x) {
    const auto& s = x.shape();
    if (s.size() != 3) fail(ErrorCode::argument, "merge_heads: expected 3-d");
    Tape<T>* tp = x.tape;
    const int64_t heads = s[0], tk = s[1], dh = s[2], c = heads * dh;
    Tensor<T> out({tk, c});
    const Tensor<T>& xv = x.value();
    for (int64_t hd = 0; hd < heads; ++hd)
        for (int64_t ti = 0; ti < tk; ++ti)
            for (int64_t d = 0; d < dh; ++d) out[ti * c + hd * dh + d] = xv[(hd * tk + ti) * dh + d];
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id, heads, tk, c, dh](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t hd = 0; hd < heads; ++hd)
                                   for (int64_t ti = 0; ti < tk; ++ti)
                                       for (int64_t d = 0; d < dh; ++d)
                                           gx[(hd * tk + ti) * dh + d] += g[ti * c + hd * dh + d];
                           });
}

// ---------- view-axis helpers ----------

// [V,C,H,W] -> [1,C,H,W] mean over the view axis.
template <typename T>
Val<T> mean_over_views(Val<T> x) {
    const auto& s = x.shape();
    if (s.size() != 4) fail(ErrorCode::argument, "mean_over_views: expected 4-d");
    Tape<T>* tp = x.tape;
    const int64_t v = s[0], rest = s[1] * s[2] * s[3];
    Tensor<T> out({1, s[1], s[2], s[3]});
    const Tensor<T>& xv = x.value();
    for (int64_t vi = 0; vi < v; ++vi)
        for (int64_t i = 0; i < rest; ++i) out[i] += xv[vi * rest + i];
    const T inv = static_cast<T>(1.0 / static_cast<double>(v));
    for (auto& vv : out.data) vv *= inv;
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id, v, rest, inv](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t vi = 0; vi < v; ++vi)
                                   for (int64_t i = 0; i < rest; ++i) gx[vi * rest + i] += g[i] * inv;
                           });
}

// [1,C,H,W] -> [V,C,H,W]
template <typename T>
Val<T> broadcast_views(Val<T> x, int64_t v) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[0] != 1) fail(ErrorCode::argument, "broadcast_views: expected [1,C,H,W]");
    Tape<T>* tp = x.tape;
    const int64_t rest = s[1] * s[2] * s[3];
    Tensor<T> out({v, s[1], s[2], s[3]});
    const Tensor<T>& xv = x.value();
    for (int64_t vi = 0; vi < v; ++vi) std::copy(xv.ptr(), xv.ptr() + rest, out.ptr() + vi * rest);
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id, v, rest](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t vi = 0; vi < v; ++vi)
                                   for (int64_t i = 0; i < rest; ++i) gx[i] += g[vi * rest + i];
                           });
}

// x [N,C,H,W] + b[C]
template <typename T>
Val<T> add_bias_nchw(Val<T> x, Val<T> b) {
    const auto& s = x.shape();
    if (s.size() != 4 || b.shape() != std::vector<int64_t>{s[1]})
        fail(ErrorCode::argument, "add_bias_nchw: shape mismatch");
    Tape<T>* tp = x.tape;
    const int64_t n = s[0], c = s[1], plane = s[2] * s[3];
    Tensor<T> out = x.value();
    const Tensor<T>& bv = b.value();
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t ci = 0; ci < c; ++ci) {
            T* p = out.ptr() + (ni * c + ci) * plane;
            const T bvv = bv[ci];
            for (int64_t i = 0; i < plane; ++i) p[i] += bvv;
        }
    return detail::make_op(tp, std::move(out), detail::any_rg<T>({x, b}),
                           [xid = x.id, bid = b.id, n, c, plane](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               detail::accum(t, xid, g);
                               if (t->requires_grad(bid)) {
                                   Tensor<T>& gb = t->grad(bid);
                                   for (int64_t ni = 0; ni < n; ++ni)
                                       for (int64_t ci = 0; ci < c; ++ci) {
                                           const T* p = g.ptr() + (ni * c + ci) * plane;
                                           double acc = 0;
                                           for (int64_t i = 0; i < plane; ++i) acc += static_cast<double>(p[i]);
                                           gb[ci] += static_cast<T>(acc);
                                       }
                               }
                           });
}

// Embedding lookup: one row of table [R, D].
template <typename T>
Val<T> embedding_row(Val<T> table, int64_t row) {
    const auto& s = table.shape();
    if (s.size() != 2 || row < 0 || row >= s[0]) fail(ErrorCode::argument, "embedding_row: bad row");
    Tape<T>* tp = table.tape;
    const int64_t d = s[1];
    Tensor<T> out({1, d});
    std::copy(table.value().ptr() + row * d, table.value().ptr() + (row + 1) * d, out.ptr());
    return detail::make_op(tp, std::move(out), tp->requires_grad(table.id),
                           [tid = table.id, row, d](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gt = t->grad(tid);
                               for (int64_t i = 0; i < d; ++i) gt[row * d + i] += g[i];
                           });
}

// ---------- spatial ----------

template <typename T>
Val<T> upsample_nearest2(Val<T> x) {
    const auto& s = x.shape();
    if (s.size() != 4) fail(ErrorCode::argument, "upsample_nearest2: expected 4-d");
    Tape<T>* tp = x.tape;
    const int64_t n = s[0], c = s[1], h = s[2], w = s[3];
    Tensor<T> out({n, c, h * 2, w * 2});
    const Tensor<T>& xv = x.value();
    for (int64_t nc = 0; nc < n * c; ++nc)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t xx = 0; xx < w; ++xx) {
                const T v = xv[(nc * h + y) * w + xx];
                T* o = out.ptr() + (nc * h * 2 + y * 2) * w * 2 + xx * 2;
                o[0] = v;
                o[1] = v;
                o[w * 2] = v;
                o[w * 2 + 1] = v;
            }
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id, n, c, h, w](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t nc = 0; nc < n * c; ++nc)
                                   for (int64_t y = 0; y < h; ++y)
                                       for (int64_t xx = 0; xx < w; ++xx) {
                                           const T* o = g.ptr() + (nc * h * 2 + y * 2) * w * 2 + xx * 2;
                                           gx[(nc * h + y) * w + xx] += o[0] + o[1] + o[w * 2] + o[w * 2 + 1];
                                       }
                           });
}

template <typename T>
Val<T> avg_pool2d(Val<T> x, int64_t k) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[2] % k || s[3] % k) fail(ErrorCode::argument, "avg_pool2d: bad factor");
    Tape<T>* tp = x.tape;
    const int64_t n = s[0], c = s[1], h = s[2], w = s[3], ho = h / k, wo = w / k;
    Tensor<T> out({n, c, ho, wo});
    const Tensor<T>& xv = x.value();
    const T inv = static_cast<T>(1.0 / static_cast<double>(k * k));
    for (int64_t nc = 0; nc < n * c; ++nc)
        for (int64_t y = 0; y < ho; ++y)
            for (int64_t xx = 0; xx < wo; ++xx) {
                double acc = 0;
                for (int64_t dy = 0; dy < k; ++dy)
                    for (int64_t dx = 0; dx < k; ++dx)
                        acc += static_cast<double>(xv[(nc * h + y * k + dy) * w + xx * k + dx]);
                out[(nc * ho + y) * wo + xx] = static_cast<T>(acc) * inv;
            }
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id, n, c, h, w, ho, wo, k, inv](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t nc = 0; nc < n * c; ++nc)
                                   for (int64_t y = 0; y < ho; ++y)
                                       for (int64_t xx = 0; xx < wo; ++xx) {
                                           const T gv = g[(nc * ho + y) * wo + xx] * inv;
                                           for (int64_t dy = 0; dy < k; ++dy)
                                               for (int64_t dx = 0; dx < k; ++dx)
                                                   gx[(nc * h + y * k + dy) * w + xx * k + dx] += gv;
                                       }
                           });
}

// Horizontal forward difference: y[...,x] = in[...,x+1] - in[...,x].
template <typename T>
Val<T> finite_diff_x(Val<T> x) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[3] < 2) fail(ErrorCode::argument, "finite_diff_x: bad shape");
    Tape<T>* tp = x.tape;
    const int64_t n = s[0] * s[1] * s[2], w = s[3];
    Tensor<T> out({s[0], s[1], s[2], w - 1});
    const Tensor<T>& xv = x.value();
    for (int64_t r = 0; r < n; ++r)
        for (int64_t i = 0; i < w - 1; ++i) out[r * (w - 1) + i] = xv[r * w + i + 1] - xv[r * w + i];
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id, n, w](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t r = 0; r < n; ++r)
                                   for (int64_t i = 0; i < w - 1; ++i) {
                                       gx[r * w + i + 1] += g[r * (w - 1) + i];
                                       gx[r * w + i] -= g[r * (w - 1) + i];
                                   }
                           });
}

template <typename T>
Val<T> finite_diff_y(Val<T> x) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[2] < 2) fail(ErrorCode::argument, "finite_diff_y: bad shape");
    Tape<T>* tp = x.tape;
    const int64_t nc = s[0] * s[1], h = s[2], w = s[3];
    Tensor<T> out({s[0], s[1], h - 1, w});
    const Tensor<T>& xv = x.value();
    for (int64_t r = 0; r < nc; ++r)
        for (int64_t y = 0; y < h - 1; ++y)
            for (int64_t i = 0; i < w; ++i)
                out[(r * (h - 1) + y) * w + i] = xv[(r * h + y + 1) * w + i] - xv[(r * h + y) * w + i];
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id, nc, h, w](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t r = 0; r < nc; ++r)
                                   for (int64_t y = 0; y < h - 1; ++y)
                                       for (int64_t i = 0; i < w; ++i) {
                                           gx[(r * h + y + 1) * w + i] += g[(r * (h - 1) + y) * w + i];
                                           gx[(r * h + y) * w + i] -= g[(r * (h - 1) + y) * w + i];
                                       }
                           });
}

// ---------- conv / norm / dropout ----------

// x: [N,Cin,H,W], w: [Cout,Cin,kh,kw], bias: [Cout]; zero padding.
template <typename T>
Val<T> conv2d(Val<T> x, Val<T> w, Val<T> bias, int64_t stride, int64_t pad) {
    const auto& sx = x.shape();
    const auto& sw = w.shape();
    if (sx.size() != 4 || sw.size() != 4 || sx[1] != sw[1])
        fail(ErrorCode::argument, "conv2d: shape mismatch " + shape_str(sx) + " vs " + shape_str(sw));
    if (bias.shape() != std::vector<int64_t>{sw[0]}) fail(ErrorCode::argument, "conv2d: bias shape mismatch");
    Tape<T>* tp = x.tape;
    const int64_t n = sx[0], cin = sx[1], h = sx[2], wd = sx[3];
    const int64_t cout = sw[0], kh = sw[2], kw = sw[3];
    const int64_t ho = (h + 2 * pad - kh) / stride + 1;
    const int64_t wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) fail(ErrorCode::argument, "conv2d: empty output");
    const int64_t kdim = cin * kh * kw, pdim = ho * wo;

    auto im2col = [=](const T* xn, Tensor<T>& cols) {
        for (int64_t ci = 0; ci < cin; ++ci)
            for (int64_t ky = 0; ky < kh; ++ky)
                for (int64_t kx = 0; kx < kw; ++kx) {
                    T* row = cols.ptr() + ((ci * kh + ky) * kw + kx) * pdim;
                    for (int64_t oy = 0; oy < ho; ++oy) {
                        const int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) {
                            for (int64_t ox = 0; ox < wo; ++ox) row[oy * wo + ox] = T(0);
                            continue;
                        }
                        for (int64_t ox = 0; ox < wo; ++ox) {
                            const int64_t ix = ox * stride - pad + kx;
                            row[oy * wo + ox] = (ix >= 0 && ix < wd) ? xn[(ci * h + iy) * wd + ix] : T(0);
                        }
                    }
                }
    };

    Tensor<T> out({n, cout, ho, wo});
    {
        const Tensor<T>& xv = x.value();
        const Tensor<T>& wv = w.value();
        const Tensor<T>& bv = bias.value();
        parallel_for(n, [&](int64_t ni) {
            Tensor<T> cols({kdim, pdim});
            im2col(xv.ptr() + ni * cin * h * wd, cols);
            detail::RowMap<T> om(out.ptr() + ni * cout * pdim, cout, pdim);
            om.noalias() = detail::CRowMap<T>(wv.ptr(), cout, kdim) * detail::CRowMap<T>(cols.ptr(), kdim, pdim);
            for (int64_t co = 0; co < cout; ++co) om.row(co).array() += static_cast<T>(bv[co]);
        });
    }

    return detail::make_op(
        tp, std::move(out), detail::any_rg<T>({x, w, bias}),
        [xid = x.id, wid = w.id, bid = bias.id, n, cin, h, wd, cout, kh, kw, ho, wo, stride, pad, kdim,
         pdim, im2col](Tape<T>* t, int oid) {
            const Tensor<T>& g = t->node(oid).grad;
            const Tensor<T>& xv = t->node(xid).value;
            const Tensor<T>& wv = t->node(wid).value;
            const bool need_x = t->requires_grad(xid);
            const bool need_w = t->requires_grad(wid);
            const bool need_b = t->requires_grad(bid);

            std::vector<Tensor<T>> gw_per(n);
            Tensor<T>* gx = need_x ? &t->grad(xid) : nullptr;
            parallel_for(n, [&](int64_t ni) {
                detail::CRowMap<T> gm(g.ptr() + ni * cout * pdim, cout, pdim);
                Tensor<T> cols({kdim, pdim});
                if (need_w || need_x) im2col(xv.ptr() + ni * cin * h * wd, cols);
                if (need_w) {
                    gw_per[static_cast<size_t>(ni)] = Tensor<T>({cout, kdim});
                    detail::RowMap<T>(gw_per[static_cast<size_t>(ni)].ptr(), cout, kdim).noalias() =
                        gm * detail::CRowMap<T>(cols.ptr(), kdim, pdim).transpose();
                }
                if (need_x) {
                    Tensor<T> gcols({kdim, pdim});
                    detail::RowMap<T>(gcols.ptr(), kdim, pdim).noalias() =
                        detail::CRowMap<T>(wv.ptr(), cout, kdim).transpose() * gm;
                    // col2im scatter, disjoint per batch item
                    T* gxn = gx->ptr() + ni * cin * h * wd;
                    for (int64_t ci = 0; ci < cin; ++ci)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                const T* row = gcols.ptr() + ((ci * kh + ky) * kw + kx) * pdim;
                                for (int64_t oy = 0; oy < ho; ++oy) {
                                    const int64_t iy = oy * stride - pad + ky;
                                    if (iy < 0 || iy >= h) continue;
                                    for (int64_t ox = 0; ox < wo; ++ox) {
                                        const int64_t ix = ox * stride - pad + kx;
                                        if (ix >= 0 && ix < wd) gxn[(ci * h + iy) * wd + ix] += row[oy * wo + ox];
                                    }
                                }
                            }
                }
            });
            if (need_w) {
                Tensor<T>& gw = t->grad(wid);
                for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t i = 0; i < cout * kdim; ++i) gw[i] += gw_per[static_cast<size_t>(ni)][i];
            }
            if (need_b) {
                Tensor<T>& gb = t->grad(bid);
                for (int64_t ni = 0; ni < n; ++ni)
                    for (int64_t co = 0; co < cout; ++co) {
                        const T* p = g.ptr() + (ni * cout + co) * pdim;
                        double acc = 0;
                        for (int64_t i = 0; i < pdim; ++i) acc += static_cast<double>(p[i]);
                        gb[co] += static_cast<T>(acc);
                    }
            }
        });
}

// GroupNorm over [N,C,H,W]; gamma, beta: [C].
template <typename T>
Val<T> group_norm(Val<T> x, Val<T> gamma, Val<T> beta, int64_t groups, double eps = 1e-5) {
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] % groups != 0) fail(ErrorCode::argument, "group_norm: bad groups");
    if (gamma.shape() != std::vector<int64_t>{s[1]} || beta.shape() != std::vector<int64_t>{s[1]})
        fail(ErrorCode::argument, "group_norm: affine shape mismatch");
    Tape<T>* tp = x.tape;
    const int64_t n = s[0], c = s[1], plane = s[2] * s[3], cg = c / groups, m = cg * plane;

    auto out = Tensor<T>(s);
    Tensor<T> mean({n, groups}), inv_std({n, groups});
    const Tensor<T>& xv = x.value();
    const Tensor<T>& gv = gamma.value();
    const Tensor<T>& bv = beta.value();
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t gi = 0; gi < groups; ++gi) {
            const T* base = xv.ptr() + (ni * c + gi * cg) * plane;
            double mu = 0;
            for (int64_t i = 0; i < m; ++i) mu += static_cast<double>(base[i]);
            mu /= static_cast<double>(m);
            double var = 0;
            for (int64_t i = 0; i < m; ++i) {
                const double d = static_cast<double>(base[i]) - mu;
                var += d * d;
            }
            var /= static_cast<double>(m);
            const double istd = 1.0 / std::sqrt(var + eps);
            mean[ni * groups + gi] = static_cast<T>(mu);
            inv_std[ni * groups + gi] = static_cast<T>(istd);
            T* o = out.ptr() + (ni * c + gi * cg) * plane;
            for (int64_t ci = 0; ci < cg; ++ci) {
                const T gam = gv[gi * cg + ci], bet = bv[gi * cg + ci];
                for (int64_t i = 0; i < plane; ++i) {
                    const double xh = (static_cast<double>(base[ci * plane + i]) - mu) * istd;
                    o[ci * plane + i] = static_cast<T>(xh) * gam + bet;
                }
            }
        }

    return detail::make_op(
        tp, std::move(out), detail::any_rg<T>({x, gamma, beta}),
        [xid = x.id, gid = gamma.id, bid = beta.id, n, c, plane, cg, m, groups, mean,
         inv_std](Tape<T>* t, int oid) {
            const Tensor<T>& g = t->node(oid).grad;
            const Tensor<T>& xv = t->node(xid).value;
            const Tensor<T>& gv = t->node(gid).value;
            const bool need_x = t->requires_grad(xid);
            const bool need_g = t->requires_grad(gid);
            const bool need_b = t->requires_grad(bid);
            Tensor<T>* gx = need_x ? &t->grad(xid) : nullptr;
            Tensor<T>* gg = need_g ? &t->grad(gid) : nullptr;
            Tensor<T>* gb = need_b ? &t->grad(bid) : nullptr;
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t gi = 0; gi < groups; ++gi) {
                    const T* xb = xv.ptr() + (ni * c + gi * cg) * plane;
                    const T* gop = g.ptr() + (ni * c + gi * cg) * plane;
                    const double mu = static_cast<double>(mean[ni * groups + gi]);
                    const double istd = static_cast<double>(inv_std[ni * groups + gi]);
                    // means of dxhat and dxhat * xhat over the group
                    double s1 = 0, s2 = 0;
                    for (int64_t ci = 0; ci < cg; ++ci) {
                        const double gam = static_cast<double>(gv[gi * cg + ci]);
                        for (int64_t i = 0; i < plane; ++i) {
                            const double xh = (static_cast<double>(xb[ci * plane + i]) - mu) * istd;
                            const double dxh = static_cast<double>(gop[ci * plane + i]) * gam;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                    }
                    s1 /= static_cast<double>(m);
                    s2 /= static_cast<double>(m);
                    for (int64_t ci = 0; ci < cg; ++ci) {
                        const double gam = static_cast<double>(gv[gi * cg + ci]);
                        double dgam = 0, dbet = 0;
                        for (int64_t i = 0; i < plane; ++i) {
                            const double xh = (static_cast<double>(xb[ci * plane + i]) - mu) * istd;
                            const double go = static_cast<double>(gop[ci * plane + i]);
                            if (need_x) {
                                const double dxh = go * gam;
                                (*gx)[(ni * c + gi * cg + ci) * plane + i] +=
                                    static_cast<T>((dxh - s1 - xh * s2) * istd);
                            }
                            dgam += go * xh;
                            dbet += go;
                        }
                        if (need_g) (*gg)[gi * cg + ci] += static_cast<T>(dgam);
                        if (need_b) (*gb)[gi * cg + ci] += static_cast<T>(dbet);
                    }
                }
        });
}

// Inverted dropout; identity in eval mode. The mask is drawn from `rng`.
template <typename T>
Val<T> dropout(Val<T> x, double rate, Rng& rng, bool training) {
    if (!training || rate <= 0.0) return x;
    Tape<T>* tp = x.tape;
    const double keep = 1.0 - rate;
    Tensor<T> mask(x.shape());
    for (auto& v : mask.data) v = rng.uniform() < rate ? T(0) : static_cast<T>(1.0 / keep);
    Tensor<T> out = x.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
    return detail::make_op(tp, std::move(out), tp->requires_grad(x.id),
                           [xid = x.id, mask = std::move(mask)](Tape<T>* t, int oid) {
                               const Tensor<T>& g = t->node(oid).grad;
                               Tensor<T>& gx = t->grad(xid);
                               for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * mask[i];
                           });
}

}  // namespace ad
}  // namespace splatgen

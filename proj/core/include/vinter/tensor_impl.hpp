#pragma once

// Implementation of the traced tensor operations. Included by tensor.hpp.

#include <algorithm>
#include <numbers>

namespace vinter {

namespace detail {

// Leading-dimension broadcasting: shapes are right-aligned; the trailing
// dims must match exactly and every leading mismatch must have size 1 on
// one side.
struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> a_strides;  // 0 on broadcast dims
    std::vector<std::size_t> b_strides;
    bool a_broadcast = false;
    bool b_broadcast = false;
};

inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

inline BroadcastPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape pa(r, 1), pb(r, 1);
    std::copy(a.begin(), a.end(), pa.begin() + (r - a.size()));
    std::copy(b.begin(), b.end(), pb.begin() + (r - b.size()));
    // Broadcast dims must form a prefix: after the first position where the
    // padded shapes agree on a size, no further mismatch is allowed.
    std::size_t last_mismatch = 0;
    bool any_mismatch = false;
    for (std::size_t i = 0; i < r; ++i) {
        if (pa[i] != pb[i]) {
            if (pa[i] != 1 && pb[i] != 1) {
                throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                     shape_str(b) + " do not match");
            }
            any_mismatch = true;
            last_mismatch = i;
        }
    }
    if (any_mismatch) {
        // Reject broadcasts that are not leading (e.g. [l,1] vs [l,h]).
        for (std::size_t i = 0; i < last_mismatch; ++i) {
            if (pa[i] == pb[i] && pa[i] != 1) {
                throw DimensionError(std::string(op) + ": only leading dimensions may broadcast: " +
                                     shape_str(a) + " vs " + shape_str(b));
            }
        }
    }
    BroadcastPlan plan;
    plan.out.resize(r);
    for (std::size_t i = 0; i < r; ++i) plan.out[i] = std::max(pa[i], pb[i]);
    auto sa = row_major_strides(pa);
    auto sb = row_major_strides(pb);
    plan.a_strides.resize(r);
    plan.b_strides.resize(r);
    for (std::size_t i = 0; i < r; ++i) {
        plan.a_strides[i] = (pa[i] == 1 && plan.out[i] != 1) ? 0 : sa[i];
        plan.b_strides[i] = (pb[i] == 1 && plan.out[i] != 1) ? 0 : sb[i];
        plan.a_broadcast = plan.a_broadcast || (plan.a_strides[i] == 0);
        plan.b_broadcast = plan.b_broadcast || (plan.b_strides[i] == 0);
    }
    return plan;
}

// Calls fn(out_flat, a_flat, b_flat) for every element of plan.out.
template <typename Fn>
void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
    const std::size_t r = plan.out.size();
    const std::size_t total = shape_size(plan.out);
    std::vector<std::size_t> idx(r, 0);
    std::size_t ao = 0, bo = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
        fn(flat, ao, bo);
        for (std::size_t d = r; d-- > 0;) {
            ++idx[d];
            ao += plan.a_strides[d];
            bo += plan.b_strides[d];
            if (idx[d] < plan.out[d]) break;
            ao -= plan.a_strides[d] * plan.out[d];
            bo -= plan.b_strides[d] * plan.out[d];
            idx[d] = 0;
        }
    }
}

template <typename Real>
void matmul_kernel(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k,
                   std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        Real* crow = c + i * p;
        for (std::size_t l = 0; l < k; ++l) {
            const Real av = arow[l];
            const Real* brow = b + l * p;
            for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
}

// da[i,l] += sum_j dc[i,j] * b[l,j]
template <typename Real>
void matmul_grad_a(const Real* dc, const Real* b, Real* da, std::size_t m, std::size_t k,
                   std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* dcrow = dc + i * p;
        Real* darow = da + i * k;
        for (std::size_t l = 0; l < k; ++l) {
            const Real* brow = b + l * p;
            Real s = 0;
            for (std::size_t j = 0; j < p; ++j) s += dcrow[j] * brow[j];
            darow[l] += s;
        }
    }
}

// db[l,j] += sum_i a[i,l] * dc[i,j]
template <typename Real>
void matmul_grad_b(const Real* dc, const Real* a, Real* db, std::size_t m, std::size_t k,
                   std::size_t p) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* arow = a + i * k;
        const Real* dcrow = dc + i * p;
        for (std::size_t l = 0; l < k; ++l) {
            const Real av = arow[l];
            Real* dbrow = db + l * p;
            for (std::size_t j = 0; j < p; ++j) dbrow[j] += av * dcrow[j];
        }
    }
}

// Iteration geometry for reductions along one axis.
struct AxisSpan {
    std::size_t outer, n, inner;
};

inline AxisSpan axis_span(const Shape& s, std::size_t axis) {
    AxisSpan sp{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
    return sp;
}

}  // namespace detail

template <typename Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        throw DimensionError("matmul: operands must have rank >= 2: " + shape_str(sa) + " vs " +
                             shape_str(sb));
    }
    const std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const std::size_t k2 = sb[sb.size() - 2], p = sb[sb.size() - 1];
    if (k != k2) {
        throw DimensionError("matmul: inner dimensions disagree: " + shape_str(sa) + " vs " +
                             shape_str(sb));
    }
    const Shape batch_a(sa.begin(), sa.end() - 2);
    const Shape batch_b(sb.begin(), sb.end() - 2);
    auto plan = detail::broadcast_plan("matmul", batch_a, batch_b);
    Shape out_shape = plan.out;
    out_shape.push_back(m);
    out_shape.push_back(p);

    std::vector<Real> out(shape_size(out_shape), Real(0));
    const std::size_t a_block = m * k, b_block = k * p, c_block = m * p;
    const std::size_t batches = shape_size(plan.out);

    // Flat batch offsets for a and b per output batch.
    std::vector<std::size_t> a_off(batches), b_off(batches);
    detail::for_each_broadcast(plan, [&](std::size_t f, std::size_t ao, std::size_t bo) {
        a_off[f] = ao;
        b_off[f] = bo;
    });
    for (std::size_t bi = 0; bi < batches; ++bi) {
        detail::matmul_kernel(a.data().data() + a_off[bi] * a_block,
                              b.data().data() + b_off[bi] * b_block, out.data() + bi * c_block, m,
                              k, p);
    }

    return detail::make_op<Real>(
        "matmul", std::move(out_shape), std::move(out), {a, b},
        [a, b, a_off = std::move(a_off), b_off = std::move(b_off), m, k, p, a_block, b_block,
         c_block, batches](detail::TensorNode<Real>& node) {
            const Real* dc = node.grad.data();
            for (std::size_t bi = 0; bi < batches; ++bi) {
                if (a.requires_grad()) {
                    detail::matmul_grad_a(dc + bi * c_block, b.data().data() + b_off[bi] * b_block,
                                          a.node()->grad.data() + a_off[bi] * a_block, m, k, p);
                }
                if (b.requires_grad()) {
                    detail::matmul_grad_b(dc + bi * c_block, a.data().data() + a_off[bi] * a_block,
                                          b.node()->grad.data() + b_off[bi] * b_block, m, k, p);
                }
            }
        });
}

namespace detail {

template <typename Real, typename Fwd>
Tensor<Real> binary_elementwise(const char* op, const Tensor<Real>& a, const Tensor<Real>& b,
                                Fwd&& fwd, std::function<void(detail::TensorNode<Real>&)> backprop_same,
                                std::function<void(detail::TensorNode<Real>&, const BroadcastPlan&)> backprop_bcast) {
    if (a.shape() == b.shape()) {
        std::vector<Real> out(a.size());
        const auto& da = a.data();
        const auto& db = b.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(da[i], db[i]);
        return make_op<Real>(op, a.shape(), std::move(out), {a, b}, std::move(backprop_same));
    }
    auto plan = broadcast_plan(op, a.shape(), b.shape());
    std::vector<Real> out(shape_size(plan.out));
    const auto& da = a.data();
    const auto& db = b.data();
    for_each_broadcast(plan, [&](std::size_t f, std::size_t ao, std::size_t bo) {
        out[f] = fwd(da[ao], db[bo]);
    });
    Shape out_shape = plan.out;
    auto bp = [plan, backprop_bcast](detail::TensorNode<Real>& node) { backprop_bcast(node, plan); };
    return make_op<Real>(op, std::move(out_shape), std::move(out), {a, b}, std::move(bp));
}

}  // namespace detail

template <typename Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_elementwise<Real>(
        "add", a, b, [](Real x, Real y) { return x + y; },
        [a, b](detail::TensorNode<Real>& node) {
            if (a.requires_grad()) detail::axpy(a.node()->grad, node.grad);
            if (b.requires_grad()) detail::axpy(b.node()->grad, node.grad);
        },
        [a, b](detail::TensorNode<Real>& node, const detail::BroadcastPlan& plan) {
            auto& ga = a.node()->grad;
            auto& gb = b.node()->grad;
            const bool wa = a.requires_grad(), wb = b.requires_grad();
            detail::for_each_broadcast(plan, [&](std::size_t f, std::size_t ao, std::size_t bo) {
                if (wa) ga[ao] += node.grad[f];
                if (wb) gb[bo] += node.grad[f];
            });
        });
}

template <typename Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
    return detail::binary_elementwise<Real>(
        "mul", a, b, [](Real x, Real y) { return x * y; },
        [a, b](detail::TensorNode<Real>& node) {
            const auto& da = a.data();
            const auto& db = b.data();
            if (a.requires_grad()) {
                auto& g = a.node()->grad;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * db[i];
            }
            if (b.requires_grad()) {
                auto& g = b.node()->grad;
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * da[i];
            }
        },
        [a, b](detail::TensorNode<Real>& node, const detail::BroadcastPlan& plan) {
            const auto& da = a.data();
            const auto& db = b.data();
            auto& ga = a.node()->grad;
            auto& gb = b.node()->grad;
            const bool wa = a.requires_grad(), wb = b.requires_grad();
            detail::for_each_broadcast(plan, [&](std::size_t f, std::size_t ao, std::size_t bo) {
                if (wa) ga[ao] += node.grad[f] * db[bo];
                if (wb) gb[bo] += node.grad[f] * da[ao];
            });
        });
}

template <typename Real>
Tensor<Real> scale(const Tensor<Real>& x, Real factor) {
    std::vector<Real> out(x.size());
    const auto& d = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] * factor;
    return detail::make_op<Real>("scale", x.shape(), std::move(out), {x},
                                 [x, factor](detail::TensorNode<Real>& node) {
                                     auto& g = x.node()->grad;
                                     for (std::size_t i = 0; i < g.size(); ++i)
                                         g[i] += node.grad[i] * factor;
                                 });
}

template <typename Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
    return add(a, scale(b, Real(-1)));
}

template <typename Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
    // tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    constexpr Real c = Real(0.7978845608028654);  // sqrt(2/pi)
    constexpr Real kCubic = Real(0.044715);
    std::vector<Real> out(x.size());
    const auto& d = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real v = d[i];
        out[i] = Real(0.5) * v * (Real(1) + std::tanh(c * (v + kCubic * v * v * v)));
    }
    return detail::make_op<Real>(
        "gelu", x.shape(), std::move(out), {x}, [x](detail::TensorNode<Real>& node) {
            const auto& d = x.data();
            auto& g = x.node()->grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                const Real v = d[i];
                const Real u = c * (v + kCubic * v * v * v);
                const Real t = std::tanh(u);
                const Real du = c * (Real(1) + Real(3) * kCubic * v * v);
                g[i] += node.grad[i] *
                        (Real(0.5) * (Real(1) + t) + Real(0.5) * v * (Real(1) - t * t) * du);
            }
        });
}

template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " +
                             shape_str(x.shape()));
    }
    const auto sp = detail::axis_span(x.shape(), axis);
    std::vector<Real> out(x.size());
    const auto& d = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.n * sp.inner + in;
            Real mx = d[base];
            for (std::size_t i = 1; i < sp.n; ++i) mx = std::max(mx, d[base + i * sp.inner]);
            Real denom = 0;
            for (std::size_t i = 0; i < sp.n; ++i) {
                const Real e = std::exp(d[base + i * sp.inner] - mx);
                out[base + i * sp.inner] = e;
                denom += e;
            }
            for (std::size_t i = 0; i < sp.n; ++i) out[base + i * sp.inner] /= denom;
        }
    }
    Tensor<Real> result = detail::make_op<Real>(
        "softmax", x.shape(), std::move(out), {x}, [x, sp](detail::TensorNode<Real>& node) {
            // dx = y * (dy - sum(dy * y)) per slice
            auto& g = x.node()->grad;
            const auto& y = node.data;
            const auto& dy = node.grad;
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    const std::size_t base = o * sp.n * sp.inner + in;
                    Real dot = 0;
                    for (std::size_t i = 0; i < sp.n; ++i) {
                        const std::size_t p = base + i * sp.inner;
                        dot += dy[p] * y[p];
                    }
                    for (std::size_t i = 0; i < sp.n; ++i) {
                        const std::size_t p = base + i * sp.inner;
                        g[p] += y[p] * (dy[p] - dot);
                    }
                }
            }
        });
    return result;
}

template <typename Real>
Tensor<Real> log_softmax(const Tensor<Real>& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw DimensionError("log_softmax: axis " + std::to_string(axis) + " invalid for " +
                             shape_str(x.shape()));
    }
    const auto sp = detail::axis_span(x.shape(), axis);
    std::vector<Real> out(x.size());
    const auto& d = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.n * sp.inner + in;
            Real mx = d[base];
            for (std::size_t i = 1; i < sp.n; ++i) mx = std::max(mx, d[base + i * sp.inner]);
            Real denom = 0;
            for (std::size_t i = 0; i < sp.n; ++i) denom += std::exp(d[base + i * sp.inner] - mx);
            const Real lse = mx + std::log(denom);
            for (std::size_t i = 0; i < sp.n; ++i)
                out[base + i * sp.inner] = d[base + i * sp.inner] - lse;
        }
    }
    return detail::make_op<Real>(
        "log_softmax", x.shape(), std::move(out), {x}, [x, sp](detail::TensorNode<Real>& node) {
            // dx = dy - softmax(x) * sum(dy) per slice
            auto& g = x.node()->grad;
            const auto& y = node.data;
            const auto& dy = node.grad;
            for (std::size_t o = 0; o < sp.outer; ++o) {
                for (std::size_t in = 0; in < sp.inner; ++in) {
                    const std::size_t base = o * sp.n * sp.inner + in;
                    Real total = 0;
                    for (std::size_t i = 0; i < sp.n; ++i) total += dy[base + i * sp.inner];
                    for (std::size_t i = 0; i < sp.n; ++i) {
                        const std::size_t p = base + i * sp.inner;
                        g[p] += dy[p] - std::exp(y[p]) * total;
                    }
                }
            }
        });
}

template <typename Real>
Tensor<Real> reshape(const Tensor<Real>& x, Shape new_shape) {
    if (shape_size(new_shape) != x.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                             shape_str(new_shape));
    }
    return detail::make_op<Real>("reshape", std::move(new_shape), x.data(), {x},
                                 [x](detail::TensorNode<Real>& node) {
                                     detail::axpy(x.node()->grad, node.grad);
                                 });
}

template <typename Real>
Tensor<Real> transpose(const Tensor<Real>& x, std::size_t axis_a, std::size_t axis_b) {
    const Shape& s = x.shape();
    if (axis_a >= s.size() || axis_b >= s.size()) {
        throw DimensionError("transpose: axes out of range for " + shape_str(s));
    }
    Shape out_shape = s;
    std::swap(out_shape[axis_a], out_shape[axis_b]);
    const auto in_strides = detail::row_major_strides(s);
    const std::size_t r = s.size();
    std::vector<Real> out(x.size());
    const auto& d = x.data();
    // out[i0,..,ia<->ib,..] = x[i0,..]
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
        std::size_t src = 0;
        for (std::size_t t = 0; t < r; ++t) {
            std::size_t which = t;
            if (t == axis_a) which = axis_b;
            else if (t == axis_b) which = axis_a;
            src += idx[which] * in_strides[t];
        }
        out[flat] = d[src];
        for (std::size_t t = r; t-- > 0;) {
            if (++idx[t] < out_shape[t]) break;
            idx[t] = 0;
        }
    }
    return detail::make_op<Real>(
        "transpose", std::move(out_shape), std::move(out), {x},
        [x, axis_a, axis_b](detail::TensorNode<Real>& node) {
            // gradient flows back through the inverse permutation (same swap)
            const Shape& os = node.shape;
            const std::size_t rr = os.size();
            const auto in_str = detail::row_major_strides(x.shape());
            std::vector<std::size_t> id2(rr, 0);
            auto& g = x.node()->grad;
            for (std::size_t flat = 0; flat < node.grad.size(); ++flat) {
                std::size_t src = 0;
                for (std::size_t t = 0; t < rr; ++t) {
                    std::size_t which = t;
                    if (t == axis_a) which = axis_b;
                    else if (t == axis_b) which = axis_a;
                    src += id2[which] * in_str[t];
                }
                g[src] += node.grad[flat];
                for (std::size_t t = rr; t-- > 0;) {
                    if (++id2[t] < os[t]) break;
                    id2[t] = 0;
                }
            }
        });
}

template <typename Real>
Tensor<Real> concat(const std::vector<Tensor<Real>>& xs, std::size_t axis) {
    if (xs.empty()) throw ContractError("concat: needs at least one input");
    const Shape& s0 = xs[0].shape();
    if (axis >= s0.size()) throw DimensionError("concat: axis out of range for " + shape_str(s0));
    Shape out_shape = s0;
    std::size_t axis_total = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        if (s.size() != s0.size()) {
            throw DimensionError("concat: rank mismatch: " + shape_str(s0) + " vs " + shape_str(s));
        }
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != s0[i]) {
                throw DimensionError("concat: shapes " + shape_str(s0) + " and " + shape_str(s) +
                                     " differ off-axis");
            }
        }
        axis_total += s[axis];
    }
    out_shape[axis] = axis_total;
    const auto sp = detail::axis_span(out_shape, axis);
    std::vector<Real> out(shape_size(out_shape));
    // Copy block rows: for each outer slice, inputs contribute contiguous
    // [n_i * inner] chunks in order.
    std::size_t offset = 0;  // offset within the axis
    for (const auto& x : xs) {
        const std::size_t n_i = x.shape()[axis];
        const auto& d = x.data();
        for (std::size_t o = 0; o < sp.outer; ++o) {
            const Real* src = d.data() + o * n_i * sp.inner;
            Real* dst = out.data() + (o * sp.n + offset) * sp.inner;
            std::copy(src, src + n_i * sp.inner, dst);
        }
        offset += n_i;
    }
    return detail::make_op<Real>(
        "concat", std::move(out_shape), std::move(out), xs,
        [xs, axis, sp](detail::TensorNode<Real>& node) {
            std::size_t off = 0;
            for (const auto& x : xs) {
                const std::size_t n_i = x.shape()[axis];
                if (x.requires_grad()) {
                    auto& g = x.node()->grad;
                    for (std::size_t o = 0; o < sp.outer; ++o) {
                        const Real* src = node.grad.data() + (o * sp.n + off) * sp.inner;
                        Real* dst = g.data() + o * n_i * sp.inner;
                        for (std::size_t i = 0; i < n_i * sp.inner; ++i) dst[i] += src[i];
                    }
                }
                off += n_i;
            }
        });
}

template <typename Real>
Tensor<Real> slice(const Tensor<Real>& x, std::size_t axis, std::size_t start, std::size_t end) {
    const Shape& s = x.shape();
    if (axis >= s.size()) throw DimensionError("slice: axis out of range for " + shape_str(s));
    if (start >= end || end > s[axis]) {
        throw IndexError("slice: range [" + std::to_string(start) + "," + std::to_string(end) +
                         ") invalid for axis of size " + std::to_string(s[axis]));
    }
    Shape out_shape = s;
    out_shape[axis] = end - start;
    const auto sp = detail::axis_span(s, axis);
    const std::size_t n_out = end - start;
    std::vector<Real> out(shape_size(out_shape));
    const auto& d = x.data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
        const Real* src = d.data() + (o * sp.n + start) * sp.inner;
        Real* dst = out.data() + o * n_out * sp.inner;
        std::copy(src, src + n_out * sp.inner, dst);
    }
    return detail::make_op<Real>(
        "slice", std::move(out_shape), std::move(out), {x},
        [x, sp, start, n_out](detail::TensorNode<Real>& node) {
            auto& g = x.node()->grad;
            for (std::size_t o = 0; o < sp.outer; ++o) {
                const Real* src = node.grad.data() + o * n_out * sp.inner;
                Real* dst = g.data() + (o * sp.n + start) * sp.inner;
                for (std::size_t i = 0; i < n_out * sp.inner; ++i) dst[i] += src[i];
            }
        });
}

template <typename Real>
Tensor<Real> sum(const Tensor<Real>& x) {
    Real total = 0;
    for (Real v : x.data()) total += v;
    return detail::make_op<Real>("sum", Shape{}, {total}, {x},
                                 [x](detail::TensorNode<Real>& node) {
                                     const Real g = node.grad[0];
                                     auto& gx = x.node()->grad;
                                     for (auto& v : gx) v += g;
                                 });
}

template <typename Real>
Tensor<Real> mean(const Tensor<Real>& x) {
    if (x.size() == 0) throw ContractError("mean: empty tensor");
    Real total = 0;
    for (Real v : x.data()) total += v;
    const Real inv = Real(1) / static_cast<Real>(x.size());
    return detail::make_op<Real>("mean", Shape{}, {total * inv}, {x},
                                 [x, inv](detail::TensorNode<Real>& node) {
                                     const Real g = node.grad[0] * inv;
                                     auto& gx = x.node()->grad;
                                     for (auto& v : gx) v += g;
                                 });
}

template <typename Real>
Tensor<Real> embedding_lookup(const Tensor<Real>& table, const std::vector<int>& ids) {
    if (table.rank() != 2) {
        throw DimensionError("embedding_lookup: table must be rank 2, got " +
                             shape_str(table.shape()));
    }
    const std::size_t rows = table.dim(0), width = table.dim(1);
    std::vector<Real> out(ids.size() * width);
    const auto& d = table.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= rows) {
            throw IndexError("embedding_lookup: id " + std::to_string(id) +
                             " out of range for table with " + std::to_string(rows) + " rows");
        }
        std::copy(d.begin() + id * width, d.begin() + (id + 1) * width, out.begin() + i * width);
    }
    return detail::make_op<Real>(
        "embedding_lookup", Shape{ids.size(), width}, std::move(out), {table},
        [table, ids, width](detail::TensorNode<Real>& node) {
            auto& g = table.node()->grad;
            for (std::size_t i = 0; i < ids.size(); ++i) {
                const std::size_t base = static_cast<std::size_t>(ids[i]) * width;
                for (std::size_t j = 0; j < width; ++j) g[base + j] += node.grad[i * width + j];
            }
        });
}

template <typename Real>
Tensor<Real> pick(const Tensor<Real>& x, const std::vector<int>& ids) {
    if (x.rank() != 2) {
        throw DimensionError("pick: input must be rank 2, got " + shape_str(x.shape()));
    }
    if (ids.size() != x.dim(0)) {
        throw DimensionError("pick: need one id per row of " + shape_str(x.shape()));
    }
    const std::size_t cols = x.dim(1);
    std::vector<Real> out(ids.size());
    const auto& d = x.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const int id = ids[i];
        if (id < 0 || static_cast<std::size_t>(id) >= cols) {
            throw IndexError("pick: column " + std::to_string(id) + " out of range for " +
                             shape_str(x.shape()));
        }
        out[i] = d[i * cols + id];
    }
    return detail::make_op<Real>("pick", Shape{ids.size()}, std::move(out), {x},
                                 [x, ids, cols](detail::TensorNode<Real>& node) {
                                     auto& g = x.node()->grad;
                                     for (std::size_t i = 0; i < ids.size(); ++i)
                                         g[i * cols + ids[i]] += node.grad[i];
                                 });
}

template <typename Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps) {
    const Shape& s = x.shape();
    if (s.empty()) throw DimensionError("layer_norm: input must have rank >= 1");
    const std::size_t width = s.back();
    if (gain.shape() != Shape{width} || bias.shape() != Shape{width}) {
        throw DimensionError("layer_norm: gain/bias must be [" + std::to_string(width) +
                             "], got " + shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
    }
    const std::size_t rows = x.size() / width;
    std::vector<Real> out(x.size());
    std::vector<Real> xhat(x.size());
    std::vector<Real> inv_std(rows);
    const auto& d = x.data();
    const auto& gn = gain.data();
    const auto& bs = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* row = d.data() + r * width;
        Real m = 0;
        for (std::size_t j = 0; j < width; ++j) m += row[j];
        m /= static_cast<Real>(width);
        Real var = 0;
        for (std::size_t j = 0; j < width; ++j) {
            const Real c = row[j] - m;
            var += c * c;
        }
        var /= static_cast<Real>(width);
        const Real is = Real(1) / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < width; ++j) {
            const Real xh = (row[j] - m) * is;
            xhat[r * width + j] = xh;
            out[r * width + j] = gn[j] * xh + bs[j];
        }
    }
    return detail::make_op<Real>(
        "layer_norm", s, std::move(out), {x, gain, bias},
        [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
         width](detail::TensorNode<Real>& node) {
            const auto& gn = gain.data();
            const auto& dy = node.grad;
            for (std::size_t r = 0; r < rows; ++r) {
                const Real* xh = xhat.data() + r * width;
                const Real* dyr = dy.data() + r * width;
                if (x.requires_grad()) {
                    Real m1 = 0, m2 = 0;
                    for (std::size_t j = 0; j < width; ++j) {
                        const Real dyh = dyr[j] * gn[j];
                        m1 += dyh;
                        m2 += dyh * xh[j];
                    }
                    m1 /= static_cast<Real>(width);
                    m2 /= static_cast<Real>(width);
                    auto& gx = x.node()->grad;
                    for (std::size_t j = 0; j < width; ++j) {
                        const Real dyh = dyr[j] * gn[j];
                        gx[r * width + j] += inv_std[r] * (dyh - m1 - xh[j] * m2);
                    }
                }
                if (gain.requires_grad()) {
                    auto& gg = gain.node()->grad;
                    for (std::size_t j = 0; j < width; ++j) gg[j] += dyr[j] * xh[j];
                }
                if (bias.requires_grad()) {
                    auto& gb = bias.node()->grad;
                    for (std::size_t j = 0; j < width; ++j) gb[j] += dyr[j];
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

template <typename Real>
void backward(const Tensor<Real>& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward: loss must be a defined scalar tensor");
    }
    using Node = detail::TensorNode<Real>;
    auto root = loss.node();

    // Post-order DFS; each node enters the order exactly once.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        Node* node = stack.back().first;
        const std::size_t next = stack.back().second;
        if (next < node->parents.size()) {
            stack.back().second = next + 1;
            Node* parent = node->parents[next].get();
            if (visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) n->grad.assign(n->data.size(), Real(0));
    root->grad[0] = Real(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

template <typename Real>
GradMap<Real> backward(const Tensor<Real>& loss, const std::map<std::string, Tensor<Real>>& params) {
    backward(loss);
    GradMap<Real> grads;
    for (const auto& [name, p] : params) {
        if (p.has_grad()) {
            grads.emplace(name, Tensor<Real>(p.shape(), p.node()->grad));
        } else {
            grads.emplace(name, Tensor<Real>::zeros(p.shape()));
        }
    }
    return grads;
}

}  // namespace vinter

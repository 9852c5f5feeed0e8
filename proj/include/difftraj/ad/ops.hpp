#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "difftraj/ad/graph.hpp"

namespace difftraj::ad {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapRM = Eigen::Map<MatRM<T>>;
template <class T>
using CMapRM = Eigen::Map<const MatRM<T>>;

namespace detail {
template <class T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    Tensor<T>::shape_str(a.shape()) + " vs " +
                                    Tensor<T>::shape_str(b.shape()));
}
}  // namespace detail

// ---- elementwise -------------------------------------------------------------

template <class T>
Value<T> add(const Value<T>& a, const Value<T>& b) {
    detail::check_same_shape(a->val, b->val, "add");
    Tensor<T> out = a->val;
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] += b->val[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (int k = 0; k < 2; ++k) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

template <class T>
Value<T> sub(const Value<T>& a, const Value<T>& b) {
    detail::check_same_shape(a->val, b->val, "sub");
    Tensor<T> out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <class T>
Value<T> mul(const Value<T>& a, const Value<T>& b) {
    detail::check_same_shape(a->val, b->val, "mul");
    Tensor<T> out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
    return make_node<T>(std::move(out), {a, b}, [](Node<T>& self) {
        const auto& av = self.parents[0]->val;
        const auto& bv = self.parents[1]->val;
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

template <class T>
Value<T> scale(const Value<T>& a, T s) {
    Tensor<T> out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return make_node<T>(std::move(out), {a}, [s](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * s;
    });
}

/// Division by a scalar. Not the same as scale(a, 1/s): the quotient is
/// rounded once, which keeps ratios of exactly representable values exact.
template <class T>
Value<T> div_scalar(const Value<T>& a, T s) {
    Tensor<T> out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] /= s;
    return make_node<T>(std::move(out), {a}, [s](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] / s;
    });
}

template <class T>
Value<T> relu(const Value<T>& a) {
    Tensor<T> out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], T(0));
    return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        const auto& x = self.parents[0]->val;
        auto& g = self.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (x[i] > T(0)) g[i] += self.grad[i];
    });
}

template <class T>
Value<T> sigmoid(const Value<T>& a) {
    Tensor<T> out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = T(1) / (T(1) + std::exp(-out[i]));
    return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            const T y = self.val[i];
            g[i] += self.grad[i] * y * (T(1) - y);
        }
    });
}

template <class T>
Value<T> softplus(const Value<T>& a) {
    Tensor<T> out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        const T x = out[i];
        out[i] = x > T(20) ? x : std::log1p(std::exp(x));
    }
    return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        const auto& x = self.parents[0]->val;
        auto& g = self.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i)
            g[i] += self.grad[i] / (T(1) + std::exp(-x[i]));
    });
}

/// Hard bound into [0,1]. Subgradient 1 on the closed interval so a
/// zero-initialized preactivation still passes gradient.
template <class T>
Value<T> clamp01(const Value<T>& a) {
    Tensor<T> out = a->val;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::clamp(out[i], T(0), T(1));
    return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        const auto& x = self.parents[0]->val;
        auto& g = self.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i)
            if (x[i] >= T(0) && x[i] <= T(1)) g[i] += self.grad[i];
    });
}

// ---- shape -------------------------------------------------------------------

template <class T>
Value<T> reshape(const Value<T>& a, std::vector<int> shape) {
    Tensor<T> out = a->val.reshaped(std::move(shape));
    return make_node<T>(std::move(out), {a}, [](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

/// Concatenate along an axis. All inputs must agree on the other dims.
template <class T>
Value<T> concat(const std::vector<Value<T>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    const auto& s0 = xs[0]->val.shape();
    std::vector<int> out_shape = s0;
    int axis_total = 0;
    for (const auto& x : xs) {
        const auto& s = x->val.shape();
        if (static_cast<int>(s.size()) != static_cast<int>(s0.size()))
            throw std::invalid_argument("concat: rank mismatch");
        for (size_t d = 0; d < s.size(); ++d)
            if (static_cast<int>(d) != axis && s[d] != s0[d])
                throw std::invalid_argument("concat: shape mismatch off-axis");
        axis_total += s[static_cast<size_t>(axis)];
    }
    out_shape[static_cast<size_t>(axis)] = axis_total;

    // outer = product of dims before axis, inner = product after
    std::int64_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[static_cast<size_t>(d)];
    for (size_t d = static_cast<size_t>(axis) + 1; d < s0.size(); ++d) inner *= s0[d];

    Tensor<T> out(out_shape);
    std::int64_t off = 0;
    for (const auto& x : xs) {
        const std::int64_t ax = x->val.dim(axis);
        for (std::int64_t o = 0; o < outer; ++o) {
            const T* src = x->val.data() + o * ax * inner;
            T* dst = out.data() + (o * axis_total + off) * inner;
            std::copy(src, src + ax * inner, dst);
        }
        off += ax;
    }
    return make_node<T>(std::move(out), xs, [axis, outer, inner, axis_total](Node<T>& self) {
        std::int64_t off = 0;
        for (auto& p : self.parents) {
            const std::int64_t ax = p->val.dim(axis);
            if (p->requires_grad) {
                auto& g = p->ensure_grad();
                for (std::int64_t o = 0; o < outer; ++o) {
                    const T* src = self.grad.data() + (o * axis_total + off) * inner;
                    T* dst = g.data() + o * ax * inner;
                    for (std::int64_t i = 0; i < ax * inner; ++i) dst[i] += src[i];
                }
            }
            off += ax;
        }
    });
}

/// Permute axes (data is materialized).
template <class T>
Value<T> permute(const Value<T>& a, std::vector<int> axes) {
    const auto& s = a->val.shape();
    const int nd = static_cast<int>(s.size());
    std::vector<int> out_shape(nd);
    for (int i = 0; i < nd; ++i) out_shape[i] = s[static_cast<size_t>(axes[i])];

    std::vector<std::int64_t> in_strides(nd, 1), out_strides(nd, 1);
    for (int i = nd - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * s[i + 1];
    for (int i = nd - 2; i >= 0; --i) out_strides[i] = out_strides[i + 1] * out_shape[i + 1];

    Tensor<T> out(out_shape);
    const std::int64_t n = out.numel();
    std::vector<int> idx(nd, 0);
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t rest = lin, src = 0;
        for (int i = 0; i < nd; ++i) {
            const std::int64_t q = rest / out_strides[i];
            rest -= q * out_strides[i];
            src += q * in_strides[static_cast<size_t>(axes[i])];
        }
        out[lin] = a->val[src];
    }
    return make_node<T>(std::move(out), {a},
                        [axes, in_strides, out_strides, nd](Node<T>& self) {
                            if (!self.parents[0]->requires_grad) return;
                            auto& g = self.parents[0]->ensure_grad();
                            const std::int64_t n = self.grad.numel();
                            for (std::int64_t lin = 0; lin < n; ++lin) {
                                std::int64_t rest = lin, src = 0;
                                for (int i = 0; i < nd; ++i) {
                                    const std::int64_t q = rest / out_strides[i];
                                    rest -= q * out_strides[i];
                                    src += q * in_strides[static_cast<size_t>(axes[i])];
                                }
                                g[src] += self.grad[lin];
                            }
                        });
}

// ---- broadcast helpers used by FiLM ------------------------------------------

/// x:(N,C,H,W) * v:(N,C), broadcast over space.
template <class T>
Value<T> mul_nc(const Value<T>& x, const Value<T>& v) {
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (v->val.ndim() != 2 || v->val.dim(0) != N || v->val.dim(1) != C)
        throw std::invalid_argument("mul_nc: v must be (N,C)");
    Tensor<T> out = x->val;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T s = v->val.at2(n, c);
            T* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) p[i] *= s;
        }
    return make_node<T>(std::move(out), {x, v}, [N, C, hw](Node<T>& self) {
        const auto& xv = self.parents[0]->val;
        const auto& vv = self.parents[1]->val;
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const T s = vv.at2(n, c);
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i)
                        g[base + i] += self.grad[base + i] * s;
                }
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                    T acc = T(0);
                    for (std::int64_t i = 0; i < hw; ++i)
                        acc += self.grad[base + i] * xv[base + i];
                    g.at2(n, c) += acc;
                }
        }
    });
}

/// x:(N,C,H,W) + v:(N,C), broadcast over space.
template <class T>
Value<T> add_nc(const Value<T>& x, const Value<T>& v) {
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (v->val.ndim() != 2 || v->val.dim(0) != N || v->val.dim(1) != C)
        throw std::invalid_argument("add_nc: v must be (N,C)");
    Tensor<T> out = x->val;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T s = v->val.at2(n, c);
            T* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) p[i] += s;
        }
    return make_node<T>(std::move(out), {x, v}, [N, C, hw](Node<T>& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                    T acc = T(0);
                    for (std::int64_t i = 0; i < hw; ++i) acc += self.grad[base + i];
                    g.at2(n, c) += acc;
                }
        }
    });
}

/// x + v with v broadcast across the leading axis: x:(N, ...), v matching
/// one slice of x. Used for learned position offsets shared by all samples.
template <class T>
Value<T> add_rowvec(const Value<T>& x, const Value<T>& v) {
    const std::int64_t inner = v->val.numel();
    if (x->val.ndim() < 1 || inner == 0 || x->val.numel() % inner != 0 ||
        x->val.numel() / inner != x->val.dim(0))
        throw std::invalid_argument("add_rowvec: v must match one leading slice of x");
    const int N = x->val.dim(0);
    Tensor<T> out = x->val;
    for (int n = 0; n < N; ++n) {
        T* p = out.data() + static_cast<std::int64_t>(n) * inner;
        for (std::int64_t i = 0; i < inner; ++i) p[i] += v->val[i];
    }
    return make_node<T>(std::move(out), {x, v}, [N, inner](Node<T>& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const T* p = self.grad.data() + static_cast<std::int64_t>(n) * inner;
                for (std::int64_t i = 0; i < inner; ++i) g[i] += p[i];
            }
        }
    });
}

/// x:(N,C,H,W) * m:(N,1,H,W), broadcast over channels.
template <class T>
Value<T> mul_mask(const Value<T>& x, const Value<T>& m) {
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    if (m->val.ndim() != 4 || m->val.dim(0) != N || m->val.dim(1) != 1 || m->val.dim(2) != H ||
        m->val.dim(3) != W)
        throw std::invalid_argument("mul_mask: mask must be (N,1,H,W)");
    Tensor<T> out = x->val;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        const T* mm = m->val.data() + static_cast<std::int64_t>(n) * hw;
        for (int c = 0; c < C; ++c) {
            T* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) p[i] *= mm[i];
        }
    }
    return make_node<T>(std::move(out), {x, m}, [N, C, hw](Node<T>& self) {
        const auto& xv = self.parents[0]->val;
        const auto& mv = self.parents[1]->val;
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const T* mm = mv.data() + static_cast<std::int64_t>(n) * hw;
                for (int c = 0; c < C; ++c) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i)
                        g[base + i] += self.grad[base + i] * mm[i];
                }
            }
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (int n = 0; n < N; ++n) {
                T* gm = g.data() + static_cast<std::int64_t>(n) * hw;
                for (int c = 0; c < C; ++c) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i)
                        gm[i] += self.grad[base + i] * xv[base + i];
                }
            }
        }
    });
}

/// Outer product v:(N,C) x m:(N,1,H,W) -> (N,C,H,W).
template <class T>
Value<T> nc_times_mask(const Value<T>& v, const Value<T>& m) {
    const int N = v->val.dim(0), C = v->val.dim(1);
    const int H = m->val.dim(2), W = m->val.dim(3);
    if (m->val.dim(0) != N || m->val.dim(1) != 1)
        throw std::invalid_argument("nc_times_mask: mask must be (N,1,H,W)");
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor<T> out({N, C, H, W});
    for (int n = 0; n < N; ++n) {
        const T* mm = m->val.data() + static_cast<std::int64_t>(n) * hw;
        for (int c = 0; c < C; ++c) {
            const T s = v->val.at2(n, c);
            T* p = out.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) p[i] = s * mm[i];
        }
    }
    return make_node<T>(std::move(out), {v, m}, [N, C, hw](Node<T>& self) {
        const auto& vv = self.parents[0]->val;
        const auto& mv = self.parents[1]->val;
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const T* mm = mv.data() + static_cast<std::int64_t>(n) * hw;
                for (int c = 0; c < C; ++c) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                    T acc = T(0);
                    for (std::int64_t i = 0; i < hw; ++i) acc += self.grad[base + i] * mm[i];
                    g.at2(n, c) += acc;
                }
            }
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (int n = 0; n < N; ++n) {
                T* gm = g.data() + static_cast<std::int64_t>(n) * hw;
                for (int c = 0; c < C; ++c) {
                    const T s = vv.at2(n, c);
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) gm[i] += self.grad[base + i] * s;
                }
            }
        }
    });
}

/// Per-sample scalar multiply: x:(N,...) * s:(N).
template <class T>
Value<T> mul_per_sample(const Value<T>& x, const Value<T>& s) {
    const int N = x->val.dim(0);
    if (s->val.ndim() != 1 || s->val.dim(0) != N)
        throw std::invalid_argument("mul_per_sample: s must be (N)");
    const std::int64_t stride = x->val.numel() / N;
    Tensor<T> out = x->val;
    for (int n = 0; n < N; ++n) {
        T* p = out.data() + n * stride;
        const T f = s->val[n];
        for (std::int64_t i = 0; i < stride; ++i) p[i] *= f;
    }
    return make_node<T>(std::move(out), {x, s}, [N, stride](Node<T>& self) {
        const auto& xv = self.parents[0]->val;
        const auto& sv = self.parents[1]->val;
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const T f = sv[n];
                for (std::int64_t i = 0; i < stride; ++i)
                    g[n * stride + i] += self.grad[n * stride + i] * f;
            }
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (int n = 0; n < N; ++n) {
                T acc = T(0);
                for (std::int64_t i = 0; i < stride; ++i)
                    acc += self.grad[n * stride + i] * xv[n * stride + i];
                g[n] += acc;
            }
        }
    });
}

/// table:(R,C) lookup of one scalar per sample: out[n] = table[rows[n], cols[n]].
template <class T>
Value<T> table_lookup(const Value<T>& table, std::vector<int> rows, std::vector<int> cols) {
    const int N = static_cast<int>(rows.size());
    const int C = table->val.dim(1);
    Tensor<T> out({N});
    for (int n = 0; n < N; ++n) out[n] = table->val.at2(rows[n], cols[n]);
    return make_node<T>(std::move(out), {table},
                        [rows = std::move(rows), cols = std::move(cols), C](Node<T>& self) {
                            if (!self.parents[0]->requires_grad) return;
                            auto& g = self.parents[0]->ensure_grad();
                            for (size_t n = 0; n < rows.size(); ++n)
                                g[static_cast<std::int64_t>(rows[n]) * C + cols[n]] +=
                                    self.grad[static_cast<std::int64_t>(n)];
                        });
}

/// Row gather: out:(N,D) = table[idx[n], :].
template <class T>
Value<T> embedding(const Value<T>& table, std::vector<int> idx) {
    const int N = static_cast<int>(idx.size());
    const int D = table->val.dim(1);
    Tensor<T> out({N, D});
    for (int n = 0; n < N; ++n)
        std::copy(table->val.data() + static_cast<std::int64_t>(idx[n]) * D,
                  table->val.data() + static_cast<std::int64_t>(idx[n] + 1) * D,
                  out.data() + static_cast<std::int64_t>(n) * D);
    return make_node<T>(std::move(out), {table}, [idx = std::move(idx), D](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (size_t n = 0; n < idx.size(); ++n)
            for (int d = 0; d < D; ++d)
                g[static_cast<std::int64_t>(idx[n]) * D + d] +=
                    self.grad[static_cast<std::int64_t>(n) * D + d];
    });
}

/// Per-sample channel select: x:(N,C,H,W), idx[n] in [0,C) -> (N,1,H,W).
template <class T>
Value<T> select_channel(const Value<T>& x, std::vector<int> idx) {
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor<T> out({N, 1, H, W});
    for (int n = 0; n < N; ++n)
        std::copy(x->val.data() + (static_cast<std::int64_t>(n) * C + idx[n]) * hw,
                  x->val.data() + (static_cast<std::int64_t>(n) * C + idx[n] + 1) * hw,
                  out.data() + static_cast<std::int64_t>(n) * hw);
    return make_node<T>(std::move(out), {x}, [idx = std::move(idx), C, hw](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (size_t n = 0; n < idx.size(); ++n) {
            const std::int64_t dst = (static_cast<std::int64_t>(n) * C + idx[n]) * hw;
            const std::int64_t src = static_cast<std::int64_t>(n) * hw;
            for (std::int64_t i = 0; i < hw; ++i) g[dst + i] += self.grad[src + i];
        }
    });
}

// ---- dense linear algebra -----------------------------------------------------

/// x:(N,Din) * w:(Dout,Din)^T + b -> (N,Dout).
template <class T>
Value<T> linear(const Value<T>& x, const Value<T>& w, const Value<T>& b) {
    const int N = x->val.dim(0), Din = x->val.dim(1), Dout = w->val.dim(0);
    if (w->val.dim(1) != Din) throw std::invalid_argument("linear: weight/input mismatch");
    Tensor<T> out({N, Dout});
    CMapRM<T> X(x->val.data(), N, Din), W(w->val.data(), Dout, Din);
    MapRM<T> O(out.data(), N, Dout);
    O.noalias() = X * W.transpose();
    if (b) {
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < Dout; ++d) out.at2(n, d) += b->val[d];
    }
    std::vector<Value<T>> parents = b ? std::vector<Value<T>>{x, w, b} : std::vector<Value<T>>{x, w};
    return make_node<T>(std::move(out), std::move(parents), [N, Din, Dout](Node<T>& self) {
        CMapRM<T> G(self.grad.data(), N, Dout);
        const auto& xn = self.parents[0];
        const auto& wn = self.parents[1];
        if (xn->requires_grad) {
            auto& g = xn->ensure_grad();
            MapRM<T> GX(g.data(), N, Din);
            CMapRM<T> W(wn->val.data(), Dout, Din);
            GX.noalias() += G * W;
        }
        if (wn->requires_grad) {
            auto& g = wn->ensure_grad();
            MapRM<T> GW(g.data(), Dout, Din);
            CMapRM<T> X(xn->val.data(), N, Din);
            GW.noalias() += G.transpose() * X;
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            auto& g = self.parents[2]->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int d = 0; d < Dout; ++d) g[d] += self.grad.at2(n, d);
        }
    });
}

/// Batched matmul: a:(B,M,K) x b:(B,K,N) -> (B,M,N); transb swaps b to (B,N,K).
template <class T>
Value<T> bmm(const Value<T>& a, const Value<T>& b, bool transb = false) {
    const int B = a->val.dim(0), M = a->val.dim(1), K = a->val.dim(2);
    const int N = transb ? b->val.dim(1) : b->val.dim(2);
    if ((transb ? b->val.dim(2) : b->val.dim(1)) != K || b->val.dim(0) != B)
        throw std::invalid_argument("bmm: shape mismatch");
    Tensor<T> out({B, M, N});
    for (int i = 0; i < B; ++i) {
        CMapRM<T> A(a->val.data() + static_cast<std::int64_t>(i) * M * K, M, K);
        MapRM<T> O(out.data() + static_cast<std::int64_t>(i) * M * N, M, N);
        if (transb) {
            CMapRM<T> Bm(b->val.data() + static_cast<std::int64_t>(i) * N * K, N, K);
            O.noalias() = A * Bm.transpose();
        } else {
            CMapRM<T> Bm(b->val.data() + static_cast<std::int64_t>(i) * K * N, K, N);
            O.noalias() = A * Bm;
        }
    }
    return make_node<T>(std::move(out), {a, b}, [B, M, K, N, transb](Node<T>& self) {
        const auto& an = self.parents[0];
        const auto& bn = self.parents[1];
        for (int i = 0; i < B; ++i) {
            CMapRM<T> G(self.grad.data() + static_cast<std::int64_t>(i) * M * N, M, N);
            if (an->requires_grad) {
                MapRM<T> GA(an->ensure_grad().data() + static_cast<std::int64_t>(i) * M * K, M, K);
                if (transb) {
                    CMapRM<T> Bm(bn->val.data() + static_cast<std::int64_t>(i) * N * K, N, K);
                    GA.noalias() += G * Bm;
                } else {
                    CMapRM<T> Bm(bn->val.data() + static_cast<std::int64_t>(i) * K * N, K, N);
                    GA.noalias() += G * Bm.transpose();
                }
            }
            if (bn->requires_grad) {
                CMapRM<T> A(an->val.data() + static_cast<std::int64_t>(i) * M * K, M, K);
                if (transb) {
                    MapRM<T> GB(bn->ensure_grad().data() + static_cast<std::int64_t>(i) * N * K, N,
                                K);
                    GB.noalias() += G.transpose() * A;
                } else {
                    MapRM<T> GB(bn->ensure_grad().data() + static_cast<std::int64_t>(i) * K * N, K,
                                N);
                    GB.noalias() += A.transpose() * G;
                }
            }
        }
    });
}

// ---- convolution and pooling ---------------------------------------------------

namespace detail {
template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Hout,
            int Wout, T* col) {
    // col is (Hout*Wout, C*kh*kw) row-major
    const int patch = C * kh * kw;
    for (int oy = 0; oy < Hout; ++oy)
        for (int ox = 0; ox < Wout; ++ox) {
            T* row = col + (static_cast<std::int64_t>(oy) * Wout + ox) * patch;
            int k = 0;
            for (int c = 0; c < C; ++c)
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    for (int kx = 0; kx < kw; ++kx, ++k) {
                        const int ix = ox * stride - pad + kx;
                        row[k] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                     ? x[(static_cast<std::int64_t>(c) * H + iy) * W + ix]
                                     : T(0);
                    }
                }
        }
}

template <class T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, int Hout,
                int Wout, T* x) {
    const int patch = C * kh * kw;
    for (int oy = 0; oy < Hout; ++oy)
        for (int ox = 0; ox < Wout; ++ox) {
            const T* row = col + (static_cast<std::int64_t>(oy) * Wout + ox) * patch;
            int k = 0;
            for (int c = 0; c < C; ++c)
                for (int ky = 0; ky < kh; ++ky) {
                    const int iy = oy * stride - pad + ky;
                    for (int kx = 0; kx < kw; ++kx, ++k) {
                        const int ix = ox * stride - pad + kx;
                        if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                            x[(static_cast<std::int64_t>(c) * H + iy) * W + ix] += row[k];
                    }
                }
        }
}
}  // namespace detail

/// 2-d convolution, x:(N,Cin,H,W), w:(Cout,Cin,kh,kw), b:(Cout) optional.
template <class T>
Value<T> conv2d(const Value<T>& x, const Value<T>& w, const Value<T>& b, int stride, int pad) {
    const int N = x->val.dim(0), Cin = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    const int Cout = w->val.dim(0), kh = w->val.dim(2), kw = w->val.dim(3);
    if (w->val.dim(1) != Cin) throw std::invalid_argument("conv2d: channel mismatch");
    const int Hout = (H + 2 * pad - kh) / stride + 1;
    const int Wout = (W + 2 * pad - kw) / stride + 1;
    const int patch = Cin * kh * kw;
    const std::int64_t hw = static_cast<std::int64_t>(Hout) * Wout;

    Tensor<T> out({N, Cout, Hout, Wout});
    std::vector<T> col(static_cast<size_t>(hw) * patch);
    CMapRM<T> Wm(w->val.data(), Cout, patch);
    for (int n = 0; n < N; ++n) {
        detail::im2col(x->val.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W, kh,
                       kw, stride, pad, Hout, Wout, col.data());
        CMapRM<T> Cm(col.data(), hw, patch);
        MapRM<T> Om(out.data() + static_cast<std::int64_t>(n) * Cout * hw, Cout, hw);
        Om.noalias() = Wm * Cm.transpose();
        if (b) {
            for (int c = 0; c < Cout; ++c) {
                T* p = out.data() + (static_cast<std::int64_t>(n) * Cout + c) * hw;
                const T bias = b->val[c];
                for (std::int64_t i = 0; i < hw; ++i) p[i] += bias;
            }
        }
    }

    std::vector<Value<T>> parents = b ? std::vector<Value<T>>{x, w, b} : std::vector<Value<T>>{x, w};
    return make_node<T>(
        std::move(out), std::move(parents),
        [N, Cin, H, W, Cout, kh, kw, stride, pad, Hout, Wout, patch, hw](Node<T>& self) {
            const auto& xn = self.parents[0];
            const auto& wn = self.parents[1];
            std::vector<T> col(static_cast<size_t>(hw) * patch);
            std::vector<T> dcol;
            CMapRM<T> Wm(wn->val.data(), Cout, patch);
            for (int n = 0; n < N; ++n) {
                CMapRM<T> G(self.grad.data() + static_cast<std::int64_t>(n) * Cout * hw, Cout, hw);
                if (wn->requires_grad) {
                    detail::im2col(xn->val.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin,
                                   H, W, kh, kw, stride, pad, Hout, Wout, col.data());
                    CMapRM<T> Cm(col.data(), hw, patch);
                    MapRM<T> GW(wn->ensure_grad().data(), Cout, patch);
                    GW.noalias() += G * Cm;
                }
                if (xn->requires_grad) {
                    dcol.assign(static_cast<size_t>(hw) * patch, T(0));
                    MapRM<T> DC(dcol.data(), hw, patch);
                    DC.noalias() = G.transpose() * Wm;
                    detail::col2im_add(dcol.data(), Cin, H, W, kh, kw, stride, pad, Hout, Wout,
                                       xn->ensure_grad().data() +
                                           static_cast<std::int64_t>(n) * Cin * H * W);
                }
            }
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                auto& g = self.parents[2]->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < Cout; ++c) {
                        const T* p = self.grad.data() + (static_cast<std::int64_t>(n) * Cout + c) * hw;
                        T acc = T(0);
                        for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
                        g[c] += acc;
                    }
            }
        });
}

/// 2x2 average pool, stride 2.
template <class T>
Value<T> avg_pool2(const Value<T>& x) {
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    const int Ho = H / 2, Wo = W / 2;
    Tensor<T> out({N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < Ho; ++y)
                for (int xx = 0; xx < Wo; ++xx)
                    out.at4(n, c, y, xx) =
                        (x->val.at4(n, c, 2 * y, 2 * xx) + x->val.at4(n, c, 2 * y, 2 * xx + 1) +
                         x->val.at4(n, c, 2 * y + 1, 2 * xx) +
                         x->val.at4(n, c, 2 * y + 1, 2 * xx + 1)) *
                        T(0.25);
    return make_node<T>(std::move(out), {x}, [N, C, Ho, Wo](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < Ho; ++y)
                    for (int xx = 0; xx < Wo; ++xx) {
                        const T v = self.grad.at4(n, c, y, xx) * T(0.25);
                        g.at4(n, c, 2 * y, 2 * xx) += v;
                        g.at4(n, c, 2 * y, 2 * xx + 1) += v;
                        g.at4(n, c, 2 * y + 1, 2 * xx) += v;
                        g.at4(n, c, 2 * y + 1, 2 * xx + 1) += v;
                    }
    });
}

/// Spatial mean: (N,C,H,W) -> (N,C).
template <class T>
Value<T> global_avg_pool(const Value<T>& x) {
    const int N = x->val.dim(0), C = x->val.dim(1);
    const std::int64_t hw = static_cast<std::int64_t>(x->val.dim(2)) * x->val.dim(3);
    Tensor<T> out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = x->val.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            T acc = T(0);
            for (std::int64_t i = 0; i < hw; ++i) acc += p[i];
            out.at2(n, c) = acc / static_cast<T>(hw);
        }
    return make_node<T>(std::move(out), {x}, [N, C, hw](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        const T inv = T(1) / static_cast<T>(hw);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const T v = self.grad.at2(n, c) * inv;
                T* p = g.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) p[i] += v;
            }
    });
}

/// Nearest-neighbour 2x upsample.
template <class T>
Value<T> upsample_nearest2(const Value<T>& x) {
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    Tensor<T> out({N, C, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    const T v = x->val.at4(n, c, y, xx);
                    out.at4(n, c, 2 * y, 2 * xx) = v;
                    out.at4(n, c, 2 * y, 2 * xx + 1) = v;
                    out.at4(n, c, 2 * y + 1, 2 * xx) = v;
                    out.at4(n, c, 2 * y + 1, 2 * xx + 1) = v;
                }
    return make_node<T>(std::move(out), {x}, [N, C, H, W](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx)
                        g.at4(n, c, y, xx) += self.grad.at4(n, c, 2 * y, 2 * xx) +
                                              self.grad.at4(n, c, 2 * y, 2 * xx + 1) +
                                              self.grad.at4(n, c, 2 * y + 1, 2 * xx) +
                                              self.grad.at4(n, c, 2 * y + 1, 2 * xx + 1);
    });
}

/// Bilinear resize to (Ho,Wo), align-corners mapping.
template <class T>
Value<T> upsample_bilinear(const Value<T>& x, int Ho, int Wo) {
    const int N = x->val.dim(0), C = x->val.dim(1), H = x->val.dim(2), W = x->val.dim(3);
    struct Tap {
        int i0, i1;
        T w0, w1;
    };
    auto taps = [](int out_n, int in_n) {
        std::vector<Tap> t(static_cast<size_t>(out_n));
        for (int o = 0; o < out_n; ++o) {
            const double s = out_n == 1 ? 0.0
                                        : static_cast<double>(o) * (in_n - 1) / (out_n - 1);
            const int i0 = std::min(static_cast<int>(s), in_n - 1);
            const int i1 = std::min(i0 + 1, in_n - 1);
            const T f = static_cast<T>(s - i0);
            t[static_cast<size_t>(o)] = {i0, i1, T(1) - f, f};
        }
        return t;
    };
    const auto ty = taps(Ho, H), tx = taps(Wo, W);
    Tensor<T> out({N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < Ho; ++y)
                for (int xx = 0; xx < Wo; ++xx) {
                    const auto& a = ty[static_cast<size_t>(y)];
                    const auto& b = tx[static_cast<size_t>(xx)];
                    out.at4(n, c, y, xx) = a.w0 * (b.w0 * x->val.at4(n, c, a.i0, b.i0) +
                                                   b.w1 * x->val.at4(n, c, a.i0, b.i1)) +
                                           a.w1 * (b.w0 * x->val.at4(n, c, a.i1, b.i0) +
                                                   b.w1 * x->val.at4(n, c, a.i1, b.i1));
                }
    return make_node<T>(std::move(out), {x}, [N, C, Ho, Wo, ty, tx](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < Ho; ++y)
                    for (int xx = 0; xx < Wo; ++xx) {
                        const auto& a = ty[static_cast<size_t>(y)];
                        const auto& b = tx[static_cast<size_t>(xx)];
                        const T v = self.grad.at4(n, c, y, xx);
                        g.at4(n, c, a.i0, b.i0) += v * a.w0 * b.w0;
                        g.at4(n, c, a.i0, b.i1) += v * a.w0 * b.w1;
                        g.at4(n, c, a.i1, b.i0) += v * a.w1 * b.w0;
                        g.at4(n, c, a.i1, b.i1) += v * a.w1 * b.w1;
                    }
    });
}

/// Sample features at fractional pixel coordinates (row, col), one point set
/// per sample. pts:(N,K,2) in pixel units, clamped to the grid. -> (N,K,C).
template <class T>
Value<T> bilinear_sample(const Value<T>& feat, const Tensor<T>& pts) {
    const int N = feat->val.dim(0), C = feat->val.dim(1), H = feat->val.dim(2),
              W = feat->val.dim(3);
    const int K = pts.dim(1);
    struct Tap {
        int y0, y1, x0, x1;
        T wy, wx;
    };
    std::vector<Tap> taps(static_cast<size_t>(N) * K);
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
            T row = std::clamp(pts.at3(n, k, 0), T(0), T(H - 1));
            T col = std::clamp(pts.at3(n, k, 1), T(0), T(W - 1));
            const int y0 = std::min(static_cast<int>(row), H - 1);
            const int x0 = std::min(static_cast<int>(col), W - 1);
            taps[static_cast<size_t>(n) * K + k] = {y0, std::min(y0 + 1, H - 1), x0,
                                                    std::min(x0 + 1, W - 1), row - y0, col - x0};
        }
    Tensor<T> out({N, K, C});
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
            const auto& t = taps[static_cast<size_t>(n) * K + k];
            for (int c = 0; c < C; ++c) {
                const T v00 = feat->val.at4(n, c, t.y0, t.x0), v01 = feat->val.at4(n, c, t.y0, t.x1);
                const T v10 = feat->val.at4(n, c, t.y1, t.x0), v11 = feat->val.at4(n, c, t.y1, t.x1);
                out.at3(n, k, c) = (T(1) - t.wy) * ((T(1) - t.wx) * v00 + t.wx * v01) +
                                   t.wy * ((T(1) - t.wx) * v10 + t.wx * v11);
            }
        }
    return make_node<T>(std::move(out), {feat}, [taps = std::move(taps), N, C, K](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int k = 0; k < K; ++k) {
                const auto& t = taps[static_cast<size_t>(n) * K + k];
                for (int c = 0; c < C; ++c) {
                    const T v = self.grad.at3(n, k, c);
                    g.at4(n, c, t.y0, t.x0) += v * (T(1) - t.wy) * (T(1) - t.wx);
                    g.at4(n, c, t.y0, t.x1) += v * (T(1) - t.wy) * t.wx;
                    g.at4(n, c, t.y1, t.x0) += v * t.wy * (T(1) - t.wx);
                    g.at4(n, c, t.y1, t.x1) += v * t.wy * t.wx;
                }
            }
    });
}

// ---- normalization and attention ----------------------------------------------

/// LayerNorm over the last axis with learned gain/bias of that width.
template <class T>
Value<T> layer_norm(const Value<T>& x, const Value<T>& gain, const Value<T>& bias,
                    T eps = T(1e-5)) {
    const int D = x->val.dim(x->val.ndim() - 1);
    const std::int64_t rows = x->val.numel() / D;
    Tensor<T> out(x->val.shape());
    Tensor<T> mean({static_cast<int>(rows)}), istd({static_cast<int>(rows)});
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* p = x->val.data() + r * D;
        T m = T(0);
        for (int d = 0; d < D; ++d) m += p[d];
        m /= D;
        T v = T(0);
        for (int d = 0; d < D; ++d) v += (p[d] - m) * (p[d] - m);
        v /= D;
        const T is = T(1) / std::sqrt(v + eps);
        mean[r] = m;
        istd[r] = is;
        T* q = out.data() + r * D;
        for (int d = 0; d < D; ++d) q[d] = (p[d] - m) * is * gain->val[d] + bias->val[d];
    }
    return make_node<T>(std::move(out), {x, gain, bias},
                        [mean = std::move(mean), istd = std::move(istd), D, rows](Node<T>& self) {
                            const auto& xn = self.parents[0];
                            const auto& gn = self.parents[1];
                            const auto& bn = self.parents[2];
                            for (std::int64_t r = 0; r < rows; ++r) {
                                const T* p = xn->val.data() + r * D;
                                const T* go = self.grad.data() + r * D;
                                const T m = mean[r], is = istd[r];
                                if (gn->requires_grad || bn->requires_grad) {
                                    for (int d = 0; d < D; ++d) {
                                        const T xhat = (p[d] - m) * is;
                                        if (gn->requires_grad) gn->ensure_grad()[d] += go[d] * xhat;
                                        if (bn->requires_grad) bn->ensure_grad()[d] += go[d];
                                    }
                                }
                                if (xn->requires_grad) {
                                    // dxhat = go * gain; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                                    T s1 = T(0), s2 = T(0);
                                    for (int d = 0; d < D; ++d) {
                                        const T dxh = go[d] * gn->val[d];
                                        const T xhat = (p[d] - m) * is;
                                        s1 += dxh;
                                        s2 += dxh * xhat;
                                    }
                                    s1 /= D;
                                    s2 /= D;
                                    T* gx = xn->ensure_grad().data() + r * D;
                                    for (int d = 0; d < D; ++d) {
                                        const T dxh = go[d] * gn->val[d];
                                        const T xhat = (p[d] - m) * is;
                                        gx[d] += is * (dxh - s1 - xhat * s2);
                                    }
                                }
                            }
                        });
}

/// Softmax over the last axis.
template <class T>
Value<T> softmax_lastdim(const Value<T>& x) {
    const int D = x->val.dim(x->val.ndim() - 1);
    const std::int64_t rows = x->val.numel() / D;
    Tensor<T> out(x->val.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* p = x->val.data() + r * D;
        T* q = out.data() + r * D;
        T mx = p[0];
        for (int d = 1; d < D; ++d) mx = std::max(mx, p[d]);
        T sum = T(0);
        for (int d = 0; d < D; ++d) {
            q[d] = std::exp(p[d] - mx);
            sum += q[d];
        }
        const T inv = T(1) / sum;
        for (int d = 0; d < D; ++d) q[d] *= inv;
    }
    return make_node<T>(std::move(out), {x}, [D, rows](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* s = self.val.data() + r * D;
            const T* go = self.grad.data() + r * D;
            T dot = T(0);
            for (int d = 0; d < D; ++d) dot += go[d] * s[d];
            T* gx = g.data() + r * D;
            for (int d = 0; d < D; ++d) gx[d] += s[d] * (go[d] - dot);
        }
    });
}

// ---- reductions / losses -------------------------------------------------------

template <class T>
Value<T> mean_all(const Value<T>& x) {
    const std::int64_t n = x->val.numel();
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) acc += x->val[i];
    Tensor<T> out({}, acc / static_cast<T>(n));
    return make_node<T>(std::move(out), {x}, [n](Node<T>& self) {
        if (!self.parents[0]->requires_grad) return;
        auto& g = self.parents[0]->ensure_grad();
        const T v = self.grad[0] / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i) g[i] += v;
    });
}

/// Mean squared error against a target value (gradients flow into both sides).
template <class T>
Value<T> mse_mean(const Value<T>& a, const Value<T>& b) {
    detail::check_same_shape(a->val, b->val, "mse_mean");
    const std::int64_t n = a->val.numel();
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        const T d = a->val[i] - b->val[i];
        acc += d * d;
    }
    Tensor<T> out({}, acc / static_cast<T>(n));
    return make_node<T>(std::move(out), {a, b}, [n](Node<T>& self) {
        const auto& av = self.parents[0]->val;
        const auto& bv = self.parents[1]->val;
        const T s = self.grad[0] * T(2) / static_cast<T>(n);
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) g[i] += s * (av[i] - bv[i]);
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) g[i] -= s * (av[i] - bv[i]);
        }
    });
}

/// Mean absolute error; subgradient 0 at exact equality.
template <class T>
Value<T> l1_mean(const Value<T>& a, const Value<T>& b) {
    detail::check_same_shape(a->val, b->val, "l1_mean");
    const std::int64_t n = a->val.numel();
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) acc += std::abs(a->val[i] - b->val[i]);
    Tensor<T> out({}, acc / static_cast<T>(n));
    return make_node<T>(std::move(out), {a, b}, [n](Node<T>& self) {
        const auto& av = self.parents[0]->val;
        const auto& bv = self.parents[1]->val;
        const T s = self.grad[0] / static_cast<T>(n);
        for (std::int64_t i = 0; i < n; ++i) {
            const T d = av[i] - bv[i];
            const T sg = d > T(0) ? s : (d < T(0) ? -s : T(0));
            if (self.parents[0]->requires_grad) self.parents[0]->ensure_grad()[i] += sg;
            if (self.parents[1]->requires_grad) self.parents[1]->ensure_grad()[i] -= sg;
        }
    });
}

/// Mean binary cross-entropy. Predictions are clamped to [eps, 1-eps];
/// targets must lie in [0,1].
template <class T>
Value<T> bce_mean(const Value<T>& pred, const Value<T>& target, T eps = T(1e-7)) {
    detail::check_same_shape(pred->val, target->val, "bce_mean");
    const std::int64_t n = pred->val.numel();
    T acc = T(0);
    for (std::int64_t i = 0; i < n; ++i) {
        const T t = target->val[i];
        if (t < T(0) || t > T(1)) throw std::domain_error("bce_mean: target outside [0,1]");
        const T p = std::clamp(pred->val[i], eps, T(1) - eps);
        acc -= t * std::log(p) + (T(1) - t) * std::log(T(1) - p);
    }
    Tensor<T> out({}, acc / static_cast<T>(n));
    return make_node<T>(std::move(out), {pred, target}, [n, eps](Node<T>& self) {
        const auto& pv = self.parents[0]->val;
        const auto& tv = self.parents[1]->val;
        const T s = self.grad[0] / static_cast<T>(n);
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                if (pv[i] <= eps || pv[i] >= T(1) - eps) continue;  // clamp region is flat
                g[i] += s * (pv[i] - tv[i]) / (pv[i] * (T(1) - pv[i]));
            }
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const T p = std::clamp(pv[i], eps, T(1) - eps);
                g[i] += s * std::log((T(1) - p) / p);
            }
        }
    });
}

}  // namespace difftraj::ad

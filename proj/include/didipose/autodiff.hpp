#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "didipose/tensor.hpp"

namespace didipose {

// Reverse-mode tape over dense tensors.
//
// Usage per training step: create a tape, lift parameters/inputs with leaf()
// or constant(), compose ops, call backward() on the scalar loss, read
// gradients with grad(). Tapes are single-threaded and short-lived.
//
// Reductions are computed sequentially over the trailing axis, so forward
// values are bitwise reproducible for a given build.
template <typename T>
class TapeT;

template <typename T>
struct VarT {
    TensorT<T> v;
    int node = -1;
    bool tracked() const { return node >= 0; }
};

using Var = VarT<double>;

namespace detail {

template <typename T>
using EigenMat =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using EigenMatMut =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
EigenMat<T> emap(const TensorT<T>& t, std::int64_t r, std::int64_t c) {
    return EigenMat<T>(t.data(), r, c);
}
template <typename T>
EigenMatMut<T> emap_mut(TensorT<T>& t, std::int64_t r, std::int64_t c) {
    return EigenMatMut<T>(t.mut(), r, c);
}

inline void op_check(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

// Collapses a shape to (outer, len, inner) around `axis` for strided
// softmax-style ops.
struct AxisView {
    std::int64_t outer = 1, len = 1, inner = 1;
};

inline AxisView axis_view(const Shape& s, int axis) {
    op_check(axis >= 0 && static_cast<std::size_t>(axis) < s.size(),
             "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    AxisView v;
    for (int i = 0; i < axis; ++i) v.outer *= s[static_cast<std::size_t>(i)];
    v.len = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) v.inner *= s[i];
    return v;
}

}  // namespace detail

template <typename T>
class TapeT {
public:
    using Tensor = TensorT<T>;
    using Var = VarT<T>;

    TapeT() = default;
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    Var leaf(Tensor t) {
        const int id = push([](TapeT&, const Tensor&) {});
        return Var{std::move(t), id};
    }

    Var constant(Tensor t) { return Var{std::move(t), -1}; }

    std::size_t node_count() const { return nodes_.size(); }

    // ---- elementwise ----

    Var add(const Var& a, const Var& b) {
        detail::op_check(a.v.same_shape(b.v),
                         "add: shape mismatch " + shape_str(a.v.shape()) + " vs " + shape_str(b.v.shape()));
        Tensor out(a.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = a.v[i] + b.v[i];
        return record({a.node, b.node}, std::move(out), [na = a.node, nb = b.node](TapeT& tp, const Tensor& g) {
            tp.accum(na, g, T(1));
            tp.accum(nb, g, T(1));
        });
    }

    Var sub(const Var& a, const Var& b) {
        detail::op_check(a.v.same_shape(b.v),
                         "sub: shape mismatch " + shape_str(a.v.shape()) + " vs " + shape_str(b.v.shape()));
        Tensor out(a.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = a.v[i] - b.v[i];
        return record({a.node, b.node}, std::move(out), [na = a.node, nb = b.node](TapeT& tp, const Tensor& g) {
            tp.accum(na, g, T(1));
            tp.accum(nb, g, T(-1));
        });
    }

    Var mul(const Var& a, const Var& b) {
        detail::op_check(a.v.same_shape(b.v),
                         "mul: shape mismatch " + shape_str(a.v.shape()) + " vs " + shape_str(b.v.shape()));
        Tensor out(a.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = a.v[i] * b.v[i];
        return record({a.node, b.node},
                      std::move(out), [na = a.node, nb = b.node, av = a.v, bv = b.v](TapeT& tp, const Tensor& g) {
                          if (na >= 0) {
                              Tensor ga(g.shape());
                              for (std::int64_t i = 0; i < g.size(); ++i) ga.mut()[i] = g[i] * bv[i];
                              tp.accum(na, ga, T(1));
                          }
                          if (nb >= 0) {
                              Tensor gb(g.shape());
                              for (std::int64_t i = 0; i < g.size(); ++i) gb.mut()[i] = g[i] * av[i];
                              tp.accum(nb, gb, T(1));
                          }
                      });
    }

    Var scale(const Var& a, T c) {
        Tensor out(a.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = a.v[i] * c;
        return record({a.node}, std::move(out),
                      [na = a.node, c](TapeT& tp, const Tensor& g) { tp.accum(na, g, c); });
    }

    Var add_scalar(const Var& a, T c) {
        Tensor out(a.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = a.v[i] + c;
        return record({a.node}, std::move(out),
                      [na = a.node](TapeT& tp, const Tensor& g) { tp.accum(na, g, T(1)); });
    }

    Var neg(const Var& a) { return scale(a, T(-1)); }

    Var tanh_op(const Var& a) {
        Tensor out(a.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = std::tanh(a.v[i]);
        return record({a.node}, out, [na = a.node, y = out](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx(g.shape());
            for (std::int64_t i = 0; i < g.size(); ++i) gx.mut()[i] = g[i] * (T(1) - y[i] * y[i]);
            tp.accum(na, gx, T(1));
        });
    }

    Var exp_op(const Var& a) {
        Tensor out(a.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = std::exp(a.v[i]);
        return record({a.node}, out, [na = a.node, y = out](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx(g.shape());
            for (std::int64_t i = 0; i < g.size(); ++i) gx.mut()[i] = g[i] * y[i];
            tp.accum(na, gx, T(1));
        });
    }

    Var log_op(const Var& a) {
        Tensor out(a.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = std::log(a.v[i]);
        return record({a.node}, std::move(out), [na = a.node, x = a.v](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx(g.shape());
            for (std::int64_t i = 0; i < g.size(); ++i) gx.mut()[i] = g[i] / x[i];
            tp.accum(na, gx, T(1));
        });
    }

    // Custom value-wise op; df receives (x_i, y_i). Extension point, also used
    // by the corrupted-backward negative control in tests.
    Var map_unary(const Var& a, const std::function<T(T)>& f, const std::function<T(T, T)>& df) {
        Tensor out(a.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = f(a.v[i]);
        return record({a.node}, out, [na = a.node, x = a.v, y = out, df](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx(g.shape());
            for (std::int64_t i = 0; i < g.size(); ++i) gx.mut()[i] = g[i] * df(x[i], y[i]);
            tp.accum(na, gx, T(1));
        });
    }

    // Round with a straight-through backward (round treated as identity).
    Var ste_round(const Var& a) {
        Tensor out(a.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = std::round(a.v[i]);
        return record({a.node}, std::move(out),
                      [na = a.node](TapeT& tp, const Tensor& g) { tp.accum(na, g, T(1)); });
    }

    // ---- linear algebra ----

    Var matmul(const Var& a, const Var& b) {
        detail::op_check(a.v.rank() == 2 && b.v.rank() == 2 && a.v.dim(1) == b.v.dim(0),
                         "matmul: incompatible " + shape_str(a.v.shape()) + " @ " + shape_str(b.v.shape()));
        const std::int64_t m = a.v.dim(0), k = a.v.dim(1), n = b.v.dim(1);
        Tensor out({m, n});
        detail::emap_mut(out, m, n).noalias() = detail::emap(a.v, m, k) * detail::emap(b.v, k, n);
        return record({a.node, b.node},
                      std::move(out), [na = a.node, nb = b.node, av = a.v, bv = b.v, m, k, n](TapeT& tp, const Tensor& g) {
                          if (na >= 0) {
                              Tensor ga({m, k});
                              detail::emap_mut(ga, m, k).noalias() =
                                  detail::emap(g, m, n) * detail::emap(bv, k, n).transpose();
                              tp.accum(na, ga, T(1));
                          }
                          if (nb >= 0) {
                              Tensor gb({k, n});
                              detail::emap_mut(gb, k, n).noalias() =
                                  detail::emap(av, m, k).transpose() * detail::emap(g, m, n);
                              tp.accum(nb, gb, T(1));
                          }
                      });
    }

    // y = x @ w + b, b broadcast over rows.
    Var linear(const Var& x, const Var& w, const Var& b) {
        detail::op_check(x.v.rank() == 2 && w.v.rank() == 2 && x.v.dim(1) == w.v.dim(0),
                         "linear: incompatible input " + shape_str(x.v.shape()) + " and weight " +
                             shape_str(w.v.shape()));
        detail::op_check(b.v.rank() == 1 && b.v.dim(0) == w.v.dim(1),
                         "linear: bias " + shape_str(b.v.shape()) + " does not match weight " +
                             shape_str(w.v.shape()));
        const std::int64_t n = x.v.dim(0), k = x.v.dim(1), m = w.v.dim(1);
        Tensor out({n, m});
        detail::emap_mut(out, n, m).noalias() = detail::emap(x.v, n, k) * detail::emap(w.v, k, m);
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < m; ++c) out.at(r, c) += b.v[c];
        return record(
            {x.node, w.node, b.node}, std::move(out),
            [nx = x.node, nw = w.node, nb = b.node, xv = x.v, wv = w.v, n, k, m](TapeT& tp, const Tensor& g) {
                if (nx >= 0) {
                    Tensor gx({n, k});
                    detail::emap_mut(gx, n, k).noalias() =
                        detail::emap(g, n, m) * detail::emap(wv, k, m).transpose();
                    tp.accum(nx, gx, T(1));
                }
                if (nw >= 0) {
                    Tensor gw({k, m});
                    detail::emap_mut(gw, k, m).noalias() =
                        detail::emap(xv, n, k).transpose() * detail::emap(g, n, m);
                    tp.accum(nw, gw, T(1));
                }
                if (nb >= 0) {
                    Tensor gb({m});
                    for (std::int64_t r = 0; r < n; ++r)
                        for (std::int64_t c = 0; c < m; ++c) gb.mut()[c] += g.at(r, c);
                    tp.accum(nb, gb, T(1));
                }
            });
    }

    Var transpose(const Var& a) {
        detail::op_check(a.v.rank() == 2, "transpose: expects rank-2, got " + shape_str(a.v.shape()));
        const std::int64_t n = a.v.dim(0), m = a.v.dim(1);
        Tensor out({m, n});
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < m; ++c) out.at(c, r) = a.v.at(r, c);
        return record({a.node}, std::move(out), [na = a.node, n, m](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx({n, m});
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t c = 0; c < m; ++c) gx.at(r, c) = g.at(c, r);
            tp.accum(na, gx, T(1));
        });
    }

    Var reshape(const Var& a, Shape s) {
        Tensor out = a.v.reshaped(std::move(s));
        return record({a.node}, std::move(out), [na = a.node, orig = a.v.shape()](TapeT& tp, const Tensor& g) {
            tp.accum(na, g.reshaped(orig), T(1));
        });
    }

    // ---- normalization / attention pieces ----

    Var layer_norm(const Var& x, const Var& gain, const Var& bias, T eps = T(1e-5)) {
        detail::op_check(x.v.rank() == 2, "layer_norm: expects rank-2 input, got " + shape_str(x.v.shape()));
        const std::int64_t n = x.v.dim(0), d = x.v.dim(1);
        detail::op_check(gain.v.rank() == 1 && gain.v.dim(0) == d && bias.v.rank() == 1 && bias.v.dim(0) == d,
                         "layer_norm: gain/bias must be [" + std::to_string(d) + "]");
        Tensor out({n, d});
        Tensor xhat({n, d});
        Tensor inv({n});
        for (std::int64_t r = 0; r < n; ++r) {
            T mu = 0;
            for (std::int64_t c = 0; c < d; ++c) mu += x.v.at(r, c);
            mu /= static_cast<T>(d);
            T var = 0;
            for (std::int64_t c = 0; c < d; ++c) {
                const T t = x.v.at(r, c) - mu;
                var += t * t;
            }
            var /= static_cast<T>(d);
            const T iv = T(1) / std::sqrt(var + eps);
            inv.mut()[r] = iv;
            for (std::int64_t c = 0; c < d; ++c) {
                const T xh = (x.v.at(r, c) - mu) * iv;
                xhat.at(r, c) = xh;
                out.at(r, c) = gain.v[c] * xh + bias.v[c];
            }
        }
        return record({x.node, gain.node, bias.node}, std::move(out),
                      [nx = x.node, ng = gain.node, nb = bias.node, gv = gain.v, xhat, inv, n,
                       d](TapeT& tp, const Tensor& g) {
                          if (ng >= 0) {
                              Tensor gg({d});
                              for (std::int64_t r = 0; r < n; ++r)
                                  for (std::int64_t c = 0; c < d; ++c) gg.mut()[c] += g.at(r, c) * xhat.at(r, c);
                              tp.accum(ng, gg, T(1));
                          }
                          if (nb >= 0) {
                              Tensor gb({d});
                              for (std::int64_t r = 0; r < n; ++r)
                                  for (std::int64_t c = 0; c < d; ++c) gb.mut()[c] += g.at(r, c);
                              tp.accum(nb, gb, T(1));
                          }
                          if (nx >= 0) {
                              Tensor gx({n, d});
                              for (std::int64_t r = 0; r < n; ++r) {
                                  T m1 = 0, m2 = 0;
                                  for (std::int64_t c = 0; c < d; ++c) {
                                      const T dxh = g.at(r, c) * gv[c];
                                      m1 += dxh;
                                      m2 += dxh * xhat.at(r, c);
                                  }
                                  m1 /= static_cast<T>(d);
                                  m2 /= static_cast<T>(d);
                                  for (std::int64_t c = 0; c < d; ++c) {
                                      const T dxh = g.at(r, c) * gv[c];
                                      gx.at(r, c) = inv[r] * (dxh - m1 - xhat.at(r, c) * m2);
                                  }
                              }
                              tp.accum(nx, gx, T(1));
                          }
                      });
    }

    Var softmax(const Var& x, int axis) {
        const auto av = detail::axis_view(x.v.shape(), axis);
        Tensor out(x.v.shape());
        softmax_fill(x.v, out, av);
        return record({x.node}, out, [na = x.node, y = out, av](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx(g.shape());
            for (std::int64_t o = 0; o < av.outer; ++o)
                for (std::int64_t in = 0; in < av.inner; ++in) {
                    const std::int64_t base = o * av.len * av.inner + in;
                    T dot = 0;
                    for (std::int64_t l = 0; l < av.len; ++l) {
                        const std::int64_t i = base + l * av.inner;
                        dot += g[i] * y[i];
                    }
                    for (std::int64_t l = 0; l < av.len; ++l) {
                        const std::int64_t i = base + l * av.inner;
                        gx.mut()[i] = y[i] * (g[i] - dot);
                    }
                }
            tp.accum(na, gx, T(1));
        });
    }

    Var log_softmax(const Var& x, int axis) {
        const auto av = detail::axis_view(x.v.shape(), axis);
        Tensor out(x.v.shape());
        for (std::int64_t o = 0; o < av.outer; ++o)
            for (std::int64_t in = 0; in < av.inner; ++in) {
                const std::int64_t base = o * av.len * av.inner + in;
                T mx = x.v[base];
                for (std::int64_t l = 1; l < av.len; ++l) mx = std::max(mx, x.v[base + l * av.inner]);
                T se = 0;
                for (std::int64_t l = 0; l < av.len; ++l) se += std::exp(x.v[base + l * av.inner] - mx);
                const T lse = mx + std::log(se);
                for (std::int64_t l = 0; l < av.len; ++l) {
                    const std::int64_t i = base + l * av.inner;
                    out.mut()[i] = x.v[i] - lse;
                }
            }
        return record({x.node}, out, [na = x.node, y = out, av](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx(g.shape());
            for (std::int64_t o = 0; o < av.outer; ++o)
                for (std::int64_t in = 0; in < av.inner; ++in) {
                    const std::int64_t base = o * av.len * av.inner + in;
                    T gsum = 0;
                    for (std::int64_t l = 0; l < av.len; ++l) gsum += g[base + l * av.inner];
                    for (std::int64_t l = 0; l < av.len; ++l) {
                        const std::int64_t i = base + l * av.inner;
                        gx.mut()[i] = g[i] - std::exp(y[i]) * gsum;
                    }
                }
            tp.accum(na, gx, T(1));
        });
    }

    Var embedding(const Var& table, const std::vector<std::int64_t>& idx) {
        detail::op_check(table.v.rank() == 2, "embedding: table must be rank-2");
        const std::int64_t rows = table.v.dim(0), d = table.v.dim(1);
        const std::int64_t n = static_cast<std::int64_t>(idx.size());
        for (auto i : idx)
            detail::op_check(i >= 0 && i < rows,
                             "embedding: index " + std::to_string(i) + " out of range [0," + std::to_string(rows) + ")");
        Tensor out({n, d});
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < d; ++c) out.at(r, c) = table.v.at(idx[static_cast<std::size_t>(r)], c);
        return record({table.node}, std::move(out),
                      [nt = table.node, idx, rows, d, n](TapeT& tp, const Tensor& g) {
                          if (nt < 0) return;
                          Tensor gt({rows, d});
                          for (std::int64_t r = 0; r < n; ++r)
                              for (std::int64_t c = 0; c < d; ++c)
                                  gt.at(idx[static_cast<std::size_t>(r)], c) += g.at(r, c);
                          tp.accum(nt, gt, T(1));
                      });
    }

    // ---- reductions / indexing ----

    Var sum_all(const Var& x) {
        T s = 0;
        for (std::int64_t i = 0; i < x.v.size(); ++i) s += x.v[i];
        return record({x.node}, Tensor::scalar(s), [na = x.node, shape = x.v.shape()](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            tp.accum(na, Tensor::full(shape, g[0]), T(1));
        });
    }

    Var mean_all(const Var& x) {
        const T inv = T(1) / static_cast<T>(x.v.size());
        T s = 0;
        for (std::int64_t i = 0; i < x.v.size(); ++i) s += x.v[i];
        return record({x.node}, Tensor::scalar(s * inv),
                      [na = x.node, shape = x.v.shape(), inv](TapeT& tp, const Tensor& g) {
                          if (na < 0) return;
                          tp.accum(na, Tensor::full(shape, g[0] * inv), T(1));
                      });
    }

    Var dot_const(const Var& x, const Tensor& c) {
        detail::op_check(x.v.same_shape(c), "dot_const: shape mismatch");
        T s = 0;
        for (std::int64_t i = 0; i < x.v.size(); ++i) s += x.v[i] * c[i];
        return record({x.node}, Tensor::scalar(s), [na = x.node, c](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx(c.shape());
            for (std::int64_t i = 0; i < c.size(); ++i) gx.mut()[i] = g[0] * c[i];
            tp.accum(na, gx, T(1));
        });
    }

    Var gather_rows(const Var& x, const std::vector<std::int64_t>& idx) {
        detail::op_check(x.v.rank() == 2 && static_cast<std::int64_t>(idx.size()) == x.v.dim(0),
                         "gather_rows: one index per row required");
        const std::int64_t n = x.v.dim(0), cdim = x.v.dim(1);
        Tensor out({n});
        for (std::int64_t r = 0; r < n; ++r) {
            const auto c = idx[static_cast<std::size_t>(r)];
            detail::op_check(c >= 0 && c < cdim, "gather_rows: column index out of range");
            out.mut()[r] = x.v.at(r, c);
        }
        return record({x.node}, std::move(out), [na = x.node, idx, n, cdim](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx({n, cdim});
            for (std::int64_t r = 0; r < n; ++r) gx.at(r, idx[static_cast<std::size_t>(r)]) += g[r];
            tp.accum(na, gx, T(1));
        });
    }

    Var row(const Var& x, std::int64_t r) {
        detail::op_check(x.v.rank() == 2 && r >= 0 && r < x.v.dim(0), "row: index out of range");
        const std::int64_t d = x.v.dim(1);
        Tensor out({d});
        for (std::int64_t c = 0; c < d; ++c) out.mut()[c] = x.v.at(r, c);
        return record({x.node}, std::move(out), [na = x.node, r, n = x.v.dim(0), d](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx({n, d});
            for (std::int64_t c = 0; c < d; ++c) gx.at(r, c) = g[c];
            tp.accum(na, gx, T(1));
        });
    }

    Var slice_cols(const Var& x, std::int64_t start, std::int64_t len) {
        detail::op_check(x.v.rank() == 2 && start >= 0 && len > 0 && start + len <= x.v.dim(1),
                         "slice_cols: range out of bounds for " + shape_str(x.v.shape()));
        const std::int64_t n = x.v.dim(0), d = x.v.dim(1);
        Tensor out({n, len});
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < len; ++c) out.at(r, c) = x.v.at(r, start + c);
        return record({x.node}, std::move(out), [na = x.node, start, len, n, d](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx({n, d});
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t c = 0; c < len; ++c) gx.at(r, start + c) = g.at(r, c);
            tp.accum(na, gx, T(1));
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        detail::op_check(!parts.empty(), "concat_cols: empty input");
        const std::int64_t n = parts[0].v.dim(0);
        std::int64_t total = 0;
        std::vector<int> pnodes;
        std::vector<std::int64_t> widths;
        for (const auto& p : parts) {
            detail::op_check(p.v.rank() == 2 && p.v.dim(0) == n, "concat_cols: row count mismatch");
            widths.push_back(p.v.dim(1));
            pnodes.push_back(p.node);
            total += p.v.dim(1);
        }
        Tensor out({n, total});
        std::int64_t off = 0;
        for (const auto& p : parts) {
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t c = 0; c < p.v.dim(1); ++c) out.at(r, off + c) = p.v.at(r, c);
            off += p.v.dim(1);
        }
        std::vector<int> all_nodes = pnodes;
        return record(all_nodes, std::move(out), [pnodes, widths, n](TapeT& tp, const Tensor& g) {
            std::int64_t off = 0;
            for (std::size_t k = 0; k < pnodes.size(); ++k) {
                if (pnodes[k] >= 0) {
                    Tensor gp({n, widths[k]});
                    for (std::int64_t r = 0; r < n; ++r)
                        for (std::int64_t c = 0; c < widths[k]; ++c) gp.at(r, c) = g.at(r, off + c);
                    tp.accum(pnodes[k], gp, T(1));
                }
                off += widths[k];
            }
        });
    }

    // ---- scalar-variable broadcasting ----

    Var scale_by(const Var& x, const Var& s) {
        detail::op_check(s.v.size() == 1, "scale_by: scale must be a 1-element tensor");
        Tensor out(x.v.shape());
        const T sv = s.v[0];
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = x.v[i] * sv;
        return record({x.node, s.node}, std::move(out),
                      [nx = x.node, ns = s.node, xv = x.v, sv](TapeT& tp, const Tensor& g) {
                          if (nx >= 0) tp.accum(nx, g, sv);
                          if (ns >= 0) {
                              T acc = 0;
                              for (std::int64_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
                              tp.accum(ns, Tensor::scalar(acc), T(1));
                          }
                      });
    }

    Var div_by(const Var& x, const Var& s) {
        detail::op_check(s.v.size() == 1, "div_by: divisor must be a 1-element tensor");
        const T sv = s.v[0];
        Tensor out(x.v.shape());
        for (std::int64_t i = 0; i < out.size(); ++i) out.mut()[i] = x.v[i] / sv;
        return record({x.node, s.node}, out,
                      [nx = x.node, ns = s.node, y = out, sv](TapeT& tp, const Tensor& g) {
                          if (nx >= 0) tp.accum(nx, g, T(1) / sv);
                          if (ns >= 0) {
                              T acc = 0;
                              for (std::int64_t i = 0; i < g.size(); ++i) acc += g[i] * y[i];
                              tp.accum(ns, Tensor::scalar(-acc / sv), T(1));
                          }
                      });
    }

    // ---- domain-specific primitives ----

    // Subtract row `root` from every row (root-relative coordinates).
    Var center_rows(const Var& x, std::int64_t root) {
        detail::op_check(x.v.rank() == 2 && root >= 0 && root < x.v.dim(0), "center_rows: root out of range");
        const std::int64_t n = x.v.dim(0), d = x.v.dim(1);
        Tensor out({n, d});
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < d; ++c) out.at(r, c) = x.v.at(r, c) - x.v.at(root, c);
        return record({x.node}, std::move(out), [na = x.node, root, n, d](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx({n, d});
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t c = 0; c < d; ++c) gx.at(r, c) = g.at(r, c);
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t c = 0; c < d; ++c) gx.at(root, c) -= g.at(r, c);
            tp.accum(na, gx, T(1));
        });
    }

    // Joint Shift: channels (columns) split into `segments` equal groups;
    // group g is translated along the position axis (rows) by g - segments/2,
    // vacated rows zero-filled.
    Var joint_shift(const Var& x, int segments) {
        detail::op_check(x.v.rank() == 2, "joint_shift: expects rank-2 features");
        const std::int64_t n = x.v.dim(0), d = x.v.dim(1);
        detail::op_check(segments >= 1 && segments % 2 == 1,
                         "joint_shift: segment count must be odd, got " + std::to_string(segments));
        detail::op_check(d % segments == 0, "joint_shift: channel dim " + std::to_string(d) +
                                                " not divisible by " + std::to_string(segments));
        Tensor out({n, d});
        shift_fill(x.v, out, segments, /*invert=*/false);
        return record({x.node}, std::move(out), [na = x.node, segments, n, d](TapeT& tp, const Tensor& g) {
            if (na < 0) return;
            Tensor gx({n, d});
            shift_fill(g, gx, segments, /*invert=*/true);
            tp.accum(na, gx, T(1));
        });
    }

    // -sum_{i: q_i > 0} q_i * log(p_i); q is a fixed distribution. Coordinates
    // with q_i == 0 are excluded so zero-probability model entries cannot
    // poison the loss with log(0).
    Var masked_nll(const Var& p, const Tensor& q) {
        detail::op_check(p.v.same_shape(q), "masked_nll: shape mismatch");
        T s = 0;
        for (std::int64_t i = 0; i < q.size(); ++i)
            if (q[i] > T(0)) s -= q[i] * std::log(p.v[i]);
        return record({p.node}, Tensor::scalar(s), [np = p.node, pv = p.v, q](TapeT& tp, const Tensor& g) {
            if (np < 0) return;
            Tensor gp(q.shape());
            for (std::int64_t i = 0; i < q.size(); ++i)
                if (q[i] > T(0)) gp.mut()[i] = -g[0] * q[i] / pv[i];
            tp.accum(np, gp, T(1));
        });
    }

    // ---- backward ----

    void backward(const Var& out) {
        if (out.v.size() != 1) throw DimensionError("backward: output must be scalar, got " + shape_str(out.v.shape()));
        if (!out.tracked()) throw DimensionError("backward: output does not depend on any tracked variable");
        grads_.assign(nodes_.size(), Tensor());
        grads_[static_cast<std::size_t>(out.node)] = Tensor::full(out.v.shape(), T(1));
        for (std::int64_t i = static_cast<std::int64_t>(nodes_.size()) - 1; i >= 0; --i) {
            auto& g = grads_[static_cast<std::size_t>(i)];
            if (g.size() == 0) continue;
            nodes_[static_cast<std::size_t>(i)].back(*this, g);
        }
    }

    Tensor grad(const Var& v) const {
        if (!v.tracked()) throw DimensionError("grad: variable is not tracked");
        const auto& g = grads_.at(static_cast<std::size_t>(v.node));
        if (g.size() == 0) return Tensor(v.v.shape());
        return g;
    }

private:
    struct Node {
        std::function<void(TapeT&, const Tensor&)> back;
    };
    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;

    int push(std::function<void(TapeT&, const Tensor&)> back) {
        nodes_.push_back(Node{std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    Var record(const std::vector<int>& parents, Tensor out,
               std::function<void(TapeT&, const Tensor&)> back) {
        bool tracked = false;
        for (int p : parents) tracked = tracked || (p >= 0);
        if (!tracked) return Var{std::move(out), -1};
        const int id = push(std::move(back));
        return Var{std::move(out), id};
    }

    void accum(int node, const Tensor& g, T factor) {
        if (node < 0) return;
        auto& slot = grads_[static_cast<std::size_t>(node)];
        if (slot.size() == 0) {
            slot = Tensor(g.shape());
        }
        for (std::int64_t i = 0; i < g.size(); ++i) slot.mut()[i] += factor * g[i];
    }

    static void softmax_fill(const Tensor& x, Tensor& out, const detail::AxisView& av) {
        for (std::int64_t o = 0; o < av.outer; ++o)
            for (std::int64_t in = 0; in < av.inner; ++in) {
                const std::int64_t base = o * av.len * av.inner + in;
                T mx = x[base];
                for (std::int64_t l = 1; l < av.len; ++l) mx = std::max(mx, x[base + l * av.inner]);
                T se = 0;
                for (std::int64_t l = 0; l < av.len; ++l) {
                    const std::int64_t i = base + l * av.inner;
                    const T e = std::exp(x[i] - mx);
                    out.mut()[i] = e;
                    se += e;
                }
                for (std::int64_t l = 0; l < av.len; ++l) out.mut()[base + l * av.inner] /= se;
            }
    }

    // invert=false: out[r] = in[r - off]; invert=true applies the transpose map.
    static void shift_fill(const Tensor& in, Tensor& out, int segments, bool invert) {
        const std::int64_t n = in.dim(0), d = in.dim(1);
        const std::int64_t seg_w = d / segments;
        for (int g = 0; g < segments; ++g) {
            std::int64_t off = g - segments / 2;
            if (invert) off = -off;
            const std::int64_t c0 = g * seg_w, c1 = c0 + seg_w;
            for (std::int64_t r = 0; r < n; ++r) {
                const std::int64_t src = r - off;
                if (src < 0 || src >= n) continue;
                for (std::int64_t c = c0; c < c1; ++c) out.at(r, c) = in.at(src, c);
            }
        }
    }
};

using Tape = TapeT<double>;

// Attention over row-stacked token features. q_src: [n_q x D], kv_src:
// [n_kv x D]; weights are [D x D], biases [D]. Head splitting is along
// columns.
template <typename T>
VarT<T> multi_head_attention(TapeT<T>& tp, const VarT<T>& q_src, const VarT<T>& kv_src,
                             const VarT<T>& wq, const VarT<T>& bq, const VarT<T>& wk, const VarT<T>& bk,
                             const VarT<T>& wv, const VarT<T>& bv, const VarT<T>& wo, const VarT<T>& bo,
                             int heads) {
    const std::int64_t dmodel = q_src.v.dim(1);
    detail::op_check(heads >= 1 && dmodel % heads == 0,
                     "multi_head_attention: width " + std::to_string(dmodel) + " not divisible by " +
                         std::to_string(heads) + " heads");
    const std::int64_t dh = dmodel / heads;
    auto q = tp.linear(q_src, wq, bq);
    auto k = tp.linear(kv_src, wk, bk);
    auto v = tp.linear(kv_src, wv, bv);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<VarT<T>> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto qh = tp.slice_cols(q, h * dh, dh);
        auto kh = tp.slice_cols(k, h * dh, dh);
        auto vh = tp.slice_cols(v, h * dh, dh);
        auto scores = tp.scale(tp.matmul(qh, tp.transpose(kh)), inv_sqrt);
        auto attn = tp.softmax(scores, 1);
        outs.push_back(tp.matmul(attn, vh));
    }
    return tp.linear(tp.concat_cols(outs), wo, bo);
}

// Max over coordinates of the relative error between the tape gradient and a
// central finite difference of fn at `point`. fn must build a scalar output
// from a single tracked input.
template <typename T, typename Fn>
double grad_check(Fn&& fn, const TensorT<T>& point, double h = 1e-5) {
    TapeT<T> tape;
    auto x = tape.leaf(point);
    auto y = fn(tape, x);
    if (y.v.size() != 1) throw DimensionError("grad_check: function output must be scalar");
    tape.backward(y);
    const TensorT<T> analytic = tape.grad(x);

    auto eval = [&](const TensorT<T>& p) {
        TapeT<T> t2;
        auto xx = t2.leaf(p);
        auto yy = fn(t2, xx);
        return static_cast<double>(yy.v[0]);
    };

    double max_rel = 0.0;
    TensorT<T> probe = point.clone();
    for (std::int64_t i = 0; i < point.size(); ++i) {
        const T orig = probe[i];
        probe.mut()[i] = orig + static_cast<T>(h);
        const double fp = eval(probe);
        probe.mut()[i] = orig - static_cast<T>(h);
        const double fm = eval(probe);
        probe.mut()[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double an = static_cast<double>(analytic[i]);
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-2});
        max_rel = std::max(max_rel, std::abs(fd - an) / denom);
    }
    return max_rel;
}

}  // namespace didipose

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lpa/errors.hpp"
#include "lpa/tensor.hpp"

namespace lpa {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> out(a.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return Tensor<T>::op(a.shape(), std::move(out), {a, b},
                       [](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         for (int side = 0; side < 2; ++side) {
                           if (!pa[side]) continue;
                           auto& d = *pa[side];
                           for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                         }
                       });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> out(a.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return Tensor<T>::op(a.shape(), std::move(out), {a, b},
                       [](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (pa[0]) {
                           auto& d = *pa[0];
                           for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                         }
                         if (pa[1]) {
                           auto& d = *pa[1];
                           for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
                         }
                       });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(a.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::op(a.shape(), std::move(out), {a, b},
                       [an, bn](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (pa[0]) {
                           auto& d = *pa[0];
                           for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bn->value[i];
                         }
                         if (pa[1]) {
                           auto& d = *pa[1];
                           for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * an->value[i];
                         }
                       });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * c;
  return Tensor<T>::op(x.shape(), std::move(out), {x},
                       [c](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (!pa[0]) return;
                         auto& d = *pa[0];
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * c;
                       });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.value()[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  std::vector<T> saved = out;
  return Tensor<T>::op(x.shape(), std::move(out), {x},
                       [saved](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (!pa[0]) return;
                         auto& d = *pa[0];
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           d[i] += g[i] * saved[i] * (T(1) - saved[i]);
                         }
                       });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.value().size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(T(0), x.value()[i]);
  auto xn = x.node();
  return Tensor<T>::op(x.shape(), std::move(out), {x},
                       [xn](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (!pa[0]) return;
                         auto& d = *pa[0];
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           if (xn->value[i] > T(0)) d[i] += g[i];
                         }
                       });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  }
  return Tensor<T>::op(std::move(shape), x.value(), {x},
                       [](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (!pa[0]) return;
                         auto& d = *pa[0];
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                       });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0 || axis >= rank) throw UsageError("concat: axis out of range");
  Shape out_shape = s0;
  out_shape[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    if (static_cast<int>(p.shape().size()) != rank) {
      throw DimensionError("concat: rank mismatch " + shape_str(s0) + " vs " +
                           shape_str(p.shape()));
    }
    for (int i = 0; i < rank; ++i) {
      if (i != axis && p.shape()[static_cast<std::size_t>(i)] != s0[static_cast<std::size_t>(i)]) {
        throw DimensionError("concat: shape mismatch " + shape_str(s0) + " vs " +
                             shape_str(p.shape()));
      }
    }
    out_shape[static_cast<std::size_t>(axis)] += p.shape()[static_cast<std::size_t>(axis)];
  }

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) inner *= s0[static_cast<std::size_t>(i)];
  const std::int64_t total_axis = out_shape[static_cast<std::size_t>(axis)];

  std::vector<T> out(static_cast<std::size_t>(outer * total_axis * inner));
  std::vector<std::int64_t> offsets(parts.size());
  {
    std::int64_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      offsets[p] = off;
      const std::int64_t len = parts[p].shape()[static_cast<std::size_t>(axis)];
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t j = 0; j < len; ++j) {
          const T* src = parts[p].value().data() + static_cast<std::size_t>((o * len + j) * inner);
          T* dst = out.data() + static_cast<std::size_t>(((o * total_axis) + off + j) * inner);
          std::copy(src, src + inner, dst);
        }
      }
      off += len;
    }
  }

  std::vector<std::int64_t> lens(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p) {
    lens[p] = parts[p].shape()[static_cast<std::size_t>(axis)];
  }
  return Tensor<T>::op(
      std::move(out_shape), std::move(out), parts,
      [outer, inner, total_axis, offsets, lens](const std::vector<T>& g,
                                                const std::vector<std::vector<T>*>& pa) {
        for (std::size_t p = 0; p < pa.size(); ++p) {
          if (!pa[p]) continue;
          auto& d = *pa[p];
          for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t j = 0; j < lens[p]; ++j) {
              const T* src =
                  g.data() + static_cast<std::size_t>(((o * total_axis) + offsets[p] + j) * inner);
              T* dst = d.data() + static_cast<std::size_t>((o * lens[p] + j) * inner);
              for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {
struct AxisSplit {
  std::int64_t outer, n, inner;
};

inline AxisSplit split_axis(const Shape& shape, int axis) {
  const int rank = static_cast<int>(shape.size());
  if (axis < 0 || axis >= rank) throw UsageError("axis out of range for shape " + shape_str(shape));
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < rank; ++i) s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

inline Shape drop_axis(const Shape& shape, int axis) {
  Shape out;
  for (int i = 0; i < static_cast<int>(shape.size()); ++i) {
    if (i != axis) out.push_back(shape[static_cast<std::size_t>(i)]);
  }
  return out;
}
}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.value()) total += v;
  return Tensor<T>::op({}, {total}, {x},
                       [](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (!pa[0]) return;
                         auto& d = *pa[0];
                         for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[0];
                       });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x) {
  const T inv = T(1) / static_cast<T>(x.size());
  return scale(reduce_sum(x), inv);
}

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, int axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<T> out(static_cast<std::size_t>(s.outer * s.inner), T(0));
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t k = 0; k < s.n; ++k) {
      for (std::int64_t i = 0; i < s.inner; ++i) {
        out[static_cast<std::size_t>(o * s.inner + i)] +=
            x.value()[static_cast<std::size_t>((o * s.n + k) * s.inner + i)];
      }
    }
  }
  return Tensor<T>::op(detail::drop_axis(x.shape(), axis), std::move(out), {x},
                       [s](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (!pa[0]) return;
                         auto& d = *pa[0];
                         for (std::int64_t o = 0; o < s.outer; ++o) {
                           for (std::int64_t k = 0; k < s.n; ++k) {
                             for (std::int64_t i = 0; i < s.inner; ++i) {
                               d[static_cast<std::size_t>((o * s.n + k) * s.inner + i)] +=
                                   g[static_cast<std::size_t>(o * s.inner + i)];
                             }
                           }
                         }
                       });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, int axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  return scale(reduce_sum(x, axis), T(1) / static_cast<T>(s.n));
}

// Gradient flows to the first maximal element along the axis.
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& x, int axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<T> out(static_cast<std::size_t>(s.outer * s.inner));
  std::vector<std::int64_t> arg(out.size());
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      std::int64_t best = 0;
      T bv = x.value()[static_cast<std::size_t>(o * s.n * s.inner + i)];
      for (std::int64_t k = 1; k < s.n; ++k) {
        const T v = x.value()[static_cast<std::size_t>((o * s.n + k) * s.inner + i)];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[static_cast<std::size_t>(o * s.inner + i)] = bv;
      arg[static_cast<std::size_t>(o * s.inner + i)] = best;
    }
  }
  return Tensor<T>::op(detail::drop_axis(x.shape(), axis), std::move(out), {x},
                       [s, arg](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (!pa[0]) return;
                         auto& d = *pa[0];
                         for (std::int64_t o = 0; o < s.outer; ++o) {
                           for (std::int64_t i = 0; i < s.inner; ++i) {
                             const std::int64_t k = arg[static_cast<std::size_t>(o * s.inner + i)];
                             d[static_cast<std::size_t>((o * s.n + k) * s.inner + i)] +=
                                 g[static_cast<std::size_t>(o * s.inner + i)];
                           }
                         }
                       });
}

// Index output; not differentiable. Ties resolve to the lowest index.
template <typename T>
Tensor<T> argmax(const Tensor<T>& x, int axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<T> out(static_cast<std::size_t>(s.outer * s.inner));
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      std::int64_t best = 0;
      T bv = x.value()[static_cast<std::size_t>(o * s.n * s.inner + i)];
      for (std::int64_t k = 1; k < s.n; ++k) {
        const T v = x.value()[static_cast<std::size_t>((o * s.n + k) * s.inner + i)];
        if (v > bv) {
          bv = v;
          best = k;
        }
      }
      out[static_cast<std::size_t>(o * s.inner + i)] = static_cast<T>(best);
    }
  }
  return Tensor<T>::from(detail::drop_axis(x.shape(), axis), std::move(out));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(M) * static_cast<std::size_t>(N), T(0));
  for (int m = 0; m < M; ++m) {
    for (int k = 0; k < K; ++k) {
      const T av = a.value()[static_cast<std::size_t>(m * K + k)];
      const T* brow = b.value().data() + static_cast<std::size_t>(k * N);
      T* orow = out.data() + static_cast<std::size_t>(m * N);
      for (int n = 0; n < N; ++n) orow[n] += av * brow[n];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return Tensor<T>::op(
      {M, N}, std::move(out), {a, b},
      [an, bn, M, K, N](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        if (pa[0]) {
          auto& da = *pa[0];
          for (int m = 0; m < M; ++m) {
            for (int k = 0; k < K; ++k) {
              T acc = 0;
              const T* grow = g.data() + static_cast<std::size_t>(m * N);
              const T* brow = bn->value.data() + static_cast<std::size_t>(k * N);
              for (int n = 0; n < N; ++n) acc += grow[n] * brow[n];
              da[static_cast<std::size_t>(m * K + k)] += acc;
            }
          }
        }
        if (pa[1]) {
          auto& db = *pa[1];
          for (int m = 0; m < M; ++m) {
            const T* grow = g.data() + static_cast<std::size_t>(m * N);
            for (int k = 0; k < K; ++k) {
              const T av = an->value[static_cast<std::size_t>(m * K + k)];
              T* drow = db.data() + static_cast<std::size_t>(k * N);
              for (int n = 0; n < N; ++n) drow[n] += av * grow[n];
            }
          }
        }
      });
}

// out[m, n] = mat[m, n] + bias[n]
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& mat, const Tensor<T>& bias) {
  if (mat.shape().size() != 2 || bias.shape().size() != 1 || bias.dim(0) != mat.dim(1)) {
    throw DimensionError("add_row_bias: " + shape_str(mat.shape()) + " vs " +
                         shape_str(bias.shape()));
  }
  const int M = mat.dim(0), N = mat.dim(1);
  std::vector<T> out(mat.value().size());
  for (int m = 0; m < M; ++m) {
    for (int n = 0; n < N; ++n) {
      out[static_cast<std::size_t>(m * N + n)] =
          mat.value()[static_cast<std::size_t>(m * N + n)] +
          bias.value()[static_cast<std::size_t>(n)];
    }
  }
  return Tensor<T>::op({M, N}, std::move(out), {mat, bias},
                       [M, N](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (pa[0]) {
                           auto& d = *pa[0];
                           for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                         }
                         if (pa[1]) {
                           auto& d = *pa[1];
                           for (int m = 0; m < M; ++m) {
                             for (int n = 0; n < N; ++n) {
                               d[static_cast<std::size_t>(n)] +=
                                   g[static_cast<std::size_t>(m * N + n)];
                             }
                           }
                         }
                       });
}

// ---------------------------------------------------------------------------
// Softmax and losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  std::vector<T> out(x.value().size());
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t i = 0; i < s.inner; ++i) {
      T m = x.value()[static_cast<std::size_t>(o * s.n * s.inner + i)];
      for (std::int64_t k = 1; k < s.n; ++k) {
        m = std::max(m, x.value()[static_cast<std::size_t>((o * s.n + k) * s.inner + i)]);
      }
      T denom = 0;
      for (std::int64_t k = 0; k < s.n; ++k) {
        const std::size_t idx = static_cast<std::size_t>((o * s.n + k) * s.inner + i);
        out[idx] = std::exp(x.value()[idx] - m);
        denom += out[idx];
      }
      for (std::int64_t k = 0; k < s.n; ++k) {
        out[static_cast<std::size_t>((o * s.n + k) * s.inner + i)] /= denom;
      }
    }
  }
  std::vector<T> saved = out;
  return Tensor<T>::op(
      x.shape(), std::move(out), {x},
      [s, saved](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        if (!pa[0]) return;
        auto& d = *pa[0];
        for (std::int64_t o = 0; o < s.outer; ++o) {
          for (std::int64_t i = 0; i < s.inner; ++i) {
            T dot = 0;
            for (std::int64_t k = 0; k < s.n; ++k) {
              const std::size_t idx = static_cast<std::size_t>((o * s.n + k) * s.inner + i);
              dot += g[idx] * saved[idx];
            }
            for (std::int64_t k = 0; k < s.n; ++k) {
              const std::size_t idx = static_cast<std::size_t>((o * s.n + k) * s.inner + i);
              d[idx] += saved[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.shape().size() != 1) throw UsageError("softmax without axis expects a rank-1 tensor");
  return softmax(x, 0);
}

// Mean binary cross-entropy. Predictions are clamped to [eps, 1-eps]; inside
// the clamped region the clamp is flat, so those entries get zero gradient.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  check_same_shape(pred, target, "bce_loss");
  constexpr T kEps = T(1e-7);
  const std::size_t n = pred.value().size();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T p = std::clamp(pred.value()[i], kEps, T(1) - kEps);
    const T t = target.value()[i];
    total += -(t * std::log(p) + (T(1) - t) * std::log(T(1) - p));
  }
  const T inv_n = T(1) / static_cast<T>(n);
  auto pn = pred.node();
  auto tn = target.node();
  return Tensor<T>::op(
      {}, {total * inv_n}, {pred, target},
      [pn, tn, n, inv_n](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        constexpr T kEps = T(1e-7);
        const T go = g[0] * inv_n;
        for (std::size_t i = 0; i < n; ++i) {
          const T raw = pn->value[i];
          const T p = std::clamp(raw, kEps, T(1) - kEps);
          const T t = tn->value[i];
          if (pa[0] && raw > kEps && raw < T(1) - kEps) {
            (*pa[0])[i] += go * (p - t) / (p * (T(1) - p));
          }
          if (pa[1]) (*pa[1])[i] += go * (std::log(T(1) - p) - std::log(p));
        }
      });
}

// Sum_i p_i * ln(p_i / q_i). Inputs must already be distributions; entries are
// clamped by eps inside the logs only.
template <typename T>
Tensor<T> kl_div(const Tensor<T>& p, const Tensor<T>& q) {
  check_same_shape(p, q, "kl_div");
  constexpr T kEps = T(1e-12);
  const std::size_t n = p.value().size();
  for (int side = 0; side < 2; ++side) {
    const auto& v = side == 0 ? p.value() : q.value();
    T sum = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (v[i] < T(0)) {
        throw ValidationError(std::string("kl_div: negative entry in ") +
                              (side == 0 ? "p" : "q"));
      }
      sum += v[i];
    }
    if (std::abs(sum - T(1)) > T(1e-6)) {
      throw ValidationError(std::string("kl_div: ") + (side == 0 ? "p" : "q") +
                            " is not normalized, sum = " + std::to_string(static_cast<double>(sum)));
    }
  }
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T pc = std::max(p.value()[i], kEps);
    const T qc = std::max(q.value()[i], kEps);
    total += p.value()[i] * (std::log(pc) - std::log(qc));
  }
  auto pn = p.node();
  auto qn = q.node();
  return Tensor<T>::op(
      {}, {total}, {p, q},
      [pn, qn, n](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        constexpr T kEps = T(1e-12);
        for (std::size_t i = 0; i < n; ++i) {
          const T pv = pn->value[i];
          const T qv = qn->value[i];
          const T pc = std::max(pv, kEps);
          const T qc = std::max(qv, kEps);
          if (pa[0]) {
            T dp = std::log(pc) - std::log(qc);
            if (pv >= kEps) dp += T(1);
            (*pa[0])[i] += g[0] * dp;
          }
          if (pa[1] && qv >= kEps) (*pa[1])[i] -= g[0] * pv / qc;
        }
      });
}

// Mean cross-entropy of per-pixel class logits [C,h,w] against integer labels
// of length h*w. Labels are data, not tensors.
template <typename T>
Tensor<T> softmax_xent(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 3) {
    throw DimensionError("softmax_xent: logits must be [C,h,w], got " + shape_str(logits.shape()));
  }
  const int C = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  const std::size_t pixels = static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
  if (labels.size() != pixels) {
    throw DimensionError("softmax_xent: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(pixels) + " pixels");
  }
  for (int l : labels) {
    if (l < 0 || l >= C) throw ValidationError("softmax_xent: label out of range");
  }
  T total = 0;
  for (std::size_t px = 0; px < pixels; ++px) {
    T m = logits.value()[px];
    for (int c = 1; c < C; ++c) m = std::max(m, logits.value()[static_cast<std::size_t>(c) * pixels + px]);
    T denom = 0;
    for (int c = 0; c < C; ++c) {
      denom += std::exp(logits.value()[static_cast<std::size_t>(c) * pixels + px] - m);
    }
    const T lse = m + std::log(denom);
    total += lse - logits.value()[static_cast<std::size_t>(labels[px]) * pixels + px];
  }
  const T inv_p = T(1) / static_cast<T>(pixels);
  auto ln = logits.node();
  return Tensor<T>::op(
      {}, {total * inv_p}, {logits},
      [ln, labels, C, pixels, inv_p](const std::vector<T>& g,
                                     const std::vector<std::vector<T>*>& pa) {
        if (!pa[0]) return;
        auto& d = *pa[0];
        const T go = g[0] * inv_p;
        for (std::size_t px = 0; px < pixels; ++px) {
          T m = ln->value[px];
          for (int c = 1; c < C; ++c) {
            m = std::max(m, ln->value[static_cast<std::size_t>(c) * pixels + px]);
          }
          T denom = 0;
          for (int c = 0; c < C; ++c) {
            denom += std::exp(ln->value[static_cast<std::size_t>(c) * pixels + px] - m);
          }
          for (int c = 0; c < C; ++c) {
            const std::size_t idx = static_cast<std::size_t>(c) * pixels + px;
            const T soft = std::exp(ln->value[idx] - m) / denom;
            d[idx] += go * (soft - (c == labels[px] ? T(1) : T(0)));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

namespace detail {
// Coordinate decomposition for clamped bilinear interpolation on an H x W
// grid. *_active marks whether the coordinate sits strictly inside the grid,
// i.e. whether gradients w.r.t. that coordinate are nonzero.
template <typename T>
struct BilinearCoord {
  int y0, y1, x0, x1;
  T fy, fx;
  bool dy_active, dx_active;
};

template <typename T>
BilinearCoord<T> bilinear_coord(T y, T x, int H, int W) {
  BilinearCoord<T> c{};
  const T yc = std::clamp(y, T(0), T(H - 1));
  const T xc = std::clamp(x, T(0), T(W - 1));
  c.y0 = std::min(static_cast<int>(std::floor(yc)), std::max(H - 2, 0));
  c.x0 = std::min(static_cast<int>(std::floor(xc)), std::max(W - 2, 0));
  c.y1 = std::min(c.y0 + 1, H - 1);
  c.x1 = std::min(c.x0 + 1, W - 1);
  c.fy = yc - static_cast<T>(c.y0);
  c.fx = xc - static_cast<T>(c.x0);
  c.dy_active = y > T(0) && y < T(H - 1);
  c.dx_active = x > T(0) && x < T(W - 1);
  return c;
}

template <typename T>
T bilinear_value(const T* plane, int W, const BilinearCoord<T>& c) {
  return (T(1) - c.fy) * (T(1) - c.fx) * plane[c.y0 * W + c.x0] +
         (T(1) - c.fy) * c.fx * plane[c.y0 * W + c.x1] +
         c.fy * (T(1) - c.fx) * plane[c.y1 * W + c.x0] + c.fy * c.fx * plane[c.y1 * W + c.x1];
}
}  // namespace detail

// Samples all channels of [C,H,W] at one fractional position with
// replicate-edge clamping. Gradients flow to the input and, when the y/x
// overload with tensors is used, to the coordinates.
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& input, T y, T x) {
  if (input.shape().size() != 3) {
    throw DimensionError("bilinear_sample: input must be [C,H,W], got " +
                         shape_str(input.shape()));
  }
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const auto c = detail::bilinear_coord(y, x, H, W);
  std::vector<T> out(static_cast<std::size_t>(C));
  for (int ch = 0; ch < C; ++ch) {
    out[static_cast<std::size_t>(ch)] =
        detail::bilinear_value(input.value().data() + static_cast<std::size_t>(ch) * H * W, W, c);
  }
  return Tensor<T>::op({C}, std::move(out), {input},
                       [c, C, H, W](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (!pa[0]) return;
                         auto& d = *pa[0];
                         for (int ch = 0; ch < C; ++ch) {
                           T* plane = d.data() + static_cast<std::size_t>(ch) * H * W;
                           const T gv = g[static_cast<std::size_t>(ch)];
                           plane[c.y0 * W + c.x0] += gv * (T(1) - c.fy) * (T(1) - c.fx);
                           plane[c.y0 * W + c.x1] += gv * (T(1) - c.fy) * c.fx;
                           plane[c.y1 * W + c.x0] += gv * c.fy * (T(1) - c.fx);
                           plane[c.y1 * W + c.x1] += gv * c.fy * c.fx;
                         }
                       });
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& input, const Tensor<T>& y, const Tensor<T>& x) {
  if (input.shape().size() != 3) {
    throw DimensionError("bilinear_sample: input must be [C,H,W], got " +
                         shape_str(input.shape()));
  }
  if (y.size() != 1 || x.size() != 1) {
    throw DimensionError("bilinear_sample: coordinates must be scalars");
  }
  const int C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const auto c = detail::bilinear_coord(y.item(), x.item(), H, W);
  std::vector<T> out(static_cast<std::size_t>(C));
  auto in = input.node();
  for (int ch = 0; ch < C; ++ch) {
    out[static_cast<std::size_t>(ch)] =
        detail::bilinear_value(in->value.data() + static_cast<std::size_t>(ch) * H * W, W, c);
  }
  return Tensor<T>::op(
      {C}, std::move(out), {input, y, x},
      [in, c, C, H, W](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        for (int ch = 0; ch < C; ++ch) {
          const T gv = g[static_cast<std::size_t>(ch)];
          const T* plane = in->value.data() + static_cast<std::size_t>(ch) * H * W;
          if (pa[0]) {
            T* d = pa[0]->data() + static_cast<std::size_t>(ch) * H * W;
            d[c.y0 * W + c.x0] += gv * (T(1) - c.fy) * (T(1) - c.fx);
            d[c.y0 * W + c.x1] += gv * (T(1) - c.fy) * c.fx;
            d[c.y1 * W + c.x0] += gv * c.fy * (T(1) - c.fx);
            d[c.y1 * W + c.x1] += gv * c.fy * c.fx;
          }
          if (pa[1] && c.dy_active) {
            const T dvdy = (T(1) - c.fx) * (plane[c.y1 * W + c.x0] - plane[c.y0 * W + c.x0]) +
                           c.fx * (plane[c.y1 * W + c.x1] - plane[c.y0 * W + c.x1]);
            (*pa[1])[0] += gv * dvdy;
          }
          if (pa[2] && c.dx_active) {
            const T dvdx = (T(1) - c.fy) * (plane[c.y0 * W + c.x1] - plane[c.y0 * W + c.x0]) +
                           c.fy * (plane[c.y1 * W + c.x1] - plane[c.y1 * W + c.x0]);
            (*pa[2])[0] += gv * dvdx;
          }
        }
      });
}

// Align-corners bilinear upsampling: source coord = dest * (h-1)/(H-1).
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& input, int H, int W) {
  if (input.shape().size() != 3) {
    throw DimensionError("upsample_bilinear: input must be [C,h,w], got " +
                         shape_str(input.shape()));
  }
  const int C = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (H < h || W < w) {
    throw ConfigError("upsample_bilinear: target " + std::to_string(H) + "x" + std::to_string(W) +
                      " smaller than source " + std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<int> y0(static_cast<std::size_t>(H)), y1(static_cast<std::size_t>(H));
  std::vector<T> fy(static_cast<std::size_t>(H));
  for (int y = 0; y < H; ++y) {
    const T sy = H > 1 ? static_cast<T>(y) * static_cast<T>(h - 1) / static_cast<T>(H - 1) : T(0);
    int lo = std::min(static_cast<int>(std::floor(sy)), std::max(h - 2, 0));
    y0[static_cast<std::size_t>(y)] = lo;
    y1[static_cast<std::size_t>(y)] = std::min(lo + 1, h - 1);
    fy[static_cast<std::size_t>(y)] = sy - static_cast<T>(lo);
  }
  std::vector<int> x0(static_cast<std::size_t>(W)), x1(static_cast<std::size_t>(W));
  std::vector<T> fx(static_cast<std::size_t>(W));
  for (int x = 0; x < W; ++x) {
    const T sx = W > 1 ? static_cast<T>(x) * static_cast<T>(w - 1) / static_cast<T>(W - 1) : T(0);
    int lo = std::min(static_cast<int>(std::floor(sx)), std::max(w - 2, 0));
    x0[static_cast<std::size_t>(x)] = lo;
    x1[static_cast<std::size_t>(x)] = std::min(lo + 1, w - 1);
    fx[static_cast<std::size_t>(x)] = sx - static_cast<T>(lo);
  }

  std::vector<T> out(static_cast<std::size_t>(C) * H * W);
  for (int ch = 0; ch < C; ++ch) {
    const T* src = input.value().data() + static_cast<std::size_t>(ch) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(ch) * H * W;
    for (int y = 0; y < H; ++y) {
      for (int x = 0; x < W; ++x) {
        const T a = fy[static_cast<std::size_t>(y)], b = fx[static_cast<std::size_t>(x)];
        dst[y * W + x] = (T(1) - a) * (T(1) - b) * src[y0[y] * w + x0[x]] +
                         (T(1) - a) * b * src[y0[y] * w + x1[x]] +
                         a * (T(1) - b) * src[y1[y] * w + x0[x]] + a * b * src[y1[y] * w + x1[x]];
      }
    }
  }
  return Tensor<T>::op(
      {C, H, W}, std::move(out), {input},
      [C, H, W, h, w, y0, y1, fy, x0, x1, fx](const std::vector<T>& g,
                                              const std::vector<std::vector<T>*>& pa) {
        if (!pa[0]) return;
        auto& d = *pa[0];
        for (int ch = 0; ch < C; ++ch) {
          const T* gsrc = g.data() + static_cast<std::size_t>(ch) * H * W;
          T* dst = d.data() + static_cast<std::size_t>(ch) * h * w;
          for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
              const T gv = gsrc[y * W + x];
              const T a = fy[static_cast<std::size_t>(y)], b = fx[static_cast<std::size_t>(x)];
              dst[y0[y] * w + x0[x]] += gv * (T(1) - a) * (T(1) - b);
              dst[y0[y] * w + x1[x]] += gv * (T(1) - a) * b;
              dst[y1[y] * w + x0[x]] += gv * a * (T(1) - b);
              dst[y1[y] * w + x1[x]] += gv * a * b;
            }
          }
        }
      });
}

// Cross-correlation with zero padding. Bias may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 int stride, int pad) {
  if (input.shape().size() != 3 || kernel.shape().size() != 4) {
    throw DimensionError("conv2d: expected input [C,H,W] and kernel [Co,Ci,K,K], got " +
                         shape_str(input.shape()) + " and " + shape_str(kernel.shape()));
  }
  const int Ci = input.dim(0), H = input.dim(1), W = input.dim(2);
  const int Co = kernel.dim(0), K = kernel.dim(2);
  if (kernel.dim(1) != Ci || kernel.dim(3) != K) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                         " incompatible with input " + shape_str(input.shape()));
  }
  if (K % 2 == 0) throw ConfigError("conv2d: kernel size must be odd, got " + std::to_string(K));
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: invalid stride/pad");
  if ((H + 2 * pad - K) % stride != 0 || (W + 2 * pad - K) % stride != 0) {
    throw ConfigError("conv2d: non-integral output extent for input " + shape_str(input.shape()) +
                      " with K=" + std::to_string(K) + " stride=" + std::to_string(stride) +
                      " pad=" + std::to_string(pad));
  }
  const int Ho = (H + 2 * pad - K) / stride + 1;
  const int Wo = (W + 2 * pad - K) / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.shape().size() != 1 || bias.dim(0) != Co)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " vs Co=" +
                         std::to_string(Co));
  }

  std::vector<T> out(static_cast<std::size_t>(Co) * Ho * Wo, T(0));
  const T* in = input.value().data();
  const T* kw = kernel.value().data();
  for (int co = 0; co < Co; ++co) {
    T* oplane = out.data() + static_cast<std::size_t>(co) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      for (int ox = 0; ox < Wo; ++ox) {
        T acc = has_bias ? bias.value()[static_cast<std::size_t>(co)] : T(0);
        for (int ci = 0; ci < Ci; ++ci) {
          const T* iplane = in + static_cast<std::size_t>(ci) * H * W;
          const T* kplane = kw + (static_cast<std::size_t>(co) * Ci + ci) * K * K;
          for (int ky = 0; ky < K; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < K; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              acc += iplane[iy * W + ix] * kplane[ky * K + kx];
            }
          }
        }
        oplane[oy * Wo + ox] = acc;
      }
    }
  }

  auto in_node = input.node();
  auto k_node = kernel.node();
  std::vector<Tensor<T>> parents = {input, kernel};
  if (has_bias) parents.push_back(bias);
  return Tensor<T>::op(
      {Co, Ho, Wo}, std::move(out), std::move(parents),
      [in_node, k_node, Ci, H, W, Co, K, Ho, Wo, stride, pad](
          const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        for (int co = 0; co < Co; ++co) {
          const T* gplane = g.data() + static_cast<std::size_t>(co) * Ho * Wo;
          for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
              const T gv = gplane[oy * Wo + ox];
              if (pa.size() > 2 && pa[2]) (*pa[2])[static_cast<std::size_t>(co)] += gv;
              for (int ci = 0; ci < Ci; ++ci) {
                const std::size_t kbase = (static_cast<std::size_t>(co) * Ci + ci) * K * K;
                const T* iplane = in_node->value.data() + static_cast<std::size_t>(ci) * H * W;
                for (int ky = 0; ky < K; ++ky) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= H) continue;
                  for (int kx = 0; kx < K; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= W) continue;
                    if (pa[0]) {
                      (*pa[0])[static_cast<std::size_t>(ci) * H * W + iy * W + ix] +=
                          gv * k_node->value[kbase + ky * K + kx];
                    }
                    if (pa[1]) (*pa[1])[kbase + ky * K + kx] += gv * iplane[iy * W + ix];
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, int stride, int pad) {
  return conv2d(input, kernel, Tensor<T>(), stride, pad);
}

// out[c,y,x] = features[c,y,x] * gate[y,x]
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& features, const Tensor<T>& gate) {
  if (features.shape().size() != 3 || gate.shape().size() != 2 || features.dim(1) != gate.dim(0) ||
      features.dim(2) != gate.dim(1)) {
    throw DimensionError("channel_scale: " + shape_str(features.shape()) + " vs " +
                         shape_str(gate.shape()));
  }
  const int C = features.dim(0);
  const std::size_t plane = static_cast<std::size_t>(features.dim(1)) * features.dim(2);
  std::vector<T> out(features.value().size());
  for (int c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      out[static_cast<std::size_t>(c) * plane + i] =
          features.value()[static_cast<std::size_t>(c) * plane + i] * gate.value()[i];
    }
  }
  auto fn = features.node();
  auto gn = gate.node();
  return Tensor<T>::op(
      features.shape(), std::move(out), {features, gate},
      [fn, gn, C, plane](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        for (int c = 0; c < C; ++c) {
          for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t idx = static_cast<std::size_t>(c) * plane + i;
            if (pa[0]) (*pa[0])[idx] += g[idx] * gn->value[i];
            if (pa[1]) (*pa[1])[i] += g[idx] * fn->value[idx];
          }
        }
      });
}

}  // namespace lpa

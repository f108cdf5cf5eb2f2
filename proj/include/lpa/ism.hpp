#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lpa/errors.hpp"
#include "lpa/ops.hpp"
#include "lpa/tensor.hpp"

namespace lpa {

// Implicit spatial alignment: each query position attends over the 3x3
// neighborhood of the counterpart modality (Eq. 3 style, no learned
// projections), plus the symmetric consistency extraction and KL loss.

// Slot k covers window offset (k/3 - 1, k%3 - 1); row-major, center slot 4,
// mirrored slot 8 - k.
inline constexpr int kWindowSlots = 9;

template <typename T>
struct WindowedKeys {
  Tensor<T> keys;               // [h*w, 9, D], zero-padded at borders
  std::vector<std::uint8_t> valid;  // [h*w * 9]
  int h = 0, w = 0;
};

template <typename T>
WindowedKeys<T> window_sample(const Tensor<T>& features) {
  if (features.shape().size() != 3) {
    throw DimensionError("window_sample: features must be [D,h,w], got " +
                         shape_str(features.shape()));
  }
  const int d = features.dim(0), h = features.dim(1), w = features.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<T> keys(plane * kWindowSlots * static_cast<std::size_t>(d), T(0));
  std::vector<std::uint8_t> valid(plane * kWindowSlots, 0);
  const T* src = features.value().data();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t q = static_cast<std::size_t>(y) * w + x;
      for (int k = 0; k < kWindowSlots; ++k) {
        const int ny = y + k / 3 - 1, nx = x + k % 3 - 1;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        valid[q * kWindowSlots + k] = 1;
        T* dst = keys.data() + (q * kWindowSlots + k) * static_cast<std::size_t>(d);
        const std::size_t np = static_cast<std::size_t>(ny) * w + nx;
        for (int c = 0; c < d; ++c) dst[c] = src[static_cast<std::size_t>(c) * plane + np];
      }
    }
  }
  WindowedKeys<T> out;
  out.keys = Tensor<T>::op(
      {h * w, kWindowSlots, d}, std::move(keys), {features},
      [d, h, w, plane](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        if (!pa[0]) return;
        auto& din = *pa[0];
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            const std::size_t q = static_cast<std::size_t>(y) * w + x;
            for (int k = 0; k < kWindowSlots; ++k) {
              const int ny = y + k / 3 - 1, nx = x + k % 3 - 1;
              if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
              const T* gs = g.data() + (q * kWindowSlots + k) * static_cast<std::size_t>(d);
              const std::size_t np = static_cast<std::size_t>(ny) * w + nx;
              for (int c = 0; c < d; ++c) din[static_cast<std::size_t>(c) * plane + np] += gs[c];
            }
          }
        }
      });
  out.valid = std::move(valid);
  out.h = h;
  out.w = w;
  return out;
}

// logits[q,k] = <query(:,q), keys[q,k,:]>
template <typename T>
Tensor<T> window_dot(const Tensor<T>& keys, const Tensor<T>& query_field) {
  const int hw = keys.dim(0), d = keys.dim(2);
  const int h = query_field.dim(1), w = query_field.dim(2);
  if (query_field.dim(0) != d || h * w != hw) {
    throw DimensionError("window_dot: keys " + shape_str(keys.shape()) + " vs query " +
                         shape_str(query_field.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(hw);
  std::vector<T> logits(plane * kWindowSlots, T(0));
  const T* kv = keys.value().data();
  const T* qv = query_field.value().data();
  for (std::size_t q = 0; q < plane; ++q) {
    for (int k = 0; k < kWindowSlots; ++k) {
      const T* key = kv + (q * kWindowSlots + k) * static_cast<std::size_t>(d);
      T acc = 0;
      for (int c = 0; c < d; ++c) acc += key[c] * qv[static_cast<std::size_t>(c) * plane + q];
      logits[q * kWindowSlots + k] = acc;
    }
  }
  auto kn = keys.node();
  auto qn = query_field.node();
  return Tensor<T>::op(
      {hw, kWindowSlots}, std::move(logits), {keys, query_field},
      [kn, qn, d, plane](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        for (std::size_t q = 0; q < plane; ++q) {
          for (int k = 0; k < kWindowSlots; ++k) {
            const T gv = g[q * kWindowSlots + k];
            if (gv == T(0)) continue;
            const std::size_t base = (q * kWindowSlots + k) * static_cast<std::size_t>(d);
            for (int c = 0; c < d; ++c) {
              if (pa[0]) (*pa[0])[base + c] += gv * qn->value[static_cast<std::size_t>(c) * plane + q];
              if (pa[1]) {
                (*pa[1])[static_cast<std::size_t>(c) * plane + q] += gv * kn->value[base + c];
              }
            }
          }
        }
      });
}

// out(:,q) = sum_k weights[q,k] * keys[q,k,:], emitted as a [D,h,w] field.
template <typename T>
Tensor<T> window_combine(const Tensor<T>& weights, const Tensor<T>& keys, int h, int w) {
  const int hw = keys.dim(0), d = keys.dim(2);
  if (weights.dim(0) != hw || weights.dim(1) != kWindowSlots || h * w != hw) {
    throw DimensionError("window_combine: weights " + shape_str(weights.shape()) + " vs keys " +
                         shape_str(keys.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(hw);
  std::vector<T> out(static_cast<std::size_t>(d) * plane, T(0));
  const T* wv = weights.value().data();
  const T* kv = keys.value().data();
  for (std::size_t q = 0; q < plane; ++q) {
    for (int k = 0; k < kWindowSlots; ++k) {
      const T wgt = wv[q * kWindowSlots + k];
      if (wgt == T(0)) continue;
      const T* key = kv + (q * kWindowSlots + k) * static_cast<std::size_t>(d);
      for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(c) * plane + q] += wgt * key[c];
    }
  }
  auto wn = weights.node();
  auto kn = keys.node();
  return Tensor<T>::op(
      {d, h, w}, std::move(out), {weights, keys},
      [wn, kn, d, plane](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        for (std::size_t q = 0; q < plane; ++q) {
          for (int k = 0; k < kWindowSlots; ++k) {
            const std::size_t base = (q * kWindowSlots + k) * static_cast<std::size_t>(d);
            if (pa[0]) {
              T acc = 0;
              for (int c = 0; c < d; ++c) {
                acc += g[static_cast<std::size_t>(c) * plane + q] * kn->value[base + c];
              }
              (*pa[0])[q * kWindowSlots + k] += acc;
            }
            if (pa[1]) {
              const T wgt = wn->value[q * kWindowSlots + k];
              if (wgt == T(0)) continue;
              for (int c = 0; c < d; ++c) {
                (*pa[1])[base + c] += wgt * g[static_cast<std::size_t>(c) * plane + q];
              }
            }
          }
        }
      });
}

// Additive mask: invalid slots are pushed to -1e30 so softmax assigns them
// exactly zero weight.
template <typename T>
Tensor<T> mask_invalid(const Tensor<T>& logits, const std::vector<std::uint8_t>& valid) {
  if (logits.value().size() != valid.size()) {
    throw DimensionError("mask_invalid: mask length mismatch");
  }
  std::vector<T> out = logits.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!valid[i]) out[i] = -T(1e30);
  }
  return Tensor<T>::op(logits.shape(), std::move(out), {logits},
                       [](const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
                         if (!pa[0]) return;
                         auto& d = *pa[0];
                         for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                       });
}

template <typename T>
struct AttentionWeights {
  Tensor<T> logits;   // raw dot products [h*w, 9]
  Tensor<T> weights;  // masked softmax of logits / sqrt(d)
  std::vector<std::uint8_t> valid;
  int h = 0, w = 0;
};

template <typename T>
struct CrossAttendResult {
  Tensor<T> aggregated;  // [D, h, w]
  AttentionWeights<T> attn;
};

template <typename T>
CrossAttendResult<T> cross_attend(const Tensor<T>& query_field, const Tensor<T>& kv_field) {
  check_same_shape(query_field, kv_field, "cross_attend");
  const int d = query_field.dim(0), h = query_field.dim(1), w = query_field.dim(2);
  auto windowed = window_sample(kv_field);
  auto logits = window_dot(windowed.keys, query_field);
  auto scaled = scale(logits, T(1) / std::sqrt(static_cast<T>(d)));
  auto weights = softmax(mask_invalid(scaled, windowed.valid), 1);
  CrossAttendResult<T> out;
  out.aggregated = window_combine(weights, windowed.keys, h, w);
  out.attn = {std::move(logits), std::move(weights), std::move(windowed.valid), h, w};
  return out;
}

// Differentiable gather: out[i] = weights[rows[i], slots[i]]. Index selection
// happens outside; the gathered values keep their gradient path (scatter-add
// on backward).
template <typename T>
Tensor<T> gather_slots(const Tensor<T>& weights, const std::vector<int>& rows,
                       const std::vector<int>& slots) {
  if (rows.size() != slots.size()) throw UsageError("gather_slots: index length mismatch");
  const int hw = weights.dim(0);
  std::vector<T> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= hw || slots[i] < 0 || slots[i] >= kWindowSlots) {
      throw UsageError("gather_slots: index out of range");
    }
    out[i] = weights.value()[static_cast<std::size_t>(rows[i]) * kWindowSlots +
                             static_cast<std::size_t>(slots[i])];
  }
  return Tensor<T>::op({static_cast<int>(rows.size())}, std::move(out), {weights},
                       [rows, slots](const std::vector<T>& g,
                                     const std::vector<std::vector<T>*>& pa) {
                         if (!pa[0]) return;
                         auto& d = *pa[0];
                         for (std::size_t i = 0; i < rows.size(); ++i) {
                           d[static_cast<std::size_t>(rows[i]) * kWindowSlots +
                             static_cast<std::size_t>(slots[i])] += g[i];
                         }
                       });
}

template <typename T>
struct ConsistencyVectors {
  Tensor<T> v_ir_to_rgb;        // V_{I-R}, [h*w]
  Tensor<T> v_rgb_to_ir;        // V_{R-I}, [h*w]
  std::vector<int> best_index;  // argmax slot per IR query
};

// For IR query i: pick the best RGB slot j* (ties -> lowest slot), read its
// weight, then read the reverse weight of i seen from neighbor j through the
// mirrored slot 8 - j*. Argmax is gradient-free; the gathered weights stay
// differentiable. `frozen` pins the slot choice (finite-difference checks).
template <typename T>
ConsistencyVectors<T> extract_consistency(const AttentionWeights<T>& attn_ir_rgb,
                                          const AttentionWeights<T>& attn_rgb_ir,
                                          const std::vector<int>* frozen = nullptr) {
  if (attn_ir_rgb.h != attn_rgb_ir.h || attn_ir_rgb.w != attn_rgb_ir.w) {
    throw DimensionError("extract_consistency: attention grids differ");
  }
  const int h = attn_ir_rgb.h, w = attn_ir_rgb.w;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<int> best(plane);
  std::vector<int> fwd_rows(plane), fwd_slots(plane);
  std::vector<int> rev_rows(plane), rev_slots(plane);
  const auto& wv = attn_ir_rgb.weights.value();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t q = static_cast<std::size_t>(y) * w + x;
      int arg;
      if (frozen) {
        arg = (*frozen)[q];
      } else {
        arg = -1;
        T bv = T(0);
        for (int k = 0; k < kWindowSlots; ++k) {
          if (!attn_ir_rgb.valid[q * kWindowSlots + k]) continue;
          const T v = wv[q * kWindowSlots + k];
          if (arg < 0 || v > bv) {
            arg = k;
            bv = v;
          }
        }
      }
      best[q] = arg;
      fwd_rows[q] = static_cast<int>(q);
      fwd_slots[q] = arg;
      const int ny = y + arg / 3 - 1, nx = x + arg % 3 - 1;
      rev_rows[q] = ny * w + nx;
      rev_slots[q] = kWindowSlots - 1 - arg;
    }
  }
  ConsistencyVectors<T> out;
  out.v_ir_to_rgb = gather_slots(attn_ir_rgb.weights, fwd_rows, fwd_slots);
  out.v_rgb_to_ir = gather_slots(attn_rgb_ir.weights, rev_rows, rev_slots);
  out.best_index = std::move(best);
  return out;
}

// L_sc: both vectors are normalized into distributions over positions with a
// softmax, then compared with KL divergence. Raw max-weights are not a
// distribution over positions, so the normalization makes Eq. 4 well-defined.
template <typename T>
Tensor<T> sc_loss(const ConsistencyVectors<T>& vectors) {
  if (vectors.v_ir_to_rgb.size() == 0) throw UsageError("sc_loss: empty consistency vectors");
  return kl_div(softmax(vectors.v_ir_to_rgb), softmax(vectors.v_rgb_to_ir));
}

template <typename T>
struct IsmOutput {
  Tensor<T> rgb_aggregated;  // implicitly aligned RGB features
  AttentionWeights<T> attn_ir_rgb;
  AttentionWeights<T> attn_rgb_ir;
  ConsistencyVectors<T> vectors;
  Tensor<T> loss;
};

template <typename T>
IsmOutput<T> ism_forward(const Tensor<T>& ir_field, const Tensor<T>& rgb_field) {
  IsmOutput<T> out;
  auto fwd = cross_attend(ir_field, rgb_field);
  auto rev = cross_attend(rgb_field, ir_field);
  out.rgb_aggregated = std::move(fwd.aggregated);
  out.attn_ir_rgb = std::move(fwd.attn);
  out.attn_rgb_ir = std::move(rev.attn);
  out.vectors = extract_consistency(out.attn_ir_rgb, out.attn_rgb_ir);
  out.loss = sc_loss(out.vectors);
  return out;
}

}  // namespace lpa

#pragma once

#include <cmath>
#include <vector>

#include "lpa/errors.hpp"
#include "lpa/ops.hpp"
#include "lpa/tensor.hpp"

namespace lpa {

// Explicit spatial alignment: similarity-gated feature enhancement, offset
// estimation from the concatenated streams, and offset-guided deformable
// convolution applied to the RGB stream (IR is the reference frame).

enum class GateMode { kMax, kMean };

// out(c,y,x) = features(c,y,x) * gate(y,x), gate reducing the category score
// channels to a single objectness map.
template <typename T>
Tensor<T> enhance(const Tensor<T>& features, const Tensor<T>& scores, GateMode mode) {
  if (features.shape().size() != 3 || scores.shape().size() != 3 ||
      features.dim(1) != scores.dim(1) || features.dim(2) != scores.dim(2)) {
    throw DimensionError("enhance: features " + shape_str(features.shape()) + " vs scores " +
                         shape_str(scores.shape()));
  }
  auto gate = mode == GateMode::kMax ? reduce_max(scores, 0) : reduce_mean(scores, 0);
  return channel_scale(features, gate);
}

// phi = Conv(ConCat(rgb, ir)): 3x3, pad 1, 2*K*K output channels holding
// (dy, dx) pairs per kernel tap, in feature-pixel units.
template <typename T>
Tensor<T> estimate_offsets(const Tensor<T>& rgb, const Tensor<T>& ir, const Tensor<T>& kernel,
                           const Tensor<T>& bias) {
  check_same_shape(rgb, ir, "estimate_offsets");
  return conv2d(concat<T>({rgb, ir}, 0), kernel, bias, 1, 1);
}

// Deformable 3x3 convolution, stride 1, pad 1. Each tap k at nominal
// displacement d_k samples the zero-padded input at p + d_k + phi_k(p) by
// bilinear interpolation, clamped to the padded extent. Sampling the padded
// map keeps the zero-offset case identical to conv2d at the borders while the
// operation stays total and differentiable for arbitrary offsets.
template <typename T>
Tensor<T> deform_conv(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& offsets) {
  if (input.shape().size() != 3 || kernel.shape().size() != 4) {
    throw DimensionError("deform_conv: input " + shape_str(input.shape()) + " kernel " +
                         shape_str(kernel.shape()));
  }
  const int Ci = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int Co = kernel.dim(0), K = kernel.dim(2);
  if (K != 3 || kernel.dim(3) != 3 || kernel.dim(1) != Ci) {
    throw DimensionError("deform_conv: kernel must be [Co,Ci,3,3] matching input, got " +
                         shape_str(kernel.shape()));
  }
  const int taps = K * K;
  if (offsets.shape().size() != 3 || offsets.dim(0) != 2 * taps || offsets.dim(1) != h ||
      offsets.dim(2) != w) {
    throw DimensionError("deform_conv: offsets " + shape_str(offsets.shape()) +
                         " must be [18," + std::to_string(h) + "," + std::to_string(w) + "]");
  }

  const int ph = h + 2, pw = w + 2;  // pad 1 ring of zeros
  const std::size_t pplane = static_cast<std::size_t>(ph) * pw;
  std::vector<T> padded(static_cast<std::size_t>(Ci) * pplane, T(0));
  for (int ci = 0; ci < Ci; ++ci) {
    for (int y = 0; y < h; ++y) {
      const T* src = input.value().data() + (static_cast<std::size_t>(ci) * h + y) * w;
      T* dst = padded.data() + static_cast<std::size_t>(ci) * pplane +
               static_cast<std::size_t>(y + 1) * pw + 1;
      std::copy(src, src + w, dst);
    }
  }

  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<detail::BilinearCoord<T>> coords(static_cast<std::size_t>(taps) * plane);
  for (int k = 0; k < taps; ++k) {
    const int dy = k / 3 - 1, dx = k % 3 - 1;
    const T* off_y = offsets.value().data() + static_cast<std::size_t>(2 * k) * plane;
    const T* off_x = offsets.value().data() + static_cast<std::size_t>(2 * k + 1) * plane;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        const T sy = static_cast<T>(y + dy + 1) + off_y[p];
        const T sx = static_cast<T>(x + dx + 1) + off_x[p];
        coords[static_cast<std::size_t>(k) * plane + p] = detail::bilinear_coord(sy, sx, ph, pw);
      }
    }
  }

  std::vector<T> sampled(static_cast<std::size_t>(Ci) * taps * plane);
  for (int ci = 0; ci < Ci; ++ci) {
    const T* src = padded.data() + static_cast<std::size_t>(ci) * pplane;
    for (int k = 0; k < taps; ++k) {
      T* dst = sampled.data() + (static_cast<std::size_t>(ci) * taps + k) * plane;
      const auto* cs = coords.data() + static_cast<std::size_t>(k) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = detail::bilinear_value(src, pw, cs[p]);
    }
  }

  std::vector<T> out(static_cast<std::size_t>(Co) * plane, T(0));
  const T* kw = kernel.value().data();
  for (int co = 0; co < Co; ++co) {
    T* oplane = out.data() + static_cast<std::size_t>(co) * plane;
    for (std::size_t p = 0; p < plane; ++p) {
      T acc = 0;
      for (int ci = 0; ci < Ci; ++ci) {
        const T* krow = kw + (static_cast<std::size_t>(co) * Ci + ci) * taps;
        const T* vrow = sampled.data() + static_cast<std::size_t>(ci) * taps * plane;
        for (int k = 0; k < taps; ++k) acc += vrow[static_cast<std::size_t>(k) * plane + p] * krow[k];
      }
      oplane[p] = acc;
    }
  }

  auto k_node = kernel.node();
  return Tensor<T>::op(
      {Co, h, w}, std::move(out), {input, kernel, offsets},
      [k_node, padded, sampled, coords, Ci, Co, h, w, ph, pw, taps, plane, pplane](
          const std::vector<T>& g, const std::vector<std::vector<T>*>& pa) {
        // dL/dV[ci,k,p] feeds the input scatter and the offset gradients.
        std::vector<T> dsampled;
        if (pa[0] || pa[2]) {
          dsampled.assign(sampled.size(), T(0));
          for (int co = 0; co < Co; ++co) {
            const T* gplane = g.data() + static_cast<std::size_t>(co) * plane;
            for (int ci = 0; ci < Ci; ++ci) {
              const T* krow = k_node->value.data() + (static_cast<std::size_t>(co) * Ci + ci) * taps;
              T* drow = dsampled.data() + static_cast<std::size_t>(ci) * taps * plane;
              for (int k = 0; k < taps; ++k) {
                const T kv = krow[k];
                T* dst = drow + static_cast<std::size_t>(k) * plane;
                for (std::size_t p = 0; p < plane; ++p) dst[p] += gplane[p] * kv;
              }
            }
          }
        }
        if (pa[1]) {
          auto& dk = *pa[1];
          for (int co = 0; co < Co; ++co) {
            const T* gplane = g.data() + static_cast<std::size_t>(co) * plane;
            for (int ci = 0; ci < Ci; ++ci) {
              T* krow = dk.data() + (static_cast<std::size_t>(co) * Ci + ci) * taps;
              const T* vrow = sampled.data() + static_cast<std::size_t>(ci) * taps * plane;
              for (int k = 0; k < taps; ++k) {
                T acc = 0;
                const T* vs = vrow + static_cast<std::size_t>(k) * plane;
                for (std::size_t p = 0; p < plane; ++p) acc += gplane[p] * vs[p];
                krow[k] += acc;
              }
            }
          }
        }
        if (pa[0] || pa[2]) {
          for (int k = 0; k < taps; ++k) {
            const auto* cs = coords.data() + static_cast<std::size_t>(k) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              const auto& c = cs[p];
              const T w00 = (T(1) - c.fy) * (T(1) - c.fx);
              const T w01 = (T(1) - c.fy) * c.fx;
              const T w10 = c.fy * (T(1) - c.fx);
              const T w11 = c.fy * c.fx;
              for (int ci = 0; ci < Ci; ++ci) {
                const T dv =
                    dsampled[(static_cast<std::size_t>(ci) * taps + k) * plane + p];
                if (dv == T(0)) continue;
                if (pa[0]) {
                  // scatter into the unpadded input; the zero ring absorbs
                  // out-of-range corners
                  auto& din = *pa[0];
                  auto put = [&](int yy, int xx, T wgt) {
                    const int iy = yy - 1, ix = xx - 1;
                    if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
                      din[(static_cast<std::size_t>(ci) * h + iy) * w + ix] += dv * wgt;
                    }
                  };
                  put(c.y0, c.x0, w00);
                  put(c.y0, c.x1, w01);
                  put(c.y1, c.x0, w10);
                  put(c.y1, c.x1, w11);
                }
                if (pa[2]) {
                  const T* src = padded.data() + static_cast<std::size_t>(ci) * pplane;
                  auto& doff = *pa[2];
                  if (c.dy_active) {
                    const T dvdy =
                        (T(1) - c.fx) * (src[c.y1 * pw + c.x0] - src[c.y0 * pw + c.x0]) +
                        c.fx * (src[c.y1 * pw + c.x1] - src[c.y0 * pw + c.x1]);
                    doff[static_cast<std::size_t>(2 * k) * plane + p] += dv * dvdy;
                  }
                  if (c.dx_active) {
                    const T dvdx =
                        (T(1) - c.fy) * (src[c.y0 * pw + c.x1] - src[c.y0 * pw + c.x0]) +
                        c.fy * (src[c.y1 * pw + c.x1] - src[c.y1 * pw + c.x0]);
                    doff[static_cast<std::size_t>(2 * k + 1) * plane + p] += dv * dvdx;
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
struct EsmParams {
  Tensor<T> offset_kernel;  // [18, 2*D_shared, 3, 3], zero-initialized
  Tensor<T> offset_bias;    // [18], zero-initialized
  Tensor<T> deform_kernel;  // [D_shared, D_shared, 3, 3]
};

template <typename T>
struct EsmOutput {
  Tensor<T> rgb_aligned;  // F^a_RGB
  Tensor<T> offsets;      // [18, h, w]; undefined in bypass mode
};

// Full explicit-alignment pass on the RGB stream. In bypass mode (stage 1)
// the RGB features pass through untouched and no ESM parameter joins the
// graph.
template <typename T>
EsmOutput<T> esm_forward(const Tensor<T>& rgb, const Tensor<T>& ir, const Tensor<T>& rgb_scores,
                         const Tensor<T>& ir_scores, const EsmParams<T>& params, GateMode mode,
                         bool bypass) {
  if (bypass) return {rgb, Tensor<T>()};
  auto rgb_enh = enhance(rgb, rgb_scores, mode);
  auto ir_enh = enhance(ir, ir_scores, mode);
  auto offsets = estimate_offsets(rgb_enh, ir_enh, params.offset_kernel, params.offset_bias);
  auto aligned = deform_conv(rgb, params.deform_kernel, offsets);
  return {aligned, offsets};
}

// Per-pixel mean (dy, dx) over the 9 taps, for offset-recovery evaluation.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> mean_offset(const Tensor<T>& offsets) {
  const int h = offsets.dim(1), w = offsets.dim(2);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<T> dy(plane, T(0)), dx(plane, T(0));
  for (int k = 0; k < 9; ++k) {
    for (std::size_t p = 0; p < plane; ++p) {
      dy[p] += offsets.value()[static_cast<std::size_t>(2 * k) * plane + p];
      dx[p] += offsets.value()[static_cast<std::size_t>(2 * k + 1) * plane + p];
    }
  }
  for (std::size_t p = 0; p < plane; ++p) {
    dy[p] /= T(9);
    dx[p] /= T(9);
  }
  return {Tensor<T>::from({h, w}, std::move(dy)), Tensor<T>::from({h, w}, std::move(dx))};
}

}  // namespace lpa

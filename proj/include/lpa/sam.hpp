#pragma once

#include <string>
#include <vector>

#include "lpa/errors.hpp"
#include "lpa/ops.hpp"
#include "lpa/semantics.hpp"
#include "lpa/tensor.hpp"

namespace lpa {

// Semantic alignment: three independent projections into a shared space,
// per-category similarity scores against text embeddings, and mask-supervised
// response maps.

// Visual projections are 1x1 convolutions [D_shared, D_vis, 1, 1]; the text
// projection is a dense [D_text, D_shared] map applied per row.
template <typename T>
struct SamParams {
  Tensor<T> w_rgb, b_rgb;
  Tensor<T> w_ir, b_ir;
  Tensor<T> w_text, b_text;
};

template <typename T>
Tensor<T> project_visual(const Tensor<T>& features, const Tensor<T>& w, const Tensor<T>& b) {
  return conv2d(features, w, b, 1, 0);
}

template <typename T>
Tensor<T> project_text(const Tensor<T>& embeddings, const Tensor<T>& w, const Tensor<T>& b) {
  return add_row_bias(matmul(embeddings, w), b);
}

// logit(i, y, x) = <semantic row i, visual column (y, x)>; scores are
// per-channel sigmoids so multiple categories can respond at one pixel.
template <typename T>
Tensor<T> similarity(const Tensor<T>& visual, const Tensor<T>& semantic) {
  if (visual.shape().size() != 3 || semantic.shape().size() != 2 ||
      visual.dim(0) != semantic.dim(1)) {
    throw DimensionError("similarity: visual " + shape_str(visual.shape()) + " vs semantic " +
                         shape_str(semantic.shape()));
  }
  const int d = visual.dim(0), h = visual.dim(1), w = visual.dim(2);
  const int n = semantic.dim(0);
  auto flat = reshape(visual, {d, h * w});
  auto logits = reshape(matmul(semantic, flat), {n, h, w});
  return sigmoid(logits);
}

template <typename T>
struct SimilarityMaps {
  Tensor<T> scores;    // [n, h, w], feature resolution
  Tensor<T> response;  // [n, H, W], upsampled to image resolution
};

template <typename T>
SimilarityMaps<T> similarity_maps(const Tensor<T>& visual, const Tensor<T>& semantic, int image_h,
                                  int image_w) {
  SimilarityMaps<T> maps;
  maps.scores = similarity(visual, semantic);
  maps.response = upsample_bilinear(maps.scores, image_h, image_w);
  return maps;
}

// L_sa: sum of the two mean BCE terms between response maps and binary masks.
template <typename T>
Tensor<T> sa_loss(const Tensor<T>& rgb_response, const Tensor<T>& ir_response,
                  const Tensor<T>& rgb_masks, const Tensor<T>& ir_masks) {
  check_same_shape(rgb_response, rgb_masks, "sa_loss(rgb)");
  check_same_shape(ir_response, ir_masks, "sa_loss(ir)");
  return add(bce_loss(rgb_response, rgb_masks), bce_loss(ir_response, ir_masks));
}

}  // namespace lpa

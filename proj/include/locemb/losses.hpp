#pragma once

// Training objectives. Box and mask overlap terms are used in their loss
// form (1 - GIoU, 1 - soft IoU), so every objective is zero on an exact match.

#include <functional>
#include <span>
#include <vector>

#include "locemb/geometry.hpp"
#include "locemb/ops.hpp"

namespace locemb::loss {

struct LossConfig {
  double alpha = 0.4;  // GIoU weight in the detection loss
  double beta = 20.0;  // focal weight in the segmentation loss
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double cycle_box_weight = 1.0;
  double cycle_embedding_weight = 1.0;
  double dice_eps = 1e-6;
  double min_box_side = 1e-6;  // predicted boxes are widened to at least this
  double focal_prob_eps = 1e-6;

  void validate() const;
};

template <class T>
using Tensor = ad::BasicTensor<T>;
template <class T>
using Mapping = std::function<Tensor<T>(const Tensor<T>&)>;

// Constant [n x 4] tensor of box corners.
template <class T>
Tensor<T> boxes_tensor(std::span<const geom::BBox> boxes);

// mean over rows of 1 - GIoU(pred_i, gt_i); pred is [n x 4] with ordered
// corners.
template <class T>
Tensor<T> giou_loss(const Tensor<T>& pred, std::span<const geom::BBox> gt,
                    const LossConfig& cfg = {});

// L1(b, b_gt) + alpha * (1 - GIoU(b, b_gt))
template <class T>
Tensor<T> l_det(const Tensor<T>& pred, std::span<const geom::BBox> gt, const LossConfig& cfg = {});

// (1 - softIoU) + Dice + beta * Focal, averaged over masks. pred is [n x h x w]
// (or [h x w] for a single mask) of probabilities.
template <class T>
Tensor<T> l_seg(const Tensor<T>& pred, std::span<const geom::MaskGrid> gt,
                const LossConfig& cfg = {});

// L1(b, F(G(b))) + L2(t, G(F(t))). t may be undefined (no hidden states), in
// which case only the box term is returned.
template <class T>
Tensor<T> l_cyc(const Tensor<T>& boxes, const Tensor<T>& hidden, const Mapping<T>& box_decoder,
                const Mapping<T>& loc_encoder, const LossConfig& cfg = {});

template <class T>
Tensor<T> l_text(const Tensor<T>& logits, std::span<const int> targets,
                 std::span<const std::uint8_t> mask);

template <class T>
struct StageParts {
  Tensor<T> text;
  Tensor<T> det;
  Tensor<T> cyc;
  Tensor<T> seg;
};

// Stages 1 and 2: text + det + cyc. Stage 3: seg.
template <class T>
Tensor<T> stage_loss(int stage, const StageParts<T>& parts);

}  // namespace locemb::loss

#include "locemb/losses.hpp"

#include <algorithm>
#include <cmath>

namespace locemb::loss {

void LossConfig::validate() const {
  if (!(alpha > 0) || !(beta > 0))
    fail(ErrorCode::InvalidArgument, "loss weights alpha and beta must be positive");
}

template <class T>
Tensor<T> boxes_tensor(std::span<const geom::BBox> boxes) {
  if (boxes.empty()) fail(ErrorCode::ShapeMismatch, "boxes_tensor: no boxes");
  std::vector<T> v;
  v.reserve(boxes.size() * 4);
  for (const auto& b : boxes)
    for (double c : b.as_array()) v.push_back(static_cast<T>(c));
  return Tensor<T>::from({static_cast<int>(boxes.size()), 4}, std::move(v));
}

namespace {

struct GiouGrad {
  double loss;
  double d[4];  // d loss / d (x0, y0, x1, y1) of the raw prediction
};

// 1 - GIoU for one prediction, with the prediction widened to min_side.
GiouGrad giou_single(const double p[4], const geom::BBox& g, double min_side) {
  // Widening: px1 = max(x1, x0 + min_side); its derivative routes to x1 or x0.
  const bool wide_x = p[2] >= p[0] + min_side;
  const bool wide_y = p[3] >= p[1] + min_side;
  const double px0 = p[0], py0 = p[1];
  const double px1 = wide_x ? p[2] : p[0] + min_side;
  const double py1 = wide_y ? p[3] : p[1] + min_side;

  const double pw = px1 - px0, ph = py1 - py0;
  const double ap = pw * ph;
  const double ag = g.area();

  const double ix0 = std::max(px0, g.x0), ix1 = std::min(px1, g.x1);
  const double iy0 = std::max(py0, g.y0), iy1 = std::min(py1, g.y1);
  const double iw = std::max(ix1 - ix0, 0.0), ih = std::max(iy1 - iy0, 0.0);
  const double inter = iw * ih;
  const double uni = ap + ag - inter;

  const double ex0 = std::min(px0, g.x0), ex1 = std::max(px1, g.x1);
  const double ey0 = std::min(py0, g.y0), ey1 = std::max(py1, g.y1);
  const double ew = ex1 - ex0, eh = ey1 - ey0;
  const double encl = ew * eh;

  GiouGrad out{};
  // loss = 2 - inter/uni - uni/encl
  out.loss = 2.0 - inter / uni - uni / encl;

  const double d_uni = inter / (uni * uni) - 1.0 / encl;
  const double d_encl = uni / (encl * encl);
  const double d_inter = -1.0 / uni - d_uni;
  const double d_ap = d_uni;

  double dpx0 = 0, dpx1 = 0, dpy0 = 0, dpy1 = 0;
  // area of the prediction
  dpx1 += d_ap * ph;
  dpx0 -= d_ap * ph;
  dpy1 += d_ap * pw;
  dpy0 -= d_ap * pw;
  // intersection
  if (iw > 0 && ih > 0) {
    const double diw = d_inter * ih, dih = d_inter * iw;
    if (px1 <= g.x1) dpx1 += diw;
    if (px0 >= g.x0) dpx0 -= diw;
    if (py1 <= g.y1) dpy1 += dih;
    if (py0 >= g.y0) dpy0 -= dih;
  }
  // enclosing box
  const double dew = d_encl * eh, deh = d_encl * ew;
  if (px1 > g.x1) dpx1 += dew;
  if (px0 < g.x0) dpx0 -= dew;
  if (py1 > g.y1) dpy1 += deh;
  if (py0 < g.y0) dpy0 -= deh;

  out.d[0] = dpx0 + (wide_x ? 0.0 : dpx1);
  out.d[2] = wide_x ? dpx1 : 0.0;
  out.d[1] = dpy0 + (wide_y ? 0.0 : dpy1);
  out.d[3] = wide_y ? dpy1 : 0.0;
  return out;
}

void check_gt(std::span<const geom::BBox> gt) {
  for (const auto& g : gt)
    if (!(g.area() > 0.0))
      fail(ErrorCode::DegenerateBox, "ground-truth box has zero area");
}

}  // namespace

template <class T>
Tensor<T> giou_loss(const Tensor<T>& pred, std::span<const geom::BBox> gt, const LossConfig& cfg) {
  if (pred.rank() != 2 || pred.dim(1) != 4 || pred.dim(0) != static_cast<int>(gt.size()))
    fail(ErrorCode::ShapeMismatch, "giou_loss: prediction " + ad::shape_str(pred.shape()) +
                                       " does not match " + std::to_string(gt.size()) + " boxes");
  check_gt(gt);
  const int n = pred.dim(0);
  const bool track = ad::grad_enabled() && pred.requires_grad();
  std::vector<double> grads(static_cast<std::size_t>(n) * 4);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double p[4];
    for (int c = 0; c < 4; ++c) p[c] = pred.data()[i * 4 + c];
    const auto r = giou_single(p, gt[i], cfg.min_box_side);
    total += r.loss;
    for (int c = 0; c < 4; ++c) grads[i * 4 + c] = r.d[c] / n;
  }
  auto out = Tensor<T>::scalar(static_cast<T>(total / n), track);
  if (track) {
    ad::active_tape<T>().record("giou_loss", {pred}, out, [pred, out, grads]() mutable {
      const double g = out.grad()[0];
      auto gp = pred.grad();
      for (std::size_t i = 0; i < grads.size(); ++i) gp[i] += static_cast<T>(g * grads[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> l_det(const Tensor<T>& pred, std::span<const geom::BBox> gt, const LossConfig& cfg) {
  auto l1 = ad::l1_distance(pred, boxes_tensor<T>(gt));
  return ad::add(l1, ad::scale(giou_loss(pred, gt, cfg), cfg.alpha));
}

template <class T>
Tensor<T> l_seg(const Tensor<T>& pred, std::span<const geom::MaskGrid> gt, const LossConfig& cfg) {
  int n, h, w;
  if (pred.rank() == 2) {
    n = 1;
    h = pred.dim(0);
    w = pred.dim(1);
  } else if (pred.rank() == 3) {
    n = pred.dim(0);
    h = pred.dim(1);
    w = pred.dim(2);
  } else {
    fail(ErrorCode::ShapeMismatch, "l_seg: expected [h x w] or [n x h x w]");
  }
  if (static_cast<int>(gt.size()) != n)
    fail(ErrorCode::ShapeMismatch, "l_seg: mask count mismatch");
  for (const auto& g : gt)
    if (g.height != h || g.width != w)
      fail(ErrorCode::ShapeMismatch, "l_seg: mask shape mismatch");

  const std::size_t cells = static_cast<std::size_t>(h) * w;
  const double ga = cfg.focal_gamma, fa = cfg.focal_alpha;
  const double pe = cfg.focal_prob_eps;
  const bool track = ad::grad_enabled() && pred.requires_grad();
  std::vector<double> grads(track ? cells * n : 0);
  double total = 0.0;

  for (int k = 0; k < n; ++k) {
    const T* m = pred.data().data() + k * cells;
    const float* g = gt[k].values.data();
    double smin = 0, smax = 0, inter = 0, sm = 0, sg = 0, focal = 0;
    for (std::size_t i = 0; i < cells; ++i) {
      const double mi = m[i], gi = g[i];
      smin += std::min(mi, gi);
      smax += std::max(mi, gi);
      inter += mi * gi;
      sm += mi;
      sg += gi;
      const double p = std::clamp(mi, pe, 1.0 - pe);
      focal += -fa * gi * std::pow(1.0 - p, ga) * std::log(p) -
               (1.0 - fa) * (1.0 - gi) * std::pow(p, ga) * std::log(1.0 - p);
    }
    const double iou_den = smax + 1e-6;
    const double dice_den = sm + sg + cfg.dice_eps;
    const double l_iou = 1.0 - smin / iou_den;
    const double l_dice = 1.0 - 2.0 * inter / dice_den;
    const double l_focal = focal / static_cast<double>(cells);
    total += l_iou + l_dice + cfg.beta * l_focal;

    if (track) {
      for (std::size_t i = 0; i < cells; ++i) {
        const double mi = m[i], gi = g[i];
        const double dmin = mi < gi ? 1.0 : 0.0;
        const double dmax = mi < gi ? 0.0 : 1.0;
        double d = -(dmin / iou_den - smin * dmax / (iou_den * iou_den));
        d += -(2.0 * gi / dice_den - 2.0 * inter / (dice_den * dice_den));
        if (mi > pe && mi < 1.0 - pe) {
          const double p = mi;
          const double dpos = -fa * gi *
                              (-ga * std::pow(1.0 - p, ga - 1.0) * std::log(p) +
                               std::pow(1.0 - p, ga) / p);
          const double dneg = -(1.0 - fa) * (1.0 - gi) *
                              (ga * std::pow(p, ga - 1.0) * std::log(1.0 - p) -
                               std::pow(p, ga) / (1.0 - p));
          d += cfg.beta * (dpos + dneg) / static_cast<double>(cells);
        }
        grads[k * cells + i] = d / n;
      }
    }
  }
  auto out = Tensor<T>::scalar(static_cast<T>(total / n), track);
  if (track) {
    ad::active_tape<T>().record("l_seg", {pred}, out, [pred, out, grads]() mutable {
      const double g = out.grad()[0];
      auto gp = pred.grad();
      for (std::size_t i = 0; i < grads.size(); ++i) gp[i] += static_cast<T>(g * grads[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> l_cyc(const Tensor<T>& boxes, const Tensor<T>& hidden, const Mapping<T>& box_decoder,
                const Mapping<T>& loc_encoder, const LossConfig& cfg) {
  auto box_term = ad::scale(ad::l1_distance(box_decoder(loc_encoder(boxes)), boxes),
                            cfg.cycle_box_weight);
  if (!hidden.defined()) return box_term;
  auto emb_term = ad::scale(ad::squared_error(hidden, loc_encoder(box_decoder(hidden))),
                            cfg.cycle_embedding_weight);
  return ad::add(box_term, emb_term);
}

template <class T>
Tensor<T> l_text(const Tensor<T>& logits, std::span<const int> targets,
                 std::span<const std::uint8_t> mask) {
  return ad::cross_entropy(logits, targets, mask);
}

template <class T>
Tensor<T> stage_loss(int stage, const StageParts<T>& parts) {
  auto need = [](const Tensor<T>& t, const char* name) {
    if (!t.defined()) fail(ErrorCode::MissingComponent, std::string("stage loss needs ") + name);
  };
  switch (stage) {
    case 1:
    case 2:
      need(parts.text, "L_text");
      need(parts.det, "L_det");
      need(parts.cyc, "L_cyc");
      return ad::add(ad::add(parts.text, parts.det), parts.cyc);
    case 3:
      need(parts.seg, "L_seg");
      return parts.seg;
    default:
      fail(ErrorCode::InvalidArgument, "stage must be 1, 2 or 3");
  }
}

#define LOCEMB_INSTANTIATE_LOSSES(T)                                                              \
  template Tensor<T> boxes_tensor<T>(std::span<const geom::BBox>);                               \
  template Tensor<T> giou_loss<T>(const Tensor<T>&, std::span<const geom::BBox>,                 \
                                  const LossConfig&);                                            \
  template Tensor<T> l_det<T>(const Tensor<T>&, std::span<const geom::BBox>, const LossConfig&); \
  template Tensor<T> l_seg<T>(const Tensor<T>&, std::span<const geom::MaskGrid>,                 \
                              const LossConfig&);                                                \
  template Tensor<T> l_cyc<T>(const Tensor<T>&, const Tensor<T>&, const Mapping<T>&,             \
                              const Mapping<T>&, const LossConfig&);                             \
  template Tensor<T> l_text<T>(const Tensor<T>&, std::span<const int>,                           \
                               std::span<const std::uint8_t>);                                   \
  template Tensor<T> stage_loss<T>(int, const StageParts<T>&);

LOCEMB_INSTANTIATE_LOSSES(float)
LOCEMB_INSTANTIATE_LOSSES(double)

#undef LOCEMB_INSTANTIATE_LOSSES

}  // namespace locemb::loss

#pragma once

#include <vector>

#include "roadinv/autodiff.hpp"
#include "roadinv/geometry.hpp"
#include "roadinv/tensor.hpp"

namespace roadinv {

// Per-term weights of the sum-of-squares objective. The plain objective is
// the unweighted sum, so everything defaults to 1.
struct LossWeights {
  double coord = 1.0;
  double obj = 1.0;
  double noobj = 1.0;
  double cat = 1.0;

  bool valid() const { return coord >= 0 && obj >= 0 && noobj >= 0 && cat >= 0; }
};

// Index of the predicted box with the highest IOU against the ground truth.
// Ties (including the all-zero case) resolve to the lowest index.
inline int assign_responsible(const std::vector<BBox>& cell_pred_boxes, const BBox& gt) {
  if (cell_pred_boxes.empty()) throw ShapeError("assign_responsible: need at least one box");
  int best = 0;
  double best_iou = iou(cell_pred_boxes[0], gt);
  for (std::size_t b = 1; b < cell_pred_boxes.size(); ++b) {
    const double v = iou(cell_pred_boxes[b], gt);
    if (v > best_iou) {
      best_iou = v;
      best = static_cast<int>(b);
    }
  }
  return best;
}

namespace detail {

// IOU between a predicted box (decoded from slot values) and a constant gt
// box, together with the partial derivatives w.r.t. the four slot values
// (x,y cell offsets; w,h image fractions). Away from the min/max kinks this
// is the exact derivative of iou().
struct IouWithGrad {
  double value = 0.0;
  double dx = 0.0, dy = 0.0, dw = 0.0, dh = 0.0;
};

inline IouWithGrad iou_slot_grad(const BBox& pred, const BBox& gt, int grid_s) {
  IouWithGrad r;
  const double pl = pred.x1(), pr = pred.x2(), pt = pred.y1(), pb = pred.y2();
  const double gl = gt.x1(), gr = gt.x2(), gtp = gt.y1(), gb = gt.y2();
  const double iw = std::min(pr, gr) - std::max(pl, gl);
  const double ih = std::min(pb, gb) - std::max(pt, gtp);
  if (iw <= 0.0 || ih <= 0.0) return r;  // disjoint: flat zero
  const double inter = iw * ih;
  const double uni = pred.area() + gt.area() - inter;
  if (uni <= 0.0) return r;
  r.value = inter / uni;

  // d iw / d{cx,w}: the pred edge is active where it is the binding one
  const double right_active = pr < gr ? 1.0 : 0.0;
  const double left_active = pl > gl ? 1.0 : 0.0;
  const double top_active = pt > gtp ? 1.0 : 0.0;
  const double bottom_active = pb < gb ? 1.0 : 0.0;
  const double diw_dcx = right_active - left_active;
  const double diw_dw = 0.5 * (right_active + left_active);
  const double dih_dcy = bottom_active - top_active;
  const double dih_dh = 0.5 * (bottom_active + top_active);

  const double u2 = uni * uni;
  auto dv = [&](double dI, double dA) { return (dI * (uni + inter) - inter * dA) / u2; };
  const double dv_dcx = dv(ih * diw_dcx, 0.0);
  const double dv_dcy = dv(iw * dih_dcy, 0.0);
  const double dv_dw = dv(ih * diw_dw, pred.h);
  const double dv_dh = dv(iw * dih_dh, pred.w);

  // slot chain: cx = (col + x)/S, w is the slot itself
  r.dx = dv_dcx / grid_s;
  r.dy = dv_dcy / grid_s;
  r.dw = dv_dw;
  r.dh = dv_dh;
  return r;
}

}  // namespace detail

// Sum-of-squares detector objective over one prediction/target pair.
//
// Object cells (target confidence 1): squared slot errors on the responsible
// box's x,y,w,h; squared confidence error against Pr(Object)*IOU where the
// IOU factor is a function of the predicted box (differentiated through);
// squared error on the category vector. Remaining boxes of the cell and all
// boxes of empty cells contribute their confidence against 0.
//
// When dpred is non-null the full analytic gradient w.r.t. pred is
// accumulated into it.
inline double yolo_loss_value(const Tensor& pred, const Tensor& target, const GridSpec& grid,
                              const LossWeights& weights, Tensor* dpred = nullptr) {
  if (!grid.valid()) throw ShapeError("yolo_loss: invalid grid");
  if (!weights.valid()) throw ShapeError("yolo_loss: negative loss weight");
  if (pred.size() != grid.output_len() || target.size() != grid.output_len())
    throw ShapeError("yolo_loss: tensors must have length " + std::to_string(grid.output_len()) +
                     ", got pred " + std::to_string(pred.size()) + ", target " +
                     std::to_string(target.size()));
  double loss = 0.0;
  for (int row = 0; row < grid.s; ++row) {
    for (int col = 0; col < grid.s; ++col) {
      const int base = grid.cell_base(row, col);
      const double pr_object = target[base + 4];
      if (pr_object <= 0.5) {
        for (int b = 0; b < grid.b; ++b) {
          const double pc = pred[base + 5 * b + 4];
          loss += weights.noobj * pc * pc;
          if (dpred) (*dpred)[base + 5 * b + 4] += 2.0 * weights.noobj * pc;
        }
        continue;
      }

      BBox gt;
      gt.cx = (col + target[base + 0]) / grid.s;
      gt.cy = (row + target[base + 1]) / grid.s;
      gt.w = target[base + 2];
      gt.h = target[base + 3];

      int rb = 0;
      double best_iou = -1.0;
      for (int b = 0; b < grid.b; ++b) {
        const double v = iou(decode_cell_box(pred, grid, row, col, b), gt);
        if (v > best_iou) {
          best_iou = v;
          rb = b;
        }
      }

      for (int b = 0; b < grid.b; ++b) {
        const int bb = base + 5 * b;
        if (b != rb) {
          const double pc = pred[bb + 4];
          loss += weights.noobj * pc * pc;
          if (dpred) (*dpred)[bb + 4] += 2.0 * weights.noobj * pc;
          continue;
        }
        for (int i = 0; i < 4; ++i) {
          const double e = pred[bb + i] - target[base + i];
          loss += weights.coord * e * e;
          if (dpred) (*dpred)[bb + i] += 2.0 * weights.coord * e;
        }
        const BBox pbox = decode_cell_box(pred, grid, row, col, b);
        const detail::IouWithGrad ig = detail::iou_slot_grad(pbox, gt, grid.s);
        const double conf_target = pr_object * ig.value;
        const double e = pred[bb + 4] - conf_target;
        loss += weights.obj * e * e;
        if (dpred) {
          (*dpred)[bb + 4] += 2.0 * weights.obj * e;
          const double k = -2.0 * weights.obj * e * pr_object;
          (*dpred)[bb + 0] += k * ig.dx;
          (*dpred)[bb + 1] += k * ig.dy;
          (*dpred)[bb + 2] += k * ig.dw;
          (*dpred)[bb + 3] += k * ig.dh;
        }
      }

      for (int c = 0; c < grid.c; ++c) {
        const int ci = base + 5 * grid.b + c;
        const double e = pred[ci] - target[ci];
        loss += weights.cat * e * e;
        if (dpred) (*dpred)[ci] += 2.0 * weights.cat * e;
      }
    }
  }
  return loss;
}

// Tape node wrapping yolo_loss_value; target is a constant.
inline Var yolo_loss(Tape& tape, Var pred, Tensor target, const GridSpec& grid,
                     const LossWeights& weights) {
  const double value = yolo_loss_value(tape.value(pred), target, grid, weights);
  const int a = pred.id;
  auto tgt = std::make_shared<Tensor>(std::move(target));
  return tape.custom({a}, Tensor::scalar(value), [a, tgt, grid, weights](Tape& t) {
    const double dy = t.grad_of_current()[0];
    Tensor dpred(t.value_at(a).shape());
    yolo_loss_value(t.value_at(a), *tgt, grid, weights, &dpred);
    Tensor& dst = t.grad_of(a);
    for (std::int64_t i = 0; i < dpred.size(); ++i) dst[i] += dy * dpred[i];
  });
}

}  // namespace roadinv

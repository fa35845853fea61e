#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "roadinv/tensor.hpp"

namespace roadinv {

// Axis-aligned box, center + extents, all as fractions of the image side.
struct BBox {
  double cx = 0, cy = 0, w = 0, h = 0;

  double x1() const { return cx - 0.5 * w; }
  double x2() const { return cx + 0.5 * w; }
  double y1() const { return cy - 0.5 * h; }
  double y2() const { return cy + 0.5 * h; }
  double area() const { return w * h; }

  bool valid() const {
    if (!(cx >= 0.0 && cx <= 1.0 && cy >= 0.0 && cy <= 1.0)) return false;
    if (!(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0)) return false;
    // clipped-to-image area must be positive
    const double cw = std::min(1.0, x2()) - std::max(0.0, x1());
    const double ch = std::min(1.0, y2()) - std::max(0.0, y1());
    return cw > 0.0 && ch > 0.0;
  }
};

// Detector head shape: S x S cells, B boxes per cell, C categories.
struct GridSpec {
  int s = 7;
  int b = 2;
  int c = 3;

  bool valid() const { return s >= 1 && b >= 1 && c >= 1; }
  int cell_stride() const { return 5 * b + c; }
  int output_len() const { return s * s * cell_stride(); }
  // layout per cell: b blocks of (x,y,w,h,conf), then c category slots
  int cell_base(int row, int col) const { return (row * s + col) * cell_stride(); }
};

struct Detection {
  BBox box;
  double confidence = 0;
  int category = 0;
  std::vector<double> category_probs;
};

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double iy = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Target layout produced from ground truth. One object per cell; when two
// ground truths land in the same cell the larger-area one wins.
struct EncodeResult {
  Tensor target;
  int collisions = 0;  // ground truths displaced by the one-object-per-cell rule
};

inline EncodeResult encode_targets(const std::vector<std::pair<BBox, int>>& gts,
                                   const GridSpec& grid) {
  if (!grid.valid()) throw ShapeError("encode_targets: invalid grid");
  EncodeResult res;
  res.target = Tensor({grid.output_len()});
  std::vector<double> owner_area(static_cast<std::size_t>(grid.s) * grid.s, -1.0);

  for (const auto& [box, category] : gts) {
    if (!box.valid()) throw ShapeError("encode_targets: invalid ground-truth box");
    if (category < 0 || category >= grid.c)
      throw ShapeError("encode_targets: category out of range");
    const int col = std::min(grid.s - 1, static_cast<int>(box.cx * grid.s));
    const int row = std::min(grid.s - 1, static_cast<int>(box.cy * grid.s));
    const std::size_t cell = static_cast<std::size_t>(row) * grid.s + col;
    if (owner_area[cell] >= 0.0) {
      ++res.collisions;
      if (box.area() <= owner_area[cell]) continue;
    }
    owner_area[cell] = box.area();
    const int base = grid.cell_base(row, col);
    // clear the cell before writing (a displaced smaller gt may have set it)
    for (int i = 0; i < grid.cell_stride(); ++i) res.target[base + i] = 0.0;
    res.target[base + 0] = box.cx * grid.s - col;
    res.target[base + 1] = box.cy * grid.s - row;
    res.target[base + 2] = box.w;
    res.target[base + 3] = box.h;
    res.target[base + 4] = 1.0;  // Pr(Object)
    res.target[base + 5 * grid.b + category] = 1.0;
  }
  return res;
}

// Reads one cell's b-th box as an absolute-coordinate BBox.
inline BBox decode_cell_box(const Tensor& out, const GridSpec& grid, int row, int col, int b) {
  const int base = grid.cell_base(row, col) + 5 * b;
  BBox box;
  box.cx = (col + out[base + 0]) / grid.s;
  box.cy = (row + out[base + 1]) / grid.s;
  box.w = out[base + 2];
  box.h = out[base + 3];
  return box;
}

inline std::vector<Detection> decode_predictions(const Tensor& output, const GridSpec& grid,
                                                 double conf_threshold) {
  if (!grid.valid()) throw ShapeError("decode_predictions: invalid grid");
  if (output.size() != grid.output_len())
    throw ShapeError("decode_predictions: output length " + std::to_string(output.size()) +
                     " does not match grid " + std::to_string(grid.output_len()));
  std::vector<Detection> dets;
  for (int row = 0; row < grid.s; ++row) {
    for (int col = 0; col < grid.s; ++col) {
      const int base = grid.cell_base(row, col);
      for (int b = 0; b < grid.b; ++b) {
        const double conf = output[base + 5 * b + 4];
        if (conf < conf_threshold) continue;
        Detection d;
        d.box = decode_cell_box(output, grid, row, col, b);
        d.box.cx = std::clamp(d.box.cx, 0.0, 1.0);
        d.box.cy = std::clamp(d.box.cy, 0.0, 1.0);
        d.box.w = std::clamp(d.box.w, 0.0, 1.0);
        d.box.h = std::clamp(d.box.h, 0.0, 1.0);
        d.confidence = conf;
        d.category_probs.resize(static_cast<std::size_t>(grid.c));
        int best = 0;
        for (int c = 0; c < grid.c; ++c) {
          d.category_probs[static_cast<std::size_t>(c)] = output[base + 5 * grid.b + c];
          if (d.category_probs[static_cast<std::size_t>(c)] >
              d.category_probs[static_cast<std::size_t>(best)])
            best = c;
        }
        d.category = best;
        dets.push_back(std::move(d));
      }
    }
  }
  return dets;
}

// Greedy per-category suppression. Ties in confidence keep the earlier
// input index; survivors come back sorted by confidence descending.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0))
    throw ShapeError("nms: iou_threshold must be in [0,1]");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  std::vector<Detection> kept;
  for (std::size_t idx : order) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (k.category != dets[idx].category) continue;
      if (iou(k.box, dets[idx].box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[idx]);
  }
  return kept;
}

}  // namespace roadinv

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "roadinv/data.hpp"
#include "roadinv/geometry.hpp"

namespace roadinv {

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SeverityHistogram {
  std::array<std::int64_t, 3> counts{0, 0, 0};
  std::array<double, 3> densities{0.0, 0.0, 0.0};
  bool empty = true;

  std::int64_t total() const { return counts[0] + counts[1] + counts[2]; }
};

inline SeverityHistogram severity_distribution(const std::vector<int>& categories) {
  SeverityHistogram h;
  for (int c : categories) {
    if (c < 0 || c > 2) throw EvalError("severity_distribution: category out of range");
    ++h.counts[static_cast<std::size_t>(c)];
  }
  const std::int64_t total = h.total();
  if (total > 0) {
    h.empty = false;
    for (int i = 0; i < 3; ++i)
      h.densities[static_cast<std::size_t>(i)] =
          static_cast<double>(h.counts[static_cast<std::size_t>(i)]) / static_cast<double>(total);
  }
  return h;
}

inline SeverityHistogram severity_distribution(const std::vector<Detection>& dets) {
  std::vector<int> cats;
  cats.reserve(dets.size());
  for (const Detection& d : dets) cats.push_back(d.category);
  return severity_distribution(cats);
}

inline SeverityHistogram severity_distribution(const std::vector<LabelRecord>& labels) {
  std::vector<int> cats;
  cats.reserve(labels.size());
  for (const LabelRecord& l : labels) cats.push_back(l.category);
  return severity_distribution(cats);
}

// Mean best-match IOU over all ground truths. Matching is greedy one-to-one
// in descending IOU order within each image; ground truths left unmatched
// (or matched at zero overlap) contribute 0. Extra predictions are ignored.
inline double mean_test_iou(const std::vector<std::vector<Detection>>& predictions,
                            const std::vector<std::vector<LabelRecord>>& ground_truths) {
  if (predictions.size() != ground_truths.size())
    throw EvalError("mean_test_iou: prediction and ground-truth image counts differ");
  std::int64_t gt_total = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < ground_truths.size(); ++i) {
    const auto& gts = ground_truths[i];
    const auto& preds = predictions[i];
    gt_total += static_cast<std::int64_t>(gts.size());
    if (gts.empty() || preds.empty()) continue;

    struct Pair {
      double v;
      std::size_t g, p;
    };
    std::vector<Pair> pairs;
    for (std::size_t g = 0; g < gts.size(); ++g)
      for (std::size_t p = 0; p < preds.size(); ++p) {
        const double v = iou(gts[g].box, preds[p].box);
        if (v > 0.0) pairs.push_back({v, g, p});
      }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
      if (a.v != b.v) return a.v > b.v;
      if (a.g != b.g) return a.g < b.g;
      return a.p < b.p;
    });
    std::vector<bool> g_used(gts.size(), false), p_used(preds.size(), false);
    for (const Pair& pr : pairs) {
      if (g_used[pr.g] || p_used[pr.p]) continue;
      g_used[pr.g] = true;
      p_used[pr.p] = true;
      sum += pr.v;
    }
  }
  if (gt_total == 0) throw EvalError("mean_test_iou: undefined, no ground truths");
  return sum / static_cast<double>(gt_total);
}

}  // namespace roadinv

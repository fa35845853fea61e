#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "roadinv/data.hpp"
#include "roadinv/rng.hpp"

namespace roadinv {

struct PlacementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Procedural nadir road scene: gray asphalt noise, an optional lane marking,
// and dark ragged ellipses standing in for potholes. Severity is tied to
// rendered size and darkness so it stays learnable and checkable:
// the radius and darkness ranges are split into three bands, severity 0
// taking the smallest/brightest band and severity 2 the largest/darkest.
struct SyntheticSceneSpec {
  int image_side = 112;
  int count_min = 1, count_max = 4;
  std::array<double, 3> severity_mix{1.0 / 3, 1.0 / 3, 1.0 / 3};

  // background texture
  double gray_mean = 0.52;
  double gray_noise = 0.09;  // uniform half-range, clamped to [0.40, 0.70]
  double lane_marking_prob = 0.35;

  // pothole shape: semi-major axis as a fraction of the image side
  double radius_frac_min = 0.045, radius_frac_max = 0.16;
  double ecc_min = 0.55, ecc_max = 1.0;
  // pothole pixel value (lower = darker = worse)
  double darkness_min = 0.05, darkness_max = 0.34;

  // separable mode: pairwise disjoint boxes at least one grid cell apart
  bool separable = false;
  int grid_s = 7;

  bool valid() const {
    if (image_side < 8 || count_min < 0 || count_max < count_min) return false;
    if (radius_frac_min <= 0 || radius_frac_max <= radius_frac_min) return false;
    if (!(ecc_min > 0 && ecc_max <= 1.0 && ecc_min <= ecc_max)) return false;
    if (!(darkness_min > 0 && darkness_max < 0.40 && darkness_min < darkness_max)) return false;
    const double mix = severity_mix[0] + severity_mix[1] + severity_mix[2];
    return std::abs(mix - 1.0) < 1e-9 && grid_s >= 1;
  }
};

namespace detail {

struct PlacedPothole {
  double cx, cy;      // pixel coordinates of the centre
  double a, b, phi;   // semi-axes (px) and orientation
  double ex, ey;      // nominal axis-aligned half-extents (px)
  double value;       // base pixel value
  int severity;
  double rag_amp, rag_freq, rag_phase;
};

inline int draw_severity(const std::array<double, 3>& mix, Rng& rng) {
  const double u = rng.uniform();
  if (u < mix[0]) return 0;
  if (u < mix[0] + mix[1]) return 1;
  return 2;
}

}  // namespace detail

inline AnnotatedImage generate_synthetic_scene(const SyntheticSceneSpec& spec,
                                               std::uint64_t seed) {
  if (!spec.valid()) throw DataError("generate_synthetic_scene: invalid spec");
  Rng rng(seed);
  const int n = spec.image_side;
  AnnotatedImage img;
  img.source_id = "synthetic_" + std::to_string(seed);
  img.pixels = Tensor({3, n, n});

  // asphalt background
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double g =
          std::clamp(spec.gray_mean + rng.uniform(-spec.gray_noise, spec.gray_noise), 0.40, 0.70);
      for (int c = 0; c < 3; ++c) img.pixels.at(c, y, x) = g;
    }

  // lane marking: one bright stripe, horizontal or vertical
  if (rng.uniform() < spec.lane_marking_prob) {
    const bool vertical = rng.uniform() < 0.5;
    const int width = std::max(1, static_cast<int>(n * rng.uniform(0.02, 0.05)));
    const int pos = static_cast<int>(rng.uniform(0.15, 0.85) * n);
    const double bright = rng.uniform(0.80, 0.92);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const int d = vertical ? x - pos : y - pos;
        if (d >= 0 && d < width)
          for (int c = 0; c < 3; ++c) img.pixels.at(c, y, x) = bright;
      }
  }

  const int count =
      spec.count_min + static_cast<int>(rng.uniform_int(spec.count_max - spec.count_min + 1));
  const double cell_px = static_cast<double>(n) / spec.grid_s;

  std::vector<detail::PlacedPothole> placed;
  for (int i = 0; i < count; ++i) {
    const int severity = detail::draw_severity(spec.severity_mix, rng);
    const double r_span = (spec.radius_frac_max - spec.radius_frac_min) / 3.0;
    const double d_span = (spec.darkness_max - spec.darkness_min) / 3.0;
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      detail::PlacedPothole p;
      p.severity = severity;
      const double rf = spec.radius_frac_min + r_span * (severity + rng.uniform());
      p.a = std::max(1.6, rf * n);
      p.b = std::max(1.2, p.a * rng.uniform(spec.ecc_min, spec.ecc_max));
      p.phi = rng.uniform(0.0, M_PI);
      // darker band for higher severity
      p.value = spec.darkness_min + d_span * (2 - severity + rng.uniform());
      p.rag_amp = rng.uniform(0.06, 0.14);
      p.rag_freq = 3.0 + static_cast<double>(rng.uniform_int(4));
      p.rag_phase = rng.uniform(0.0, 2.0 * M_PI);
      const double cph = std::cos(p.phi), sph = std::sin(p.phi);
      p.ex = std::sqrt(p.a * p.a * cph * cph + p.b * p.b * sph * sph);
      p.ey = std::sqrt(p.a * p.a * sph * sph + p.b * p.b * cph * cph);
      const double margin = 1.5;
      const double lo_x = margin + p.ex, hi_x = n - 1 - margin - p.ex;
      const double lo_y = margin + p.ey, hi_y = n - 1 - margin - p.ey;
      if (lo_x >= hi_x || lo_y >= hi_y) continue;  // pothole too big for frame
      p.cx = rng.uniform(lo_x, hi_x);
      p.cy = rng.uniform(lo_y, hi_y);

      bool clash = false;
      for (const auto& q : placed) {
        const double gap_x = std::abs(p.cx - q.cx) - (p.ex + q.ex);
        const double gap_y = std::abs(p.cy - q.cy) - (p.ey + q.ey);
        if (spec.separable) {
          // boxes disjoint with at least one grid cell between them
          if (gap_x < cell_px && gap_y < cell_px) {
            clash = true;
            break;
          }
          const int pcol = static_cast<int>(p.cx / cell_px), prow = static_cast<int>(p.cy / cell_px);
          const int qcol = static_cast<int>(q.cx / cell_px), qrow = static_cast<int>(q.cy / cell_px);
          if (std::max(std::abs(pcol - qcol), std::abs(prow - qrow)) < 2) {
            clash = true;
            break;
          }
        } else if (gap_x < 0 && gap_y < 0) {
          clash = true;  // keep nominal boxes disjoint in every mode
          break;
        }
      }
      if (!clash) {
        placed.push_back(p);
        ok = true;
      }
    }
    if (!ok)
      throw PlacementError("generate_synthetic_scene: cannot place pothole " +
                           std::to_string(i + 1) + " of " + std::to_string(count) +
                           (spec.separable ? " in separable mode" : ""));
  }

  // render and record the exact enclosure of the painted pixels
  for (const auto& p : placed) {
    const double cph = std::cos(p.phi), sph = std::sin(p.phi);
    int xmin = n, xmax = -1, ymin = n, ymax = -1;
    const int x0 = std::max(0, static_cast<int>(std::floor(p.cx - p.ex - 1)));
    const int x1 = std::min(n - 1, static_cast<int>(std::ceil(p.cx + p.ex + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(p.cy - p.ey - 1)));
    const int y1 = std::min(n - 1, static_cast<int>(std::ceil(p.cy + p.ey + 1)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double dx = x - p.cx, dy = y - p.cy;
        const double u = (cph * dx + sph * dy) / p.a;
        const double v = (-sph * dx + cph * dy) / p.b;
        const double rho = std::hypot(u, v);
        if (rho > 1.0) continue;
        const double t = std::atan2(v, u);
        const double edge = 1.0 - p.rag_amp * (0.5 + 0.5 * std::sin(p.rag_freq * t + p.rag_phase));
        if (rho > edge) continue;
        const double g = std::clamp(p.value + rng.uniform(-0.02, 0.02), 0.02, 0.38);
        for (int c = 0; c < 3; ++c) img.pixels.at(c, y, x) = g;
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
      }
    if (xmax < xmin) continue;  // nothing painted (cannot happen for a >= 1.6)
    LabelRecord rec;
    rec.category = p.severity;
    const double bx1 = static_cast<double>(xmin) / n, bx2 = static_cast<double>(xmax + 1) / n;
    const double by1 = static_cast<double>(ymin) / n, by2 = static_cast<double>(ymax + 1) / n;
    rec.box = BBox{0.5 * (bx1 + bx2), 0.5 * (by1 + by2), bx2 - bx1, by2 - by1};
    img.labels.push_back(rec);
  }
  return img;
}

}  // namespace roadinv

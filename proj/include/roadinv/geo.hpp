#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "roadinv/data.hpp"
#include "roadinv/geometry.hpp"

namespace roadinv {

struct GeoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Equirectangular metres-per-degree of latitude; longitude scales by cos(lat).
// Centimetre-accurate at pothole scale, which is all the inventory needs.
inline constexpr double kMetersPerDegLat = 111320.0;

struct CameraModel {
  double hfov_deg = 84.0;
  int width_px = 1000;
  int height_px = 1000;
  bool nadir = true;

  bool valid() const { return hfov_deg > 0 && hfov_deg < 180 && width_px > 0 && height_px > 0; }
};

struct GeoDetection {
  Detection det;
  double lat = 0, lon = 0;
  double ground_w_m = 0, ground_h_m = 0;
  std::string image_id;
};

struct GeoPoint {
  double lat = 0, lon = 0;
};

struct RoadSegment {
  std::string id;
  std::vector<GeoPoint> line;
};

struct SegmentReport {
  std::string id;
  std::array<std::int64_t, 3> counts{0, 0, 0};
  double length_m = 0;
  double per_100m = 0;
  double score = 0;
};

// Pinhole nadir ground projection: the camera at altitude alt sees a
// footprint 2*alt*tan(hfov/2) wide; pixel offsets map linearly onto it.
inline GeoDetection geolocate(const Detection& det, const GeoTag& tag, const CameraModel& cam,
                              const std::string& image_id = "") {
  if (!cam.nadir) throw GeoError("geolocate: camera model is not nadir");
  if (!cam.valid()) throw GeoError("geolocate: invalid camera model");
  if (!(tag.alt_m > 0)) throw GeoError("geolocate: altitude must be positive");
  const double half_rad = cam.hfov_deg * M_PI / 360.0;
  const double footprint_w = 2.0 * tag.alt_m * std::tan(half_rad);
  const double footprint_h = footprint_w * static_cast<double>(cam.height_px) / cam.width_px;
  const double east = (det.box.cx - 0.5) * footprint_w;
  const double north = (0.5 - det.box.cy) * footprint_h;
  GeoDetection g;
  g.det = det;
  g.image_id = image_id;
  g.lat = tag.lat + north / kMetersPerDegLat;
  g.lon = tag.lon + east / (kMetersPerDegLat * std::cos(tag.lat * M_PI / 180.0));
  g.ground_w_m = det.box.w * footprint_w;
  g.ground_h_m = det.box.h * footprint_h;
  return g;
}

namespace detail {

// distance in metres from point to segment [a,b], local equirectangular frame
inline double point_segment_distance_m(const GeoPoint& p, const GeoPoint& a, const GeoPoint& b) {
  const double scale = std::cos(p.lat * M_PI / 180.0);
  const double ax = (a.lon - p.lon) * kMetersPerDegLat * scale;
  const double ay = (a.lat - p.lat) * kMetersPerDegLat;
  const double bx = (b.lon - p.lon) * kMetersPerDegLat * scale;
  const double by = (b.lat - p.lat) * kMetersPerDegLat;
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(-(ax * dx + ay * dy) / len2, 0.0, 1.0);
  const double px = ax + t * dx, py = ay + t * dy;
  return std::hypot(px, py);
}

inline double segment_length_m(const RoadSegment& seg) {
  double total = 0.0;
  for (std::size_t i = 1; i < seg.line.size(); ++i) {
    const GeoPoint& a = seg.line[i - 1];
    const GeoPoint& b = seg.line[i];
    const double mean_lat = 0.5 * (a.lat + b.lat) * M_PI / 180.0;
    const double x = (b.lon - a.lon) * kMetersPerDegLat * std::cos(mean_lat);
    const double y = (b.lat - a.lat) * kMetersPerDegLat;
    total += std::hypot(x, y);
  }
  return total;
}

}  // namespace detail

inline double distance_to_segment_m(const GeoPoint& p, const RoadSegment& seg) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < seg.line.size(); ++i)
    best = std::min(best, detail::point_segment_distance_m(p, seg.line[i - 1], seg.line[i]));
  return best;
}

struct AggregateResult {
  std::vector<SegmentReport> reports;  // sorted by score descending
  std::int64_t unassigned = 0;         // farther than the cutoff from every segment
};

// Each detection goes to the nearest segment (ties to the lexicographically
// smaller id). score = sum(weight[severity] * count) per 100 m of segment.
inline AggregateResult aggregate_segments(const std::vector<GeoDetection>& geo_dets,
                                          const std::vector<RoadSegment>& segments,
                                          std::array<double, 3> severity_weights = {1, 2, 4},
                                          double cutoff_m = 30.0) {
  for (double w : severity_weights)
    if (!(w >= 0)) throw GeoError("aggregate_segments: negative severity weight");
  std::vector<std::size_t> order(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const RoadSegment& s = segments[i];
    if (s.line.size() < 2) throw GeoError("segment " + s.id + ": polyline needs at least 2 points");
    if (!(detail::segment_length_m(s) > 0)) throw GeoError("segment " + s.id + ": zero length");
    order[i] = i;
  }
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return segments[a].id < segments[b].id; });

  std::vector<SegmentReport> reports(segments.size());
  for (std::size_t i = 0; i < segments.size(); ++i) {
    reports[i].id = segments[i].id;
    reports[i].length_m = detail::segment_length_m(segments[i]);
  }

  AggregateResult out;
  for (const GeoDetection& d : geo_dets) {
    const GeoPoint p{d.lat, d.lon};
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_idx = segments.size();
    for (std::size_t oi : order) {  // lex id order makes ties deterministic
      const double dist = distance_to_segment_m(p, segments[oi]);
      if (dist < best) {
        best = dist;
        best_idx = oi;
      }
    }
    if (best_idx == segments.size() || best > cutoff_m) {
      ++out.unassigned;
      continue;
    }
    const int cat = std::clamp(d.det.category, 0, 2);
    ++reports[best_idx].counts[static_cast<std::size_t>(cat)];
  }

  for (SegmentReport& r : reports) {
    const double total = static_cast<double>(r.counts[0] + r.counts[1] + r.counts[2]);
    r.per_100m = total * 100.0 / r.length_m;
    const double weighted = severity_weights[0] * static_cast<double>(r.counts[0]) +
                            severity_weights[1] * static_cast<double>(r.counts[1]) +
                            severity_weights[2] * static_cast<double>(r.counts[2]);
    r.score = weighted * 100.0 / r.length_m;
  }
  std::sort(reports.begin(), reports.end(), [](const SegmentReport& a, const SegmentReport& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  out.reports = std::move(reports);
  return out;
}

// ---------------------------------------------------------------------------
// GeoJSON / CSV export and segment input (RFC 7946, coordinates [lon, lat])

inline nlohmann::ordered_json report_geojson(const std::vector<SegmentReport>& reports,
                                             const std::vector<GeoDetection>& geo_dets,
                                             const std::vector<RoadSegment>& segments) {
  nlohmann::ordered_json root;
  root["type"] = "FeatureCollection";
  root["features"] = nlohmann::ordered_json::array();
  for (const GeoDetection& d : geo_dets) {
    nlohmann::ordered_json f;
    f["type"] = "Feature";
    f["geometry"]["type"] = "Point";
    f["geometry"]["coordinates"] = {d.lon, d.lat};
    f["properties"]["image"] = d.image_id;
    f["properties"]["severity"] = d.det.category;
    f["properties"]["confidence"] = d.det.confidence;
    f["properties"]["ground_size_m"] = {d.ground_w_m, d.ground_h_m};
    root["features"].push_back(std::move(f));
  }
  for (const SegmentReport& r : reports) {
    const RoadSegment* seg = nullptr;
    for (const RoadSegment& s : segments)
      if (s.id == r.id) {
        seg = &s;
        break;
      }
    if (!seg) continue;
    nlohmann::ordered_json f;
    f["type"] = "Feature";
    f["geometry"]["type"] = "LineString";
    auto coords = nlohmann::ordered_json::array();
    for (const GeoPoint& p : seg->line) coords.push_back({p.lon, p.lat});
    f["geometry"]["coordinates"] = std::move(coords);
    f["properties"]["id"] = r.id;
    f["properties"]["count_low"] = r.counts[0];
    f["properties"]["count_middle"] = r.counts[1];
    f["properties"]["count_high"] = r.counts[2];
    f["properties"]["length_m"] = r.length_m;
    f["properties"]["per_100m"] = r.per_100m;
    f["properties"]["score"] = r.score;
    root["features"].push_back(std::move(f));
  }
  return root;
}

inline void write_report_geojson(const std::vector<SegmentReport>& reports,
                                 const std::vector<GeoDetection>& geo_dets,
                                 const std::vector<RoadSegment>& segments,
                                 const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw GeoError("cannot write report: " + path.string());
  f << report_geojson(reports, geo_dets, segments).dump(2) << "\n";
  if (!f) throw GeoError("write failed: " + path.string());
}

inline void write_report_csv(const std::vector<SegmentReport>& reports,
                             const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw GeoError("cannot write report: " + path.string());
  f << "segment_id,low,middle,high,per_100m,score\n";
  char buf[256];
  for (const SegmentReport& r : reports) {
    std::snprintf(buf, sizeof(buf), "%s,%lld,%lld,%lld,%.6f,%.6f\n", r.id.c_str(),
                  static_cast<long long>(r.counts[0]), static_cast<long long>(r.counts[1]),
                  static_cast<long long>(r.counts[2]), r.per_100m, r.score);
    f << buf;
  }
}

inline std::vector<RoadSegment> parse_segments_geojson(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw GeoError("cannot open segments file: " + path.string());
  nlohmann::json root;
  try {
    f >> root;
  } catch (const nlohmann::json::exception& e) {
    throw GeoError("segments file " + path.string() + ": " + e.what());
  }
  if (root.value("type", "") != "FeatureCollection" || !root.contains("features"))
    throw GeoError("segments file must be a GeoJSON FeatureCollection");
  std::vector<RoadSegment> segments;
  for (const auto& feat : root["features"]) {
    const auto& geom = feat.at("geometry");
    if (geom.value("type", "") != "LineString") continue;
    RoadSegment seg;
    if (feat.contains("properties") && feat["properties"].contains("id")) {
      const auto& id = feat["properties"]["id"];
      seg.id = id.is_string() ? id.get<std::string>() : id.dump();
    } else {
      seg.id = "segment_" + std::to_string(segments.size());
    }
    for (const auto& c : geom.at("coordinates")) {
      if (!c.is_array() || c.size() < 2) throw GeoError("segment " + seg.id + ": bad coordinate");
      seg.line.push_back(GeoPoint{c[1].get<double>(), c[0].get<double>()});
    }
    if (seg.line.size() < 2) throw GeoError("segment " + seg.id + ": needs at least 2 points");
    segments.push_back(std::move(seg));
  }
  return segments;
}

}  // namespace roadinv

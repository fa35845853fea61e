#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "roadinv/geometry.hpp"
#include "roadinv/image.hpp"
#include "roadinv/tensor.hpp"

namespace roadinv {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GeoTag {
  double lat = 0, lon = 0, alt_m = 0;
};

// One annotation line: `<category> <cx> <cy> <w> <h>`, severity 0/1/2.
struct LabelRecord {
  int category = 0;
  BBox box;

  bool operator==(const LabelRecord&) const = default;
};

struct AnnotatedImage {
  Tensor pixels;  // [3,N,N] in [0,1]
  std::vector<LabelRecord> labels;
  std::optional<GeoTag> geotag;
  std::string source_id;
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
    std::size_t j = i;
    while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

inline bool parse_double(std::string_view s, double& out) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e;
}

inline bool parse_int(std::string_view s, int& out) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(b, e, out);
  return ec == std::errc() && p == e;
}

}  // namespace detail

inline std::vector<LabelRecord> parse_label_file(std::string_view text) {
  std::vector<LabelRecord> records;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = text.find('\n', pos);
    std::string_view line =
        text.substr(pos, nl == std::string_view::npos ? text.size() - pos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const auto fields = detail::split_ws(line);
    if (fields.empty()) continue;
    if (fields.size() != 5)
      throw DataError("label parse error, line " + std::to_string(line_no) + ": expected 5 fields, got " +
                      std::to_string(fields.size()));
    LabelRecord rec;
    if (!detail::parse_int(fields[0], rec.category) || rec.category < 0 || rec.category > 2)
      throw DataError("invalid category, line " + std::to_string(line_no) +
                      ": severity must be 0, 1 or 2");
    double v[4];
    const char* names[4] = {"cx", "cy", "w", "h"};
    for (int i = 0; i < 4; ++i) {
      if (!detail::parse_double(fields[static_cast<std::size_t>(i + 1)], v[i]))
        throw DataError("label parse error, line " + std::to_string(line_no) + ": bad number for " +
                        names[i]);
      if (!(v[i] >= 0.0 && v[i] <= 1.0))
        throw DataError("coordinate range error, line " + std::to_string(line_no) + ": " + names[i] +
                        " must lie in [0,1]");
    }
    if (v[2] <= 0.0 || v[3] <= 0.0)
      throw DataError("coordinate range error, line " + std::to_string(line_no) +
                      ": w and h must be positive");
    rec.box = BBox{v[0], v[1], v[2], v[3]};
    records.push_back(rec);
  }
  return records;
}

inline std::string serialize_labels(const std::vector<LabelRecord>& records) {
  std::string out;
  char buf[128];
  for (const LabelRecord& r : records) {
    std::snprintf(buf, sizeof(buf), "%d %.6f %.6f %.6f %.6f\n", r.category, r.box.cx, r.box.cy,
                  r.box.w, r.box.h);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rotation augmentation: pixels rotate about the image centre with bilinear
// sampling; out-of-frame samples take the mean gray of the border pixels.
// Boxes become the axis-aligned enclosure of their rotated corners, clipped
// to the frame; a box losing more than 80% of its area is dropped.

inline AnnotatedImage rotate_augment(const AnnotatedImage& img, double angle_deg) {
  const Tensor& src = img.pixels;
  if (src.rank() != 3 || src.extent(0) != 3 || src.extent(1) != src.extent(2))
    throw DataError("rotate_augment: expects square [3,N,N] pixels");
  const int n = src.extent(1);
  const double theta = std::fmod(std::fmod(angle_deg, 360.0) + 360.0, 360.0) * M_PI / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);

  double edge_sum = 0.0;
  std::int64_t edge_cnt = 0;
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < n; ++i) {
      edge_sum += src.at(ch, 0, i) + src.at(ch, n - 1, i);
      edge_cnt += 2;
      if (i > 0 && i < n - 1) {
        edge_sum += src.at(ch, i, 0) + src.at(ch, i, n - 1);
        edge_cnt += 2;
      }
    }
  const double fill = edge_sum / static_cast<double>(edge_cnt);

  AnnotatedImage out;
  out.geotag = img.geotag;
  out.source_id = img.source_id;
  out.pixels = Tensor({3, n, n});
  const double half = 0.5 * n;
  auto sample = [&](int ch, double y, double x) {
    const int x0 = static_cast<int>(std::floor(x));
    const int y0 = static_cast<int>(std::floor(y));
    const double wx = x - x0, wy = y - y0;
    auto px = [&](int yy, int xx) {
      if (yy < 0 || yy >= n || xx < 0 || xx >= n) return fill;
      return src.at(ch, yy, xx);
    };
    const double top = px(y0, x0) * (1 - wx) + px(y0, x0 + 1) * wx;
    const double bot = px(y0 + 1, x0) * (1 - wx) + px(y0 + 1, x0 + 1) * wx;
    return top * (1 - wy) + bot * wy;
  };
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      // inverse map: destination centre back into the source frame
      const double dx = (x + 0.5) - half;
      const double dy = (y + 0.5) - half;
      const double sx = c * dx + s * dy + half - 0.5;
      const double sy = -s * dx + c * dy + half - 0.5;
      for (int ch = 0; ch < 3; ++ch) out.pixels.at(ch, y, x) = sample(ch, sy, sx);
    }
  }

  for (const LabelRecord& rec : img.labels) {
    const double xs[2] = {rec.box.x1(), rec.box.x2()};
    const double ys[2] = {rec.box.y1(), rec.box.y2()};
    double minx = 2, maxx = -1, miny = 2, maxy = -1;
    for (double bx : xs)
      for (double by : ys) {
        const double rx = c * (bx - 0.5) - s * (by - 0.5) + 0.5;
        const double ry = s * (bx - 0.5) + c * (by - 0.5) + 0.5;
        minx = std::min(minx, rx);
        maxx = std::max(maxx, rx);
        miny = std::min(miny, ry);
        maxy = std::max(maxy, ry);
      }
    const double cx1 = std::max(0.0, minx), cx2 = std::min(1.0, maxx);
    const double cy1 = std::max(0.0, miny), cy2 = std::min(1.0, maxy);
    if (cx2 <= cx1 || cy2 <= cy1) continue;
    const double clipped_area = (cx2 - cx1) * (cy2 - cy1);
    if (clipped_area < 0.2 * rec.box.area()) continue;
    LabelRecord nr;
    nr.category = rec.category;
    nr.box = BBox{0.5 * (cx1 + cx2), 0.5 * (cy1 + cy2), cx2 - cx1, cy2 - cy1};
    out.labels.push_back(nr);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset layout: root/images/*.png, root/labels/*.txt (matching stems),
// optional root/geotags.csv with header `stem,lat,lon,alt_m`.

struct DatasetLoad {
  std::vector<AnnotatedImage> images;
  int missing_label_files = 0;
  std::vector<std::string> warnings;
};

inline std::map<std::string, GeoTag> parse_geotags_csv(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open geotags file: " + path.string());
  std::map<std::string, GeoTag> tags;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && line.rfind("stem,", 0) == 0) continue;  // header
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() != 4)
      throw DataError("geotags parse error, line " + std::to_string(line_no) +
                      ": expected stem,lat,lon,alt_m");
    GeoTag g;
    if (!detail::parse_double(fields[1], g.lat) || !detail::parse_double(fields[2], g.lon) ||
        !detail::parse_double(fields[3], g.alt_m))
      throw DataError("geotags parse error, line " + std::to_string(line_no) + ": bad number");
    if (!(g.lat >= -90 && g.lat <= 90) || !(g.lon >= -180 && g.lon <= 180))
      throw DataError("geotags range error, line " + std::to_string(line_no));
    if (!(g.alt_m > 0))
      throw DataError("geotags range error, line " + std::to_string(line_no) +
                      ": altitude must be positive");
    tags[fields[0]] = g;
  }
  return tags;
}

inline void write_geotags_csv(const std::vector<std::pair<std::string, GeoTag>>& rows,
                              const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("cannot write geotags file: " + path.string());
  f << "stem,lat,lon,alt_m\n";
  char buf[160];
  for (const auto& [stem, g] : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.7f,%.7f,%.2f\n", stem.c_str(), g.lat, g.lon, g.alt_m);
    f << buf;
  }
}

inline DatasetLoad load_dataset(const std::filesystem::path& root, int input_size) {
  namespace fs = std::filesystem;
  DatasetLoad out;
  const fs::path images_dir = root / "images";
  const fs::path labels_dir = root / "labels";
  if (!fs::is_directory(images_dir))
    throw DataError("dataset root has no images/ directory: " + root.string());

  std::map<std::string, GeoTag> tags;
  if (fs::exists(root / "geotags.csv")) tags = parse_geotags_csv(root / "geotags.csv");

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images_dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.stem() < b.stem(); });

  for (const fs::path& p : files) {
    const std::string stem = p.stem().string();
    AnnotatedImage img;
    img.source_id = stem;
    try {
      img.pixels = resize_bilinear(read_png(p), input_size);
    } catch (const ImageError& e) {
      out.warnings.push_back(std::string("skipping unreadable image: ") + e.what());
      continue;
    }
    const fs::path label_path = labels_dir / (stem + ".txt");
    if (fs::exists(label_path)) {
      std::ifstream lf(label_path);
      std::string text((std::istreambuf_iterator<char>(lf)), std::istreambuf_iterator<char>());
      try {
        img.labels = parse_label_file(text);
      } catch (const DataError& e) {
        throw DataError(label_path.string() + ": " + e.what());
      }
    } else {
      ++out.missing_label_files;
      out.warnings.push_back("no label file for image: " + stem);
    }
    if (auto it = tags.find(stem); it != tags.end()) img.geotag = it->second;
    out.images.push_back(std::move(img));
  }
  if (out.images.empty()) throw DataError("empty dataset: no readable images under " + root.string());
  return out;
}

inline void write_labels(const std::vector<LabelRecord>& labels, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw DataError("cannot write label file: " + path.string());
  const std::string text = serialize_labels(labels);
  f.write(text.data(), static_cast<std::streamsize>(text.size()));
}

}  // namespace roadinv

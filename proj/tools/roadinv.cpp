// roadinv: synthesize road scenes, train the pothole detector, run inference,
// evaluate, and build geolocated maintenance reports.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 diverged training.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "roadinv/data.hpp"
#include "roadinv/eval.hpp"
#include "roadinv/geo.hpp"
#include "roadinv/geometry.hpp"
#include "roadinv/image.hpp"
#include "roadinv/model.hpp"
#include "roadinv/synth.hpp"
#include "roadinv/train.hpp"

namespace fs = std::filesystem;
using namespace roadinv;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;

struct SynthOpts {
  std::string out;
  int count = 8;
  std::uint64_t seed = 0;
  bool separable = false;
  int side = 112;
  int grid_s = 7;
  int min_potholes = 1;
  int max_potholes = 4;
  int rotate = 0;
  double base_lat = 4.61600;
  double base_lon = -74.10096;
};

std::string stem_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%04d", i);
  return buf;
}

int run_synth(const SynthOpts& o) {
  if (o.count < 1) {
    std::cerr << "synth: --count must be >= 1\n";
    return kExitUsage;
  }
  SyntheticSceneSpec spec;
  spec.image_side = o.side;
  spec.count_min = o.min_potholes;
  spec.count_max = o.max_potholes;
  spec.separable = o.separable;
  spec.grid_s = o.grid_s;
  if (!spec.valid()) {
    std::cerr << "synth: invalid scene parameters\n";
    return kExitUsage;
  }

  fs::create_directories(fs::path(o.out) / "images");
  fs::create_directories(fs::path(o.out) / "labels");

  Rng master(o.seed);
  std::vector<std::pair<std::string, GeoTag>> tags;
  std::vector<AnnotatedImage> scenes;
  for (int i = 0; i < o.count; ++i) scenes.push_back(generate_synthetic_scene(spec, master.next_u64()));

  // rotated copies, mirroring a capture-plus-rotation collection
  const int base_count = static_cast<int>(scenes.size());
  for (int r = 0; r < o.rotate; ++r) {
    const int src = static_cast<int>(master.uniform_int(base_count));
    const double angle = master.uniform(0.0, 360.0);
    scenes.push_back(rotate_augment(scenes[static_cast<std::size_t>(src)], angle));
  }

  // survey-style geotags on a 10-column grid, ~20 m apart
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const std::string stem = stem_name(static_cast<int>(i));
    const double alt = 10.0 + 5.0 * master.uniform();
    GeoTag g;
    g.alt_m = alt;
    const double row = static_cast<double>(i / 10), col = static_cast<double>(i % 10);
    g.lat = o.base_lat + row * 20.0 / kMetersPerDegLat;
    g.lon = o.base_lon + col * 20.0 / (kMetersPerDegLat * std::cos(o.base_lat * M_PI / 180.0));
    tags.emplace_back(stem, g);
    write_png(scenes[i].pixels, fs::path(o.out) / "images" / (stem + ".png"));
    write_labels(scenes[i].labels, fs::path(o.out) / "labels" / (stem + ".txt"));
  }
  write_geotags_csv(tags, fs::path(o.out) / "geotags.csv");
  std::cerr << "synth: wrote " << scenes.size() << " images to " << o.out << "\n";
  return 0;
}

struct TrainOpts {
  std::string data;
  std::string out;
  std::string history;
  int steps = 500;
  double lr = 0.01;
  int batch = 8;
  double split = 0.8;
  std::uint64_t seed = 0;
  double conf = 0.5;
  int input_size = 112;
  int grid_s = 7;
  int grid_b = 2;
  std::vector<int> widths = {16, 32, 64, 64};
  double w_coord = 1.0, w_obj = 1.0, w_noobj = 1.0, w_cat = 1.0;
};

NetworkConfig make_config(int input_size, int grid_s, int grid_b, const std::vector<int>& widths) {
  NetworkConfig cfg;
  cfg.input_size = input_size;
  cfg.grid = GridSpec{grid_s, grid_b, 3};
  cfg.backbone.clear();
  for (int w : widths) {
    cfg.backbone.push_back(LayerDesc::conv(w));
    cfg.backbone.push_back(LayerDesc::leaky_relu(0.1));
    cfg.backbone.push_back(LayerDesc::maxpool2());
  }
  return cfg;
}

int run_train(const TrainOpts& o) {
  if (!std::isfinite(o.lr) || o.lr <= 0.0) {
    std::cerr << "train: --lr must be a positive finite number\n";
    return kExitUsage;
  }
  if (!(o.split > 0.0 && o.split < 1.0)) {
    std::cerr << "train: --split must lie in (0,1)\n";
    return kExitUsage;
  }
  const NetworkConfig cfg = make_config(o.input_size, o.grid_s, o.grid_b, o.widths);
  DatasetLoad load = load_dataset(o.data, cfg.input_size);
  for (const std::string& w : load.warnings) std::cerr << "train: " << w << "\n";
  auto [train_set, test_set] = split_dataset(load.images, o.split, o.seed);
  std::cerr << "train: dataset " << load.images.size() << " images, train=" << train_set.size()
            << " test=" << test_set.size() << "\n";

  Network net = build_network(cfg, o.seed);
  TrainConfig tc;
  tc.lr = o.lr;
  tc.steps = o.steps;
  tc.batch = o.batch;
  tc.seed = o.seed;
  tc.split_ratio = o.split;
  tc.conf_threshold = o.conf;
  tc.weights = LossWeights{o.w_coord, o.w_obj, o.w_noobj, o.w_cat};
  TrainResult res = train(net, train_set, tc);
  if (res.encode_collisions > 0)
    std::cerr << "train: " << res.encode_collisions
              << " ground truths displaced by the one-object-per-cell rule\n";
  save_checkpoint(net, o.out);
  if (!o.history.empty()) write_history_csv(res.history, o.history);

  const Tensor out0 = forward(net, train_set.front().pixels);
  const auto sample_dets = decode_predictions(out0, cfg.grid, tc.conf_threshold);
  std::cerr << "train: initial loss " << res.history.front() << ", final loss "
            << res.history.back() << "; " << sample_dets.size()
            << " detections above conf " << tc.conf_threshold << " on the first train image\n";
  return 0;
}

std::vector<std::pair<std::string, Tensor>> load_images_any(const std::string& dir,
                                                            int input_size) {
  std::vector<std::pair<std::string, Tensor>> out;
  const fs::path root(dir);
  const fs::path img_dir = fs::is_directory(root / "images") ? root / "images" : root;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(img_dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.stem() < b.stem(); });
  for (const fs::path& p : files)
    out.emplace_back(p.stem().string(), resize_bilinear(read_png(p), input_size));
  if (out.empty()) throw DataError("no .png images under " + dir);
  return out;
}

struct InferOpts {
  std::string model;
  std::string images;
  std::string out;
  double conf = 0.5;
  double nms_iou = 0.45;
};

nlohmann::ordered_json detection_json(const std::string& image, const Detection& d) {
  nlohmann::ordered_json j;
  j["image"] = image;
  j["category"] = d.category;
  j["confidence"] = d.confidence;
  j["cx"] = d.box.cx;
  j["cy"] = d.box.cy;
  j["w"] = d.box.w;
  j["h"] = d.box.h;
  return j;
}

int run_infer(const InferOpts& o) {
  Network net = load_checkpoint(o.model);
  const auto images = load_images_any(o.images, net.config.input_size);
  nlohmann::ordered_json root;
  root["format"] = "roadinv-dets-v1";
  root["conf_threshold"] = o.conf;
  root["nms_iou"] = o.nms_iou;
  root["detections"] = nlohmann::ordered_json::array();
  std::size_t total = 0;
  for (const auto& [stem, pixels] : images) {
    const Tensor out = forward(net, pixels);
    const auto dets = nms(decode_predictions(out, net.config.grid, o.conf), o.nms_iou);
    for (const Detection& d : dets) root["detections"].push_back(detection_json(stem, d));
    total += dets.size();
  }
  std::ofstream f(o.out, std::ios::trunc | std::ios::binary);
  if (!f) throw DataError("cannot write detections file: " + o.out);
  f << root.dump(2) << "\n";
  std::cerr << "infer: " << total << " detections over " << images.size() << " images\n";
  return 0;
}

struct EvalOpts {
  std::string model;
  std::string data;
  std::uint64_t seed = 0;
  double split = 0.8;
  double conf = 0.25;
  double nms_iou = 0.45;
};

int run_eval(const EvalOpts& o) {
  Network net = load_checkpoint(o.model);
  DatasetLoad load = load_dataset(o.data, net.config.input_size);
  for (const std::string& w : load.warnings) std::cerr << "eval: " << w << "\n";
  auto [train_set, test_set] = split_dataset(load.images, o.split, o.seed);
  std::cerr << "train=" << train_set.size() << " test=" << test_set.size() << "\n";

  std::vector<LabelRecord> train_labels;
  for (const AnnotatedImage& img : train_set)
    train_labels.insert(train_labels.end(), img.labels.begin(), img.labels.end());
  const SeverityHistogram train_hist = severity_distribution(train_labels);

  std::vector<std::vector<Detection>> preds;
  std::vector<std::vector<LabelRecord>> gts;
  std::vector<Detection> all_preds;
  for (const AnnotatedImage& img : test_set) {
    const Tensor out = forward(net, img.pixels);
    auto dets = nms(decode_predictions(out, net.config.grid, o.conf), o.nms_iou);
    all_preds.insert(all_preds.end(), dets.begin(), dets.end());
    preds.push_back(std::move(dets));
    gts.push_back(img.labels);
  }
  const SeverityHistogram pred_hist = severity_distribution(all_preds);
  const double miou = mean_test_iou(preds, gts);

  std::printf("mean_test_iou=%.4f\n", miou);
  std::printf("severity      train_labels  test_predictions\n");
  const char* names[3] = {"low", "middle", "high"};
  for (int i = 0; i < 3; ++i)
    std::printf("%-12s  %12.6f  %16.6f\n", names[i], train_hist.densities[static_cast<std::size_t>(i)],
                pred_hist.densities[static_cast<std::size_t>(i)]);
  std::printf("counts        %5lld/%lld/%lld  %9lld/%lld/%lld\n",
              static_cast<long long>(train_hist.counts[0]), static_cast<long long>(train_hist.counts[1]),
              static_cast<long long>(train_hist.counts[2]), static_cast<long long>(pred_hist.counts[0]),
              static_cast<long long>(pred_hist.counts[1]), static_cast<long long>(pred_hist.counts[2]));
  return 0;
}

struct ReportOpts {
  std::string dets;
  std::string geotags;
  std::string segments;
  std::string out;
  std::string csv;
  std::vector<double> weights = {1, 2, 4};
  double fov = 84.0;
  double cutoff = 30.0;
};

int run_report(const ReportOpts& o) {
  if (o.weights.size() != 3) {
    std::cerr << "report: --weights needs exactly three values\n";
    return kExitUsage;
  }
  std::ifstream f(o.dets);
  if (!f) throw DataError("cannot open detections file: " + o.dets);
  nlohmann::json root;
  try {
    f >> root;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("detections file: ") + e.what());
  }
  if (root.value("format", "") != "roadinv-dets-v1")
    throw DataError("detections file: unknown format");

  const auto tags = parse_geotags_csv(o.geotags);
  const auto segments = parse_segments_geojson(o.segments);
  CameraModel cam;
  cam.hfov_deg = o.fov;

  std::vector<GeoDetection> geo_dets;
  std::int64_t ungeoreferenced = 0;
  for (const auto& dj : root.at("detections")) {
    Detection d;
    d.category = dj.at("category").get<int>();
    d.confidence = dj.at("confidence").get<double>();
    d.box = BBox{dj.at("cx").get<double>(), dj.at("cy").get<double>(), dj.at("w").get<double>(),
                 dj.at("h").get<double>()};
    const std::string image = dj.at("image").get<std::string>();
    const auto it = tags.find(image);
    if (it == tags.end()) {
      ++ungeoreferenced;
      continue;
    }
    geo_dets.push_back(geolocate(d, it->second, cam, image));
  }
  if (ungeoreferenced > 0)
    std::cerr << "report: " << ungeoreferenced
              << " detections without a geotag were left out of the map\n";

  const AggregateResult agg = aggregate_segments(
      geo_dets, segments, {o.weights[0], o.weights[1], o.weights[2]}, o.cutoff);
  if (agg.unassigned > 0)
    std::cerr << "report: " << agg.unassigned << " detections beyond " << o.cutoff
              << " m of every segment\n";
  write_report_geojson(agg.reports, geo_dets, segments, o.out);
  if (!o.csv.empty()) write_report_csv(agg.reports, o.csv);
  std::cerr << "report: " << geo_dets.size() << " detections across " << agg.reports.size()
            << " segments -> " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Aerial road-deterioration inventory pipeline"};
  app.require_subcommand(1);

  SynthOpts so;
  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic annotated dataset");
  synth->add_option("--out", so.out, "Output dataset directory")->required();
  synth->add_option("--count", so.count, "Number of base images");
  synth->add_option("--seed", so.seed, "Random seed");
  synth->add_flag("--separable", so.separable, "Keep potholes a grid cell apart");
  synth->add_option("--side", so.side, "Image side in pixels");
  synth->add_option("--grid-s", so.grid_s, "Grid side used for separable spacing");
  synth->add_option("--min-potholes", so.min_potholes, "Minimum potholes per image");
  synth->add_option("--max-potholes", so.max_potholes, "Maximum potholes per image");
  synth->add_option("--rotate", so.rotate, "Extra rotated copies to append");

  TrainOpts to;
  CLI::App* train_cmd = app.add_subcommand("train", "Train a detector on a dataset");
  train_cmd->add_option("--data", to.data, "Dataset root")->required();
  train_cmd->add_option("--out", to.out, "Checkpoint output path")->required();
  train_cmd->add_option("--steps", to.steps, "SGD steps");
  train_cmd->add_option("--lr", to.lr, "Learning rate");
  train_cmd->add_option("--batch", to.batch, "Mini-batch size");
  train_cmd->add_option("--split", to.split, "Train fraction of the dataset");
  train_cmd->add_option("--seed", to.seed, "Random seed");
  train_cmd->add_option("--conf", to.conf, "Reporting confidence threshold");
  train_cmd->add_option("--history", to.history, "Write per-step loss CSV here");
  train_cmd->add_option("--input-size", to.input_size, "Network input side");
  train_cmd->add_option("--grid-s", to.grid_s, "Grid side S");
  train_cmd->add_option("--grid-b", to.grid_b, "Boxes per cell B");
  train_cmd->add_option("--widths", to.widths, "Conv block widths")->delimiter(',');
  train_cmd->add_option("--w-coord", to.w_coord, "Coordinate loss weight");
  train_cmd->add_option("--w-obj", to.w_obj, "Object confidence loss weight");
  train_cmd->add_option("--w-noobj", to.w_noobj, "No-object confidence loss weight");
  train_cmd->add_option("--w-cat", to.w_cat, "Category loss weight");

  InferOpts io;
  CLI::App* infer = app.add_subcommand("infer", "Run detection over a directory of images");
  infer->add_option("--model", io.model, "Checkpoint path")->required();
  infer->add_option("--images", io.images, "Image directory or dataset root")->required();
  infer->add_option("--out", io.out, "Detections JSON output")->required();
  infer->add_option("--conf", io.conf, "Confidence threshold");
  infer->add_option("--nms", io.nms_iou, "NMS IOU threshold");

  EvalOpts eo;
  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a model on a dataset split");
  eval_cmd->add_option("--model", eo.model, "Checkpoint path")->required();
  eval_cmd->add_option("--data", eo.data, "Dataset root")->required();
  eval_cmd->add_option("--seed", eo.seed, "Split seed");
  eval_cmd->add_option("--split", eo.split, "Train fraction");
  eval_cmd->add_option("--conf", eo.conf, "Confidence threshold");
  eval_cmd->add_option("--nms", eo.nms_iou, "NMS IOU threshold");

  ReportOpts ro;
  CLI::App* report = app.add_subcommand("report", "Aggregate detections into a road report");
  report->add_option("--dets", ro.dets, "Detections JSON from infer")->required();
  report->add_option("--geotags", ro.geotags, "Geotags CSV")->required();
  report->add_option("--segments", ro.segments, "Road segments GeoJSON")->required();
  report->add_option("--out", ro.out, "Report GeoJSON output")->required();
  report->add_option("--csv", ro.csv, "Also write a CSV summary here");
  report->add_option("--weights", ro.weights, "Severity weights low,middle,high")->delimiter(',');
  report->add_option("--fov", ro.fov, "Camera horizontal field of view, degrees");
  report->add_option("--cutoff", ro.cutoff, "Unassigned-detection cutoff, metres");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (synth->parsed()) return run_synth(so);
    if (train_cmd->parsed()) return run_train(to);
    if (infer->parsed()) return run_infer(io);
    if (eval_cmd->parsed()) return run_eval(eo);
    if (report->parsed()) return run_report(ro);
  } catch (const DivergedError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

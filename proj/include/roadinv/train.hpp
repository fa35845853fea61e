#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <utility>
#include <vector>

#include "roadinv/data.hpp"
#include "roadinv/loss.hpp"
#include "roadinv/model.hpp"
#include "roadinv/rng.hpp"

namespace roadinv {

struct TrainConfig {
  double lr = 0.01;
  int steps = 1;
  int batch = 8;
  std::uint64_t seed = 0;
  double split_ratio = 0.8;
  double conf_threshold = 0.5;  // reporting threshold for the end-of-run summary
  LossWeights weights;
};

// Deterministic shuffle + split. Train gets floor(ratio*n) items.
template <class T>
inline std::pair<std::vector<T>, std::vector<T>> split_dataset(const std::vector<T>& items,
                                                               double ratio, std::uint64_t seed) {
  if (items.size() < 2) throw DataError("split_dataset: need at least 2 items");
  if (!(ratio > 0.0 && ratio < 1.0)) throw DataError("split_dataset: ratio must be in (0,1)");
  std::vector<std::size_t> idx(items.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  const std::size_t k = static_cast<std::size_t>(ratio * static_cast<double>(items.size()));
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t i = 0; i < idx.size(); ++i)
    (i < k ? out.first : out.second).push_back(items[idx[i]]);
  return out;
}

struct TrainResult {
  std::vector<double> history;  // batch-mean loss, one entry per step
  int encode_collisions = 0;
};

// Plain SGD over shuffled mini-batches. One tape per step carries the whole
// batch; per-image losses are averaged left-to-right so repeated runs with
// one seed are bitwise identical.
inline TrainResult train(Network& net, const std::vector<AnnotatedImage>& dataset,
                         const TrainConfig& cfg) {
  if (dataset.empty()) throw DataError("train: empty dataset");
  if (cfg.steps < 1) throw DataError("train: step count must be >= 1");
  if (cfg.batch < 1) throw DataError("train: batch size must be >= 1");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr)) throw DataError("train: bad learning rate");

  const GridSpec grid = net.config.grid;
  TrainResult result;
  std::vector<Tensor> targets;
  targets.reserve(dataset.size());
  for (const AnnotatedImage& img : dataset) {
    if (img.pixels.rank() != 3 || img.pixels.extent(1) != net.config.input_size ||
        img.pixels.extent(2) != net.config.input_size)
      throw DataError("train: image " + img.source_id + " does not match network input size");
    std::vector<std::pair<BBox, int>> gts;
    for (const LabelRecord& l : img.labels) gts.emplace_back(l.box, l.category);
    EncodeResult enc = encode_targets(gts, grid);
    result.encode_collisions += enc.collisions;
    targets.push_back(std::move(enc.target));
  }

  Rng rng(cfg.seed);
  const std::size_t n = dataset.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  std::size_t cursor = 0;

  result.history.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    Tape tape;
    std::vector<Var> pvars;
    Var mean_loss{};
    for (std::size_t k = 0; k < batch; ++k) {
      if (cursor == n) {
        rng.shuffle(order);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      Var out = forward_on_tape(net, tape, dataset[i].pixels, &pvars);
      Var l = yolo_loss(tape, out, targets[i], grid, cfg.weights);
      mean_loss = k == 0 ? l : tape.add(mean_loss, l);
    }
    if (batch > 1) mean_loss = tape.scale(mean_loss, 1.0 / static_cast<double>(batch));

    const double loss_value = tape.value(mean_loss)[0];
    if (!std::isfinite(loss_value))
      throw DivergedError("train: non-finite loss at step " + std::to_string(step + 1));
    result.history.push_back(loss_value);

    tape.backward(mean_loss);
    try {
      for (std::size_t p = 0; p < net.params.size(); ++p)
        sgd_step(net.params[p], tape.grad(pvars[p]), cfg.lr);
    } catch (const DivergedError& e) {
      throw DivergedError(std::string(e.what()) + " at step " + std::to_string(step + 1));
    }
  }
  net.meta.steps += static_cast<std::uint64_t>(cfg.steps);
  net.meta.final_loss = result.history.back();
  net.meta.seed = cfg.seed;
  return result;
}

inline void write_history_csv(const std::vector<double>& history,
                              const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw DataError("cannot write history file: " + path.string());
  f << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < history.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i + 1, history[i]);
    f << buf;
  }
}

}  // namespace roadinv

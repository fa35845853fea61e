#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "roadinv/autodiff.hpp"
#include "roadinv/geometry.hpp"
#include "roadinv/rng.hpp"
#include "roadinv/tensor.hpp"

namespace roadinv {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LayerDesc {
  enum class Kind : std::uint32_t { Conv = 0, MaxPool2 = 1, LeakyRelu = 2 };
  Kind kind = Kind::Conv;
  int out_channels = 0;  // conv only
  int ksize = 3;         // conv only
  int stride = 1;        // conv only
  int pad = 1;           // conv only
  double alpha = 0.1;    // leaky_relu only

  static LayerDesc conv(int out_channels, int ksize = 3, int stride = 1, int pad = 1) {
    return {Kind::Conv, out_channels, ksize, stride, pad, 0.0};
  }
  static LayerDesc maxpool2() { return {Kind::MaxPool2, 0, 0, 0, 0, 0.0}; }
  static LayerDesc leaky_relu(double alpha = 0.1) {
    return {Kind::LeakyRelu, 0, 0, 0, 0, alpha};
  }
};

// Backbone ends in a dense layer to s*s*(5b+c) followed by the squashing
// head: sigmoid on box/confidence slots, per-cell softmax on categories.
struct NetworkConfig {
  int input_size = 112;
  int channels = 3;
  std::vector<LayerDesc> backbone;
  GridSpec grid{7, 2, 3};

  static NetworkConfig defaults() {
    NetworkConfig cfg;
    for (int width : {16, 32, 64, 64}) {
      cfg.backbone.push_back(LayerDesc::conv(width));
      cfg.backbone.push_back(LayerDesc::leaky_relu(0.1));
      cfg.backbone.push_back(LayerDesc::maxpool2());
    }
    return cfg;
  }
};

// Walks the layer chain, throws ConfigError naming the offending layer.
// Returns the flattened feature length feeding the final dense layer.
inline std::int64_t backbone_flat_len(const NetworkConfig& cfg) {
  if (cfg.input_size < 1 || cfg.channels < 1 || !cfg.grid.valid())
    throw ConfigError("config: input_size, channels and grid must be positive");
  int c = cfg.channels, h = cfg.input_size, w = cfg.input_size;
  for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
    const LayerDesc& l = cfg.backbone[i];
    const std::string where = "layer " + std::to_string(i);
    switch (l.kind) {
      case LayerDesc::Kind::Conv: {
        if (l.out_channels < 1 || l.ksize < 1 || l.stride < 1 || l.pad < 0)
          throw ConfigError(where + " (conv): bad parameters");
        if (l.ksize > h + 2 * l.pad || l.ksize > w + 2 * l.pad)
          throw ConfigError(where + " (conv): kernel exceeds padded input");
        h = (h + 2 * l.pad - l.ksize) / l.stride + 1;
        w = (w + 2 * l.pad - l.ksize) / l.stride + 1;
        c = l.out_channels;
        break;
      }
      case LayerDesc::Kind::MaxPool2: {
        if (h % 2 != 0 || w % 2 != 0)
          throw ConfigError(where + " (maxpool2): odd input " + std::to_string(h) + "x" +
                            std::to_string(w));
        h /= 2;
        w /= 2;
        break;
      }
      case LayerDesc::Kind::LeakyRelu: {
        if (!(l.alpha > 0.0 && l.alpha < 1.0))
          throw ConfigError(where + " (leaky_relu): alpha must be in (0,1)");
        break;
      }
    }
    if (h < 1 || w < 1) throw ConfigError(where + ": spatial extent collapsed to zero");
  }
  return static_cast<std::int64_t>(c) * h * w;
}

inline std::int64_t parameter_count(const NetworkConfig& cfg) {
  std::int64_t n = 0;
  int c = cfg.channels;
  for (const LayerDesc& l : cfg.backbone) {
    if (l.kind == LayerDesc::Kind::Conv) {
      n += static_cast<std::int64_t>(l.out_channels) * c * l.ksize * l.ksize + l.out_channels;
      c = l.out_channels;
    }
  }
  const std::int64_t flat = backbone_flat_len(cfg);
  n += flat * cfg.grid.output_len() + cfg.grid.output_len();
  return n;
}

struct TrainMeta {
  std::uint64_t steps = 0;
  double final_loss = 0.0;
  std::uint64_t seed = 0;
};

struct Network {
  NetworkConfig config;
  // conv kernel/bias pairs in layer order, then dense weights and bias
  std::vector<Tensor> params;
  TrainMeta meta;
};

// He-style fan-in scaled uniform init, fully determined by the seed.
inline Network build_network(const NetworkConfig& cfg, std::uint64_t seed) {
  const std::int64_t flat = backbone_flat_len(cfg);  // validates the chain
  Network net;
  net.config = cfg;
  net.meta.seed = seed;
  Rng rng(seed);
  auto he_fill = [&rng](Tensor& t, std::int64_t fan_in) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-limit, limit);
  };
  int c = cfg.channels;
  for (const LayerDesc& l : cfg.backbone) {
    if (l.kind != LayerDesc::Kind::Conv) continue;
    Tensor k({l.out_channels, c, l.ksize, l.ksize});
    he_fill(k, static_cast<std::int64_t>(c) * l.ksize * l.ksize);
    net.params.push_back(std::move(k));
    net.params.push_back(Tensor({l.out_channels}));  // zero bias
    c = l.out_channels;
  }
  Tensor w({cfg.grid.output_len(), static_cast<int>(flat)});
  he_fill(w, flat);
  net.params.push_back(std::move(w));
  net.params.push_back(Tensor({cfg.grid.output_len()}));
  return net;
}

// ---------------------------------------------------------------------------
// Prediction head squash as a fused tape op.

inline Tensor head_squash_fwd(const Tensor& logits, const GridSpec& grid) {
  Tensor out(logits.shape());
  const int stride = grid.cell_stride();
  for (int cell = 0; cell < grid.s * grid.s; ++cell) {
    const int base = cell * stride;
    for (int i = 0; i < 5 * grid.b; ++i) out[base + i] = sigmoid_scalar(logits[base + i]);
    // per-cell softmax, shifted by the max logit
    double mx = logits[base + 5 * grid.b];
    for (int c = 1; c < grid.c; ++c) mx = std::max(mx, logits[base + 5 * grid.b + c]);
    double sum = 0.0;
    for (int c = 0; c < grid.c; ++c) {
      const double e = std::exp(logits[base + 5 * grid.b + c] - mx);
      out[base + 5 * grid.b + c] = e;
      sum += e;
    }
    for (int c = 0; c < grid.c; ++c) out[base + 5 * grid.b + c] /= sum;
  }
  return out;
}

inline Var head_squash(Tape& tape, Var logits, const GridSpec& grid) {
  const Tensor& in = tape.value(logits);
  if (in.size() != grid.output_len())
    throw ShapeError("head_squash: logits length does not match grid");
  Tensor out = head_squash_fwd(in, grid);
  const int a = logits.id;
  return tape.custom({a}, std::move(out), [a, grid](Tape& t) {
    const Tensor& outv = t.value_of_current();
    const Tensor& dy = t.grad_of_current();
    Tensor& dx = t.grad_of(a);
    const int stride = grid.cell_stride();
    for (int cell = 0; cell < grid.s * grid.s; ++cell) {
      const int base = cell * stride;
      for (int i = 0; i < 5 * grid.b; ++i) {
        const double s = outv[base + i];
        dx[base + i] += dy[base + i] * s * (1.0 - s);
      }
      double dot = 0.0;
      for (int c = 0; c < grid.c; ++c)
        dot += dy[base + 5 * grid.b + c] * outv[base + 5 * grid.b + c];
      for (int c = 0; c < grid.c; ++c) {
        const double s = outv[base + 5 * grid.b + c];
        dx[base + 5 * grid.b + c] += s * (dy[base + 5 * grid.b + c] - dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Forward pass. The tape variant exposes the parameter leaves so training
// can read their gradients; passing the same param_vars back in reuses the
// leaves, letting a whole batch share one tape. Inference runs on a
// throwaway tape.

inline Var forward_on_tape(const Network& net, Tape& tape, const Tensor& image,
                           std::vector<Var>* param_vars) {
  const NetworkConfig& cfg = net.config;
  if (image.rank() != 3 || image.extent(0) != cfg.channels ||
      image.extent(1) != cfg.input_size || image.extent(2) != cfg.input_size)
    throw ShapeError("forward: image must be [" + std::to_string(cfg.channels) + "," +
                     std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                     "], got " + Tensor::shape_str(image.shape()));
  for (std::int64_t i = 0; i < image.size(); ++i)
    if (!(image[i] >= 0.0 && image[i] <= 1.0))
      throw NumericError("forward: pixel values must lie in [0,1]");

  std::vector<Var> pvars;
  if (param_vars && param_vars->size() == net.params.size()) {
    pvars = *param_vars;
  } else {
    pvars.reserve(net.params.size());
    for (const Tensor& p : net.params) pvars.push_back(tape.leaf_ref(&p));
  }

  Var x = tape.leaf_ref(&image);
  std::size_t pi = 0;
  for (const LayerDesc& l : cfg.backbone) {
    switch (l.kind) {
      case LayerDesc::Kind::Conv:
        x = tape.conv2d(x, pvars[pi], pvars[pi + 1], l.stride, l.pad);
        pi += 2;
        break;
      case LayerDesc::Kind::MaxPool2:
        x = tape.maxpool2(x);
        break;
      case LayerDesc::Kind::LeakyRelu:
        x = tape.activation(x, Activation::leaky_relu(l.alpha));
        break;
    }
  }
  const Tensor& feat = tape.value(x);
  x = tape.reshape(x, {static_cast<int>(feat.size())});
  x = tape.dense(x, pvars[pi], pvars[pi + 1]);
  x = head_squash(tape, x, cfg.grid);
  if (param_vars) *param_vars = std::move(pvars);
  return x;
}

inline Tensor forward(const Network& net, const Tensor& image) {
  Tape tape;
  Var out = forward_on_tape(net, tape, image, nullptr);
  return tape.value(out);
}

// ---------------------------------------------------------------------------
// Checkpoint format, little-endian throughout:
//   magic "RDIV" | u32 version=1 | u32 input_size | u32 channels
//   u32 S | u32 B | u32 C | u32 layer_count
//   per layer: u32 kind, then conv: u32 out_ch,u32 k,u32 stride,u32 pad
//                        leaky_relu: f64 alpha
//   u64 steps | f64 final_loss | u64 seed
//   u64 param_count | param_count * f64

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& s, double v) { put_u64(s, std::bit_cast<std::uint64_t>(v)); }

class ByteReader {
 public:
  ByteReader(const std::string& buf) : buf_(buf) {}
  std::size_t offset() const { return off_; }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[off_ + i])) << (8 * i);
    off_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[off_ + i])) << (8 * i);
    off_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }

 private:
  void need(std::size_t n) {
    if (off_ + n > buf_.size())
      throw CheckpointError("corrupt checkpoint: truncated at byte offset " +
                            std::to_string(off_) + " (need " + std::to_string(n) + " more)");
  }
  const std::string& buf_;
  std::size_t off_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string serialize_checkpoint(const Network& net) {
  std::string s;
  s += "RDIV";
  detail::put_u32(s, kCheckpointVersion);
  detail::put_u32(s, static_cast<std::uint32_t>(net.config.input_size));
  detail::put_u32(s, static_cast<std::uint32_t>(net.config.channels));
  detail::put_u32(s, static_cast<std::uint32_t>(net.config.grid.s));
  detail::put_u32(s, static_cast<std::uint32_t>(net.config.grid.b));
  detail::put_u32(s, static_cast<std::uint32_t>(net.config.grid.c));
  detail::put_u32(s, static_cast<std::uint32_t>(net.config.backbone.size()));
  for (const LayerDesc& l : net.config.backbone) {
    detail::put_u32(s, static_cast<std::uint32_t>(l.kind));
    if (l.kind == LayerDesc::Kind::Conv) {
      detail::put_u32(s, static_cast<std::uint32_t>(l.out_channels));
      detail::put_u32(s, static_cast<std::uint32_t>(l.ksize));
      detail::put_u32(s, static_cast<std::uint32_t>(l.stride));
      detail::put_u32(s, static_cast<std::uint32_t>(l.pad));
    } else if (l.kind == LayerDesc::Kind::LeakyRelu) {
      detail::put_f64(s, l.alpha);
    }
  }
  detail::put_u64(s, net.meta.steps);
  detail::put_f64(s, net.meta.final_loss);
  detail::put_u64(s, net.meta.seed);
  std::int64_t count = 0;
  for (const Tensor& p : net.params) count += p.size();
  detail::put_u64(s, static_cast<std::uint64_t>(count));
  for (const Tensor& p : net.params)
    for (std::int64_t i = 0; i < p.size(); ++i) detail::put_f64(s, p[i]);
  return s;
}

inline Network deserialize_checkpoint(const std::string& buf) {
  if (buf.size() < 4 || buf.compare(0, 4, "RDIV") != 0)
    throw CheckpointError("corrupt checkpoint: bad magic at byte offset 0");
  detail::ByteReader r(buf);
  (void)r.u32();  // magic, already checked
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                          " at byte offset 4");
  NetworkConfig cfg;
  cfg.backbone.clear();
  cfg.input_size = static_cast<int>(r.u32());
  cfg.channels = static_cast<int>(r.u32());
  cfg.grid.s = static_cast<int>(r.u32());
  cfg.grid.b = static_cast<int>(r.u32());
  cfg.grid.c = static_cast<int>(r.u32());
  const std::uint32_t layers = r.u32();
  for (std::uint32_t i = 0; i < layers; ++i) {
    const std::size_t at = r.offset();
    const std::uint32_t kind = r.u32();
    LayerDesc l;
    if (kind == 0) {
      l.kind = LayerDesc::Kind::Conv;
      l.out_channels = static_cast<int>(r.u32());
      l.ksize = static_cast<int>(r.u32());
      l.stride = static_cast<int>(r.u32());
      l.pad = static_cast<int>(r.u32());
    } else if (kind == 1) {
      l = LayerDesc::maxpool2();
    } else if (kind == 2) {
      l.kind = LayerDesc::Kind::LeakyRelu;
      l.alpha = r.f64();
    } else {
      throw CheckpointError("corrupt checkpoint: unknown layer kind " + std::to_string(kind) +
                            " at byte offset " + std::to_string(at));
    }
    cfg.backbone.push_back(l);
  }
  TrainMeta meta;
  meta.steps = r.u64();
  meta.final_loss = r.f64();
  meta.seed = r.u64();
  const std::uint64_t count = r.u64();
  std::int64_t expected;
  try {
    expected = parameter_count(cfg);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("corrupt checkpoint: invalid config (") + e.what() + ")");
  }
  if (static_cast<std::int64_t>(count) != expected)
    throw CheckpointError("corrupt checkpoint: parameter count " + std::to_string(count) +
                          " does not match config (" + std::to_string(expected) + ")");
  Network net;
  net.config = cfg;
  net.meta = meta;
  // rebuild the parameter tensors with the config's shapes
  int c = cfg.channels;
  for (const LayerDesc& l : cfg.backbone) {
    if (l.kind != LayerDesc::Kind::Conv) continue;
    net.params.push_back(Tensor({l.out_channels, c, l.ksize, l.ksize}));
    net.params.push_back(Tensor({l.out_channels}));
    c = l.out_channels;
  }
  const std::int64_t flat = backbone_flat_len(cfg);
  net.params.push_back(Tensor({cfg.grid.output_len(), static_cast<int>(flat)}));
  net.params.push_back(Tensor({cfg.grid.output_len()}));
  for (Tensor& p : net.params)
    for (std::int64_t i = 0; i < p.size(); ++i) p[i] = r.f64();
  return net;
}

inline void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(net);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write failed: " + path.string());
}

inline Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path.string());
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf);
}

}  // namespace roadinv

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "roadinv/tensor.hpp"

namespace roadinv {

struct DivergedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Elementwise activations

struct Activation {
  enum class Kind { LeakyRelu, Sigmoid, Identity };
  Kind kind = Kind::Identity;
  double alpha = 0.1;

  static Activation leaky_relu(double a = 0.1) {
    if (!(a > 0.0 && a < 1.0)) throw NumericError("leaky_relu: alpha must be in (0,1)");
    return {Kind::LeakyRelu, a};
  }
  static Activation sigmoid() { return {Kind::Sigmoid, 0.0}; }
  static Activation identity() { return {Kind::Identity, 0.0}; }
};

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor activation_fwd(const Tensor& in, Activation act) {
  if (!in.all_finite()) throw NumericError("activation: non-finite input");
  Tensor out(in.shape());
  const double* x = in.data();
  double* y = out.data();
  const std::int64_t n = in.size();
  switch (act.kind) {
    case Activation::Kind::LeakyRelu:
      for (std::int64_t i = 0; i < n; ++i) y[i] = x[i] >= 0.0 ? x[i] : act.alpha * x[i];
      break;
    case Activation::Kind::Sigmoid:
      for (std::int64_t i = 0; i < n; ++i) y[i] = sigmoid_scalar(x[i]);
      break;
    case Activation::Kind::Identity:
      for (std::int64_t i = 0; i < n; ++i) y[i] = x[i];
      break;
  }
  return out;
}

inline void activation_bwd(const Tensor& in, const Tensor& out, Activation act,
                           const Tensor& dout, Tensor& din) {
  const double* x = in.data();
  const double* y = out.data();
  const double* dy = dout.data();
  double* dx = din.data();
  const std::int64_t n = in.size();
  switch (act.kind) {
    case Activation::Kind::LeakyRelu:
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * (x[i] >= 0.0 ? 1.0 : act.alpha);
      break;
    case Activation::Kind::Sigmoid:
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i] * y[i] * (1.0 - y[i]);
      break;
    case Activation::Kind::Identity:
      for (std::int64_t i = 0; i < n; ++i) dx[i] += dy[i];
      break;
  }
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation (no kernel flip), input [Cin,H,W],
// kernels [Cout,Cin,k,k], bias [Cout]

inline void conv2d_check(const Tensor& in, const Tensor& k, const Tensor& bias,
                         int stride, int padding) {
  if (in.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + Tensor::shape_str(in.shape()));
  if (k.rank() != 4) throw ShapeError("conv2d: kernels must be [Cout,Cin,k,k], got " + Tensor::shape_str(k.shape()));
  if (k.extent(2) != k.extent(3)) throw ShapeError("conv2d: kernel must be square");
  if (k.extent(1) != in.extent(0))
    throw ShapeError("conv2d: input has " + std::to_string(in.extent(0)) +
                     " channels but kernels expect " + std::to_string(k.extent(1)));
  if (bias.rank() != 1 || bias.extent(0) != k.extent(0))
    throw ShapeError("conv2d: bias must be [Cout]");
  if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (padding < 0) throw ShapeError("conv2d: padding must be >= 0");
  const int kk = k.extent(2);
  if (kk > in.extent(1) + 2 * padding || kk > in.extent(2) + 2 * padding)
    throw ShapeError("conv2d: kernel larger than padded input");
}

inline Tensor conv2d_fwd(const Tensor& in, const Tensor& k, const Tensor& bias,
                         int stride, int padding) {
  conv2d_check(in, k, bias, stride, padding);
  const int Cin = in.extent(0), H = in.extent(1), W = in.extent(2);
  const int Cout = k.extent(0), kk = k.extent(2);
  const int Hp = (H + 2 * padding - kk) / stride + 1;
  const int Wp = (W + 2 * padding - kk) / stride + 1;
  Tensor out({Cout, Hp, Wp});

  const double* ind = in.data();
  const double* kd = k.data();
  double* od = out.data();

  for (int co = 0; co < Cout; ++co) {
    double* outc = od + static_cast<std::int64_t>(co) * Hp * Wp;
    const double bv = bias[co];
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(Hp) * Wp; ++i) outc[i] = bv;
    for (int ci = 0; ci < Cin; ++ci) {
      const double* inc = ind + static_cast<std::int64_t>(ci) * H * W;
      const double* kc = kd + (static_cast<std::int64_t>(co) * Cin + ci) * kk * kk;
      for (int kh = 0; kh < kk; ++kh) {
        for (int kw = 0; kw < kk; ++kw) {
          const double w = kc[kh * kk + kw];
          const int hlo = padding - kh;
          const int oh0 = hlo <= 0 ? 0 : (hlo + stride - 1) / stride;
          const int hhi = H - 1 + padding - kh;
          const int oh1 = std::min(Hp - 1, hhi < 0 ? -1 : hhi / stride);
          const int wlo = padding - kw;
          const int ow0 = wlo <= 0 ? 0 : (wlo + stride - 1) / stride;
          const int whi = W - 1 + padding - kw;
          const int ow1 = std::min(Wp - 1, whi < 0 ? -1 : whi / stride);
          for (int oh = oh0; oh <= oh1; ++oh) {
            const int ih = oh * stride - padding + kh;
            const double* inr = inc + static_cast<std::int64_t>(ih) * W - padding + kw;
            double* outr = outc + static_cast<std::int64_t>(oh) * Wp;
            if (stride == 1) {
              for (int ow = ow0; ow <= ow1; ++ow) outr[ow] += w * inr[ow];
            } else {
              for (int ow = ow0; ow <= ow1; ++ow) outr[ow] += w * inr[ow * stride];
            }
          }
        }
      }
    }
  }
  return out;
}

inline void conv2d_bwd(const Tensor& in, const Tensor& k, int stride, int padding,
                       const Tensor& dout, Tensor& din, Tensor& dk, Tensor& dbias) {
  const int Cin = in.extent(0), H = in.extent(1), W = in.extent(2);
  const int Cout = k.extent(0), kk = k.extent(2);
  const int Hp = dout.extent(1), Wp = dout.extent(2);

  const double* ind = in.data();
  const double* kd = k.data();
  const double* dod = dout.data();
  double* dind = din.data();
  double* dkd = dk.data();

  for (int co = 0; co < Cout; ++co) {
    const double* doutc = dod + static_cast<std::int64_t>(co) * Hp * Wp;
    double acc = 0.0;
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(Hp) * Wp; ++i) acc += doutc[i];
    dbias[co] += acc;
    for (int ci = 0; ci < Cin; ++ci) {
      const double* inc = ind + static_cast<std::int64_t>(ci) * H * W;
      double* dinc = dind + static_cast<std::int64_t>(ci) * H * W;
      const double* kc = kd + (static_cast<std::int64_t>(co) * Cin + ci) * kk * kk;
      double* dkc = dkd + (static_cast<std::int64_t>(co) * Cin + ci) * kk * kk;
      for (int kh = 0; kh < kk; ++kh) {
        for (int kw = 0; kw < kk; ++kw) {
          const double w = kc[kh * kk + kw];
          const int hlo = padding - kh;
          const int oh0 = hlo <= 0 ? 0 : (hlo + stride - 1) / stride;
          const int hhi = H - 1 + padding - kh;
          const int oh1 = std::min(Hp - 1, hhi < 0 ? -1 : hhi / stride);
          const int wlo = padding - kw;
          const int ow0 = wlo <= 0 ? 0 : (wlo + stride - 1) / stride;
          const int whi = W - 1 + padding - kw;
          const int ow1 = std::min(Wp - 1, whi < 0 ? -1 : whi / stride);
          double wacc = 0.0;
          for (int oh = oh0; oh <= oh1; ++oh) {
            const int ih = oh * stride - padding + kh;
            const double* inr = inc + static_cast<std::int64_t>(ih) * W - padding + kw;
            double* dinr = dinc + static_cast<std::int64_t>(ih) * W - padding + kw;
            const double* doutr = doutc + static_cast<std::int64_t>(oh) * Wp;
            if (stride == 1) {
              for (int ow = ow0; ow <= ow1; ++ow) {
                wacc += doutr[ow] * inr[ow];
                dinr[ow] += w * doutr[ow];
              }
            } else {
              for (int ow = ow0; ow <= ow1; ++ow) {
                wacc += doutr[ow] * inr[ow * stride];
                dinr[ow * stride] += w * doutr[ow];
              }
            }
          }
          dkc[kh * kk + kw] += wacc;
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// maxpool2: 2x2 window, stride 2; argmax saved for the adjoint,
// ties resolved to the lowest row-major input index

inline Tensor maxpool2_fwd(const Tensor& in, std::vector<std::int32_t>* argmax) {
  if (in.rank() != 3) throw ShapeError("maxpool2: input must be [C,H,W]");
  const int C = in.extent(0), H = in.extent(1), W = in.extent(2);
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError("maxpool2: H and W must be even, got " + Tensor::shape_str(in.shape()));
  const int Hp = H / 2, Wp = W / 2;
  Tensor out({C, Hp, Wp});
  if (argmax) argmax->resize(static_cast<std::size_t>(C) * Hp * Wp);
  const double* ind = in.data();
  double* od = out.data();
  std::int64_t oi = 0;
  for (int c = 0; c < C; ++c) {
    const double* inc = ind + static_cast<std::int64_t>(c) * H * W;
    for (int oh = 0; oh < Hp; ++oh) {
      for (int ow = 0; ow < Wp; ++ow, ++oi) {
        const int ih = 2 * oh, iw = 2 * ow;
        std::int32_t best = static_cast<std::int32_t>(ih * W + iw);
        double bv = inc[best];
        const int cand[3] = {ih * W + iw + 1, (ih + 1) * W + iw, (ih + 1) * W + iw + 1};
        for (int idx : cand) {
          if (inc[idx] > bv) {
            bv = inc[idx];
            best = static_cast<std::int32_t>(idx);
          }
        }
        od[oi] = bv;
        if (argmax) (*argmax)[static_cast<std::size_t>(oi)] =
            best + static_cast<std::int32_t>(c * H * W);
      }
    }
  }
  return out;
}

inline void maxpool2_bwd(const std::vector<std::int32_t>& argmax, const Tensor& dout,
                         Tensor& din) {
  const double* dy = dout.data();
  double* dx = din.data();
  for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[i];
}

// ---------------------------------------------------------------------------
// dense: y = W x + b, W [m,n], x [n], b [m]

inline Tensor dense_fwd(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 1 || w.rank() != 2 || b.rank() != 1)
    throw ShapeError("dense: expects x[n], W[m,n], b[m]");
  const int m = w.extent(0), n = w.extent(1);
  if (x.extent(0) != n || b.extent(0) != m)
    throw ShapeError("dense: dimension mismatch x" + Tensor::shape_str(x.shape()) +
                     " W" + Tensor::shape_str(w.shape()) + " b" + Tensor::shape_str(b.shape()));
  Tensor y({m});
  const double* xd = x.data();
  const double* wd = w.data();
  for (int i = 0; i < m; ++i) {
    const double* row = wd + static_cast<std::int64_t>(i) * n;
    double acc = b[i];
    for (int j = 0; j < n; ++j) acc += row[j] * xd[j];
    y[i] = acc;
  }
  return y;
}

inline void dense_bwd(const Tensor& x, const Tensor& w, const Tensor& dy,
                      Tensor& dx, Tensor& dw, Tensor& db) {
  const int m = w.extent(0), n = w.extent(1);
  const double* xd = x.data();
  const double* wd = w.data();
  const double* dyd = dy.data();
  double* dxd = dx.data();
  double* dwd = dw.data();
  for (int i = 0; i < m; ++i) {
    const double g = dyd[i];
    db[i] += g;
    const double* row = wd + static_cast<std::int64_t>(i) * n;
    double* drow = dwd + static_cast<std::int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      drow[j] += g * xd[j];
      dxd[j] += g * row[j];
    }
  }
}

// ---------------------------------------------------------------------------
// Tape: records the forward pass, replays adjoints in reverse order.

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Var leaf(Tensor value) {
    nodes_.push_back(Node{std::move(value), nullptr, {}, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  // Borrowed leaf: caller keeps *value alive and unchanged for the tape's life.
  Var leaf_ref(const Tensor* value) {
    nodes_.push_back(Node{Tensor(), value, {}, {}});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var conv2d(Var in, Var k, Var bias, int stride, int padding) {
    Tensor out = conv2d_fwd(value(in), value(k), value(bias), stride, padding);
    const int a = in.id, b = k.id, c = bias.id;
    return push(std::move(out), {a, b, c}, [a, b, c, stride, padding](Tape& t) {
      const int self = t.cursor_;
      conv2d_bwd(t.value_at(a), t.value_at(b), stride, padding, t.grads_[self],
                 t.grads_[a], t.grads_[b], t.grads_[c]);
    });
  }

  Var maxpool2(Var in) {
    auto argmax = std::make_shared<std::vector<std::int32_t>>();
    Tensor out = maxpool2_fwd(value(in), argmax.get());
    const int a = in.id;
    return push(std::move(out), {a}, [a, argmax](Tape& t) {
      maxpool2_bwd(*argmax, t.grads_[t.cursor_], t.grads_[a]);
    });
  }

  Var dense(Var x, Var w, Var b) {
    Tensor out = dense_fwd(value(x), value(w), value(b));
    const int a = x.id, c = w.id, d = b.id;
    return push(std::move(out), {a, c, d}, [a, c, d](Tape& t) {
      dense_bwd(t.value_at(a), t.value_at(c), t.grads_[t.cursor_], t.grads_[a],
                t.grads_[c], t.grads_[d]);
    });
  }

  Var activation(Var in, Activation act) {
    Tensor out = activation_fwd(value(in), act);
    const int a = in.id;
    return push(std::move(out), {a}, [a, act](Tape& t) {
      const int self = t.cursor_;
      activation_bwd(t.value_at(a), t.value_at(self), act, t.grads_[self], t.grads_[a]);
    });
  }

  Var reshape(Var in, std::vector<int> shape) {
    const Tensor& v = value(in);
    Tensor out(shape);
    if (out.size() != v.size()) throw ShapeError("reshape: element count mismatch");
    for (std::int64_t i = 0; i < v.size(); ++i) out[i] = v[i];
    const int a = in.id;
    return push(std::move(out), {a}, [a](Tape& t) {
      const Tensor& dy = t.grads_[t.cursor_];
      Tensor& dx = t.grads_[a];
      for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
  }

  Var add(Var x, Var y) {
    const Tensor& a = value(x);
    const Tensor& b = value(y);
    if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    const int ia = x.id, ib = y.id;
    return push(std::move(out), {ia, ib}, [ia, ib](Tape& t) {
      const Tensor& dy = t.grads_[t.cursor_];
      for (std::int64_t i = 0; i < dy.size(); ++i) {
        t.grads_[ia][i] += dy[i];
        t.grads_[ib][i] += dy[i];
      }
    });
  }

  Var scale(Var x, double s) {
    const Tensor& a = value(x);
    Tensor out(a.shape());
    for (std::int64_t i = 0; i < a.size(); ++i) out[i] = s * a[i];
    const int ia = x.id;
    return push(std::move(out), {ia}, [ia, s](Tape& t) {
      const Tensor& dy = t.grads_[t.cursor_];
      for (std::int64_t i = 0; i < dy.size(); ++i) t.grads_[ia][i] += s * dy[i];
    });
  }

  // Extension point for fused ops (prediction head, detector loss).
  // fn accumulates into grads of the listed inputs; the node's own grad is
  // available as grad_of_current().
  Var custom(std::vector<int> inputs, Tensor value, BackwardFn fn) {
    return push(std::move(value), std::move(inputs), std::move(fn));
  }

  const Tensor& value(Var v) const { return value_at(v.id); }
  const Tensor& value_at(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ext ? *n.ext : n.owned;
  }

  const Tensor& grad(Var v) const { return grads_[static_cast<std::size_t>(v.id)]; }
  Tensor& grad_of(int id) { return grads_[static_cast<std::size_t>(id)]; }
  // Valid only inside a backward function: the node being visited.
  Tensor& grad_of_current() { return grads_[static_cast<std::size_t>(cursor_)]; }
  const Tensor& value_of_current() const { return value_at(cursor_); }

  std::size_t node_count() const { return nodes_.size(); }
  int last_backward_visits() const { return visits_; }

  // Reverse sweep from a scalar loss. Every node at or before the loss is
  // visited exactly once; rerunning produces identical gradients.
  void backward(Var loss) {
    if (!loss.valid() || loss.id >= static_cast<int>(nodes_.size()))
      throw ShapeError("backward: loss is not a tape node");
    if (value(loss).size() != 1) throw ShapeError("backward: loss must be scalar");
    grads_.resize(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Tensor& v = value_at(static_cast<int>(i));
      if (!grads_[i].same_shape(v)) grads_[i] = Tensor(v.shape());
      else grads_[i].fill(0.0);
    }
    grads_[static_cast<std::size_t>(loss.id)][0] = 1.0;
    visits_ = 0;
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      ++visits_;
      if (n.back) {
        cursor_ = i;
        n.back(*this);
      }
    }
  }

 private:
  struct Node {
    Tensor owned;
    const Tensor* ext = nullptr;  // set for borrowed leaves only
    std::vector<int> inputs;
    BackwardFn back;
  };

  Var push(Tensor value, std::vector<int> inputs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), nullptr, std::move(inputs), std::move(fn)});
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  int cursor_ = -1;
  int visits_ = 0;
};

// ---------------------------------------------------------------------------
// Plain SGD. A non-finite gradient aborts the step before touching params.

inline void sgd_step(Tensor& param, const Tensor& grad, double lr) {
  if (!param.same_shape(grad)) throw ShapeError("sgd_step: param/grad shape mismatch");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw NumericError("sgd_step: lr must be positive and finite");
  if (!grad.all_finite()) throw DivergedError("sgd_step: non-finite gradient");
  double* p = param.data();
  const double* g = grad.data();
  for (std::int64_t i = 0; i < param.size(); ++i) p[i] -= lr * g[i];
}

inline void sgd_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, double lr) {
  if (params.size() != grads.size()) throw ShapeError("sgd_step: param/grad count mismatch");
  for (const Tensor& g : grads)
    if (!g.all_finite()) throw DivergedError("sgd_step: non-finite gradient");
  for (std::size_t i = 0; i < params.size(); ++i) sgd_step(params[i], grads[i], lr);
}

}  // namespace roadinv

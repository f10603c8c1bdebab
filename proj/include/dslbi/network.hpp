#pragma once

// Fixed sequential networks with exact reverse-mode gradients.
//
// Layouts: dense inputs are [n, features]; conv/pool inputs are [n, channels, height, width].
// Dense weights are out x in, conv weights are c_out x c_in x k x k. Every trainable layer
// carries a weight tensor in slot 0 and (optionally) a bias in slot 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "dslbi/error.hpp"
#include "dslbi/tensor.hpp"

namespace dslbi {

enum class ActivationKind { relu, softplus, sigmoid, tanh };
enum class LossKind { mse, softmax_cross_entropy };

struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  bool bias = true;
  friend bool operator==(const Dense&, const Dense&) = default;
};

/// Stride 1, zero padding of size/2 so spatial extent is preserved; size must be odd.
struct Conv2d {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t size = 3;
  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

struct Activation {
  ActivationKind kind = ActivationKind::relu;
  double c = 1.0;  // softplus sharpness
  friend bool operator==(const Activation&, const Activation&) = default;
};

/// 2x2 window, stride 2.
struct MaxPool {
  friend bool operator==(const MaxPool&, const MaxPool&) = default;
};

struct Flatten {
  friend bool operator==(const Flatten&, const Flatten&) = default;
};

using LayerKind = std::variant<Dense, Conv2d, Activation, MaxPool, Flatten>;

struct Layer {
  LayerKind kind;
  std::vector<Tensor> params;
};

struct Network {
  std::vector<Layer> layers;
  LossKind loss = LossKind::mse;
};

/// Position of a trainable tensor: slot 0 is the weight, slot 1 the bias.
struct ParamId {
  std::size_t layer = 0;
  std::size_t slot = 0;
  bool is_weight() const { return slot == 0; }
  friend bool operator==(const ParamId&, const ParamId&) = default;
};

inline double softplus(double x, double c) {
  const double z = c * x;
  return z > 0 ? x + std::log1p(std::exp(-z)) / c : std::log1p(std::exp(z)) / c;
}

inline double sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

inline bool has_params(const LayerKind& kind) {
  return std::holds_alternative<Dense>(kind) || std::holds_alternative<Conv2d>(kind);
}

/// Builds a network with zero-filled parameters of the right shapes.
inline Network make_network(const std::vector<LayerKind>& kinds, LossKind loss) {
  Network net;
  net.loss = loss;
  for (const auto& kind : kinds) {
    Layer layer{kind, {}};
    if (const auto* d = std::get_if<Dense>(&kind)) {
      if (d->in == 0 || d->out == 0) throw std::invalid_argument("dense layer needs positive in/out");
      layer.params.emplace_back(Shape{d->out, d->in});
      if (d->bias) layer.params.emplace_back(Shape{d->out});
    } else if (const auto* c = std::get_if<Conv2d>(&kind)) {
      if (c->c_in == 0 || c->c_out == 0 || c->size % 2 == 0)
        throw std::invalid_argument("conv2d layer needs positive channels and an odd kernel size");
      layer.params.emplace_back(Shape{c->c_out, c->c_in, c->size, c->size});
      layer.params.emplace_back(Shape{c->c_out});
    } else if (const auto* a = std::get_if<Activation>(&kind)) {
      if (a->kind == ActivationKind::softplus && !(a->c > 0))
        throw std::invalid_argument("softplus sharpness c must be positive");
    }
    net.layers.push_back(std::move(layer));
  }
  return net;
}

inline std::vector<ParamId> param_ids(const Network& net) {
  std::vector<ParamId> ids;
  for (std::size_t l = 0; l < net.layers.size(); ++l)
    for (std::size_t s = 0; s < net.layers[l].params.size(); ++s) ids.push_back({l, s});
  return ids;
}

inline Tensor& param(Network& net, ParamId id) { return net.layers[id.layer].params[id.slot]; }
inline const Tensor& param(const Network& net, ParamId id) { return net.layers[id.layer].params[id.slot]; }

inline std::vector<Tensor> flat_params(const Network& net) {
  std::vector<Tensor> out;
  for (const auto& id : param_ids(net)) out.push_back(param(net, id));
  return out;
}

/// Smooth networks satisfy the differentiability the convergence monitor relies on.
inline bool is_smooth(const Network& net) {
  for (const auto& layer : net.layers) {
    if (std::holds_alternative<MaxPool>(layer.kind)) return false;
    if (const auto* a = std::get_if<Activation>(&layer.kind); a && a->kind == ActivationKind::relu) return false;
  }
  return true;
}

/// He initialization: weights ~ N(0, 2/fan_in), biases zero. One RNG stream over layers in order.
inline Network he_init(Network net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& layer : net.layers) {
    std::size_t fan_in = 0;
    if (const auto* d = std::get_if<Dense>(&layer.kind)) fan_in = d->in;
    else if (const auto* c = std::get_if<Conv2d>(&layer.kind)) fan_in = c->c_in * c->size * c->size;
    else continue;
    std::normal_distribution<double> gauss(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (double& w : layer.params[0].values()) w = gauss(rng);
    for (std::size_t s = 1; s < layer.params.size(); ++s) layer.params[s].fill(0.0);
  }
  return net;
}

namespace detail {

inline Shape layer_output_shape(const LayerKind& kind, const Shape& in, std::size_t index) {
  auto fail = [&](const std::string& msg) {
    throw std::invalid_argument("layer " + std::to_string(index) + ": " + msg + " (input shape " + shape_str(in) +
                                ")");
  };
  if (const auto* d = std::get_if<Dense>(&kind)) {
    if (in.size() != 2 || in[1] != d->in) fail("dense expects [n, " + std::to_string(d->in) + "]");
    return {in[0], d->out};
  }
  if (const auto* c = std::get_if<Conv2d>(&kind)) {
    if (in.size() != 4 || in[1] != c->c_in) fail("conv2d expects [n, " + std::to_string(c->c_in) + ", h, w]");
    return {in[0], c->c_out, in[2], in[3]};
  }
  if (std::holds_alternative<MaxPool>(kind)) {
    if (in.size() != 4 || in[2] < 2 || in[3] < 2) fail("maxpool expects [n, c, h>=2, w>=2]");
    return {in[0], in[1], in[2] / 2, in[3] / 2};
  }
  if (std::holds_alternative<Flatten>(kind)) {
    if (in.size() < 2) fail("flatten expects a batch axis and at least one feature axis");
    return {in[0], shape_size(in) / in[0]};
  }
  return in;
}

inline Tensor dense_forward(const Layer& layer, const Tensor& x) {
  const auto& d = std::get<Dense>(layer.kind);
  const Tensor& w = layer.params[0];
  const std::size_t n = x.dim(0);
  Tensor y(Shape{n, d.out});
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data() + i * d.in;
    for (std::size_t o = 0; o < d.out; ++o) {
      const double* wo = w.data() + o * d.in;
      double s = d.bias ? layer.params[1][o] : 0.0;
      for (std::size_t j = 0; j < d.in; ++j) s += wo[j] * xi[j];
      y[i * d.out + o] = s;
    }
  }
  return y;
}

inline Tensor dense_backward(const Layer& layer, const Tensor& x, const Tensor& dy, std::vector<Tensor>& grads) {
  const auto& d = std::get<Dense>(layer.kind);
  const Tensor& w = layer.params[0];
  const std::size_t n = x.dim(0);
  Tensor dx(x.shape());
  Tensor& dw = grads[0];
  for (std::size_t i = 0; i < n; ++i) {
    const double* xi = x.data() + i * d.in;
    double* dxi = dx.data() + i * d.in;
    for (std::size_t o = 0; o < d.out; ++o) {
      const double g = dy[i * d.out + o];
      if (g == 0.0) continue;
      double* dwo = dw.data() + o * d.in;
      const double* wo = w.data() + o * d.in;
      for (std::size_t j = 0; j < d.in; ++j) {
        dwo[j] += g * xi[j];
        dxi[j] += g * wo[j];
      }
      if (d.bias) grads[1][o] += g;
    }
  }
  return dx;
}

inline Tensor conv_forward(const Layer& layer, const Tensor& x) {
  const auto& c = std::get<Conv2d>(layer.kind);
  const Tensor& w = layer.params[0];
  const Tensor& b = layer.params[1];
  const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3), k = c.size;
  const long pad = static_cast<long>(k / 2);
  Tensor y(Shape{n, c.c_out, h, wd});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t co = 0; co < c.c_out; ++co)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t q = 0; q < wd; ++q) {
          double acc = b[co];
          for (std::size_t ci = 0; ci < c.c_in; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long rr = static_cast<long>(r + ky) - pad;
              if (rr < 0 || rr >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long qq = static_cast<long>(q + kx) - pad;
                if (qq < 0 || qq >= static_cast<long>(wd)) continue;
                acc += w[((co * c.c_in + ci) * k + ky) * k + kx] *
                       x[((s * c.c_in + ci) * h + static_cast<std::size_t>(rr)) * wd + static_cast<std::size_t>(qq)];
              }
            }
          y[((s * c.c_out + co) * h + r) * wd + q] = acc;
        }
  return y;
}

inline Tensor conv_backward(const Layer& layer, const Tensor& x, const Tensor& dy, std::vector<Tensor>& grads) {
  const auto& c = std::get<Conv2d>(layer.kind);
  const Tensor& w = layer.params[0];
  const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3), k = c.size;
  const long pad = static_cast<long>(k / 2);
  Tensor dx(x.shape());
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t co = 0; co < c.c_out; ++co)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t q = 0; q < wd; ++q) {
          const double g = dy[((s * c.c_out + co) * h + r) * wd + q];
          grads[1][co] += g;
          for (std::size_t ci = 0; ci < c.c_in; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky) {
              const long rr = static_cast<long>(r + ky) - pad;
              if (rr < 0 || rr >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long qq = static_cast<long>(q + kx) - pad;
                if (qq < 0 || qq >= static_cast<long>(wd)) continue;
                const std::size_t xi =
                    ((s * c.c_in + ci) * h + static_cast<std::size_t>(rr)) * wd + static_cast<std::size_t>(qq);
                const std::size_t wi = ((co * c.c_in + ci) * k + ky) * k + kx;
                grads[0][wi] += g * x[xi];
                dx[xi] += g * w[wi];
              }
            }
        }
  return dx;
}

inline double activate(const Activation& a, double v) {
  switch (a.kind) {
    case ActivationKind::relu: return v > 0 ? v : 0.0;
    case ActivationKind::softplus: return softplus(v, a.c);
    case ActivationKind::sigmoid: return sigmoid(v);
    case ActivationKind::tanh: return std::tanh(v);
  }
  return v;
}

inline double activate_grad(const Activation& a, double v) {
  switch (a.kind) {
    case ActivationKind::relu: return v > 0 ? 1.0 : 0.0;
    case ActivationKind::softplus: return sigmoid(a.c * v);
    case ActivationKind::sigmoid: {
      const double s = sigmoid(v);
      return s * (1.0 - s);
    }
    case ActivationKind::tanh: {
      const double t = std::tanh(v);
      return 1.0 - t * t;
    }
  }
  return 1.0;
}

// Index (into x) of the winning element for each pooled output; ties go to the first.
inline std::vector<std::size_t> pool_argmax(const Tensor& x) {
  const std::size_t n = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h / 2, wo = w / 2;
  std::vector<std::size_t> arg(n * ch * ho * wo);
  for (std::size_t s = 0; s < n * ch; ++s)
    for (std::size_t r = 0; r < ho; ++r)
      for (std::size_t q = 0; q < wo; ++q) {
        std::size_t best = (s * h + 2 * r) * w + 2 * q;
        for (std::size_t dr = 0; dr < 2; ++dr)
          for (std::size_t dq = 0; dq < 2; ++dq) {
            const std::size_t idx = (s * h + 2 * r + dr) * w + 2 * q + dq;
            if (x[idx] > x[best]) best = idx;
          }
        arg[(s * ho + r) * wo + q] = best;
      }
  return arg;
}

inline void check_input(const Network& net, const Tensor& x) {
  if (x.rank() < 2) throw std::invalid_argument("input batch must have a sample axis and feature axes, got " +
                                                shape_str(x.shape()));
  Shape s = x.shape();
  for (std::size_t l = 0; l < net.layers.size(); ++l) s = layer_output_shape(net.layers[l].kind, s, l);
}

inline void check_labels(const Network& net, const Tensor& out, const Tensor& y) {
  if (net.loss == LossKind::mse) {
    if (y.shape() != out.shape())
      throw std::invalid_argument("mse targets " + shape_str(y.shape()) + " do not match outputs " +
                                  shape_str(out.shape()));
    return;
  }
  if (out.rank() != 2) throw std::invalid_argument("softmax cross-entropy needs [n, classes] outputs");
  if (y.rank() != 1 || y.dim(0) != out.dim(0))
    throw std::invalid_argument("softmax cross-entropy labels must be [n] = [" + std::to_string(out.dim(0)) +
                                "], got " + shape_str(y.shape()));
  for (double v : y.values())
    if (v < 0 || v >= static_cast<double>(out.dim(1)) || v != std::floor(v))
      throw std::invalid_argument("class label " + std::to_string(v) + " outside [0, " +
                                  std::to_string(out.dim(1)) + ")");
}

// Loss and its gradient with respect to the outputs.
inline double loss_with_grad(LossKind kind, const Tensor& out, const Tensor& y, Tensor* dout) {
  const std::size_t n = out.dim(0);
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  if (kind == LossKind::mse) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = out[i] - y[i];
      loss += 0.5 * r * r;
      if (dout) (*dout)[i] = r * inv_n;
    }
    return loss * inv_n;
  }
  const std::size_t k = out.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = out.data() + i * k;
    const double zmax = *std::max_element(z, z + k);
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += std::exp(z[c] - zmax);
    const double lse = zmax + std::log(sum);
    const auto label = static_cast<std::size_t>(y[i]);
    loss += lse - z[label];
    if (dout)
      for (std::size_t c = 0; c < k; ++c)
        (*dout)[i * k + c] = (std::exp(z[c] - lse) - (c == label ? 1.0 : 0.0)) * inv_n;
  }
  return loss * inv_n;
}

struct Trace {
  std::vector<Tensor> inputs;                      // input of each layer
  std::vector<std::vector<std::size_t>> argmax;    // maxpool layers only
  Tensor output;
};

inline Trace run_forward(const Network& net, const Tensor& x) {
  check_input(net, x);
  Trace t;
  t.inputs.reserve(net.layers.size());
  t.argmax.resize(net.layers.size());
  Tensor cur = x;
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    const Layer& layer = net.layers[l];
    t.inputs.push_back(cur);
    if (std::holds_alternative<Dense>(layer.kind)) {
      cur = dense_forward(layer, cur);
    } else if (std::holds_alternative<Conv2d>(layer.kind)) {
      cur = conv_forward(layer, cur);
    } else if (const auto* a = std::get_if<Activation>(&layer.kind)) {
      for (double& v : cur.values()) v = activate(*a, v);
    } else if (std::holds_alternative<MaxPool>(layer.kind)) {
      auto arg = pool_argmax(cur);
      const Shape out_shape = layer_output_shape(layer.kind, cur.shape(), l);
      Tensor pooled(out_shape);
      for (std::size_t i = 0; i < arg.size(); ++i) pooled[i] = cur[arg[i]];
      t.argmax[l] = std::move(arg);
      cur = std::move(pooled);
    } else {
      cur = cur.reshaped(layer_output_shape(layer.kind, cur.shape(), l));
    }
  }
  t.output = std::move(cur);
  return t;
}

}  // namespace detail

struct ForwardResult {
  double loss = 0.0;
  Tensor outputs;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<Tensor> grads;  // one per parameter, in param_ids order
};

inline Tensor predict(const Network& net, const Tensor& x) { return detail::run_forward(net, x).output; }

/// Mean loss over the batch and final-layer outputs. MSE uses 1/(2n) sum of squared residuals.
inline ForwardResult forward(const Network& net, const Tensor& x, const Tensor& y) {
  Tensor out = predict(net, x);
  detail::check_labels(net, out, y);
  const double loss = detail::loss_with_grad(net.loss, out, y, nullptr);
  if (!std::isfinite(loss) || !out.all_finite()) throw NonFiniteError("forward: non-finite loss or outputs");
  return {loss, std::move(out)};
}

inline LossAndGrad loss_and_gradient(const Network& net, const Tensor& x, const Tensor& y) {
  auto trace = detail::run_forward(net, x);
  detail::check_labels(net, trace.output, y);
  Tensor delta(trace.output.shape());
  LossAndGrad result;
  result.loss = detail::loss_with_grad(net.loss, trace.output, y, &delta);
  if (!std::isfinite(result.loss)) throw NonFiniteError("backward: non-finite loss");

  std::vector<std::vector<Tensor>> per_layer(net.layers.size());
  for (std::size_t l = net.layers.size(); l-- > 0;) {
    const Layer& layer = net.layers[l];
    const Tensor& in = trace.inputs[l];
    for (const auto& p : layer.params) per_layer[l].emplace_back(p.shape());
    if (std::holds_alternative<Dense>(layer.kind)) {
      delta = detail::dense_backward(layer, in, delta, per_layer[l]);
    } else if (std::holds_alternative<Conv2d>(layer.kind)) {
      delta = detail::conv_backward(layer, in, delta, per_layer[l]);
    } else if (const auto* a = std::get_if<Activation>(&layer.kind)) {
      for (std::size_t i = 0; i < delta.size(); ++i) delta[i] *= detail::activate_grad(*a, in[i]);
    } else if (std::holds_alternative<MaxPool>(layer.kind)) {
      Tensor up(in.shape());
      const auto& arg = trace.argmax[l];
      for (std::size_t i = 0; i < arg.size(); ++i) up[arg[i]] += delta[i];
      delta = std::move(up);
    } else {
      delta = delta.reshaped(in.shape());
    }
  }
  for (auto& grads : per_layer)
    for (auto& g : grads) {
      if (!g.all_finite()) throw NonFiniteError("backward: non-finite gradient");
      result.grads.push_back(std::move(g));
    }
  return result;
}

/// Gradient of the mean batch loss with respect to every parameter.
inline std::vector<Tensor> backward(const Network& net, const Tensor& x, const Tensor& y) {
  return loss_and_gradient(net, x, y).grads;
}

/// Central differences (L(w+h) - L(w-h)) / 2h, coordinate by coordinate. Test oracle.
inline std::vector<Tensor> finite_diff_grad(const Network& net, const Tensor& x, const Tensor& y, double h) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_grad: step h must be positive");
  Network probe = net;
  std::vector<Tensor> grads;
  for (const auto& id : param_ids(net)) {
    Tensor& p = param(probe, id);
    Tensor g(p.shape());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double orig = p[i];
      p[i] = orig + h;
      const double up = forward(probe, x, y).loss;
      p[i] = orig - h;
      const double down = forward(probe, x, y).loss;
      p[i] = orig;
      g[i] = (up - down) / (2.0 * h);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

/// Fraction of argmax predictions equal to the integer label.
inline double accuracy(const Tensor& outputs, const Tensor& labels) {
  if (outputs.rank() != 2 || labels.rank() != 1 || labels.dim(0) != outputs.dim(0)) return 0.0;
  const std::size_t n = outputs.dim(0), k = outputs.dim(1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = outputs.data() + i * k;
    const auto pred = static_cast<std::size_t>(std::max_element(z, z + k) - z);
    if (static_cast<double>(pred) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace dslbi

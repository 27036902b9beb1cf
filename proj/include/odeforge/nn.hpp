#pragma once

#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "odeforge/autodiff.hpp"

namespace odeforge::nn {

using Json = nlohmann::json;

/// Fully connected layer, batch-major: y = x W + b.
struct Dense {
  Param w;
  Param b;

  Dense() = default;
  Dense(int in, int out, Rng& rng)
      : w(layer_init(in, in, out, rng)), b(layer_init(in, 1, out, rng)) {}

  int forward(Tape& t, int x) const {
    auto* self = const_cast<Dense*>(this);
    return add_bias(t, matmul(t, x, t.param(self->w)), t.param(self->b));
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

/// y = x + act(x W + b); square layer used for the encoder trunk.
struct ResidualBlock {
  Dense dense;
  Activation act = Activation::Relu;

  ResidualBlock() = default;
  ResidualBlock(int dim, Activation a, Rng& rng) : dense(dim, dim, rng), act(a) {}

  int forward(Tape& t, int x) const { return add(t, x, activate(t, dense.forward(t, x), act)); }

  void collect(std::vector<Param*>& out) { dense.collect(out); }
};

/// 1-D convolution layer over position-major sequences ("same" padding).
struct Conv1dLayer {
  Param w;  // (K*Cin) x Cout
  Param b;  // 1 x Cout
  int c_in = 0, c_out = 0, kernel = 0;

  Conv1dLayer() = default;
  Conv1dLayer(int cin, int cout, int k, Rng& rng)
      : w(layer_init(cin * k, k * cin, cout, rng)),
        b(layer_init(cin * k, 1, cout, rng)),
        c_in(cin),
        c_out(cout),
        kernel(k) {}

  int forward(Tape& t, int x, int length) const {
    auto* self = const_cast<Conv1dLayer*>(this);
    return conv1d(t, x, t.param(self->w), t.param(self->b), length, c_in, c_out, kernel);
  }

  void collect(std::vector<Param*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

/// Single-direction GRU cell parameters (update/reset/candidate gates).
struct GruDirection {
  Param wx;  // in x 3h
  Param wh;  // h x 3h
  Param bx;  // 1 x 3h
  Param bh;  // 1 x 3h

  GruDirection() = default;
  GruDirection(int in, int hidden, Rng& rng)
      : wx(layer_init(in, in, 3 * hidden, rng)),
        wh(layer_init(hidden, hidden, 3 * hidden, rng)),
        bx(layer_init(in, 1, 3 * hidden, rng)),
        bh(layer_init(hidden, 1, 3 * hidden, rng)) {}

  void collect(std::vector<Param*>& out) {
    out.push_back(&wx);
    out.push_back(&wh);
    out.push_back(&bx);
    out.push_back(&bh);
  }
};

/// Bidirectional GRU over a position-major sequence. Output feature per
/// position is the forward and backward hidden state, concatenated (2h).
struct BiGru {
  GruDirection fwd, bwd;
  int in = 0, hidden = 0;

  BiGru() = default;
  BiGru(int input, int h, Rng& rng) : fwd(input, h, rng), bwd(input, h, rng), in(input), hidden(h) {}

  int forward(Tape& t, int x, int length) const {
    auto run = [&](const GruDirection& dir, bool reverse) {
      auto* d = const_cast<GruDirection*>(&dir);
      int wx = t.param(d->wx), wh = t.param(d->wh), bx = t.param(d->bx), bh = t.param(d->bh);
      int batch = static_cast<int>(t.value(x).rows());
      int h = t.constant(Mat::Zero(batch, hidden));
      std::vector<int> states(length);
      for (int step = 0; step < length; ++step) {
        int pos = reverse ? length - 1 - step : step;
        int xt = slice_cols(t, x, pos * in, in);
        int gx = add_bias(t, matmul(t, xt, wx), bx);
        int gh = add_bias(t, matmul(t, h, wh), bh);
        int r = sigmoid(t, add(t, slice_cols(t, gx, 0, hidden), slice_cols(t, gh, 0, hidden)));
        int z = sigmoid(t, add(t, slice_cols(t, gx, hidden, hidden), slice_cols(t, gh, hidden, hidden)));
        int n = tanh_op(t, add(t, slice_cols(t, gx, 2 * hidden, hidden),
                               mul(t, r, slice_cols(t, gh, 2 * hidden, hidden))));
        // h' = z*h + (1-z)*n
        h = add(t, mul(t, z, h), mul(t, affine(t, z, -1.0, 1.0), n));
        states[pos] = h;
      }
      return states;
    };
    auto f = run(fwd, false);
    auto b = run(bwd, true);
    std::vector<int> parts;
    parts.reserve(2 * length);
    for (int l = 0; l < length; ++l) {
      parts.push_back(f[l]);
      parts.push_back(b[l]);
    }
    return concat_cols(t, parts);
  }

  int out_features() const { return 2 * hidden; }

  void collect(std::vector<Param*>& out) {
    fwd.collect(out);
    bwd.collect(out);
  }
};

/// Plain MLP with a fixed activation and optional dropout after each
/// hidden activation. Dropout is active only when a rng is supplied.
struct Mlp {
  std::vector<Dense> layers;
  Activation act = Activation::Relu;
  double dropout_rate = 0.0;

  Mlp() = default;
  Mlp(const std::vector<int>& dims, Activation a, double drop, Rng& rng)
      : act(a), dropout_rate(drop) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i)
      layers.emplace_back(dims[i], dims[i + 1], rng);
  }

  int forward(Tape& t, int x, Rng* dropout_rng = nullptr) const {
    int h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i].forward(t, h);
      if (i + 1 < layers.size()) {
        h = activate(t, h, act);
        if (dropout_rng && dropout_rate > 0) h = dropout(t, h, dropout_rate, *dropout_rng);
      }
    }
    return h;
  }

  /// Inference without a tape (no gradients, no dropout).
  Mat forward_eval(const Mat& x) const {
    Mat h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = (h * layers[i].w.w).rowwise() + layers[i].b.w.row(0);
      if (i + 1 < layers.size()) {
        switch (act) {
          case Activation::Relu: h = h.cwiseMax(0.0); break;
          case Activation::Elu:
            h = h.unaryExpr([](double v) { return v > 0 ? v : std::expm1(v); });
            break;
          case Activation::Sigmoid:
            h = h.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
            break;
          case Activation::Tanh: h = h.array().tanh(); break;
          case Activation::Identity: break;
        }
      }
    }
    return h;
  }

  void collect(std::vector<Param*>& out) {
    for (auto& l : layers) l.collect(out);
  }
};

// ---------------------------------------------------------------------------
// Checkpoint format: magic, u32 JSON header length, JSON metadata, then
// per-parameter u32 rows / u32 cols and row-major float64 payload.
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::string& path, const Json& meta,
                            const std::vector<Param*>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path);
  const char magic[8] = {'O', 'F', 'C', 'K', 'P', 'T', '0', '1'};
  out.write(magic, 8);
  std::string header = meta.dump();
  std::uint32_t len = static_cast<std::uint32_t>(header.size());
  out.write(reinterpret_cast<const char*>(&len), 4);
  out.write(header.data(), header.size());
  std::uint32_t count = static_cast<std::uint32_t>(params.size());
  out.write(reinterpret_cast<const char*>(&count), 4);
  for (const Param* p : params) {
    std::uint32_t rows = static_cast<std::uint32_t>(p->w.rows());
    std::uint32_t cols = static_cast<std::uint32_t>(p->w.cols());
    out.write(reinterpret_cast<const char*>(&rows), 4);
    out.write(reinterpret_cast<const char*>(&cols), 4);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) {
        double v = p->w(r, c);
        out.write(reinterpret_cast<const char*>(&v), 8);
      }
  }
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

inline Json load_checkpoint(const std::string& path, const std::vector<Param*>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot read " + path);
  char magic[8];
  in.read(magic, 8);
  if (std::string_view(magic, 8) != "OFCKPT01") throw IoError("checkpoint: bad magic in " + path);
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  std::string header(len, '\0');
  in.read(header.data(), len);
  Json meta = Json::parse(header);
  std::uint32_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 4);
  if (count != params.size())
    throw IoError("checkpoint: parameter count mismatch (" + std::to_string(count) + " vs " +
                  std::to_string(params.size()) + ")");
  for (Param* p : params) {
    std::uint32_t rows = 0, cols = 0;
    in.read(reinterpret_cast<char*>(&rows), 4);
    in.read(reinterpret_cast<char*>(&cols), 4);
    p->w.resize(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) {
        double v = 0;
        in.read(reinterpret_cast<char*>(&v), 8);
        p->w(r, c) = v;
      }
    p->reset_grad();
    p->adam_m.resize(0, 0);
    p->adam_v.resize(0, 0);
  }
  if (!in) throw IoError("checkpoint: truncated file " + path);
  return meta;
}

/// Snapshot / restore of parameter values (best-checkpoint bookkeeping).
inline std::vector<Mat> snapshot(const std::vector<Param*>& params) {
  std::vector<Mat> out;
  out.reserve(params.size());
  for (const Param* p : params) out.push_back(p->w);
  return out;
}

inline void restore(const std::vector<Param*>& params, const std::vector<Mat>& snap) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->w = snap[i];
}

// ---------------------------------------------------------------------------
// Degree-2 Taylor jets: exact first and second derivatives of a scalar MLP
// with respect to its scalar input.
// ---------------------------------------------------------------------------

struct Jet {
  double v = 0.0;   // value
  double d1 = 0.0;  // d/dt
  double d2 = 0.0;  // d^2/dt^2
};

/// Propagates (value, first, second derivative) through an Mlp taking a
/// single scalar input and producing a single scalar output.
inline Jet mlp_jet(const Mlp& net, double t_input) {
  std::vector<Jet> h{Jet{t_input, 1.0, 0.0}};
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const Dense& layer = net.layers[li];
    int out_dim = static_cast<int>(layer.w.w.cols());
    std::vector<Jet> y(out_dim);
    for (int o = 0; o < out_dim; ++o) {
      Jet acc{layer.b.w(0, o), 0.0, 0.0};
      for (std::size_t i = 0; i < h.size(); ++i) {
        double w = layer.w.w(static_cast<int>(i), o);
        acc.v += w * h[i].v;
        acc.d1 += w * h[i].d1;
        acc.d2 += w * h[i].d2;
      }
      y[o] = acc;
    }
    if (li + 1 < net.layers.size()) {
      for (auto& j : y) {
        double f, df, ddf;
        switch (net.act) {
          case Activation::Elu: {
            if (j.v > 0) {
              f = j.v; df = 1.0; ddf = 0.0;
            } else {
              double e = std::exp(j.v);
              f = e - 1.0; df = e; ddf = e;
            }
            break;
          }
          case Activation::Tanh: {
            f = std::tanh(j.v); df = 1.0 - f * f; ddf = -2.0 * f * df;
            break;
          }
          case Activation::Sigmoid: {
            f = 1.0 / (1.0 + std::exp(-j.v)); df = f * (1.0 - f); ddf = df * (1.0 - 2.0 * f);
            break;
          }
          case Activation::Relu: {
            f = j.v > 0 ? j.v : 0.0; df = j.v > 0 ? 1.0 : 0.0; ddf = 0.0;
            break;
          }
          case Activation::Identity: {
            f = j.v; df = 1.0; ddf = 0.0;
            break;
          }
        }
        double d1 = j.d1;
        j.v = f;
        j.d1 = df * d1;
        j.d2 = ddf * d1 * d1 + df * j.d2;
      }
    }
    h = std::move(y);
  }
  if (h.size() != 1) throw ShapeError("mlp_jet: network output is not scalar");
  return h[0];
}

}  // namespace odeforge::nn

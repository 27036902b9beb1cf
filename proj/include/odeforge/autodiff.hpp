#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "odeforge/common.hpp"

namespace odeforge::nn {

using Mat = Eigen::MatrixXd;

/// Trainable weight with its gradient accumulator and Adam state.
struct Param {
  Mat w;
  Mat g;
  Mat adam_m;
  Mat adam_v;

  Param() = default;
  explicit Param(Mat init) : w(std::move(init)) { reset_grad(); }

  void reset_grad() { g = Mat::Zero(w.rows(), w.cols()); }
};

inline Mat uniform_init(int rows, int cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  return Mat::NullaryExpr(rows, cols, [&](Eigen::Index) { return dist(rng); });
}

/// Initialization bound used for every dense/conv/recurrent weight:
/// uniform with half-width 1/sqrt(fan_in).
inline Mat layer_init(int fan_in, int rows, int cols, Rng& rng) {
  return uniform_init(rows, cols, 1.0 / std::sqrt(static_cast<double>(std::max(1, fan_in))), rng);
}

/// Dynamic reverse-mode tape over batch-major matrices (rows = batch).
/// Nodes are appended per forward pass; backward() walks them in reverse
/// creation order, which is always a valid topological order. Closures
/// address nodes by index; `self` is the output node's own index.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  struct Node {
    Mat value;
    Mat grad;
    BackwardFn backward;
    bool requires_grad = false;
    Param* param = nullptr;
  };

  int constant(Mat v) {
    nodes_.push_back(Node{std::move(v), {}, nullptr, false, nullptr});
    return last();
  }

  int param(Param& p) {
    nodes_.push_back(Node{p.w, {}, nullptr, true, &p});
    return last();
  }

  int make(Mat v, bool requires_grad, BackwardFn backward) {
    nodes_.push_back(Node{std::move(v), {}, std::move(backward), requires_grad, nullptr});
    return last();
  }

  const Mat& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }

  Mat& grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void accumulate(int id, const Mat& g) {
    if (!nodes_[id].requires_grad) return;
    grad(id) += g;
  }

  /// Seeds d(loss)/d(loss) = 1 and propagates. Parameter-leaf gradients
  /// are added into their Param::g accumulators.
  void backward(int loss_id) {
    if (value(loss_id).size() != 1) throw ShapeError("backward: loss must be a scalar node");
    grad(loss_id).setConstant(1.0);
    for (int id = loss_id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.param) n.param->g += n.grad;
      if (n.backward) n.backward(*this, id);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  int last() const { return static_cast<int>(nodes_.size()) - 1; }
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

inline int matmul(Tape& t, int a, int b) {
  Mat v = t.value(a) * t.value(b);
  return t.make(std::move(v), t.needs_grad(a) || t.needs_grad(b), [a, b](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.needs_grad(a)) tp.accumulate(a, g * tp.value(b).transpose());
    if (tp.needs_grad(b)) tp.accumulate(b, tp.value(a).transpose() * g);
  });
}

inline int add(Tape& t, int a, int b) {
  if (t.value(a).rows() != t.value(b).rows() || t.value(a).cols() != t.value(b).cols())
    throw ShapeError("add: shape mismatch");
  return t.make(t.value(a) + t.value(b), t.needs_grad(a) || t.needs_grad(b),
                [a, b](Tape& tp, int self) {
                  tp.accumulate(a, tp.grad(self));
                  tp.accumulate(b, tp.grad(self));
                });
}

inline int sub(Tape& t, int a, int b) {
  return t.make(t.value(a) - t.value(b), t.needs_grad(a) || t.needs_grad(b),
                [a, b](Tape& tp, int self) {
                  tp.accumulate(a, tp.grad(self));
                  tp.accumulate(b, -tp.grad(self));
                });
}

inline int mul(Tape& t, int a, int b) {
  if (t.value(a).rows() != t.value(b).rows() || t.value(a).cols() != t.value(b).cols())
    throw ShapeError("mul: shape mismatch");
  return t.make(t.value(a).cwiseProduct(t.value(b)), t.needs_grad(a) || t.needs_grad(b),
                [a, b](Tape& tp, int self) {
                  const Mat& g = tp.grad(self);
                  if (tp.needs_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
                  if (tp.needs_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
                });
}

/// k * x + c, elementwise.
inline int affine(Tape& t, int a, double k, double c) {
  return t.make(k * t.value(a).array() + c, t.needs_grad(a), [a, k](Tape& tp, int self) {
    tp.accumulate(a, k * tp.grad(self));
  });
}

/// Adds a 1 x n bias row to every row of a batch.
inline int add_bias(Tape& t, int x, int bias) {
  if (t.value(bias).rows() != 1 || t.value(bias).cols() != t.value(x).cols())
    throw ShapeError("add_bias: bias must be 1 x cols");
  Mat v = t.value(x).rowwise() + t.value(bias).row(0);
  return t.make(std::move(v), t.needs_grad(x) || t.needs_grad(bias),
                [x, bias](Tape& tp, int self) {
                  const Mat& g = tp.grad(self);
                  tp.accumulate(x, g);
                  if (tp.needs_grad(bias)) tp.accumulate(bias, g.colwise().sum());
                });
}

enum class Activation { Relu, Elu, Sigmoid, Tanh, Identity };

inline int relu(Tape& t, int a) {
  return t.make(t.value(a).cwiseMax(0.0), t.needs_grad(a), [a](Tape& tp, int self) {
    Mat mask = (tp.value(self).array() > 0.0).cast<double>();
    tp.accumulate(a, tp.grad(self).cwiseProduct(mask));
  });
}

inline int elu(Tape& t, int a) {
  Mat v = t.value(a).unaryExpr([](double x) { return x > 0 ? x : std::expm1(x); });
  return t.make(std::move(v), t.needs_grad(a), [a](Tape& tp, int self) {
    // f'(x) = 1 for x>0, e^x = f(x)+1 otherwise; recoverable from the value.
    Mat d = tp.value(self).unaryExpr([](double y) { return y > 0 ? 1.0 : y + 1.0; });
    tp.accumulate(a, tp.grad(self).cwiseProduct(d));
  });
}

inline int sigmoid(Tape& t, int a) {
  Mat v = t.value(a).unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return t.make(std::move(v), t.needs_grad(a), [a](Tape& tp, int self) {
    Mat d = tp.value(self).unaryExpr([](double s) { return s * (1.0 - s); });
    tp.accumulate(a, tp.grad(self).cwiseProduct(d));
  });
}

inline int tanh_op(Tape& t, int a) {
  Mat v = t.value(a).array().tanh();
  return t.make(std::move(v), t.needs_grad(a), [a](Tape& tp, int self) {
    Mat d = tp.value(self).unaryExpr([](double y) { return 1.0 - y * y; });
    tp.accumulate(a, tp.grad(self).cwiseProduct(d));
  });
}

inline int activate(Tape& t, int a, Activation act) {
  switch (act) {
    case Activation::Relu: return relu(t, a);
    case Activation::Elu: return elu(t, a);
    case Activation::Sigmoid: return sigmoid(t, a);
    case Activation::Tanh: return tanh_op(t, a);
    case Activation::Identity: return a;
  }
  return a;
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// 1/(1-rate). The mask is drawn once at forward time from `rng`.
inline int dropout(Tape& t, int a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ShapeError("dropout: rate must be < 1");
  std::bernoulli_distribution keep(1.0 - rate);
  double scale = 1.0 / (1.0 - rate);
  Mat mask = Mat::NullaryExpr(t.value(a).rows(), t.value(a).cols(),
                              [&](Eigen::Index) { return keep(rng) ? scale : 0.0; });
  Mat v = t.value(a).cwiseProduct(mask);
  return t.make(std::move(v), t.needs_grad(a), [a, mask](Tape& tp, int self) {
    tp.accumulate(a, tp.grad(self).cwiseProduct(mask));
  });
}

inline int slice_cols(Tape& t, int a, int start, int n) {
  if (start < 0 || start + n > t.value(a).cols()) throw ShapeError("slice_cols: out of range");
  Mat v = t.value(a).middleCols(start, n);
  return t.make(std::move(v), t.needs_grad(a), [a, start, n](Tape& tp, int self) {
    if (tp.needs_grad(a)) tp.grad(a).middleCols(start, n) += tp.grad(self);
  });
}

inline int concat_cols(Tape& t, const std::vector<int>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty");
  int rows = static_cast<int>(t.value(parts[0]).rows());
  int cols = 0;
  bool rg = false;
  for (int p : parts) {
    if (t.value(p).rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += static_cast<int>(t.value(p).cols());
    rg = rg || t.needs_grad(p);
  }
  Mat v(rows, cols);
  int at = 0;
  for (int p : parts) {
    v.middleCols(at, t.value(p).cols()) = t.value(p);
    at += static_cast<int>(t.value(p).cols());
  }
  return t.make(std::move(v), rg, [parts](Tape& tp, int self) {
    int at = 0;
    for (int p : parts) {
      int w = static_cast<int>(tp.value(p).cols());
      tp.accumulate(p, tp.grad(self).middleCols(at, w));
      at += w;
    }
  });
}

/// B x (L*F), position-major columns -> (B*L) x F with row index b*L + l.
/// Lets a per-position head run as one dense layer over all positions.
inline int fold_positions(Tape& t, int a, int length, int features) {
  const Mat& x = t.value(a);
  if (x.cols() != static_cast<Eigen::Index>(length) * features)
    throw ShapeError("fold_positions: cols != length*features");
  int batch = static_cast<int>(x.rows());
  Mat v(batch * length, features);
  for (int b = 0; b < batch; ++b)
    for (int l = 0; l < length; ++l) v.row(b * length + l) = x.block(b, l * features, 1, features);
  return t.make(std::move(v), t.needs_grad(a), [a, length, features, batch](Tape& tp, int self) {
    if (!tp.needs_grad(a)) return;
    Mat& ga = tp.grad(a);
    const Mat& g = tp.grad(self);
    for (int b = 0; b < batch; ++b)
      for (int l = 0; l < length; ++l)
        ga.block(b, l * features, 1, features) += g.row(b * length + l);
  });
}

/// Inverse of fold_positions.
inline int unfold_positions(Tape& t, int a, int length, int features) {
  const Mat& x = t.value(a);
  if (x.cols() != features || x.rows() % length != 0)
    throw ShapeError("unfold_positions: bad shape");
  int batch = static_cast<int>(x.rows()) / length;
  Mat v(batch, length * features);
  for (int b = 0; b < batch; ++b)
    for (int l = 0; l < length; ++l) v.block(b, l * features, 1, features) = x.row(b * length + l);
  return t.make(std::move(v), t.needs_grad(a), [a, length, features, batch](Tape& tp, int self) {
    if (!tp.needs_grad(a)) return;
    Mat& ga = tp.grad(a);
    const Mat& g = tp.grad(self);
    for (int b = 0; b < batch; ++b)
      for (int l = 0; l < length; ++l)
        ga.row(b * length + l) += g.block(b, l * features, 1, features);
  });
}

/// 1-D convolution over position-major sequences, stride 1, zero "same"
/// padding (pad_left = (K-1)/2), so the sequence length is preserved.
/// x: B x (L*Cin); weight: (K*Cin) x Cout (rows grouped per tap);
/// bias: 1 x Cout; output: B x (L*Cout).
inline int conv1d(Tape& t, int x, int weight, int bias, int length, int c_in, int c_out,
                  int kernel) {
  const Mat& xv = t.value(x);
  if (xv.cols() != static_cast<Eigen::Index>(length) * c_in) throw ShapeError("conv1d: input shape");
  if (t.value(weight).rows() != static_cast<Eigen::Index>(kernel) * c_in ||
      t.value(weight).cols() != c_out)
    throw ShapeError("conv1d: weight shape");
  const int pad_left = (kernel - 1) / 2;
  int batch = static_cast<int>(xv.rows());
  Mat v = Mat::Zero(batch, static_cast<Eigen::Index>(length) * c_out);
  const Mat& w = t.value(weight);
  for (int l = 0; l < length; ++l) {
    auto out = v.middleCols(l * c_out, c_out);
    for (int k = 0; k < kernel; ++k) {
      int j = l + k - pad_left;
      if (j < 0 || j >= length) continue;
      out.noalias() += xv.middleCols(j * c_in, c_in) * w.middleRows(k * c_in, c_in);
    }
    out.rowwise() += t.value(bias).row(0);
  }
  bool rg = t.needs_grad(x) || t.needs_grad(weight) || t.needs_grad(bias);
  return t.make(std::move(v), rg,
                [x, weight, bias, length, c_in, c_out, kernel, pad_left](Tape& tp, int self) {
                  const Mat& g = tp.grad(self);
                  const Mat& xv = tp.value(x);
                  const Mat& w = tp.value(weight);
                  for (int l = 0; l < length; ++l) {
                    auto gl = g.middleCols(l * c_out, c_out);
                    if (tp.needs_grad(bias)) tp.grad(bias) += gl.colwise().sum();
                    for (int k = 0; k < kernel; ++k) {
                      int j = l + k - pad_left;
                      if (j < 0 || j >= length) continue;
                      if (tp.needs_grad(x))
                        tp.grad(x).middleCols(j * c_in, c_in).noalias() +=
                            gl * w.middleRows(k * c_in, c_in).transpose();
                      if (tp.needs_grad(weight))
                        tp.grad(weight).middleRows(k * c_in, c_in).noalias() +=
                            xv.middleCols(j * c_in, c_in).transpose() * gl;
                    }
                  }
                });
}

// ---------------------------------------------------------------------------
// Losses (scalar outputs)
// ---------------------------------------------------------------------------

inline int mean_all(Tape& t, int a) {
  Mat v(1, 1);
  v(0, 0) = t.value(a).mean();
  double n = static_cast<double>(t.value(a).size());
  return t.make(std::move(v), t.needs_grad(a), [a, n](Tape& tp, int self) {
    double g = tp.grad(self)(0, 0) / n;
    tp.accumulate(a, Mat::Constant(tp.value(a).rows(), tp.value(a).cols(), g));
  });
}

/// alpha * a + beta * b for same-shaped nodes (used to combine scalars).
inline int add_scaled(Tape& t, int a, int b, double alpha, double beta) {
  Mat v = alpha * t.value(a) + beta * t.value(b);
  return t.make(std::move(v), t.needs_grad(a) || t.needs_grad(b),
                [a, b, alpha, beta](Tape& tp, int self) {
                  tp.accumulate(a, alpha * tp.grad(self));
                  tp.accumulate(b, beta * tp.grad(self));
                });
}

/// Numerically stable binary cross-entropy with logits, mean over all
/// entries. d/dz = (sigmoid(z) - y) / N.
inline int bce_with_logits(Tape& t, int logits, int targets) {
  const Mat& z = t.value(logits);
  const Mat& y = t.value(targets);
  if (z.rows() != y.rows() || z.cols() != y.cols()) throw ShapeError("bce: shape mismatch");
  double acc = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    double zi = z.data()[i], yi = y.data()[i];
    acc += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
  }
  Mat v(1, 1);
  double n = static_cast<double>(z.size());
  v(0, 0) = acc / n;
  return t.make(std::move(v), t.needs_grad(logits), [logits, targets, n](Tape& tp, int self) {
    double g = tp.grad(self)(0, 0);
    const Mat& z = tp.value(logits);
    const Mat& y = tp.value(targets);
    Mat d = z.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); }) - y;
    tp.accumulate(logits, (g / n) * d);
  });
}

/// Mean squared error against a constant target.
inline int mse_loss(Tape& t, int pred, int target) {
  const Mat& p = t.value(pred);
  const Mat& y = t.value(target);
  if (p.rows() != y.rows() || p.cols() != y.cols()) throw ShapeError("mse: shape mismatch");
  Mat v(1, 1);
  double n = static_cast<double>(p.size());
  v(0, 0) = (p - y).array().square().sum() / n;
  return t.make(std::move(v), t.needs_grad(pred), [pred, target, n](Tape& tp, int self) {
    double g = tp.grad(self)(0, 0);
    tp.accumulate(pred, (2.0 * g / n) * (tp.value(pred) - tp.value(target)));
  });
}

/// Softmax cross-entropy over rows: logits B x K, integer class targets.
inline int softmax_cross_entropy(Tape& t, int logits, std::vector<int> targets) {
  const Mat& z = t.value(logits);
  if (static_cast<int>(targets.size()) != z.rows()) throw ShapeError("ce: target count");
  double acc = 0;
  for (int r = 0; r < z.rows(); ++r) {
    double m = z.row(r).maxCoeff();
    double lse = std::log((z.row(r).array() - m).exp().sum()) + m;
    acc += lse - z(r, targets[r]);
  }
  Mat v(1, 1);
  double n = static_cast<double>(z.rows());
  v(0, 0) = acc / n;
  return t.make(std::move(v), t.needs_grad(logits),
                [logits, targets = std::move(targets), n](Tape& tp, int self) {
                  double g = tp.grad(self)(0, 0);
                  const Mat& z = tp.value(logits);
                  Mat d(z.rows(), z.cols());
                  for (int r = 0; r < z.rows(); ++r) {
                    double m = z.row(r).maxCoeff();
                    Eigen::ArrayXd e = (z.row(r).array() - m).exp();
                    d.row(r) = (e / e.sum()).matrix();
                    d(r, targets[r]) -= 1.0;
                  }
                  tp.accumulate(logits, (g / n) * d);
                });
}

/// Per-position softmax cross-entropy restricted to masked positions.
/// logits: B x (L*S); targets/mask: B x L. Mean over masked positions;
/// zero loss (and gradient) when nothing is masked.
inline int masked_position_cross_entropy(Tape& t, int logits, int length, int states,
                                         Eigen::MatrixXi targets, Eigen::MatrixXi mask) {
  const Mat& z = t.value(logits);
  if (z.cols() != static_cast<Eigen::Index>(length) * states || z.rows() != targets.rows() ||
      targets.cols() != length || mask.rows() != targets.rows() || mask.cols() != length)
    throw ShapeError("masked ce: shapes");
  double acc = 0;
  long count = 0;
  for (int r = 0; r < z.rows(); ++r) {
    for (int l = 0; l < length; ++l) {
      if (!mask(r, l)) continue;
      auto row = z.row(r).segment(l * states, states);
      double m = row.maxCoeff();
      double lse = std::log((row.array() - m).exp().sum()) + m;
      acc += lse - row(targets(r, l));
      ++count;
    }
  }
  Mat v(1, 1);
  v(0, 0) = count ? acc / count : 0.0;
  return t.make(std::move(v), t.needs_grad(logits) && count > 0,
                [logits, length, states, targets = std::move(targets), mask = std::move(mask),
                 count](Tape& tp, int self) {
                  if (!count) return;
                  double g = tp.grad(self)(0, 0) / count;
                  const Mat& z = tp.value(logits);
                  Mat d = Mat::Zero(z.rows(), z.cols());
                  for (int r = 0; r < z.rows(); ++r) {
                    for (int l = 0; l < static_cast<int>(length); ++l) {
                      if (!mask(r, l)) continue;
                      auto row = z.row(r).segment(l * states, states);
                      double m = row.maxCoeff();
                      Eigen::ArrayXd e = (row.array() - m).exp();
                      Eigen::ArrayXd p = e / e.sum();
                      d.row(r).segment(l * states, states) = p.matrix();
                      d(r, l * states + targets(r, l)) -= 1.0;
                    }
                  }
                  tp.accumulate(logits, g * d);
                });
}

/// Mean over batch rows of ||z_i - z_{perm(i)}||_2 - lambda * w2_i.
/// The w2 vector is data (no gradient); each row receives gradient both as
/// a left and as a right member of a pair.
inline int pair_distance_loss(Tape& t, int z, std::vector<int> perm, Eigen::VectorXd w2,
                              double lambda) {
  const Mat& zv = t.value(z);
  int batch = static_cast<int>(zv.rows());
  if (static_cast<int>(perm.size()) != batch || w2.size() != batch)
    throw ShapeError("pair_distance_loss: perm/w2 size");
  Eigen::VectorXd norms(batch);
  double acc = 0;
  for (int i = 0; i < batch; ++i) {
    norms[i] = (zv.row(i) - zv.row(perm[i])).norm();
    acc += norms[i] - lambda * w2[i];
  }
  Mat v(1, 1);
  v(0, 0) = acc / batch;
  return t.make(std::move(v), t.needs_grad(z),
                [z, perm = std::move(perm), norms = std::move(norms), batch](Tape& tp, int self) {
                  double g = tp.grad(self)(0, 0) / batch;
                  const Mat& zv = tp.value(z);
                  Mat d = Mat::Zero(zv.rows(), zv.cols());
                  for (int i = 0; i < batch; ++i) {
                    double n = std::max(norms[i], 1e-12);
                    Eigen::RowVectorXd dir = (zv.row(i) - zv.row(perm[i])) / n;
                    d.row(i) += dir;
                    d.row(perm[i]) -= dir;
                  }
                  tp.accumulate(z, g * d);
                });
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Standard Adam with bias correction. Learning rate may change between
/// steps (plateau scheduling); moments persist inside each Param.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  double lr() const { return cfg_.lr; }
  void set_lr(double lr) { cfg_.lr = lr; }

  void step(const std::vector<Param*>& params) {
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (Param* p : params) {
      if (p->adam_m.size() == 0) {
        p->adam_m = Mat::Zero(p->w.rows(), p->w.cols());
        p->adam_v = Mat::Zero(p->w.rows(), p->w.cols());
      }
      p->adam_m = cfg_.beta1 * p->adam_m + (1.0 - cfg_.beta1) * p->g;
      p->adam_v = cfg_.beta2 * p->adam_v + (1.0 - cfg_.beta2) * p->g.cwiseProduct(p->g);
      Mat mhat = p->adam_m / bc1;
      Mat vhat = p->adam_v / bc2;
      p->w.array() -= cfg_.lr * mhat.array() / (vhat.array().sqrt() + cfg_.eps);
    }
  }

  static void zero_grad(const std::vector<Param*>& params) {
    for (Param* p : params) p->reset_grad();
  }

 private:
  AdamConfig cfg_;
  long t_ = 0;
};

/// Metric-driven learning-rate decay: after `patience` consecutive epochs
/// without improvement the rate is multiplied by `factor`, never dropping
/// below `min_lr`.
class PlateauScheduler {
 public:
  PlateauScheduler(double initial_lr = 1e-3, double factor = 0.9, int patience = 500,
                   double min_lr = 1e-4)
      : lr_(initial_lr), factor_(factor), patience_(patience), min_lr_(min_lr) {}

  double observe(double metric) {
    if (metric < best_) {
      best_ = metric;
      bad_ = 0;
    } else {
      ++bad_;
      if (bad_ > patience_) {
        lr_ = std::max(lr_ * factor_, min_lr_);
        bad_ = 0;
      }
    }
    return lr_;
  }

  double lr() const { return lr_; }

 private:
  double lr_;
  double factor_;
  int patience_;
  double min_lr_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

}  // namespace odeforge::nn

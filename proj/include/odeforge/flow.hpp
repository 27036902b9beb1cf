#pragma once

#include <optional>

#include "odeforge/gqae.hpp"
#include "odeforge/nn.hpp"

namespace odeforge {

/// Euler-discretized CTMC sampler settings.
struct SamplerConfig {
  double dt = 0.01;
  double eta = 10.0;              // remasking stochasticity
  double x1_temperature = 1.0;    // denoiser logit temperature
  double guide_temperature = 1.0; // predictor ratio temperature
  double remask_cap = 0.5;        // per-step remask probability cap

  void validate() const {
    if (!(dt > 0.0 && dt <= 1.0)) throw ShapeError("sampler: dt must be in (0,1]");
    if (eta < 0.0) throw ShapeError("sampler: eta must be >= 0");
  }
};

/// Token state of one trajectory; MASK is encoded as token index S.
struct FlowState {
  std::vector<int> tokens;
  double time = 0.0;
};

inline constexpr int mask_token(int S) { return S; }

/// Masking interpolant corruption: keep each clean token with probability
/// t, replace it with MASK otherwise.
inline std::vector<int> corrupt(const std::vector<int>& x1, double t, Rng& rng, int S) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> out(x1.size());
  for (std::size_t i = 0; i < x1.size(); ++i) out[i] = u(rng) < t ? x1[i] : mask_token(S);
  return out;
}

// ---------------------------------------------------------------------------
// Token-state featurization shared by the denoiser and the predictors:
// one-hot over S+1 token values per position, plus the time scalar.
// ---------------------------------------------------------------------------

inline int state_feature_dim(int n_shape, int S) { return n_shape * (S + 1) + 1; }

inline nn::Mat encode_states(const Eigen::MatrixXi& states, const Eigen::VectorXd& times, int S) {
  const int n = static_cast<int>(states.rows());
  const int n_shape = static_cast<int>(states.cols());
  nn::Mat x = nn::Mat::Zero(n, state_feature_dim(n_shape, S));
  for (int r = 0; r < n; ++r) {
    for (int i = 0; i < n_shape; ++i) {
      int tok = states(r, i);
      if (tok < 0 || tok > S) throw ShapeError("encode_states: token out of range");
      x(r, i * (S + 1) + tok) = 1.0;
    }
    x(r, n_shape * (S + 1)) = times[r];
  }
  return x;
}

// ---------------------------------------------------------------------------
// Denoiser
// ---------------------------------------------------------------------------

struct DenoiserConfig {
  int n_shape = 0;
  int S = 0;
  int hidden = 5000;
  int hidden_layers = 2;
  double dropout = 0.2;
};

class DenoiserModel {
 public:
  DenoiserConfig cfg;

  DenoiserModel(DenoiserConfig config, Rng& rng) : cfg(config) {
    std::vector<int> dims{state_feature_dim(cfg.n_shape, cfg.S)};
    for (int i = 0; i < cfg.hidden_layers; ++i) dims.push_back(cfg.hidden);
    dims.push_back(cfg.n_shape * cfg.S);
    net_ = nn::Mlp(dims, nn::Activation::Relu, cfg.dropout, rng);
  }

  int forward_node(nn::Tape& t, const Eigen::MatrixXi& states, const Eigen::VectorXd& times,
                   Rng* dropout_rng) const {
    int x = t.constant(encode_states(states, times, cfg.S));
    return net_.forward(t, x, dropout_rng);
  }

  /// Per-position categorical distributions p(x1_i = s | x_t) for a batch
  /// of states at a common time; logits are tempered before the softmax.
  /// Output row layout: position-major, S entries per position.
  nn::Mat predict_probs(const Eigen::MatrixXi& states, double time, double temperature = 1.0) const {
    Eigen::VectorXd times = Eigen::VectorXd::Constant(states.rows(), time);
    nn::Mat logits = net_.forward_eval(encode_states(states, times, cfg.S));
    nn::Mat probs(logits.rows(), logits.cols());
    double temp = std::max(temperature, 1e-8);
    for (int r = 0; r < logits.rows(); ++r) {
      for (int i = 0; i < cfg.n_shape; ++i) {
        auto seg = logits.row(r).segment(i * cfg.S, cfg.S) / temp;
        double m = seg.maxCoeff();
        Eigen::ArrayXd e = (seg.array() - m).exp();
        probs.row(r).segment(i * cfg.S, cfg.S) = (e / e.sum()).matrix();
      }
    }
    return probs;
  }

  std::vector<nn::Param*> params() { return collect(); }

  void save(const std::string& path, const nn::Json& extra = {}) {
    nn::Json meta{{"kind", "denoiser"},
                  {"n_shape", cfg.n_shape},
                  {"S", cfg.S},
                  {"hidden", cfg.hidden},
                  {"hidden_layers", cfg.hidden_layers},
                  {"dropout", cfg.dropout}};
    if (!extra.is_null()) meta["extra"] = extra;
    nn::save_checkpoint(path, meta, collect());
  }

  static DenoiserModel load(const std::string& path, nn::Json* extra_out = nullptr) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("denoiser: cannot read " + path);
    char magic[8];
    probe.read(magic, 8);
    std::uint32_t len = 0;
    probe.read(reinterpret_cast<char*>(&len), 4);
    std::string header(len, '\0');
    probe.read(header.data(), len);
    nn::Json meta = nn::Json::parse(header);
    DenoiserConfig cfg;
    cfg.n_shape = meta["n_shape"];
    cfg.S = meta["S"];
    cfg.hidden = meta["hidden"];
    cfg.hidden_layers = meta["hidden_layers"];
    cfg.dropout = meta["dropout"];
    Rng rng(0);
    DenoiserModel model(cfg, rng);
    nn::Json loaded = nn::load_checkpoint(path, model.params());
    if (extra_out && loaded.contains("extra")) *extra_out = loaded["extra"];
    return model;
  }

 private:
  std::vector<nn::Param*> collect() {
    std::vector<nn::Param*> out;
    net_.collect(out);
    return out;
  }

  mutable nn::Mlp net_;
};

struct DenoiserTrainOptions {
  int epochs = 300;
  int batch = 512;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// Cross-entropy on masked positions with per-sample corruption times
/// drawn uniformly from [0, 1] each epoch.
inline void train_denoiser(DenoiserModel& model, const std::vector<std::vector<int>>& codes,
                           const DenoiserTrainOptions& opts) {
  if (codes.empty()) throw DataError("train_denoiser: empty corpus");
  const int n_shape = model.cfg.n_shape;
  for (const auto& c : codes) {
    if (static_cast<int>(c.size()) != n_shape)
      throw DataError("train_denoiser: inconsistent token length");
    for (int tok : c)
      if (tok < 0 || tok >= model.cfg.S) throw DataError("train_denoiser: token out of alphabet");
  }
  const int n = static_cast<int>(codes.size());
  const int batch = std::min(opts.batch, n);
  Rng rng(mix_seed(opts.seed, 0x64656e6f));
  auto params = model.params();
  nn::Adam adam(nn::AdamConfig{.lr = opts.lr});
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::uniform_real_distribution<double> ud(0.0, 1.0);

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int at = 0; at < n; at += batch) {
      int b = std::min(batch, n - at);
      Eigen::MatrixXi states(b, n_shape);
      Eigen::MatrixXi targets(b, n_shape);
      Eigen::MatrixXi mask(b, n_shape);
      Eigen::VectorXd times(b);
      for (int i = 0; i < b; ++i) {
        const auto& x1 = codes[order[at + i]];
        double t = ud(rng);
        times[i] = t;
        auto xt = corrupt(x1, t, rng, model.cfg.S);
        for (int p = 0; p < n_shape; ++p) {
          states(i, p) = xt[p];
          targets(i, p) = x1[p];
          mask(i, p) = xt[p] == mask_token(model.cfg.S) ? 1 : 0;
        }
      }
      nn::Tape tape;
      int logits = model.forward_node(tape, states, times, &rng);
      int loss = nn::masked_position_cross_entropy(tape, logits, n_shape, model.cfg.S,
                                                   std::move(targets), std::move(mask));
      nn::Adam::zero_grad(params);
      tape.backward(loss);
      adam.step(params);
    }
  }
}

// ---------------------------------------------------------------------------
// Rates and guidance
// ---------------------------------------------------------------------------

/// Transition intensities for one position of one state. Masked positions
/// carry S unmasking rates; unmasked positions carry a single remask rate.
struct PositionRates {
  bool masked = false;
  Eigen::VectorXd unmask;  // size S, rate of MASK -> s
  double remask = 0.0;     // rate of s -> MASK
};

namespace flowdetail {

/// Builds rates from already-computed denoiser probabilities (one row of
/// predict_probs). Shared by the public rate() API and the batched
/// sampler so both produce identical numbers.
inline std::vector<PositionRates> rates_from_probs(const std::vector<int>& tokens,
                                                   const Eigen::RowVectorXd& probs, double t,
                                                   const SamplerConfig& cfg, int S) {
  std::vector<PositionRates> out(tokens.size());
  const double unmask_scale = 1.0 / (1.0 - t);
  const double remask_rate = cfg.eta * t / (1.0 - t);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] == mask_token(S)) {
      out[i].masked = true;
      out[i].unmask = probs.segment(i * S, S).transpose() * unmask_scale;
    } else {
      out[i].masked = false;
      out[i].remask = remask_rate;
    }
  }
  return out;
}

}  // namespace flowdetail

/// Unguided rate matrix rows for the current state under the masking
/// interpolant: masked positions unmask to s at p(s|x_t)/(1-t); unmasked
/// positions remask at eta*t/(1-t). Sampling stops before t reaches
/// 1 - dt/2; asking for rates there is an error.
inline std::vector<PositionRates> rate(const FlowState& state, const DenoiserModel& denoiser,
                                       const SamplerConfig& cfg) {
  if (state.time >= 1.0 - cfg.dt / 2.0)
    throw TimeOverflow("rate: t too close to 1; sampling should have terminated");
  Eigen::MatrixXi states(1, state.tokens.size());
  for (std::size_t i = 0; i < state.tokens.size(); ++i) states(0, static_cast<int>(i)) = state.tokens[i];
  nn::Mat probs = denoiser.predict_probs(states, state.time, cfg.x1_temperature);
  return flowdetail::rates_from_probs(state.tokens, probs.row(0), state.time, cfg, denoiser.cfg.S);
}

/// Guidance predictor interface: joint log-probability of the predictor's
/// target given a batch of states at time t.
struct Guide {
  virtual ~Guide() = default;
  virtual Eigen::VectorXd log_prob_batch(const Eigen::MatrixXi& states, double t) const = 0;
};

/// Adapter for tests and simple closures.
struct FunctionGuide final : Guide {
  std::function<double(const std::vector<int>&, double)> fn;

  explicit FunctionGuide(std::function<double(const std::vector<int>&, double)> f)
      : fn(std::move(f)) {}

  Eigen::VectorXd log_prob_batch(const Eigen::MatrixXi& states, double t) const override {
    Eigen::VectorXd out(states.rows());
    for (int r = 0; r < states.rows(); ++r) {
      std::vector<int> tokens(states.cols());
      for (int c = 0; c < states.cols(); ++c) tokens[c] = states(r, c);
      out[r] = fn(tokens, t);
    }
    return out;
  }
};

/// Multiplies each candidate transition's rate by
///   exp( (1/guide_temperature) * sum_g [log p_g(y|x~,t) - log p_g(y|x,t)] ),
/// the conditionally independent multi-predictor form of rate-matrix
/// guidance. Rows stay valid generator rows: off-diagonals are scaled
/// non-negative factors, the implicit diagonal is minus the row sum.
inline std::vector<PositionRates> guide_rates(std::vector<PositionRates> rates,
                                              const FlowState& state,
                                              const std::vector<const Guide*>& guides,
                                              const SamplerConfig& cfg, int S) {
  if (guides.empty()) return rates;
  const int n_shape = static_cast<int>(state.tokens.size());
  if (static_cast<int>(rates.size()) != n_shape)
    throw PredictorShapeError("guide_rates: rates/state size mismatch");

  // Perturbation batch: row 0 is the base state; masked positions add one
  // row per candidate token, unmasked positions one remasked row.
  std::vector<std::pair<int, int>> row_meaning;  // (position, token) per extra row
  for (int i = 0; i < n_shape; ++i) {
    if (rates[i].masked) {
      for (int s = 0; s < S; ++s) row_meaning.emplace_back(i, s);
    } else {
      row_meaning.emplace_back(i, mask_token(S));
    }
  }
  Eigen::MatrixXi batch(1 + row_meaning.size(), n_shape);
  for (int c = 0; c < n_shape; ++c) batch(0, c) = state.tokens[c];
  for (std::size_t r = 0; r < row_meaning.size(); ++r) {
    for (int c = 0; c < n_shape; ++c) batch(1 + r, c) = state.tokens[c];
    batch(1 + r, row_meaning[r].first) = row_meaning[r].second;
  }

  Eigen::VectorXd log_ratio = Eigen::VectorXd::Zero(batch.rows());
  for (const Guide* g : guides) {
    Eigen::VectorXd lp = g->log_prob_batch(batch, state.time);
    log_ratio += lp - Eigen::VectorXd::Constant(batch.rows(), lp[0]);
  }
  double inv_temp = 1.0 / std::max(cfg.guide_temperature, 1e-8);

  std::size_t r = 0;
  for (int i = 0; i < n_shape; ++i) {
    if (rates[i].masked) {
      for (int s = 0; s < S; ++s, ++r) rates[i].unmask[s] *= std::exp(inv_temp * log_ratio[1 + r]);
    } else {
      rates[i].remask *= std::exp(inv_temp * log_ratio[1 + r]);
      ++r;
    }
  }
  return rates;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

struct SampleResult {
  std::vector<std::vector<int>> tokens;
  int forced_completions = 0;  // positions argmax-filled at t=1
};

/// Euler-discretized CTMC from all-MASK at t=0 to clean tokens at t=1.
/// Trajectories evolve in one batch (one denoiser call per step); any
/// position still masked after the last step is filled with the denoiser
/// argmax and counted as a forced completion.
inline SampleResult sample(const DenoiserModel& denoiser, const std::vector<const Guide*>& guides,
                           int n, const SamplerConfig& cfg, Rng& rng) {
  cfg.validate();
  const int S = denoiser.cfg.S;
  const int n_shape = denoiser.cfg.n_shape;
  const int steps = static_cast<int>(std::lround(1.0 / cfg.dt));
  std::uniform_real_distribution<double> ud(0.0, 1.0);

  Eigen::MatrixXi states = Eigen::MatrixXi::Constant(n, n_shape, mask_token(S));

  for (int step = 0; step < steps; ++step) {
    double t = step * cfg.dt;
    if (t >= 1.0 - cfg.dt / 2.0) break;
    nn::Mat probs = denoiser.predict_probs(states, t, cfg.x1_temperature);

    for (int traj = 0; traj < n; ++traj) {
      std::vector<int> tokens(n_shape);
      for (int c = 0; c < n_shape; ++c) tokens[c] = states(traj, c);
      auto rates = flowdetail::rates_from_probs(tokens, probs.row(traj), t, cfg, S);
      if (!guides.empty()) {
        FlowState fs{tokens, t};
        rates = guide_rates(std::move(rates), fs, guides, cfg, S);
      }
      for (int i = 0; i < n_shape; ++i) {
        if (rates[i].masked) {
          double total = rates[i].unmask.sum();
          double p_move = std::min(1.0, cfg.dt * total);
          if (ud(rng) < p_move && total > 0) {
            double pick = ud(rng) * total;
            int s = 0;
            for (; s + 1 < S; ++s) {
              if (pick < rates[i].unmask[s]) break;
              pick -= rates[i].unmask[s];
            }
            states(traj, i) = s;
          }
        } else if (cfg.eta > 0.0) {
          double p_re = std::min(cfg.remask_cap, cfg.dt * rates[i].remask);
          if (ud(rng) < p_re) states(traj, i) = mask_token(S);
        }
      }
    }
  }

  SampleResult result;
  result.tokens.resize(n);
  double t_fill = 1.0 - cfg.dt;
  nn::Mat probs = denoiser.predict_probs(states, t_fill, cfg.x1_temperature);
  for (int traj = 0; traj < n; ++traj) {
    result.tokens[traj].resize(n_shape);
    for (int i = 0; i < n_shape; ++i) {
      int tok = states(traj, i);
      if (tok == mask_token(S)) {
        int best = 0;
        probs.row(traj).segment(i * S, S).maxCoeff(&best);
        tok = best;
        ++result.forced_completions;
      }
      result.tokens[traj][i] = tok;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// FSQ-level <-> flow-token compression
// ---------------------------------------------------------------------------

/// Optional per-position bijection between observed FSQ levels and a
/// smaller flow alphabet. Fitted from the level usage of a corpus; the
/// identity map (alphabet = n_fsq) is the default.
struct CodeCompression {
  std::vector<std::vector<int>> levels_per_position;  // sorted distinct levels
  int alphabet = 0;

  static CodeCompression identity(int n_shape, int n_fsq) {
    CodeCompression c;
    c.alphabet = n_fsq;
    c.levels_per_position.resize(n_shape);
    for (auto& lv : c.levels_per_position) {
      lv.resize(n_fsq);
      for (int i = 0; i < n_fsq; ++i) lv[i] = i;
    }
    return c;
  }

  static CodeCompression fit(const std::vector<std::vector<int>>& codes, int n_shape,
                             std::optional<int> target_alphabet = std::nullopt) {
    if (codes.empty()) throw DataError("code compression: empty corpus");
    CodeCompression c;
    c.levels_per_position.assign(n_shape, {});
    std::vector<std::set<int>> seen(n_shape);
    for (const auto& code : codes) {
      if (static_cast<int>(code.size()) != n_shape)
        throw DataError("code compression: inconsistent code length");
      for (int i = 0; i < n_shape; ++i) seen[i].insert(code[i]);
    }
    int max_distinct = 0;
    for (int i = 0; i < n_shape; ++i) {
      c.levels_per_position[i].assign(seen[i].begin(), seen[i].end());
      max_distinct = std::max(max_distinct, static_cast<int>(seen[i].size()));
    }
    c.alphabet = target_alphabet.value_or(max_distinct);
    if (c.alphabet < max_distinct)
      throw DataError("code compression: target alphabet smaller than observed level usage");
    return c;
  }

  std::vector<int> compress(const std::vector<int>& levels) const {
    std::vector<int> out(levels.size());
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const auto& lv = levels_per_position[i];
      auto it = std::lower_bound(lv.begin(), lv.end(), levels[i]);
      if (it == lv.end() || *it != levels[i]) {
        // Unseen level: map to the nearest observed one.
        if (it == lv.end()) --it;
        else if (it != lv.begin() && levels[i] - *(it - 1) < *it - levels[i]) --it;
      }
      out[i] = static_cast<int>(it - lv.begin());
    }
    return out;
  }

  std::vector<int> decompress(const std::vector<int>& tokens) const {
    std::vector<int> out(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto& lv = levels_per_position[i];
      int idx = std::clamp(tokens[i], 0, static_cast<int>(lv.size()) - 1);
      out[i] = lv[idx];
    }
    return out;
  }

  nn::Json to_json() const {
    return nn::Json{{"alphabet", alphabet}, {"levels", levels_per_position}};
  }

  static CodeCompression from_json(const nn::Json& j) {
    CodeCompression c;
    c.alphabet = j["alphabet"];
    c.levels_per_position = j["levels"].get<std::vector<std::vector<int>>>();
    return c;
  }
};

}  // namespace odeforge

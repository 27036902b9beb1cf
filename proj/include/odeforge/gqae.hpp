#pragma once

#include <optional>

#include "odeforge/behaviour.hpp"
#include "odeforge/expr.hpp"
#include "odeforge/grammar.hpp"
#include "odeforge/nn.hpp"

namespace odeforge {

/// Finite scalar quantisation geometry: `d` latent variables, `n_cha`
/// channels each, every channel rounded to one of `n_fsq` equally spaced
/// levels in [-1, 1]. Equivalent codebook size is n_fsq^n_cha.
struct FsqConfig {
  int n_fsq = 5;
  int n_cha = 4;
  int d = 8;

  int n_shape() const { return d * n_cha; }
  double codebook_size() const { return std::pow(static_cast<double>(n_fsq), n_cha); }

  double level_value(int index) const {
    if (n_fsq < 2) throw ShapeError("fsq: need at least 2 levels");
    return -1.0 + 2.0 * index / (n_fsq - 1);
  }

  int nearest_level(double x) const {
    double bounded = std::clamp(x, -1.0, 1.0);
    int idx = static_cast<int>(std::lround((bounded + 1.0) * 0.5 * (n_fsq - 1)));
    return std::clamp(idx, 0, n_fsq - 1);
  }
};

/// Discrete latent: level indices of shape d x n_cha. Flattening order is
/// row-major (latent variable major), giving the flow-token sequence of
/// length d * n_cha.
struct LatentCode {
  Eigen::MatrixXi levels;

  bool operator==(const LatentCode& other) const { return levels == other.levels; }

  std::vector<int> flatten() const {
    std::vector<int> out;
    out.reserve(levels.size());
    for (int i = 0; i < levels.rows(); ++i)
      for (int j = 0; j < levels.cols(); ++j) out.push_back(levels(i, j));
    return out;
  }

  static LatentCode from_flat(const std::vector<int>& tokens, const FsqConfig& cfg) {
    if (static_cast<int>(tokens.size()) != cfg.n_shape())
      throw ShapeError("latent code: token count != d*n_cha");
    LatentCode code;
    code.levels.resize(cfg.d, cfg.n_cha);
    for (int i = 0; i < cfg.d; ++i)
      for (int j = 0; j < cfg.n_cha; ++j) code.levels(i, j) = tokens[i * cfg.n_cha + j];
    return code;
  }
};

struct QuantiseResult {
  nn::Mat z_q;
  LatentCode code;
};

/// Nearest-level rounding of a (bounded) latent tensor. The encoder ends
/// in tanh, so inputs are already in (-1, 1); anything outside is clamped,
/// which makes the operation exactly idempotent on its own outputs.
inline QuantiseResult quantise(const nn::Mat& z_e, const FsqConfig& cfg) {
  if (!z_e.allFinite()) throw ShapeError("quantise: non-finite latent");
  if (z_e.rows() != cfg.d || z_e.cols() != cfg.n_cha)
    throw ShapeError("quantise: latent must be d x n_cha");
  QuantiseResult res;
  res.z_q.resize(cfg.d, cfg.n_cha);
  res.code.levels.resize(cfg.d, cfg.n_cha);
  for (int i = 0; i < cfg.d; ++i)
    for (int j = 0; j < cfg.n_cha; ++j) {
      int idx = cfg.nearest_level(z_e(i, j));
      res.code.levels(i, j) = idx;
      res.z_q(i, j) = cfg.level_value(idx);
    }
  return res;
}

inline nn::Mat dequantise(const LatentCode& code, const FsqConfig& cfg) {
  nn::Mat z(code.levels.rows(), code.levels.cols());
  for (int i = 0; i < z.rows(); ++i)
    for (int j = 0; j < z.cols(); ++j) z(i, j) = cfg.level_value(code.levels(i, j));
  return z;
}

namespace nnops {

/// Straight-through quantisation on the tape: forward rounds every entry
/// to the nearest level, backward passes gradients through unchanged.
inline int fsq_straight_through(nn::Tape& t, int z, const FsqConfig& cfg) {
  nn::Mat v = t.value(z).unaryExpr(
      [&cfg](double x) { return cfg.level_value(cfg.nearest_level(x)); });
  return t.make(std::move(v), t.needs_grad(z),
                [z](nn::Tape& tp, int self) { tp.accumulate(z, tp.grad(self)); });
}

}  // namespace nnops

/// Architecture hyperparameters of the grammar quantisation autoencoder.
/// Kernel sizes, layer counts and the GRU hidden width are fixed; channel
/// widths and the FSQ geometry vary per grammar.
struct GqaeConfig {
  FsqConfig fsq;
  int n_max = 20;
  int n_rules = 0;
  int conv_channels = 64;
  int n_res = 60;
  int gru_hidden = 80;
  int gru_input = 32;
  // The encoder head ends in tanh; its initial weights are scaled up so
  // the starting latents already spread across several quantisation
  // levels. Without the gain every sample rounds to the central code and
  // the decoder learns to ignore its input before codes can separate.
  bool tanh_bound = true;
  double head_init_gain = 6.0;
};

class GqaeModel {
 public:
  GqaeConfig cfg;

  GqaeModel(GqaeConfig config, Rng& rng)
      : cfg(config),
        conv1_(cfg.n_rules, cfg.conv_channels, 7, rng),
        conv2_(cfg.conv_channels, cfg.conv_channels, 8, rng),
        conv3_(cfg.conv_channels, cfg.conv_channels, 9, rng),
        enc_in_(cfg.n_max * cfg.conv_channels, cfg.n_res, rng),
        res1_(cfg.n_res, nn::Activation::Relu, rng),
        res2_(cfg.n_res, nn::Activation::Relu, rng),
        enc_out_(cfg.n_res, cfg.fsq.n_shape(), rng),
        dec_in_(cfg.fsq.n_shape(), cfg.n_max * cfg.gru_input, rng),
        gru1_(cfg.gru_input, cfg.gru_hidden, rng),
        gru2_(2 * cfg.gru_hidden, cfg.gru_hidden, rng),
        head1_(2 * cfg.gru_hidden, 2 * cfg.gru_hidden, rng),
        head2_(2 * cfg.gru_hidden, cfg.n_rules, rng) {
    enc_out_.w.w *= cfg.head_init_gain;
    enc_out_.b.w *= cfg.head_init_gain;
  }

  /// Encoder: 3 convolutions (kernels 7/8/9, ReLU), flattening dense into
  /// two residual layers, projection to d*n_cha, optional tanh bounding.
  int encode_node(nn::Tape& t, int x) const {
    int h = nn::relu(t, conv1_.forward(t, x, cfg.n_max));
    h = nn::relu(t, conv2_.forward(t, h, cfg.n_max));
    h = nn::relu(t, conv3_.forward(t, h, cfg.n_max));
    h = nn::relu(t, enc_in_.forward(t, h));
    h = res1_.forward(t, h);
    h = res2_.forward(t, h);
    h = enc_out_.forward(t, h);
    return cfg.tanh_bound ? nn::tanh_op(t, h) : h;
  }

  int quantise_node(nn::Tape& t, int z_e) const {
    return nnops::fsq_straight_through(t, z_e, cfg.fsq);
  }

  /// Decoder: dense expansion to a sequence, two bidirectional GRU layers
  /// (hidden 80), ELU head, per-position rule logits.
  int decode_node(nn::Tape& t, int z_q) const {
    int h = dec_in_.forward(t, z_q);
    h = gru1_.forward(t, h, cfg.n_max);
    h = gru2_.forward(t, h, cfg.n_max);
    int folded = nn::fold_positions(t, h, cfg.n_max, 2 * cfg.gru_hidden);
    int head = nn::elu(t, head1_.forward(t, folded));
    int logits = head2_.forward(t, head);
    return nn::unfold_positions(t, logits, cfg.n_max, cfg.n_rules);
  }

  // -- batch eval helpers (no gradients used) --

  nn::Mat encode_eval(const nn::Mat& x_flat) const {
    nn::Tape t;
    return t.value(encode_node(t, t.constant(x_flat)));
  }

  nn::Mat decode_eval(const nn::Mat& z_q_flat) const {
    nn::Tape t;
    return t.value(decode_node(t, t.constant(z_q_flat)));
  }

  // -- single-sample views --

  /// One-hot (n_max x n_rules) -> pre-quantisation latent (d x n_cha).
  nn::Mat encode(const Eigen::MatrixXd& one_hot) const {
    if (one_hot.rows() != cfg.n_max || one_hot.cols() != cfg.n_rules)
      throw ShapeError("gqae encode: one-hot must be n_max x n_rules");
    nn::Mat row = flatten_one_hot(one_hot);
    nn::Mat z = encode_eval(row);
    return unflatten_latent(z.row(0));
  }

  /// Quantised latent (d x n_cha) -> rule logits (n_max x n_rules).
  nn::Mat decode(const nn::Mat& z_q) const {
    if (z_q.rows() != cfg.fsq.d || z_q.cols() != cfg.fsq.n_cha)
      throw ShapeError("gqae decode: latent must be d x n_cha");
    nn::Mat flat(1, cfg.fsq.n_shape());
    for (int i = 0; i < cfg.fsq.d; ++i)
      for (int j = 0; j < cfg.fsq.n_cha; ++j) flat(0, i * cfg.fsq.n_cha + j) = z_q(i, j);
    nn::Mat logits = decode_eval(flat);
    return unflatten_logits(logits.row(0));
  }

  nn::Mat flatten_one_hot(const Eigen::MatrixXd& one_hot) const {
    nn::Mat row(1, cfg.n_max * cfg.n_rules);
    for (int l = 0; l < cfg.n_max; ++l)
      for (int r = 0; r < cfg.n_rules; ++r) row(0, l * cfg.n_rules + r) = one_hot(l, r);
    return row;
  }

  nn::Mat unflatten_latent(const Eigen::RowVectorXd& row) const {
    nn::Mat z(cfg.fsq.d, cfg.fsq.n_cha);
    for (int i = 0; i < cfg.fsq.d; ++i)
      for (int j = 0; j < cfg.fsq.n_cha; ++j) z(i, j) = row(i * cfg.fsq.n_cha + j);
    return z;
  }

  nn::Mat unflatten_logits(const Eigen::RowVectorXd& row) const {
    nn::Mat m(cfg.n_max, cfg.n_rules);
    for (int l = 0; l < cfg.n_max; ++l)
      for (int r = 0; r < cfg.n_rules; ++r) m(l, r) = row(l * cfg.n_rules + r);
    return m;
  }

  std::vector<nn::Param*> params() {
    std::vector<nn::Param*> out;
    conv1_.collect(out);
    conv2_.collect(out);
    conv3_.collect(out);
    enc_in_.collect(out);
    res1_.collect(out);
    res2_.collect(out);
    enc_out_.collect(out);
    dec_in_.collect(out);
    gru1_.collect(out);
    gru2_.collect(out);
    head1_.collect(out);
    head2_.collect(out);
    return out;
  }

  void save(const std::string& path, std::uint64_t grammar_hash) {
    nn::Json meta{{"kind", "gqae"},
                  {"n_max", cfg.n_max},
                  {"n_rules", cfg.n_rules},
                  {"conv_channels", cfg.conv_channels},
                  {"n_res", cfg.n_res},
                  {"gru_hidden", cfg.gru_hidden},
                  {"gru_input", cfg.gru_input},
                  {"tanh_bound", cfg.tanh_bound},
                  {"head_init_gain", cfg.head_init_gain},
                  {"fsq", {{"n_fsq", cfg.fsq.n_fsq}, {"n_cha", cfg.fsq.n_cha}, {"d", cfg.fsq.d}}},
                  {"grammar_hash", grammar_hash}};
    nn::save_checkpoint(path, meta, params());
    // Sidecar record for tools that need the configuration without
    // loading the parameter payload.
    std::ofstream side(path + ".json");
    side << meta.dump(2) << "\n";
  }

  static GqaeModel load(const std::string& path, std::uint64_t expected_grammar_hash = 0) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("gqae: cannot read " + path);
    char magic[8];
    probe.read(magic, 8);
    std::uint32_t len = 0;
    probe.read(reinterpret_cast<char*>(&len), 4);
    std::string header(len, '\0');
    probe.read(header.data(), len);
    nn::Json meta = nn::Json::parse(header);
    GqaeConfig cfg;
    cfg.n_max = meta["n_max"];
    cfg.n_rules = meta["n_rules"];
    cfg.conv_channels = meta["conv_channels"];
    cfg.n_res = meta["n_res"];
    cfg.gru_hidden = meta["gru_hidden"];
    cfg.gru_input = meta["gru_input"];
    cfg.tanh_bound = meta.value("tanh_bound", true);
    cfg.head_init_gain = meta.value("head_init_gain", 6.0);
    cfg.fsq.n_fsq = meta["fsq"]["n_fsq"];
    cfg.fsq.n_cha = meta["fsq"]["n_cha"];
    cfg.fsq.d = meta["fsq"]["d"];
    Rng rng(0);
    GqaeModel model(cfg, rng);
    nn::Json loaded = nn::load_checkpoint(path, model.params());
    if (expected_grammar_hash != 0 &&
        loaded["grammar_hash"].get<std::uint64_t>() != expected_grammar_hash)
      throw IoError("gqae: checkpoint was trained on a different grammar");
    model.grammar_hash_ = loaded["grammar_hash"].get<std::uint64_t>();
    return model;
  }

  std::uint64_t grammar_hash() const { return grammar_hash_; }
  void set_grammar_hash(std::uint64_t h) { grammar_hash_ = h; }

 private:
  nn::Conv1dLayer conv1_, conv2_, conv3_;
  nn::Dense enc_in_;
  nn::ResidualBlock res1_, res2_;
  nn::Dense enc_out_;
  nn::Dense dec_in_;
  nn::BiGru gru1_, gru2_;
  nn::Dense head1_, head2_;
  std::uint64_t grammar_hash_ = 0;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct GqaeTrainOptions {
  int epochs = 2000;
  std::optional<int> batch_override;  // default batch is 512
  double lr = 1e-3;
  double beta_w = 1e-4;
  double lambda_w = 1e-2;
  double val_fraction = 0.1;
  int eval_interval = 20;
  bool stop_on_perfect = false;  // stop once held-out reconstruction is exact
  std::uint64_t seed = 0;
  int signature_draws = 25;
  int threads = 1;

  int effective_batch(int dataset_size) const {
    int b = batch_override.value_or(512);
    if (dataset_size < b && !batch_override)
      throw DataError("train_gqae: dataset smaller than one batch (512) and no batch override");
    return std::min(b, dataset_size);
  }
};

struct GqaeCheckpointStat {
  int epoch = 0;
  double train_loss = 0.0;
  double val_bce = 0.0;
  double val_exact = 0.0;
  double train_exact = 0.0;
};

struct GqaeTrainResult {
  std::vector<GqaeCheckpointStat> history;
  double best_val_bce = std::numeric_limits<double>::infinity();
  int best_epoch = 0;
  int epochs_run = 0;
};

namespace gqaedetail {

inline double exact_match_rate(const GqaeModel& model, const Grammar& grammar,
                               const nn::Mat& x_flat, const std::vector<RuleSequence>& seqs,
                               const std::vector<int>& indices) {
  if (indices.empty()) return 1.0;
  nn::Mat rows(indices.size(), x_flat.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) rows.row(i) = x_flat.row(indices[i]);
  nn::Mat z = model.encode_eval(rows);
  nn::Mat zq = z.unaryExpr([&](double v) {
    return model.cfg.fsq.level_value(model.cfg.fsq.nearest_level(v));
  });
  nn::Mat logits = model.decode_eval(zq);
  int hits = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    try {
      RuleSequence out = masked_decode(model.unflatten_logits(logits.row(i)), grammar,
                                       DecodeMode::Argmax);
      if (out == seqs[indices[i]]) ++hits;
    } catch (const DecodeOverflow&) {
    }
  }
  return static_cast<double>(hits) / indices.size();
}

inline double val_bce(const GqaeModel& model, const nn::Mat& x_flat,
                      const std::vector<int>& indices) {
  if (indices.empty()) return 0.0;
  nn::Mat rows(indices.size(), x_flat.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) rows.row(i) = x_flat.row(indices[i]);
  nn::Mat z = model.encode_eval(rows);
  nn::Mat zq = z.unaryExpr([&](double v) {
    return model.cfg.fsq.level_value(model.cfg.fsq.nearest_level(v));
  });
  nn::Mat logits = model.decode_eval(zq);
  double acc = 0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    double zi = logits.data()[i], yi = rows.data()[i];
    acc += std::max(zi, 0.0) - zi * yi + std::log1p(std::exp(-std::abs(zi)));
  }
  return acc / logits.size();
}

}  // namespace gqaedetail

/// Reconstruction + behavioural training. The behavioural term pairs each
/// batch row with a rotated partner and adds
///   mean_i( ||z_i - z_j||_2 - lambda_w * W2(sig_i, sig_j) ),
/// weighted by beta_w; the W2 values come from a precomputed signature
/// cache. Checkpoint selection follows held-out reconstruction BCE.
inline GqaeTrainResult train_gqae(GqaeModel& model, const Grammar& grammar,
                                  const std::vector<RuleSequence>& dataset,
                                  SignatureCache& signatures, const GqaeTrainOptions& opts) {
  if (dataset.empty()) throw DataError("train_gqae: empty dataset");
  const int n = static_cast<int>(dataset.size());
  const int batch = opts.effective_batch(n);

  nn::Mat x_flat(n, model.cfg.n_max * model.cfg.n_rules);
  for (int i = 0; i < n; ++i)
    x_flat.row(i) = model.flatten_one_hot(encode_one_hot(dataset[i], model.cfg.n_max, grammar));

  // Signatures for behavioural pairs (cached, deterministic per skeleton).
  std::vector<const BehaviourSignature*> sigs(n, nullptr);
  if (opts.beta_w != 0.0) {
    parallel_for(n, opts.threads, [&](std::size_t i) {
      auto parsed = parse_expression(realize(dataset[i], grammar));
      sigs[i] = &signatures.get_or_compute(dataset[i], parsed.expr, parsed.n_constants);
    });
  }

  Rng rng(mix_seed(opts.seed, 0x67716165));
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  int n_val = static_cast<int>(opts.val_fraction * n);
  std::vector<int> val_idx(order.begin(), order.begin() + n_val);
  std::vector<int> train_idx(order.begin() + n_val, order.end());
  if (val_idx.empty()) val_idx = train_idx;  // tiny datasets validate on train

  auto params = model.params();
  nn::Adam adam(nn::AdamConfig{.lr = opts.lr});
  nn::PlateauScheduler scheduler(opts.lr);

  GqaeTrainResult result;
  std::vector<nn::Mat> best_snapshot = nn::snapshot(params);
  double last_train_exact = 0.0;

  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    std::shuffle(train_idx.begin(), train_idx.end(), rng);
    double epoch_loss = 0.0;
    int steps = 0;
    for (std::size_t at = 0; at < train_idx.size(); at += batch) {
      std::size_t stop = std::min(at + batch, train_idx.size());
      int b = static_cast<int>(stop - at);
      nn::Mat xb(b, x_flat.cols());
      for (int i = 0; i < b; ++i) xb.row(i) = x_flat.row(train_idx[at + i]);

      nn::Tape tape;
      int x_node = tape.constant(xb);
      int z_e = model.encode_node(tape, x_node);
      int z_q = model.quantise_node(tape, z_e);
      int logits = model.decode_node(tape, z_q);
      int loss = nn::bce_with_logits(tape, logits, x_node);

      if (opts.beta_w != 0.0 && b >= 2) {
        std::uniform_int_distribution<int> shift_dist(1, b - 1);
        int shift = shift_dist(rng);
        std::vector<int> perm(b);
        Eigen::VectorXd w2(b);
        for (int i = 0; i < b; ++i) {
          perm[i] = (i + shift) % b;
          w2[i] = wasserstein_distance(*sigs[train_idx[at + i]], *sigs[train_idx[at + perm[i]]]);
        }
        int pair = nn::pair_distance_loss(tape, z_e, perm, w2, opts.lambda_w);
        loss = nn::add_scaled(tape, loss, pair, 1.0, opts.beta_w);
      }

      nn::Adam::zero_grad(params);
      tape.backward(loss);
      adam.step(params);
      epoch_loss += tape.value(loss)(0, 0);
      ++steps;
    }
    epoch_loss /= std::max(1, steps);
    adam.set_lr(scheduler.observe(epoch_loss));
    result.epochs_run = epoch;

    if (epoch % opts.eval_interval == 0 || epoch == opts.epochs) {
      GqaeCheckpointStat stat;
      stat.epoch = epoch;
      stat.train_loss = epoch_loss;
      stat.val_bce = gqaedetail::val_bce(model, x_flat, val_idx);
      stat.val_exact = gqaedetail::exact_match_rate(model, grammar, x_flat, dataset, val_idx);
      stat.train_exact = gqaedetail::exact_match_rate(model, grammar, x_flat, dataset, train_idx);
      result.history.push_back(stat);
      last_train_exact = stat.train_exact;
      if (stat.val_bce < result.best_val_bce) {
        result.best_val_bce = stat.val_bce;
        result.best_epoch = epoch;
        best_snapshot = nn::snapshot(params);
      }
      if (opts.stop_on_perfect && stat.val_exact >= 1.0 && stat.train_exact >= 1.0) {
        // The stopping state reconstructs everything; keep it even if an
        // older checkpoint had marginally lower BCE.
        best_snapshot = nn::snapshot(params);
        result.best_epoch = epoch;
        break;
      }
    }
  }
  (void)last_train_exact;
  nn::restore(params, best_snapshot);
  return result;
}

}  // namespace odeforge

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <mutex>
#include <shared_mutex>
#include <unordered_map>

#include "odeforge/common.hpp"
#include "odeforge/expr.hpp"

namespace odeforge {

/// Fixed evaluation grid for behavioural signatures: 8 x 16 x 16 equally
/// spaced samples over t in [0,10], u in [0,100], u-dot in [0,500],
/// flattened t-major. Identical for every skeleton.
struct VectorFieldGrid {
  static constexpr int kT = 8;
  static constexpr int kU = 16;
  static constexpr int kV = 16;
  static constexpr int kPoints = kT * kU * kV;  // 2048

  static double t_at(int i) { return 10.0 * i / (kT - 1); }
  static double u_at(int i) { return 100.0 * i / (kU - 1); }
  static double v_at(int i) { return 500.0 * i / (kV - 1); }

  /// Point for a flat index; derivative axes above first order share the
  /// u-dot sample (the grid is three-dimensional for all orders).
  static EvalPoint point(int flat) {
    int v = flat % kV;
    int u = (flat / kV) % kU;
    int t = flat / (kV * kU);
    double vv = v_at(v);
    return EvalPoint{t_at(t), u_at(u), vv, vv};
  }
};

/// Per-grid-point mean and standard deviation of the differential operator
/// under random constant draws; entries clipped to +-1e10 (means) and
/// [0, 1e10] (deviations).
struct BehaviourSignature {
  Eigen::VectorXd mu;
  Eigen::VectorXd sigma;
};

namespace behaviourdetail {

inline double clip_value(double v) {
  if (std::isnan(v)) return 0.0;
  return std::clamp(v, -kSignatureClip, kSignatureClip);
}

}  // namespace behaviourdetail

/// Evaluate the operator over the grid for `draws` random constant vectors
/// (each entry uniform in [-10, 10]) and aggregate per-point statistics.
/// Inputs and initial conditions play no role: only the operator is read.
inline BehaviourSignature sample_signature(const Expression& op, int n_constants, Rng& rng,
                                           int draws = 25) {
  const int n = VectorFieldGrid::kPoints;
  BehaviourSignature sig;
  sig.mu = Eigen::VectorXd::Zero(n);
  sig.sigma = Eigen::VectorXd::Zero(n);
  if (n_constants == 0) draws = 1;

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd sumsq = Eigen::VectorXd::Zero(n);
  std::vector<double> constants(n_constants);
  for (int d = 0; d < draws; ++d) {
    for (auto& c : constants) c = uniform(rng, -10.0, 10.0);
    for (int i = 0; i < n; ++i) {
      double v = behaviourdetail::clip_value(evaluate(op, VectorFieldGrid::point(i), constants));
      sum[i] += v;
      sumsq[i] += v * v;
    }
  }
  for (int i = 0; i < n; ++i) {
    double mean = sum[i] / draws;
    double var = std::max(0.0, sumsq[i] / draws - mean * mean);
    sig.mu[i] = behaviourdetail::clip_value(mean);
    sig.sigma[i] = std::clamp(std::sqrt(var), 0.0, kSignatureClip);
  }
  return sig;
}

/// Log of the grid-mean squared distance between two signatures, floored
/// at log(1e-12) so identical skeletons stay finite.
inline double wasserstein_distance(const BehaviourSignature& a, const BehaviourSignature& b) {
  if (a.mu.size() != b.mu.size())
    throw ShapeError("wasserstein_distance: signatures over different grids");
  double acc = ((a.mu - b.mu).array().square() + (a.sigma - b.sigma).array().square()).mean();
  return std::log(std::max(acc, kLogFloor));
}

/// Pairwise behavioural training term: latent distance minus the scaled
/// behavioural distance of the underlying skeletons.
inline double behavioural_loss(const Eigen::VectorXd& z_i, const Eigen::VectorXd& z_j,
                               double wasserstein, double lambda_w) {
  return (z_i - z_j).norm() - lambda_w * wasserstein;
}

/// Signature store keyed by rule sequence; concurrent reads, exclusive
/// insertion. Seeds are derived from the base seed and the skeleton hash,
/// so cached and freshly computed signatures are identical.
class SignatureCache {
 public:
  explicit SignatureCache(std::uint64_t base_seed = 0, int draws = 25)
      : base_seed_(base_seed), draws_(draws) {}

  const BehaviourSignature& get_or_compute(const RuleSequence& seq, const Expression& op,
                                           int n_constants) {
    {
      std::shared_lock lock(mutex_);
      if (auto it = map_.find(seq); it != map_.end()) return it->second;
    }
    Rng rng(mix_seed(base_seed_, seq.hash()));
    BehaviourSignature sig = sample_signature(op, n_constants, rng, draws_);
    std::unique_lock lock(mutex_);
    return map_.emplace(seq, std::move(sig)).first->second;
  }

  const BehaviourSignature* find(const RuleSequence& seq) const {
    std::shared_lock lock(mutex_);
    auto it = map_.find(seq);
    return it == map_.end() ? nullptr : &it->second;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return map_.size();
  }

  /// Binary records: u64 skeleton hash, u32 sequence length, rule indices,
  /// then 2 x 2048 float64 statistics.
  void save(const std::string& path) const {
    std::shared_lock lock(mutex_);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("signature cache: cannot write " + path);
    const char magic[8] = {'O', 'F', 'S', 'I', 'G', 'C', '0', '1'};
    out.write(magic, 8);
    std::uint64_t count = map_.size();
    out.write(reinterpret_cast<const char*>(&count), 8);
    for (const auto& [seq, sig] : map_) {
      std::uint64_t h = seq.hash();
      out.write(reinterpret_cast<const char*>(&h), 8);
      std::uint32_t len = seq.indices.size();
      out.write(reinterpret_cast<const char*>(&len), 4);
      for (int idx : seq.indices) {
        std::int32_t v = idx;
        out.write(reinterpret_cast<const char*>(&v), 4);
      }
      out.write(reinterpret_cast<const char*>(sig.mu.data()), sizeof(double) * sig.mu.size());
      out.write(reinterpret_cast<const char*>(sig.sigma.data()), sizeof(double) * sig.sigma.size());
    }
  }

  void load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("signature cache: cannot read " + path);
    char magic[8];
    in.read(magic, 8);
    if (std::string_view(magic, 8) != "OFSIGC01")
      throw IoError("signature cache: bad magic in " + path);
    std::uint64_t count = 0;
    in.read(reinterpret_cast<char*>(&count), 8);
    std::unique_lock lock(mutex_);
    for (std::uint64_t r = 0; r < count; ++r) {
      std::uint64_t h = 0;
      in.read(reinterpret_cast<char*>(&h), 8);
      std::uint32_t len = 0;
      in.read(reinterpret_cast<char*>(&len), 4);
      RuleSequence seq;
      seq.indices.resize(len);
      for (auto& idx : seq.indices) {
        std::int32_t v = 0;
        in.read(reinterpret_cast<char*>(&v), 4);
        idx = v;
      }
      BehaviourSignature sig;
      sig.mu.resize(VectorFieldGrid::kPoints);
      sig.sigma.resize(VectorFieldGrid::kPoints);
      in.read(reinterpret_cast<char*>(sig.mu.data()), sizeof(double) * sig.mu.size());
      in.read(reinterpret_cast<char*>(sig.sigma.data()), sizeof(double) * sig.sigma.size());
      if (!in) throw IoError("signature cache: truncated file " + path);
      if (seq.hash() != h) throw IoError("signature cache: hash mismatch in " + path);
      map_.emplace(std::move(seq), std::move(sig));
    }
  }

 private:
  std::uint64_t base_seed_;
  int draws_;
  mutable std::shared_mutex mutex_;
  std::unordered_map<RuleSequence, BehaviourSignature, RuleSequenceHash> map_;
};

}  // namespace odeforge

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "odeforge/behaviour.hpp"

using namespace odeforge;
using Catch::Approx;

TEST_CASE("grid layout is t-major with shared derivative axis") {
  CHECK(VectorFieldGrid::kPoints == 2048);
  auto p0 = VectorFieldGrid::point(0);
  CHECK(p0.t == 0.0);
  CHECK(p0.u == 0.0);
  CHECK(p0.du == 0.0);
  auto plast = VectorFieldGrid::point(2047);
  CHECK(plast.t == Approx(10.0));
  CHECK(plast.u == Approx(100.0));
  CHECK(plast.du == Approx(500.0));
  // index = t*256 + u*16 + v
  auto p = VectorFieldGrid::point(1 * 256 + 2 * 16 + 3);
  CHECK(p.t == Approx(10.0 / 7.0));
  CHECK(p.u == Approx(200.0 / 15.0));
  CHECK(p.du == Approx(1500.0 / 15.0));
  CHECK(p.ddu == p.du);
}

TEST_CASE("signature of a constant-free operator is the grid itself") {
  auto op = parse_expression("u").expr;
  Rng rng(1);
  auto sig = sample_signature(op, 0, rng);
  for (int i : {0, 100, 777, 2047}) {
    CHECK(sig.mu[i] == VectorFieldGrid::point(i).u);
    CHECK(sig.sigma[i] == 0.0);
  }
}

TEST_CASE("signature of a bare constant matches uniform moments") {
  // C ~ U(-10,10): mean 0, std 20/sqrt(12) = 5.7735. With 25 draws the
  // standard error of the mean is 5.77/5 = 1.15; allow 3 sigma.
  auto op = parse_expression("C").expr;
  Rng rng(42);
  auto sig = sample_signature(op, 1, rng);
  // Every grid point sees the same draws, so mu/sigma are constant vectors.
  CHECK(sig.mu.maxCoeff() == sig.mu.minCoeff());
  CHECK(std::abs(sig.mu[0]) < 3.5);
  CHECK(sig.sigma[0] == Approx(5.7735).margin(2.5));
  // Tighter check by averaging over many independent skeleton seeds.
  double mu_bar = 0, sigma_bar = 0;
  const int reps = 200;
  for (int s = 0; s < reps; ++s) {
    Rng r(1000 + s);
    auto g = sample_signature(op, 1, r);
    mu_bar += g.mu[0] / reps;
    sigma_bar += g.sigma[0] / reps;
  }
  CHECK(mu_bar == Approx(0.0).margin(0.3));
  CHECK(sigma_bar == Approx(5.7735).margin(0.25));
}

TEST_CASE("clipping keeps adversarial operators bounded") {
  for (const char* text : {"C*exp(u)", "C/u", "log(u-50)", "exp(u')*exp(u)"}) {
    auto op = parse_expression(text).expr;
    Rng rng(7);
    auto sig = sample_signature(op, num_slots(op), rng);
    CAPTURE(text);
    CHECK(sig.mu.allFinite());
    CHECK(sig.sigma.allFinite());
    CHECK(sig.mu.maxCoeff() <= kSignatureClip);
    CHECK(sig.mu.minCoeff() >= -kSignatureClip);
    CHECK(sig.sigma.maxCoeff() <= kSignatureClip);
    CHECK(sig.sigma.minCoeff() >= 0.0);
  }
}

TEST_CASE("signature determinism under a fixed seed") {
  auto op = parse_expression("C*u + C*sin(t)").expr;
  Rng a(9), b(9);
  auto s1 = sample_signature(op, 2, a);
  auto s2 = sample_signature(op, 2, b);
  CHECK(s1.mu == s2.mu);
  CHECK(s1.sigma == s2.sigma);
}

TEST_CASE("wasserstein distance: floor, analytic value, symmetry") {
  auto op = parse_expression("C*u").expr;
  Rng rng(3);
  auto sig = sample_signature(op, 1, rng);
  CHECK(wasserstein_distance(sig, sig) == Approx(std::log(1e-12)));

  BehaviourSignature a, b;
  a.mu = Eigen::VectorXd::Zero(2048);
  a.sigma = Eigen::VectorXd::Zero(2048);
  b.mu = Eigen::VectorXd::Constant(2048, 1.0);
  b.sigma = Eigen::VectorXd::Zero(2048);
  CHECK(wasserstein_distance(a, b) == Approx(0.0).margin(1e-12));

  Rng rng2(11);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    BehaviourSignature x, y;
    x.mu = Eigen::VectorXd::NullaryExpr(2048, [&](Eigen::Index) { return n(rng2); });
    x.sigma = Eigen::VectorXd::NullaryExpr(2048, [&](Eigen::Index) { return std::abs(n(rng2)); });
    y.mu = Eigen::VectorXd::NullaryExpr(2048, [&](Eigen::Index) { return n(rng2); });
    y.sigma = Eigen::VectorXd::NullaryExpr(2048, [&](Eigen::Index) { return std::abs(n(rng2)); });
    CHECK(wasserstein_distance(x, y) == wasserstein_distance(y, x));
  }
}

TEST_CASE("behavioural loss plug-in values") {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(8);
  double floor_w = std::log(1e-12);
  CHECK(behavioural_loss(z, z, floor_w, 1e-2) == Approx(-1e-2 * floor_w));
  CHECK(-1e-2 * floor_w == Approx(0.27631).margin(1e-4));

  Eigen::VectorXd z2 = z;
  z2[0] = 1.0;
  CHECK(behavioural_loss(z, z2, 0.0, 1e-2) == Approx(1.0));
}

TEST_CASE("signature cache: hit identity and persistence") {
  auto parsed = parse_expression("C*u + C");
  RuleSequence key{{1, 2, 3}};
  SignatureCache cache(/*base_seed=*/77);
  const auto& first = cache.get_or_compute(key, parsed.expr, parsed.n_constants);
  const auto& again = cache.get_or_compute(key, parsed.expr, parsed.n_constants);
  CHECK(&first == &again);
  CHECK(cache.size() == 1);

  auto tmp = std::filesystem::temp_directory_path() / "odeforge_sigcache_test.bin";
  cache.save(tmp.string());
  SignatureCache loaded(77);
  loaded.load(tmp.string());
  REQUIRE(loaded.find(key) != nullptr);
  CHECK(loaded.find(key)->mu == first.mu);
  CHECK(loaded.find(key)->sigma == first.sigma);
  std::filesystem::remove(tmp);
}

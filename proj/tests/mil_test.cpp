#include "tubemil/mil.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "tubemil/rng.hpp"

namespace tubemil::mil {
namespace {

using oracles::grid_search_min;

std::vector<InstancePrediction> preds_from_probs(
    const std::vector<std::vector<double>>& per_class_probs) {
  // per_class_probs[l][j]: probability of class l for instance j
  const std::size_t num_classes = per_class_probs.size();
  const std::size_t n = per_class_probs.front().size();
  std::vector<InstancePrediction> preds(n);
  for (std::size_t j = 0; j < n; ++j) {
    preds[j].probs.resize(num_classes);
    preds[j].log_var.assign(num_classes, 0.0);
    preds[j].logits.resize(num_classes);
    for (std::size_t l = 0; l < num_classes; ++l) {
      preds[j].probs[l] = per_class_probs[l][j];
      preds[j].logits[l] = 0.0;
    }
  }
  return preds;
}

TEST(Aggregate, MaxPickIsMaximumWithArgmax) {
  const auto preds = preds_from_probs({{0.2, 0.9, 0.5}});
  const auto agg = aggregate(preds, {Pooling::kMax, 1.0});
  EXPECT_EQ(agg.bag_probs[0], 0.9);
  EXPECT_EQ(agg.argmax_index[0], 1);
}

TEST(Aggregate, MeanWithUnitSharpnessIsArithmeticMean) {
  const auto preds = preds_from_probs({{0.2, 0.4}});
  const auto agg = aggregate(preds, {Pooling::kMean, 1.0});
  EXPECT_NEAR(agg.bag_probs[0], 0.3, 1e-12);
}

TEST(Aggregate, LsePoolingOnSingletonIsIdentity) {
  for (double r : {1.0, 7.3, 50.0}) {
    const auto preds = preds_from_probs({{0.37}});
    const auto agg = aggregate(preds, {Pooling::kLse, r});
    EXPECT_NEAR(agg.bag_probs[0], 0.37, 1e-12);
  }
}

TEST(Aggregate, LseMatchesDirectFormula) {
  // (1/r) log(mean exp(r p)) at r=1 for probs {0, 1}
  const auto preds = preds_from_probs({{0.0, 1.0}});
  const auto agg = aggregate(preds, {Pooling::kLse, 1.0});
  const double expected = std::log((1.0 + std::exp(1.0)) / 2.0);
  EXPECT_NEAR(agg.bag_probs[0], expected, 1e-12);
  EXPECT_NEAR(agg.bag_probs[0], 0.6201, 1e-4);
}

TEST(Aggregate, EmptyBagRejected) {
  EXPECT_THROW(aggregate({}, {Pooling::kMax, 1.0}), std::invalid_argument);
}

TEST(Aggregate, NonFiniteInputRejected) {
  auto preds = preds_from_probs({{0.5, 0.5}});
  preds[1].probs[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(aggregate(preds, {Pooling::kMax, 1.0}), std::invalid_argument);
}

TEST(Aggregate, TiesBreakToLowestIndex) {
  const auto preds = preds_from_probs({{0.7, 0.7, 0.7}});
  for (auto kind : {Pooling::kMax, Pooling::kMean, Pooling::kLse}) {
    const auto agg = aggregate(preds, {kind, 1.0});
    EXPECT_EQ(agg.argmax_index[0], 0);
  }
}

TEST(Aggregate, PermutationInvarianceIsExact) {
  Rng rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = rng.uniform_int(1, 12);
    const int c = rng.uniform_int(1, 4);
    std::vector<std::vector<double>> probs(static_cast<std::size_t>(c),
                                           std::vector<double>(static_cast<std::size_t>(n)));
    for (auto& row : probs)
      for (auto& p : row) p = rng.uniform();
    auto preds = preds_from_probs(probs);
    auto shuffled = preds;
    rng.shuffle(shuffled);
    for (auto kind : {Pooling::kMax, Pooling::kMean, Pooling::kLse}) {
      for (double r : {1.0, 4.0}) {
        const auto a = aggregate(preds, {kind, r});
        const auto b = aggregate(shuffled, {kind, r});
        for (std::size_t l = 0; l < a.bag_probs.size(); ++l)
          EXPECT_EQ(a.bag_probs[l], b.bag_probs[l]);
      }
    }
  }
}

TEST(Aggregate, JensenOrderingMeanLseMax) {
  Rng rng(202);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = rng.uniform_int(1, 16);
    std::vector<std::vector<double>> probs(1, std::vector<double>(static_cast<std::size_t>(n)));
    for (auto& p : probs[0]) p = rng.uniform();
    const auto preds = preds_from_probs(probs);
    const double mean = aggregate(preds, {Pooling::kMean, 1.0}).bag_probs[0];
    const double lse = aggregate(preds, {Pooling::kLse, 1.0}).bag_probs[0];
    const double mx = aggregate(preds, {Pooling::kMax, 1.0}).bag_probs[0];
    EXPECT_LE(mean, lse + 1e-12);
    EXPECT_LE(lse, mx + 1e-12);
  }
}

TEST(Aggregate, SharpnessApproachesMaxAtAnalyticRate) {
  // With the mean-inside definitions, max - lse(r) = (log n - log S)/r with
  // S in [1, n], and max - mean(r) <= max (1 - n^(-1/r)).
  Rng rng(303);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = rng.uniform_int(1, 16);
    std::vector<std::vector<double>> probs(1, std::vector<double>(static_cast<std::size_t>(n)));
    for (auto& p : probs[0]) p = rng.uniform();
    const auto preds = preds_from_probs(probs);
    const double r = 50.0;
    const double mx = aggregate(preds, {Pooling::kMax, r}).bag_probs[0];
    const double lse = aggregate(preds, {Pooling::kLse, r}).bag_probs[0];
    const double mean = aggregate(preds, {Pooling::kMean, r}).bag_probs[0];
    const double lse_bound = std::log(static_cast<double>(n)) / r;
    const double mean_bound = mx * (1.0 - std::pow(1.0 / n, 1.0 / r));
    EXPECT_LE(mx - lse, lse_bound + 1e-9);
    EXPECT_GE(mx - lse, -1e-9);
    EXPECT_LE(mx - mean, mean_bound + 1e-9);
    EXPECT_GE(mx - mean, -1e-9);
  }
}

TEST(BagBce, KnownValues) {
  EXPECT_NEAR(bag_bce({0.5}, {{1}}), std::log(2.0), 1e-12);
  EXPECT_NEAR(bag_bce({1.0 - 1e-16}, {{1}}), 0.0, 1e-6);
  EXPECT_NEAR(bag_bce({0.9, 0.1}, {{1, 0}}), -2.0 * std::log(0.9), 1e-12);
}

TEST(BagBce, LabelValidation) {
  EXPECT_THROW(bag_bce({0.5}, {{2}}), std::invalid_argument);
  EXPECT_THROW(bag_bce({0.5, 0.5}, {{1}}), std::invalid_argument);
}

TEST(UncertaintyLoss, ZeroLogVarReducesToBceBitForBit) {
  Rng rng(404);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = rng.uniform_int(1, 6);
    std::vector<double> probs(static_cast<std::size_t>(c));
    BagLabel label;
    for (auto& p : probs) p = rng.uniform();
    for (int l = 0; l < c; ++l) label.y.push_back(rng.uniform_int(0, 1));
    const std::vector<double> zeros(static_cast<std::size_t>(c), 0.0);
    EXPECT_EQ(uncertainty_loss(probs, zeros, label), bag_bce(probs, label));
  }
}

TEST(UncertaintyLoss, GridSearchOracleConfirmsMinimizer) {
  // fixed bce = log 2: v* = log(bce), minimum 1 + log(bce)
  const double bce = std::log(2.0);
  const auto loss = [bce](double v) { return std::exp(-v) * bce + v; };
  const auto oracle = grid_search_min(loss);
  EXPECT_NEAR(oracle.argmin, std::log(bce), 1e-3);
  EXPECT_NEAR(oracle.min, 1.0 + std::log(bce), 1e-3);
  EXPECT_NEAR(oracle.min, 0.6335, 1e-3);

  // the library loss at the oracle minimizer agrees with the oracle minimum
  EXPECT_NEAR(uncertainty_loss({0.5}, {oracle.argmin}, {{1}}), oracle.min, 1e-8);
}

TEST(UncertaintyLoss, HighUncertaintyDoesNotRescueConfidentMistakes) {
  // y=1, p=0.1 (bce ~ 2.3026): raising v to 2 is worse than v=0, and the
  // oracle minimizer v* = log(bce) beats both.
  const double bce = -std::log(0.1);
  const auto loss = [bce](double v) { return std::exp(-v) * bce + v; };
  EXPECT_NEAR(loss(2.0), 2.3116, 5e-4);
  EXPECT_GT(loss(2.0), loss(0.0));
  const auto oracle = grid_search_min(loss);
  EXPECT_NEAR(oracle.argmin, std::log(bce), 1e-3);
  EXPECT_NEAR(oracle.min, 1.0 + std::log(bce), 1e-3);
  EXPECT_LT(oracle.min, loss(0.0));
  EXPECT_LT(oracle.min, loss(2.0));
}

TEST(UncertaintyLoss, ConvexInLogVarWithUniqueMinimizer) {
  Rng rng(505);
  for (int trial = 0; trial < 20; ++trial) {
    const double p = rng.uniform(0.02, 0.98);
    const double bce = -std::log(p);  // y = 1
    const auto loss = [&](double v) { return uncertainty_loss({p}, {v}, {{1}}); };
    const auto oracle = grid_search_min(loss, -8.0, 8.0, 1e-4);
    EXPECT_NEAR(oracle.argmin, std::log(bce), 1e-3);
    EXPECT_NEAR(oracle.min, 1.0 + std::log(bce), 1e-3);
    // strict convexity: midpoints lie below chords
    for (int i = 0; i < 10; ++i) {
      const double a = rng.uniform(-6.0, 6.0);
      const double b = rng.uniform(-6.0, 6.0);
      if (std::abs(a - b) < 1e-6) continue;
      EXPECT_LT(loss(0.5 * (a + b)), 0.5 * (loss(a) + loss(b)) + 1e-12);
    }
  }
}

TEST(UncertaintyLoss, LossSurfaceOrderingOfFigureTriples) {
  // y=1: correct-and-confident < wrong-with-high-uncertainty <
  // wrong-with-low-uncertainty
  const double correct_low_var = uncertainty_loss({0.99}, {-2.0}, {{1}});
  const double wrong_high_var = uncertainty_loss({0.01}, {3.0}, {{1}});
  const double wrong_low_var = uncertainty_loss({0.01}, {-2.0}, {{1}});
  EXPECT_LT(correct_low_var, wrong_high_var);
  EXPECT_LT(wrong_high_var, wrong_low_var);
}

TEST(UncertaintyLoss, NonFiniteLogVarRejected) {
  EXPECT_THROW(
      uncertainty_loss({0.5}, {std::numeric_limits<double>::infinity()}, {{1}}),
      std::invalid_argument);
}

// --- gradients ---------------------------------------------------------------

struct GradientCase {
  std::vector<std::vector<double>> logits;
  std::vector<std::vector<double>> var_raw;
  BagLabel label;
};

GradientCase random_case(Rng& rng, int min_instances = 1) {
  GradientCase c;
  const int n = rng.uniform_int(min_instances, 8);
  const int num_classes = rng.uniform_int(1, 4);
  c.logits.assign(static_cast<std::size_t>(n),
                  std::vector<double>(static_cast<std::size_t>(num_classes)));
  c.var_raw = c.logits;
  for (auto& row : c.logits)
    for (auto& v : row) v = rng.normal(0.0, 1.5);
  for (auto& row : c.var_raw)
    for (auto& v : row) v = rng.normal(0.0, 1.0);
  for (int l = 0; l < num_classes; ++l) c.label.y.push_back(rng.uniform_int(0, 1));
  return c;
}

double max_fd_error(const GradientCase& c, const LossConfig& cfg) {
  const auto analytic = loss_gradients(c.logits, c.var_raw, c.label, cfg);
  double worst = 0.0;
  const auto check = [&](bool wrt_logits, std::size_t j, std::size_t l) {
    auto probe = c;
    auto& cell = wrt_logits ? probe.logits[j][l] : probe.var_raw[j][l];
    const auto f = [&](double x) {
      const double saved = cell;
      cell = x;
      const double loss = loss_gradients(probe.logits, probe.var_raw, c.label, cfg).loss;
      cell = saved;
      return loss;
    };
    const double fd = oracles::central_difference(f, cell);
    const double an =
        wrt_logits ? analytic.d_logits[j][l] : analytic.d_log_var_raw[j][l];
    worst = std::max(worst, std::abs(an - fd) / std::max(1.0, std::abs(fd)));
  };
  for (std::size_t j = 0; j < c.logits.size(); ++j)
    for (std::size_t l = 0; l < c.logits[j].size(); ++l) {
      check(true, j, l);
      check(false, j, l);
    }
  return worst;
}

TEST(LossGradients, MatchFiniteDifferencesAcrossConfigs) {
  Rng rng(606);
  const std::vector<LossConfig> configs = {
      {{Pooling::kMax, 1.0}, false, VarTransform::kSoftplus},
      {{Pooling::kMean, 1.0}, false, VarTransform::kSoftplus},
      {{Pooling::kMean, 3.0}, false, VarTransform::kSoftplus},
      {{Pooling::kLse, 1.0}, false, VarTransform::kSoftplus},
      {{Pooling::kLse, 5.0}, false, VarTransform::kSoftplus},
      {{Pooling::kMax, 1.0}, true, VarTransform::kSoftplus},
      {{Pooling::kMax, 1.0}, true, VarTransform::kIdentity},
      {{Pooling::kMean, 2.0}, true, VarTransform::kSoftplus},
      {{Pooling::kLse, 3.0}, true, VarTransform::kIdentity},
  };
  for (const auto& cfg : configs) {
    for (int trial = 0; trial < 8; ++trial) {
      const auto c = random_case(rng);
      EXPECT_LT(max_fd_error(c, cfg), 1e-4);
    }
  }
}

TEST(LossGradients, MaxPoolingRoutesOnlyToArgmax) {
  Rng rng(707);
  const LossConfig cfg{{Pooling::kMax, 1.0}, true, VarTransform::kSoftplus};
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = random_case(rng, 2);
    const auto g = loss_gradients(c.logits, c.var_raw, c.label, cfg);
    for (std::size_t l = 0; l < c.label.y.size(); ++l) {
      const auto arg = static_cast<std::size_t>(g.argmax_index[l]);
      for (std::size_t j = 0; j < c.logits.size(); ++j) {
        if (j == arg) continue;
        EXPECT_EQ(g.d_logits[j][l], 0.0);
        EXPECT_EQ(g.d_log_var_raw[j][l], 0.0);
      }
    }
  }
}

TEST(LossGradients, StationaryAtPerClassOptimum) {
  // with the identity transform, v = log(bce) zeroes d loss / d v
  Rng rng(808);
  const LossConfig cfg{{Pooling::kMax, 1.0}, true, VarTransform::kIdentity};
  for (int trial = 0; trial < 20; ++trial) {
    auto c = random_case(rng);
    auto first = loss_gradients(c.logits, c.var_raw, c.label, cfg);
    for (std::size_t l = 0; l < c.label.y.size(); ++l) {
      const double bag_prob = first.bag_probs[l];
      const double clamped = clamp_prob(bag_prob);
      const double bce =
          c.label.y[l] == 1 ? -std::log(clamped) : -std::log1p(-clamped);
      c.var_raw[static_cast<std::size_t>(first.argmax_index[l])][l] = std::log(bce);
    }
    const auto at_opt = loss_gradients(c.logits, c.var_raw, c.label, cfg);
    for (std::size_t l = 0; l < c.label.y.size(); ++l) {
      const auto arg = static_cast<std::size_t>(at_opt.argmax_index[l]);
      EXPECT_NEAR(at_opt.d_log_var_raw[arg][l], 0.0, 1e-8);
    }
  }
}

TEST(LossGradients, UncertaintyOffMatchesBagBce) {
  Rng rng(909);
  for (auto kind : {Pooling::kMax, Pooling::kMean, Pooling::kLse}) {
    const LossConfig cfg{{kind, 1.0}, false, VarTransform::kSoftplus};
    const auto c = random_case(rng);
    const auto g = loss_gradients(c.logits, c.var_raw, c.label, cfg);
    EXPECT_EQ(g.loss, bag_bce(g.bag_probs, c.label));
  }
}

TEST(LossGradients, ClampedLogVarMatchesPlainBceBitForBit) {
  Rng rng(1010);
  const LossConfig plain{{Pooling::kMax, 1.0}, false, VarTransform::kSoftplus};
  LossConfig clamped = plain;
  clamped.use_uncertainty = true;
  clamped.clamp_log_var_to_zero = true;
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = random_case(rng);
    const auto a = loss_gradients(c.logits, c.var_raw, c.label, plain);
    const auto b = loss_gradients(c.logits, c.var_raw, c.label, clamped);
    EXPECT_EQ(a.loss, b.loss);
    for (std::size_t j = 0; j < c.logits.size(); ++j)
      for (std::size_t l = 0; l < c.label.y.size(); ++l) {
        EXPECT_EQ(a.d_logits[j][l], b.d_logits[j][l]);
        EXPECT_EQ(b.d_log_var_raw[j][l], 0.0);
      }
  }
}

TEST(NaiveLoss, SingletonAgreesWithMilMaxBitForBit) {
  Rng rng(1111);
  const LossConfig cfg{{Pooling::kMax, 1.0}, false, VarTransform::kSoftplus};
  for (int trial = 0; trial < 50; ++trial) {
    auto c = random_case(rng);
    c.logits.resize(1);
    c.var_raw.resize(1);
    const auto mil_path = loss_gradients(c.logits, c.var_raw, c.label, cfg);
    const auto naive_path = naive_loss_gradients(c.logits, c.label);
    EXPECT_EQ(mil_path.loss, naive_path.loss);
    for (std::size_t l = 0; l < c.label.y.size(); ++l)
      EXPECT_EQ(mil_path.d_logits[0][l], naive_path.d_logits[0][l]);
  }
}

TEST(Softplus, StandardFormAndDerivative) {
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-12);
  EXPECT_NEAR(softplus(30.0), 30.0, 1e-9);        // increasing, linear tail
  EXPECT_NEAR(softplus(-30.0), 0.0, 1e-9);        // positive, vanishing tail
  EXPECT_GT(softplus(1.0), softplus(-1.0));       // increasing
  EXPECT_NEAR(var_transform_derivative(VarTransform::kSoftplus, 0.4), sigmoid(0.4),
              1e-15);
}

}  // namespace
}  // namespace tubemil::mil

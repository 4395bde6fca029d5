#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace tubemil::mil {

/// Probabilities are clamped into [kProbEpsilon, 1 - kProbEpsilon] before
/// any logarithm so losses stay bounded under saturated sigmoids.
inline constexpr double kProbEpsilon = 1e-7;

inline double clamp_prob(double p) {
  return std::min(1.0 - kProbEpsilon, std::max(kProbEpsilon, p));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// log(1 + exp(x)), overflow safe.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// Per-class outputs of the instance classifier for one tubelet.
/// probs[l] = sigmoid(logits[l]); log_var[l] = v = log(sigma^2) for class l.
struct InstancePrediction {
  std::vector<double> probs;
  std::vector<double> log_var;
  std::vector<double> logits;
};

/// Bag-level multi-label target. All-zero is a valid background bag.
struct BagLabel {
  std::vector<int> y;

  int num_classes() const { return static_cast<int>(y.size()); }
};

inline void validate(const BagLabel& label) {
  for (int v : label.y)
    if (v != 0 && v != 1) throw std::invalid_argument("BagLabel: entries must be 0/1");
}

enum class Pooling { kMax, kMean, kLse };

inline std::string to_string(Pooling p) {
  switch (p) {
    case Pooling::kMax: return "max";
    case Pooling::kMean: return "mean";
    case Pooling::kLse: return "lse";
  }
  throw std::logic_error("unknown pooling");
}

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "max") return Pooling::kMax;
  if (s == "mean") return Pooling::kMean;
  if (s == "lse") return Pooling::kLse;
  throw std::invalid_argument("unknown pooling kind: " + s);
}

struct PoolingConfig {
  Pooling kind = Pooling::kMax;
  double r = 1.0;  // sharpness for mean/lse pooling
};

inline void validate(const PoolingConfig& cfg) {
  if (!(cfg.r > 0.0)) throw std::invalid_argument("PoolingConfig: r must be > 0");
}

/// How the raw uncertainty head output is turned into v = log(sigma^2).
/// kSoftplus keeps v >= 0 (sigma^2 >= 1); kIdentity leaves v unconstrained.
enum class VarTransform { kSoftplus, kIdentity };

inline std::string to_string(VarTransform t) {
  return t == VarTransform::kSoftplus ? "softplus" : "identity";
}

inline VarTransform var_transform_from_string(const std::string& s) {
  if (s == "softplus") return VarTransform::kSoftplus;
  if (s == "identity") return VarTransform::kIdentity;
  throw std::invalid_argument("unknown var transform: " + s);
}

inline double apply_var_transform(VarTransform t, double raw) {
  return t == VarTransform::kSoftplus ? softplus(raw) : raw;
}

inline double var_transform_derivative(VarTransform t, double raw) {
  return t == VarTransform::kSoftplus ? sigmoid(raw) : 1.0;
}

struct AggregateResult {
  std::vector<double> bag_probs;   // one per class
  std::vector<int> argmax_index;   // per-class maximiser, ties -> lowest index
};

namespace detail {

// Sums are taken over a sorted copy of the addends so the result is exactly
// permutation invariant, not merely up to floating-point associativity.
inline double sorted_sum(std::vector<double>& terms) {
  std::sort(terms.begin(), terms.end());
  double total = 0.0;
  for (double t : terms) total += t;
  return total;
}

inline AggregateResult aggregate_probs(const std::vector<std::vector<double>>& probs,
                                       const PoolingConfig& cfg) {
  validate(cfg);
  if (probs.empty()) throw std::invalid_argument("empty bag");
  const std::size_t num_classes = probs.front().size();
  if (num_classes == 0) throw std::invalid_argument("aggregate: zero classes");
  for (const auto& row : probs) {
    if (row.size() != num_classes)
      throw std::invalid_argument("aggregate: inconsistent class counts");
    for (double p : row)
      if (!std::isfinite(p)) throw std::invalid_argument("aggregate: non-finite probability");
  }

  const std::size_t n = probs.size();
  AggregateResult out;
  out.bag_probs.resize(num_classes);
  out.argmax_index.resize(num_classes);
  std::vector<double> terms(n);
  for (std::size_t l = 0; l < num_classes; ++l) {
    int arg = 0;
    double best = probs[0][l];
    for (std::size_t j = 1; j < n; ++j) {
      if (probs[j][l] > best) {
        best = probs[j][l];
        arg = static_cast<int>(j);
      }
    }
    out.argmax_index[l] = arg;

    switch (cfg.kind) {
      case Pooling::kMax:
        out.bag_probs[l] = best;
        break;
      case Pooling::kMean: {
        if (cfg.r == 1.0) {
          for (std::size_t j = 0; j < n; ++j) terms[j] = probs[j][l];
          out.bag_probs[l] = sorted_sum(terms) / static_cast<double>(n);
        } else {
          // ((1/n) sum p^r)^(1/r), evaluated in log space for large r.
          for (std::size_t j = 0; j < n; ++j)
            terms[j] = cfg.r * std::log(clamp_prob(probs[j][l]));
          const double shift = *std::max_element(terms.begin(), terms.end());
          for (double& t : terms) t = std::exp(t - shift);
          const double log_mean_pow =
              shift + std::log(sorted_sum(terms)) - std::log(static_cast<double>(n));
          out.bag_probs[l] = std::exp(log_mean_pow / cfg.r);
        }
        break;
      }
      case Pooling::kLse: {
        // (1/r) log((1/n) sum exp(r p)), max-shifted.
        const double shift = cfg.r * best;
        for (std::size_t j = 0; j < n; ++j)
          terms[j] = std::exp(cfg.r * probs[j][l] - shift);
        out.bag_probs[l] =
            (shift + std::log(sorted_sum(terms)) - std::log(static_cast<double>(n))) /
            cfg.r;
        break;
      }
    }
  }
  return out;
}

// Per-class binary cross-entropy term and its derivative with respect to
// the unclamped probability (zero where the clamp is active).
struct BceTerm {
  double value;
  double d_prob;
};

inline BceTerm bce_term(double prob, int y) {
  const double c = clamp_prob(prob);
  BceTerm out;
  out.value = y == 1 ? -std::log(c) : -std::log1p(-c);
  const bool clamped = prob < kProbEpsilon || prob > 1.0 - kProbEpsilon;
  out.d_prob = clamped ? 0.0 : (c - static_cast<double>(y)) / (c * (1.0 - c));
  return out;
}

}  // namespace detail

/// Bag-level aggregation (Pooling::kMax / kMean / kLse) applied per class.
/// argmax_index is defined for every pooling kind; under max pooling it is
/// the instance the gradient routes to and the instance whose uncertainty
/// is selected.
inline AggregateResult aggregate(const std::vector<InstancePrediction>& preds,
                                 const PoolingConfig& cfg) {
  if (preds.empty()) throw std::invalid_argument("empty bag");
  std::vector<std::vector<double>> probs(preds.size());
  for (std::size_t j = 0; j < preds.size(); ++j) probs[j] = preds[j].probs;
  return detail::aggregate_probs(probs, cfg);
}

/// Per-class binary cross-entropy of the bag probabilities against the bag
/// label, on clamped probabilities.
inline std::vector<double> per_class_bce(const std::vector<double>& bag_probs,
                                         const BagLabel& label) {
  validate(label);
  if (bag_probs.size() != label.y.size())
    throw std::invalid_argument("bce: class count mismatch");
  std::vector<double> out(bag_probs.size());
  for (std::size_t l = 0; l < bag_probs.size(); ++l)
    out[l] = detail::bce_term(bag_probs[l], label.y[l]).value;
  return out;
}

/// Summed binary cross-entropy over classes (one bag's loss contribution).
inline double bag_bce(const std::vector<double>& bag_probs, const BagLabel& label) {
  double total = 0.0;
  for (double term : per_class_bce(bag_probs, label)) total += term;
  return total;
}

/// Uncertainty-weighted loss, applied per class and summed:
///   sum_l exp(-v_l) * bce_l + v_l,   v_l = log(sigma_l^2)
/// where v_l is the log-variance selected at the per-class argmax instance.
/// With v = 0 this reduces to bag_bce bit for bit.
inline double uncertainty_loss(const std::vector<double>& bag_probs,
                               const std::vector<double>& selected_log_var,
                               const BagLabel& label) {
  if (selected_log_var.size() != bag_probs.size())
    throw std::invalid_argument("uncertainty_loss: class count mismatch");
  for (double v : selected_log_var)
    if (!std::isfinite(v)) throw std::invalid_argument("uncertainty_loss: non-finite v");
  const std::vector<double> bce = per_class_bce(bag_probs, label);
  double total = 0.0;
  for (std::size_t l = 0; l < bce.size(); ++l)
    total += std::exp(-selected_log_var[l]) * bce[l] + selected_log_var[l];
  return total;
}

/// Everything the backward pass needs to know about how the bag loss is
/// assembled from instance outputs.
struct LossConfig {
  PoolingConfig pooling;
  bool use_uncertainty = false;
  VarTransform var_transform = VarTransform::kSoftplus;
  bool clamp_log_var_to_zero = false;  // diagnostic: pins v = 0 (sigma^2 = 1)
};

struct LossGradients {
  double loss = 0.0;
  std::vector<double> bag_probs;
  std::vector<int> argmax_index;
  std::vector<std::vector<double>> d_logits;       // instances x classes
  std::vector<std::vector<double>> d_log_var_raw;  // instances x classes
};

/// Analytic gradients of the bag loss with respect to every instance logit
/// and raw uncertainty output. Max pooling routes the classifier gradient
/// only to the per-class argmax instance; mean/lse distribute it per their
/// smooth formulas. The uncertainty gradient always routes to the per-class
/// argmax instance (the selection rule under max pooling, kept as the
/// uniform rule for the other kinds).
inline LossGradients loss_gradients(const std::vector<std::vector<double>>& logits,
                                    const std::vector<std::vector<double>>& log_var_raw,
                                    const BagLabel& label, const LossConfig& cfg) {
  if (logits.empty()) throw std::invalid_argument("empty bag");
  if (cfg.use_uncertainty && log_var_raw.size() != logits.size())
    throw std::invalid_argument("loss_gradients: shape mismatch");
  const std::size_t n = logits.size();
  const std::size_t num_classes = logits.front().size();

  std::vector<std::vector<double>> probs(n, std::vector<double>(num_classes));
  for (std::size_t j = 0; j < n; ++j) {
    if (logits[j].size() != num_classes)
      throw std::invalid_argument("loss_gradients: ragged logits");
    for (std::size_t l = 0; l < num_classes; ++l) probs[j][l] = sigmoid(logits[j][l]);
  }

  const AggregateResult agg = detail::aggregate_probs(probs, cfg.pooling);

  LossGradients out;
  out.bag_probs = agg.bag_probs;
  out.argmax_index = agg.argmax_index;
  out.d_logits.assign(n, std::vector<double>(num_classes, 0.0));
  out.d_log_var_raw.assign(n, std::vector<double>(num_classes, 0.0));

  validate(label);
  if (label.y.size() != num_classes)
    throw std::invalid_argument("loss_gradients: label class count mismatch");

  for (std::size_t l = 0; l < num_classes; ++l) {
    const detail::BceTerm bce = detail::bce_term(agg.bag_probs[l], label.y[l]);
    const int arg = agg.argmax_index[l];

    double bce_weight = 1.0;
    if (cfg.use_uncertainty) {
      const double raw = log_var_raw[static_cast<std::size_t>(arg)][l];
      const double v =
          cfg.clamp_log_var_to_zero ? 0.0 : apply_var_transform(cfg.var_transform, raw);
      bce_weight = std::exp(-v);
      out.loss += bce_weight * bce.value + v;
      // d loss / d v = 1 - exp(-v) * bce, routed through the transform.
      const double d_v = 1.0 - bce_weight * bce.value;
      out.d_log_var_raw[static_cast<std::size_t>(arg)][l] =
          cfg.clamp_log_var_to_zero
              ? 0.0
              : d_v * var_transform_derivative(cfg.var_transform, raw);
    } else {
      out.loss += bce.value;
    }

    const double d_bag_prob = bce_weight * bce.d_prob;

    switch (cfg.pooling.kind) {
      case Pooling::kMax: {
        const double p = probs[static_cast<std::size_t>(arg)][l];
        out.d_logits[static_cast<std::size_t>(arg)][l] = d_bag_prob * p * (1.0 - p);
        break;
      }
      case Pooling::kMean: {
        if (cfg.pooling.r == 1.0) {
          for (std::size_t j = 0; j < n; ++j) {
            const double p = probs[j][l];
            out.d_logits[j][l] =
                d_bag_prob / static_cast<double>(n) * p * (1.0 - p);
          }
        } else {
          // d bag/d p_j = (1/n) (p_j / bag)^(r-1) on clamped probabilities.
          const double log_bag = std::log(agg.bag_probs[l]);
          for (std::size_t j = 0; j < n; ++j) {
            const double p = probs[j][l];
            const double pc = clamp_prob(p);
            const double d =
                std::exp((cfg.pooling.r - 1.0) * (std::log(pc) - log_bag)) /
                static_cast<double>(n);
            const bool clamped = p < kProbEpsilon || p > 1.0 - kProbEpsilon;
            out.d_logits[j][l] = clamped ? 0.0 : d_bag_prob * d * p * (1.0 - p);
          }
        }
        break;
      }
      case Pooling::kLse: {
        // d bag/d p_j = softmax_j(r p); the 1/n factor cancels.
        const double shift = cfg.pooling.r * probs[static_cast<std::size_t>(arg)][l];
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          denom += std::exp(cfg.pooling.r * probs[j][l] - shift);
        for (std::size_t j = 0; j < n; ++j) {
          const double p = probs[j][l];
          const double w = std::exp(cfg.pooling.r * p - shift) / denom;
          out.d_logits[j][l] = d_bag_prob * w * p * (1.0 - p);
        }
        break;
      }
    }
  }
  return out;
}

/// No-MIL baseline loss: every instance is supervised directly with the bag
/// label; per-bag loss is the mean over instances of the per-instance
/// summed BCE. With a single sampled instance and max pooling this agrees
/// bit for bit with the MIL path.
inline LossGradients naive_loss_gradients(const std::vector<std::vector<double>>& logits,
                                          const BagLabel& label) {
  if (logits.empty()) throw std::invalid_argument("empty bag");
  validate(label);
  const std::size_t n = logits.size();
  const std::size_t num_classes = label.y.size();
  LossGradients out;
  out.d_logits.assign(n, std::vector<double>(num_classes, 0.0));
  out.d_log_var_raw.assign(n, std::vector<double>(num_classes, 0.0));
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < n; ++j) {
    if (logits[j].size() != num_classes)
      throw std::invalid_argument("naive_loss_gradients: shape mismatch");
    for (std::size_t l = 0; l < num_classes; ++l) {
      const double p = sigmoid(logits[j][l]);
      const detail::BceTerm bce = detail::bce_term(p, label.y[l]);
      out.loss += inv_n * bce.value;
      out.d_logits[j][l] = inv_n * bce.d_prob * p * (1.0 - p);
    }
  }
  return out;
}

}  // namespace tubemil::mil

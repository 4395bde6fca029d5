#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tubemil/geometry.hpp"
#include "tubemil/mil.hpp"
#include "tubemil/rng.hpp"

namespace tubemil::model {

/// The MIL unit: tubelet instances plus a bag-level multi-label vector.
struct Bag {
  std::vector<geometry::Tubelet> instances;
  mil::BagLabel label;
  int source_clip = -1;
};

/// Per-class linear logistic head plus per-class linear uncertainty head
/// over tubelet features. Weight blocks are row-major C x D.
struct ModelParams {
  int num_classes = 0;
  int feature_dim = 0;
  std::vector<double> w_cls;
  std::vector<double> b_cls;
  std::vector<double> w_unc;
  std::vector<double> b_unc;

  static ModelParams zeros(int num_classes, int feature_dim) {
    ModelParams p;
    p.num_classes = num_classes;
    p.feature_dim = feature_dim;
    p.w_cls.assign(static_cast<std::size_t>(num_classes) * feature_dim, 0.0);
    p.b_cls.assign(static_cast<std::size_t>(num_classes), 0.0);
    p.w_unc.assign(static_cast<std::size_t>(num_classes) * feature_dim, 0.0);
    p.b_unc.assign(static_cast<std::size_t>(num_classes), 0.0);
    return p;
  }
};

struct TrainConfig {
  int bags_per_batch = 4;
  int tubelets_per_bag = 4;  // sampling cap per bag
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;  // L2 on the weight blocks, not the biases
  double grad_clip = 0.0;     // per-batch gradient L2 norm cap; 0 = off
  int epochs = 200;
  mil::PoolingConfig pooling;
  bool use_uncertainty = false;
  mil::VarTransform var_transform = mil::VarTransform::kSoftplus;
  bool naive = false;  // no-MIL baseline: bag label applied to every instance
  bool cosine_decay = true;
  bool clamp_log_var_to_zero = false;  // diagnostic: pins v = 0 (sigma^2 = 1)
  std::uint64_t seed = 1;

  mil::LossConfig loss_config() const {
    return {pooling, use_uncertainty, var_transform, clamp_log_var_to_zero};
  }
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.bags_per_batch < 1) throw std::invalid_argument("bags_per_batch must be >= 1");
  if (cfg.tubelets_per_bag < 1) throw std::invalid_argument("tubelets_per_bag must be >= 1");
  if (cfg.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  mil::validate(cfg.pooling);
}

/// Uniform sample without replacement of min(cap, |bag|) instances; the
/// bag-level label is retained unchanged. Sampled instances keep their
/// original relative order.
inline Bag sample_bag(const Bag& bag, int cap, Rng& rng) {
  if (bag.instances.empty()) throw std::invalid_argument("sample_bag: empty bag");
  if (cap < 1) throw std::invalid_argument("sample_bag: cap must be >= 1");
  Bag out;
  out.label = bag.label;
  out.source_clip = bag.source_clip;
  const std::size_t n = bag.instances.size();
  if (n <= static_cast<std::size_t>(cap)) {
    out.instances = bag.instances;
    return out;
  }
  for (std::size_t idx : rng.sample_indices(n, static_cast<std::size_t>(cap)))
    out.instances.push_back(bag.instances[idx]);
  return out;
}

namespace detail {

inline void check_dims(const ModelParams& params, const geometry::Tubelet& t) {
  if (static_cast<int>(t.feature.size()) != params.feature_dim)
    throw std::invalid_argument("feature dimension mismatch");
}

inline void instance_heads(const ModelParams& params, const geometry::Tubelet& t,
                           std::vector<double>& logits, std::vector<double>& var_raw) {
  check_dims(params, t);
  const int c = params.num_classes;
  const int d = params.feature_dim;
  logits.assign(static_cast<std::size_t>(c), 0.0);
  var_raw.assign(static_cast<std::size_t>(c), 0.0);
  for (int l = 0; l < c; ++l) {
    double z = params.b_cls[static_cast<std::size_t>(l)];
    double u = params.b_unc[static_cast<std::size_t>(l)];
    const double* wc = &params.w_cls[static_cast<std::size_t>(l) * d];
    const double* wu = &params.w_unc[static_cast<std::size_t>(l) * d];
    for (int k = 0; k < d; ++k) {
      z += wc[k] * t.feature[static_cast<std::size_t>(k)];
      u += wu[k] * t.feature[static_cast<std::size_t>(k)];
    }
    logits[static_cast<std::size_t>(l)] = z;
    var_raw[static_cast<std::size_t>(l)] = u;
  }
}

}  // namespace detail

/// Pure per-tubelet forward pass (no pooling); used at inference before
/// linking.
inline std::vector<mil::InstancePrediction> predict_tubelets(
    const ModelParams& params, const std::vector<geometry::Tubelet>& tubelets,
    mil::VarTransform transform = mil::VarTransform::kSoftplus) {
  std::vector<mil::InstancePrediction> out;
  out.reserve(tubelets.size());
  std::vector<double> logits, var_raw;
  for (const auto& t : tubelets) {
    detail::instance_heads(params, t, logits, var_raw);
    mil::InstancePrediction pred;
    pred.logits = logits;
    pred.probs.resize(logits.size());
    pred.log_var.resize(logits.size());
    for (std::size_t l = 0; l < logits.size(); ++l) {
      pred.probs[l] = mil::sigmoid(logits[l]);
      pred.log_var[l] = mil::apply_var_transform(transform, var_raw[l]);
    }
    out.push_back(std::move(pred));
  }
  return out;
}

struct ForwardResult {
  std::vector<double> bag_probs;
  std::vector<double> selected_log_var;  // log-variance of the per-class argmax
  std::vector<mil::InstancePrediction> per_instance;
};

inline ForwardResult forward(const ModelParams& params, const Bag& bag,
                             const mil::PoolingConfig& pooling,
                             mil::VarTransform transform = mil::VarTransform::kSoftplus) {
  if (bag.instances.empty()) throw std::invalid_argument("forward: empty bag");
  ForwardResult out;
  out.per_instance = predict_tubelets(params, bag.instances, transform);
  const mil::AggregateResult agg = mil::aggregate(out.per_instance, pooling);
  out.bag_probs = agg.bag_probs;
  out.selected_log_var.resize(agg.bag_probs.size());
  for (std::size_t l = 0; l < agg.bag_probs.size(); ++l) {
    const auto& chosen = out.per_instance[static_cast<std::size_t>(agg.argmax_index[l])];
    out.selected_log_var[l] = chosen.log_var[l];
  }
  return out;
}

struct ParamGradients {
  std::vector<double> w_cls, b_cls, w_unc, b_unc;

  static ParamGradients zeros(const ModelParams& params) {
    ParamGradients g;
    g.w_cls.assign(params.w_cls.size(), 0.0);
    g.b_cls.assign(params.b_cls.size(), 0.0);
    g.w_unc.assign(params.w_unc.size(), 0.0);
    g.b_unc.assign(params.b_unc.size(), 0.0);
    return g;
  }
};

struct BagBackwardResult {
  double loss = 0.0;
  ParamGradients grads;
};

/// Loss and exact parameter gradients for one (already sampled) bag.
inline BagBackwardResult bag_backward(const ModelParams& params, const Bag& bag,
                                      const TrainConfig& cfg) {
  if (bag.instances.empty()) throw std::invalid_argument("bag_backward: empty bag");
  const std::size_t n = bag.instances.size();
  std::vector<std::vector<double>> logits(n), var_raw(n);
  {
    std::vector<double> z, u;
    for (std::size_t j = 0; j < n; ++j) {
      detail::instance_heads(params, bag.instances[j], z, u);
      logits[j] = z;
      var_raw[j] = u;
    }
  }

  const mil::LossGradients lg =
      cfg.naive ? mil::naive_loss_gradients(logits, bag.label)
                : mil::loss_gradients(logits, var_raw, bag.label, cfg.loss_config());

  BagBackwardResult out;
  out.loss = lg.loss;
  out.grads = ParamGradients::zeros(params);
  const int c = params.num_classes;
  const int d = params.feature_dim;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& x = bag.instances[j].feature;
    for (int l = 0; l < c; ++l) {
      const double dz = lg.d_logits[j][static_cast<std::size_t>(l)];
      if (dz != 0.0) {
        double* wg = &out.grads.w_cls[static_cast<std::size_t>(l) * d];
        for (int k = 0; k < d; ++k) wg[k] += dz * x[static_cast<std::size_t>(k)];
        out.grads.b_cls[static_cast<std::size_t>(l)] += dz;
      }
      const double du = lg.d_log_var_raw[j][static_cast<std::size_t>(l)];
      if (du != 0.0) {
        double* wg = &out.grads.w_unc[static_cast<std::size_t>(l) * d];
        for (int k = 0; k < d; ++k) wg[k] += du * x[static_cast<std::size_t>(k)];
        out.grads.b_unc[static_cast<std::size_t>(l)] += du;
      }
    }
  }
  return out;
}

struct TrainResult {
  ModelParams params;
  std::vector<double> epoch_mean_loss;
};

/// Momentum SGD over shuffled mini-batches of bags. Bags are down-sampled
/// via sample_bag each time they are visited; per-bag losses are averaged
/// (not summed) across the batch so the effective step size does not depend
/// on bags_per_batch. Fully deterministic for a fixed seed.
inline TrainResult train(const std::vector<Bag>& dataset, const TrainConfig& cfg) {
  validate(cfg);
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  const int c = dataset.front().label.num_classes();
  int d = -1;
  for (const auto& bag : dataset) {
    if (bag.instances.empty()) throw std::invalid_argument("train: empty bag in dataset");
    if (bag.label.num_classes() != c)
      throw std::invalid_argument("train: inconsistent class counts");
    for (const auto& t : bag.instances) {
      if (d < 0) d = static_cast<int>(t.feature.size());
      if (static_cast<int>(t.feature.size()) != d)
        throw std::invalid_argument("train: inconsistent feature dims");
    }
  }

  Rng rng = Rng::substream(cfg.seed, 0x7261696eULL);  // training stream

  ModelParams params = ModelParams::zeros(c, d);
  for (auto& w : params.w_cls) w = rng.normal(0.0, 0.01);
  for (auto& w : params.w_unc) w = rng.normal(0.0, 0.01);

  ParamGradients velocity = ParamGradients::zeros(params);
  ParamGradients batch_grads = ParamGradients::zeros(params);

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  TrainResult result;
  result.epoch_mean_loss.reserve(static_cast<std::size_t>(cfg.epochs));

  const auto axpy = [](std::vector<double>& acc, const std::vector<double>& v,
                       double scale) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += scale * v[i];
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr =
        cfg.cosine_decay
            ? cfg.learning_rate * 0.5 *
                  (1.0 + std::cos(std::numbers::pi * epoch / cfg.epochs))
            : cfg.learning_rate;
    rng.shuffle(order);

    double epoch_loss = 0.0;
    std::size_t pos = 0;
    while (pos < order.size()) {
      const std::size_t batch_end =
          std::min(order.size(), pos + static_cast<std::size_t>(cfg.bags_per_batch));
      const double inv_batch = 1.0 / static_cast<double>(batch_end - pos);

      std::fill(batch_grads.w_cls.begin(), batch_grads.w_cls.end(), 0.0);
      std::fill(batch_grads.b_cls.begin(), batch_grads.b_cls.end(), 0.0);
      std::fill(batch_grads.w_unc.begin(), batch_grads.w_unc.end(), 0.0);
      std::fill(batch_grads.b_unc.begin(), batch_grads.b_unc.end(), 0.0);

      for (std::size_t i = pos; i < batch_end; ++i) {
        const Bag sampled = sample_bag(dataset[order[i]], cfg.tubelets_per_bag, rng);
        const BagBackwardResult bb = bag_backward(params, sampled, cfg);
        epoch_loss += bb.loss;
        axpy(batch_grads.w_cls, bb.grads.w_cls, inv_batch);
        axpy(batch_grads.b_cls, bb.grads.b_cls, inv_batch);
        axpy(batch_grads.w_unc, bb.grads.w_unc, inv_batch);
        axpy(batch_grads.b_unc, bb.grads.b_unc, inv_batch);
      }

      if (cfg.grad_clip > 0.0) {
        double norm2 = 0.0;
        for (const auto* block : {&batch_grads.w_cls, &batch_grads.b_cls,
                                  &batch_grads.w_unc, &batch_grads.b_unc})
          for (double g : *block) norm2 += g * g;
        if (norm2 > cfg.grad_clip * cfg.grad_clip) {
          const double scale = cfg.grad_clip / std::sqrt(norm2);
          for (auto* block : {&batch_grads.w_cls, &batch_grads.b_cls,
                              &batch_grads.w_unc, &batch_grads.b_unc})
            for (double& g : *block) g *= scale;
        }
      }

      const auto step = [&](std::vector<double>& param, std::vector<double>& vel,
                            const std::vector<double>& grad, double decay) {
        for (std::size_t i = 0; i < param.size(); ++i) {
          vel[i] = cfg.momentum * vel[i] + grad[i] + decay * param[i];
          param[i] -= lr * vel[i];
        }
      };
      step(params.w_cls, velocity.w_cls, batch_grads.w_cls, cfg.weight_decay);
      step(params.b_cls, velocity.b_cls, batch_grads.b_cls, 0.0);
      if (cfg.use_uncertainty && !cfg.naive && !cfg.clamp_log_var_to_zero) {
        step(params.w_unc, velocity.w_unc, batch_grads.w_unc, cfg.weight_decay);
        step(params.b_unc, velocity.b_unc, batch_grads.b_unc, 0.0);
      }
      pos = batch_end;
    }
    result.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(dataset.size()));
  }

  result.params = std::move(params);
  return result;
}

// --- checkpoint serialization ----------------------------------------------

inline constexpr const char* kCheckpointFormat = "tubemil-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json checkpoint_to_json(const ModelParams& params,
                                         const mil::LossConfig& loss_cfg) {
  nlohmann::json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["num_classes"] = params.num_classes;
  j["feature_dim"] = params.feature_dim;
  j["w_cls"] = params.w_cls;
  j["b_cls"] = params.b_cls;
  j["w_unc"] = params.w_unc;
  j["b_unc"] = params.b_unc;
  j["pooling"] = {{"kind", mil::to_string(loss_cfg.pooling.kind)},
                  {"r", loss_cfg.pooling.r}};
  j["use_uncertainty"] = loss_cfg.use_uncertainty;
  j["var_transform"] = mil::to_string(loss_cfg.var_transform);
  return j;
}

struct Checkpoint {
  ModelParams params;
  mil::LossConfig loss_config;
};

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kCheckpointFormat)
    throw std::runtime_error("not a tubemil checkpoint");
  if (j.value("version", 0) != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version");
  Checkpoint c;
  c.params.num_classes = j.at("num_classes").get<int>();
  c.params.feature_dim = j.at("feature_dim").get<int>();
  c.params.w_cls = j.at("w_cls").get<std::vector<double>>();
  c.params.b_cls = j.at("b_cls").get<std::vector<double>>();
  c.params.w_unc = j.at("w_unc").get<std::vector<double>>();
  c.params.b_unc = j.at("b_unc").get<std::vector<double>>();
  c.loss_config.pooling.kind = mil::pooling_from_string(j.at("pooling").at("kind"));
  c.loss_config.pooling.r = j.at("pooling").at("r").get<double>();
  c.loss_config.use_uncertainty = j.at("use_uncertainty").get<bool>();
  c.loss_config.var_transform =
      mil::var_transform_from_string(j.at("var_transform"));
  const std::size_t expect =
      static_cast<std::size_t>(c.params.num_classes) * c.params.feature_dim;
  if (c.params.w_cls.size() != expect || c.params.w_unc.size() != expect)
    throw std::runtime_error("checkpoint: weight block size mismatch");
  return c;
}

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const mil::LossConfig& loss_cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << checkpoint_to_json(params, loss_cfg).dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  nlohmann::json j;
  in >> j;
  return checkpoint_from_json(j);
}

}  // namespace tubemil::model

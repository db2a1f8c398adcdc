#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fairtest/common.hpp"

namespace fairtest {

enum class Activation { kRelu, kSigmoid, kSoftmax, kIdentity };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kSoftmax: return "softmax";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

inline Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "softmax") return Activation::kSoftmax;
  if (name == "identity") return Activation::kIdentity;
  throw ParseError("unknown activation name: " + name);
}

struct LayerSpec {
  int width = 0;
  Activation activation = Activation::kRelu;
};

/// Per-layer activation outputs of a single forward pass. `post[l]` holds
/// the activation of layer l (hidden layers first, output layer last);
/// `pre` holds the matching pre-activation values needed by backward passes.
struct ActivationTrace {
  std::vector<Eigen::VectorXd> pre;
  std::vector<Eigen::VectorXd> post;

  const Eigen::VectorXd& output() const { return post.back(); }
};

/// Dense feed-forward network. Immutable in normal use: forward passes and
/// gradients are const and safe to call concurrently; training builds a new
/// network. A layer may carry a neuron mask that pins the masked activations
/// to zero in both the forward and backward pass.
class Network {
 public:
  Network() = default;

  Network(int input_dim, std::vector<LayerSpec> layers)
      : input_dim_(input_dim), specs_(std::move(layers)) {
    if (input_dim_ < 1) throw ConfigError("input_dim must be positive");
    if (specs_.empty()) throw ConfigError("network needs at least one layer");
    int fan_in = input_dim_;
    for (std::size_t l = 0; l < specs_.size(); ++l) {
      if (specs_[l].width < 1) throw ConfigError("layer width must be >= 1");
      if (specs_[l].activation == Activation::kSoftmax && l + 1 != specs_.size())
        throw ConfigError("softmax is only permitted on the output layer");
      weights_.emplace_back(Eigen::MatrixXd::Zero(specs_[l].width, fan_in));
      biases_.emplace_back(Eigen::VectorXd::Zero(specs_[l].width));
      fan_in = specs_[l].width;
    }
    masks_.resize(specs_.size());
  }

  /// Seeded uniform init in [-b, b] with b = sqrt(6 / (fan_in + fan_out)).
  static Network glorot(int input_dim, std::vector<LayerSpec> layers,
                        std::uint64_t seed) {
    Network net(input_dim, std::move(layers));
    Rng rng = derive_rng(seed, Stream::kWeightInit);
    for (std::size_t l = 0; l < net.weights_.size(); ++l) {
      auto& w = net.weights_[l];
      double limit = std::sqrt(6.0 / (w.cols() + w.rows()));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = dist(rng);
    }
    return net;
  }

  int input_dim() const { return input_dim_; }
  int depth() const { return static_cast<int>(specs_.size()); }
  int output_dim() const { return specs_.back().width; }
  const LayerSpec& layer(int l) const { return specs_.at(l); }
  const std::vector<LayerSpec>& layers() const { return specs_; }
  int hidden_layer_count() const { return depth() - 1; }

  Eigen::MatrixXd& weight(int l) { return weights_.at(l); }
  const Eigen::MatrixXd& weight(int l) const { return weights_.at(l); }
  Eigen::VectorXd& bias(int l) { return biases_.at(l); }
  const Eigen::VectorXd& bias(int l) const { return biases_.at(l); }
  const std::vector<bool>& mask(int l) const { return masks_.at(l); }

  ActivationTrace forward(const Eigen::VectorXd& x) const {
    if (x.size() != input_dim_)
      throw DimensionMismatch("forward: input has length " +
                              std::to_string(x.size()) + ", expected " +
                              std::to_string(input_dim_));
    ActivationTrace trace;
    trace.pre.reserve(specs_.size());
    trace.post.reserve(specs_.size());
    const Eigen::VectorXd* in = &x;
    for (std::size_t l = 0; l < specs_.size(); ++l) {
      Eigen::VectorXd z = weights_[l] * (*in) + biases_[l];
      Eigen::VectorXd a = apply_activation(specs_[l].activation, z);
      if (!masks_[l].empty()) {
        for (Eigen::Index k = 0; k < a.size(); ++k)
          if (masks_[l][static_cast<std::size_t>(k)]) a[k] = 0.0;
      }
      trace.pre.push_back(std::move(z));
      trace.post.push_back(std::move(a));
      in = &trace.post.back();
    }
    return trace;
  }

  Eigen::VectorXd output(const Eigen::VectorXd& x) const {
    return forward(x).post.back();
  }

  /// Predicted class label: argmax over the output vector, first index wins
  /// ties.
  int predict(const Eigen::VectorXd& x) const {
    Eigen::VectorXd out = output(x);
    int best = 0;
    for (Eigen::Index k = 1; k < out.size(); ++k)
      if (out[k] > out[best]) best = static_cast<int>(k);
    return best;
  }

  /// Copy of this network with the given hidden-layer neurons forced to zero.
  Network with_mask(int layer, const std::vector<bool>& zeroed) const {
    if (layer < 0 || layer >= depth() - 1)
      throw BadLayer("mask layer " + std::to_string(layer) +
                     " is not a hidden layer");
    if (static_cast<int>(zeroed.size()) != specs_[layer].width)
      throw DimensionMismatch("mask length does not match layer width");
    Network out = *this;
    bool any = false;
    for (bool b : zeroed) any = any || b;
    out.masks_[layer] = any ? zeroed : std::vector<bool>{};
    return out;
  }

  nlohmann::json to_json() const;
  static Network from_json(const nlohmann::json& doc);

 private:
  static Eigen::VectorXd apply_activation(Activation act,
                                          const Eigen::VectorXd& z) {
    switch (act) {
      case Activation::kRelu:
        return z.cwiseMax(0.0);
      case Activation::kSigmoid:
        return z.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
      case Activation::kIdentity:
        return z;
      case Activation::kSoftmax: {
        Eigen::VectorXd shifted = z.array() - z.maxCoeff();
        Eigen::VectorXd e = shifted.array().exp();
        return e / e.sum();
      }
    }
    throw Error("unreachable activation");
  }

  int input_dim_ = 0;
  std::vector<LayerSpec> specs_;
  std::vector<Eigen::MatrixXd> weights_;
  std::vector<Eigen::VectorXd> biases_;
  std::vector<std::vector<bool>> masks_;
};

/// A differentiable scalar read-out of one layer's activation vector.
/// `value` evaluates the objective at that layer's activations; `gradient`
/// returns its partial derivatives with respect to them.
struct ScalarObjective {
  int layer = -1;
  std::function<double(const Eigen::VectorXd&)> value;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
};

inline double objective_value(const Network& net, const Eigen::VectorXd& x,
                              const ScalarObjective& obj) {
  ActivationTrace trace = net.forward(x);
  return obj.value(trace.post.at(obj.layer));
}

/// Exact reverse-mode derivative of the objective with respect to the input
/// vector. ReLU uses subgradient 0 at the kink.
inline Eigen::VectorXd input_gradient(const Network& net,
                                      const Eigen::VectorXd& x,
                                      const ScalarObjective& obj) {
  ActivationTrace trace = net.forward(x);
  if (obj.layer < 0 || obj.layer >= net.depth())
    throw BadLayer("objective reads layer " + std::to_string(obj.layer));
  Eigen::VectorXd upstream = obj.gradient(trace.post[obj.layer]);
  if (upstream.size() != trace.post[obj.layer].size())
    throw DimensionMismatch("objective gradient has wrong length");
  for (int l = obj.layer; l >= 0; --l) {
    const auto& spec = net.layer(l);
    const Eigen::VectorXd& pre = trace.pre[l];
    const Eigen::VectorXd& post = trace.post[l];
    Eigen::VectorXd local(pre.size());
    switch (spec.activation) {
      case Activation::kRelu:
        for (Eigen::Index k = 0; k < pre.size(); ++k)
          local[k] = pre[k] > 0.0 ? upstream[k] : 0.0;
        break;
      case Activation::kSigmoid:
        local = upstream.array() * post.array() * (1.0 - post.array());
        break;
      case Activation::kIdentity:
        local = upstream;
        break;
      case Activation::kSoftmax: {
        // J^T u for the softmax Jacobian s_i(delta_ij - s_j).
        double dot = post.dot(upstream);
        local = post.array() * (upstream.array() - dot);
        break;
      }
    }
    if (!net.mask(l).empty()) {
      const auto& m = net.mask(l);
      for (Eigen::Index k = 0; k < local.size(); ++k)
        if (m[static_cast<std::size_t>(k)]) local[k] = 0.0;
    }
    upstream = net.weight(l).transpose() * local;
  }
  if (!upstream.allFinite())
    throw NonFiniteGradient("input gradient has non-finite entries");
  return upstream;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class OptimizerKind { kAdam, kSgd };

struct TrainConfig {
  double learning_rate = 0.001;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  int epochs = 40;
  int batch_size = 32;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  }
};

struct TrainResult {
  Network net;
  double train_accuracy = 0.0;
  double final_loss = 0.0;
};

/// Minimizes the multi-class cross-entropy over the dataset with mini-batch
/// Adam or SGD. Requires a softmax output layer; labels are class indices.
/// `first_trainable_layer` freezes every layer below it (used when training
/// a new head on frozen feature layers).
inline TrainResult train(const Network& initial,
                         const std::vector<Eigen::VectorXd>& xs,
                         const std::vector<int>& ys, const TrainConfig& cfg,
                         int first_trainable_layer = 0) {
  cfg.validate();
  if (xs.empty()) throw EmptyDataset("train: no instances");
  if (xs.size() != ys.size())
    throw LengthMismatch("train: labels do not match instances");
  if (initial.layer(initial.depth() - 1).activation != Activation::kSoftmax)
    throw ConfigError("train requires a softmax output layer");
  const int classes = initial.output_dim();
  for (int y : ys)
    if (y < 0 || y >= classes) throw ConfigError("label out of range");
  if (first_trainable_layer < 0 || first_trainable_layer >= initial.depth())
    throw BadLayer("first_trainable_layer out of range");

  Network net = initial;
  const int depth = net.depth();
  const std::size_t n = xs.size();

  std::vector<Eigen::MatrixXd> grad_w(depth), adam_mw(depth), adam_vw(depth);
  std::vector<Eigen::VectorXd> grad_b(depth), adam_mb(depth), adam_vb(depth);
  for (int l = 0; l < depth; ++l) {
    grad_w[l] = Eigen::MatrixXd::Zero(net.weight(l).rows(), net.weight(l).cols());
    grad_b[l] = Eigen::VectorXd::Zero(net.bias(l).size());
    adam_mw[l] = grad_w[l];
    adam_vw[l] = grad_w[l];
    adam_mb[l] = grad_b[l];
    adam_vb[l] = grad_b[l];
  }

  Rng rng = derive_rng(cfg.rng_seed, Stream::kTraining);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  constexpr double kAdamBeta1 = 0.9;
  constexpr double kAdamBeta2 = 0.999;
  constexpr double kAdamEps = 1e-8;
  constexpr double kLogFloor = 1e-12;
  long adam_step = 0;
  double epoch_loss = 0.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      std::size_t end = std::min(n, start + cfg.batch_size);
      double batch_count = static_cast<double>(end - start);
      for (int l = first_trainable_layer; l < depth; ++l) {
        grad_w[l].setZero();
        grad_b[l].setZero();
      }
      double batch_loss = 0.0;
      for (std::size_t bi = start; bi < end; ++bi) {
        const Eigen::VectorXd& x = xs[order[bi]];
        int y = ys[order[bi]];
        ActivationTrace trace = net.forward(x);
        const Eigen::VectorXd& prob = trace.post.back();
        batch_loss += -std::log(std::max(prob[y], kLogFloor));
        // Softmax + cross-entropy collapses to (p - onehot) at the output.
        Eigen::VectorXd delta = prob;
        delta[y] -= 1.0;
        for (int l = depth - 1; l >= first_trainable_layer; --l) {
          const Eigen::VectorXd& below =
              l == 0 ? x : trace.post[static_cast<std::size_t>(l) - 1];
          grad_w[l].noalias() += delta * below.transpose();
          grad_b[l] += delta;
          if (l == first_trainable_layer) break;
          Eigen::VectorXd back = net.weight(l).transpose() * delta;
          const Eigen::VectorXd& pre = trace.pre[static_cast<std::size_t>(l) - 1];
          const Eigen::VectorXd& post = trace.post[static_cast<std::size_t>(l) - 1];
          switch (net.layer(l - 1).activation) {
            case Activation::kRelu:
              for (Eigen::Index k = 0; k < back.size(); ++k)
                if (pre[k] <= 0.0) back[k] = 0.0;
              break;
            case Activation::kSigmoid:
              back = back.array() * post.array() * (1.0 - post.array());
              break;
            case Activation::kIdentity:
              break;
            case Activation::kSoftmax:
              throw ConfigError("softmax below the output layer");
          }
          if (!net.mask(l - 1).empty()) {
            const auto& m = net.mask(l - 1);
            for (Eigen::Index k = 0; k < back.size(); ++k)
              if (m[static_cast<std::size_t>(k)]) back[k] = 0.0;
          }
          delta = std::move(back);
        }
      }
      batch_loss /= batch_count;
      epoch_loss += batch_loss * batch_count;
      if (!std::isfinite(batch_loss))
        throw Divergence("training loss became non-finite");

      if (cfg.optimizer == OptimizerKind::kSgd) {
        for (int l = first_trainable_layer; l < depth; ++l) {
          net.weight(l) -= (cfg.learning_rate / batch_count) * grad_w[l];
          net.bias(l) -= (cfg.learning_rate / batch_count) * grad_b[l];
        }
      } else {
        ++adam_step;
        double corr1 = 1.0 - std::pow(kAdamBeta1, adam_step);
        double corr2 = 1.0 - std::pow(kAdamBeta2, adam_step);
        for (int l = first_trainable_layer; l < depth; ++l) {
          Eigen::MatrixXd gw = grad_w[l] / batch_count;
          Eigen::VectorXd gb = grad_b[l] / batch_count;
          adam_mw[l] = kAdamBeta1 * adam_mw[l] + (1.0 - kAdamBeta1) * gw;
          adam_vw[l] = kAdamBeta2 * adam_vw[l].array().matrix() +
                       (1.0 - kAdamBeta2) * gw.array().square().matrix();
          adam_mb[l] = kAdamBeta1 * adam_mb[l] + (1.0 - kAdamBeta1) * gb;
          adam_vb[l] = kAdamBeta2 * adam_vb[l].array().matrix() +
                       (1.0 - kAdamBeta2) * gb.array().square().matrix();
          net.weight(l).array() -=
              cfg.learning_rate * (adam_mw[l].array() / corr1) /
              ((adam_vw[l].array() / corr2).sqrt() + kAdamEps);
          net.bias(l).array() -=
              cfg.learning_rate * (adam_mb[l].array() / corr1) /
              ((adam_vb[l].array() / corr2).sqrt() + kAdamEps);
        }
      }
    }
  }

  TrainResult result;
  result.final_loss = epoch_loss / static_cast<double>(n);
  long correct = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (net.predict(xs[i]) == ys[i]) ++correct;
  result.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  result.net = std::move(net);
  return result;
}

inline double accuracy(const Network& net, const std::vector<Eigen::VectorXd>& xs,
                       const std::vector<int>& ys) {
  if (xs.empty()) throw EmptyDataset("accuracy: no instances");
  long correct = 0;
  for (std::size_t i = 0; i < xs.size(); ++i)
    if (net.predict(xs[i]) == ys[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json Network::to_json() const {
  nlohmann::json doc;
  doc["format_version"] = 1;
  doc["input_dim"] = input_dim_;
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& spec : specs_) {
    layers.push_back({{"width", spec.width},
                      {"activation", activation_name(spec.activation)}});
  }
  doc["layers"] = std::move(layers);
  nlohmann::json weights = nlohmann::json::array();
  nlohmann::json biases = nlohmann::json::array();
  for (std::size_t l = 0; l < weights_.size(); ++l) {
    nlohmann::json w = nlohmann::json::array();
    for (Eigen::Index i = 0; i < weights_[l].rows(); ++i)
      for (Eigen::Index j = 0; j < weights_[l].cols(); ++j)
        w.push_back(weights_[l](i, j));
    weights.push_back(std::move(w));
    nlohmann::json b = nlohmann::json::array();
    for (Eigen::Index i = 0; i < biases_[l].size(); ++i)
      b.push_back(biases_[l][i]);
    biases.push_back(std::move(b));
  }
  doc["weights"] = std::move(weights);
  doc["biases"] = std::move(biases);
  bool any_mask = false;
  for (const auto& m : masks_) any_mask = any_mask || !m.empty();
  if (any_mask) {
    nlohmann::json masks = nlohmann::json::array();
    for (std::size_t l = 0; l < masks_.size(); ++l) {
      nlohmann::json m = nlohmann::json::array();
      for (std::size_t k = 0; k < masks_[l].size(); ++k)
        m.push_back(masks_[l][k] ? 1 : 0);
      masks.push_back(std::move(m));
    }
    doc["masks"] = std::move(masks);
  }
  return doc;
}

inline Network Network::from_json(const nlohmann::json& doc) {
  try {
    if (doc.at("format_version").get<int>() != 1)
      throw ParseError("unsupported model format_version");
    int input_dim = doc.at("input_dim").get<int>();
    std::vector<LayerSpec> specs;
    for (const auto& item : doc.at("layers")) {
      specs.push_back({item.at("width").get<int>(),
                       activation_from_name(item.at("activation"))});
    }
    Network net(input_dim, std::move(specs));
    const auto& weights = doc.at("weights");
    const auto& biases = doc.at("biases");
    if (weights.size() != net.weights_.size() ||
        biases.size() != net.biases_.size())
      throw ParseError("model layer count mismatch");
    for (std::size_t l = 0; l < net.weights_.size(); ++l) {
      auto& w = net.weights_[l];
      const auto& flat = weights[l];
      if (static_cast<Eigen::Index>(flat.size()) != w.rows() * w.cols())
        throw ParseError("weight matrix size mismatch at layer " +
                         std::to_string(l));
      Eigen::Index idx = 0;
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j)
          w(i, j) = flat[idx++].get<double>();
      auto& b = net.biases_[l];
      const auto& bflat = biases[l];
      if (static_cast<Eigen::Index>(bflat.size()) != b.size())
        throw ParseError("bias size mismatch at layer " + std::to_string(l));
      for (Eigen::Index i = 0; i < b.size(); ++i) b[i] = bflat[i].get<double>();
      if (!w.allFinite() || !b.allFinite())
        throw ParseError("model weights contain non-finite values");
    }
    if (doc.contains("masks")) {
      const auto& masks = doc.at("masks");
      for (std::size_t l = 0; l < net.masks_.size() && l < masks.size(); ++l) {
        const auto& m = masks[l];
        if (m.empty()) continue;
        std::vector<bool> mask(m.size());
        for (std::size_t k = 0; k < m.size(); ++k)
          mask[k] = m[k].get<int>() != 0;
        if (static_cast<int>(mask.size()) != net.specs_[l].width)
          throw ParseError("mask size mismatch at layer " + std::to_string(l));
        net.masks_[l] = std::move(mask);
      }
    }
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("malformed model document: ") + e.what());
  }
}

inline void save_model(const std::string& path, const Network& net) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path + " for writing");
  out << net.to_json().dump(2) << "\n";
}

inline Network load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open model file " + path);
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid model JSON: ") + e.what());
  }
  return Network::from_json(doc);
}

/// Stable content hash of the serialized model, for report provenance.
inline std::string model_hash(const Network& net) {
  std::string text = net.to_json().dump();
  return to_hex(fnv1a(text.data(), text.size()));
}

}  // namespace fairtest

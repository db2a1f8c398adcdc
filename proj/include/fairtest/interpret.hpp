#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "fairtest/common.hpp"
#include "fairtest/dataset.hpp"
#include "fairtest/network.hpp"

namespace fairtest {

inline constexpr double kDefaultStepInterval = 0.005;

/// Tanh-normalized mean absolute activation differences of one layer,
/// averaged over instance pairs. Entries live in [0, 1).
struct LayerActDiff {
  int layer = -1;
  Eigen::VectorXd z;
};

/// Threshold sweep over a layer's normalized activation differences.
/// sen_neu_r[i] is the fraction of neurons strictly above thresholds[i];
/// auc is the step-weighted sum of those fractions.
struct ASCurve {
  double step_interval = kDefaultStepInterval;
  std::vector<double> thresholds;
  std::vector<double> sen_neu_r;
  double auc = 0.0;
};

struct LayerAnalysis {
  LayerActDiff actdiff;
  ASCurve curve;
};

struct BiasedNeurons {
  double threshold = 0.0;        // adaptive cut T_d
  std::vector<bool> positions;   // true where z >= threshold
};

/// Full per-layer discrimination analysis of a network: activation
/// differences and threshold curves for every hidden layer, the layer with
/// the largest area, and the biased-neuron positions at the adaptive
/// threshold.
struct BiasProfile {
  std::vector<LayerAnalysis> layers;
  int most_biased_layer = -1;
  double t_d = 0.0;
  std::vector<bool> biased;

  std::size_t biased_count() const {
    std::size_t n = 0;
    for (bool b : biased) n += b ? 1 : 0;
    return n;
  }
};

namespace detail {

inline double clamp_below_one(double v) {
  return v >= 1.0 ? std::nextafter(1.0, 0.0) : v;
}

}  // namespace detail

/// Mean absolute per-neuron activation difference over the pairs, normalized
/// through tanh.
inline LayerActDiff actdiff(const Network& net,
                            const std::vector<InstancePair>& pairs,
                            int layer) {
  if (pairs.empty()) throw EmptyPairs("actdiff: no instance pairs");
  if (layer < 0 || layer >= net.depth())
    throw BadLayer("actdiff: layer " + std::to_string(layer) +
                   " out of range");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(net.layer(layer).width);
  for (const auto& pair : pairs) {
    ActivationTrace ta = net.forward(pair.a.values);
    ActivationTrace tb = net.forward(pair.b.values);
    sum += (ta.post[layer] - tb.post[layer]).cwiseAbs();
  }
  LayerActDiff result;
  result.layer = layer;
  result.z = (sum / static_cast<double>(pairs.size()))
                 .unaryExpr([](double v) {
                   return detail::clamp_below_one(std::tanh(v));
                 });
  return result;
}

/// Threshold grid 0, step, 2*step, ... capped at max(z), which is appended
/// when it is not itself a grid multiple. The fraction strictly above the
/// final threshold is always zero.
inline ASCurve as_curve(const Eigen::VectorXd& z,
                        double step_interval = kDefaultStepInterval) {
  if (step_interval <= 0.0) throw ConfigError("step_interval must be > 0");
  if (z.size() == 0) throw EmptyPairs("as_curve: empty activation vector");
  ASCurve curve;
  curve.step_interval = step_interval;
  const double max_z = z.maxCoeff();
  const double n = static_cast<double>(z.size());
  long k = 0;
  for (;; ++k) {
    double t = static_cast<double>(k) * step_interval;
    if (t > max_z) break;
    curve.thresholds.push_back(t);
  }
  if (curve.thresholds.empty() || curve.thresholds.back() < max_z)
    curve.thresholds.push_back(max_z);
  curve.sen_neu_r.reserve(curve.thresholds.size());
  double area = 0.0;
  for (double t : curve.thresholds) {
    long above = 0;
    for (Eigen::Index i = 0; i < z.size(); ++i)
      if (z[i] > t) ++above;
    double frac = static_cast<double>(above) / n;
    curve.sen_neu_r.push_back(frac);
    area += frac * step_interval;
  }
  curve.auc = area;
  return curve;
}

/// Index of the curve with the largest area; earliest layer wins ties.
inline int select_biased_layer(const std::vector<ASCurve>& curves) {
  if (curves.empty()) throw EmptyPairs("select_biased_layer: no curves");
  int best = 0;
  for (std::size_t l = 1; l < curves.size(); ++l)
    if (curves[l].auc > curves[best].auc) best = static_cast<int>(l);
  return best;
}

/// Adaptive threshold where the curve crosses the y = x line: the first grid
/// threshold t with sen_neu_r(t) <= t. Neurons at or above the threshold are
/// flagged. Never empty when the curve has positive area.
inline BiasedNeurons identify_biased_neurons(const ASCurve& curve,
                                             const Eigen::VectorXd& z) {
  if (curve.auc <= 0.0)
    throw NoDiscrimination("activation differences are all zero");
  BiasedNeurons result;
  result.threshold = -1.0;
  for (std::size_t i = 0; i < curve.thresholds.size(); ++i) {
    if (curve.sen_neu_r[i] <= curve.thresholds[i]) {
      result.threshold = curve.thresholds[i];
      break;
    }
  }
  if (result.threshold < 0.0)
    throw NoDiscrimination("threshold curve never crosses y = x");
  result.positions.resize(static_cast<std::size_t>(z.size()));
  for (Eigen::Index i = 0; i < z.size(); ++i)
    result.positions[static_cast<std::size_t>(i)] = z[i] >= result.threshold;
  return result;
}

/// Analyzes every hidden layer of the network over the given pairs and
/// identifies the biased neurons of the most biased layer.
inline BiasProfile build_bias_profile(
    const Network& net, const std::vector<InstancePair>& pairs,
    double step_interval = kDefaultStepInterval) {
  if (pairs.empty()) throw EmptyPairs("build_bias_profile: no instance pairs");
  const int hidden = net.hidden_layer_count();
  if (hidden < 1) throw BadLayer("network has no hidden layers");

  std::vector<Eigen::VectorXd> sums;
  sums.reserve(hidden);
  for (int l = 0; l < hidden; ++l)
    sums.push_back(Eigen::VectorXd::Zero(net.layer(l).width));
  for (const auto& pair : pairs) {
    ActivationTrace ta = net.forward(pair.a.values);
    ActivationTrace tb = net.forward(pair.b.values);
    for (int l = 0; l < hidden; ++l)
      sums[l] += (ta.post[l] - tb.post[l]).cwiseAbs();
  }

  BiasProfile profile;
  std::vector<ASCurve> curves;
  curves.reserve(hidden);
  for (int l = 0; l < hidden; ++l) {
    LayerAnalysis analysis;
    analysis.actdiff.layer = l;
    analysis.actdiff.z = (sums[l] / static_cast<double>(pairs.size()))
                             .unaryExpr([](double v) {
                               return detail::clamp_below_one(std::tanh(v));
                             });
    analysis.curve = as_curve(analysis.actdiff.z, step_interval);
    curves.push_back(analysis.curve);
    profile.layers.push_back(std::move(analysis));
  }
  profile.most_biased_layer = select_biased_layer(curves);
  const LayerAnalysis& top = profile.layers[profile.most_biased_layer];
  BiasedNeurons neurons = identify_biased_neurons(top.curve, top.actdiff.z);
  profile.t_d = neurons.threshold;
  profile.biased = std::move(neurons.positions);
  return profile;
}

}  // namespace fairtest

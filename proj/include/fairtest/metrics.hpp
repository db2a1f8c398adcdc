#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "fairtest/common.hpp"
#include "fairtest/dataset.hpp"
#include "fairtest/generate.hpp"
#include "fairtest/interpret.hpp"
#include "fairtest/network.hpp"

namespace fairtest {

// ---------------------------------------------------------------------------
// Generation success rate
// ---------------------------------------------------------------------------

inline double gsr(long n_idis, long n_nondup_generated) {
  if (n_nondup_generated <= 0)
    throw DivideByZero("gsr: no generated instances");
  if (n_idis < 0 || n_idis > n_nondup_generated)
    throw ConfigError("gsr: idi count outside [0, generated]");
  return static_cast<double>(n_idis) / static_cast<double>(n_nondup_generated);
}

// ---------------------------------------------------------------------------
// Generation diversity
// ---------------------------------------------------------------------------

namespace detail {

inline Eigen::VectorXd normalized_attributes(const Eigen::VectorXd& values,
                                             const AttributeSchema& schema) {
  Eigen::VectorXd out(values.size());
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const Attribute& a = schema.at(static_cast<std::size_t>(i));
    double range = a.max_value - a.min_value;
    out[i] = range > 0.0 ? (values[i] - a.min_value) / range : 0.0;
  }
  return out;
}

inline double cosine_distance(const Eigen::VectorXd& u,
                              const Eigen::VectorXd& v) {
  double nu = u.norm();
  double nv = v.norm();
  if (nu == 0.0 && nv == 0.0) return 0.0;
  if (nu == 0.0 || nv == 0.0) return 1.0;
  double c = u.dot(v) / (nu * nv);
  c = std::min(1.0, std::max(-1.0, c));
  return 1.0 - c;
}

// Fraction of `targets` lying within cosine distance rho of some center.
inline double coverage_rate(const std::vector<Eigen::VectorXd>& centers,
                            const std::vector<Eigen::VectorXd>& targets,
                            double rho) {
  long covered = 0;
  for (const auto& t : targets) {
    for (const auto& c : centers) {
      if (cosine_distance(c, t) <= rho) {
        ++covered;
        break;
      }
    }
  }
  return static_cast<double>(covered) / static_cast<double>(targets.size());
}

}  // namespace detail

/// Diversity ratio of two IDI sets: how much of the baseline falls inside
/// our cosine-radius regions versus the reverse. Values above 1 mean the
/// first set is the more diverse one. Returns +infinity when the baseline
/// covers none of ours.
inline double gd(const std::vector<InstancePair>& ours,
                 const std::vector<InstancePair>& baseline, double rho_cons,
                 const AttributeSchema& schema) {
  if (ours.empty() || baseline.empty())
    throw EmptySeedSet("gd: both IDI sets must be non-empty");
  if (rho_cons <= 0.0) throw ConfigError("gd: rho_cons must be > 0");
  std::vector<Eigen::VectorXd> a, b;
  a.reserve(ours.size());
  b.reserve(baseline.size());
  for (const auto& p : ours)
    a.push_back(detail::normalized_attributes(p.a.values, schema));
  for (const auto& p : baseline)
    b.push_back(detail::normalized_attributes(p.a.values, schema));
  double cr_ours_over_baseline = detail::coverage_rate(a, b, rho_cons);
  double cr_baseline_over_ours = detail::coverage_rate(b, a, rho_cons);
  if (cr_baseline_over_ours == 0.0)
    return std::numeric_limits<double>::infinity();
  return cr_ours_over_baseline / cr_baseline_over_ours;
}

// ---------------------------------------------------------------------------
// Discrimination rate on random samples
// ---------------------------------------------------------------------------

/// Fraction of instances uniformly sampled from the coded input domain that
/// are discriminatory. Lower is fairer.
inline double dm_rs(const Network& net, const AttributeSchema& schema,
                    int n_samples, std::uint64_t rng_seed) {
  if (n_samples < 1) throw ConfigError("dm_rs: n_samples must be >= 1");
  Rng rng = derive_rng(rng_seed, Stream::kDmRs);
  long hits = 0;
  Instance sample;
  sample.values.resize(static_cast<Eigen::Index>(schema.size()));
  for (int i = 0; i < n_samples; ++i) {
    for (std::size_t a = 0; a < schema.size(); ++a) {
      const Attribute& attr = schema.at(a);
      std::uniform_int_distribution<long> dist(
          static_cast<long>(attr.min_value), static_cast<long>(attr.max_value));
      sample.values[static_cast<Eigen::Index>(a)] =
          static_cast<double>(dist(rng));
    }
    if (is_idi(net, sample, schema).idi) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n_samples);
}

// ---------------------------------------------------------------------------
// Rank correlation and spread
// ---------------------------------------------------------------------------

/// Spearman's coefficient from two pre-computed rank vectors:
/// 1 - 6 * sum(d^2) / (n (n^2 - 1)).
inline double spearman(const std::vector<double>& ranks_a,
                       const std::vector<double>& ranks_b) {
  if (ranks_a.size() != ranks_b.size())
    throw LengthMismatch("spearman: rank vectors differ in length");
  if (ranks_a.size() < 2) throw TooFewValues("spearman: need n >= 2");
  const double n = static_cast<double>(ranks_a.size());
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < ranks_a.size(); ++i) {
    double d = ranks_a[i] - ranks_b[i];
    sum_sq += d * d;
  }
  return 1.0 - 6.0 * sum_sq / (n * (n * n - 1.0));
}

/// Ranks of the values (1 = smallest), ties resolved by average rank.
inline std::vector<double> ranks_of(const std::vector<double>& values) {
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::size_t below = 0, equal = 0;
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (values[j] < values[i]) ++below;
      if (values[j] == values[i]) ++equal;
    }
    ranks[i] = static_cast<double>(below) + 0.5 * static_cast<double>(equal - 1) + 1.0;
  }
  return ranks;
}

/// Sample standard deviation with the n - 1 denominator.
inline double significance(const std::vector<double>& values) {
  if (values.size() < 2) throw TooFewValues("significance: need n >= 2");
  const double n = static_cast<double>(values.size());
  double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / (n - 1.0));
}

// ---------------------------------------------------------------------------
// Biased-neuron coverage
// ---------------------------------------------------------------------------

/// For each instance, min-max normalizes the most biased layer's activations
/// and marks neurons above 0.5 as activated; returns the fraction of biased
/// neurons activated by at least one instance.
inline double biased_neuron_coverage(const Network& net,
                                     const std::vector<Instance>& instances,
                                     const BiasProfile& profile) {
  if (profile.most_biased_layer < 0 || profile.biased.empty())
    throw NoBiasProfile("coverage: invalid profile");
  const int layer = profile.most_biased_layer;
  std::vector<bool> activated(profile.biased.size(), false);
  for (const auto& inst : instances) {
    Eigen::VectorXd acts = net.forward(inst.values).post[layer];
    double lo = acts.minCoeff();
    double hi = acts.maxCoeff();
    double range = hi - lo;
    if (range <= 0.0) continue;
    for (Eigen::Index k = 0; k < acts.size(); ++k)
      if ((acts[k] - lo) / range > 0.5) activated[static_cast<std::size_t>(k)] = true;
  }
  long biased_total = 0, biased_hit = 0;
  for (std::size_t k = 0; k < profile.biased.size(); ++k) {
    if (!profile.biased[k]) continue;
    ++biased_total;
    if (activated[k]) ++biased_hit;
  }
  if (biased_total == 0) throw NoBiasProfile("coverage: no biased neurons");
  return static_cast<double>(biased_hit) / static_cast<double>(biased_total);
}

// ---------------------------------------------------------------------------
// Random-walk comparison baseline
// ---------------------------------------------------------------------------

/// Unguided counterpart of the global phase: each iteration perturbs one
/// uniformly chosen non-sensitive attribute by one step in a random
/// direction. Same seeds, same iteration budget, same clip / pair / IDI
/// logic, so results are directly comparable.
inline GenerationResult random_baseline(const Network& net,
                                        const AttributeSchema& schema,
                                        const std::vector<Instance>& seeds,
                                        const GenerationConfig& cfg) {
  const std::vector<int>& ns = schema.non_sensitive_indices();
  const detail::Deadline deadline(cfg.time_budget_seconds);
  std::vector<detail::SeedOutcome> outcomes(seeds.size());
  parallel_for(seeds.size(), cfg.workers, [&](std::size_t i) {
    detail::SeedOutcome& out = outcomes[i];
    if (deadline.expired()) return;
    out.ran = true;
    Rng rng = derive_rng(cfg.rng_seed, Stream::kBaselinePhase, i);
    Instance x = clip(seeds[i], schema);
    std::unordered_set<std::string> seen;
    for (int t = 0; t < cfg.max_iter_global; ++t) {
      ++out.iterations;
      std::string key = instance_key(x.values);
      ++out.tested;
      if (seen.insert(key).second) out.candidates.push_back(std::move(key));
      IsIdiResult res = is_idi(net, x, schema);
      if (res.idi) {
        out.pairs.push_back(std::move(*res.witness));
        out.prov.push_back({Phase::kGlobal, static_cast<int>(i), t});
        break;
      }
      if (!ns.empty()) {
        std::uniform_int_distribution<std::size_t> pick(0, ns.size() - 1);
        std::uniform_int_distribution<int> coin(0, 1);
        int attr = ns[pick(rng)];
        double direction = coin(rng) == 0 ? -1.0 : 1.0;
        x.values[attr] += direction * cfg.step_size_global;
        x = clip(std::move(x), schema);
      }
    }
  });
  return detail::merge_outcomes(std::move(outcomes));
}

// ---------------------------------------------------------------------------
// Retraining-based fairness repair
// ---------------------------------------------------------------------------

struct RetrainOptions {
  double fraction = 0.10;  // share of IDIs mixed into training data
  int repeats = 5;
  int dm_samples = 10000;
  std::uint64_t rng_seed = 0;
  double interpret_step = kDefaultStepInterval;
};

struct RetrainOutcome {
  double dm_rs_after = 0.0;       // mean over repeats
  double auc_after = 0.0;         // mean max-layer AUC over repeats
  double train_accuracy = 0.0;    // mean over repeats
  std::vector<double> dm_rs_each;
  std::vector<double> auc_each;
  Network repaired;               // model from the first repeat
};

/// Augments the training data with a seeded sample of the IDI pairs, both
/// pair members labeled with the original model's prediction on the
/// unflipped member, and fine-tunes from the trained weights. Repeats with
/// fresh samples and reports mean DM-RS and mean maximum-layer AUC.
inline RetrainOutcome retrain_fairness(const Network& net,
                                       const AttributeSchema& schema,
                                       const IDISet& idis,
                                       const TabularDataset& train_data,
                                       const TrainConfig& train_cfg,
                                       const RetrainOptions& opt = {}) {
  if (idis.empty()) throw EmptySeedSet("retrain_fairness: no IDIs");
  if (opt.fraction <= 0.0 || opt.fraction > 1.0)
    throw ConfigError("retrain fraction must lie in (0, 1]");
  if (opt.repeats < 1) throw ConfigError("repeats must be >= 1");
  auto [xs, ys] = to_training_arrays(train_data);

  std::size_t take = static_cast<std::size_t>(
      opt.fraction * static_cast<double>(idis.size()));
  if (take < 1) take = 1;  // degenerate fractions still contribute one IDI

  std::vector<InstancePair> pairs_for_analysis;
  RetrainOutcome outcome;
  for (int rep = 0; rep < opt.repeats; ++rep) {
    Rng rng = derive_rng(opt.rng_seed, Stream::kRetrain,
                         static_cast<std::uint64_t>(rep));
    std::vector<std::size_t> order(idis.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);

    std::vector<Eigen::VectorXd> aug_xs = xs;
    std::vector<int> aug_ys = ys;
    for (std::size_t i = 0; i < take; ++i) {
      const InstancePair& pair = idis.pairs[order[i]];
      int label = net.predict(pair.a.values);
      aug_xs.push_back(pair.a.values);
      aug_ys.push_back(label);
      aug_xs.push_back(pair.b.values);
      aug_ys.push_back(label);
    }
    TrainConfig cfg = train_cfg;
    cfg.rng_seed = splitmix64(opt.rng_seed + static_cast<std::uint64_t>(rep));
    TrainResult result = train(net, aug_xs, aug_ys, cfg);

    double rate = dm_rs(result.net, schema, opt.dm_samples,
                        splitmix64(opt.rng_seed) + static_cast<std::uint64_t>(rep));
    if (pairs_for_analysis.empty())
      pairs_for_analysis = interpretation_pairs(train_data.instances, schema);
    double max_auc = 0.0;
    for (int l = 0; l < result.net.hidden_layer_count(); ++l) {
      LayerActDiff diff = actdiff(result.net, pairs_for_analysis, l);
      max_auc = std::max(max_auc, as_curve(diff.z, opt.interpret_step).auc);
    }
    outcome.dm_rs_each.push_back(rate);
    outcome.auc_each.push_back(max_auc);
    outcome.train_accuracy += result.train_accuracy;
    if (rep == 0) outcome.repaired = result.net;
  }
  const double reps = static_cast<double>(opt.repeats);
  outcome.dm_rs_after =
      std::accumulate(outcome.dm_rs_each.begin(), outcome.dm_rs_each.end(), 0.0) /
      reps;
  outcome.auc_after =
      std::accumulate(outcome.auc_each.begin(), outcome.auc_each.end(), 0.0) /
      reps;
  outcome.train_accuracy /= reps;
  return outcome;
}

}  // namespace fairtest

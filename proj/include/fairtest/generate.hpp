#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fairtest/common.hpp"
#include "fairtest/dataset.hpp"
#include "fairtest/interpret.hpp"
#include "fairtest/network.hpp"

namespace fairtest {

inline constexpr double kDynamicLossFloor = 1e-12;
inline constexpr double kInverseGradientEps = 1e-8;

/// Search hyperparameters for the two generation phases. Defaults follow the
/// standard setting: 4 clusters, 1000 global seeds, 40/1000 iterations,
/// unit step sizes, momentum 0.1/0.05, mask refresh every 10/50 iterations,
/// 5% random neurons.
struct GenerationConfig {
  int n_clusters = 4;
  int num_seeds_global = 1000;
  int max_iter_global = 40;
  int max_iter_local = 1000;
  double step_size_global = 1.0;
  double step_size_local = 1.0;
  double momentum_global = 0.1;
  double momentum_local = 0.05;
  int mask_refresh_global = 10;
  int mask_refresh_local = 50;
  double random_neuron_fraction = 0.05;
  std::uint64_t rng_seed = 0;
  std::optional<double> time_budget_seconds;
  int workers = 1;

  void validate() const {
    if (n_clusters < 1) throw ConfigError("n_clusters must be >= 1");
    if (num_seeds_global < 0) throw ConfigError("num_seeds_global must be >= 0");
    if (max_iter_global < 0 || max_iter_local < 0)
      throw ConfigError("iteration budgets must be >= 0");
    if (step_size_global <= 0.0 || step_size_local <= 0.0)
      throw ConfigError("step sizes must be > 0");
    if (momentum_global <= 0.01 || momentum_global >= 0.20 ||
        momentum_local <= 0.01 || momentum_local >= 0.20)
      throw ConfigError("momentum decay must lie in (0.01, 0.20)");
    if (mask_refresh_global <= 5 || mask_refresh_global >= 100 ||
        mask_refresh_local <= 5 || mask_refresh_local >= 100)
      throw ConfigError("mask refresh interval must lie in (5, 100)");
    if (random_neuron_fraction <= 0.0 || random_neuron_fraction >= 1.0)
      throw ConfigError("random_neuron_fraction must lie in (0, 1)");
    if (workers < 1) throw ConfigError("workers must be >= 1");
    if (time_budget_seconds && *time_budget_seconds < 0.0)
      throw ConfigError("time budget must be >= 0");
  }
};

enum class Phase { kGlobal, kLocal };

inline const char* phase_name(Phase p) {
  return p == Phase::kGlobal ? "global" : "local";
}

struct PairProvenance {
  Phase phase = Phase::kGlobal;
  int seed_index = 0;
  int iteration = 0;
};

/// Deduplicated discriminatory pairs; dedup key is the full attribute vector
/// of the first member.
struct IDISet {
  std::vector<InstancePair> pairs;
  std::vector<PairProvenance> provenance;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

struct GenerationResult {
  IDISet idis;
  std::vector<std::string> candidate_keys;  // distinct, first-seen order
  long total_candidates = 0;
  long iterations = 0;
  int seeds_processed = 0;
  int seeds_skipped = 0;   // non-finite gradients
  int seeds_unstarted = 0; // time budget expired

  long distinct_candidates() const {
    return static_cast<long>(candidate_keys.size());
  }
};

// ---------------------------------------------------------------------------
// Dynamic loss over biased neurons
// ---------------------------------------------------------------------------

inline std::vector<bool> combine_masks(const std::vector<bool>& p,
                                       const std::vector<bool>& r) {
  if (!r.empty() && r.size() != p.size())
    throw DimensionMismatch("random mask length does not match positions");
  std::vector<bool> mask = p;
  for (std::size_t k = 0; k < r.size(); ++k)
    if (r[k]) mask[k] = true;
  return mask;
}

/// Random neuron mask with exactly floor(N * fraction) active entries chosen
/// uniformly without replacement.
inline std::vector<bool> refresh_mask(const std::vector<bool>& positions,
                                      double fraction, Rng& rng) {
  if (fraction <= 0.0 || fraction >= 1.0)
    throw ConfigError("mask fraction must lie in (0, 1)");
  const std::size_t n = positions.size();
  const std::size_t want =
      static_cast<std::size_t>(static_cast<double>(n) * fraction);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::vector<bool> mask(n, false);
  for (std::size_t i = 0; i < want; ++i) {
    std::uniform_int_distribution<std::size_t> dist(i, n - 1);
    std::swap(idx[i], idx[dist(rng)]);
    mask[idx[i]] = true;
  }
  return mask;
}

namespace detail {

/// Objective -sum_k mask_k * coeff_k * log(max(a_k, floor)) over one layer's
/// activations; coeff holds the counterpart's activations.
inline ScalarObjective masked_log_objective(int layer, Eigen::VectorXd coeff,
                                            std::vector<bool> mask) {
  ScalarObjective obj;
  obj.layer = layer;
  auto c = std::make_shared<Eigen::VectorXd>(std::move(coeff));
  auto m = std::make_shared<std::vector<bool>>(std::move(mask));
  obj.value = [c, m](const Eigen::VectorXd& a) {
    double j = 0.0;
    for (Eigen::Index k = 0; k < a.size(); ++k)
      if ((*m)[static_cast<std::size_t>(k)])
        j -= (*c)[k] * std::log(std::max(a[k], kDynamicLossFloor));
    return j;
  };
  obj.gradient = [c, m](const Eigen::VectorXd& a) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(a.size());
    for (Eigen::Index k = 0; k < a.size(); ++k)
      if ((*m)[static_cast<std::size_t>(k)] && a[k] > kDynamicLossFloor)
        g[k] = -(*c)[k] / a[k];
    return g;
  };
  return obj;
}

inline Eigen::VectorXd sign_of(const Eigen::VectorXd& v) {
  return v.unaryExpr(
      [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline void check_profile(const Network& net, const BiasProfile& profile) {
  if (profile.most_biased_layer < 0 ||
      profile.most_biased_layer >= net.hidden_layer_count())
    throw NoBiasProfile("profile does not select a hidden layer");
  if (static_cast<int>(profile.biased.size()) !=
      net.layer(profile.most_biased_layer).width)
    throw NoBiasProfile("profile position vector does not match layer width");
  bool any = false;
  for (bool b : profile.biased) any = any || b;
  if (!any) throw NoBiasProfile("profile has no biased neurons");
}

}  // namespace detail

/// Dynamic loss of the current instance against its first flip variant: the
/// masked cross-activation objective over the most biased layer, with mask
/// p | r.
inline double dynamic_loss(const Network& net, const AttributeSchema& schema,
                           int layer, const Instance& x,
                           const std::vector<bool>& biased,
                           const std::vector<bool>& random_mask) {
  if (layer < 0 || layer >= net.hidden_layer_count())
    throw BadLayer("dynamic_loss: layer must be hidden");
  if (static_cast<int>(biased.size()) != net.layer(layer).width)
    throw DimensionMismatch("dynamic_loss: positions do not match layer width");
  std::vector<bool> mask = combine_masks(biased, random_mask);
  Instance flipped = first_flip_variant(x, schema);
  Eigen::VectorXd coeff = net.forward(flipped.values).post[layer];
  ScalarObjective obj = detail::masked_log_objective(layer, std::move(coeff),
                                                     std::move(mask));
  return objective_value(net, x.values, obj);
}

// ---------------------------------------------------------------------------
// IDI determination and deduplication
// ---------------------------------------------------------------------------

struct IsIdiResult {
  bool idi = false;
  std::optional<InstancePair> witness;
};

/// True when some sensitive-attribute reassignment of the candidate receives
/// a different predicted label; returns the first witnessing pair in
/// enumeration order.
inline IsIdiResult is_idi(const Network& net, const Instance& candidate,
                          const AttributeSchema& schema) {
  int base = net.predict(candidate.values);
  for (auto& variant : flip_variants(candidate, schema)) {
    if (net.predict(variant.values) != base)
      return {true, InstancePair{candidate, std::move(variant)}};
  }
  return {false, std::nullopt};
}

/// Keeps the first occurrence of each distinct first member; stable order.
inline IDISet dedup(const IDISet& in) {
  IDISet out;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < in.pairs.size(); ++i) {
    if (seen.insert(instance_key(in.pairs[i].a.values)).second) {
      out.pairs.push_back(in.pairs[i]);
      out.provenance.push_back(i < in.provenance.size() ? in.provenance[i]
                                                        : PairProvenance{});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Global phase
// ---------------------------------------------------------------------------

namespace detail {

struct SeedOutcome {
  std::vector<InstancePair> pairs;
  std::vector<PairProvenance> prov;
  std::vector<std::string> candidates;
  long tested = 0;
  long iterations = 0;
  bool ran = false;
  bool skipped = false;
};

inline GenerationResult merge_outcomes(std::vector<SeedOutcome>&& outcomes) {
  GenerationResult result;
  std::unordered_set<std::string> distinct;
  IDISet raw;
  for (auto& out : outcomes) {
    if (!out.ran) {
      ++result.seeds_unstarted;
      continue;
    }
    ++result.seeds_processed;
    if (out.skipped) ++result.seeds_skipped;
    result.total_candidates += out.tested;
    result.iterations += out.iterations;
    for (auto& key : out.candidates)
      if (distinct.insert(key).second)
        result.candidate_keys.push_back(std::move(key));
    for (std::size_t j = 0; j < out.pairs.size(); ++j) {
      raw.pairs.push_back(std::move(out.pairs[j]));
      raw.provenance.push_back(out.prov[j]);
    }
  }
  result.idis = dedup(raw);
  return result;
}

class Deadline {
 public:
  explicit Deadline(const std::optional<double>& budget_seconds) {
    if (budget_seconds) {
      at_ = std::chrono::steady_clock::now() +
            std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                std::chrono::duration<double>(*budget_seconds));
    }
  }
  bool expired() const {
    return at_ && std::chrono::steady_clock::now() >= *at_;
  }

 private:
  std::optional<std::chrono::steady_clock::time_point> at_;
};

}  // namespace detail

/// Global generation: gradient-ascent search on the dynamic loss from each
/// seed, with momentum accumulation, a periodically refreshed random neuron
/// mask, and sign-quantized steps that never touch sensitive attributes.
/// A seed stops at its first discriminatory pair.
inline GenerationResult global_generate(const Network& net,
                                        const AttributeSchema& schema,
                                        const std::vector<Instance>& seeds,
                                        const BiasProfile& profile,
                                        const GenerationConfig& cfg,
                                        std::ostream* warnings = nullptr) {
  detail::check_profile(net, profile);
  if (cfg.step_size_global <= 0.0) throw ConfigError("step size must be > 0");
  const int layer = profile.most_biased_layer;
  const detail::Deadline deadline(cfg.time_budget_seconds);

  std::vector<detail::SeedOutcome> outcomes(seeds.size());
  parallel_for(seeds.size(), cfg.workers, [&](std::size_t i) {
    detail::SeedOutcome& out = outcomes[i];
    if (deadline.expired()) return;
    out.ran = true;
    Rng rng = derive_rng(cfg.rng_seed, Stream::kGlobalPhase, i);
    Instance x = clip(seeds[i], schema);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(net.input_dim());
    Eigen::VectorXd g_prime = Eigen::VectorXd::Zero(net.input_dim());
    std::vector<bool> random_mask;
    std::unordered_set<std::string> seen;
    for (int t = 0; t < cfg.max_iter_global; ++t) {
      ++out.iterations;
      if (t % cfg.mask_refresh_global == 0)
        random_mask =
            refresh_mask(profile.biased, cfg.random_neuron_fraction, rng);
      std::string key = instance_key(x.values);
      ++out.tested;
      if (seen.insert(key).second) out.candidates.push_back(std::move(key));
      IsIdiResult res = is_idi(net, x, schema);
      if (res.idi) {
        out.pairs.push_back(std::move(*res.witness));
        out.prov.push_back({Phase::kGlobal, static_cast<int>(i), t});
        break;
      }
      Instance x_prime = first_flip_variant(x, schema);
      std::vector<bool> mask = combine_masks(profile.biased, random_mask);
      Eigen::VectorXd grad_x, grad_x_prime;
      try {
        Eigen::VectorXd coeff_x = net.forward(x_prime.values).post[layer];
        Eigen::VectorXd coeff_xp = net.forward(x.values).post[layer];
        grad_x = input_gradient(
            net, x.values,
            detail::masked_log_objective(layer, std::move(coeff_x), mask));
        grad_x_prime = input_gradient(
            net, x_prime.values,
            detail::masked_log_objective(layer, std::move(coeff_xp), mask));
      } catch (const NonFiniteGradient&) {
        out.skipped = true;
        break;
      }
      g = cfg.momentum_global * g + grad_x;
      g_prime = cfg.momentum_global * g_prime + grad_x_prime;
      Eigen::VectorXd dire = detail::sign_of(g + g_prime);
      for (int s : schema.sensitive_indices()) dire[s] = 0.0;
      x.values += dire * cfg.step_size_global;
      x = clip(std::move(x), schema);
    }
  });

  GenerationResult result = detail::merge_outcomes(std::move(outcomes));
  if (warnings && result.seeds_skipped > 0)
    *warnings << "warning: " << result.seeds_skipped
              << " global seed(s) skipped after non-finite gradients\n";
  return result;
}

// ---------------------------------------------------------------------------
// Local phase
// ---------------------------------------------------------------------------

/// Local generation around each global pair: momentum gradients pick a sign
/// direction, and each non-sensitive attribute moves with probability
/// proportional to the softmax of the inverse gradient magnitude, so small
/// gradients (flat directions) are perturbed more often. Every iteration's
/// candidate is tested; there is no early stop.
inline GenerationResult local_generate(const Network& net,
                                       const AttributeSchema& schema,
                                       const IDISet& global_idis,
                                       const BiasProfile& profile,
                                       const GenerationConfig& cfg,
                                       std::ostream* warnings = nullptr) {
  if (global_idis.empty()) throw EmptySeedSet("local_generate: no seeds");
  detail::check_profile(net, profile);
  const int layer = profile.most_biased_layer;
  const std::vector<int>& ns = schema.non_sensitive_indices();
  const detail::Deadline deadline(cfg.time_budget_seconds);

  std::vector<detail::SeedOutcome> outcomes(global_idis.pairs.size());
  parallel_for(global_idis.pairs.size(), cfg.workers, [&](std::size_t i) {
    detail::SeedOutcome& out = outcomes[i];
    if (deadline.expired()) return;
    out.ran = true;
    Rng rng = derive_rng(cfg.rng_seed, Stream::kLocalPhase, i);
    Instance x = clip(global_idis.pairs[i].a, schema);
    Eigen::VectorXd g = Eigen::VectorXd::Zero(net.input_dim());
    Eigen::VectorXd g_prime = Eigen::VectorXd::Zero(net.input_dim());
    std::vector<bool> random_mask;
    std::unordered_set<std::string> seen;
    for (int t = 0; t < cfg.max_iter_local; ++t) {
      ++out.iterations;
      if (t % cfg.mask_refresh_local == 0)
        random_mask =
            refresh_mask(profile.biased, cfg.random_neuron_fraction, rng);
      Instance x_prime = first_flip_variant(x, schema);
      std::vector<bool> mask = combine_masks(profile.biased, random_mask);
      Eigen::VectorXd grad_x, grad_x_prime;
      try {
        Eigen::VectorXd coeff_x = net.forward(x_prime.values).post[layer];
        Eigen::VectorXd coeff_xp = net.forward(x.values).post[layer];
        grad_x = input_gradient(
            net, x.values,
            detail::masked_log_objective(layer, std::move(coeff_x), mask));
        grad_x_prime = input_gradient(
            net, x_prime.values,
            detail::masked_log_objective(layer, std::move(coeff_xp), mask));
      } catch (const NonFiniteGradient&) {
        out.skipped = true;
        break;
      }
      g = cfg.momentum_local * g + grad_x;
      g_prime = cfg.momentum_local * g_prime + grad_x_prime;
      Eigen::VectorXd combined = g + g_prime;
      Eigen::VectorXd dire = detail::sign_of(combined);
      if (!ns.empty()) {
        // Selection probabilities: softmax of 1 / (|g + g'| + eps) over the
        // non-sensitive attributes.
        Eigen::VectorXd w(static_cast<Eigen::Index>(ns.size()));
        for (std::size_t j = 0; j < ns.size(); ++j)
          w[static_cast<Eigen::Index>(j)] =
              1.0 / (std::abs(combined[ns[j]]) + kInverseGradientEps);
        Eigen::VectorXd raised = (w.array() - w.maxCoeff()).exp();
        Eigen::VectorXd p_dire = raised / raised.sum();
        std::uniform_real_distribution<double> uniform(0.0, 1.0);
        for (std::size_t j = 0; j < ns.size(); ++j) {
          double p_tmp = uniform(rng);
          if (p_tmp < p_dire[static_cast<Eigen::Index>(j)])
            x.values[ns[j]] += dire[ns[j]] * cfg.step_size_local;
        }
      }
      x = clip(std::move(x), schema);
      std::string key = instance_key(x.values);
      ++out.tested;
      if (seen.insert(key).second) out.candidates.push_back(std::move(key));
      IsIdiResult res = is_idi(net, x, schema);
      if (res.idi) {
        out.pairs.push_back(std::move(*res.witness));
        out.prov.push_back({Phase::kLocal, static_cast<int>(i), t});
      }
    }
  });

  GenerationResult result = detail::merge_outcomes(std::move(outcomes));
  if (warnings && result.seeds_skipped > 0)
    *warnings << "warning: " << result.seeds_skipped
              << " local seed(s) skipped after non-finite gradients\n";
  return result;
}

// ---------------------------------------------------------------------------
// Whole-run orchestration
// ---------------------------------------------------------------------------

struct GenerationRun {
  GenerationConfig config;
  GenerationResult global;
  GenerationResult local;
  IDISet all;
  long distinct_candidates = 0;
  double gsr = 0.0;
};

/// Clustered seed selection, global phase, then local phase around the global
/// pairs. GSR is the deduplicated IDI count over the distinct candidates
/// tested across both phases.
inline GenerationRun run_generation(const Network& net,
                                    const AttributeSchema& schema,
                                    const TabularDataset& data,
                                    const BiasProfile& profile,
                                    const GenerationConfig& cfg,
                                    std::ostream* warnings = nullptr) {
  cfg.validate();
  GenerationRun run;
  run.config = cfg;
  std::vector<Instance> seeds =
      kmeans_seeds(data, cfg.n_clusters, cfg.num_seeds_global, cfg.rng_seed);
  run.global = global_generate(net, schema, seeds, profile, cfg, warnings);
  if (!run.global.idis.empty() && cfg.max_iter_local > 0)
    run.local =
        local_generate(net, schema, run.global.idis, profile, cfg, warnings);

  IDISet raw;
  for (std::size_t i = 0; i < run.global.idis.pairs.size(); ++i) {
    raw.pairs.push_back(run.global.idis.pairs[i]);
    raw.provenance.push_back(run.global.idis.provenance[i]);
  }
  for (std::size_t i = 0; i < run.local.idis.pairs.size(); ++i) {
    raw.pairs.push_back(run.local.idis.pairs[i]);
    raw.provenance.push_back(run.local.idis.provenance[i]);
  }
  run.all = dedup(raw);

  std::unordered_set<std::string> distinct;
  for (const auto& key : run.global.candidate_keys) distinct.insert(key);
  for (const auto& key : run.local.candidate_keys) distinct.insert(key);
  run.distinct_candidates = static_cast<long>(distinct.size());
  run.gsr = run.distinct_candidates > 0
                ? static_cast<double>(run.all.size()) /
                      static_cast<double>(run.distinct_candidates)
                : 0.0;
  return run;
}

}  // namespace fairtest

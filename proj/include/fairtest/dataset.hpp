#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fairtest/common.hpp"

namespace fairtest {

struct Attribute {
  std::string name;
  double min_value = 0.0;
  double max_value = 0.0;
  bool sensitive = false;

  int domain_size() const {
    return static_cast<int>(max_value - min_value) + 1;
  }
};

/// Ordered attribute list with a sensitive / non-sensitive partition and the
/// inclusive integer-coded domain of each attribute.
class AttributeSchema {
 public:
  AttributeSchema(std::vector<Attribute> attributes, std::string label_name,
                  std::vector<std::string> label_classes)
      : attributes_(std::move(attributes)),
        label_name_(std::move(label_name)),
        label_classes_(std::move(label_classes)) {
    if (attributes_.empty()) throw SchemaMismatch("schema has no attributes");
    if (label_classes_.size() < 2)
      throw SchemaMismatch("label needs at least two classes");
    for (std::size_t i = 0; i < attributes_.size(); ++i) {
      const Attribute& a = attributes_[i];
      if (a.name.empty()) throw SchemaMismatch("attribute without a name");
      if (a.min_value > a.max_value)
        throw SchemaMismatch("attribute " + a.name + " has min > max");
      if (a.min_value != std::nearbyint(a.min_value) ||
          a.max_value != std::nearbyint(a.max_value))
        throw SchemaMismatch("attribute " + a.name +
                             " bounds must be integer codes");
      for (std::size_t j = 0; j < i; ++j)
        if (attributes_[j].name == a.name)
          throw SchemaMismatch("duplicate attribute name " + a.name);
      if (a.sensitive) {
        if (a.domain_size() < 2)
          throw SchemaMismatch("sensitive attribute " + a.name +
                               " needs at least two values");
        sensitive_idx_.push_back(static_cast<int>(i));
      } else {
        non_sensitive_idx_.push_back(static_cast<int>(i));
      }
    }
    if (sensitive_idx_.empty())
      throw SchemaMismatch("schema needs at least one sensitive attribute");
  }

  std::size_t size() const { return attributes_.size(); }
  const Attribute& at(std::size_t i) const { return attributes_.at(i); }
  const std::vector<Attribute>& attributes() const { return attributes_; }
  const std::vector<int>& sensitive_indices() const { return sensitive_idx_; }
  const std::vector<int>& non_sensitive_indices() const {
    return non_sensitive_idx_;
  }
  const std::string& label_name() const { return label_name_; }
  int num_classes() const { return static_cast<int>(label_classes_.size()); }
  const std::vector<std::string>& label_classes() const {
    return label_classes_;
  }

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < attributes_.size(); ++i)
      if (attributes_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  nlohmann::json to_json() const {
    nlohmann::json doc;
    nlohmann::json attrs = nlohmann::json::array();
    for (const auto& a : attributes_) {
      attrs.push_back({{"name", a.name},
                       {"min", a.min_value},
                       {"max", a.max_value},
                       {"sensitive", a.sensitive}});
    }
    doc["attributes"] = std::move(attrs);
    doc["label"] = {{"name", label_name_}, {"classes", label_classes_}};
    return doc;
  }

  static AttributeSchema from_json(const nlohmann::json& doc) {
    try {
      std::vector<Attribute> attrs;
      for (const auto& item : doc.at("attributes")) {
        Attribute a;
        a.name = item.at("name").get<std::string>();
        a.min_value = item.at("min").get<double>();
        a.max_value = item.at("max").get<double>();
        a.sensitive = item.at("sensitive").get<bool>();
        attrs.push_back(std::move(a));
      }
      const auto& label = doc.at("label");
      return AttributeSchema(std::move(attrs),
                             label.at("name").get<std::string>(),
                             label.at("classes").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
      throw SchemaMismatch(std::string("malformed schema document: ") +
                           e.what());
    }
  }

  static AttributeSchema load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open schema file " + path);
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw SchemaMismatch(std::string("invalid schema JSON: ") + e.what());
    }
    return from_json(doc);
  }

 private:
  std::vector<Attribute> attributes_;
  std::string label_name_;
  std::vector<std::string> label_classes_;
  std::vector<int> sensitive_idx_;
  std::vector<int> non_sensitive_idx_;
};

struct Instance {
  Eigen::VectorXd values;
  std::optional<int> label;
};

/// Pair whose members agree on every non-sensitive attribute and differ in at
/// least one sensitive attribute.
struct InstancePair {
  Instance a;
  Instance b;
};

struct TabularDataset {
  std::vector<Instance> instances;

  std::size_t size() const { return instances.size(); }
  bool labeled() const {
    return !instances.empty() && instances.front().label.has_value();
  }
};

// ---------------------------------------------------------------------------
// Domain clipping
// ---------------------------------------------------------------------------

/// Componentwise clamp into each attribute's [min, max] domain; values are
/// rounded to the nearest integer code first (ties to even). Idempotent.
inline Eigen::VectorXd clip_values(Eigen::VectorXd v,
                                   const AttributeSchema& schema) {
  if (static_cast<std::size_t>(v.size()) != schema.size())
    throw DimensionMismatch("clip: value length does not match schema");
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const Attribute& a = schema.at(static_cast<std::size_t>(i));
    double x = std::nearbyint(v[i]);
    x = std::min(a.max_value, std::max(a.min_value, x));
    v[i] = x + 0.0;  // normalizes -0.0 so byte-level dedup keys are stable
  }
  return v;
}

inline Instance clip(Instance inst, const AttributeSchema& schema) {
  inst.values = clip_values(std::move(inst.values), schema);
  return inst;
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.push_back("");
  return cells;
}

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_cell(const std::string& raw, std::size_t row,
                         std::size_t col) {
  std::string text = trim(raw);
  const char* begin = text.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || !std::isfinite(v))
    throw ParseError("row " + std::to_string(row) + ", column " +
                     std::to_string(col + 1) + ": cannot parse '" + raw + "'");
  return v;
}

}  // namespace detail

/// Loads a headered CSV whose columns are the schema attributes in order,
/// optionally followed by the label column. Values are clipped into the
/// input domain; row order is preserved.
inline TabularDataset load_csv(const std::string& path,
                               const AttributeSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open data file " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty data file " + path);
  std::vector<std::string> header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);

  bool labeled = false;
  if (header.size() == schema.size() + 1 &&
      header.back() == schema.label_name()) {
    labeled = true;
  } else if (header.size() != schema.size()) {
    throw SchemaMismatch("header has " + std::to_string(header.size()) +
                         " columns, schema expects " +
                         std::to_string(schema.size()) + " attributes" +
                         " plus optional label '" + schema.label_name() + "'");
  }
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (header[i] != schema.at(i).name)
      throw SchemaMismatch("column " + std::to_string(i + 1) + " is '" +
                           header[i] + "', schema expects '" +
                           schema.at(i).name + "'");
  }

  TabularDataset ds;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("row " + std::to_string(row) + ": expected " +
                       std::to_string(header.size()) + " cells, found " +
                       std::to_string(cells.size()));
    Instance inst;
    inst.values.resize(static_cast<Eigen::Index>(schema.size()));
    for (std::size_t c = 0; c < schema.size(); ++c)
      inst.values[static_cast<Eigen::Index>(c)] =
          detail::parse_cell(cells[c], row, c);
    inst.values = clip_values(std::move(inst.values), schema);
    if (labeled) {
      double y = detail::parse_cell(cells.back(), row, cells.size() - 1);
      int label = static_cast<int>(std::nearbyint(y));
      if (label != y || label < 0 || label >= schema.num_classes())
        throw ParseError("row " + std::to_string(row) +
                         ": label must be an integer in [0, " +
                         std::to_string(schema.num_classes()) + ")");
      inst.label = label;
    }
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

inline std::pair<std::vector<Eigen::VectorXd>, std::vector<int>>
to_training_arrays(const TabularDataset& ds) {
  std::vector<Eigen::VectorXd> xs;
  std::vector<int> ys;
  xs.reserve(ds.size());
  ys.reserve(ds.size());
  for (const auto& inst : ds.instances) {
    if (!inst.label) throw EmptyDataset("dataset is not labeled");
    xs.push_back(inst.values);
    ys.push_back(*inst.label);
  }
  return {std::move(xs), std::move(ys)};
}

// ---------------------------------------------------------------------------
// Sensitive-attribute flipping
// ---------------------------------------------------------------------------

/// Every instance reachable from x by reassigning sensitive attributes to
/// other in-domain integer codes, non-sensitive attributes untouched; the
/// original combination is excluded. Enumeration order is the odometer over
/// sensitive attributes in schema order, values ascending.
inline std::vector<Instance> flip_variants(const Instance& x,
                                           const AttributeSchema& schema) {
  const std::vector<int>& sens = schema.sensitive_indices();
  std::vector<int> counter(sens.size(), 0);
  std::vector<Instance> out;
  for (;;) {
    bool same = true;
    Instance variant = x;
    for (std::size_t s = 0; s < sens.size(); ++s) {
      const Attribute& attr = schema.at(static_cast<std::size_t>(sens[s]));
      double value = attr.min_value + counter[s];
      variant.values[sens[s]] = value;
      same = same && value == x.values[sens[s]];
    }
    if (!same) out.push_back(std::move(variant));
    std::size_t s = 0;
    while (s < sens.size()) {
      const Attribute& attr = schema.at(static_cast<std::size_t>(sens[s]));
      if (++counter[s] < attr.domain_size()) break;
      counter[s] = 0;
      ++s;
    }
    if (s == sens.size()) break;
  }
  return out;
}

/// First flip variant in enumeration order; cheaper than materializing all of
/// them inside search loops.
inline Instance first_flip_variant(const Instance& x,
                                   const AttributeSchema& schema) {
  const std::vector<int>& sens = schema.sensitive_indices();
  std::vector<int> counter(sens.size(), 0);
  for (;;) {
    bool same = true;
    for (std::size_t s = 0; s < sens.size(); ++s) {
      const Attribute& attr = schema.at(static_cast<std::size_t>(sens[s]));
      same = same && attr.min_value + counter[s] == x.values[sens[s]];
    }
    if (!same) {
      Instance variant = x;
      for (std::size_t s = 0; s < sens.size(); ++s) {
        const Attribute& attr = schema.at(static_cast<std::size_t>(sens[s]));
        variant.values[sens[s]] = attr.min_value + counter[s];
      }
      return variant;
    }
    std::size_t s = 0;
    while (s < sens.size()) {
      const Attribute& attr = schema.at(static_cast<std::size_t>(sens[s]));
      if (++counter[s] < attr.domain_size()) break;
      counter[s] = 0;
      ++s;
    }
    if (s == sens.size())
      throw Error("no flip variant exists");  // unreachable: domains >= 2
  }
}

/// Validates the discriminatory-pair constraint: members agree on every
/// non-sensitive attribute and differ in at least one sensitive attribute.
inline bool satisfies_pair_constraint(const InstancePair& pair,
                                      const AttributeSchema& schema) {
  if (static_cast<std::size_t>(pair.a.values.size()) != schema.size() ||
      static_cast<std::size_t>(pair.b.values.size()) != schema.size())
    return false;
  for (int i : schema.non_sensitive_indices())
    if (pair.a.values[i] != pair.b.values[i]) return false;
  for (int i : schema.sensitive_indices())
    if (pair.a.values[i] != pair.b.values[i]) return true;
  return false;
}

/// Pairs each instance with all of its flip variants, for activation-difference
/// analysis. Binary sensitive attributes yield one pair per instance;
/// multi-valued ones contribute every variant.
inline std::vector<InstancePair> interpretation_pairs(
    const std::vector<Instance>& instances, const AttributeSchema& schema) {
  std::vector<InstancePair> pairs;
  for (const auto& inst : instances)
    for (auto& variant : flip_variants(inst, schema))
      pairs.push_back({inst, std::move(variant)});
  return pairs;
}

// ---------------------------------------------------------------------------
// Seed selection and splitting
// ---------------------------------------------------------------------------

/// Lloyd's k-means over the raw coded values, then seeds drawn round-robin
/// from a seeded random order of each cluster until `num_seeds` are produced
/// (or the dataset is exhausted). Fully deterministic per rng_seed.
inline std::vector<Instance> kmeans_seeds(const TabularDataset& ds,
                                          int n_clusters, int num_seeds,
                                          std::uint64_t rng_seed) {
  if (ds.instances.empty()) throw EmptyDataset("kmeans_seeds: empty dataset");
  if (n_clusters < 1) throw ConfigError("n_clusters must be >= 1");
  if (static_cast<std::size_t>(n_clusters) > ds.size())
    throw ConfigError("n_clusters exceeds dataset size");
  if (num_seeds < 0) throw ConfigError("num_seeds must be >= 0");

  const std::size_t n = ds.size();
  Rng rng = derive_rng(rng_seed, Stream::kKMeans);

  // Initial centroids: n_clusters distinct instances.
  std::vector<std::size_t> pick(n);
  for (std::size_t i = 0; i < n; ++i) pick[i] = i;
  for (int c = 0; c < n_clusters; ++c) {
    std::uniform_int_distribution<std::size_t> dist(c, n - 1);
    std::swap(pick[c], pick[dist(rng)]);
  }
  std::vector<Eigen::VectorXd> centroids;
  centroids.reserve(n_clusters);
  for (int c = 0; c < n_clusters; ++c)
    centroids.push_back(ds.instances[pick[c]].values);

  std::vector<int> assign(n, -1);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (ds.instances[i].values - centroids[0]).squaredNorm();
      for (int c = 1; c < n_clusters; ++c) {
        double d = (ds.instances[i].values - centroids[c]).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[i] != best) {
        assign[i] = best;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<Eigen::VectorXd> sums(
        n_clusters, Eigen::VectorXd::Zero(ds.instances[0].values.size()));
    std::vector<long> counts(n_clusters, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[assign[i]] += ds.instances[i].values;
      ++counts[assign[i]];
    }
    for (int c = 0; c < n_clusters; ++c)
      if (counts[c] > 0) centroids[c] = sums[c] / static_cast<double>(counts[c]);
  }

  std::vector<std::vector<std::size_t>> clusters(n_clusters);
  for (std::size_t i = 0; i < n; ++i) clusters[assign[i]].push_back(i);
  for (auto& members : clusters) std::shuffle(members.begin(), members.end(), rng);

  std::vector<Instance> seeds;
  seeds.reserve(std::min<std::size_t>(num_seeds, n));
  for (std::size_t round = 0; seeds.size() < static_cast<std::size_t>(num_seeds);
       ++round) {
    bool any = false;
    for (int c = 0;
         c < n_clusters && seeds.size() < static_cast<std::size_t>(num_seeds);
         ++c) {
      if (round < clusters[c].size()) {
        seeds.push_back(ds.instances[clusters[c][round]]);
        any = true;
      }
    }
    if (!any) break;  // every cluster exhausted
  }
  return seeds;
}

struct DatasetSplit {
  TabularDataset train;
  TabularDataset validation;
  TabularDataset test;
};

/// 70/10/20 train/validation/test split with seeded shuffling.
inline DatasetSplit split_dataset(const TabularDataset& ds,
                                  std::uint64_t rng_seed) {
  if (ds.instances.empty()) throw EmptyDataset("split_dataset: empty dataset");
  std::vector<std::size_t> order(ds.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng = derive_rng(rng_seed, Stream::kSplit);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t n_train = static_cast<std::size_t>(0.7 * ds.size());
  std::size_t n_val = static_cast<std::size_t>(0.1 * ds.size());
  DatasetSplit split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const Instance& inst = ds.instances[order[i]];
    if (i < n_train)
      split.train.instances.push_back(inst);
    else if (i < n_train + n_val)
      split.validation.instances.push_back(inst);
    else
      split.test.instances.push_back(inst);
  }
  return split;
}

/// Byte-exact dedup key over the attribute vector.
inline std::string instance_key(const Eigen::VectorXd& values) {
  return std::string(reinterpret_cast<const char*>(values.data()),
                     static_cast<std::size_t>(values.size()) * sizeof(double));
}

}  // namespace fairtest

#pragma once

// Input-, layer- and head-dependent variance of log10 positional:semantic
// ratios over disjoint input subsets, plus per-layer histograms.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnexit/csv.hpp"
#include "attnexit/decomposition.hpp"
#include "attnexit/error.hpp"
#include "attnexit/random.hpp"
#include "attnexit/tensor.hpp"

namespace attnexit {

struct RatioRecord {
  std::string input_id;
  std::size_t layer = 0;
  std::size_t head = 0;
  double log_ratio = 0.0;
};

struct RecordSet {
  std::vector<RatioRecord> records;
  std::size_t excluded = 0;  // heads without a finite, positive ratio
};

inline RecordSet records_from_rows(const std::vector<RatioRow>& rows) {
  RecordSet out;
  for (const auto& r : rows) {
    const double lr = r.ratio.kind == RatioKind::finite ? std::log10(r.ratio.value) : std::nan("");
    if (!std::isfinite(lr)) {
      ++out.excluded;
      continue;
    }
    out.records.push_back({r.input_id, r.layer, r.head, lr});
  }
  return out;
}

struct VarianceStat {
  double mean = 0.0;
  double std = 0.0;
};

struct VarianceReport {
  VarianceStat input_dependent;
  VarianceStat layer_dependent;
  VarianceStat head_dependent;
  std::size_t n_subsets = 0;
  std::size_t subset_size = 0;
  std::size_t excluded_head_count = 0;
  // per-subset values, in subset order
  std::vector<double> input_by_subset, layer_by_subset, head_by_subset;
  std::vector<std::vector<std::string>> subsets;
};

struct SubsetVariances {
  double input = 0.0;
  double layer = 0.0;
  double head = 0.0;
};

// The three statistics for the records belonging to one set of inputs.
inline SubsetVariances subset_variances(const std::vector<const RatioRecord*>& recs) {
  std::map<std::string, std::vector<double>> by_input;
  std::map<std::size_t, std::vector<double>> by_layer;
  std::map<std::size_t, std::map<std::size_t, std::vector<double>>> by_layer_head;
  for (const RatioRecord* r : recs) {
    by_input[r->input_id].push_back(r->log_ratio);
    by_layer[r->layer].push_back(r->log_ratio);
    by_layer_head[r->layer][r->head].push_back(r->log_ratio);
  }
  auto means = [](const auto& groups) {
    std::vector<double> v;
    v.reserve(groups.size());
    for (const auto& [key, values] : groups) v.push_back(mean(values));
    return v;
  };
  SubsetVariances s;
  s.input = variance(means(by_input));
  s.layer = variance(means(by_layer));
  double head_total = 0.0;
  for (const auto& [layer, heads] : by_layer_head) head_total += variance(means(heads));
  s.head = head_total / static_cast<double>(by_layer_head.size());
  return s;
}

namespace detail {

inline VarianceStat mean_std(const std::vector<double>& v) {
  return {mean(v), std::sqrt(variance(v))};
}

}  // namespace detail

inline VarianceReport estimate_variances(const std::vector<RatioRecord>& records, std::size_t n_subsets,
                                         std::size_t subset_size, std::uint64_t seed, std::size_t excluded = 0) {
  if (n_subsets == 0 || subset_size == 0) fail(ErrorKind::config, "n_subsets and subset_size must be >= 1");
  std::map<std::string, std::vector<const RatioRecord*>> by_input;
  for (const auto& r : records) {
    if (!std::isfinite(r.log_ratio)) fail(ErrorKind::data, "non-finite log ratio for input '", r.input_id, "'");
    by_input[r.input_id].push_back(&r);
  }
  const std::size_t required = n_subsets * subset_size;
  if (by_input.size() < required) {
    fail(ErrorKind::data, "variance estimate needs ", required, " distinct inputs (", n_subsets, " x ", subset_size,
         ") but only ", by_input.size(), " are available");
  }
  std::vector<std::string> ids;
  ids.reserve(by_input.size());
  for (const auto& [id, recs] : by_input) ids.push_back(id);
  Rng rng(derive_seed(seed, "variance-subsets"));
  rng.shuffle(ids);

  VarianceReport rep;
  rep.n_subsets = n_subsets;
  rep.subset_size = subset_size;
  rep.excluded_head_count = excluded;
  for (std::size_t s = 0; s < n_subsets; ++s) {
    std::vector<std::string> members(ids.begin() + static_cast<std::ptrdiff_t>(s * subset_size),
                                     ids.begin() + static_cast<std::ptrdiff_t>((s + 1) * subset_size));
    std::vector<const RatioRecord*> recs;
    for (const auto& id : members) {
      const auto& v = by_input[id];
      recs.insert(recs.end(), v.begin(), v.end());
    }
    const SubsetVariances sv = subset_variances(recs);
    rep.input_by_subset.push_back(sv.input);
    rep.layer_by_subset.push_back(sv.layer);
    rep.head_by_subset.push_back(sv.head);
    rep.subsets.push_back(std::move(members));
  }
  rep.input_dependent = detail::mean_std(rep.input_by_subset);
  rep.layer_dependent = detail::mean_std(rep.layer_by_subset);
  rep.head_dependent = detail::mean_std(rep.head_by_subset);
  return rep;
}

inline nlohmann::json to_json(const VarianceReport& r) {
  auto stat = [](const VarianceStat& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}}; };
  return {{"input_dependent", stat(r.input_dependent)},
          {"layer_dependent", stat(r.layer_dependent)},
          {"head_dependent", stat(r.head_dependent)},
          {"n_subsets", r.n_subsets},
          {"subset_size", r.subset_size},
          {"excluded_head_count", r.excluded_head_count},
          {"per_subset",
           {{"input_dependent", r.input_by_subset},
            {"layer_dependent", r.layer_by_subset},
            {"head_dependent", r.head_by_subset}}}};
}

struct HistogramRow {
  std::size_t layer = 0;
  double bin_lo = 0.0;
  double bin_hi = 0.0;
  std::size_t count = 0;
};

inline std::size_t bin_index(double x, std::size_t n_bins, double lo, double hi) {
  if (!(x >= lo)) return 0;
  const double pos = (x - lo) / (hi - lo) * static_cast<double>(n_bins);
  return std::min(n_bins - 1, static_cast<std::size_t>(pos));
}

// Counts per (layer, bin); values outside [lo, hi) land in the edge bins.
inline std::vector<HistogramRow> heatmap_bins(const std::vector<RatioRecord>& records, std::size_t n_bins, double lo,
                                              double hi) {
  if (records.empty()) fail(ErrorKind::data, "histogram of an empty record set");
  if (n_bins < 2) fail(ErrorKind::config, "histogram needs at least 2 bins, got ", n_bins);
  if (!(lo < hi)) fail(ErrorKind::config, "histogram range [", lo, ", ", hi, "] is empty");
  std::size_t n_layers = 0;
  for (const auto& r : records) n_layers = std::max(n_layers, r.layer + 1);
  std::vector<std::vector<std::size_t>> counts(n_layers, std::vector<std::size_t>(n_bins, 0));
  for (const auto& r : records) ++counts[r.layer][bin_index(r.log_ratio, n_bins, lo, hi)];
  std::vector<HistogramRow> out;
  const double width = (hi - lo) / static_cast<double>(n_bins);
  for (std::size_t l = 0; l < n_layers; ++l)
    for (std::size_t b = 0; b < n_bins; ++b)
      out.push_back({l, lo + width * static_cast<double>(b),
                     b + 1 == n_bins ? hi : lo + width * static_cast<double>(b + 1), counts[l][b]});
  return out;
}

inline void write_histogram(const std::filesystem::path& path, const std::vector<HistogramRow>& rows) {
  csv::Writer w(path, {"layer", "bin_lo", "bin_hi", "count"});
  for (const auto& r : rows)
    w.row({std::to_string(r.layer), csv::fmt(r.bin_lo), csv::fmt(r.bin_hi), std::to_string(r.count)});
}

}  // namespace attnexit

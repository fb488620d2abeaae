#pragma once

// Confidence-thresholded layer-by-layer inference with last-layer and
// most-confident-layer fallbacks, threshold sweeps, and per-layer baselines.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <string>
#include <vector>

#include "attnexit/data.hpp"
#include "attnexit/encoder.hpp"
#include "attnexit/error.hpp"
#include "attnexit/heads.hpp"
#include "attnexit/metrics.hpp"
#include "attnexit/parallel.hpp"

namespace attnexit {

enum class Fallback { last_layer, most_confident_layer };

inline const char* to_string(Fallback f) {
  return f == Fallback::last_layer ? "last_layer" : "most_confident_layer";
}

inline Fallback fallback_from_string(const std::string& s) {
  if (s == "last_layer") return Fallback::last_layer;
  if (s == "most_confident_layer") return Fallback::most_confident_layer;
  fail(ErrorKind::config, "unknown fallback '", s, "' (expected last_layer or most_confident_layer)");
}

struct ExitPolicy {
  double threshold = 0.5;
  Fallback fallback = Fallback::last_layer;

  void validate() const {
    if (!(threshold >= 0.0 && threshold <= 1.0)) {
      fail(ErrorKind::config, "exit threshold must lie in [0, 1], got ", threshold);
    }
  }
};

struct ExitResult {
  ClassProbs prediction;
  std::size_t exit_layer = 0;  // layer whose head produced the prediction
  std::size_t computed_layers = 0;
  std::vector<double> confidences;  // one per computed layer
  bool exited_early = false;
};

inline double confidence_from_probs(const TaskSpec& task, const ClassProbs& p) {
  double total = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double m = p(r, 0);
    for (std::size_t c = 1; c < p.cols(); ++c) m = std::max(m, p(r, c));
    total += m;
  }
  if (task.kind == TaskKind::per_token) return total / static_cast<double>(p.rows());
  return total;
}

inline double confidence(const Matrix<double>& logits, const TaskSpec& task) {
  return confidence_from_probs(task, class_probabilities(task, logits));
}

namespace detail {

template <typename T>
void check_stack(const EncoderWeights<T>& w, const HeadStack& heads) {
  if (heads.n_layers() != w.config.n_layers) {
    fail(ErrorKind::config, "head stack has ", heads.n_layers(), " heads for a ", w.config.n_layers,
         "-layer encoder");
  }
  for (const auto& h : heads.heads) {
    if (h.d_in() != w.config.d_model) {
      fail(ErrorKind::config, "head ", h.layer_index, " expects width ", h.d_in(), " but d_model is ",
           w.config.d_model);
    }
    if (h.n_classes() != heads.task.n_classes) fail(ErrorKind::config, "head ", h.layer_index, " class count mismatch");
  }
}

}  // namespace detail

template <typename T>
ExitResult run_early_exit(const EncoderWeights<T>& w, const HeadStack& heads, std::span<const Token> tokens,
                          const ExitPolicy& policy, LayerCounter* counter = nullptr) {
  policy.validate();
  detail::check_stack(w, heads);
  EncoderState<T> state = embed(w, tokens);
  ExitResult out;
  ClassProbs best;
  std::size_t best_layer = 0;
  double best_conf = -1.0;
  const std::size_t n = w.config.n_layers;
  for (std::size_t l = 0; l < n; ++l) {
    LayerStep<T> step = forward_through_layer(w, state, l, counter);
    ++out.computed_layers;
    const auto z = head_logits(heads.heads[l], head_input(step.hidden, heads.task, heads.pooling));
    ClassProbs probs = class_probabilities(heads.task, z);
    const double conf = confidence_from_probs(heads.task, probs);
    out.confidences.push_back(conf);
    if (conf > policy.threshold) {
      out.prediction = std::move(probs);
      out.exit_layer = l;
      out.exited_early = true;
      return out;
    }
    if (conf > best_conf) {
      best_conf = conf;
      best_layer = l;
      best = probs;
    }
    if (l + 1 == n) {
      if (policy.fallback == Fallback::last_layer) {
        out.prediction = std::move(probs);
        out.exit_layer = l;
      } else {
        out.prediction = std::move(best);
        out.exit_layer = best_layer;
      }
    }
    state = std::move(step.state);
  }
  return out;
}

template <typename T>
ExitResult run_early_exit(const EncoderWeights<T>& w, const HeadStack& heads, const TokenSeq& tokens,
                          const ExitPolicy& policy, LayerCounter* counter = nullptr) {
  return run_early_exit(w, heads, std::span<const Token>(tokens), policy, counter);
}

struct SweepPoint {
  double threshold = 0.0;
  Fallback fallback = Fallback::last_layer;
  double mean_computed_layers = 0.0;
  double efficiency_pct = 0.0;
  std::string metric_name;
  double metric_value = 0.0;
  double walltime_seconds = 0.0;
};

struct SweepItemLog {
  std::vector<ExitResult> results;        // per item
  std::vector<std::uint64_t> layer_runs;  // instrumented executions per item
};

inline double efficiency_pct(double mean_layers, std::size_t n_layers) {
  const double n = static_cast<double>(n_layers);
  return (n - mean_layers) / n * 100.0;
}

// One point per threshold, evaluated in the given order. Items may be spread
// over threads; pass threads = 1 when walltime is the quantity of interest.
template <typename T>
std::vector<SweepPoint> threshold_sweep(const EncoderWeights<T>& w, const HeadStack& heads,
                                        const LabeledDataset& data, const std::vector<double>& thresholds,
                                        Fallback fallback, std::size_t threads = 1,
                                        std::vector<SweepItemLog>* logs = nullptr) {
  if (data.size() == 0) fail(ErrorKind::data, "threshold sweep over an empty dataset");
  if (thresholds.empty()) fail(ErrorKind::config, "threshold sweep needs at least one threshold");
  detail::check_stack(w, heads);
  if (!(data.task == heads.task)) fail(ErrorKind::config, "dataset task does not match head task");
  for (double t : thresholds) ExitPolicy{t, fallback}.validate();

  std::vector<SweepPoint> points;
  if (logs) logs->clear();
  for (double t : thresholds) {
    const ExitPolicy policy{t, fallback};
    std::vector<ExitResult> results(data.size());
    std::vector<std::uint64_t> runs(data.size());
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(data.size(), threads, [&](std::size_t i) {
      LayerCounter counter;
      results[i] = run_early_exit(w, heads, data.records[i].tokens, policy, &counter);
      runs[i] = counter.load();
    });
    const auto t1 = std::chrono::steady_clock::now();

    SweepPoint p;
    p.threshold = t;
    p.fallback = fallback;
    double layers = 0.0;
    std::vector<ClassProbs> preds;
    preds.reserve(results.size());
    for (const auto& r : results) {
      layers += static_cast<double>(r.computed_layers);
      preds.push_back(r.prediction);
    }
    p.mean_computed_layers = layers / static_cast<double>(results.size());
    p.efficiency_pct = efficiency_pct(p.mean_computed_layers, w.config.n_layers);
    p.metric_name = metric_name(data.task.kind);
    p.metric_value = task_metric(data.task, preds, data.labels);
    p.walltime_seconds = std::chrono::duration<double>(t1 - t0).count();
    points.push_back(p);
    if (logs) logs->push_back({std::move(results), std::move(runs)});
  }
  return points;
}

// Every layer's prediction for every item from one full pass: [item][layer].
template <typename T>
std::vector<std::vector<ClassProbs>> layer_predictions(const EncoderWeights<T>& w, const HeadStack& heads,
                                                       const std::vector<SequenceRecord>& records,
                                                       std::size_t threads = 1) {
  detail::check_stack(w, heads);
  std::vector<std::vector<ClassProbs>> out(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    const auto trace = forward(w, records[i].tokens);
    for (std::size_t l = 0; l < trace.n_layers(); ++l) {
      const auto z = head_logits(heads.heads[l], head_input(trace.hidden[l + 1], heads.task, heads.pooling));
      out[i].push_back(class_probabilities(heads.task, z));
    }
  });
  return out;
}

struct LayerScore {
  std::size_t layer = 0;
  double metric_value = 0.0;
  double excess_aurc = 0.0;
};

// Per-layer metric and calibration from stored per-layer predictions. The last
// row is the last-layer baseline.
inline std::vector<LayerScore> score_layers(const TaskSpec& task, const std::vector<std::vector<ClassProbs>>& preds,
                                            const std::vector<Label>& labels) {
  if (preds.empty()) fail(ErrorKind::data, "no predictions to score");
  const std::size_t n_layers = preds[0].size();
  std::vector<LayerScore> out;
  for (std::size_t l = 0; l < n_layers; ++l) {
    std::vector<ClassProbs> layer;
    std::vector<double> conf, loss;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      layer.push_back(preds[i][l]);
      conf.push_back(confidence_from_probs(task, preds[i][l]));
      loss.push_back(item_loss(task, preds[i][l], labels[i]));
    }
    out.push_back({l, task_metric(task, layer, labels), excess_aurc(conf, loss)});
  }
  return out;
}

template <typename T>
std::vector<LayerScore> single_layer_baseline(const EncoderWeights<T>& w, const HeadStack& heads,
                                              const LabeledDataset& data, std::size_t threads = 1) {
  if (data.size() == 0) fail(ErrorKind::data, "baseline over an empty dataset");
  return score_layers(data.task, layer_predictions(w, heads, data.records, threads), data.labels);
}

}  // namespace attnexit

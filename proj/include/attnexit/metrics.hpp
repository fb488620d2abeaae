#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "attnexit/error.hpp"
#include "attnexit/task.hpp"
#include "attnexit/tensor.hpp"

namespace attnexit {

// Protein-centric F1 at threshold tau (a class is predicted when score >= tau).
// Precision averages over items with at least one prediction, recall over items
// with at least one true class.
inline double f1_at_threshold(const std::vector<std::vector<double>>& scores, const std::vector<Label>& truth,
                              double tau) {
  double psum = 0.0, rsum = 0.0;
  int pcount = 0, rcount = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    int tp = 0, pred = 0;
    for (std::size_t k = 0; k < scores[i].size(); ++k) {
      if (scores[i][k] >= tau) {
        ++pred;
        if (std::binary_search(truth[i].begin(), truth[i].end(), static_cast<int>(k))) ++tp;
      }
    }
    if (pred > 0) {
      psum += static_cast<double>(tp) / pred;
      ++pcount;
    }
    if (!truth[i].empty()) {
      rsum += static_cast<double>(tp) / static_cast<double>(truth[i].size());
      ++rcount;
    }
  }
  if (pcount == 0 || rcount == 0) return 0.0;
  const double p = psum / pcount, r = rsum / rcount;
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

struct F1Max {
  double f1 = 0.0;
  double threshold = 0.0;
};

// Sweeps every distinct score plus 0 and 1 from the top down. Per-item counts
// are updated incrementally; the averages are re-summed in item order so the
// value is identical to evaluating each threshold from scratch.
inline F1Max f1_max_detail(const std::vector<std::vector<double>>& scores, const std::vector<Label>& truth) {
  if (scores.empty()) fail(ErrorKind::invalid_argument, "f1_max needs at least one item");
  if (scores.size() != truth.size()) {
    fail(ErrorKind::invalid_argument, "f1_max: ", scores.size(), " score rows but ", truth.size(), " label sets");
  }
  const std::size_t n = scores.size();
  const std::size_t k = scores[0].size();
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (scores[i].size() != k) fail(ErrorKind::invalid_argument, "f1_max: ragged score rows");
    for (int c : truth[i]) {
      if (c < 0 || static_cast<std::size_t>(c) >= k) fail(ErrorKind::invalid_argument, "f1_max: class ", c, " out of range");
    }
    if (!std::is_sorted(truth[i].begin(), truth[i].end())) fail(ErrorKind::invalid_argument, "f1_max: unsorted label set");
    positives += truth[i].size();
  }
  if (positives == 0) fail(ErrorKind::undefined, "f1_max: no positive labels anywhere");

  struct Entry {
    double score;
    std::size_t item;
    bool hit;
  };
  std::vector<Entry> entries;
  entries.reserve(n * k);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < k; ++c)
      entries.push_back({scores[i][c], i, std::binary_search(truth[i].begin(), truth[i].end(), static_cast<int>(c))});
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });

  std::vector<double> taus;
  taus.reserve(entries.size() + 2);
  taus.push_back(1.0);
  for (const auto& e : entries) taus.push_back(e.score);
  taus.push_back(0.0);
  std::sort(taus.begin(), taus.end(), std::greater<>());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());

  std::vector<int> tp(n, 0), pred(n, 0);
  F1Max best{0.0, taus.front()};
  std::size_t next = 0;
  for (double tau : taus) {
    while (next < entries.size() && entries[next].score >= tau) {
      ++pred[entries[next].item];
      tp[entries[next].item] += entries[next].hit;
      ++next;
    }
    double psum = 0.0, rsum = 0.0;
    int pcount = 0, rcount = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (pred[i] > 0) {
        psum += static_cast<double>(tp[i]) / pred[i];
        ++pcount;
      }
      if (!truth[i].empty()) {
        rsum += static_cast<double>(tp[i]) / static_cast<double>(truth[i].size());
        ++rcount;
      }
    }
    double f1 = 0.0;
    if (pcount > 0 && rcount > 0) {
      const double p = psum / pcount, r = rsum / rcount;
      f1 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    }
    if (f1 > best.f1) best = {f1, tau};
  }
  return best;
}

inline double f1_max(const std::vector<std::vector<double>>& scores, const std::vector<Label>& truth) {
  return f1_max_detail(scores, truth).f1;
}

inline double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  if (predicted.size() != labels.size()) {
    fail(ErrorKind::invalid_argument, "accuracy: ", predicted.size(), " predictions but ", labels.size(), " labels");
  }
  if (predicted.empty()) fail(ErrorKind::invalid_argument, "accuracy of an empty list");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

// Pooled over every position of every item.
inline double per_token_accuracy(const std::vector<std::vector<int>>& predicted,
                                 const std::vector<std::vector<int>>& labels) {
  if (predicted.size() != labels.size()) {
    fail(ErrorKind::invalid_argument, "per_token_accuracy: ", predicted.size(), " items but ", labels.size(), " labels");
  }
  std::size_t hits = 0, total = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i].size() != labels[i].size()) {
      fail(ErrorKind::invalid_argument, "per_token_accuracy: item ", i, " has ", predicted[i].size(),
           " predictions for ", labels[i].size(), " positions");
    }
    for (std::size_t p = 0; p < labels[i].size(); ++p) hits += predicted[i][p] == labels[i][p];
    total += labels[i].size();
  }
  if (total == 0) fail(ErrorKind::invalid_argument, "per_token_accuracy over zero positions");
  return static_cast<double>(hits) / static_cast<double>(total);
}

namespace detail {

inline double prefix_mean_area(std::span<const double> losses, std::span<const std::size_t> order) {
  double area = 0.0, cum = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    cum += losses[order[k]];
    area += cum / static_cast<double>(k + 1);
  }
  return area / static_cast<double>(order.size());
}

}  // namespace detail

struct AurcResult {
  double aurc = 0.0;
  double optimal = 0.0;
  double excess = 0.0;
};

inline AurcResult aurc_detail(std::span<const double> confidences, std::span<const double> losses) {
  if (confidences.size() != losses.size()) {
    fail(ErrorKind::invalid_argument, "excess_aurc: ", confidences.size(), " confidences but ", losses.size(),
         " losses");
  }
  if (confidences.empty()) fail(ErrorKind::invalid_argument, "excess_aurc of an empty list");
  std::vector<std::size_t> order(confidences.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return confidences[a] > confidences[b]; });
  std::vector<std::size_t> ideal(losses.size());
  std::iota(ideal.begin(), ideal.end(), 0);
  std::stable_sort(ideal.begin(), ideal.end(), [&](std::size_t a, std::size_t b) { return losses[a] < losses[b]; });
  AurcResult r;
  r.aurc = detail::prefix_mean_area(losses, order);
  r.optimal = detail::prefix_mean_area(losses, ideal);
  double gap = 0.0, cum_order = 0.0, cum_ideal = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    cum_order += losses[order[k]];
    cum_ideal += losses[ideal[k]];
    gap += (cum_order - cum_ideal) / static_cast<double>(k + 1);
  }
  r.excess = std::max(0.0, gap / static_cast<double>(order.size()));
  return r;
}

inline double excess_aurc(std::span<const double> confidences, std::span<const double> losses) {
  return aurc_detail(confidences, losses).excess;
}

// Row-wise class probabilities for one item: one row for pooled tasks, one row
// per position for per_token.
using ClassProbs = Matrix<double>;

inline int argmax_row(const ClassProbs& p, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < p.cols(); ++c)
    if (p(row, c) > p(row, best)) best = c;
  return static_cast<int>(best);
}

inline const char* metric_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::multi_label: return "f1_max";
    case TaskKind::multi_class: return "accuracy";
    case TaskKind::per_token: return "per_token_accuracy";
  }
  return "?";
}

// The task's headline metric over a dataset of per-item probabilities.
inline double task_metric(const TaskSpec& task, const std::vector<ClassProbs>& probs, const std::vector<Label>& labels) {
  if (probs.size() != labels.size()) {
    fail(ErrorKind::invalid_argument, "task_metric: ", probs.size(), " predictions but ", labels.size(), " labels");
  }
  switch (task.kind) {
    case TaskKind::multi_label: {
      std::vector<std::vector<double>> scores;
      scores.reserve(probs.size());
      for (const auto& p : probs) scores.emplace_back(p.row(0).begin(), p.row(0).end());
      return f1_max(scores, labels);
    }
    case TaskKind::multi_class: {
      std::vector<int> pred, truth;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        pred.push_back(argmax_row(probs[i], 0));
        truth.push_back(labels[i].at(0));
      }
      return accuracy(pred, truth);
    }
    case TaskKind::per_token: {
      std::vector<std::vector<int>> pred(probs.size());
      for (std::size_t i = 0; i < probs.size(); ++i)
        for (std::size_t r = 0; r < probs[i].rows(); ++r) pred[i].push_back(argmax_row(probs[i], r));
      return per_token_accuracy(pred, labels);
    }
  }
  return 0.0;
}

// Per-item loss for risk-coverage: mean binary cross-entropy over classes for
// multi_label, 0/1 error for multi_class, token error rate for per_token.
inline double item_loss(const TaskSpec& task, const ClassProbs& p, const Label& label) {
  switch (task.kind) {
    case TaskKind::multi_label: {
      constexpr double eps = 1e-12;
      double s = 0.0;
      for (std::size_t c = 0; c < p.cols(); ++c) {
        const bool y = std::binary_search(label.begin(), label.end(), static_cast<int>(c));
        const double q = std::clamp(p(0, c), eps, 1.0 - eps);
        s -= y ? std::log(q) : std::log1p(-q);
      }
      return s / static_cast<double>(p.cols());
    }
    case TaskKind::multi_class:
      return argmax_row(p, 0) == label.at(0) ? 0.0 : 1.0;
    case TaskKind::per_token: {
      std::size_t wrong = 0;
      for (std::size_t r = 0; r < p.rows(); ++r) wrong += argmax_row(p, r) != label.at(r);
      return static_cast<double>(wrong) / static_cast<double>(p.rows());
    }
  }
  return 0.0;
}

}  // namespace attnexit

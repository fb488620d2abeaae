#pragma once

// Per-layer prediction heads: affine -> ReLU -> affine on top of each
// transformer layer's output, trained independently with the encoder frozen.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "attnexit/encoder.hpp"
#include "attnexit/error.hpp"
#include "attnexit/metrics.hpp"
#include "attnexit/parallel.hpp"
#include "attnexit/random.hpp"
#include "attnexit/task.hpp"
#include "attnexit/tensor.hpp"

namespace attnexit {

enum class Pooling { mean, cls };

inline const char* to_string(Pooling p) { return p == Pooling::mean ? "mean" : "cls"; }

inline Pooling pooling_from_string(const std::string& s) {
  if (s == "mean") return Pooling::mean;
  if (s == "cls") return Pooling::cls;
  fail(ErrorKind::config, "unknown pooling '", s, "' (expected mean or cls)");
}

struct LayerHead {
  std::size_t layer_index = 0;
  Matrix<float> w1;  // d_model x d_hidden
  Matrix<float> b1;  // 1 x d_hidden
  Matrix<float> w2;  // d_hidden x n_classes
  Matrix<float> b2;  // 1 x n_classes

  std::size_t d_in() const { return w1.rows(); }
  std::size_t d_hidden() const { return w1.cols(); }
  std::size_t n_classes() const { return w2.cols(); }

  friend bool operator==(const LayerHead&, const LayerHead&) = default;
};

struct HeadStack {
  std::vector<LayerHead> heads;
  TaskSpec task;
  Pooling pooling = Pooling::mean;

  std::size_t n_layers() const { return heads.size(); }

  void validate() const {
    task.validate();
    if (heads.empty()) fail(ErrorKind::config, "head stack is empty");
    for (std::size_t l = 0; l < heads.size(); ++l) {
      const auto& h = heads[l];
      if (h.layer_index != l) fail(ErrorKind::config, "head ", l, " carries layer index ", h.layer_index);
      if (h.b1.rows() != 1 || h.b1.cols() != h.d_hidden() || h.w2.rows() != h.d_hidden() || h.b2.rows() != 1 ||
          h.b2.cols() != h.n_classes() || h.n_classes() != task.n_classes || h.d_in() != heads[0].d_in()) {
        fail(ErrorKind::config, "head ", l, " has inconsistent shapes");
      }
      for (const auto* m : {&h.w1, &h.b1, &h.w2, &h.b2})
        if (!m->all_finite()) fail(ErrorKind::config, "head ", l, " has non-finite weights");
    }
  }

  friend bool operator==(const HeadStack&, const HeadStack&) = default;
};

template <typename T>
Matrix<double> pool(const Matrix<T>& hidden, Pooling pooling) {
  if (hidden.rows() == 0) fail(ErrorKind::invalid_argument, "cannot pool an empty sequence");
  Matrix<double> out(1, hidden.cols(), 0.0);
  if (pooling == Pooling::cls) {
    for (std::size_t c = 0; c < hidden.cols(); ++c) out(0, c) = hidden(0, c);
    return out;
  }
  for (std::size_t c = 0; c < hidden.cols(); ++c) {
    double s = 0.0;
    for (std::size_t r = 0; r < hidden.rows(); ++r) s += hidden(r, c);
    out(0, c) = s / static_cast<double>(hidden.rows());
  }
  return out;
}

// Head input for one layer output: pooled row, or every position for per_token.
template <typename T>
Matrix<double> head_input(const Matrix<T>& hidden, const TaskSpec& task, Pooling pooling) {
  if (task.kind == TaskKind::per_token) return hidden.template cast<double>();
  return pool(hidden, pooling);
}

inline Matrix<double> head_logits(const LayerHead& head, const Matrix<double>& input) {
  if (input.cols() != head.d_in()) {
    fail(ErrorKind::invalid_argument, "head for layer ", head.layer_index, " expects width ", head.d_in(),
         ", got input ", shape_str(input));
  }
  Matrix<double> h(input.rows(), head.d_hidden());
  for (std::size_t r = 0; r < input.rows(); ++r)
    for (std::size_t j = 0; j < head.d_hidden(); ++j) {
      double s = head.b1(0, j);
      for (std::size_t k = 0; k < head.d_in(); ++k) s += input(r, k) * head.w1(k, j);
      h(r, j) = s > 0.0 ? s : 0.0;
    }
  Matrix<double> z(input.rows(), head.n_classes());
  for (std::size_t r = 0; r < input.rows(); ++r)
    for (std::size_t c = 0; c < head.n_classes(); ++c) {
      double s = head.b2(0, c);
      for (std::size_t j = 0; j < head.d_hidden(); ++j) s += h(r, j) * head.w2(j, c);
      z(r, c) = s;
    }
  return z;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void softmax_row(const Matrix<double>& z, std::size_t r, std::span<double> out) {
  double m = z(r, 0);
  for (std::size_t c = 1; c < z.cols(); ++c) m = std::max(m, z(r, c));
  double s = 0.0;
  for (std::size_t c = 0; c < z.cols(); ++c) s += out[c] = std::exp(z(r, c) - m);
  for (std::size_t c = 0; c < z.cols(); ++c) out[c] /= s;
}

// Sigmoid per class for multi_label, row softmax otherwise.
inline ClassProbs class_probabilities(const TaskSpec& task, const Matrix<double>& logits) {
  ClassProbs p(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (task.kind == TaskKind::multi_label) {
      for (std::size_t c = 0; c < logits.cols(); ++c) p(r, c) = sigmoid(logits(r, c));
    } else {
      softmax_row(logits, r, p.row(r));
    }
  }
  return p;
}

struct HeadHyper {
  std::size_t d_hidden = 128;
  double step_size = 0.05;
  double momentum = 0.9;
  std::size_t epochs = 30;
  std::size_t batch = 16;
  std::uint64_t seed = 0;
};

inline LayerHead init_head(std::size_t layer, std::size_t d_model, std::size_t d_hidden, std::size_t n_classes,
                           std::uint64_t seed) {
  Rng rng(derive_seed(derive_seed(seed, "head-init"), layer));
  LayerHead h;
  h.layer_index = layer;
  h.w1 = Matrix<float>(d_model, d_hidden);
  h.b1 = Matrix<float>(1, d_hidden, 0.0f);
  h.w2 = Matrix<float>(d_hidden, n_classes);
  h.b2 = Matrix<float>(1, n_classes, 0.0f);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d_model));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(d_hidden));
  for (auto& v : h.w1.values()) v = static_cast<float>(rng.uniform(-s1, s1));
  for (auto& v : h.w2.values()) v = static_cast<float>(rng.uniform(-s2, s2));
  return h;
}

// Mean binary cross-entropy over classes for multi_label, cross-entropy for
// multi_class, mean per-position cross-entropy for per_token. When grad is
// given, d(loss)/d(logits) scaled by `scale` is written into it.
inline double head_loss(const TaskSpec& task, const Matrix<double>& z, const Label& label, Matrix<double>* grad,
                        double scale = 1.0) {
  const std::size_t C = z.cols();
  if (task.kind == TaskKind::multi_label) {
    double loss = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double y = std::binary_search(label.begin(), label.end(), static_cast<int>(c)) ? 1.0 : 0.0;
      const double x = z(0, c);
      loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
      if (grad) (*grad)(0, c) = scale * (sigmoid(x) - y) / static_cast<double>(C);
    }
    return loss / static_cast<double>(C);
  }
  std::vector<double> p(C);
  double loss = 0.0;
  const double rows = static_cast<double>(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    softmax_row(z, r, p);
    const auto y = static_cast<std::size_t>(label.at(r));
    double m = z(r, 0);
    for (std::size_t c = 1; c < C; ++c) m = std::max(m, z(r, c));
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(z(r, c) - m);
    loss += m + std::log(s) - z(r, y);
    if (grad)
      for (std::size_t c = 0; c < C; ++c) (*grad)(r, c) = scale * (p[c] - (c == y ? 1.0 : 0.0)) / rows;
  }
  return loss / rows;
}

// Per-item head inputs for each layer: features[item][layer].
using LayerFeatures = std::vector<std::vector<Matrix<double>>>;

template <typename T>
LayerFeatures features_from_traces(const std::vector<ForwardTrace<T>>& traces, const TaskSpec& task,
                                   Pooling pooling) {
  LayerFeatures out(traces.size());
  for (std::size_t i = 0; i < traces.size(); ++i)
    for (std::size_t l = 0; l < traces[i].n_layers(); ++l)
      out[i].push_back(head_input(traces[i].hidden[l + 1], task, pooling));
  return out;
}

// Runs the frozen encoder over every sequence and keeps only the head inputs.
template <typename T>
LayerFeatures extract_features(const EncoderWeights<T>& w, const std::vector<TokenSeq>& seqs, const TaskSpec& task,
                               Pooling pooling, std::size_t threads = 1) {
  LayerFeatures out(seqs.size());
  parallel_for(seqs.size(), threads, [&](std::size_t i) {
    auto trace = forward(w, seqs[i]);
    for (std::size_t l = 0; l < trace.n_layers(); ++l)
      out[i].push_back(head_input(trace.hidden[l + 1], task, pooling));
  });
  return out;
}

inline double mean_head_loss(const LayerHead& head, const TaskSpec& task, const LayerFeatures& features,
                             const std::vector<Label>& labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < features.size(); ++i)
    s += head_loss(task, head_logits(head, features[i][head.layer_index]), labels[i], nullptr);
  return s / static_cast<double>(features.size());
}

struct HeadTrainLog {
  std::vector<std::vector<double>> layer_losses;  // [layer][epoch], epoch 0 = before training
};

namespace detail {

inline void check_training_inputs(const LayerFeatures& features, const std::vector<Label>& labels,
                                  const TaskSpec& task, const HeadHyper& hyper) {
  task.validate();
  if (features.empty()) fail(ErrorKind::data, "no training items for heads");
  if (features.size() != labels.size()) {
    fail(ErrorKind::data, features.size(), " training items but ", labels.size(), " labels");
  }
  if (hyper.d_hidden == 0 || hyper.batch == 0) fail(ErrorKind::config, "head d_hidden and batch must be >= 1");
  const std::size_t n_layers = features[0].size();
  if (n_layers == 0) fail(ErrorKind::data, "features carry no layers");
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != n_layers) fail(ErrorKind::data, "item ", i, " has ", features[i].size(), " layers");
    const std::size_t rows = features[i][0].rows();
    if (task.kind != TaskKind::per_token && rows != 1) fail(ErrorKind::data, "pooled task with unpooled features");
    validate_label(task, labels[i], rows, "label " + std::to_string(i));
  }
}

}  // namespace detail

// Trains the head for one layer. Depends only on that layer's features, the
// labels, and the seed.
inline LayerHead train_layer_head(const LayerFeatures& features, const std::vector<Label>& labels,
                                  const TaskSpec& task, const HeadHyper& hyper, std::size_t layer,
                                  std::vector<double>* losses = nullptr) {
  const std::size_t d_model = features[0][layer].cols();
  LayerHead head = init_head(layer, d_model, hyper.d_hidden, task.n_classes, hyper.seed);
  if (losses) losses->push_back(mean_head_loss(head, task, features, labels));
  if (hyper.epochs == 0) return head;

  const std::size_t H = hyper.d_hidden, C = task.n_classes;
  Matrix<double> w1 = head.w1.cast<double>(), b1 = head.b1.cast<double>();
  Matrix<double> w2 = head.w2.cast<double>(), b2 = head.b2.cast<double>();
  Matrix<double> vw1(d_model, H, 0.0), vb1(1, H, 0.0), vw2(H, C, 0.0), vb2(1, C, 0.0);
  Matrix<double> gw1(d_model, H), gb1(1, H), gw2(H, C), gb2(1, C);

  Rng rng(derive_seed(derive_seed(hyper.seed, "head-order"), layer));
  std::vector<std::size_t> order(features.size());
  std::iota(order.begin(), order.end(), 0);

  auto step = [&](Matrix<double>& p, Matrix<double>& v, const Matrix<double>& g) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      v.data()[k] = hyper.momentum * v.data()[k] + g.data()[k];
      p.data()[k] -= hyper.step_size * v.data()[k];
    }
  };

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += hyper.batch) {
      const std::size_t end = std::min(order.size(), start + hyper.batch);
      const double scale = 1.0 / static_cast<double>(end - start);
      gw1.fill(0.0);
      gb1.fill(0.0);
      gw2.fill(0.0);
      gb2.fill(0.0);
      for (std::size_t t = start; t < end; ++t) {
        const std::size_t item = order[t];
        const Matrix<double>& x = features[item][layer];
        const std::size_t R = x.rows();
        Matrix<double> h(R, H);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t j = 0; j < H; ++j) {
            double s = b1(0, j);
            for (std::size_t k = 0; k < d_model; ++k) s += x(r, k) * w1(k, j);
            h(r, j) = s > 0.0 ? s : 0.0;
          }
        Matrix<double> z(R, C);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) {
            double s = b2(0, c);
            for (std::size_t j = 0; j < H; ++j) s += h(r, j) * w2(j, c);
            z(r, c) = s;
          }
        Matrix<double> dz(R, C);
        head_loss(task, z, labels[item], &dz, scale);
        for (std::size_t r = 0; r < R; ++r) {
          for (std::size_t c = 0; c < C; ++c) {
            gb2(0, c) += dz(r, c);
            for (std::size_t j = 0; j < H; ++j) gw2(j, c) += h(r, j) * dz(r, c);
          }
          for (std::size_t j = 0; j < H; ++j) {
            if (h(r, j) <= 0.0) continue;
            double dh = 0.0;
            for (std::size_t c = 0; c < C; ++c) dh += dz(r, c) * w2(j, c);
            gb1(0, j) += dh;
            for (std::size_t k = 0; k < d_model; ++k) gw1(k, j) += x(r, k) * dh;
          }
        }
      }
      step(w1, vw1, gw1);
      step(b1, vb1, gb1);
      step(w2, vw2, gw2);
      step(b2, vb2, gb2);
    }
    head.w1 = w1.cast<float>();
    head.b1 = b1.cast<float>();
    head.w2 = w2.cast<float>();
    head.b2 = b2.cast<float>();
    if (losses) losses->push_back(mean_head_loss(head, task, features, labels));
  }
  for (const auto* m : {&head.w1, &head.b1, &head.w2, &head.b2})
    if (!m->all_finite()) fail(ErrorKind::runtime, "head training for layer ", layer, " diverged");
  return head;
}

inline HeadStack train_heads(const LayerFeatures& features, const std::vector<Label>& labels, const TaskSpec& task,
                             Pooling pooling, const HeadHyper& hyper, std::size_t threads = 1,
                             HeadTrainLog* log = nullptr) {
  detail::check_training_inputs(features, labels, task, hyper);
  const std::size_t n_layers = features[0].size();
  HeadStack stack;
  stack.task = task;
  stack.pooling = pooling;
  stack.heads.resize(n_layers);
  std::vector<std::vector<double>> losses(n_layers);
  parallel_for(n_layers, threads, [&](std::size_t l) {
    stack.heads[l] = train_layer_head(features, labels, task, hyper, l, &losses[l]);
  });
  if (log) log->layer_losses = std::move(losses);
  return stack;
}

template <typename T>
HeadStack train_heads(const std::vector<ForwardTrace<T>>& traces, const std::vector<Label>& labels,
                      const TaskSpec& task, Pooling pooling, const HeadHyper& hyper, std::size_t threads = 1,
                      HeadTrainLog* log = nullptr) {
  return train_heads(features_from_traces(traces, task, pooling), labels, task, pooling, hyper, threads, log);
}

}  // namespace attnexit

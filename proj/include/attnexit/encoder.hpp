#pragma once

// A small bidirectional post-LN transformer encoder with masked-token
// training. Every layer exposes its pre-softmax attention logits, and the
// forward pass can be driven one layer at a time for early exit.
//
// Layer l, input x (L x d_model):
//   Q, K, V  = x Wq + bq, x Wk + bk, x Wv + bv
//   S_h      = Q_h K_h^T / sqrt(d_head)          (exported logits, per head)
//   O_h      = softmax_rows(S_h) V_h
//   y1       = LN1(x + concat(O) Wo + bo)
//   y2       = LN2(y1 + relu(y1 W1 + b1) W2 + b2)

#include <atomic>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "attnexit/error.hpp"
#include "attnexit/random.hpp"
#include "attnexit/tensor.hpp"

namespace attnexit {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

enum class PositionalScheme { learned, sinusoidal };

inline const char* to_string(PositionalScheme p) {
  return p == PositionalScheme::learned ? "learned" : "sinusoidal";
}

inline PositionalScheme positional_scheme_from_string(const std::string& s) {
  if (s == "learned") return PositionalScheme::learned;
  if (s == "sinusoidal") return PositionalScheme::sinusoidal;
  fail(ErrorKind::config, "unknown positional_scheme '", s, "' (expected learned or sinusoidal)");
}

struct EncoderConfig {
  std::size_t vocab_size = 25;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  std::size_t max_seq_len = 128;
  PositionalScheme positional_scheme = PositionalScheme::learned;
  std::uint64_t seed = 0;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size < 2) fail(ErrorKind::config, "encoder.vocab_size must be >= 2, got ", vocab_size);
    if (n_layers < 1) fail(ErrorKind::config, "encoder.n_layers must be >= 1");
    if (n_heads < 1) fail(ErrorKind::config, "encoder.n_heads must be >= 1");
    if (d_model < 1 || d_ff < 1) fail(ErrorKind::config, "encoder.d_model and d_ff must be >= 1");
    if (d_model % n_heads != 0) {
      fail(ErrorKind::config, "encoder.d_model (", d_model, ") must be divisible by n_heads (",
           n_heads, ")");
    }
    if (max_seq_len < 2) fail(ErrorKind::config, "encoder.max_seq_len must be >= 2");
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <typename T>
struct LayerWeights {
  Matrix<T> wq, wk, wv, wo;  // d_model x d_model
  Matrix<T> bq, bk, bv, bo;  // 1 x d_model
  Matrix<T> ln1_gain, ln1_bias;
  Matrix<T> w1, b1;  // d_model x d_ff, 1 x d_ff
  Matrix<T> w2, b2;  // d_ff x d_model, 1 x d_model
  Matrix<T> ln2_gain, ln2_bias;

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

template <typename T>
struct EncoderWeights {
  EncoderConfig config;
  Matrix<T> token_embedding;  // vocab x d_model
  Matrix<T> position;         // max_seq_len x d_model (fixed table for sinusoidal)
  std::vector<LayerWeights<T>> layers;
  Matrix<T> mlm_w;  // d_model x vocab
  Matrix<T> mlm_b;  // 1 x vocab

  friend bool operator==(const EncoderWeights&, const EncoderWeights&) = default;
};

// Visits every parameter tensor in a fixed order with a stable name.
// W may be const or mutable.
template <typename W, typename F>
void visit_parameters(W& w, F&& f) {
  f(std::string("embed.token"), w.token_embedding);
  f(std::string("embed.position"), w.position);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    f(p + "attn.wq", L.wq);
    f(p + "attn.bq", L.bq);
    f(p + "attn.wk", L.wk);
    f(p + "attn.bk", L.bk);
    f(p + "attn.wv", L.wv);
    f(p + "attn.bv", L.bv);
    f(p + "attn.wo", L.wo);
    f(p + "attn.bo", L.bo);
    f(p + "ln1.gain", L.ln1_gain);
    f(p + "ln1.bias", L.ln1_bias);
    f(p + "ffn.w1", L.w1);
    f(p + "ffn.b1", L.b1);
    f(p + "ffn.w2", L.w2);
    f(p + "ffn.b2", L.b2);
    f(p + "ln2.gain", L.ln2_gain);
    f(p + "ln2.bias", L.ln2_bias);
  }
  f(std::string("mlm.w"), w.mlm_w);
  f(std::string("mlm.b"), w.mlm_b);
}

// Same traversal over two structurally identical weight sets.
template <typename W1, typename W2, typename F>
void visit_parameter_pairs(W1& a, W2& b, F&& f) {
  std::vector<std::pair<std::string, decltype(&a.mlm_w)>> left;
  visit_parameters(a, [&](const std::string& n, auto& m) { left.emplace_back(n, &m); });
  std::size_t i = 0;
  visit_parameters(b, [&](const std::string& n, auto& m) { f(n, *left[i++].second, m); });
}

// Half-width of the uniform distribution a named parameter is drawn from;
// zero for tensors initialized to a constant (biases, layer-norm params).
inline double init_scale(const std::string& name, const EncoderConfig& c) {
  auto ends_with = [&](const char* s) {
    const std::string suf(s);
    return name.size() >= suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (name == "embed.token" || name == "embed.position") return 0.5;
  if (ends_with(".wq") || ends_with(".wk") || ends_with(".wv") || ends_with(".wo") ||
      ends_with(".w1") || name == "mlm.w") {
    return 1.0 / std::sqrt(static_cast<double>(c.d_model));
  }
  if (ends_with(".w2")) return 1.0 / std::sqrt(static_cast<double>(c.d_ff));
  return 0.0;
}

namespace detail {

template <typename T>
Matrix<T> sinusoidal_table(std::size_t len, std::size_t d) {
  Matrix<T> p(len, d);
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
      const double a = static_cast<double>(pos) * rate;
      p(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  }
  return p;
}

template <typename T>
EncoderWeights<T> zero_weights(const EncoderConfig& c) {
  EncoderWeights<T> w;
  w.config = c;
  const std::size_t D = c.d_model, F = c.d_ff;
  w.token_embedding = Matrix<T>(c.vocab_size, D);
  w.position = Matrix<T>(c.max_seq_len, D);
  w.layers.resize(c.n_layers);
  for (auto& L : w.layers) {
    L.wq = L.wk = L.wv = L.wo = Matrix<T>(D, D);
    L.bq = L.bk = L.bv = L.bo = Matrix<T>(1, D);
    L.ln1_gain = L.ln2_gain = Matrix<T>(1, D);
    L.ln1_bias = L.ln2_bias = Matrix<T>(1, D);
    L.w1 = Matrix<T>(D, F);
    L.b1 = Matrix<T>(1, F);
    L.w2 = Matrix<T>(F, D);
    L.b2 = Matrix<T>(1, D);
  }
  w.mlm_w = Matrix<T>(D, c.vocab_size);
  w.mlm_b = Matrix<T>(1, c.vocab_size);
  return w;
}

}  // namespace detail

// Gradient buffers share the weight layout.
template <typename T>
EncoderWeights<T> zeros_like(const EncoderWeights<T>& w) {
  return detail::zero_weights<T>(w.config);
}

template <typename T = float>
EncoderWeights<T> init_weights(const EncoderConfig& config) {
  config.validate();
  auto w = detail::zero_weights<T>(config);
  Rng rng(derive_seed(config.seed, "encoder-init"));
  visit_parameters(w, [&](const std::string& name, Matrix<T>& m) {
    const double s = init_scale(name, config);
    if (name.ends_with("gain")) {
      m.fill(T{1});
    } else if (s > 0.0) {
      for (auto& v : m.values()) v = static_cast<T>(rng.uniform(-s, s));
    }
  });
  if (config.positional_scheme == PositionalScheme::sinusoidal) {
    w.position = detail::sinusoidal_table<T>(config.max_seq_len, config.d_model);
  }
  return w;
}

inline void validate_tokens(const EncoderConfig& c, std::span<const Token> tokens) {
  if (tokens.empty()) fail(ErrorKind::invalid_argument, "empty token sequence");
  if (tokens.size() > c.max_seq_len) {
    fail(ErrorKind::invalid_argument, "sequence length ", tokens.size(), " exceeds max_seq_len ",
         c.max_seq_len);
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= c.vocab_size) {
      fail(ErrorKind::invalid_argument, "token id ", tokens[i], " at position ", i,
           " outside vocabulary of size ", c.vocab_size);
    }
  }
}

// Counts executed transformer layers; shared across threads.
struct LayerCounter {
  std::atomic<std::uint64_t> executed{0};
  std::uint64_t load() const { return executed.load(); }
};

// Hidden state between incremental layer steps.
template <typename T>
struct EncoderState {
  Matrix<T> hidden;
  std::size_t next_layer = 0;
};

template <typename T>
struct LayerStep {
  EncoderState<T> state;
  Matrix<T> hidden;
  std::vector<Matrix<T>> attn_logits;  // one L x L matrix per head
};

template <typename T>
struct ForwardTrace {
  TokenSeq tokens;
  std::vector<Matrix<T>> hidden;                   // n_layers + 1 (embedding first)
  std::vector<std::vector<Matrix<T>>> attn_logits;  // [layer][head], pre-softmax

  std::size_t n_layers() const { return attn_logits.size(); }
  std::size_t n_heads() const { return attn_logits.empty() ? 0 : attn_logits[0].size(); }
  std::size_t seq_len() const { return tokens.size(); }
};

namespace detail {

struct LnCache {
  std::vector<double> inv_std;
};

template <typename T>
Matrix<T> add_bias(Matrix<T> m, const Matrix<T>& bias) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < m.cols(); ++c) row[c] += bias(0, c);
  }
  return m;
}

template <typename T>
Matrix<T> affine(const Matrix<T>& x, const Matrix<T>& w, const Matrix<T>& b) {
  return add_bias(matmul(x, w), b);
}

inline constexpr double kLnEps = 1e-5;

// Returns normalized rows (pre gain/bias) in xhat.
template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias,
                     Matrix<T>* xhat_out, LnCache* cache) {
  Matrix<T> y(x.rows(), x.cols());
  Matrix<T> xhat(x.rows(), x.cols());
  if (cache) cache->inv_std.resize(x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    const double mu = mean(row);
    double var = 0.0;
    for (T v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(row.size());
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    if (cache) cache->inv_std[r] = inv;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const double h = (row[c] - mu) * inv;
      xhat(r, c) = static_cast<T>(h);
      y(r, c) = static_cast<T>(h * gain(0, c) + bias(0, c));
    }
  }
  if (xhat_out) *xhat_out = std::move(xhat);
  return y;
}

template <typename T>
void softmax_rows_inplace(Matrix<T>& s) {
  for (std::size_t r = 0; r < s.rows(); ++r) {
    auto row = s.row(r);
    T mx = row[0];
    for (T v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (auto& v : row) {
      const double e = std::exp(static_cast<double>(v) - mx);
      v = static_cast<T>(e);
      sum += e;
    }
    for (auto& v : row) v = static_cast<T>(v / sum);
  }
}

// Everything the backward pass needs from one layer.
template <typename T>
struct LayerCache {
  Matrix<T> x, q, k, v;
  std::vector<Matrix<T>> probs;
  Matrix<T> concat;
  Matrix<T> xhat1;
  LnCache ln1;
  Matrix<T> y1, ffn_pre, ffn_act;
  Matrix<T> xhat2;
  LnCache ln2;
};

template <typename T>
Matrix<T> run_layer(const EncoderConfig& c, const LayerWeights<T>& L, const Matrix<T>& x,
                    std::vector<Matrix<T>>* logits_out, LayerCache<T>* cache) {
  const std::size_t n = x.rows();
  const std::size_t H = c.n_heads, dh = c.d_head();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix<T> q = affine(x, L.wq, L.bq);
  Matrix<T> k = affine(x, L.wk, L.bk);
  Matrix<T> v = affine(x, L.wv, L.bv);

  Matrix<T> concat(n, c.d_model);
  if (logits_out) logits_out->clear();
  if (cache) cache->probs.clear();
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t off = h * dh;
    Matrix<T> s(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      const T* qi = q.data() + i * c.d_model + off;
      for (std::size_t j = 0; j < n; ++j) {
        const T* kj = k.data() + j * c.d_model + off;
        double acc = 0.0;
        for (std::size_t t = 0; t < dh; ++t) acc += static_cast<double>(qi[t]) * kj[t];
        s(i, j) = static_cast<T>(acc * scale);
      }
    }
    if (logits_out) logits_out->push_back(s);
    softmax_rows_inplace(s);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < dh; ++t) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += static_cast<double>(s(i, j)) * v(j, off + t);
        concat(i, off + t) = static_cast<T>(acc);
      }
    }
    if (cache) cache->probs.push_back(std::move(s));
  }

  Matrix<T> res1 = affine(concat, L.wo, L.bo);
  for (std::size_t i = 0; i < res1.size(); ++i) res1.data()[i] += x.data()[i];
  Matrix<T> xhat1;
  Matrix<T> y1 = layer_norm(res1, L.ln1_gain, L.ln1_bias, cache ? &xhat1 : nullptr,
                            cache ? &cache->ln1 : nullptr);

  Matrix<T> pre = affine(y1, L.w1, L.b1);
  Matrix<T> act = pre;
  for (auto& a : act.values()) a = a > T{0} ? a : T{0};
  Matrix<T> res2 = affine(act, L.w2, L.b2);
  for (std::size_t i = 0; i < res2.size(); ++i) res2.data()[i] += y1.data()[i];
  Matrix<T> xhat2;
  Matrix<T> y2 = layer_norm(res2, L.ln2_gain, L.ln2_bias, cache ? &xhat2 : nullptr,
                            cache ? &cache->ln2 : nullptr);

  if (cache) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
    cache->xhat1 = std::move(xhat1);
    cache->y1 = std::move(y1);
    cache->ffn_pre = std::move(pre);
    cache->ffn_act = std::move(act);
    cache->xhat2 = std::move(xhat2);
  }
  return y2;
}

}  // namespace detail

template <typename T>
EncoderState<T> embed(const EncoderWeights<T>& w, std::span<const Token> tokens) {
  validate_tokens(w.config, tokens);
  const std::size_t D = w.config.d_model;
  Matrix<T> h(tokens.size(), D);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto e = w.token_embedding.row(static_cast<std::size_t>(tokens[i]));
    const auto p = w.position.row(i);
    for (std::size_t c = 0; c < D; ++c) h(i, c) = e[c] + p[c];
  }
  return {std::move(h), 0};
}

// Executes transformer layer `layer_index` on a state that has completed
// exactly the layers before it.
template <typename T>
LayerStep<T> forward_through_layer(const EncoderWeights<T>& w, const EncoderState<T>& state,
                                   std::size_t layer_index, LayerCounter* counter = nullptr) {
  if (layer_index >= w.config.n_layers) {
    fail(ErrorKind::ordering, "layer index ", layer_index, " out of range for ",
         w.config.n_layers, "-layer encoder");
  }
  if (layer_index != state.next_layer) {
    fail(ErrorKind::ordering, "layer ", layer_index, " requested but state expects layer ",
         state.next_layer);
  }
  LayerStep<T> step;
  step.hidden = detail::run_layer(w.config, w.layers[layer_index], state.hidden,
                                  &step.attn_logits, static_cast<detail::LayerCache<T>*>(nullptr));
  step.state = {step.hidden, layer_index + 1};
  if (counter) counter->executed.fetch_add(1, std::memory_order_relaxed);
  return step;
}

template <typename T>
ForwardTrace<T> forward(const EncoderWeights<T>& w, std::span<const Token> tokens,
                        LayerCounter* counter = nullptr) {
  ForwardTrace<T> trace;
  trace.tokens.assign(tokens.begin(), tokens.end());
  EncoderState<T> state = embed(w, tokens);
  trace.hidden.push_back(state.hidden);
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    LayerStep<T> step = forward_through_layer(w, state, l, counter);
    trace.hidden.push_back(std::move(step.hidden));
    trace.attn_logits.push_back(std::move(step.attn_logits));
    state = std::move(step.state);
  }
  return trace;
}

template <typename T>
ForwardTrace<T> forward(const EncoderWeights<T>& w, const TokenSeq& tokens,
                        LayerCounter* counter = nullptr) {
  return forward(w, std::span<const Token>(tokens), counter);
}

// One masked-token training example: the corrupted input plus the original
// ids at the masked positions.
struct MaskedExample {
  TokenSeq input;
  std::vector<std::size_t> positions;
  std::vector<Token> targets;
};

namespace detail {

template <typename T>
void accumulate(Matrix<T>& into, const Matrix<T>& g) {
  for (std::size_t i = 0; i < into.size(); ++i) into.data()[i] += g.data()[i];
}

template <typename T>
void accumulate_colsum(Matrix<T>& bias_grad, const Matrix<T>& g) {
  std::vector<double> s(g.cols(), 0.0);
  for (std::size_t r = 0; r < g.rows(); ++r)
    for (std::size_t c = 0; c < g.cols(); ++c) s[c] += g(r, c);
  for (std::size_t c = 0; c < g.cols(); ++c) bias_grad(0, c) += static_cast<T>(s[c]);
}

// dy -> dx through y = gain * xhat + bias; accumulates gain/bias grads.
template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& xhat, const LnCache& cache,
                              const Matrix<T>& gain, Matrix<T>& dgain, Matrix<T>& dbias) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix<T> dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dgain(0, c) += dy(r, c) * xhat(r, c);
      dbias(0, c) += dy(r, c);
      dxhat[c] = static_cast<double>(dy(r, c)) * gain(0, c);
      m1 += dxhat[c];
      m2 += dxhat[c] * xhat(r, c);
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) {
      dx(r, c) = static_cast<T>(cache.inv_std[r] * (dxhat[c] - m1 - xhat(r, c) * m2));
    }
  }
  return dx;
}

template <typename T>
Matrix<T> layer_backward(const EncoderConfig& c, const LayerWeights<T>& L, LayerWeights<T>& G,
                         const LayerCache<T>& cache, const Matrix<T>& dy2) {
  const std::size_t n = dy2.rows();
  const std::size_t H = c.n_heads, dh = c.d_head(), D = c.d_model;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // feed-forward block
  Matrix<T> dres2 = layer_norm_backward(dy2, cache.xhat2, cache.ln2, L.ln2_gain, G.ln2_gain,
                                        G.ln2_bias);
  accumulate(G.w2, matmul_tn(cache.ffn_act, dres2));
  accumulate_colsum(G.b2, dres2);
  Matrix<T> dpre = matmul_nt(dres2, L.w2);
  for (std::size_t i = 0; i < dpre.size(); ++i) {
    if (!(cache.ffn_pre.data()[i] > T{0})) dpre.data()[i] = T{0};
  }
  accumulate(G.w1, matmul_tn(cache.y1, dpre));
  accumulate_colsum(G.b1, dpre);
  Matrix<T> dy1 = matmul_nt(dpre, L.w1);
  accumulate(dy1, dres2);

  // attention block
  Matrix<T> dres1 = layer_norm_backward(dy1, cache.xhat1, cache.ln1, L.ln1_gain, G.ln1_gain,
                                        G.ln1_bias);
  accumulate(G.wo, matmul_tn(cache.concat, dres1));
  accumulate_colsum(G.bo, dres1);
  Matrix<T> dconcat = matmul_nt(dres1, L.wo);

  Matrix<T> dq(n, D), dk(n, D), dv(n, D);
  std::vector<double> dp(n);
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t off = h * dh;
    const Matrix<T>& p = cache.probs[h];
    for (std::size_t i = 0; i < n; ++i) {
      // dP(i, j) = dO(i) . V(j)
      double rowdot = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t t = 0; t < dh; ++t)
          acc += static_cast<double>(dconcat(i, off + t)) * cache.v(j, off + t);
        dp[j] = acc;
        rowdot += acc * p(i, j);
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double pij = p(i, j);
        // dV(j) += P(i, j) dO(i)
        for (std::size_t t = 0; t < dh; ++t) dv(j, off + t) += static_cast<T>(pij * dconcat(i, off + t));
        const double ds = pij * (dp[j] - rowdot) * scale;
        for (std::size_t t = 0; t < dh; ++t) {
          dq(i, off + t) += static_cast<T>(ds * cache.k(j, off + t));
          dk(j, off + t) += static_cast<T>(ds * cache.q(i, off + t));
        }
      }
    }
  }

  accumulate(G.wq, matmul_tn(cache.x, dq));
  accumulate_colsum(G.bq, dq);
  accumulate(G.wk, matmul_tn(cache.x, dk));
  accumulate_colsum(G.bk, dk);
  accumulate(G.wv, matmul_tn(cache.x, dv));
  accumulate_colsum(G.bv, dv);

  Matrix<T> dx = dres1;
  accumulate(dx, matmul_nt(dq, L.wq));
  accumulate(dx, matmul_nt(dk, L.wk));
  accumulate(dx, matmul_nt(dv, L.wv));
  return dx;
}

inline void check_example(const EncoderConfig& c, const MaskedExample& ex) {
  if (ex.positions.empty() || ex.positions.size() != ex.targets.size()) {
    fail(ErrorKind::invalid_argument, "masked example needs matching non-empty positions/targets");
  }
  for (std::size_t i = 0; i < ex.positions.size(); ++i) {
    if (ex.positions[i] >= ex.input.size()) {
      fail(ErrorKind::invalid_argument, "masked position ", ex.positions[i], " out of range");
    }
    if (ex.targets[i] < 0 || static_cast<std::size_t>(ex.targets[i]) >= c.vocab_size) {
      fail(ErrorKind::invalid_argument, "target id ", ex.targets[i], " outside vocabulary");
    }
  }
}

// Sum of cross-entropies over the example's masked positions. When grads is
// non-null, accumulates d(sum * loss_scale)/dparams into it.
template <typename T>
double masked_loss_one(const EncoderWeights<T>& w, const MaskedExample& ex,
                       EncoderWeights<T>* grads, double loss_scale) {
  const auto& c = w.config;
  check_example(c, ex);
  EncoderState<T> state = embed(w, std::span<const Token>(ex.input));
  std::vector<LayerCache<T>> caches(grads ? c.n_layers : 0);
  Matrix<T> h = std::move(state.hidden);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    h = run_layer(c, w.layers[l], h, static_cast<std::vector<Matrix<T>>*>(nullptr),
                  grads ? &caches[l] : nullptr);
  }

  const std::size_t m = ex.positions.size();
  Matrix<T> sel(m, c.d_model);
  for (std::size_t i = 0; i < m; ++i) {
    const auto src = h.row(ex.positions[i]);
    std::copy(src.begin(), src.end(), sel.row(i).begin());
  }
  Matrix<T> logits = detail::affine(sel, w.mlm_w, w.mlm_b);
  double loss = 0.0;
  Matrix<T> dlogits(m, c.vocab_size);
  for (std::size_t i = 0; i < m; ++i) {
    const auto row = logits.row(i);
    double mx = row[0];
    for (T v : row) mx = std::max<double>(mx, v);
    double sum = 0.0;
    for (T v : row) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    const auto tgt = static_cast<std::size_t>(ex.targets[i]);
    loss += lse - row[tgt];
    if (grads) {
      for (std::size_t k = 0; k < row.size(); ++k) {
        const double pk = std::exp(row[k] - lse);
        dlogits(i, k) = static_cast<T>((pk - (k == tgt ? 1.0 : 0.0)) * loss_scale);
      }
    }
  }
  if (!grads) return loss;

  accumulate(grads->mlm_w, matmul_tn(sel, dlogits));
  accumulate_colsum(grads->mlm_b, dlogits);
  Matrix<T> dsel = matmul_nt(dlogits, w.mlm_w);
  Matrix<T> dh(h.rows(), h.cols());
  for (std::size_t i = 0; i < m; ++i) {
    auto dst = dh.row(ex.positions[i]);
    const auto src = dsel.row(i);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
  }
  for (std::size_t l = c.n_layers; l-- > 0;) {
    dh = layer_backward(c, w.layers[l], grads->layers[l], caches[l], dh);
  }
  for (std::size_t i = 0; i < ex.input.size(); ++i) {
    auto de = grads->token_embedding.row(static_cast<std::size_t>(ex.input[i]));
    const auto src = dh.row(i);
    for (std::size_t k = 0; k < de.size(); ++k) de[k] += src[k];
    if (c.positional_scheme == PositionalScheme::learned) {
      auto dp = grads->position.row(i);
      for (std::size_t k = 0; k < dp.size(); ++k) dp[k] += src[k];
    }
  }
  return loss;
}

inline std::size_t count_masked(std::span<const MaskedExample> batch) {
  std::size_t n = 0;
  for (const auto& ex : batch) n += ex.positions.size();
  if (n == 0) fail(ErrorKind::invalid_argument, "batch has no masked positions");
  return n;
}

}  // namespace detail

// Mean cross-entropy over every masked position in the batch.
template <typename T>
double masked_token_loss(const EncoderWeights<T>& w, std::span<const MaskedExample> batch) {
  const double n = static_cast<double>(detail::count_masked(batch));
  double total = 0.0;
  for (const auto& ex : batch) total += detail::masked_loss_one(w, ex, static_cast<EncoderWeights<T>*>(nullptr), 1.0);
  return total / n;
}

// Loss as above plus its gradient with respect to every parameter.
template <typename T>
std::pair<double, EncoderWeights<T>> masked_token_loss_and_grad(
    const EncoderWeights<T>& w, std::span<const MaskedExample> batch) {
  const double n = static_cast<double>(detail::count_masked(batch));
  EncoderWeights<T> g = zeros_like(w);
  double total = 0.0;
  for (const auto& ex : batch) total += detail::masked_loss_one(w, ex, &g, 1.0 / n);
  return {total / n, std::move(g)};
}

struct PretrainOptions {
  std::size_t steps = 500;
  double mask_rate = 0.15;
  double step_size = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 8;
};

inline constexpr Token kPadToken = 20;
inline constexpr Token kMaskToken = 21;

// Replaces each position with the mask token with probability mask_rate;
// at least one position is always masked.
inline MaskedExample make_masked_example(const TokenSeq& tokens, double mask_rate, Rng& rng,
                                         Token mask_token = kMaskToken) {
  MaskedExample ex;
  ex.input = tokens;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (rng.bernoulli(mask_rate)) ex.positions.push_back(i);
  }
  if (ex.positions.empty()) ex.positions.push_back(static_cast<std::size_t>(rng.below(tokens.size())));
  for (auto p : ex.positions) {
    ex.targets.push_back(tokens[p]);
    ex.input[p] = mask_token;
  }
  return ex;
}

// Deterministic masked copy of a corpus, used to compare losses before and
// after training on identical masks.
inline std::vector<MaskedExample> fixed_masks(const std::vector<TokenSeq>& corpus, double mask_rate,
                                              std::uint64_t seed) {
  Rng rng(derive_seed(seed, "eval-mask"));
  std::vector<MaskedExample> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) out.push_back(make_masked_example(s, mask_rate, rng));
  return out;
}

struct PretrainLog {
  std::vector<double> step_losses;
};

// Masked-token pretraining with momentum SGD. The batch order and masks come
// from config.seed; identical inputs give bit-identical weights.
template <typename T = float>
EncoderWeights<T> mlm_pretrain(const std::vector<TokenSeq>& corpus, const EncoderConfig& config,
                               const PretrainOptions& opt, PretrainLog* log = nullptr) {
  config.validate();
  if (corpus.empty()) fail(ErrorKind::data, "pretraining corpus is empty");
  if (!(opt.mask_rate > 0.0 && opt.mask_rate < 1.0)) {
    fail(ErrorKind::config, "mask_rate must lie in (0, 1), got ", opt.mask_rate);
  }
  if (opt.batch_size == 0) fail(ErrorKind::config, "pretrain batch_size must be >= 1");
  for (const auto& s : corpus) validate_tokens(config, s);

  EncoderWeights<T> w = init_weights<T>(config);
  if (opt.steps == 0) return w;

  EncoderWeights<T> velocity = zeros_like(w);
  Rng order_rng(derive_seed(config.seed, "pretrain-order"));
  Rng mask_rng(derive_seed(config.seed, "pretrain-mask"));
  std::vector<std::size_t> order(corpus.size());
  std::size_t cursor = order.size();

  std::vector<MaskedExample> batch;
  for (std::size_t step = 0; step < opt.steps; ++step) {
    batch.clear();
    for (std::size_t b = 0; b < opt.batch_size; ++b) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        order_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(make_masked_example(corpus[order[cursor++]], opt.mask_rate, mask_rng));
    }
    auto [loss, grad] = masked_token_loss_and_grad(w, std::span<const MaskedExample>(batch));
    if (log) log->step_losses.push_back(loss);
    visit_parameter_pairs(velocity, grad, [&](const std::string&, Matrix<T>& vel, Matrix<T>& g) {
      for (std::size_t i = 0; i < vel.size(); ++i) {
        vel.data()[i] = static_cast<T>(opt.momentum * vel.data()[i] + g.data()[i]);
      }
    });
    visit_parameter_pairs(w, velocity, [&](const std::string&, Matrix<T>& p, Matrix<T>& vel) {
      for (std::size_t i = 0; i < p.size(); ++i) {
        p.data()[i] = static_cast<T>(p.data()[i] - opt.step_size * vel.data()[i]);
      }
    });
  }
  return w;
}

template <typename To, typename From>
EncoderWeights<To> cast_weights(const EncoderWeights<From>& w) {
  EncoderWeights<To> out = detail::zero_weights<To>(w.config);
  visit_parameter_pairs(out, w, [](const std::string&, Matrix<To>& dst, const Matrix<From>& src) {
    dst = src.template cast<To>();
  });
  return out;
}

}  // namespace attnexit

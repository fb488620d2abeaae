#pragma once

// Additive decomposition of an attention-logit grid
//
//   logits(i, j) ~ a(i - j) + b(j) + c(i)
//
// fit by least squares over every (query i, key j) pair. a is the positional
// component over relative offsets, b the key (semantic) component and c the
// query component. The positional:semantic ratio is var(a) / var(b).
//
// The additive model is not identified: constants can move between the three
// components, and so can a linear trend (a += s*d, b += s*j, c -= s*i leaves
// every fitted value unchanged). Results are reported in a canonical form:
// the trend is chosen so a has no linear component in the offset, then b and
// c are mean-centred with all constant mass carried by a.

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "attnexit/csv.hpp"
#include "attnexit/dump.hpp"
#include "attnexit/encoder.hpp"
#include "attnexit/error.hpp"
#include "attnexit/parallel.hpp"
#include "attnexit/tensor.hpp"

namespace attnexit {

enum class RatioKind { finite, zero_over_zero, infinite };

inline const char* to_string(RatioKind k) {
  switch (k) {
    case RatioKind::finite: return "finite";
    case RatioKind::zero_over_zero: return "zero_over_zero";
    case RatioKind::infinite: return "infinite";
  }
  return "?";
}

inline RatioKind ratio_kind_from_string(const std::string& s) {
  if (s == "finite") return RatioKind::finite;
  if (s == "zero_over_zero") return RatioKind::zero_over_zero;
  if (s == "infinite") return RatioKind::infinite;
  fail(ErrorKind::data, "unknown ratio_state '", s, "'");
}

struct RatioState {
  RatioKind kind = RatioKind::zero_over_zero;
  double value = 0.0;  // meaningful only when kind == finite

  bool is_finite() const { return kind == RatioKind::finite; }
  friend bool operator==(const RatioState&, const RatioState&) = default;
};

inline constexpr double kRatioEpsilon = 1e-12;

inline RatioState ratio_of(double var_pos, double var_sem) {
  if (var_sem > kRatioEpsilon) return {RatioKind::finite, var_pos / var_sem};
  if (var_pos > kRatioEpsilon) return {RatioKind::infinite, 0.0};
  return {RatioKind::zero_over_zero, 0.0};
}

struct BackfitOptions {
  double tolerance = 1e-10;
  std::size_t max_iterations = 500;
};

struct DecompositionResult {
  std::size_t seq_len = 0;
  std::vector<double> a;  // index (i - j) + (L - 1)
  std::vector<double> b;  // key position j
  std::vector<double> c;  // query position i
  Matrix<double> residual;
  double var_pos = 0.0;
  double var_sem = 0.0;
  RatioState ratio;
  std::optional<double> recon_corr;  // nullopt when undefined
  std::size_t iterations = 0;
  bool converged = false;

  double positional(std::ptrdiff_t offset) const {
    return a[static_cast<std::size_t>(offset + static_cast<std::ptrdiff_t>(seq_len) - 1)];
  }

  // a(i - j) + b(j) + c(i), residual excluded.
  double fitted(std::size_t i, std::size_t j) const {
    return a[i + seq_len - 1 - j] + b[j] + c[i];
  }

  Matrix<double> reconstruction() const {
    Matrix<double> r(seq_len, seq_len);
    for (std::size_t i = 0; i < seq_len; ++i)
      for (std::size_t j = 0; j < seq_len; ++j) r(i, j) = fitted(i, j);
    return r;
  }
};

inline RatioState ratio(const DecompositionResult& r) { return ratio_of(r.var_pos, r.var_sem); }

// Pearson correlation between the flattened logits and the a+b+c
// reconstruction; nullopt when either side is constant.
template <typename T>
std::optional<double> reconstruction_correlation(const Matrix<T>& logits,
                                                 const DecompositionResult& r) {
  if (logits.rows() != r.seq_len || logits.cols() != r.seq_len) {
    fail(ErrorKind::invalid_argument, "logits ", shape_str(logits), " do not match decomposition of ",
         shape_str(r.seq_len, r.seq_len));
  }
  const Matrix<double> recon = r.reconstruction();
  try {
    return pearson(logits.values(), recon.values());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::undefined) return std::nullopt;
    throw;
  }
}

template <typename T>
DecompositionResult decompose_head(const Matrix<T>& logits, const BackfitOptions& opt = {}) {
  const std::size_t L = logits.rows();
  if (L != logits.cols()) {
    fail(ErrorKind::invalid_argument, "attention logits must be square, got ", shape_str(logits));
  }
  if (L < 2) fail(ErrorKind::invalid_argument, "decomposition needs L >= 2, got L = ", L);
  if (!logits.all_finite()) fail(ErrorKind::invalid_argument, "attention logits contain non-finite values");

  Matrix<double> w = logits.template cast<double>();
  const std::size_t nd = 2 * L - 1;
  std::vector<double> a(nd, 0.0), b(L, 0.0), c(L, 0.0);
  std::vector<double> diag_sum(nd), col_sum(L), row_sum(L);

  DecompositionResult r;
  r.seq_len = L;
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    double change = 0.0;

    // a(d): mean over the diagonal i - j = d
    std::fill(diag_sum.begin(), diag_sum.end(), 0.0);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) diag_sum[i + L - 1 - j] += w(i, j) - b[j] - c[i];
    for (std::size_t k = 0; k < nd; ++k) {
      const std::size_t count = L - (k < L ? L - 1 - k : k - (L - 1));
      const double v = diag_sum[k] / static_cast<double>(count);
      change = std::max(change, std::abs(v - a[k]));
      a[k] = v;
    }

    // b(j): mean over column j
    std::fill(col_sum.begin(), col_sum.end(), 0.0);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) col_sum[j] += w(i, j) - a[i + L - 1 - j] - c[i];
    for (std::size_t j = 0; j < L; ++j) {
      const double v = col_sum[j] / static_cast<double>(L);
      change = std::max(change, std::abs(v - b[j]));
      b[j] = v;
    }

    // c(i): mean over row i
    std::fill(row_sum.begin(), row_sum.end(), 0.0);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) row_sum[i] += w(i, j) - a[i + L - 1 - j] - b[j];
    for (std::size_t i = 0; i < L; ++i) {
      const double v = row_sum[i] / static_cast<double>(L);
      change = std::max(change, std::abs(v - c[i]));
      c[i] = v;
    }

    r.iterations = it + 1;
    if (change < opt.tolerance) {
      r.converged = true;
      break;
    }
  }

  // Canonical form: remove the linear trend of a over offsets, then centre b, c.
  {
    double sdd = 0.0, sad = 0.0;
    const double abar = mean(a);
    for (std::size_t k = 0; k < nd; ++k) {
      const double d = static_cast<double>(k) - static_cast<double>(L - 1);
      sdd += d * d;
      sad += (a[k] - abar) * d;
    }
    const double slope = sad / sdd;
    for (std::size_t k = 0; k < nd; ++k) a[k] -= slope * (static_cast<double>(k) - static_cast<double>(L - 1));
    for (std::size_t j = 0; j < L; ++j) b[j] -= slope * static_cast<double>(j);
    for (std::size_t i = 0; i < L; ++i) c[i] += slope * static_cast<double>(i);

    const double mb = mean(b), mc = mean(c);
    for (auto& v : b) v -= mb;
    for (auto& v : c) v -= mc;
    for (auto& v : a) v += mb + mc;
  }

  r.a = std::move(a);
  r.b = std::move(b);
  r.c = std::move(c);
  r.residual = Matrix<double>(L, L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j) r.residual(i, j) = w(i, j) - r.fitted(i, j);
  r.var_pos = variance(r.a);
  r.var_sem = variance(r.b);
  r.ratio = ratio_of(r.var_pos, r.var_sem);
  r.recon_corr = reconstruction_correlation(w, r);
  return r;
}

struct HeadDecomposition {
  std::size_t layer = 0;
  std::size_t head = 0;
  DecompositionResult result;
};

// Attention logits indexed [layer][head].
template <typename T>
using LogitStack = std::vector<std::vector<Matrix<T>>>;

template <typename T>
std::vector<HeadDecomposition> decompose_logits(const LogitStack<T>& logits, std::size_t threads = 1,
                                                const BackfitOptions& opt = {}) {
  std::vector<std::pair<std::size_t, std::size_t>> slots;
  for (std::size_t l = 0; l < logits.size(); ++l)
    for (std::size_t h = 0; h < logits[l].size(); ++h) slots.emplace_back(l, h);
  std::vector<HeadDecomposition> out(slots.size());
  parallel_for(slots.size(), threads, [&](std::size_t k) {
    const auto [l, h] = slots[k];
    out[k] = {l, h, decompose_head(logits[l][h], opt)};
  });
  return out;
}

// One result per (layer, head), layer-major.
template <typename T>
std::vector<HeadDecomposition> decompose_trace(const ForwardTrace<T>& trace, std::size_t threads = 1,
                                               const BackfitOptions& opt = {}) {
  return decompose_logits(trace.attn_logits, threads, opt);
}

// (n_layers, n_heads, L, L) dump of a trace's attention logits.
template <typename T>
TensorDump attention_dump(const ForwardTrace<T>& trace, const std::string& model_name,
                          const std::string& sequence_id) {
  TensorDump d;
  const std::size_t L = trace.seq_len();
  d.dims = {trace.n_layers(), trace.n_heads(), L, L};
  d.payload.reserve(d.element_count());
  for (const auto& layer : trace.attn_logits)
    for (const auto& head : layer)
      for (T v : head.values()) d.payload.push_back(static_cast<float>(v));
  DumpManifest m;
  m.model_name = model_name;
  m.n_layers = trace.n_layers();
  m.n_heads = trace.n_heads();
  m.sequences = {{sequence_id, L}};
  m.attributes["logit_source"] = "raw_logits";
  d.manifest = std::move(m);
  return d;
}

inline LogitStack<float> logits_from_dump(const TensorDump& d) {
  if (d.dims.size() != 4 || d.dims[2] != d.dims[3]) {
    fail(ErrorKind::data, "attention dump must have shape (layers, heads, L, L)");
  }
  const std::size_t nl = d.dims[0], nh = d.dims[1], L = d.dims[2];
  LogitStack<float> out(nl);
  std::size_t off = 0;
  for (std::size_t l = 0; l < nl; ++l) {
    for (std::size_t h = 0; h < nh; ++h) {
      std::vector<float> block(d.payload.begin() + static_cast<std::ptrdiff_t>(off),
                               d.payload.begin() + static_cast<std::ptrdiff_t>(off + L * L));
      out[l].emplace_back(L, L, std::move(block));
      off += L * L;
    }
  }
  return out;
}

// One row of the ratio table.
struct RatioRow {
  std::string input_id;
  std::size_t layer = 0;
  std::size_t head = 0;
  double var_pos = 0.0;
  double var_sem = 0.0;
  RatioState ratio;
  std::optional<double> recon_corr;
};

inline const std::vector<std::string>& ratio_table_header() {
  static const std::vector<std::string> h = {"input_id", "layer",       "head",       "var_pos",
                                             "var_sem",  "ratio",       "log10_ratio", "recon_corr",
                                             "ratio_state"};
  return h;
}

inline RatioRow make_ratio_row(const std::string& input_id, const HeadDecomposition& hd) {
  return {input_id,          hd.layer,          hd.head, hd.result.var_pos, hd.result.var_sem,
          hd.result.ratio, hd.result.recon_corr};
}

inline void write_ratio_table(const std::filesystem::path& path, const std::vector<RatioRow>& rows) {
  csv::Writer w(path, ratio_table_header());
  for (const auto& r : rows) {
    const bool fin = r.ratio.is_finite();
    const bool pos = fin && r.ratio.value > 0.0;
    w.row({r.input_id, std::to_string(r.layer), std::to_string(r.head), csv::fmt(r.var_pos),
           csv::fmt(r.var_sem),
           fin ? csv::fmt(r.ratio.value) : (r.ratio.kind == RatioKind::infinite ? "inf" : "nan"),
           pos ? csv::fmt(std::log10(r.ratio.value)) : "nan",
           r.recon_corr ? csv::fmt(*r.recon_corr) : "nan", to_string(r.ratio.kind)});
  }
}

inline std::vector<RatioRow> read_ratio_table(const std::filesystem::path& path) {
  const csv::Table t = csv::read(path);
  const std::size_t ci = t.column("input_id"), cl = t.column("layer"), ch = t.column("head"),
                    cp = t.column("var_pos"), cs = t.column("var_sem"), cr = t.column("ratio"),
                    cc = t.column("recon_corr"), ck = t.column("ratio_state");
  std::vector<RatioRow> rows;
  rows.reserve(t.rows.size());
  for (std::size_t k = 0; k < t.rows.size(); ++k) {
    const auto& f = t.rows[k];
    const std::size_t rowno = k + 2;
    RatioRow r;
    r.input_id = f[ci];
    r.layer = csv::parse_int<std::size_t>(f[cl], rowno);
    r.head = csv::parse_int<std::size_t>(f[ch], rowno);
    r.var_pos = csv::parse_double(f[cp], rowno);
    r.var_sem = csv::parse_double(f[cs], rowno);
    r.ratio.kind = ratio_kind_from_string(f[ck]);
    if (r.ratio.is_finite()) r.ratio.value = csv::parse_double(f[cr], rowno);
    const double corr = csv::parse_double(f[cc], rowno);
    if (!std::isnan(corr)) r.recon_corr = corr;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace attnexit

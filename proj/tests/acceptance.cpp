// Prints one PASS/FAIL line per acceptance criterion; exit status is
// nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "attnexit/decomposition.hpp"
#include "attnexit/early_exit.hpp"
#include "attnexit/encoder.hpp"
#include "attnexit/metrics.hpp"
#include "attnexit/random.hpp"
#include "attnexit/variance.hpp"
#include "oracles.hpp"

using namespace attnexit;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <typename... Args>
std::string str(const Args&... args) {
  std::ostringstream s;
  s.precision(10);
  (s << ... << args);
  return s.str();
}

double max_abs_diff(const Matrix<double>& x, const Matrix<double>& y) {
  double m = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(x.data()[i] - y.data()[i]));
  return m;
}

double frobenius(const Matrix<double>& m) {
  double s = 0.0;
  for (double v : m.values()) s += v * v;
  return std::sqrt(s);
}

std::vector<double> normals(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

// Zero mean and zero least-squares slope over offsets -(L-1)..(L-1).
std::vector<double> detrended_offsets(std::vector<double> a) {
  const double n = static_cast<double>(a.size());
  const double centre = (n - 1.0) / 2.0;
  double mean_a = std::accumulate(a.begin(), a.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(k) - centre;
    sxy += (a[k] - mean_a) * d;
    sxx += d * d;
  }
  for (std::size_t k = 0; k < a.size(); ++k) a[k] -= mean_a + sxy / sxx * (static_cast<double>(k) - centre);
  return a;
}

std::vector<double> centred(std::vector<double> v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  for (auto& x : v) x -= m;
  return v;
}

std::vector<double> scaled_to_variance(std::vector<double> v, double target) {
  const double f = std::sqrt(target / oracle::two_pass_variance(v));
  for (auto& x : v) x *= f;
  return v;
}

Matrix<double> grid(std::size_t L, const std::vector<double>& a, const std::vector<double>& b,
                    const std::vector<double>& c) {
  Matrix<double> w(L, L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < L; ++j)
      w(i, j) = (a.empty() ? 0.0 : a[i + L - 1 - j]) + (b.empty() ? 0.0 : b[j]) + (c.empty() ? 0.0 : c[i]);
  return w;
}

Outcome decomposition_oracle_equivalence() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(derive_seed(1000, seed));
    const std::size_t L = 4 + seed % 7;
    Matrix<double> w(L, L);
    for (auto& v : w.values()) v = rng.normal(0.0, 2.0);
    worst = std::max(worst, max_abs_diff(decompose_head(w).reconstruction(), oracle::dense_decomposition(w).fitted));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 10.0, str("max |backfit - dense| = ", worst, " over 50 grids, ", secs, " s")};
}

Outcome exact_recovery() {
  double worst_resid = 0.0, worst_corr = 1.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(derive_seed(2000, seed));
    const std::size_t L = 4 + seed % 13;
    const Matrix<double> w = grid(L, normals(rng, 2 * L - 1), normals(rng, L), normals(rng, L));
    const auto r = decompose_head(w);
    worst_resid = std::max(worst_resid, frobenius(r.residual) / frobenius(w));
    worst_corr = std::min(worst_corr, r.recon_corr.value_or(0.0));
  }
  return {worst_resid <= 1e-5 && worst_corr >= 1.0 - 1e-6,
          str("max residual/input norm = ", worst_resid, ", min recon corr = ", worst_corr)};
}

Outcome ratio_discrimination() {
  bool ok = true;
  std::ostringstream d;
  d.precision(6);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(derive_seed(3000, seed));
    const std::size_t L = 16;
    const auto pos = decompose_head(grid(L, detrended_offsets(normals(rng, 2 * L - 1)), {}, {}));
    ok &= pos.ratio.kind == RatioKind::infinite;
    const auto sem = decompose_head(grid(L, {}, normals(rng, L), {}));
    ok &= sem.ratio.kind == RatioKind::finite && sem.ratio.value < 1e-6;
    if (seed == 0) d << "positional: " << to_string(pos.ratio.kind) << "; semantic ratio " << sem.ratio.value << "; ";
  }
  double lo = 1e300, hi = -1e300;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(3100, seed));
    const std::size_t L = 16;
    const auto a = scaled_to_variance(detrended_offsets(normals(rng, 2 * L - 1)), 4.0);
    const auto b = scaled_to_variance(centred(normals(rng, L)), 1.0);
    const auto c = centred(normals(rng, L));
    Matrix<double> w = grid(L, a, b, c);
    for (auto& v : w.values()) v += rng.normal(0.0, 0.05);
    const auto r = decompose_head(w);
    const double ratio = r.ratio.kind == RatioKind::finite ? r.ratio.value : std::nan("");
    lo = std::min(lo, ratio);
    hi = std::max(hi, ratio);
    ok &= ratio >= 3.6 && ratio <= 4.4;
  }
  d << "planted 4.0 recovered in [" << lo << ", " << hi << "] over 20 seeds";
  return {ok, d.str()};
}

EncoderConfig toy_encoder(std::uint64_t seed) {
  EncoderConfig c;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_model = 64;
  c.d_ff = 128;
  c.max_seq_len = 64;
  c.seed = seed;
  return c;
}

SyntheticSpec motif_spec(std::uint64_t seed, std::size_t n) {
  SyntheticSpec s;
  s.task = {TaskKind::multi_class, 4, "motif"};
  s.n_items = n;
  s.seed = seed;
  s.motif_seed = derive_seed(seed, "motifs");
  return s;
}

std::vector<TokenSeq> seqs_of(const LabeledDataset& d) {
  std::vector<TokenSeq> out;
  for (const auto& r : d.records) out.push_back(r.tokens);
  return out;
}

const std::vector<double> kThresholds = {0.0, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.99, 1.0};

// 200-item sweep on an unpretrained encoder with briefly trained heads.
struct SweepBench {
  EncoderWeights<float> w;
  HeadStack heads;
  LabeledDataset data;
  std::vector<SweepPoint> last, mcl;
  std::vector<SweepItemLog> last_logs, mcl_logs;
  double seconds = 0.0;
};

const SweepBench& sweep_bench() {
  static const SweepBench bench = [] {
    const auto t0 = Clock::now();
    SweepBench b;
    b.w = init_weights(toy_encoder(derive_seed(4000, "encoder")));
    auto train_spec = motif_spec(derive_seed(4000, "train"), 200);
    auto test_spec = motif_spec(derive_seed(4000, "test"), 200);
    train_spec.motif_seed = test_spec.motif_seed = derive_seed(4000, "motifs");
    const auto train = generate_synthetic(train_spec);
    b.data = generate_synthetic(test_spec);
    HeadHyper hyper;
    hyper.epochs = 5;
    hyper.seed = derive_seed(4000, "heads");
    b.heads = train_heads(extract_features(b.w, seqs_of(train), train.task, Pooling::mean), train.labels,
                          train.task, Pooling::mean, hyper);
    b.last = threshold_sweep(b.w, b.heads, b.data, kThresholds, Fallback::last_layer, 1, &b.last_logs);
    b.mcl = threshold_sweep(b.w, b.heads, b.data, kThresholds, Fallback::most_confident_layer, 1, &b.mcl_logs);
    b.seconds = seconds_since(t0);
    return b;
  }();
  return bench;
}

Outcome early_exit_boundaries() {
  const auto t0 = Clock::now();
  const SweepBench& b = sweep_bench();
  bool ok = b.last.front().mean_computed_layers == 1.0 && b.mcl.front().mean_computed_layers == 1.0;
  const auto preds = layer_predictions(b.w, b.heads, b.data.records);
  std::size_t last_mismatch = 0, mcl_mismatch = 0;
  for (std::size_t i = 0; i < b.data.size(); ++i) {
    if (!(b.last_logs.back().results[i].prediction == preds[i].back())) ++last_mismatch;
    std::size_t best = 0;
    double best_conf = confidence_from_probs(b.data.task, preds[i][0]);
    for (std::size_t l = 1; l < preds[i].size(); ++l) {
      const double c = confidence_from_probs(b.data.task, preds[i][l]);
      if (c > best_conf) {
        best_conf = c;
        best = l;
      }
    }
    const auto& r = b.mcl_logs.back().results[i];
    if (!(r.prediction == preds[i][best]) || r.exit_layer != best) ++mcl_mismatch;
  }
  ok &= last_mismatch == 0 && mcl_mismatch == 0;
  const double secs = b.seconds + seconds_since(t0);
  ok &= secs < 120.0;
  return {ok, str("t=0 mean layers ", b.last.front().mean_computed_layers, "; t=1 last_layer mismatches ",
                  last_mismatch, "/200; t=1 most_confident mismatches ", mcl_mismatch, "/200; ", secs, " s")};
}

Outcome monotone_efficiency() {
  const SweepBench& b = sweep_bench();
  bool ok = b.last.size() >= 8;
  std::ostringstream d;
  d << "mean layers:";
  for (const auto* pts : {&b.last, &b.mcl})
    for (std::size_t k = 0; k < pts->size(); ++k) {
      if (k > 0) ok &= (*pts)[k].mean_computed_layers >= (*pts)[k - 1].mean_computed_layers;
      if (pts == &b.last) d << " " << (*pts)[k].mean_computed_layers;
    }
  return {ok, d.str()};
}

Outcome laziness() {
  const SweepBench& b = sweep_bench();
  std::size_t checked = 0, bad = 0;
  for (const auto* logs : {&b.last_logs, &b.mcl_logs})
    for (const auto& log : *logs)
      for (std::size_t i = 0; i < log.results.size(); ++i) {
        ++checked;
        bad += log.layer_runs[i] != log.results[i].computed_layers;
      }
  return {bad == 0, str(bad, " mismatches over ", checked, " item runs")};
}

struct DirectionRun {
  std::vector<SweepPoint> last, mcl;
  EncoderWeights<float> w;
  HeadStack heads;
  LabeledDataset test;
};

DirectionRun direction_run(std::uint64_t seed) {
  DirectionRun r;
  const auto corpus = generate_synthetic(motif_spec(derive_seed(seed, "corpus"), 1000));
  PretrainOptions opt;
  opt.steps = 500;
  r.w = mlm_pretrain(seqs_of(corpus), toy_encoder(derive_seed(seed, "encoder")), opt);
  auto train_spec = motif_spec(derive_seed(seed, "train"), 400);
  auto test_spec = motif_spec(derive_seed(seed, "test"), 200);
  train_spec.motif_seed = test_spec.motif_seed = derive_seed(seed, "motifs");
  const auto train = generate_synthetic(train_spec);
  r.test = generate_synthetic(test_spec);
  HeadHyper hyper;
  hyper.epochs = 30;
  hyper.seed = derive_seed(seed, "heads");
  r.heads = train_heads(extract_features(r.w, seqs_of(train), train.task, Pooling::mean), train.labels, train.task,
                        Pooling::mean, hyper);
  r.last = threshold_sweep(r.w, r.heads, r.test, kThresholds, Fallback::last_layer);
  r.mcl = threshold_sweep(r.w, r.heads, r.test, kThresholds, Fallback::most_confident_layer);
  return r;
}

std::vector<DirectionRun>& direction_runs() {
  static std::vector<DirectionRun> runs = [] {
    std::vector<DirectionRun> out;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) out.push_back(direction_run(seed));
    return out;
  }();
  return runs;
}

Outcome direction_check() {
  std::size_t passing = 0;
  std::ostringstream d;
  d.precision(4);
  for (std::size_t s = 0; s < direction_runs().size(); ++s) {
    const auto& r = direction_runs()[s];
    const double full = r.last.back().metric_value;
    double best = -1.0, best_t = 0.0, best_layers = 0.0;
    for (std::size_t k = 0; k < r.mcl.size(); ++k) {
      const auto& p = r.mcl[k];
      if (p.threshold > 0.0 && p.mean_computed_layers <= 4 * 0.9 && p.metric_value >= full && p.metric_value > best) {
        best = p.metric_value;
        best_t = p.threshold;
        best_layers = p.mean_computed_layers;
      }
    }
    d << (s ? "; " : "") << "seed " << s + 1 << ": full " << full;
    if (best >= 0.0) {
      ++passing;
      d << " vs mcl " << best << " at t=" << best_t << " (" << best_layers << " layers)";
    } else {
      d << " not matched";
    }
  }
  return {passing >= 4, str(passing, "/5 seeds; ", d.str())};
}

Outcome metric_oracles() {
  Rng rng(5000);
  std::size_t f1_bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t items = 1 + rng.below(12);
    const std::size_t classes = 2 + rng.below(4);
    std::vector<std::vector<double>> scores;
    std::vector<Label> labels;
    std::vector<std::set<int>> sets;
    for (std::size_t i = 0; i < items; ++i) {
      std::vector<double> s(classes);
      for (auto& v : s) v = trial % 2 ? rng.uniform() : static_cast<double>(rng.below(5)) / 4.0;
      Label l;
      for (std::size_t c = 0; c < classes; ++c)
        if (rng.bernoulli(0.35)) l.push_back(static_cast<int>(c));
      scores.push_back(s);
      sets.emplace_back(l.begin(), l.end());
      labels.push_back(l);
    }
    if (std::all_of(labels.begin(), labels.end(), [](const Label& l) { return l.empty(); })) {
      labels[0] = {0};
      sets[0] = {0};
    }
    f1_bad += f1_max(scores, labels) != oracle::f1_max_brute(scores, sets);
  }

  const std::vector<double> hand_conf = {0.9, 0.8, 0.2, 0.1}, hand_loss = {1, 0, 0, 1};
  const double hand = excess_aurc(hand_conf, hand_loss);

  std::size_t nonzero = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(20);
    std::vector<double> loss(n), conf(n);
    for (auto& v : loss) v = trial % 2 ? rng.uniform() : static_cast<double>(rng.below(2));
    std::sort(loss.begin(), loss.end());
    for (std::size_t i = 0; i < n; ++i) conf[i] = 1.0 - static_cast<double>(i) / static_cast<double>(n);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    std::vector<double> c2(n), l2(n);
    for (std::size_t i = 0; i < n; ++i) {
      c2[i] = conf[perm[i]];
      l2[i] = loss[perm[i]];
    }
    nonzero += excess_aurc(c2, l2) != 0.0;
  }
  return {f1_bad == 0 && hand == 0.375 && nonzero == 0,
          str("f1_max mismatches ", f1_bad, "/100; 4-item excess AURC ", hand, "; nonzero on optimal ranking ",
              nonzero, "/100")};
}

Outcome walltime_linearity() {
  const auto& r = direction_runs().front();
  std::vector<double> layers, best(kThresholds.size(), 1e300);
  for (int rep = 0; rep < 3; ++rep) {
    const auto pts = threshold_sweep(r.w, r.heads, r.test, kThresholds, Fallback::last_layer, 1);
    for (std::size_t k = 0; k < pts.size(); ++k) {
      best[k] = std::min(best[k], pts[k].walltime_seconds);
      if (rep == 0) layers.push_back(pts[k].mean_computed_layers);
    }
  }
  const double rho = oracle::two_pass_pearson(layers, best);
  return {rho >= 0.95, str("pearson(mean layers, walltime) = ", rho, " over ", layers.size(), " thresholds")};
}

Outcome variance_recovery() {
  bool ok = true;
  std::ostringstream d;
  d.precision(5);
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(derive_seed(6000, seed));
    std::vector<double> layer_fx = normals(rng, 4);
    std::vector<RatioRecord> recs;
    for (std::size_t i = 0; i < 1000; ++i) {
      const std::string id = "in" + std::to_string(i);
      const double off = rng.normal(0.0, 0.5);
      for (std::size_t l = 0; l < 4; ++l)
        for (std::size_t h = 0; h < 4; ++h) recs.push_back({id, l, h, off + layer_fx[l] + rng.normal(0.0, 0.1)});
    }
    const auto rep = estimate_variances(recs, 10, 100, seed);
    const double rel = std::abs(rep.input_dependent.mean - 0.25) / 0.25;
    ok &= rel <= 0.15;
    d << "seed " << seed << " input variance " << rep.input_dependent.mean << " (planted 0.25); ";
  }
  std::vector<RatioRecord> flat;
  for (std::size_t i = 0; i < 1000; ++i)
    for (std::size_t l = 0; l < 4; ++l)
      for (std::size_t h = 0; h < 4; ++h) flat.push_back({"in" + std::to_string(i), l, h, 0.3});
  const auto z = estimate_variances(flat, 10, 100, 1);
  bool zeros = true;
  for (const auto* s : {&z.input_dependent, &z.layer_dependent, &z.head_dependent})
    zeros &= s->mean == 0.0 && s->std == 0.0;
  ok &= zeros;
  d << "constant records all zero: " << (zeros ? "yes" : "no");
  return {ok, d.str()};
}

Outcome gradient_check() {
  EncoderConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.max_seq_len = 16;
  c.seed = 77;
  auto w = init_weights<double>(c);
  Rng rng(78);
  std::vector<MaskedExample> batch;
  for (int b = 0; b < 4; ++b) {
    TokenSeq t(8);
    for (auto& v : t) v = static_cast<Token>(rng.below(20));
    batch.push_back(make_masked_example(t, 0.3, rng));
  }
  const std::span<const MaskedExample> view(batch);
  auto [loss, grad] = masked_token_loss_and_grad(w, view);
  std::vector<std::pair<Matrix<double>*, Matrix<double>*>> tensors;
  visit_parameter_pairs(w, grad, [&](const std::string&, Matrix<double>& p, Matrix<double>& g) {
    tensors.emplace_back(&p, &g);
  });
  Rng pick(79);
  double worst = 0.0;
  int checked = 0, skipped = 0;
  while (checked < 20) {
    auto [p, g] = tensors[pick.below(tensors.size())];
    const std::size_t k = pick.below(p->size());
    const double analytic = g->data()[k], saved = p->data()[k], h = 1e-4;
    p->data()[k] = saved + h;
    const double up = masked_token_loss(w, view);
    p->data()[k] = saved - h;
    const double down = masked_token_loss(w, view);
    p->data()[k] = saved;
    const double numeric = (up - down) / (2 * h);
    if (std::abs(analytic) < 1e-12 && std::abs(numeric) < 1e-9) {
      ++skipped;
      continue;
    }
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(analytic), std::abs(numeric)));
    ++checked;
  }
  return {worst <= 1e-2, str("max relative error ", worst, " over 20 parameters (", skipped,
                             " structurally zero draws redrawn)")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"decomposition oracle equivalence", decomposition_oracle_equivalence},
      {"exact recovery", exact_recovery},
      {"ratio discrimination", ratio_discrimination},
      {"early-exit boundary contracts", early_exit_boundaries},
      {"monotone efficiency", monotone_efficiency},
      {"laziness", laziness},
      {"direction check", direction_check},
      {"metric oracles", metric_oracles},
      {"walltime linearity", walltime_linearity},
      {"variance-analysis recovery", variance_recovery},
      {"gradient check", gradient_check},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s  %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failures, criteria.size());
  return failures ? 1 : 0;
}

#pragma once

#include <chrono>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "attnexit/checkpoint.hpp"
#include "attnexit/csv.hpp"
#include "attnexit/data.hpp"
#include "attnexit/decomposition.hpp"
#include "attnexit/early_exit.hpp"
#include "attnexit/encoder.hpp"
#include "attnexit/error.hpp"
#include "attnexit/heads.hpp"
#include "attnexit/variance.hpp"
#include "run_config.hpp"

namespace attnexit::cli {

enum ExitCode { kOk = 0, kConfigError = 2, kDataError = 3, kRuntimeError = 4 };

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::config:
      return kConfigError;
    case ErrorKind::invalid_argument:
    case ErrorKind::data:
    case ErrorKind::io:
    case ErrorKind::bad_magic:
    case ErrorKind::truncated:
    case ErrorKind::manifest_mismatch:
      return kDataError;
    case ErrorKind::undefined:
    case ErrorKind::ordering:
    case ErrorKind::runtime:
      return kRuntimeError;
  }
  return kRuntimeError;
}

struct Context {
  RunConfig config;
  fs::path out;
  std::ostream* log = &std::cerr;

  std::ostream& info() const { return *log << "attnexit: "; }
};

inline std::vector<TokenSeq> token_seqs(const std::vector<SequenceRecord>& recs) {
  std::vector<TokenSeq> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(r.tokens);
  return out;
}

inline std::vector<SequenceRecord> load_sequences(const Context& ctx, const fs::path& path, const std::string& format) {
  const auto& enc = ctx.config.encoder;
  if (format == "tokens") {
    std::size_t truncated = 0;
    auto recs = read_token_file(path, enc.vocab_size, enc.max_seq_len, &truncated);
    if (truncated) ctx.info() << "warning: " << truncated << " sequences truncated to " << enc.max_seq_len << "\n";
    return recs;
  }
  auto r = read_fasta(path, enc.max_seq_len);
  if (r.unknown_residues) ctx.info() << "warning: " << r.unknown_residues << " unknown residues mapped to unk\n";
  if (r.truncated) ctx.info() << "warning: " << r.truncated << " sequences truncated to " << enc.max_seq_len << "\n";
  return r.records;
}

inline LabeledDataset load_dataset(const Context& ctx, const fs::path& manifest) {
  auto ds = read_dataset(manifest, ctx.config.encoder.max_seq_len);
  ds.validate();
  return ds;
}

inline EncoderWeights<float> load_checked_encoder(const Context& ctx, const fs::path& dir) {
  auto w = load_encoder(dir);
  auto expect = ctx.config.encoder;
  expect.seed = w.config.seed;
  if (!(w.config == expect)) {
    fail(ErrorKind::config, "encoder checkpoint ", dir.string(), " does not match the 'encoder' config section");
  }
  return w;
}

inline void cmd_gen_data(const Context& ctx) {
  const auto& s = ctx.config.synthetic;
  SyntheticSpec spec;
  spec.task = s.task;
  spec.min_len = s.min_len;
  spec.max_len = s.max_len;
  spec.n_motifs = s.n_motifs;
  spec.motif_len = s.motif_len;
  spec.corruption = s.corruption;
  spec.motif_presence = s.motif_presence;
  spec.motif_seed = ctx.config.seed_for("motifs");
  if (s.max_len > ctx.config.encoder.max_seq_len) {
    fail(ErrorKind::config, "synthetic.max_len (", s.max_len, ") exceeds encoder.max_seq_len (",
         ctx.config.encoder.max_seq_len, ")");
  }

  auto make = [&](std::size_t n, std::string_view role, Split split) {
    spec.n_items = n;
    spec.seed = ctx.config.seed_for(role);
    auto ds = generate_synthetic(spec);
    ds.split = split;
    return ds;
  };
  const auto train = make(s.n_train, "train", Split::train);
  const auto test = make(s.n_test, "test", Split::test);
  write_dataset(ctx.out, "train", train);
  write_dataset(ctx.out, "test", test);
  if (s.n_corpus > 0) write_fasta(ctx.out / "corpus.fasta", make(s.n_corpus, "corpus", Split::train).records);

  csv::Writer planted(ctx.out / "planted_motifs.csv", {"split", "item_id", "motif", "start", "corrupted"});
  for (const auto* ds : {&train, &test})
    for (std::size_t i = 0; i < ds->size(); ++i)
      for (const auto& p : ds->planted[i])
        planted.row({to_string(ds->split), ds->records[i].id, std::to_string(p.motif), std::to_string(p.start),
                     p.corrupted ? "1" : "0"});
  ctx.info() << "wrote " << train.size() << " train, " << test.size() << " test, " << s.n_corpus
             << " corpus sequences to " << ctx.out.string() << "\n";
}

inline void cmd_pretrain(const Context& ctx) {
  const auto& corpus_path = require(ctx.config.pretrain.corpus, "pretrain.corpus");
  const auto records = load_sequences(ctx, corpus_path, ctx.config.pretrain.corpus_format);
  PretrainLog log;
  const auto w = mlm_pretrain(token_seqs(records), ctx.config.encoder, ctx.config.pretrain.options, &log);
  save_encoder(w, ctx.out / "encoder");
  csv::Writer losses(ctx.out / "pretrain_loss.csv", {"step", "loss"});
  for (std::size_t k = 0; k < log.step_losses.size(); ++k) losses.row({std::to_string(k), csv::fmt(log.step_losses[k])});
  ctx.info() << "pretrained " << ctx.config.pretrain.options.steps << " steps on " << records.size()
             << " sequences; checkpoint in " << (ctx.out / "encoder").string() << "\n";
}

inline void cmd_train_heads(const Context& ctx) {
  const auto& c = ctx.config;
  const auto w = load_checked_encoder(ctx, require(c.heads.encoder, "heads.encoder"));
  if (c.heads.n_layers && *c.heads.n_layers != w.config.n_layers) {
    fail(ErrorKind::config, "heads.n_layers is ", *c.heads.n_layers, " but the encoder has ", w.config.n_layers,
         " layers");
  }
  const auto train = load_dataset(ctx, require(c.data.train, "data.train"));
  const auto features = extract_features(w, token_seqs(train.records), train.task, c.heads.pooling, c.threads);
  HeadTrainLog log;
  const auto stack = train_heads(features, train.labels, train.task, c.heads.pooling, c.heads.hyper, c.threads, &log);
  save_heads(stack, ctx.out / "heads");
  csv::Writer losses(ctx.out / "head_loss.csv", {"layer", "epoch", "loss"});
  for (std::size_t l = 0; l < log.layer_losses.size(); ++l)
    for (std::size_t e = 0; e < log.layer_losses[l].size(); ++e)
      losses.row({std::to_string(l), std::to_string(e), csv::fmt(log.layer_losses[l][e])});
  ctx.info() << "trained " << stack.n_layers() << " heads on " << train.size() << " items\n";
}

inline std::string format_probs(const ClassProbs& p, std::size_t row) {
  std::string s;
  for (std::size_t c = 0; c < p.cols(); ++c) {
    if (c) s.push_back(' ');
    s += csv::fmt(p(row, c));
  }
  return s;
}

inline void cmd_exit_sweep(const Context& ctx) {
  const auto& c = ctx.config;
  const auto w = load_checked_encoder(ctx, require(c.exit.encoder, "exit.encoder"));
  const auto heads = load_heads(require(c.exit.heads, "exit.heads"));
  const auto test = load_dataset(ctx, require(c.data.test, "data.test"));
  if (heads.n_layers() != w.config.n_layers) {
    fail(ErrorKind::config, "head checkpoint has ", heads.n_layers(), " heads but the encoder has ",
         w.config.n_layers, " layers");
  }

  csv::Writer sweep(ctx.out / "sweep.csv", {"threshold", "fallback", "mean_computed_layers",
                                            "efficiency_improvement_pct", "metric_name", "metric_value",
                                            "walltime_seconds"});
  csv::Writer exits(ctx.out / "exits.csv", {"threshold", "fallback", "item_id", "exit_layer", "computed_layers",
                                            "exited_early", "layer_executions"});
  for (Fallback f : c.exit.fallbacks) {
    std::vector<SweepItemLog> logs;
    const auto points = threshold_sweep(w, heads, test, c.exit.thresholds, f, c.threads, &logs);
    for (std::size_t k = 0; k < points.size(); ++k) {
      const auto& p = points[k];
      sweep.row({csv::fmt(p.threshold), to_string(f), csv::fmt(p.mean_computed_layers), csv::fmt(p.efficiency_pct),
                 p.metric_name, csv::fmt(p.metric_value), csv::fmt(p.walltime_seconds)});
      for (std::size_t i = 0; i < test.size(); ++i) {
        const auto& r = logs[k].results[i];
        exits.row({csv::fmt(p.threshold), to_string(f), test.records[i].id, std::to_string(r.exit_layer),
                   std::to_string(r.computed_layers), r.exited_early ? "1" : "0",
                   std::to_string(logs[k].layer_runs[i])});
      }
    }
  }

  const auto preds = layer_predictions(w, heads, test.records, c.threads);
  const auto scores = score_layers(test.task, preds, test.labels);
  csv::Writer baseline(ctx.out / "baseline.csv", {"layer", "metric_name", "metric_value"});
  csv::Writer calib(ctx.out / "calibration.csv", {"layer", "excess_aurc"});
  for (const auto& s : scores) {
    baseline.row({std::to_string(s.layer), metric_name(test.task.kind), csv::fmt(s.metric_value)});
    calib.row({std::to_string(s.layer), csv::fmt(s.excess_aurc)});
  }
  csv::Writer dump(ctx.out / "predictions.csv", {"item_id", "layer", "position", "confidence", "probs"});
  for (std::size_t i = 0; i < preds.size(); ++i)
    for (std::size_t l = 0; l < preds[i].size(); ++l) {
      const double conf = confidence_from_probs(test.task, preds[i][l]);
      for (std::size_t r = 0; r < preds[i][l].rows(); ++r)
        dump.row({test.records[i].id, std::to_string(l), std::to_string(r), csv::fmt(conf),
                  format_probs(preds[i][l], r)});
    }
  ctx.info() << "swept " << c.exit.thresholds.size() << " thresholds x " << c.exit.fallbacks.size()
             << " fallbacks over " << test.size() << " items\n";
}

inline void cmd_decompose(const Context& ctx) {
  const auto& c = ctx.config;
  const auto& d = c.decompose;
  if (!d.inputs && d.dumps.empty()) {
    fail(ErrorKind::config, "missing required config key 'decompose.inputs' (or 'decompose.dumps')");
  }
  std::vector<RatioRow> rows;
  if (d.inputs) {
    const auto w = load_checked_encoder(ctx, require(d.encoder, "decompose.encoder"));
    auto records = load_sequences(ctx, *d.inputs, "fasta");
    if (d.max_inputs > 0 && records.size() > d.max_inputs) records.resize(d.max_inputs);
    if (d.write_dumps) fs::create_directories(ctx.out / "dumps");
    for (const auto& rec : records) {
      if (rec.tokens.size() < 2) {
        ctx.info() << "warning: skipping '" << rec.id << "' (shorter than 2 tokens)\n";
        continue;
      }
      const auto trace = forward(w, rec.tokens);
      if (d.write_dumps) write_dump(attention_dump(trace, "attnexit", rec.id), ctx.out / "dumps" / (rec.id + ".atd"));
      for (const auto& hd : decompose_trace(trace, c.threads)) rows.push_back(make_ratio_row(rec.id, hd));
    }
  }
  for (const auto& path : d.dumps) {
    const auto dump = read_dump(path);
    if (!dump.manifest) fail(ErrorKind::data, path.string(), ": attention dump has no manifest");
    const std::string id = dump.manifest->sequences.at(0).id;
    for (const auto& hd : decompose_logits(logits_from_dump(dump), c.threads)) rows.push_back(make_ratio_row(id, hd));
  }
  write_ratio_table(ctx.out / "ratios.csv", rows);
  std::size_t degenerate = 0;
  for (const auto& r : rows) degenerate += r.ratio.kind != RatioKind::finite;
  ctx.info() << "decomposed " << rows.size() << " heads (" << degenerate << " with non-finite ratio)\n";
}

inline void cmd_variance_report(const Context& ctx) {
  const auto& v = ctx.config.variance;
  const auto set = records_from_rows(read_ratio_table(require(v.ratios, "variance.ratios")));
  const auto report =
      estimate_variances(set.records, v.n_subsets, v.subset_size, ctx.config.seed_for("variance"), set.excluded);
  write_text(ctx.out / "variance_report.json", to_json(report).dump(2) + "\n");
  ctx.info() << "variance report over " << v.n_subsets << " x " << v.subset_size << " inputs; excluded "
             << set.excluded << " heads\n";
}

inline void cmd_heatmap(const Context& ctx) {
  const auto& h = ctx.config.heatmap;
  const auto set = records_from_rows(read_ratio_table(require(h.ratios, "heatmap.ratios")));
  write_histogram(ctx.out / "heatmap.csv", heatmap_bins(set.records, h.n_bins, h.lo, h.hi));
  ctx.info() << "binned " << set.records.size() << " heads; excluded " << set.excluded << "\n";
}

inline nlohmann::json read_config_file(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::config, path.string(), ": ", e.what());
  } catch (const Error& e) {
    fail(ErrorKind::config, e.what());
  }
}

// Parses argv-style arguments and runs one subcommand; returns the exit code.
inline int run_cli(const std::vector<std::string>& args, std::ostream& err = std::cerr) {
  CLI::App app{"attention decomposition and early-exit toolkit", "attnexit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  app.add_option("--config", config_path, "JSON run config");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--threads", threads, "worker threads");

  using Command = void (*)(const Context&);
  const std::vector<std::pair<std::string, std::pair<std::string, Command>>> commands = {
      {"gen-data", {"write synthetic train/test datasets and a pretraining corpus", cmd_gen_data}},
      {"pretrain", {"masked-token pretraining of the encoder", cmd_pretrain}},
      {"train-heads", {"train one prediction head per layer", cmd_train_heads}},
      {"exit-sweep", {"early-exit threshold sweep, baselines and calibration", cmd_exit_sweep}},
      {"decompose", {"positional/semantic decomposition of attention logits", cmd_decompose}},
      {"variance-report", {"input/layer/head variance of log ratios", cmd_variance_report}},
      {"heatmap", {"per-layer histogram of log ratios", cmd_heatmap}},
  };
  for (const auto& [name, entry] : commands) app.add_subcommand(name, entry.first);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    std::ostringstream help;
    app.exit(e, help, help);
    err << help.str();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "attnexit: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    Context ctx;
    ctx.log = &err;
    ctx.config = parse_run_config(config_path.empty() ? nlohmann::json::object() : read_config_file(config_path));
    if (seed) {
      ctx.config.seed = *seed;
      ctx.config.encoder.seed = ctx.config.seed_for("encoder");
      ctx.config.heads.hyper.seed = ctx.config.seed_for("heads");
    }
    if (threads) {
      if (*threads == 0) fail(ErrorKind::config, "--threads must be >= 1");
      ctx.config.threads = *threads;
    }
    ctx.out = out_dir;
    fs::create_directories(ctx.out);
    const std::string name = app.get_subcommands().front()->get_name();
    auto resolved = to_json(ctx.config);
    resolved["command"] = name;
    write_text(ctx.out / (name + ".resolved_config.json"), resolved.dump(2) + "\n");
    for (const auto& [cmd, entry] : commands)
      if (cmd == name) entry.second(ctx);
    return kOk;
  } catch (const Error& e) {
    err << "attnexit: " << to_string(e.kind()) << " error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "attnexit: io error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "attnexit: runtime error: " << e.what() << "\n";
    return kRuntimeError;
  }
}

}  // namespace attnexit::cli

#pragma once

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnexit/checkpoint.hpp"
#include "attnexit/data.hpp"
#include "attnexit/early_exit.hpp"
#include "attnexit/encoder.hpp"
#include "attnexit/error.hpp"
#include "attnexit/heads.hpp"

namespace attnexit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// Reads keys from one JSON object and rejects any it was not asked about.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorKind::config, "'", path_, "' must be an object");
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void get(const std::string& key, T& into) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      into = j_.at(key).get<T>();
    } catch (const json::exception&) {
      fail(ErrorKind::config, "'", key_path(key), "' has the wrong type: ", j_.at(key).dump());
    }
  }

  void get_path(const std::string& key, std::optional<fs::path>& into) {
    std::string s;
    if (!j_.contains(key)) {
      used_.insert(key);
      return;
    }
    get(key, s);
    into = fs::path(s);
  }

  Section child(const std::string& key) {
    used_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, key_path(key));
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  void done() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) fail(ErrorKind::config, "unknown config key '", key_path(key), "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

struct PretrainSection {
  std::optional<fs::path> corpus;
  std::string corpus_format = "fasta";
  PretrainOptions options;
};

struct DataSection {
  std::optional<fs::path> train;
  std::optional<fs::path> test;
};

struct HeadsSection {
  std::optional<fs::path> encoder;
  HeadHyper hyper;
  Pooling pooling = Pooling::mean;
  std::optional<std::size_t> n_layers;
};

struct ExitSection {
  std::optional<fs::path> encoder;
  std::optional<fs::path> heads;
  std::vector<double> thresholds = {0.0, 0.5, 0.6, 0.7, 0.8, 0.85, 0.9, 0.95, 0.99, 1.0};
  std::vector<Fallback> fallbacks = {Fallback::last_layer, Fallback::most_confident_layer};
};

struct DecomposeSection {
  std::optional<fs::path> encoder;
  std::optional<fs::path> inputs;
  std::vector<fs::path> dumps;
  std::size_t max_inputs = 0;  // 0 = all
  bool write_dumps = false;
};

struct VarianceSection {
  std::optional<fs::path> ratios;
  std::size_t n_subsets = 10;
  std::size_t subset_size = 100;
};

struct HeatmapSection {
  std::optional<fs::path> ratios;
  std::size_t n_bins = 24;
  double lo = -3.0;
  double hi = 3.0;
};

struct SyntheticSection {
  TaskSpec task{TaskKind::multi_class, 4, "motif"};
  std::size_t n_train = 400;
  std::size_t n_test = 200;
  std::size_t n_corpus = 1000;
  std::size_t min_len = 24;
  std::size_t max_len = 48;
  std::size_t n_motifs = 3;
  std::size_t motif_len = 4;
  double corruption = 0.3;
  double motif_presence = 0.5;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  EncoderConfig encoder;
  PretrainSection pretrain;
  DataSection data;
  HeadsSection heads;
  ExitSection exit;
  DecomposeSection decompose;
  VarianceSection variance;
  HeatmapSection heatmap;
  SyntheticSection synthetic;

  // Role seeds fanned out from the top-level seed.
  std::uint64_t seed_for(std::string_view role) const { return derive_seed(seed, role); }
};

inline TaskSpec parse_task(Section s, TaskSpec t) {
  std::string kind = to_string(t.kind);
  s.get("kind", kind);
  t.kind = task_kind_from_string(kind);
  s.get("n_classes", t.n_classes);
  s.get("name", t.name);
  s.done();
  t.validate();
  return t;
}

inline RunConfig parse_run_config(const json& j) {
  RunConfig c;
  Section top(j, "");
  top.get("seed", c.seed);
  top.get("threads", c.threads);
  if (c.threads == 0) fail(ErrorKind::config, "'threads' must be >= 1");

  if (top.has("encoder")) {
    const json& e = top.raw("encoder");
    if (e.is_object() && e.contains("seed")) {
      fail(ErrorKind::config, "'encoder.seed' is derived from the top-level seed and cannot be set");
    }
    c.encoder = config_from_json(e, "encoder");
  } else {
    top.child("encoder");
  }

  {
    Section s = top.child("pretrain");
    s.get_path("corpus", c.pretrain.corpus);
    s.get("corpus_format", c.pretrain.corpus_format);
    if (c.pretrain.corpus_format != "fasta" && c.pretrain.corpus_format != "tokens") {
      fail(ErrorKind::config, "'pretrain.corpus_format' must be fasta or tokens");
    }
    s.get("steps", c.pretrain.options.steps);
    s.get("mask_rate", c.pretrain.options.mask_rate);
    s.get("step_size", c.pretrain.options.step_size);
    s.get("momentum", c.pretrain.options.momentum);
    s.get("batch_size", c.pretrain.options.batch_size);
    s.done();
  }
  {
    Section s = top.child("data");
    s.get_path("train", c.data.train);
    s.get_path("test", c.data.test);
    s.done();
  }
  {
    Section s = top.child("heads");
    s.get_path("encoder", c.heads.encoder);
    s.get("d_hidden", c.heads.hyper.d_hidden);
    s.get("step_size", c.heads.hyper.step_size);
    s.get("momentum", c.heads.hyper.momentum);
    s.get("epochs", c.heads.hyper.epochs);
    s.get("batch", c.heads.hyper.batch);
    std::string pooling = to_string(c.heads.pooling);
    s.get("pooling", pooling);
    c.heads.pooling = pooling_from_string(pooling);
    if (s.has("n_layers")) {
      std::size_t n = 0;
      s.get("n_layers", n);
      c.heads.n_layers = n;
    }
    s.done();
    if (c.heads.hyper.d_hidden == 0 || c.heads.hyper.batch == 0) {
      fail(ErrorKind::config, "'heads.d_hidden' and 'heads.batch' must be >= 1");
    }
  }
  {
    Section s = top.child("exit");
    s.get_path("encoder", c.exit.encoder);
    s.get_path("heads", c.exit.heads);
    s.get("thresholds", c.exit.thresholds);
    if (s.has("fallbacks")) {
      std::vector<std::string> names;
      s.get("fallbacks", names);
      c.exit.fallbacks.clear();
      for (const auto& n : names) c.exit.fallbacks.push_back(fallback_from_string(n));
    }
    s.done();
    if (c.exit.thresholds.empty()) fail(ErrorKind::config, "'exit.thresholds' must not be empty");
    for (double t : c.exit.thresholds) ExitPolicy{t, Fallback::last_layer}.validate();
    if (c.exit.fallbacks.empty()) fail(ErrorKind::config, "'exit.fallbacks' must not be empty");
  }
  {
    Section s = top.child("decompose");
    s.get_path("encoder", c.decompose.encoder);
    s.get_path("inputs", c.decompose.inputs);
    std::vector<std::string> dumps;
    s.get("dumps", dumps);
    for (auto& d : dumps) c.decompose.dumps.emplace_back(d);
    s.get("max_inputs", c.decompose.max_inputs);
    s.get("write_dumps", c.decompose.write_dumps);
    s.done();
  }
  {
    Section s = top.child("variance");
    s.get_path("ratios", c.variance.ratios);
    s.get("n_subsets", c.variance.n_subsets);
    s.get("subset_size", c.variance.subset_size);
    s.done();
  }
  {
    Section s = top.child("heatmap");
    s.get_path("ratios", c.heatmap.ratios);
    s.get("n_bins", c.heatmap.n_bins);
    s.get("lo", c.heatmap.lo);
    s.get("hi", c.heatmap.hi);
    s.done();
  }
  {
    Section s = top.child("synthetic");
    c.synthetic.task = parse_task(s.child("task"), c.synthetic.task);
    s.get("n_train", c.synthetic.n_train);
    s.get("n_test", c.synthetic.n_test);
    s.get("n_corpus", c.synthetic.n_corpus);
    s.get("min_len", c.synthetic.min_len);
    s.get("max_len", c.synthetic.max_len);
    s.get("n_motifs", c.synthetic.n_motifs);
    s.get("motif_len", c.synthetic.motif_len);
    s.get("corruption", c.synthetic.corruption);
    s.get("motif_presence", c.synthetic.motif_presence);
    s.done();
  }
  top.done();
  c.encoder.seed = c.seed_for("encoder");
  c.heads.hyper.seed = c.seed_for("heads");
  return c;
}

inline json optional_path(const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); }

inline json to_json(const RunConfig& c) {
  json encoder = config_to_json(c.encoder);
  encoder.erase("seed");
  std::vector<std::string> fallbacks, dumps;
  for (auto f : c.exit.fallbacks) fallbacks.emplace_back(to_string(f));
  for (const auto& d : c.decompose.dumps) dumps.push_back(d.string());
  json heads = {{"encoder", optional_path(c.heads.encoder)}, {"d_hidden", c.heads.hyper.d_hidden},
                {"step_size", c.heads.hyper.step_size},      {"momentum", c.heads.hyper.momentum},
                {"epochs", c.heads.hyper.epochs},            {"batch", c.heads.hyper.batch},
                {"pooling", to_string(c.heads.pooling)}};
  if (c.heads.n_layers) heads["n_layers"] = *c.heads.n_layers;
  return {
      {"seed", c.seed},
      {"threads", c.threads},
      {"encoder", encoder},
      {"pretrain",
       {{"corpus", optional_path(c.pretrain.corpus)},
        {"corpus_format", c.pretrain.corpus_format},
        {"steps", c.pretrain.options.steps},
        {"mask_rate", c.pretrain.options.mask_rate},
        {"step_size", c.pretrain.options.step_size},
        {"momentum", c.pretrain.options.momentum},
        {"batch_size", c.pretrain.options.batch_size}}},
      {"data", {{"train", optional_path(c.data.train)}, {"test", optional_path(c.data.test)}}},
      {"heads", heads},
      {"exit",
       {{"encoder", optional_path(c.exit.encoder)},
        {"heads", optional_path(c.exit.heads)},
        {"thresholds", c.exit.thresholds},
        {"fallbacks", fallbacks}}},
      {"decompose",
       {{"encoder", optional_path(c.decompose.encoder)},
        {"inputs", optional_path(c.decompose.inputs)},
        {"dumps", dumps},
        {"max_inputs", c.decompose.max_inputs},
        {"write_dumps", c.decompose.write_dumps}}},
      {"variance",
       {{"ratios", optional_path(c.variance.ratios)},
        {"n_subsets", c.variance.n_subsets},
        {"subset_size", c.variance.subset_size}}},
      {"heatmap",
       {{"ratios", optional_path(c.heatmap.ratios)},
        {"n_bins", c.heatmap.n_bins},
        {"lo", c.heatmap.lo},
        {"hi", c.heatmap.hi}}},
      {"synthetic",
       {{"task", task_to_json(c.synthetic.task)},
        {"n_train", c.synthetic.n_train},
        {"n_test", c.synthetic.n_test},
        {"n_corpus", c.synthetic.n_corpus},
        {"min_len", c.synthetic.min_len},
        {"max_len", c.synthetic.max_len},
        {"n_motifs", c.synthetic.n_motifs},
        {"motif_len", c.synthetic.motif_len},
        {"corruption", c.synthetic.corruption},
        {"motif_presence", c.synthetic.motif_presence}}},
  };
}

inline const fs::path& require(const std::optional<fs::path>& p, const char* key) {
  if (!p) fail(ErrorKind::config, "missing required config key '", key, "'");
  return *p;
}

}  // namespace attnexit::cli

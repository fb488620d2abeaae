#pragma once

// Corpus and label ingestion plus a seeded synthetic motif task generator.

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnexit/csv.hpp"
#include "attnexit/encoder.hpp"
#include "attnexit/error.hpp"
#include "attnexit/random.hpp"
#include "attnexit/task.hpp"

namespace attnexit {

// Token ids: the 20 standard residues first, then the special tokens.
inline constexpr std::string_view kAminoAcids = "ACDEFGHIKLMNPQRSTVWY";
inline constexpr Token kClsToken = 22;
inline constexpr Token kEosToken = 23;
inline constexpr Token kUnkToken = 24;
inline constexpr std::size_t kVocabSize = 25;

inline Token residue_token(char ch) {
  const auto pos = kAminoAcids.find(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  return pos == std::string_view::npos ? kUnkToken : static_cast<Token>(pos);
}

inline char token_residue(Token t) {
  if (t >= 0 && static_cast<std::size_t>(t) < kAminoAcids.size()) return kAminoAcids[static_cast<std::size_t>(t)];
  return 'X';
}

struct SequenceRecord {
  std::string id;
  TokenSeq tokens;
  std::string raw;

  friend bool operator==(const SequenceRecord&, const SequenceRecord&) = default;
};

struct FastaResult {
  std::vector<SequenceRecord> records;
  std::size_t unknown_residues = 0;  // replaced by the unk token
  std::size_t truncated = 0;         // sequences cut to max_seq_len
};

// FASTA text to records. The id is the header up to the first whitespace.
inline FastaResult parse_fasta(std::string_view text, std::size_t max_seq_len,
                               const std::string& origin = "<fasta>") {
  FastaResult out;
  std::string id, seq;
  bool in_record = false;
  std::size_t header_line = 0, lineno = 0;

  auto flush = [&] {
    if (!in_record) return;
    if (seq.empty()) fail(ErrorKind::data, origin, " line ", header_line, ": record '", id, "' has an empty sequence");
    SequenceRecord r;
    r.id = id;
    r.raw = seq;
    if (seq.size() > max_seq_len) {
      ++out.truncated;
      seq.resize(max_seq_len);
    }
    for (char ch : seq) {
      const Token t = residue_token(ch);
      if (t == kUnkToken) ++out.unknown_residues;
      r.tokens.push_back(t);
    }
    out.records.push_back(std::move(r));
  };

  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lineno;
    while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.remove_suffix(1);
    if (line.empty()) continue;
    if (line.front() == '>') {
      flush();
      std::string_view h = line.substr(1);
      const auto ws = h.find_first_of(" \t");
      id = std::string(h.substr(0, ws));
      if (id.empty()) fail(ErrorKind::data, origin, " line ", lineno, ": empty record id");
      seq.clear();
      in_record = true;
      header_line = lineno;
    } else {
      if (!in_record) fail(ErrorKind::data, origin, " line ", lineno, ": sequence data before first header");
      for (char ch : line)
        if (!std::isspace(static_cast<unsigned char>(ch))) seq.push_back(ch);
    }
  }
  flush();
  if (out.records.empty()) fail(ErrorKind::data, origin, ": no FASTA records");
  return out;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open ", path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline FastaResult read_fasta(const std::filesystem::path& path, std::size_t max_seq_len) {
  return parse_fasta(read_text(path), max_seq_len, path.string());
}

inline std::string format_fasta(const std::vector<SequenceRecord>& records, std::size_t width = 60) {
  std::string out;
  for (const auto& r : records) {
    out += '>';
    out += r.id;
    out += '\n';
    std::string seq;
    for (Token t : r.tokens) seq.push_back(token_residue(t));
    for (std::size_t i = 0; i < seq.size(); i += width) {
      out += seq.substr(i, width);
      out += '\n';
    }
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open ", path.string(), " for writing");
  out << text;
  if (!out) fail(ErrorKind::io, "write failed for ", path.string());
}

inline void write_fasta(const std::filesystem::path& path, const std::vector<SequenceRecord>& records) {
  write_text(path, format_fasta(records));
}

// One sequence per line, whitespace-separated token ids; ids are "line<N>".
inline std::vector<SequenceRecord> read_token_file(const std::filesystem::path& path, std::size_t vocab_size,
                                                   std::size_t max_seq_len, std::size_t* truncated = nullptr) {
  std::istringstream in(read_text(path));
  std::vector<SequenceRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    SequenceRecord r;
    r.id = "line" + std::to_string(lineno);
    r.raw = line;
    std::string tok;
    while (ls >> tok) {
      const auto v = csv::parse_int<long long>(tok, lineno);
      if (v < 0 || static_cast<std::size_t>(v) >= vocab_size) {
        fail(ErrorKind::data, path.string(), " line ", lineno, ": token id ", v, " outside vocabulary");
      }
      r.tokens.push_back(static_cast<Token>(v));
    }
    if (r.tokens.empty()) continue;
    if (r.tokens.size() > max_seq_len) {
      r.tokens.resize(max_seq_len);
      if (truncated) ++*truncated;
    }
    out.push_back(std::move(r));
  }
  if (out.empty()) fail(ErrorKind::data, path.string(), ": no sequences");
  return out;
}

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  fail(ErrorKind::config, "unknown split '", s, "'");
}

struct PlantedMotif {
  int motif = 0;           // motif identity
  std::size_t start = 0;   // first position in the sequence
  bool corrupted = false;  // one character substituted
  friend bool operator==(const PlantedMotif&, const PlantedMotif&) = default;
};

struct LabeledDataset {
  std::vector<SequenceRecord> records;
  TaskSpec task;
  std::vector<Label> labels;
  Split split = Split::train;
  std::vector<std::vector<PlantedMotif>> planted;  // synthetic data only

  std::size_t size() const { return records.size(); }

  void validate() const {
    task.validate();
    if (labels.size() != records.size()) {
      fail(ErrorKind::data, "dataset has ", records.size(), " records but ", labels.size(), " labels");
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
      validate_label(task, labels[i], records[i].tokens.size(), "record '" + records[i].id + "'");
    }
  }
};

struct SyntheticSpec {
  TaskSpec task;
  std::size_t n_items = 200;
  std::size_t min_len = 24;
  std::size_t max_len = 48;
  std::size_t n_motifs = 3;
  std::size_t motif_len = 4;
  double corruption = 0.3;
  double motif_presence = 0.5;  // multi_label / per_token: chance each motif is planted
  std::uint64_t seed = 0;
  std::uint64_t motif_seed = 0;  // fixes motif identities; share it between splits
};

// The motif alphabet strings for a given motif seed; distinct by construction.
inline std::vector<TokenSeq> synthetic_motifs(std::size_t n_motifs, std::size_t motif_len, std::uint64_t motif_seed) {
  Rng rng(derive_seed(motif_seed, "motifs"));
  std::vector<TokenSeq> motifs;
  while (motifs.size() < n_motifs) {
    TokenSeq m(motif_len);
    for (auto& t : m) t = static_cast<Token>(rng.below(kAminoAcids.size()));
    if (std::find(motifs.begin(), motifs.end(), m) == motifs.end()) motifs.push_back(std::move(m));
  }
  return motifs;
}

inline LabeledDataset generate_synthetic(const SyntheticSpec& spec) {
  const TaskSpec& task = spec.task;
  task.validate();
  if (spec.min_len < 1 || spec.min_len > spec.max_len) {
    fail(ErrorKind::config, "synthetic length range [", spec.min_len, ", ", spec.max_len, "] is invalid");
  }
  if (spec.n_motifs > 0 && spec.motif_len > spec.min_len) {
    fail(ErrorKind::config, "motif length ", spec.motif_len, " exceeds minimum sequence length ", spec.min_len);
  }
  switch (task.kind) {
    case TaskKind::multi_class:
      if (spec.n_motifs + 1 > task.n_classes) {
        fail(ErrorKind::config, "multi_class needs n_classes >= n_motifs + 1 (class 0 = no motif)");
      }
      break;
    case TaskKind::multi_label:
      if (spec.n_motifs > task.n_classes) fail(ErrorKind::config, "n_motifs exceeds n_classes");
      break;
    case TaskKind::per_token:
      if (task.n_classes != 2) fail(ErrorKind::config, "per_token synthetic task uses exactly 2 classes");
      break;
  }
  if (task.kind != TaskKind::multi_class && spec.n_motifs * (spec.motif_len + 1) > spec.min_len + 1) {
    fail(ErrorKind::config, spec.n_motifs, " motifs of length ", spec.motif_len,
         " do not fit with gaps into sequences of length ", spec.min_len);
  }

  const auto motifs = synthetic_motifs(spec.n_motifs, spec.motif_len, spec.motif_seed);
  Rng rng(derive_seed(spec.seed, "synthetic"));
  LabeledDataset ds;
  ds.task = task;

  for (std::size_t item = 0; item < spec.n_items; ++item) {
    const std::size_t len = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(spec.min_len),
                                                                 static_cast<std::int64_t>(spec.max_len)));
    TokenSeq seq(len);
    for (auto& t : seq) t = static_cast<Token>(rng.below(kAminoAcids.size()));

    std::vector<int> chosen;
    if (task.kind == TaskKind::multi_class) {
      const int cls = static_cast<int>(rng.below(spec.n_motifs + 1));
      if (cls > 0) chosen.push_back(cls - 1);
    } else {
      for (std::size_t m = 0; m < spec.n_motifs; ++m)
        if (rng.bernoulli(spec.motif_presence)) chosen.push_back(static_cast<int>(m));
    }

    // Non-overlapping placement with at least one free position between
    // motifs: shuffle the motif order, then split the spare positions among
    // the k + 1 gaps by sorted uniform cut points.
    rng.shuffle(chosen);
    const std::size_t k = chosen.size();
    const std::size_t slack = k == 0 ? 0 : len - k * spec.motif_len - (k - 1);
    std::vector<std::size_t> cuts(k);
    for (auto& c : cuts) c = static_cast<std::size_t>(rng.below(slack + 1));
    std::sort(cuts.begin(), cuts.end());
    std::vector<PlantedMotif> planted;
    for (std::size_t idx = 0; idx < k; ++idx) {
      const int m = chosen[idx];
      const std::size_t start = cuts[idx] + idx * (spec.motif_len + 1);
      const auto& motif = motifs[static_cast<std::size_t>(m)];
      std::copy(motif.begin(), motif.end(), seq.begin() + static_cast<std::ptrdiff_t>(start));
      PlantedMotif pm{m, start, false};
      if (rng.bernoulli(spec.corruption)) {
        const std::size_t at = start + static_cast<std::size_t>(rng.below(spec.motif_len));
        const Token old = seq[at];
        Token repl = static_cast<Token>(rng.below(kAminoAcids.size() - 1));
        if (repl >= old) ++repl;
        seq[at] = repl;
        pm.corrupted = true;
      }
      planted.push_back(pm);
    }
    std::sort(planted.begin(), planted.end(), [](const auto& a, const auto& b) { return a.start < b.start; });

    Label label;
    switch (task.kind) {
      case TaskKind::multi_label:
        for (const auto& p : planted) label.push_back(p.motif);
        std::sort(label.begin(), label.end());
        break;
      case TaskKind::multi_class:
        label.push_back(planted.empty() ? 0 : planted[0].motif + 1);
        break;
      case TaskKind::per_token:
        label.assign(len, 0);
        for (const auto& p : planted)
          std::fill(label.begin() + static_cast<std::ptrdiff_t>(p.start),
                    label.begin() + static_cast<std::ptrdiff_t>(p.start + spec.motif_len), 1);
        break;
    }

    SequenceRecord rec;
    rec.id = "syn" + std::to_string(item);
    rec.tokens = seq;
    for (Token t : seq) rec.raw.push_back(token_residue(t));
    ds.records.push_back(std::move(rec));
    ds.labels.push_back(std::move(label));
    ds.planted.push_back(std::move(planted));
  }
  return ds;
}

inline std::string format_label(const TaskSpec& task, const Label& label) {
  std::string out;
  const char sep = task.kind == TaskKind::per_token ? ' ' : ',';
  for (std::size_t i = 0; i < label.size(); ++i) {
    if (i) out.push_back(sep);
    out += std::to_string(label[i]);
  }
  return out;
}

inline void write_labels(const std::filesystem::path& path, const LabeledDataset& ds) {
  std::string out;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out += ds.records[i].id;
    out += '\t';
    out += format_label(ds.task, ds.labels[i]);
    out += '\n';
  }
  write_text(path, out);
}

// Tab-separated "id<TAB>classes". Labels come back in record order.
inline std::vector<Label> parse_labels(std::string_view text, const TaskSpec& task,
                                       const std::vector<SequenceRecord>& records,
                                       const std::string& origin = "<labels>") {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < records.size(); ++i) index.emplace(records[i].id, i);
  std::vector<Label> labels(records.size());
  std::vector<char> seen(records.size(), 0);

  std::size_t row = 0, pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++row;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto where = detail::concat(origin, " row ", row);
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) fail(ErrorKind::data, where, ": expected 'id<TAB>classes'");
    const std::string id(line.substr(0, tab));
    const auto it = index.find(id);
    if (it == index.end()) fail(ErrorKind::data, where, ": unknown id '", id, "'");
    if (seen[it->second]) fail(ErrorKind::data, where, ": duplicate id '", id, "'");
    seen[it->second] = 1;

    std::string body(line.substr(tab + 1));
    if (task.kind != TaskKind::per_token) std::replace(body.begin(), body.end(), ',', ' ');
    std::istringstream ss(body);
    Label label;
    std::string tok;
    while (ss >> tok) {
      int v = 0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size()) {
        fail(ErrorKind::data, where, ": malformed class index '", tok, "'");
      }
      label.push_back(v);
    }
    if (task.kind == TaskKind::multi_label) {
      std::sort(label.begin(), label.end());
      label.erase(std::unique(label.begin(), label.end()), label.end());
    }
    validate_label(task, label, records[it->second].tokens.size(), where);
    labels[it->second] = std::move(label);
  }
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (!seen[i]) fail(ErrorKind::data, origin, ": no label for record '", records[i].id, "'");
  }
  return labels;
}

inline std::vector<Label> read_labels(const std::filesystem::path& path, const TaskSpec& task,
                                      const std::vector<SequenceRecord>& records) {
  return parse_labels(read_text(path), task, records, path.string());
}

// Dataset manifest (JSON):
//   {"sequences": "train.fasta", "labels": "train.labels",
//    "task": {"kind": "multi_class", "n_classes": 4, "name": "motif"}, "split": "train"}
// Relative paths resolve against the manifest's directory.
struct DatasetManifest {
  std::filesystem::path sequences;
  std::filesystem::path labels;
  TaskSpec task;
  Split split = Split::train;
};

inline nlohmann::json task_to_json(const TaskSpec& t) {
  return {{"kind", to_string(t.kind)}, {"n_classes", t.n_classes}, {"name", t.name}};
}

inline TaskSpec task_from_json(const nlohmann::json& j) {
  TaskSpec t;
  for (const auto& [key, value] : j.items()) {
    if (key != "kind" && key != "n_classes" && key != "name") fail(ErrorKind::config, "unknown task key '", key, "'");
  }
  t.kind = task_kind_from_string(j.at("kind").get<std::string>());
  t.n_classes = j.at("n_classes").get<std::size_t>();
  if (j.contains("name")) t.name = j.at("name").get<std::string>();
  t.validate();
  return t;
}

inline void write_dataset(const std::filesystem::path& dir, const std::string& stem, const LabeledDataset& ds) {
  std::filesystem::create_directories(dir);
  write_fasta(dir / (stem + ".fasta"), ds.records);
  write_labels(dir / (stem + ".labels"), ds);
  nlohmann::json j = {{"sequences", stem + ".fasta"},
                      {"labels", stem + ".labels"},
                      {"task", task_to_json(ds.task)},
                      {"split", to_string(ds.split)}};
  write_text(dir / (stem + ".dataset.json"), j.dump(2) + "\n");
}

inline LabeledDataset read_dataset(const std::filesystem::path& manifest_file, std::size_t max_seq_len) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(manifest_file));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, manifest_file.string(), ": ", e.what());
  }
  try {
    const auto base = manifest_file.parent_path();
    LabeledDataset ds;
    ds.task = task_from_json(j.at("task"));
    ds.split = split_from_string(j.value("split", "train"));
    ds.records = read_fasta(base / j.at("sequences").get<std::string>(), max_seq_len).records;
    ds.labels = read_labels(base / j.at("labels").get<std::string>(), ds.task, ds.records);
    return ds;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, manifest_file.string(), ": ", e.what());
  }
}

}  // namespace attnexit

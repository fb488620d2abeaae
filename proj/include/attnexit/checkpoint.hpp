#pragma once

// Checkpoints are directories: manifest.json (config plus a tensor directory)
// and one TensorDump file per named parameter.

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnexit/data.hpp"
#include "attnexit/dump.hpp"
#include "attnexit/encoder.hpp"
#include "attnexit/error.hpp"
#include "attnexit/heads.hpp"

namespace attnexit {

inline nlohmann::json config_to_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size},   {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},         {"d_model", c.d_model},
          {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
          {"positional_scheme", to_string(c.positional_scheme)}, {"seed", c.seed}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline EncoderConfig config_from_json(const nlohmann::json& j, const std::string& where = "encoder") {
  if (!j.is_object()) fail(ErrorKind::config, where, " must be an object");
  EncoderConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
      else if (key == "n_layers") c.n_layers = value.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
      else if (key == "d_model") c.d_model = value.get<std::size_t>();
      else if (key == "d_ff") c.d_ff = value.get<std::size_t>();
      else if (key == "max_seq_len") c.max_seq_len = value.get<std::size_t>();
      else if (key == "positional_scheme") c.positional_scheme = positional_scheme_from_string(value.get<std::string>());
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else fail(ErrorKind::config, "unknown key '", where, ".", key, "'");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::config, where, ": ", e.what());
  }
  c.validate();
  return c;
}

namespace detail {

template <typename T>
TensorDump matrix_dump(const Matrix<T>& m) {
  TensorDump d;
  d.dims = {m.rows(), m.cols()};
  d.payload.reserve(m.size());
  for (T v : m.values()) d.payload.push_back(static_cast<float>(v));
  return d;
}

template <typename T>
void load_matrix(Matrix<T>& into, const TensorDump& d, const std::string& name) {
  if (d.dims.size() != 2 || d.dims[0] != into.rows() || d.dims[1] != into.cols()) {
    fail(ErrorKind::manifest_mismatch, "tensor '", name, "' has the wrong shape for ", shape_str(into));
  }
  for (std::size_t k = 0; k < into.size(); ++k) into.data()[k] = static_cast<T>(d.payload[k]);
}

inline std::string tensor_file(const std::string& name) { return name + ".atd"; }

inline nlohmann::json read_manifest(const std::filesystem::path& dir, const std::string& kind) {
  const auto path = dir / "manifest.json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, path.string(), ": ", e.what());
  }
  if (j.value("kind", "") != kind) fail(ErrorKind::manifest_mismatch, path.string(), " is not a ", kind, " checkpoint");
  return j;
}

template <typename W>
void save_tensors(W& params_owner, const std::filesystem::path& dir, nlohmann::json& manifest) {
  nlohmann::json tensors = nlohmann::json::object();
  params_owner([&](const std::string& name, const auto& m) {
    write_dump(matrix_dump(m), dir / tensor_file(name));
    tensors[name] = {{"file", tensor_file(name)}, {"shape", {m.rows(), m.cols()}}};
  });
  manifest["tensors"] = tensors;
}

template <typename W>
void load_tensors(W& params_owner, const std::filesystem::path& dir, const nlohmann::json& manifest) {
  const auto& tensors = manifest.at("tensors");
  std::size_t seen = 0;
  params_owner([&](const std::string& name, auto& m) {
    if (!tensors.contains(name)) fail(ErrorKind::manifest_mismatch, "checkpoint lacks tensor '", name, "'");
    load_matrix(m, read_dump(dir / tensors.at(name).at("file").get<std::string>()), name);
    ++seen;
  });
  if (seen != tensors.size()) fail(ErrorKind::manifest_mismatch, "checkpoint has tensors the model does not use");
}

}  // namespace detail

template <typename T>
void save_encoder(const EncoderWeights<T>& w, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {{"kind", "encoder"}, {"config", config_to_json(w.config)}};
  auto visit = [&](auto&& f) { visit_parameters(w, f); };
  detail::save_tensors(visit, dir, manifest);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline EncoderWeights<float> load_encoder(const std::filesystem::path& dir) {
  const auto manifest = detail::read_manifest(dir, "encoder");
  try {
    EncoderWeights<float> w = init_weights(config_from_json(manifest.at("config"), "config"));
    auto visit = [&](auto&& f) { visit_parameters(w, f); };
    detail::load_tensors(visit, dir, manifest);
    return w;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, (dir / "manifest.json").string(), ": ", e.what());
  }
}

template <typename S, typename F>
void visit_head_parameters(S& s, F&& f) {
  for (auto& h : s.heads) {
    const std::string p = "layer" + std::to_string(h.layer_index) + ".";
    f(p + "w1", h.w1);
    f(p + "b1", h.b1);
    f(p + "w2", h.w2);
    f(p + "b2", h.b2);
  }
}

inline void save_heads(const HeadStack& s, const std::filesystem::path& dir) {
  s.validate();
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {{"kind", "heads"},
                             {"task", task_to_json(s.task)},
                             {"pooling", to_string(s.pooling)},
                             {"n_layers", s.n_layers()},
                             {"d_model", s.heads[0].d_in()},
                             {"d_hidden", s.heads[0].d_hidden()}};
  auto visit = [&](auto&& f) { visit_head_parameters(s, f); };
  detail::save_tensors(visit, dir, manifest);
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline HeadStack load_heads(const std::filesystem::path& dir) {
  const auto manifest = detail::read_manifest(dir, "heads");
  try {
    HeadStack s;
    s.task = task_from_json(manifest.at("task"));
    s.pooling = pooling_from_string(manifest.at("pooling").get<std::string>());
    const auto n_layers = manifest.at("n_layers").get<std::size_t>();
    const auto d_model = manifest.at("d_model").get<std::size_t>();
    const auto d_hidden = manifest.at("d_hidden").get<std::size_t>();
    for (std::size_t l = 0; l < n_layers; ++l) s.heads.push_back(init_head(l, d_model, d_hidden, s.task.n_classes, 0));
    auto visit = [&](auto&& f) { visit_head_parameters(s, f); };
    detail::load_tensors(visit, dir, manifest);
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::data, (dir / "manifest.json").string(), ": ", e.what());
  }
}

}  // namespace attnexit

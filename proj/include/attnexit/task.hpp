#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "attnexit/error.hpp"

namespace attnexit {

enum class TaskKind { multi_label, multi_class, per_token };

inline const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::multi_label: return "multi_label";
    case TaskKind::multi_class: return "multi_class";
    case TaskKind::per_token: return "per_token";
  }
  return "?";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "multi_label") return TaskKind::multi_label;
  if (s == "multi_class") return TaskKind::multi_class;
  if (s == "per_token") return TaskKind::per_token;
  fail(ErrorKind::config, "unknown task kind '", s, "' (expected multi_label, multi_class or per_token)");
}

struct TaskSpec {
  TaskKind kind = TaskKind::multi_class;
  std::size_t n_classes = 2;
  std::string name = "task";

  void validate() const {
    if (n_classes < 2) fail(ErrorKind::config, "task '", name, "' needs n_classes >= 2, got ", n_classes);
  }

  friend bool operator==(const TaskSpec&, const TaskSpec&) = default;
};

// Class indices. multi_label: sorted set of present classes (possibly empty);
// multi_class: exactly one index; per_token: one index per sequence position.
using Label = std::vector<int>;

inline void validate_label(const TaskSpec& task, const Label& label, std::size_t seq_len,
                           const std::string& where) {
  for (int c : label) {
    if (c < 0 || static_cast<std::size_t>(c) >= task.n_classes) {
      fail(ErrorKind::data, where, ": class ", c, " out of range for ", task.n_classes, " classes");
    }
  }
  switch (task.kind) {
    case TaskKind::multi_label:
      for (std::size_t i = 1; i < label.size(); ++i) {
        if (label[i] <= label[i - 1]) fail(ErrorKind::data, where, ": label set must be sorted and unique");
      }
      break;
    case TaskKind::multi_class:
      if (label.size() != 1) fail(ErrorKind::data, where, ": multi_class label needs exactly one class");
      break;
    case TaskKind::per_token:
      if (label.size() != seq_len) {
        fail(ErrorKind::data, where, ": per_token label has ", label.size(), " entries for a sequence of length ",
             seq_len);
      }
      break;
  }
}

}  // namespace attnexit

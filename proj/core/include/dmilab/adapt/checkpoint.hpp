#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "dmilab/models/classifier.hpp"
#include "dmilab/tensor_grad/tensor.hpp"

namespace dmilab {

/// Named classifiers (e.g. "source", "proxy", "target") plus an optional
/// prompt tensor, stored in a container of kind "checkpoint". Tensor names
/// are "<model>/<key>"; dims go in meta as "<model>.dims".
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::map<std::string, ClassifierParams> models;
  std::optional<Tensor> prompt;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);

/// Throws the container errors, or CorruptFileError for a wrong kind or an
/// inconsistent model entry.
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dmilab

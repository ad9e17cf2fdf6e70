#include "dmilab/adapt/checkpoint.hpp"

#include <sstream>

#include "dmilab/errors.hpp"
#include "dmilab/io/container.hpp"

namespace dmilab {

namespace {

constexpr const char* kKind = "checkpoint";
constexpr const char* kPromptTensor = "prompt";

std::string dims_to_string(const ClassifierDims& d) {
  std::ostringstream os;
  os << d.input_dim << ',' << d.hidden_dim << ',' << d.bottleneck_dim << ',' << d.K;
  return os.str();
}

ClassifierDims dims_from_string(const std::string& s) {
  ClassifierDims d;
  char c1 = 0, c2 = 0, c3 = 0;
  std::istringstream is(s);
  is >> d.input_dim >> c1 >> d.hidden_dim >> c2 >> d.bottleneck_dim >> c3 >> d.K;
  if (!is || c1 != ',' || c2 != ',' || c3 != ',' || !is.eof()) {
    throw CorruptFileError("checkpoint: unreadable dims '" + s + "'");
  }
  return d;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  Container c;
  c.kind = kKind;
  c.meta = ckpt.meta;
  for (const auto& [name, model] : ckpt.models) {
    if (name.empty() || name.find('/') != std::string::npos) {
      throw ConfigError("checkpoint model name '" + name + "' must be non-empty without '/'");
    }
    c.meta[name + ".dims"] = dims_to_string(model.dims());
    for (const auto& [key, t] : model.tensors()) c.tensors[name + "/" + key] = t;
  }
  if (ckpt.prompt) c.tensors[kPromptTensor] = *ckpt.prompt;
  write_container(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.kind != kKind) {
    throw CorruptFileError("expected a checkpoint container, found '" + c.kind + "'");
  }
  Checkpoint out;
  std::map<std::string, ParamStore> stores;
  for (auto& [name, t] : c.tensors) {
    if (name == kPromptTensor) {
      out.prompt = t;
      continue;
    }
    const auto slash = name.find('/');
    if (slash == std::string::npos) throw CorruptFileError("checkpoint: stray tensor '" + name + "'");
    stores[name.substr(0, slash)][name.substr(slash + 1)] = t;
  }
  for (auto& [model, store] : stores) {
    auto it = c.meta.find(model + ".dims");
    if (it == c.meta.end()) throw CorruptFileError("checkpoint: no dims for model '" + model + "'");
    try {
      out.models.emplace(model, ClassifierParams(dims_from_string(it->second), std::move(store)));
    } catch (const ShapeError& e) {
      throw CorruptFileError(std::string("checkpoint: ") + e.what());
    }
    c.meta.erase(it);
  }
  out.meta = std::move(c.meta);
  return out;
}

}  // namespace dmilab

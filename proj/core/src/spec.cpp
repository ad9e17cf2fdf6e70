#include "dmilab/experiment/spec.hpp"

#include <algorithm>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "dmilab/errors.hpp"

namespace dmilab {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string_view rest = s;
  while (true) {
    const auto pos = rest.find(sep);
    out.push_back(trim(rest.substr(0, pos)));
    if (pos == std::string_view::npos) break;
    rest.remove_prefix(pos + 1);
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

double parse_double(const std::string& key, const std::string& text) {
  double v = 0.0;
  const char* b = text.data();
  const char* e = b + text.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e || text.empty()) {
    throw ConfigError(key + ": expected a number, got '" + text + "'");
  }
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& text) {
  std::uint64_t v = 0;
  const char* b = text.data();
  const char* e = b + text.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e || text.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

struct Field {
  std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
};

template <class Ref>
Field size_field(Ref ref) {
  return {[ref](PipelineConfig& c, const std::string& k, const std::string& v) {
            ref(c) = static_cast<std::size_t>(parse_u64(k, v));
          },
          [ref](const PipelineConfig& c) {
            return std::to_string(ref(const_cast<PipelineConfig&>(c)));
          }};
}

template <class Ref>
Field double_field(Ref ref) {
  return {[ref](PipelineConfig& c, const std::string& k, const std::string& v) {
            ref(c) = parse_double(k, v);
          },
          [ref](const PipelineConfig& c) {
            return format_double(ref(const_cast<PipelineConfig&>(c)));
          }};
}

void add_train_fields(std::map<std::string, Field>& f, const std::string& section,
                      TrainConfig PipelineConfig::*member) {
  f[section + ".epochs"] = size_field([member](PipelineConfig& c) -> auto& { return (c.*member).epochs; });
  f[section + ".batch_size"] =
      size_field([member](PipelineConfig& c) -> auto& { return (c.*member).batch_size; });
  f[section + ".lr"] = double_field([member](PipelineConfig& c) -> auto& { return (c.*member).lr; });
  f[section + ".momentum"] =
      double_field([member](PipelineConfig& c) -> auto& { return (c.*member).momentum; });
  f[section + ".weight_decay"] =
      double_field([member](PipelineConfig& c) -> auto& { return (c.*member).weight_decay; });
  f[section + ".sigma"] = double_field([member](PipelineConfig& c) -> auto& { return (c.*member).sigma; });
}

// Every settable "section.key", in the order format_spec writes them.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const auto table = [] {
    std::map<std::string, Field> f;
    using C = PipelineConfig;
    f["scenario.K"] = size_field([](C& c) -> auto& { return c.scenario.K; });
    f["scenario.dim_global"] = size_field([](C& c) -> auto& { return c.scenario.dim_global; });
    f["scenario.dim_local"] = size_field([](C& c) -> auto& { return c.scenario.dim_local; });
    f["scenario.source_per_class"] = size_field([](C& c) -> auto& { return c.scenario.source_per_class; });
    f["scenario.target_per_class"] = size_field([](C& c) -> auto& { return c.scenario.target_per_class; });
    f["scenario.target_imbalance"] = double_field([](C& c) -> auto& { return c.scenario.target_imbalance; });
    f["scenario.radius_global"] = double_field([](C& c) -> auto& { return c.scenario.radius_global; });
    f["scenario.radius_local"] = double_field([](C& c) -> auto& { return c.scenario.radius_local; });
    f["scenario.min_separation"] = double_field([](C& c) -> auto& { return c.scenario.min_separation; });
    f["scenario.angle_deg"] = double_field([](C& c) -> auto& { return c.scenario.shift.angle_deg; });
    f["scenario.translation"] = double_field([](C& c) -> auto& { return c.scenario.shift.translation; });
    f["scenario.source_noise"] = double_field([](C& c) -> auto& { return c.scenario.shift.source_noise; });
    f["scenario.target_noise"] = double_field([](C& c) -> auto& { return c.scenario.shift.target_noise; });
    f["scenario.setting"] = {
        [](C& c, const std::string&, const std::string& v) { c.scenario.setting = parse_setting(v); },
        [](const C& c) { return to_string(c.scenario.setting); }};
    f["scenario.partial_size"] = size_field([](C& c) -> auto& { return c.scenario.partial_size; });
    f["scenario.open_extra"] = size_field([](C& c) -> auto& { return c.scenario.open_extra; });

    f["model.hidden_dim"] = size_field([](C& c) -> auto& { return c.model.hidden_dim; });
    f["model.bottleneck_dim"] = size_field([](C& c) -> auto& { return c.model.bottleneck_dim; });

    f["teachers.embed_dim"] = size_field([](C& c) -> auto& { return c.teachers.embed_dim; });
    f["teachers.tau"] = double_field([](C& c) -> auto& { return c.teachers.tau; });
    f["teachers.caption_noise"] = double_field([](C& c) -> auto& { return c.teachers.caption_noise; });

    add_train_fields(f, "pretrain", &C::pretrain);
    add_train_fields(f, "burn_in", &C::burn_in);

    f["adapt.alpha"] = double_field([](C& c) -> auto& { return c.adapt.alpha; });
    f["adapt.beta"] = double_field([](C& c) -> auto& { return c.adapt.beta; });
    f["adapt.lambda"] = double_field([](C& c) -> auto& { return c.adapt.dmi.lambda; });
    f["adapt.confidence_threshold"] =
        double_field([](C& c) -> auto& { return c.adapt.dmi.confidence_threshold; });
    f["adapt.epochs"] = size_field([](C& c) -> auto& { return c.adapt.epochs; });
    f["adapt.batch_size"] = size_field([](C& c) -> auto& { return c.adapt.batch_size; });
    f["adapt.lr_target"] = double_field([](C& c) -> auto& { return c.adapt.lr_target; });
    f["adapt.lr_proxy"] = double_field([](C& c) -> auto& { return c.adapt.lr_proxy; });
    f["adapt.lr_prompt"] = double_field([](C& c) -> auto& { return c.adapt.lr_prompt; });
    f["adapt.momentum"] = double_field([](C& c) -> auto& { return c.adapt.momentum; });
    f["adapt.weight_decay"] = double_field([](C& c) -> auto& { return c.adapt.weight_decay; });
    f["adapt.objective"] = {
        [](C& c, const std::string&, const std::string& v) { c.adapt.objective = parse_objective(v); },
        [](const C& c) { return to_string(c.adapt.objective); }};
    f["adapt.terms"] = {
        [](C& c, const std::string&, const std::string& v) { c.adapt.use = parse_terms(v); },
        [](const C& c) { return to_string(c.adapt.use); }};
    f["adapt.holdout_fraction"] = double_field([](C& c) -> auto& { return c.adapt.holdout_fraction; });

    // fixed section order, keys sorted within a section
    std::vector<std::pair<std::string, Field>> out;
    for (const char* section : {"scenario", "model", "teachers", "pretrain", "burn_in", "adapt"}) {
      const std::string prefix = std::string(section) + ".";
      for (auto& [k, v] : f) {
        if (k.rfind(prefix, 0) == 0) out.emplace_back(k, v);
      }
    }
    return out;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return &f;
  }
  return nullptr;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void PipelineConfig::validate() const {
  scenario.validate();
  model.validate();
  teachers.validate();
  try {
    pretrain.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("pretrain: ") + e.what());
  }
  try {
    burn_in.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("burn_in: ") + e.what());
  }
  adapt.validate();
}

PipelineConfig canonical_pipeline() {
  PipelineConfig c;
  c.teachers.caption_noise = 0.5;
  c.pretrain.epochs = 30;
  c.burn_in.epochs = 20;
  return c;
}

std::uint64_t derive_seed(std::uint64_t run_seed, std::string_view stage) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : stage) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return splitmix64(run_seed ^ splitmix64(h));
}

void apply_run_seed(PipelineConfig& cfg, std::uint64_t run_seed) {
  cfg.scenario.seed = derive_seed(run_seed, "scenario");
  cfg.teachers.seed = derive_seed(run_seed, "teachers");
  cfg.pretrain.seed = derive_seed(run_seed, "pretrain");
  cfg.burn_in.seed = derive_seed(run_seed, "burn_in");
  cfg.adapt.seed = derive_seed(run_seed, "adapt");
}

LossSwitches parse_terms(const std::string& s) {
  LossSwitches use{false, false, false, false};
  const std::string t = trim(s);
  if (t == "none") return use;
  for (const auto& name : split_list(t, '+')) {
    bool* slot = name == "mc"    ? &use.mc
                 : name == "cd"  ? &use.cd
                 : name == "ags" ? &use.ags
                 : name == "sim" ? &use.sim
                                 : nullptr;
    if (!slot) throw ConfigError("adapt.terms: unknown term '" + name + "' (mc, cd, ags, sim)");
    if (*slot) throw ConfigError("adapt.terms: term '" + name + "' listed twice");
    *slot = true;
  }
  return use;
}

std::string to_string(const LossSwitches& use) {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += name;
  };
  add(use.mc, "mc");
  add(use.cd, "cd");
  add(use.ags, "ags");
  add(use.sim, "sim");
  return out.empty() ? "none" : out;
}

std::string SweepCell::label() const {
  if (overrides.empty()) return "base";
  std::string out;
  for (const auto& [k, v] : overrides) {
    if (!out.empty()) out += ';';
    out += k.substr(k.find('.') + 1) + "=" + v;
  }
  return out;
}

std::string sweep_key(const std::string& name) {
  if (name.find('.') != std::string::npos) return name;
  if (name == "batch_size" || name == "lambda" || name == "terms" || name == "objective") {
    return "adapt." + name;
  }
  if (name == "setting") return "scenario.setting";
  throw ConfigError("sweep." + name + ": unknown axis (use section.key or one of batch_size, "
                    "lambda, terms, objective, setting)");
}

void set_field(PipelineConfig& cfg, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) throw ConfigError(key + ": unknown key");
  try {
    f->set(cfg, key, trim(value));
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.rfind(key, 0) == 0) throw;
    throw ConfigError(key + ": " + what);
  }
}

bool lambda_is_extrapolation(double lambda) { return lambda < 0.2 - 1e-12 || lambda > 2.0 + 1e-12; }

std::vector<SweepCell> ExperimentSpec::cells() const {
  std::vector<SweepCell> out{SweepCell{}};
  for (const auto& axis : sweep) {
    std::vector<SweepCell> next;
    for (const auto& cell : out) {
      for (const auto& v : axis.values) {
        SweepCell c = cell;
        c.overrides.emplace_back(axis.key, v);
        next.push_back(std::move(c));
      }
    }
    out = std::move(next);
  }
  return out;
}

PipelineConfig ExperimentSpec::resolve(const SweepCell& cell, std::uint64_t seed) const {
  PipelineConfig cfg = base;
  for (const auto& [k, v] : cell.overrides) set_field(cfg, k, v);
  apply_run_seed(cfg, seed);
  return cfg;
}

void ExperimentSpec::validate() const {
  if (name.empty() || name.find_first_of("/\\") != std::string::npos) {
    throw ConfigError("run.name: must be non-empty and contain no path separator");
  }
  if (seeds.empty()) throw ConfigError("run.seeds: at least one seed is required");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("run.seeds: duplicate seed");
  }
  if (workers == 0) throw ConfigError("run.workers: must be positive");
  std::set<std::string> keys;
  for (const auto& axis : sweep) {
    if (!find_field(axis.key)) throw ConfigError("sweep." + axis.key + ": unknown key");
    if (!keys.insert(axis.key).second) throw ConfigError("sweep." + axis.key + ": axis given twice");
    if (axis.values.empty()) throw ConfigError("sweep." + axis.key + ": no values");
    std::set<std::string> seen;
    for (const auto& v : axis.values) {
      if (v.empty()) throw ConfigError("sweep." + axis.key + ": empty value");
      if (!seen.insert(v).second) throw ConfigError("sweep." + axis.key + ": duplicate value '" + v + "'");
    }
  }
  for (const auto& cell : cells()) {
    try {
      resolve(cell, seeds.front()).validate();
    } catch (const ConfigError& e) {
      if (cell.overrides.empty()) throw;
      throw ConfigError(std::string(e.what()) + " (in sweep cell " + cell.label() + ")");
    }
  }
}

ExperimentSpec parse_spec(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  ExperimentSpec spec;
  spec.base = canonical_pipeline();
  for (const auto& [section, body] : tree) {
    if (!body.data().empty()) {
      throw ConfigError(section + ": key outside any section");
    }
    for (const auto& [key, node] : body) {
      const std::string value = trim(node.data());
      const std::string full = section + "." + key;
      if (section == "run") {
        if (key == "name") {
          spec.name = value;
        } else if (key == "seeds") {
          spec.seeds.clear();
          for (const auto& s : split_list(value, ',')) spec.seeds.push_back(parse_u64(full, s));
        } else if (key == "workers") {
          spec.workers = static_cast<std::size_t>(parse_u64(full, value));
        } else if (key == "out") {
          spec.out = value;
        } else {
          throw ConfigError(full + ": unknown key");
        }
      } else if (section == "sweep") {
        SweepAxis axis{sweep_key(key), {}};
        for (const auto& v : split_list(value, ',')) axis.values.push_back(v);
        spec.sweep.push_back(std::move(axis));
      } else {
        set_field(spec.base, full, value);
      }
    }
  }
  spec.validate();
  return spec;
}

ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_spec(in);
}

std::string describe(const PipelineConfig& cfg) {
  std::string out;
  for (const auto& [key, f] : fields()) out += key + "=" + f.get(cfg) + "\n";
  return out;
}

std::string format_spec(const ExperimentSpec& spec) {
  std::ostringstream out;
  out << "[run]\nname = " << spec.name << "\nseeds = ";
  for (std::size_t i = 0; i < spec.seeds.size(); ++i) out << (i ? "," : "") << spec.seeds[i];
  out << "\nworkers = " << spec.workers << "\nout = " << spec.out.string() << "\n";
  std::string section;
  for (const auto& [key, f] : fields()) {
    const auto dot = key.find('.');
    const std::string s = key.substr(0, dot);
    if (s != section) {
      section = s;
      out << "\n[" << section << "]\n";
    }
    out << key.substr(dot + 1) << " = " << f.get(spec.base) << "\n";
  }
  if (!spec.sweep.empty()) {
    out << "\n[sweep]\n";
    for (const auto& axis : spec.sweep) {
      out << axis.key << " = ";
      for (std::size_t i = 0; i < axis.values.size(); ++i) out << (i ? "," : "") << axis.values[i];
      out << "\n";
    }
  }
  return out.str();
}

// --- suites -------------------------------------------------------------------------

namespace {

ExperimentSpec suite_base(const std::string& name) {
  ExperimentSpec s;
  s.name = name;
  s.base = canonical_pipeline();
  s.seeds = {0, 1, 2, 3, 4};
  s.out = "out/" + name;
  return s;
}

}  // namespace

ExperimentSpec suite_batch_sensitivity() {
  auto s = suite_base("batch");
  s.sweep = {{"adapt.batch_size", {"8", "16", "32", "64"}}, {"adapt.objective", {"mi", "dmi"}}};
  return s;
}

ExperimentSpec suite_lambda() {
  auto s = suite_base("lambda");
  // 0.1 extrapolates below the grid; 0.5 is the default and is compared directly
  s.sweep = {{"adapt.lambda",
              {"0.1", "0.2", "0.4", "0.5", "0.6", "0.8", "1", "1.2", "1.4", "1.6", "1.8", "2"}}};
  return s;
}

ExperimentSpec suite_ablation() {
  auto s = suite_base("ablation");
  s.sweep = {{"adapt.terms", {"sim", "ags+sim", "mc+ags+sim", "mc+cd+ags+sim"}}};
  return s;
}

ExperimentSpec suite_objectives() {
  auto s = suite_base("objectives");
  s.sweep = {{"adapt.objective", {"dmi", "mi", "kl"}}};
  return s;
}

ExperimentSpec suite_settings() {
  auto s = suite_base("settings");
  s.base.scenario.partial_size = 13;
  s.base.scenario.open_extra = 6;
  s.sweep = {{"scenario.setting", {"closed", "partial", "open"}}};
  return s;
}

std::vector<std::string> suite_names() { return {"batch", "lambda", "ablation", "objectives", "settings"}; }

ExperimentSpec suite_by_name(const std::string& name) {
  if (name == "batch") return suite_batch_sensitivity();
  if (name == "lambda") return suite_lambda();
  if (name == "ablation") return suite_ablation();
  if (name == "objectives") return suite_objectives();
  if (name == "settings") return suite_settings();
  throw ConfigError("unknown suite '" + name + "' (batch, lambda, ablation, objectives, settings)");
}

}  // namespace dmilab

#include "dmilab/synthdata/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "dmilab/errors.hpp"
#include "dmilab/io/container.hpp"

namespace dmilab {

std::string to_string(Setting s) {
  switch (s) {
    case Setting::closed: return "closed";
    case Setting::partial: return "partial";
    case Setting::open: return "open";
  }
  return "closed";
}

Setting parse_setting(const std::string& s) {
  if (s == "closed") return Setting::closed;
  if (s == "partial") return Setting::partial;
  if (s == "open") return Setting::open;
  throw ConfigError("setting: expected closed|partial|open, got '" + s + "'");
}

void ScenarioConfig::validate() const {
  if (K < 3) throw ConfigError("scenario.K: need at least 3 classes");
  if (dim_global == 0 || dim_local == 0) throw ConfigError("scenario.dim_*: must be positive");
  if (source_per_class == 0) throw ConfigError("scenario.source_per_class: must be positive");
  if (target_per_class == 0) throw ConfigError("scenario.target_per_class: must be positive");
  if (!(target_imbalance >= 1.0) || !std::isfinite(target_imbalance)) {
    throw ConfigError("scenario.target_imbalance: must be >= 1");
  }
  if (!(radius_global > 0.0) || !(radius_local > 0.0)) {
    throw ConfigError("scenario.radius_*: must be positive");
  }
  if (min_separation < 0.0) throw ConfigError("scenario.min_separation: must be >= 0");
  if (shift.source_noise < 0.0 || shift.target_noise < 0.0) {
    throw ConfigError("scenario.shift noise: must be >= 0");
  }
  if (setting == Setting::partial && (partial_size < 1 || partial_size >= K)) {
    throw ConfigError("scenario.partial_size: must lie in [1, K)");
  }
  if (setting == Setting::open && open_extra == 0) {
    throw ConfigError("scenario.open_extra: open setting needs at least one unknown class");
  }
}

namespace {

using Rng = std::mt19937_64;

std::vector<double> random_direction(Rng& rng, std::size_t dim) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> v(dim);
  double s = 0.0;
  do {
    s = 0.0;
    for (double& x : v) {
      x = nd(rng);
      s += x * x;
    }
  } while (s < 1e-12);
  const double inv = 1.0 / std::sqrt(s);
  for (double& x : v) x *= inv;
  return v;
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// `count` points on a sphere of `radius` (the last `outer` of them on a sphere
/// 1.6x larger, outside the hull of the rest), each at least `min_sep` from all
/// earlier points.
std::vector<std::vector<double>> place_means(Rng& rng, std::size_t count, std::size_t outer,
                                             std::size_t dim, double radius, double min_sep) {
  std::vector<std::vector<double>> means;
  for (std::size_t k = 0; k < count; ++k) {
    const double r = k + outer >= count ? 1.6 * radius : radius;
    bool placed = false;
    for (int attempt = 0; attempt < 20000 && !placed; ++attempt) {
      auto v = random_direction(rng, dim);
      for (double& x : v) x *= r;
      placed = std::all_of(means.begin(), means.end(),
                           [&](const auto& m) { return distance(m, v) >= min_sep; });
      if (placed) means.push_back(std::move(v));
    }
    if (!placed) {
      throw ConfigError("scenario.min_separation: cannot place " + std::to_string(count) +
                        " class means in " + std::to_string(dim) + " dimensions");
    }
  }
  return means;
}

struct Shift {
  std::vector<double> u, w, t;
  double cos_a = 1.0, sin_a = 0.0;

  void apply(std::vector<double>& z) const {
    double pu = 0.0, pw = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      pu += u[i] * z[i];
      pw += w[i] * z[i];
    }
    const double ru = cos_a * pu - sin_a * pw;
    const double rw = sin_a * pu + cos_a * pw;
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] += (ru - pu) * u[i] + (rw - pw) * w[i] + t[i];
    }
  }
};

Shift make_shift(Rng& rng, std::size_t dim, const ShiftSpec& spec) {
  Shift s;
  s.u = random_direction(rng, dim);
  // Gram-Schmidt for the second plane axis
  do {
    s.w = random_direction(rng, dim);
    double d = 0.0;
    for (std::size_t i = 0; i < dim; ++i) d += s.u[i] * s.w[i];
    double n = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      s.w[i] -= d * s.u[i];
      n += s.w[i] * s.w[i];
    }
    if (n > 1e-6) {
      for (double& x : s.w) x /= std::sqrt(n);
      break;
    }
  } while (true);
  s.t = random_direction(rng, dim);
  for (double& x : s.t) x *= spec.translation;
  const double a = spec.angle_deg * std::numbers::pi / 180.0;
  s.cos_a = std::cos(a);
  s.sin_a = std::sin(a);
  return s;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Tensor labels_tensor(const std::vector<std::size_t>& labels) {
  std::vector<double> v(labels.begin(), labels.end());
  return Tensor({labels.size()}, std::move(v));
}

std::vector<std::size_t> labels_from(const Tensor& t, const std::string& what) {
  std::vector<std::size_t> out;
  out.reserve(t.numel());
  for (double v : t.data()) {
    if (!(v >= 0.0) || v != std::floor(v)) throw CorruptFileError(what + ": non-integer label");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

Tensor block(const Tensor& means, std::size_t rows, std::size_t from, std::size_t width) {
  Tensor out = Tensor::zeros({rows, width});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < width; ++j) out(i, j) = means(i, from + j);
  return out;
}

}  // namespace

Tensor ScenarioBundle::global_means() const {
  return block(class_means, config.K, 0, config.dim_global);
}

Tensor ScenarioBundle::local_means() const {
  return block(class_means, config.K, config.dim_global, config.dim_local);
}

ScenarioBundle generate(const ScenarioConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const std::size_t K = config.K, D = config.dim();
  const std::size_t extra = config.setting == Setting::open ? config.open_extra : 0;
  const std::size_t n_means = K + extra;

  auto g = place_means(rng, n_means, extra, config.dim_global, config.radius_global,
                       config.min_separation);
  auto l = place_means(rng, n_means, extra, config.dim_local, config.radius_local,
                       config.min_separation);
  ScenarioBundle b;
  b.config = config;
  b.class_means = Tensor::zeros({n_means, D});
  for (std::size_t k = 0; k < n_means; ++k) {
    for (std::size_t j = 0; j < config.dim_global; ++j) b.class_means(k, j) = g[k][j];
    for (std::size_t j = 0; j < config.dim_local; ++j) {
      b.class_means(k, config.dim_global + j) = l[k][j];
    }
  }

  const Shift shift = make_shift(rng, D, config.shift);

  std::vector<std::size_t> present;
  if (config.setting == Setting::partial) {
    std::vector<std::size_t> all(K);
    for (std::size_t k = 0; k < K; ++k) all[k] = k;
    std::shuffle(all.begin(), all.end(), rng);
    present.assign(all.begin(), all.begin() + static_cast<long>(config.partial_size));
    std::sort(present.begin(), present.end());
  } else {
    for (std::size_t k = 0; k < K; ++k) present.push_back(k);
  }
  b.target_classes = present;
  std::vector<std::size_t> target_label_set = present;
  for (std::size_t e = 0; e < extra; ++e) target_label_set.push_back(K + e);

  std::normal_distribution<double> nd(0.0, 1.0);
  auto sample = [&](std::size_t k, double noise) {
    std::vector<double> z(D);
    for (std::size_t j = 0; j < D; ++j) z[j] = b.class_means(k, j) + noise * nd(rng);
    return z;
  };

  // Source: class-major draws, then one shuffle so batches mix classes.
  std::vector<std::size_t> src_labels;
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < config.source_per_class; ++i) src_labels.push_back(k);
  std::shuffle(src_labels.begin(), src_labels.end(), rng);
  b.source.features = Tensor::zeros({src_labels.size(), D});
  for (std::size_t i = 0; i < src_labels.size(); ++i) {
    auto z = sample(src_labels[i], config.shift.source_noise);
    for (std::size_t j = 0; j < D; ++j) b.source.features(i, j) = z[j];
  }
  b.source.labels = std::move(src_labels);

  std::vector<std::size_t> tgt_labels;
  // Long-tailed counts: the class of rank r gets per_class * ratio^(-r / (m - 1)).
  std::vector<std::size_t> rank(target_label_set.size());
  for (std::size_t r = 0; r < rank.size(); ++r) rank[r] = r;
  if (config.target_imbalance > 1.0) std::shuffle(rank.begin(), rank.end(), rng);
  for (std::size_t j = 0; j < target_label_set.size(); ++j) {
    const double frac =
        rank.size() > 1 ? double(rank[j]) / double(rank.size() - 1) : 0.0;
    const auto count = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(double(config.target_per_class) *
                                                std::pow(config.target_imbalance, -frac))));
    for (std::size_t i = 0; i < count; ++i) tgt_labels.push_back(target_label_set[j]);
  }
  std::shuffle(tgt_labels.begin(), tgt_labels.end(), rng);
  const std::size_t nt = tgt_labels.size();
  b.target.features = Tensor::zeros({nt, D});
  b.target_global = Tensor::zeros({nt, config.dim_global});
  b.target_local = Tensor::zeros({nt, config.dim_local});
  for (std::size_t i = 0; i < nt; ++i) {
    auto z = sample(tgt_labels[i], config.shift.target_noise);
    for (std::size_t j = 0; j < config.dim_global; ++j) b.target_global(i, j) = z[j];
    for (std::size_t j = 0; j < config.dim_local; ++j) {
      b.target_local(i, j) = z[config.dim_global + j];
    }
    shift.apply(z);
    for (std::size_t j = 0; j < D; ++j) b.target.features(i, j) = z[j];
  }
  b.target.labels = std::move(tgt_labels);
  return b;
}

void save_bundle(const ScenarioBundle& b, const std::filesystem::path& path) {
  const auto& c = b.config;
  Container out;
  out.kind = "scenario_bundle";
  out.meta = {
      {"K", std::to_string(c.K)},
      {"dim_global", std::to_string(c.dim_global)},
      {"dim_local", std::to_string(c.dim_local)},
      {"source_per_class", std::to_string(c.source_per_class)},
      {"target_per_class", std::to_string(c.target_per_class)},
      {"target_imbalance", fmt_double(c.target_imbalance)},
      {"radius_global", fmt_double(c.radius_global)},
      {"radius_local", fmt_double(c.radius_local)},
      {"min_separation", fmt_double(c.min_separation)},
      {"shift.angle_deg", fmt_double(c.shift.angle_deg)},
      {"shift.translation", fmt_double(c.shift.translation)},
      {"shift.source_noise", fmt_double(c.shift.source_noise)},
      {"shift.target_noise", fmt_double(c.shift.target_noise)},
      {"setting", to_string(c.setting)},
      {"partial_size", std::to_string(c.partial_size)},
      {"open_extra", std::to_string(c.open_extra)},
      {"seed", std::to_string(c.seed)},
  };
  out.tensors = {
      {"source.features", b.source.features},
      {"source.labels", labels_tensor(b.source.labels)},
      {"target.features", b.target.features},
      {"target.labels", labels_tensor(b.target.labels)},
      {"target.global", b.target_global},
      {"target.local", b.target_local},
      {"class_means", b.class_means},
      {"target_classes", labels_tensor(b.target_classes)},
  };
  write_container(path, out);
}

ScenarioBundle load_bundle(const std::filesystem::path& path) {
  const Container in = read_container(path);
  if (in.kind != "scenario_bundle") {
    throw CorruptFileError("expected a scenario_bundle container, found '" + in.kind + "'");
  }
  auto meta = [&](const std::string& key) -> const std::string& {
    auto it = in.meta.find(key);
    if (it == in.meta.end()) throw CorruptFileError("bundle metadata missing '" + key + "'");
    return it->second;
  };
  auto tensor = [&](const std::string& key) -> const Tensor& {
    auto it = in.tensors.find(key);
    if (it == in.tensors.end()) throw CorruptFileError("bundle tensor missing '" + key + "'");
    return it->second;
  };
  ScenarioBundle b;
  auto& c = b.config;
  try {
    c.K = std::stoull(meta("K"));
    c.dim_global = std::stoull(meta("dim_global"));
    c.dim_local = std::stoull(meta("dim_local"));
    c.source_per_class = std::stoull(meta("source_per_class"));
    c.target_per_class = std::stoull(meta("target_per_class"));
    c.target_imbalance = std::stod(meta("target_imbalance"));
    c.radius_global = std::stod(meta("radius_global"));
    c.radius_local = std::stod(meta("radius_local"));
    c.min_separation = std::stod(meta("min_separation"));
    c.shift.angle_deg = std::stod(meta("shift.angle_deg"));
    c.shift.translation = std::stod(meta("shift.translation"));
    c.shift.source_noise = std::stod(meta("shift.source_noise"));
    c.shift.target_noise = std::stod(meta("shift.target_noise"));
    c.setting = parse_setting(meta("setting"));
    c.partial_size = std::stoull(meta("partial_size"));
    c.open_extra = std::stoull(meta("open_extra"));
    c.seed = std::stoull(meta("seed"));
  } catch (const std::logic_error& e) {
    throw CorruptFileError(std::string("bundle metadata unreadable: ") + e.what());
  }
  b.source.features = tensor("source.features");
  b.source.labels = labels_from(tensor("source.labels"), "source.labels");
  b.target.features = tensor("target.features");
  b.target.labels = labels_from(tensor("target.labels"), "target.labels");
  b.target_global = tensor("target.global");
  b.target_local = tensor("target.local");
  b.class_means = tensor("class_means");
  b.target_classes = labels_from(tensor("target_classes"), "target_classes");
  if (b.source.features.rows() != b.source.labels.size() ||
      b.target.features.rows() != b.target.labels.size()) {
    throw CorruptFileError("bundle feature and label counts differ");
  }
  return b;
}

}  // namespace dmilab

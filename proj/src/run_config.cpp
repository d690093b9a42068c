#include "fuseseg/run_config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace fuseseg {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream is(v);
  T out{};
  is >> out;
  if (is.fail() || !is.eof()) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

Variant parse_variant_key(const std::string& key, const std::string& v) {
  try {
    return parse_variant(v);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config key '" + key + "': " + e.what());
  }
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  // Shortest form that still round-trips.
  for (int prec = 1; prec < 17; ++prec) {
    char s[32];
    std::snprintf(s, sizeof s, "%.*g", prec, v);
    if (std::stod(s) == v) return s;
  }
  return buf;
}

template <typename T>
ConfigKey number_key(std::string key, std::string help, T RunConfig::*outer) {
  return {key, std::move(help), [outer, key](RunConfig& c, const std::string& v) { c.*outer = parse_number<T>(key, v); },
          [outer](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return num(c.*outer);
            } else {
              return std::to_string(c.*outer);
            }
          }};
}

// Field of a nested struct (phantom / train).
template <typename S, typename T>
ConfigKey nested_key(std::string key, std::string help, S RunConfig::*outer, T S::*field) {
  return {key, std::move(help),
          [outer, field, key](RunConfig& c, const std::string& v) { c.*outer.*field = parse_number<T>(key, v); },
          [outer, field](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return num(c.*outer.*field);
            } else {
              return std::to_string(c.*outer.*field);
            }
          }};
}

template <typename R, typename T>
ConfigKey range_key(std::string key, std::string help, R PhantomParams::*range, T R::*end) {
  return {key, std::move(help),
          [range, end, key](RunConfig& c, const std::string& v) { c.phantom.*range.*end = parse_number<T>(key, v); },
          [range, end](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return num(c.phantom.*range.*end);
            } else {
              return std::to_string(c.phantom.*range.*end);
            }
          }};
}

std::vector<ConfigKey> build_schema() {
  std::vector<ConfigKey> k;
  k.push_back(number_key("data.n_samples", "number of generated samples", &RunConfig::n_samples));
  k.push_back({"data.dir", "dataset directory (relative to the output root)",
               [](RunConfig& c, const std::string& v) { c.data_dir = v; },
               [](const RunConfig& c) { return c.data_dir; }});
  k.push_back(nested_key("data.image_size", "pixels per side, multiple of 32", &RunConfig::phantom,
                         &PhantomParams::image_size));
  k.push_back(range_key("data.n_distractors_min", "fewest distractors per image", &PhantomParams::n_distractors,
                        &IntRange::lo));
  k.push_back(range_key("data.n_distractors_max", "most distractors per image", &PhantomParams::n_distractors,
                        &IntRange::hi));
  k.push_back(range_key("data.mass_radius_min", "smallest mass semi-axis (px)", &PhantomParams::mass_radius, &Range::lo));
  k.push_back(range_key("data.mass_radius_max", "largest mass semi-axis (px)", &PhantomParams::mass_radius, &Range::hi));
  k.push_back(nested_key("data.spiculation", "boundary perturbation amplitude in [0,1]", &RunConfig::phantom,
                         &PhantomParams::spiculation));
  k.push_back(range_key("data.master_fg_min", "mass intensity in the master image, low end",
                        &PhantomParams::master_fg_intensity, &Range::lo));
  k.push_back(range_key("data.master_fg_max", "mass intensity in the master image, high end",
                        &PhantomParams::master_fg_intensity, &Range::hi));
  k.push_back(range_key("data.distractor_min", "distractor intensity, low end", &PhantomParams::distractor_intensity,
                        &Range::lo));
  k.push_back(range_key("data.distractor_max", "distractor intensity, high end", &PhantomParams::distractor_intensity,
                        &Range::hi));
  k.push_back(range_key("data.assistant_mass_min", "mass intensity in the assistant image, low end",
                        &PhantomParams::assistant_mass_contrast, &Range::lo));
  k.push_back(range_key("data.assistant_mass_max", "mass intensity in the assistant image, high end",
                        &PhantomParams::assistant_mass_contrast, &Range::hi));
  k.push_back(nested_key("data.noise_sigma", "Gaussian noise std", &RunConfig::phantom, &PhantomParams::noise_sigma));
  k.push_back(nested_key("data.seed", "generator seed", &RunConfig::phantom, &PhantomParams::seed));

  k.push_back({"model.variant", "variant for train / export-attention",
               [](RunConfig& c, const std::string& v) { c.variant = parse_variant_key("model.variant", v); },
               [](const RunConfig& c) { return std::string(variant_name(c.variant)); }});
  k.push_back({"model.variants", "comma-separated variants for benchmark",
               [](RunConfig& c, const std::string& v) {
                 std::vector<Variant> out;
                 std::istringstream is(v);
                 std::string part;
                 while (std::getline(is, part, ',')) out.push_back(parse_variant_key("model.variants", trim(part)));
                 if (out.empty()) throw ConfigError("config key 'model.variants': empty list");
                 c.variants = std::move(out);
               },
               [](const RunConfig& c) {
                 std::string s;
                 for (auto v : c.variants) s += (s.empty() ? "" : ",") + std::string(variant_name(v));
                 return s;
               }});
  k.push_back(number_key("model.bottleneck", "bottleneck width B; decoder block i has B>>(5-i) channels (1024 = full size)",
                         &RunConfig::bottleneck));
  k.push_back(number_key("model.sa_reduction", "SA channel reduction factor r", &RunConfig::sa_reduction));
  k.push_back(number_key("model.sa_dilation", "SA atrous rate D", &RunConfig::sa_dilation));

  k.push_back(nested_key("train.lr0", "initial step size", &RunConfig::train, &TrainConfig::lr0));
  k.push_back(nested_key("train.decay_every", "epochs per halving of the step size", &RunConfig::train,
                         &TrainConfig::decay_every));
  k.push_back(nested_key("train.batch_size", "images per step", &RunConfig::train, &TrainConfig::batch_size));
  k.push_back(nested_key("train.epochs", "training epochs", &RunConfig::train, &TrainConfig::epochs));
  k.push_back(nested_key("train.beta1", "Adam first-moment decay", &RunConfig::train, &TrainConfig::beta1));
  k.push_back(nested_key("train.beta2", "Adam second-moment decay", &RunConfig::train, &TrainConfig::beta2));
  k.push_back(nested_key("train.adam_eps", "Adam denominator guard", &RunConfig::train, &TrainConfig::adam_eps));
  k.push_back({"train.alpha", "weight of the cross-entropy term",
               [](RunConfig& c, const std::string& v) { c.train.loss.alpha = parse_number<double>("train.alpha", v); },
               [](const RunConfig& c) { return num(c.train.loss.alpha); }});
  k.push_back({"train.dice_epsilon", "Dice loss smoothing constant",
               [](RunConfig& c, const std::string& v) {
                 c.train.loss.epsilon = parse_number<double>("train.dice_epsilon", v);
               },
               [](const RunConfig& c) { return num(c.train.loss.epsilon); }});
  k.push_back({"train.clamp", "probability clamp inside the cross-entropy logs",
               [](RunConfig& c, const std::string& v) { c.train.loss.clamp = parse_number<double>("train.clamp", v); },
               [](const RunConfig& c) { return num(c.train.loss.clamp); }});
  k.push_back(nested_key("train.folds", "cross-validation folds", &RunConfig::train, &TrainConfig::folds));
  k.push_back(nested_key("train.runs", "independent runs per variant", &RunConfig::train, &TrainConfig::runs));
  k.push_back(nested_key("train.seed", "base seed for fold split, init and shuffling", &RunConfig::train,
                         &TrainConfig::seed));
  k.push_back(nested_key("train.test_fold", "held-out fold of the single split", &RunConfig::train,
                         &TrainConfig::test_fold));
  k.push_back({"train.full_rotation", "rotate the held-out fold over all folds",
               [](RunConfig& c, const std::string& v) { c.train.full_rotation = parse_bool("train.full_rotation", v); },
               [](const RunConfig& c) { return std::string(c.train.full_rotation ? "true" : "false"); }});
  k.push_back({"train.resume", "continue train from <out>/train_state.ftrs when present",
               [](RunConfig& c, const std::string& v) { c.resume = parse_bool("train.resume", v); },
               [](const RunConfig& c) { return std::string(c.resume ? "true" : "false"); }});

  k.push_back({"export.checkpoint", "checkpoint for export-attention (empty = <out>/model.fckp)",
               [](RunConfig& c, const std::string& v) { c.checkpoint = v; },
               [](const RunConfig& c) { return c.checkpoint; }});
  k.push_back({"export.sample_id", "sample for export-attention (empty = first sample)",
               [](RunConfig& c, const std::string& v) { c.sample_id = v; },
               [](const RunConfig& c) { return c.sample_id; }});
  return k;
}

}  // namespace

ModelSpec RunConfig::model_spec(Variant v) const {
  ModelSpec spec = default_spec(v, bottleneck);
  if (spec.sa) spec.sa = SAOptions{sa_reduction, sa_dilation};
  return spec;
}

std::filesystem::path RunConfig::dataset_path() const {
  const std::filesystem::path p(data_dir);
  return p.is_absolute() ? p : out / p;
}

void RunConfig::validate() const {
  try {
    phantom.validate();
    train.validate();
    if (n_samples < static_cast<std::size_t>(train.folds)) {
      throw std::invalid_argument("data.n_samples must be at least train.folds");
    }
    model_spec(variant).validate();
    for (auto v : variants) model_spec(v).validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = build_schema();
  return schema;
}

void apply_setting(RunConfig& config, std::string_view key, std::string_view value) {
  for (const auto& k : config_schema()) {
    if (k.key == key) {
      k.set(config, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "' (see --help for the list)");
}

void apply_assignment(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) {
    throw ConfigError("expected key=value, got '" + std::string(assignment) + "'");
  }
  apply_setting(config, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void load_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    const std::string body = trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (body.empty()) continue;
    try {
      apply_assignment(config, body);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string config_reference() {
  const RunConfig defaults;
  std::ostringstream os;
  os << "Config keys (key=value, '#' comments; default in brackets):\n";
  for (const auto& k : config_schema()) {
    os << "  " << k.key << " [" << k.get(defaults) << "]\n      " << k.help << '\n';
  }
  return os.str();
}

}  // namespace fuseseg

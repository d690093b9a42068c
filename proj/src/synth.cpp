#include "fuseseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "fuseseg/seeding.hpp"
#include "fuseseg/tensor_io.hpp"

namespace fuseseg {

namespace {

constexpr int kPlacementAttempts = 100;
constexpr double kDistractorScale = 0.6;  // distractor semi-axes relative to the mass range
constexpr int kMinMassArea = 10;

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
double uniform(Rng& rng, const Range& r) { return r.lo == r.hi ? r.lo : uniform(rng, r.lo, r.hi); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Radius of the ellipse (a, b, rotated by phi) along direction theta.
double ellipse_radius(double a, double b, double phi, double theta) {
  const double c = std::cos(theta - phi) / a, s = std::sin(theta - phi) / b;
  return 1.0 / std::sqrt(c * c + s * s);
}

// Boundary perturbation in [-1, 1]: smooth lobes plus narrow spikes.
struct Spiculation {
  int lobes = 0;
  double lobe_phase = 0.0;
  std::vector<double> spike_angle;
  double spike_width = 0.1;

  double operator()(double theta) const {
    const double lobe = std::sin(lobes * theta + lobe_phase);
    double spike = 0.0;
    for (double a : spike_angle) {
      double delta = std::remainder(theta - a, 2.0 * std::numbers::pi);
      spike = std::max(spike, 1.0 - std::abs(delta) / spike_width);
    }
    return 0.6 * lobe + 0.4 * (2.0 * std::max(spike, 0.0) - 1.0);
  }
};

using Mask = std::vector<std::uint8_t>;

struct Blob {
  double cx, cy, a, b, phi;
};

Mask rasterize_mass(const Blob& e, const Spiculation& f, double s, int size) {
  Mask m(static_cast<std::size_t>(size * size), 0);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x - e.cx, dy = y - e.cy;
      const double r = std::hypot(dx, dy);
      const double theta = std::atan2(dy, dx);
      const double bound = ellipse_radius(e.a, e.b, e.phi, theta) * (1.0 + s * f(theta));
      m[static_cast<std::size_t>(y * size + x)] = r <= bound;
    }
  }
  return m;
}

Mask rasterize_ellipse(const Blob& e, int size) {
  Mask m(static_cast<std::size_t>(size * size), 0);
  const double c = std::cos(e.phi), s = std::sin(e.phi);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x - e.cx, dy = y - e.cy;
      const double u = (c * dx + s * dy) / e.a, v = (-s * dx + c * dy) / e.b;
      m[static_cast<std::size_t>(y * size + x)] = u * u + v * v <= 1.0;
    }
  }
  return m;
}

// 3x3 dilation, applied `steps` times.
Mask dilate(Mask m, int size, int steps) {
  for (int step = 0; step < steps; ++step) {
    Mask out = m;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (!m[static_cast<std::size_t>(y * size + x)]) continue;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            if (yy >= 0 && yy < size && xx >= 0 && xx < size) out[static_cast<std::size_t>(yy * size + xx)] = 1;
          }
        }
      }
    }
    m = std::move(out);
  }
  return m;
}

std::size_t area(const Mask& m) { return static_cast<std::size_t>(std::count(m.begin(), m.end(), 1)); }

bool intersects(const Mask& a, const Mask& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] && b[i]) return true;
  }
  return false;
}

Tensor image_tensor(std::vector<double> v, int size) {
  return Tensor::from_values({1, static_cast<std::size_t>(size), static_cast<std::size_t>(size)}, std::move(v));
}

void check_range(const Range& r, const char* name) {
  if (!(r.lo >= 0.0 && r.hi <= 1.0 && r.lo <= r.hi)) {
    throw std::invalid_argument(std::string("phantom ") + name + " range must satisfy 0 <= lo <= hi <= 1");
  }
}

// Shortest decimal form that round-trips.
std::string fmt(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace

void PhantomParams::validate() const {
  if (image_size <= 0 || image_size % 32 != 0) {
    throw std::invalid_argument("phantom image_size must be a positive multiple of 32, got " +
                                std::to_string(image_size));
  }
  if (n_distractors.lo < 0 || n_distractors.lo > n_distractors.hi) {
    throw std::invalid_argument("phantom n_distractors range must satisfy 0 <= lo <= hi");
  }
  if (!(mass_radius.lo > 0.0 && mass_radius.lo <= mass_radius.hi)) {
    throw std::invalid_argument("phantom mass_radius range must satisfy 0 < lo <= hi");
  }
  if (!(spiculation >= 0.0 && spiculation <= 1.0)) throw std::invalid_argument("phantom spiculation must lie in [0,1]");
  if (!(noise_sigma >= 0.0)) throw std::invalid_argument("phantom noise_sigma must be >= 0");
  check_range(master_fg_intensity, "master_fg_intensity");
  check_range(distractor_intensity, "distractor_intensity");
  check_range(assistant_mass_contrast, "assistant_mass_contrast");
  if (!master_fg_intensity.overlaps(distractor_intensity)) {
    throw std::invalid_argument("phantom master mass and distractor intensity ranges must overlap");
  }
  if (assistant_mass_contrast.overlaps(distractor_intensity)) {
    throw std::invalid_argument("phantom assistant mass and distractor intensity ranges must be disjoint");
  }
  const double extent = 2.0 * mass_radius.hi * (1.0 + spiculation) + 4.0;
  if (extent >= image_size) {
    throw std::invalid_argument("phantom mass_radius too large for image_size " + std::to_string(image_size));
  }
}

std::map<std::string, std::string> PhantomParams::to_map() const {
  return {
      {"image_size", std::to_string(image_size)},
      {"n_distractors_min", std::to_string(n_distractors.lo)},
      {"n_distractors_max", std::to_string(n_distractors.hi)},
      {"mass_radius_min", fmt(mass_radius.lo)},
      {"mass_radius_max", fmt(mass_radius.hi)},
      {"spiculation", fmt(spiculation)},
      {"master_fg_min", fmt(master_fg_intensity.lo)},
      {"master_fg_max", fmt(master_fg_intensity.hi)},
      {"distractor_min", fmt(distractor_intensity.lo)},
      {"distractor_max", fmt(distractor_intensity.hi)},
      {"assistant_mass_min", fmt(assistant_mass_contrast.lo)},
      {"assistant_mass_max", fmt(assistant_mass_contrast.hi)},
      {"noise_sigma", fmt(noise_sigma)},
      {"seed", std::to_string(seed)},
  };
}

PhantomParams PhantomParams::from_map(const std::map<std::string, std::string>& kv) {
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("phantom params: missing key '") + key + "'");
    return it->second;
  };
  PhantomParams p;
  try {
    p.image_size = std::stoi(get("image_size"));
    p.n_distractors = {std::stoi(get("n_distractors_min")), std::stoi(get("n_distractors_max"))};
    p.mass_radius = {std::stod(get("mass_radius_min")), std::stod(get("mass_radius_max"))};
    p.spiculation = std::stod(get("spiculation"));
    p.master_fg_intensity = {std::stod(get("master_fg_min")), std::stod(get("master_fg_max"))};
    p.distractor_intensity = {std::stod(get("distractor_min")), std::stod(get("distractor_max"))};
    p.assistant_mass_contrast = {std::stod(get("assistant_mass_min")), std::stod(get("assistant_mass_max"))};
    p.noise_sigma = std::stod(get("noise_sigma"));
    p.seed = std::stoull(get("seed"));
  } catch (const std::invalid_argument&) {
    throw FormatError("phantom params: malformed number");
  } catch (const std::out_of_range&) {
    throw FormatError("phantom params: number out of range");
  }
  return p;
}

std::string sample_id_for(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05zu", index);
  return buf;
}

SegmentationSample generate_sample(const PhantomParams& params, std::size_t index) {
  params.validate();
  const int size = params.image_size;
  Rng rng(derive_seed(params.seed, index));
  const double s = params.spiculation;

  Mask mass;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kPlacementAttempts) {
      throw GenerationError("sample " + std::to_string(index) + ": mass area stayed below " +
                            std::to_string(kMinMassArea) + " px");
    }
    Blob e;
    e.a = uniform(rng, params.mass_radius);
    e.b = uniform(rng, params.mass_radius);
    e.phi = uniform(rng, 0.0, std::numbers::pi);
    Spiculation f;
    f.lobes = uniform_int(rng, 3, 7);
    f.lobe_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    f.spike_angle.resize(static_cast<std::size_t>(uniform_int(rng, 3, 8)));
    for (auto& a : f.spike_angle) a = uniform(rng, -std::numbers::pi, std::numbers::pi);
    f.spike_width = uniform(rng, 0.08, 0.2);
    const double reach = std::max(e.a, e.b) * (1.0 + s) + 1.0;
    e.cx = uniform(rng, reach, size - 1 - reach);
    e.cy = uniform(rng, reach, size - 1 - reach);
    mass = rasterize_mass(e, f, s, size);
    if (area(mass) >= static_cast<std::size_t>(kMinMassArea)) break;
  }

  const Mask keep_out = dilate(mass, size, 2);
  const int n_distractors = uniform_int(rng, params.n_distractors.lo, params.n_distractors.hi);
  std::vector<Mask> distractors;
  std::vector<double> distractor_level;
  for (int d = 0; d < n_distractors; ++d) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlacementAttempts && !placed; ++attempt) {
      Blob e;
      e.a = kDistractorScale * uniform(rng, params.mass_radius);
      e.b = kDistractorScale * uniform(rng, params.mass_radius);
      e.phi = uniform(rng, 0.0, std::numbers::pi);
      const double reach = std::max(e.a, e.b) + 1.0;
      e.cx = uniform(rng, reach, size - 1 - reach);
      e.cy = uniform(rng, reach, size - 1 - reach);
      Mask m = rasterize_ellipse(e, size);
      if (area(m) == 0 || intersects(m, keep_out)) continue;
      distractors.push_back(std::move(m));
      placed = true;
    }
    if (!placed) {
      throw GenerationError("sample " + std::to_string(index) + ": no non-overlapping placement for distractor " +
                            std::to_string(d + 1) + " after " + std::to_string(kPlacementAttempts) + " attempts");
    }
    distractor_level.push_back(uniform(rng, params.distractor_intensity));
  }

  const double master_level = uniform(rng, params.master_fg_intensity);
  const double assistant_level = uniform(rng, params.assistant_mass_contrast);
  const std::size_t n = static_cast<std::size_t>(size * size);
  std::vector<double> master(n, kPhantomBackground), assistant(n, kPhantomBackground), label(n, 0.0),
      distractor_union(n, 0.0);
  for (std::size_t d = 0; d < distractors.size(); ++d) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!distractors[d][i]) continue;
      master[i] = assistant[i] = distractor_level[d];
      distractor_union[i] = 1.0;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!mass[i]) continue;
    master[i] = master_level;
    assistant[i] = assistant_level;
    label[i] = 1.0;
  }
  if (params.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, params.noise_sigma);
    for (auto* img : {&master, &assistant}) {
      for (auto& v : *img) v = std::clamp(v + noise(rng), 0.0, 1.0);
    }
  }

  SegmentationSample out;
  out.sample_id = sample_id_for(index);
  out.master = image_tensor(std::move(master), size);
  out.assistant = image_tensor(std::move(assistant), size);
  out.label = image_tensor(std::move(label), size);
  out.distractors = image_tensor(std::move(distractor_union), size);
  return out;
}

std::vector<SegmentationSample> generate_dataset(const PhantomParams& params, std::size_t count) {
  std::vector<SegmentationSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(params, i));
  return out;
}

Tensor normalize(const Tensor& image) {
  const auto v = image.values();
  std::vector<double> out(v.size(), 0.0);
  if (!v.empty()) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double span = *hi - *lo;
    if (span > 0.0) {
      for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / span;
    }
  }
  return Tensor::from_values(image.shape(), std::move(out));
}

std::vector<std::vector<std::size_t>> kfold_split(std::size_t n_samples, int k, std::uint64_t seed) {
  if (k <= 0) throw std::invalid_argument("kfold_split: k must be positive, got " + std::to_string(k));
  const auto folds = static_cast<std::size_t>(k);
  if (n_samples < folds) {
    throw std::invalid_argument("kfold_split: " + std::to_string(n_samples) + " samples cannot fill " +
                                std::to_string(k) + " folds");
  }
  std::vector<std::size_t> idx(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) idx[i] = i;
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<std::vector<std::size_t>> out(folds);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < folds; ++f) {
    const std::size_t len = n_samples / folds + (f < n_samples % folds ? 1 : 0);
    out[f].assign(idx.begin() + static_cast<long>(pos), idx.begin() + static_cast<long>(pos + len));
    pos += len;
  }
  return out;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
  manifest << "# fuseseg dataset\n";
  for (const auto& [k, v] : dataset.params.to_map()) manifest << k << '=' << v << '\n';
  std::set<std::string> seen;
  for (const auto& s : dataset.samples) {
    if (s.sample_id.empty() || s.sample_id.find_first_of("=/#\n") != std::string::npos) {
      throw std::invalid_argument("write_dataset: invalid sample id '" + s.sample_id + "'");
    }
    if (!seen.insert(s.sample_id).second) {
      throw std::invalid_argument("write_dataset: duplicate sample id '" + s.sample_id + "'");
    }
    const fs::path sd = dir / s.sample_id;
    fs::create_directories(sd);
    save_tensor(sd / "master.ftns", s.master);
    save_tensor(sd / "assistant.ftns", s.assistant);
    save_tensor(sd / "label.ftns", s.label);
    manifest << s.sample_id << '\n';
  }
  if (!manifest.flush()) throw std::runtime_error("failed writing " + (dir / "manifest.txt").string());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path path = dir / "manifest.txt";
  std::ifstream in(path);
  if (!in) throw FormatError(path.string() + ": missing dataset manifest");
  std::map<std::string, std::string> kv;
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq != std::string::npos) {
      if (!ids.empty()) throw FormatError(path.string() + ": parameter line after sample ids");
      kv[line.substr(0, eq)] = line.substr(eq + 1);
    } else {
      ids.push_back(line);
    }
  }
  Dataset ds;
  ds.params = PhantomParams::from_map(kv);
  std::set<std::string> seen;
  const std::size_t side = static_cast<std::size_t>(ds.params.image_size);
  const Shape expect{1, side, side};
  for (const auto& id : ids) {
    if (!seen.insert(id).second) throw FormatError(path.string() + ": sample '" + id + "' listed twice");
    const fs::path sd = dir / id;
    for (const char* f : {"master.ftns", "assistant.ftns", "label.ftns"}) {
      if (!fs::exists(sd / f)) throw FormatError((sd / f).string() + ": missing file listed by the manifest");
    }
    SegmentationSample s;
    s.sample_id = id;
    s.master = load_tensor(sd / "master.ftns");
    s.assistant = load_tensor(sd / "assistant.ftns");
    s.label = load_tensor(sd / "label.ftns");
    for (const Tensor* t : {&s.master, &s.assistant, &s.label}) {
      if (t->shape() != expect) {
        throw FormatError(sd.string() + ": tensor shape " + shape_str(t->shape()) + " does not match manifest size " +
                          shape_str(expect));
      }
    }
    ds.samples.push_back(std::move(s));
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory() && !seen.count(entry.path().filename().string())) {
      throw FormatError(dir.string() + ": sample directory '" + entry.path().filename().string() +
                        "' is not listed in the manifest");
    }
  }
  return ds;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image) {
  const auto& sh = image.shape();
  if (sh.size() < 2 || shape_numel(sh) == 0 || shape_numel(sh) != sh[sh.size() - 2] * sh[sh.size() - 1]) {
    throw ShapeError("write_pgm: expected a single-channel image, got " + shape_str(sh));
  }
  const std::size_t h = sh[sh.size() - 2], w = sh[sh.size() - 1];
  // Min-max scaled; a constant image keeps its level (clamped to [0,1]) so a flat map stays readable.
  const auto v = image.values();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double span = *hi - *lo;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << w << ' ' << h << "\n255\n";
  for (double x : v) {
    const double level = span > 0.0 ? (x - *lo) / span : std::clamp(x, 0.0, 1.0);
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(level * 255.0))));
  }
  if (!out.flush()) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace fuseseg

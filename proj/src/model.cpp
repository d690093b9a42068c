#include "fuseseg/model.hpp"

#include "fuseseg/seeding.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace fuseseg {

namespace {

constexpr std::array<Variant, 9> kVariants{
    Variant::unet,      Variant::unet_sa,   Variant::early_fuse,   Variant::late_fuse, Variant::fuse_origin,
    Variant::fuse_add,  Variant::fuse_unet, Variant::fuse_unet_sa, Variant::proposed,
};

constexpr std::size_t kDepth = 5;

std::uint64_t param_seed(std::uint64_t seed, std::string_view name) {
  return splitmix64(seed ^ fnv1a(name));
}

std::size_t to_size(int v) { return static_cast<std::size_t>(v); }

Tensor conv_weight(const std::string& name, int c_out, int c_in, int k, std::uint64_t seed) {
  return he_init({to_size(c_out), to_size(c_in), to_size(k), to_size(k)}, to_size(c_in * k * k),
                 param_seed(seed, name));
}

}  // namespace

std::span<const Variant> all_variants() { return kVariants; }

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::unet: return "unet";
    case Variant::unet_sa: return "unet_sa";
    case Variant::early_fuse: return "early_fuse";
    case Variant::late_fuse: return "late_fuse";
    case Variant::fuse_origin: return "fuse_origin";
    case Variant::fuse_add: return "fuse_add";
    case Variant::fuse_unet: return "fuse_unet";
    case Variant::fuse_unet_sa: return "fuse_unet_sa";
    case Variant::proposed: return "proposed";
  }
  throw std::invalid_argument("unknown variant");
}

Variant parse_variant(std::string_view name) {
  for (auto v : kVariants) {
    if (variant_name(v) == name) return v;
  }
  std::string valid;
  for (auto v : kVariants) {
    if (!valid.empty()) valid += ", ";
    valid += variant_name(v);
  }
  throw std::invalid_argument("unknown variant '" + std::string(name) + "' (valid: " + valid + ")");
}

bool is_two_stream(Variant v) { return v != Variant::unet && v != Variant::unet_sa; }

bool has_attention(Variant v) {
  return v == Variant::unet_sa || v == Variant::fuse_unet_sa || v == Variant::proposed;
}

bool has_halved_encoder(Variant v) {
  return v == Variant::late_fuse || v == Variant::fuse_unet || v == Variant::fuse_unet_sa ||
         v == Variant::proposed;
}

void SAConfig::validate() const {
  if (n < 1 || r < 1 || D < 1) {
    throw std::invalid_argument("SA config requires n, r, D >= 1 (n=" + std::to_string(n) +
                                ", r=" + std::to_string(r) + ", D=" + std::to_string(D) + ")");
  }
  if (n % r != 0) {
    throw std::invalid_argument("SA channel count " + std::to_string(n) +
                                " is not divisible by reduction factor " + std::to_string(r));
  }
}

Tensor sa_forward(const Tensor& features, const SAConfig& config, const SAWeights& w) {
  config.validate();
  if (features.rank() != 4 || features.dim(1) != to_size(config.n)) {
    throw ShapeError("sa_forward: expected " + std::to_string(config.n) + " input channels, got " +
                     shape_str(features.shape()));
  }
  auto h = relu(conv2d(features, {w.reduce_w, w.reduce_b}));
  h = relu(conv2d(h, {w.dilated_w, w.dilated_b, 1, config.D, same_padding(3, config.D)}));
  return sigmoid(conv2d(h, {w.collapse_w, w.collapse_b}));
}

void ModelSpec::validate() const {
  const std::string where = "model spec (" + std::string(variant_name(variant)) + "): ";
  if (in_channels_per_modality < 1) throw std::invalid_argument(where + "in_channels must be >= 1");
  if (bottleneck_channels < 1 || bottleneck_channels % 32 != 0) {
    throw std::invalid_argument(where + "bottleneck channels must be a positive multiple of 32, got " +
                                std::to_string(bottleneck_channels));
  }
  const bool halved = has_halved_encoder(variant);
  if (halved && bottleneck_channels % 64 != 0) {
    throw std::invalid_argument(where + "halved encoders need bottleneck channels divisible by 64");
  }
  for (std::size_t i = 0; i < kDepth; ++i) {
    const int expected = halved ? decoder_channels(i) / 2 : decoder_channels(i);
    if (encoder_channels[i] != expected) {
      throw std::invalid_argument(where + "encoder block " + std::to_string(i + 1) + " has " +
                                  std::to_string(encoder_channels[i]) + " channels, channel plan requires " +
                                  std::to_string(expected));
    }
  }
  if (has_attention(variant) != sa.has_value()) {
    throw std::invalid_argument(where + (sa ? "SA settings given for an SA-free variant"
                                            : "SA settings missing for an SA variant"));
  }
  if (sa) {
    for (int c : encoder_channels) SAConfig{c, sa->reduction, sa->dilation}.validate();
  }
}

int ModelSpec::decoder_channels(std::size_t block) const {
  return bottleneck_channels >> (kDepth - block);
}

std::string ModelSpec::canonical() const {
  std::ostringstream os;
  os << "variant=" << variant_name(variant) << ";enc=";
  for (std::size_t i = 0; i < kDepth; ++i) os << (i ? "," : "") << encoder_channels[i];
  os << ";bottleneck=" << bottleneck_channels << ";in=" << in_channels_per_modality;
  if (sa) os << ";sa.r=" << sa->reduction << ";sa.D=" << sa->dilation;
  return os.str();
}

ModelSpec ModelSpec::from_canonical(std::string_view text) {
  ModelSpec spec;
  bool has_variant = false, has_enc = false, has_bottleneck = false;
  std::optional<int> sa_r, sa_d;
  auto to_int = [&](const std::string& v) {
    std::size_t used = 0;
    int out = 0;
    try {
      out = std::stoi(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != v.size()) throw std::invalid_argument("model spec: bad integer '" + v + "'");
    return out;
  };
  std::istringstream fields{std::string(text)};
  std::string field;
  while (std::getline(fields, field, ';')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("model spec: bad field '" + field + "'");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "variant") {
      spec.variant = parse_variant(value);
      has_variant = true;
    } else if (key == "enc") {
      std::istringstream parts(value);
      std::string part;
      std::size_t i = 0;
      while (std::getline(parts, part, ',')) {
        if (i == kDepth) throw std::invalid_argument("model spec: too many encoder widths");
        spec.encoder_channels[i++] = to_int(part);
      }
      if (i != kDepth) throw std::invalid_argument("model spec: expected 5 encoder widths");
      has_enc = true;
    } else if (key == "bottleneck") {
      spec.bottleneck_channels = to_int(value);
      has_bottleneck = true;
    } else if (key == "in") {
      spec.in_channels_per_modality = to_int(value);
    } else if (key == "sa.r") {
      sa_r = to_int(value);
    } else if (key == "sa.D") {
      sa_d = to_int(value);
    } else {
      throw std::invalid_argument("model spec: unknown field '" + key + "'");
    }
  }
  if (!has_variant || !has_enc || !has_bottleneck) throw std::invalid_argument("model spec: missing fields");
  if (sa_r.has_value() != sa_d.has_value()) throw std::invalid_argument("model spec: incomplete SA settings");
  if (sa_r) spec.sa = SAOptions{*sa_r, *sa_d};
  spec.validate();
  return spec;
}

std::uint64_t ModelSpec::hash() const { return fnv1a(canonical()); }

ModelSpec default_spec(Variant v, int bottleneck) {
  ModelSpec spec;
  spec.variant = v;
  spec.bottleneck_channels = bottleneck;
  const int shift = has_halved_encoder(v) ? 1 : 0;
  for (std::size_t i = 0; i < kDepth; ++i) {
    spec.encoder_channels[i] = spec.decoder_channels(i) >> shift;
  }
  if (has_attention(v)) spec.sa = SAOptions{};
  return spec;
}

Tensor& Model::parameter(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

void Model::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

Model::Conv Model::add_conv(const std::string& name, int c_in, int c_out, int k, int dilation,
                            std::uint64_t seed) {
  Conv c;
  c.weight = params_.size();
  params_.push_back({name + ".weight", conv_weight(name + ".weight", c_out, c_in, k, seed)});
  c.bias = params_.size();
  params_.push_back({name + ".bias", Tensor::zeros({to_size(c_out)}, true)});
  c.dilation = dilation;
  c.padding = same_padding(k, dilation);
  return c;
}

Model::Conv Model::add_upconv(const std::string& name, int c_in, int c_out, std::uint64_t seed) {
  Conv c;
  c.weight = params_.size();
  // 2x2 stride-2 windows do not overlap: every output sees exactly c_in inputs.
  params_.push_back({name + ".weight", he_init({to_size(c_in), to_size(c_out), 2, 2}, to_size(c_in),
                                               param_seed(seed, name + ".weight"))});
  c.bias = params_.size();
  params_.push_back({name + ".bias", Tensor::zeros({to_size(c_out)}, true)});
  c.stride = 2;
  c.transpose = true;
  topology_.push_back(name + ": upconv2x2 " + std::to_string(c_in) + "->" + std::to_string(c_out));
  return c;
}

Model::Block Model::add_block(const std::string& name, int c_in, int c_out, std::uint64_t seed) {
  Block b{add_conv(name + ".conv1", c_in, c_out, 3, 1, seed), add_conv(name + ".conv2", c_out, c_out, 3, 1, seed)};
  topology_.push_back(name + ": conv3x3 " + std::to_string(c_in) + "->" + std::to_string(c_out) +
                      ", conv3x3 " + std::to_string(c_out) + "->" + std::to_string(c_out));
  return b;
}

Model::SAGate Model::add_gate(const std::string& name, int n, std::uint64_t seed) {
  SAConfig cfg{n, spec_.sa->reduction, spec_.sa->dilation};
  cfg.validate();
  const int m = n / cfg.r;
  SAGate g{cfg, add_conv(name + ".reduce", n, m, 1, 1, seed), add_conv(name + ".dilated", m, m, 3, cfg.D, seed),
           add_conv(name + ".collapse", m, 1, 1, 1, seed)};
  topology_.push_back(name + ": SA n=" + std::to_string(n) + " r=" + std::to_string(cfg.r) +
                      " D=" + std::to_string(cfg.D));
  return g;
}

Tensor Model::apply(const Conv& c, const Tensor& x) const {
  ConvParams p{params_[c.weight].tensor, params_[c.bias].tensor, c.stride, c.dilation, c.padding};
  return c.transpose ? conv_transpose2d(x, p) : conv2d(x, p);
}

Tensor Model::apply(const Block& b, const Tensor& x) const {
  return relu(apply(b.second, relu(apply(b.first, x))));
}

Tensor Model::apply(const SAGate& g, const Tensor& x) const {
  SAWeights w{params_[g.reduce.weight].tensor,   params_[g.reduce.bias].tensor,
              params_[g.dilated.weight].tensor,  params_[g.dilated.bias].tensor,
              params_[g.collapse.weight].tensor, params_[g.collapse.bias].tensor};
  return sa_forward(x, g.config, w);
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  const Variant v = spec.variant;
  const auto& enc = spec.encoder_channels;
  const int in = spec.in_channels_per_modality;
  const int bottleneck = spec.bottleneck_channels;
  const bool two_stream_encoder = is_two_stream(v) && v != Variant::early_fuse;
  const bool fused_levels = two_stream_encoder && v != Variant::late_fuse;

  std::array<int, kDepth> skip{};
  int master_in = v == Variant::early_fuse ? 2 * in : in;
  int assistant_in = in;
  for (std::size_t i = 0; i < kDepth; ++i) {
    const std::string level = std::to_string(i + 1);
    m.master_.blocks.push_back(m.add_block("enc.master." + level, master_in, enc[i], seed));
    if (two_stream_encoder) {
      m.assistant_.blocks.push_back(m.add_block("enc.assistant." + level, assistant_in, enc[i], seed));
    }
    if (spec.sa) {
      m.master_.gates.push_back(m.add_gate("enc.master." + level + ".sa", enc[i], seed));
      if (v == Variant::fuse_unet_sa) {
        m.assistant_.gates.push_back(m.add_gate("enc.assistant." + level + ".sa", enc[i], seed));
      }
    }
    skip[i] = fused_levels && v != Variant::fuse_add ? 2 * enc[i] : enc[i];
    master_in = skip[i];
    assistant_in = enc[i];
  }

  if (v == Variant::late_fuse) {
    m.master_.bottleneck = m.add_block("bottleneck.master", enc[kDepth - 1], bottleneck / 2, seed);
    m.assistant_.bottleneck = m.add_block("bottleneck.assistant", enc[kDepth - 1], bottleneck / 2, seed);
  } else {
    m.bottleneck_ = m.add_block("bottleneck", master_in, bottleneck, seed);
  }

  int prev = bottleneck;
  for (std::size_t r = 0; r < kDepth; ++r) {
    const std::size_t i = kDepth - 1 - r;
    const int out = spec.decoder_channels(i);
    const std::string level = "dec." + std::to_string(i + 1);
    m.up_.push_back(m.add_upconv(level + ".up", prev, out, seed));
    m.decode_.push_back(m.add_block(level, out + skip[i], out, seed));
    prev = out;
  }
  m.head_ = m.add_conv("head", prev, 1, 1, 1, seed);
  m.topology_.push_back("head: conv1x1 " + std::to_string(prev) + "->1, sigmoid");
  return m;
}

ForwardResult Model::forward(const Tensor& master, const std::optional<Tensor>& assistant,
                             const ForwardOptions& options) const {
  const Variant v = spec_.variant;
  if (master.rank() != 4 || master.dim(1) != to_size(spec_.in_channels_per_modality)) {
    throw ShapeError("forward: master must be (N," + std::to_string(spec_.in_channels_per_modality) +
                     ",H,W), got " + shape_str(master.shape()));
  }
  const std::size_t h = master.dim(2), w = master.dim(3);
  if (h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0) {
    throw ShapeError("forward: spatial dims must be positive multiples of 32, got " + shape_str(master.shape()));
  }
  if (is_two_stream(v) != assistant.has_value()) {
    throw std::invalid_argument(std::string("forward: variant ") + std::string(variant_name(v)) +
                                (is_two_stream(v) ? " requires an assistant image" : " takes no assistant image"));
  }
  if (assistant && assistant->shape() != master.shape()) {
    throw ShapeError("forward: assistant " + shape_str(assistant->shape()) + " does not match master " +
                     shape_str(master.shape()));
  }

  ForwardResult result;
  auto gate = [&](const SAGate& g, const Tensor& x, const std::string& site) {
    Tensor map = options.unit_attention
                     ? Tensor::full({x.dim(0), 1, x.dim(2), x.dim(3)}, 1.0)
                     : apply(g, x);
    result.attention.push_back(map);
    result.sites.push_back(site);
    return map;
  };

  std::vector<Tensor> skips;
  Tensor xm = v == Variant::early_fuse ? concat_channels(master, *assistant) : master;
  Tensor xa = (is_two_stream(v) && v != Variant::early_fuse) ? *assistant : Tensor();
  for (std::size_t i = 0; i < kDepth; ++i) {
    const std::string block = "block" + std::to_string(i + 1);
    Tensor fm = apply(master_.blocks[i], xm);
    const bool last = i + 1 == kDepth;
    switch (v) {
      case Variant::unet:
      case Variant::early_fuse:
        skips.push_back(fm);
        break;
      case Variant::unet_sa:
        fm = broadcast_mul(fm, gate(master_.gates[i], fm, block));
        skips.push_back(fm);
        break;
      case Variant::late_fuse: {
        Tensor fa = apply(assistant_.blocks[i], xa);
        skips.push_back(fm);
        xa = maxpool2d(fa);
        break;
      }
      case Variant::fuse_origin:
      case Variant::fuse_add:
      case Variant::fuse_unet:
      case Variant::fuse_unet_sa:
      case Variant::proposed: {
        Tensor fa = apply(assistant_.blocks[i], xa);
        if (v == Variant::fuse_unet_sa) {
          fm = broadcast_mul(fm, gate(master_.gates[i], fm, block + ".master"));
          fa = broadcast_mul(fa, gate(assistant_.gates[i], fa, block + ".assistant"));
        } else if (v == Variant::proposed) {
          const Tensor map = gate(master_.gates[i], fm, block);
          fm = broadcast_mul(fm, map);
          fa = broadcast_mul(fa, map);
        }
        fm = v == Variant::fuse_add ? add(fm, fa) : concat_channels(fm, fa);
        skips.push_back(fm);
        if (!last) xa = maxpool2d(fa);
        break;
      }
    }
    xm = maxpool2d(fm);
  }

  Tensor x = v == Variant::late_fuse
                 ? concat_channels(apply(*master_.bottleneck, xm), apply(*assistant_.bottleneck, xa))
                 : apply(bottleneck_, xm);
  for (std::size_t r = 0; r < kDepth; ++r) {
    const std::size_t i = kDepth - 1 - r;
    x = apply(decode_[r], concat_channels(apply(up_[r], x), skips[i]));
  }
  result.prob = sigmoid(apply(head_, x));
  return result;
}

SABlock::SABlock(const SAConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const int m = config_.n / config_.r;
  auto add = [&](const std::string& name, int c_in, int c_out, int k) {
    params_.push_back({name + ".weight", conv_weight(name + ".weight", c_out, c_in, k, seed)});
    params_.push_back({name + ".bias", Tensor::zeros({to_size(c_out)}, true)});
  };
  add("reduce", config_.n, m, 1);
  add("dilated", m, m, 3);
  add("collapse", m, 1, 1);
}

std::size_t SABlock::param_count() const { return count_params(params_); }

Tensor SABlock::forward(const Tensor& features) const {
  SAWeights w{params_[0].tensor, params_[1].tensor, params_[2].tensor,
              params_[3].tensor, params_[4].tensor, params_[5].tensor};
  return sa_forward(features, config_, w);
}

std::size_t count_params(std::span<const NamedTensor> params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  return total;
}

std::size_t count_params(const Model& model) { return count_params(model.parameters()); }

std::string format_millions(std::size_t count) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1fM", static_cast<double>(count) / 1e6);
  return buf;
}

}  // namespace fuseseg

#include "fuseseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "fuseseg/tensor_io.hpp"

namespace fuseseg {

namespace {

constexpr char kModelMagic[4] = {'F', 'C', 'K', 'P'};
constexpr char kStateMagic[4] = {'F', 'T', 'R', 'S'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kMaxString = 1u << 20;

void write_str(std::ostream& os, const std::string& s) {
  io::write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& is) {
  const std::uint32_t n = io::read_u32(is);
  if (n > kMaxString) throw FormatError("string field of " + std::to_string(n) + " bytes is implausible");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw FormatError("truncated string field");
  return s;
}

void write_magic(std::ostream& os, const char (&magic)[4]) {
  os.write(magic, 4);
  io::write_u32(os, kVersion);
}

void read_magic(std::istream& is, const char (&magic)[4], const char* what) {
  char got[4];
  if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0) throw FormatError(std::string("not a ") + what);
  const std::uint32_t version = io::read_u32(is);
  if (version != kVersion) {
    throw FormatError(std::string(what) + " version " + std::to_string(version) + " is not supported");
  }
}

void write_model(std::ostream& os, const Model& model) {
  write_magic(os, kModelMagic);
  write_str(os, model.spec().canonical());
  io::write_u64(os, model.spec().hash());
  io::write_u64(os, model.parameters().size());
  for (const auto& p : model.parameters()) {
    write_str(os, p.name);
    write_tensor(os, p.tensor);
  }
}

ModelSpec read_spec_header(std::istream& is) {
  read_magic(is, kModelMagic, "model checkpoint");
  const std::string canonical = read_str(is);
  const std::uint64_t hash = io::read_u64(is);
  ModelSpec spec;
  try {
    spec = ModelSpec::from_canonical(canonical);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint spec: ") + e.what());
  }
  if (spec.hash() != hash) throw FormatError("checkpoint spec hash does not match its spec text");
  return spec;
}

// Reads the parameter block into a model built for `spec`.
void read_parameters(std::istream& is, Model& model) {
  auto& params = model.parameters();
  const std::uint64_t count = io::read_u64(is);
  if (count != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (auto& p : params) {
    const std::string name = read_str(is);
    if (name != p.name) throw FormatError("checkpoint tensor '" + name + "' where '" + p.name + "' was expected");
    const Tensor t = read_tensor(is);
    if (t.shape() != p.tensor.shape()) {
      throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_values();
    std::copy(t.values().begin(), t.values().end(), dst.begin());
  }
}

Model read_model(std::istream& is, const ModelSpec* expected) {
  const ModelSpec spec = read_spec_header(is);
  if (expected && spec.hash() != expected->hash()) {
    throw std::invalid_argument("checkpoint was written for '" + spec.canonical() + "', not '" +
                                expected->canonical() + "'");
  }
  Model model = build_model(spec, 0);
  read_parameters(is, model);
  return model;
}

void expect_end(std::istream& is, const std::filesystem::path& path) {
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path.string() + ": trailing bytes");
}

template <typename Fn>
void write_atomically(const std::filesystem::path& path, Fn&& fn) {
  std::ostringstream buf(std::ios::binary);
  fn(buf);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    const std::string data = buf.str();
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out.flush()) throw std::runtime_error("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename Fn>
auto read_file(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(path.string() + ": cannot open");
  try {
    auto out = fn(in);
    expect_end(in, path);
    return out;
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    if (msg.rfind(path.string(), 0) == 0) throw;
    throw FormatError(path.string() + ": " + msg);
  }
}

Tensor vector_tensor(const Shape& shape, const std::vector<double>& v) { return Tensor::from_values(shape, v); }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  write_atomically(path, [&](std::ostream& os) { write_model(os, model); });
}

Model load_checkpoint(const std::filesystem::path& path) {
  return read_file(path, [](std::istream& is) { return read_model(is, nullptr); });
}

Model load_checkpoint(const std::filesystem::path& path, const ModelSpec& expected) {
  return read_file(path, [&](std::istream& is) { return read_model(is, &expected); });
}

void save_training_state(const std::filesystem::path& path, const Model& model, const TrainingState& state) {
  const auto& params = model.parameters();
  const auto& opt = state.optimizer;
  if (opt.m.size() != params.size() || opt.v.size() != params.size() || opt.v_max.size() != params.size()) {
    throw std::invalid_argument("training state: optimizer does not match the model parameters");
  }
  write_atomically(path, [&](std::ostream& os) {
    write_magic(os, kStateMagic);
    io::write_u64(os, state.config_hash);
    io::write_u64(os, state.run_seed);
    io::write_u32(os, static_cast<std::uint32_t>(state.epochs_done));
    io::write_u64(os, state.history.size());
    for (const auto& h : state.history) {
      io::write_u32(os, static_cast<std::uint32_t>(h.epoch));
      io::write_f64(os, h.train_loss);
      io::write_f64(os, h.val_dice);
    }
    io::write_u64(os, opt.t);
    write_model(os, model);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Shape& shape = params[i].tensor.shape();
      write_tensor(os, vector_tensor(shape, opt.m[i]));
      write_tensor(os, vector_tensor(shape, opt.v[i]));
      write_tensor(os, vector_tensor(shape, opt.v_max[i]));
    }
  });
}

TrainingState load_training_state(const std::filesystem::path& path, Model& model) {
  return read_file(path, [&](std::istream& is) {
    read_magic(is, kStateMagic, "training state");
    TrainingState st;
    st.config_hash = io::read_u64(is);
    st.run_seed = io::read_u64(is);
    st.epochs_done = static_cast<int>(io::read_u32(is));
    const std::uint64_t n_hist = io::read_u64(is);
    if (n_hist != static_cast<std::uint64_t>(st.epochs_done)) {
      throw FormatError("history length does not match the completed epoch count");
    }
    for (std::uint64_t i = 0; i < n_hist; ++i) {
      EpochRecord r;
      r.epoch = static_cast<int>(io::read_u32(is));
      r.train_loss = io::read_f64(is);
      r.val_dice = io::read_f64(is);
      st.history.push_back(r);
    }
    st.optimizer.t = io::read_u64(is);
    const ModelSpec spec = read_spec_header(is);
    if (spec.hash() != model.spec().hash()) {
      throw std::invalid_argument("training state was written for '" + spec.canonical() + "', not '" +
                                  model.spec().canonical() + "'");
    }
    read_parameters(is, model);
    for (const auto& p : model.parameters()) {
      for (auto* dst : {&st.optimizer.m, &st.optimizer.v, &st.optimizer.v_max}) {
        const Tensor t = read_tensor(is);
        if (t.shape() != p.tensor.shape()) throw FormatError("optimizer moment shape mismatch for '" + p.name + "'");
        dst->emplace_back(t.values().begin(), t.values().end());
      }
    }
    return st;
  });
}

}  // namespace fuseseg

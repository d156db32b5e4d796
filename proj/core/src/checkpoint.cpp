#include "gbnlab/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "gbnlab/error.hpp"

namespace gbnlab {

namespace {

constexpr char kMagic[8] = {'G', 'B', 'N', 'L', 'A', 'B', 'C', 'K'};

using Topology = std::vector<std::pair<std::string, std::string>>;

struct NamedState {
  std::string name;
  BnBranchState* state;
};

std::vector<NamedState> bn_states(LeNet& model) {
  std::vector<NamedState> out;
  auto& norms = model.norms();
  for (std::size_t slot = 0; slot < norms.size(); ++slot) {
    const std::string prefix = "norm" + std::to_string(slot + 1) + ".";
    auto& branches = norms[slot].branches();
    for (std::size_t k = 0; k < branches.size(); ++k) {
      out.push_back({prefix + "branch" + std::to_string(k), &branches[k]});
    }
    if (auto& control = norms[slot].split_control()) {
      out.push_back({prefix + "control0", &(*control)[0]});
      out.push_back({prefix + "control1", &(*control)[1]});
    }
  }
  return out;
}

class Writer {
 public:
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { bytes_.insert(bytes_.end(), p, p + n); }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::vector<char> bytes_;
};

class Reader {
 public:
  Reader(std::vector<char> bytes, std::filesystem::path path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void expect_magic() {
    need(sizeof(kMagic));
    if (std::memcmp(bytes_.data(), kMagic, sizeof(kMagic)) != 0) {
      throw FormatError(path_.string() + ": not a gbnlab checkpoint");
    }
    pos_ += sizeof(kMagic);
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw LengthError(path_.string() + ": truncated checkpoint");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= std::uint64_t{static_cast<unsigned char>(bytes_[pos_ + i])} << (8 * i);
    }
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::vector<char> bytes_;
  std::filesystem::path path_;
  std::size_t pos_ = 0;
};

Reader open(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  Reader r({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()}, path);
  r.expect_magic();
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError(path.string() + ": checkpoint version " + std::to_string(version) +
                       ", this build reads version " + std::to_string(kCheckpointVersion));
  }
  return r;
}

Topology read_topology(Reader& r) {
  Topology t(r.u32());
  for (auto& [key, value] : t) {
    key = r.str();
    value = r.str();
  }
  return t;
}

std::string describe(const Topology& t, std::size_t i) {
  return i < t.size() ? t[i].first + "=" + t[i].second : "<missing>";
}

}  // namespace

void save_checkpoint(const LeNet& model, const TrainingRngState& rng,
                     const std::filesystem::path& path) {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.u32(kCheckpointVersion);

  const Topology topology = model.config().topology();
  w.u32(static_cast<std::uint32_t>(topology.size()));
  for (const auto& [key, value] : topology) {
    w.str(key);
    w.str(value);
  }
  w.u64(rng.seed);
  w.u64(rng.steps);

  const auto params = model.parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (std::size_t d : p.tensor.shape()) w.u64(d);
    for (double v : p.tensor.data()) w.f64(v);
  }

  const auto states = bn_states(const_cast<LeNet&>(model));
  w.u32(static_cast<std::uint32_t>(states.size()));
  for (const auto& [name, state] : states) {
    w.str(name);
    w.u64(state->channels());
    for (double v : state->running_mean) w.f64(v);
    for (double v : state->running_var) w.f64(v);
    w.f64(state->xi);
    w.f64(state->alpha);
    w.u64(state->num_batches_seen);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

TrainingRngState load_checkpoint(LeNet& model, const std::filesystem::path& path) {
  Reader r = open(path);
  const Topology stored = read_topology(r);
  const Topology expected = model.config().topology();
  for (std::size_t i = 0; i < std::max(stored.size(), expected.size()); ++i) {
    if (i >= stored.size() || i >= expected.size() || stored[i] != expected[i]) {
      throw TopologyError(path.string() + ": topology differs at entry " + std::to_string(i) +
                          ": checkpoint has " + describe(stored, i) + ", model has " +
                          describe(expected, i));
    }
  }
  TrainingRngState rng;
  rng.seed = r.u64();
  rng.steps = r.u64();

  const auto params = model.parameters();
  if (r.u32() != params.size()) throw TopologyError(path.string() + ": parameter count differs");
  for (const auto& p : params) {
    const std::string name = r.str();
    if (name != p.name) {
      throw TopologyError(path.string() + ": expected parameter " + p.name + ", found " + name);
    }
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    if (shape != p.tensor.shape()) {
      throw TopologyError(path.string() + ": parameter " + name + " has shape " +
                          shape_to_string(shape) + ", model expects " +
                          shape_to_string(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v = r.f64();
  }

  // Split-control states are created on demand when the checkpoint has them.
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    if (name.find(".control0") != std::string::npos) {
      const std::size_t slot = std::stoul(name.substr(4)) - 1;
      if (slot < model.norms().size() && !model.norms()[slot].split_control()) {
        model.norms()[slot].enable_split_control();
      }
    }
    const auto states = bn_states(model);
    BnBranchState* state = nullptr;
    for (const auto& s : states) {
      if (s.name == name) state = s.state;
    }
    if (!state) throw TopologyError(path.string() + ": unknown normalization state " + name);
    const std::uint64_t c = r.u64();
    if (c != state->channels()) {
      throw TopologyError(path.string() + ": " + name + " has " + std::to_string(c) + " channels");
    }
    for (double& v : state->running_mean) v = r.f64();
    for (double& v : state->running_var) v = r.f64();
    state->xi = r.f64();
    state->alpha = r.f64();
    state->num_batches_seen = r.u64();
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after checkpoint");
  return rng;
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  Reader r = open(path);
  ModelConfig config;
  for (const auto& [key, value] : read_topology(r)) {
    auto num = [&] { return static_cast<std::size_t>(std::stoull(value)); };
    if (key == "arch") {
      if (value != "lenet") throw TopologyError(path.string() + ": unknown architecture " + value);
    } else if (key == "norm") {
      config.norm = parse_norm_kind(value);
    } else if (key == "branches") {
      if (num() >= 2) config.num_branches = num();
    } else if (key == "input_size") {
      config.input_size = num();
    } else if (key == "kernel") {
      config.kernel = num();
    } else if (key == "conv1_channels") {
      config.conv1_channels = num();
    } else if (key == "conv2_channels") {
      config.conv2_channels = num();
    } else if (key == "hidden") {
      config.hidden = num();
    } else if (key == "classes") {
      config.classes = num();
    } else if (key == "gate_hidden_channels") {
      config.gate_hidden_channels = num();
    } else if (key == "fc_gate_hidden") {
      config.fc_gate_hidden = num();
    } else {
      throw TopologyError(path.string() + ": unknown topology entry " + key);
    }
  }
  return config;
}

}  // namespace gbnlab

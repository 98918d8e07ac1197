#include <cstring>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "odseg/network.hpp"
#include "odseg/text.hpp"

namespace odseg {

namespace {

constexpr char kMagic[4] = {'O', 'D', 'S', 'C'};
const std::string kMomentumPrefix = "momentum/";

std::string config_block(const NetworkConfig& net, const TrainerConfig& tr, std::uint64_t seed) {
  auto entries = network_config_entries(net);
  entries["trainer.total_steps"] = std::to_string(tr.total_steps);
  entries["trainer.initial_lr"] = text::format_double(tr.initial_lr);
  entries["trainer.momentum"] = text::format_double(tr.momentum);
  entries["trainer.lr_power"] = text::format_double(tr.lr_power);
  entries["trainer.grad_clip"] = text::format_double(tr.grad_clip);
  entries["trainer.seed"] = std::to_string(seed);
  std::string out;
  for (const auto& [k, v] : entries) out += k + " = " + v + "\n";
  return out;
}

template <typename T>
void write_record(io::Writer& w, const std::string& name, const Shape& shape, const T* values) {
  w.text(name);
  w.u8(static_cast<std::uint8_t>(shape.size()));
  for (Index e : shape) w.u32(static_cast<std::uint32_t>(e));
  w.bytes(values, static_cast<std::size_t>(shape_numel(shape)) * sizeof(T));
}

template <typename T>
void write_checkpoint(const std::string& path, const Network<T>& net, const TrainerConfig& tr, std::uint64_t seed,
                      std::int64_t step, const std::map<std::string, std::vector<T>>* momentum,
                      const std::string& rng_state) {
  io::Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.u8(static_cast<std::uint8_t>(sizeof(T)));
  w.text(config_block(net.config(), tr, seed));
  w.u64(static_cast<std::uint64_t>(step));
  w.text(rng_state);
  const auto params = net.parameters();
  std::uint32_t records = static_cast<std::uint32_t>(params.size());
  if (momentum) records += static_cast<std::uint32_t>(momentum->size());
  w.u32(records);
  for (const auto& [name, t] : params) write_record(w, name, t.shape(), t.ptr());
  if (momentum) {
    // Momentum buffers share their parameter's shape.
    std::map<std::string, Shape> shapes;
    for (const auto& [name, t] : params) shapes[name] = t.shape();
    for (const auto& [name, v] : *momentum) write_record(w, kMomentumPrefix + name, shapes.at(name), v.data());
  }
  io::write_file(path, w.buffer());
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const Trainer<T>& trainer) {
  std::ostringstream rng;
  rng << trainer.rng();
  write_checkpoint(path, trainer.network(), trainer.config(), trainer.seed(), trainer.steps_done(),
                   &trainer.momentum(), rng.str());
}

template <typename T>
void save_checkpoint(const std::string& path, const Network<T>& net) {
  write_checkpoint<T>(path, net, TrainerConfig{}, 0, 0, nullptr, "");
}

CheckpointData read_checkpoint(const std::string& path) {
  const auto buf = io::read_file(path);
  io::Reader r(buf, "checkpoint " + path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("checkpoint " + path + ": bad magic bytes");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint " + path + ": unsupported version " + std::to_string(version));
  CheckpointData d;
  d.precision = r.u8();
  if (d.precision != 4 && d.precision != 8)
    throw FormatError("checkpoint " + path + ": unsupported precision " + std::to_string(d.precision));

  std::map<std::string, std::string> entries;
  std::istringstream block(r.text());
  for (std::string line; std::getline(block, line);) {
    if (text::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint " + path + ": malformed config line '" + line + "'");
    entries[text::trim(line.substr(0, eq))] = text::trim(line.substr(eq + 1));
  }
  try {
    std::map<std::string, std::string> net_entries;
    for (const auto& [k, v] : entries) {
      if (k.rfind("network.", 0) == 0) net_entries[k] = v;
      else if (k == "trainer.total_steps") d.trainer.total_steps = text::parse_int(k, v);
      else if (k == "trainer.initial_lr") d.trainer.initial_lr = text::parse_double(k, v);
      else if (k == "trainer.momentum") d.trainer.momentum = text::parse_double(k, v);
      else if (k == "trainer.lr_power") d.trainer.lr_power = text::parse_double(k, v);
      else if (k == "trainer.grad_clip") d.trainer.grad_clip = text::parse_double(k, v);
      else if (k == "trainer.seed") d.seed = static_cast<std::uint64_t>(std::stoull(v));
      else throw ConfigError("unknown key '" + k + "'");
    }
    d.network = network_config_from_entries(net_entries);
    d.network.validate();
  } catch (const std::exception& e) {
    throw FormatError("checkpoint " + path + ": " + e.what());
  }

  d.step = static_cast<std::int64_t>(r.u64());
  d.rng_state = r.text();
  const std::uint32_t records = r.u32();
  for (std::uint32_t i = 0; i < records; ++i) {
    const std::string name = r.text();
    const std::uint8_t ndim = r.u8();
    if (ndim == 0 || ndim > 8) throw FormatError("checkpoint " + path + ": record '" + name + "' has bad rank");
    Shape shape;
    std::size_t n = 1;
    for (std::uint8_t a = 0; a < ndim; ++a) {
      const std::uint32_t e = r.u32();
      if (e == 0) throw FormatError("checkpoint " + path + ": record '" + name + "' has a zero extent");
      // Bounded by the bytes left, so the product cannot overflow.
      if (e > r.remaining() / (n * d.precision)) throw FormatError("checkpoint " + path + ": truncated file");
      n *= e;
      shape.push_back(e);
    }
    r.require(n * d.precision);
    std::vector<double> values(static_cast<std::size_t>(n));
    for (auto& v : values) v = d.precision == 4 ? static_cast<double>(r.f32()) : r.value<double>();
    if (!d.tensors.emplace(name, std::make_pair(std::move(shape), std::move(values))).second)
      throw FormatError("checkpoint " + path + ": duplicate record '" + name + "'");
  }
  if (r.remaining() != 0) throw FormatError("checkpoint " + path + ": trailing bytes after last record");
  return d;
}

template <typename T>
Network<T> network_from_checkpoint(const CheckpointData& data) {
  if (data.precision != sizeof(T))
    throw FormatError("checkpoint stores " + std::to_string(data.precision) + "-byte values, expected " +
                      std::to_string(sizeof(T)));
  Network<T> net = Network<T>::build(data.network, 0);
  std::set<std::string> seen;
  for (auto& [name, t] : net.parameters()) {
    const auto it = data.tensors.find(name);
    if (it == data.tensors.end()) throw FormatError("checkpoint is missing parameter '" + name + "'");
    if (it->second.first != t.shape())
      throw FormatError("parameter '" + name + "' has shape " + shape_str(it->second.first) + ", network expects " +
                        shape_str(t.shape()));
    auto w = t.leaf_data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(it->second.second[i]);
    seen.insert(name);
  }
  for (const auto& [name, rec] : data.tensors)
    if (name.rfind(kMomentumPrefix, 0) != 0 && !seen.count(name))
      throw FormatError("checkpoint has unknown parameter '" + name + "'");
  return net;
}

template <typename T>
void restore_trainer(Trainer<T>& trainer, const CheckpointData& data) {
  std::map<std::string, std::vector<T>> momentum;
  std::map<std::string, Index> sizes;
  for (const auto& [name, t] : trainer.network().parameters()) sizes[name] = t.numel();
  for (const auto& [name, rec] : data.tensors) {
    if (name.rfind(kMomentumPrefix, 0) != 0) continue;
    const std::string param = name.substr(kMomentumPrefix.size());
    const auto it = sizes.find(param);
    if (it == sizes.end()) throw FormatError("momentum buffer for unknown parameter '" + param + "'");
    if (static_cast<Index>(rec.second.size()) != it->second)
      throw FormatError("momentum buffer for '" + param + "' has the wrong size");
    momentum[param] = std::vector<T>(rec.second.begin(), rec.second.end());
  }
  std::mt19937_64 rng;
  if (!data.rng_state.empty()) {
    std::istringstream in(data.rng_state);
    in >> rng;
    if (!in) throw FormatError("checkpoint RNG state is malformed");
  } else {
    rng.seed(data.seed);
  }
  trainer.restore(data.step, std::move(momentum), rng);
}

#define ODSEG_INSTANTIATE_CHECKPOINT(T)                                  \
  template void save_checkpoint(const std::string&, const Trainer<T>&); \
  template void save_checkpoint(const std::string&, const Network<T>&); \
  template Network<T> network_from_checkpoint(const CheckpointData&);   \
  template void restore_trainer(Trainer<T>&, const CheckpointData&);

ODSEG_INSTANTIATE_CHECKPOINT(float)
ODSEG_INSTANTIATE_CHECKPOINT(double)

}  // namespace odseg

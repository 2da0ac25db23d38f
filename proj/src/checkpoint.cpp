#include "famseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "famseg/config.hpp"

namespace famseg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'F', 'A', 'M', 'S', 'E', 'G', 'C', 'K'};

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot write checkpoint " + path);
  }
  template <typename T>
  void pod(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void array(const NamedArray& a) {
    str(a.name);
    pod(static_cast<std::uint32_t>(a.shape.size()));
    for (int d : a.shape) pod(static_cast<std::uint32_t>(d));
    out_.write(reinterpret_cast<const char*>(a.data.data()), static_cast<std::streamsize>(a.data.size() * 8));
  }
  void flush() {
    out_.flush();
    if (!out_) throw DataError("checkpoint write failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw DataError("cannot open checkpoint " + path);
  }
  void raw(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw IncompatibleError(path_ + ": truncated checkpoint");
  }
  template <typename T>
  T pod() {
    T v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    if (n > (1u << 26)) throw IncompatibleError(path_ + ": implausible string length");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  NamedArray array() {
    NamedArray a;
    a.name = str();
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) throw IncompatibleError(path_ + ": implausible rank for " + a.name);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      a.shape.push_back(static_cast<int>(pod<std::uint32_t>()));
      n *= static_cast<std::size_t>(a.shape.back());
    }
    if (n > (1u << 28)) throw IncompatibleError(path_ + ": implausible size for " + a.name);
    a.data.resize(n);
    raw(a.data.data(), n * 8);
    return a;
  }

 private:
  std::string path_;
  std::ifstream in_;
};

}  // namespace

std::uint64_t Checkpoint::digest() const { return fnv1a64(model_config); }

Checkpoint make_checkpoint(const FamSegModel& model, const std::map<std::string, double>& meta,
                           const Optimizer* optimizer) {
  Checkpoint c;
  c.model_config = model_config_text(model.config());
  c.meta = meta;
  for (const auto& [name, t] : model.params().entries()) {
    c.params.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  }
  if (optimizer) {
    c.meta["optimizer_steps"] = static_cast<double>(optimizer->steps());
    for (auto& [name, buf] : optimizer->export_state()) {
      c.optimizer.push_back({name, {static_cast<int>(buf.size())}, buf});
    }
  }
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  // Write-then-rename so a crash never leaves a half-written file in place.
  const std::string tmp = path + ".tmp";
  {
    Writer w(tmp);
    for (char ch : kMagic) w.pod(ch);
    w.pod(Checkpoint::kVersion);
    w.pod(ckpt.digest());
    w.str(ckpt.model_config);
    w.pod(static_cast<std::uint32_t>(ckpt.meta.size()));
    for (const auto& [k, v] : ckpt.meta) {
      w.str(k);
      w.pod(v);
    }
    for (const auto* table : {&ckpt.params, &ckpt.optimizer}) {
      w.pod(static_cast<std::uint32_t>(table->size()));
      for (const auto& a : *table) w.array(a);
    }
    w.flush();
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path)) throw DataError("no such checkpoint: " + path);
  Reader r(path);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kMagic, 8) != 0) throw IncompatibleError(path + ": not a checkpoint file");
  const auto version = r.pod<std::uint32_t>();
  if (version != Checkpoint::kVersion) {
    throw IncompatibleError(path + ": format version " + std::to_string(version) + ", expected " +
                            std::to_string(Checkpoint::kVersion));
  }
  const auto digest = r.pod<std::uint64_t>();
  Checkpoint c;
  c.model_config = r.str();
  if (c.digest() != digest) throw IncompatibleError(path + ": config digest does not match embedded config");
  const auto n_meta = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    c.meta[k] = r.pod<double>();
  }
  for (auto* table : {&c.params, &c.optimizer}) {
    const auto n = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < n; ++i) table->push_back(r.array());
  }
  return c;
}

void load_parameters(FamSegModel& model, const Checkpoint& ckpt) {
  const auto& entries = model.params().entries();
  if (entries.size() != ckpt.params.size()) {
    throw IncompatibleError("checkpoint holds " + std::to_string(ckpt.params.size()) + " parameters, model has " +
                            std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& [name, t] = entries[i];
    const NamedArray& a = ckpt.params[i];
    if (a.name != name || a.shape != t.shape()) {
      throw IncompatibleError("checkpoint parameter " + a.name + " " + shape_str(a.shape) + " does not match " +
                              name + " " + shape_str(t.shape()));
    }
    Tensor dst = t;
    std::copy(a.data.begin(), a.data.end(), dst.mutable_data().begin());
  }
}

std::unique_ptr<FamSegModel> restore_model(const Checkpoint& ckpt) {
  ModelConfig cfg;
  try {
    cfg = parse_model_config(ckpt.model_config);
  } catch (const ConfigError& e) {
    throw IncompatibleError(std::string("checkpoint config: ") + e.what());
  }
  auto model = std::make_unique<FamSegModel>(cfg, 0);
  load_parameters(*model, ckpt);
  return model;
}

void restore_optimizer(Optimizer& optimizer, const Checkpoint& ckpt) {
  std::vector<std::pair<std::string, std::vector<double>>> buffers;
  for (const auto& a : ckpt.optimizer) buffers.emplace_back(a.name, a.data);
  const auto it = ckpt.meta.find("optimizer_steps");
  optimizer.import_state(it == ckpt.meta.end() ? 0 : static_cast<std::int64_t>(it->second), buffers);
}

}  // namespace famseg

#include "famseg/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "famseg/image_io.hpp"
#include "famseg/rng.hpp"

namespace fs = std::filesystem;

namespace famseg {

SplitIndices split(int n, const std::array<double, 3>& ratios, std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || ratios[0] < 0 || ratios[1] < 0 || ratios[2] < 0) {
    throw ConfigError("split: ratios must be non-negative and sum to 1");
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(0, i)]);
  const int n_val = static_cast<int>(std::lround(n * ratios[1]));
  const int n_test = static_cast<int>(std::lround(n * ratios[2]));
  const int n_train = n - n_val - n_test;
  if (n_train <= 0 || n_val <= 0 || n_test <= 0) {
    throw DataError("split: " + std::to_string(n) + " samples leave an empty split");
  }
  SplitIndices s;
  s.train.assign(order.begin(), order.begin() + n_train);
  s.val.assign(order.begin() + n_train, order.begin() + n_train + n_val);
  s.test.assign(order.begin() + n_train + n_val, order.end());
  return s;
}

std::vector<ManifestEntry> read_manifest(const std::string& dir) {
  const fs::path path = fs::path(dir) / kManifestName;
  std::ifstream in(path);
  if (!in) throw DataError("no manifest at " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    ManifestEntry e;
    if (!std::getline(ss, e.image, '\t') || !std::getline(ss, e.mask, '\t') || !std::getline(ss, e.split)) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected image<TAB>mask<TAB>split");
    }
    if (e.split != "train" && e.split != "val" && e.split != "test") {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": unknown split '" + e.split + "'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

void write_manifest(const std::string& dir, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(fs::path(dir) / kManifestName);
  if (!out) throw DataError("cannot write manifest in " + dir);
  out << "# image\tmask\tsplit\n";
  for (const auto& e : entries) out << e.image << '\t' << e.mask << '\t' << e.split << '\n';
}

namespace {

nlohmann::json meta_json(const PhantomMeta& m) {
  nlohmann::json j{{"seed", m.seed},           {"image_size", m.image_size}, {"mix", static_cast<int>(m.mix)},
                   {"background", m.background}, {"contrast", m.contrast},     {"noise", m.noise}};
  if (m.femur) {
    const auto& f = *m.femur;
    j["femur"] = {{"cx", f.cx}, {"cy", f.cy}, {"length", f.length}, {"thickness", f.thickness}, {"angle", f.angle}};
  }
  if (m.cranium) {
    const auto& c = *m.cranium;
    j["cranium"] = {{"cx", c.cx}, {"cy", c.cy}, {"a", c.a}, {"b", c.b}, {"thickness", c.thickness},
                    {"angle", c.angle}};
  }
  return j;
}

}  // namespace

std::vector<ManifestEntry> write_dataset(const std::string& dir, const std::vector<SegmentationSample>& samples,
                                         const SplitIndices& splits) {
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  std::vector<std::string> tags(samples.size());
  auto tag = [&](const std::vector<int>& idx, const char* name) {
    for (int i : idx) {
      if (i < 0 || static_cast<std::size_t>(i) >= samples.size()) throw DataError("split index out of range");
      tags[i] = name;
    }
  };
  tag(splits.train, "train");
  tag(splits.val, "val");
  tag(splits.test, "test");

  std::vector<ManifestEntry> entries;
  std::ofstream meta(fs::path(dir) / "meta.jsonl");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (tags[i].empty()) throw DataError("sample " + std::to_string(i) + " belongs to no split");
    char name[32];
    std::snprintf(name, sizeof name, "%06zu.png", i);
    ManifestEntry e{std::string("images/") + name, std::string("masks/") + name, tags[i]};
    save_image_png((fs::path(dir) / e.image).string(), samples[i].image);
    save_mask_png((fs::path(dir) / e.mask).string(), samples[i].mask);
    if (samples[i].meta) {
      nlohmann::json j = meta_json(*samples[i].meta);
      j["image"] = e.image;
      meta << j.dump() << '\n';
    }
    entries.push_back(std::move(e));
  }
  write_manifest(dir, entries);
  return entries;
}

std::vector<SegmentationSample> Dataset::subset(const std::string& split) const {
  std::vector<SegmentationSample> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (splits[i] == split) out.push_back(samples[i]);
  }
  return out;
}

Dataset load_dataset(const std::string& dir, int num_classes) {
  Dataset d;
  for (const auto& e : read_manifest(dir)) {
    d.samples.push_back(
        load_png_pair((fs::path(dir) / e.image).string(), (fs::path(dir) / e.mask).string(), num_classes));
    d.splits.push_back(e.split);
  }
  if (d.samples.empty()) throw DataError("dataset " + dir + " is empty");
  return d;
}

}  // namespace famseg

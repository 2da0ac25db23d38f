#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "famseg/phantom.hpp"

namespace famseg {

struct SplitIndices {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
};

/// Seeded permutation of 0..n-1 cut into three parts. The val and test sizes
/// are round(n * ratio); train takes the rest.
SplitIndices split(int n, const std::array<double, 3>& ratios, std::uint64_t seed);

struct ManifestEntry {
  std::string image;  // relative to the dataset directory
  std::string mask;
  std::string split;  // train | val | test
};

inline constexpr const char* kManifestName = "manifest.tsv";

/// One tab-separated line per pair; '#' starts a comment line.
std::vector<ManifestEntry> read_manifest(const std::string& dir);
void write_manifest(const std::string& dir, const std::vector<ManifestEntry>& entries);

/// Writes images/, masks/, the manifest and meta.jsonl (generator geometry).
std::vector<ManifestEntry> write_dataset(const std::string& dir, const std::vector<SegmentationSample>& samples,
                                         const SplitIndices& splits);

struct Dataset {
  std::vector<SegmentationSample> samples;
  std::vector<std::string> splits;

  std::vector<SegmentationSample> subset(const std::string& split) const;
};

Dataset load_dataset(const std::string& dir, int num_classes);

}  // namespace famseg

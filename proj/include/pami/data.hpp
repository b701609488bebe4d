#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "pami/image.hpp"
#include "pami/rng.hpp"

namespace pami {

namespace fs = std::filesystem;

using ClassMap = Grid<std::uint8_t>;

struct Scan {
  std::string id;
  std::vector<Image2D> slices;
  std::vector<ClassMap> labels;  // 0 = background, k = class k
  std::map<int, std::string> class_table;

  int slice_count() const { return static_cast<int>(slices.size()); }
  bool slice_has_class(int slice, int class_id) const;
  // Inclusive slice range containing class_id, or {-1, -1}.
  std::pair<int, int> class_range(int class_id) const;
};

struct ClassInfo {
  int id = 0;
  std::string name;
};

struct ScanRef {
  std::string id;
  std::string dir;  // relative to the dataset root
  int slice_count = 0;
};

struct DatasetManifest {
  std::string version = "pami-synth-1";
  fs::path root;
  int height = 0;
  int width = 0;
  std::uint64_t seed = 0;
  std::vector<ClassInfo> classes;
  std::vector<ScanRef> scans;
  std::vector<std::vector<std::string>> folds;  // fold -> held-out scan ids

  int fold_count() const { return static_cast<int>(folds.size()); }
  std::vector<std::string> held_out(int fold) const;
  std::vector<std::string> training(int fold) const;
  // Throws "invalid-count" unless every scan is in exactly one fold.
  void validate() const;
};

struct SynthConfig {
  int n_scans = 10;
  int slices_per_scan = 16;
  int height = 64;
  int width = 64;
  int n_classes = 4;
  int n_folds = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

// Contiguous fold blocks, remainder scans going to the earlier folds.
std::vector<std::vector<std::string>> split_folds(const std::vector<std::string>& ids, int n_folds);

Scan synthesize_scan(const SynthConfig& cfg, int index);
DatasetManifest generate_synthetic_dataset(const SynthConfig& cfg, const fs::path& out);

DatasetManifest load_manifest(const fs::path& root);
void save_manifest(const DatasetManifest& manifest);
Scan load_scan(const DatasetManifest& manifest, const ScanRef& ref);

struct Dataset {
  DatasetManifest manifest;
  std::vector<Scan> scans;  // manifest order

  static Dataset load(const fs::path& root);
  static Dataset in_memory(const SynthConfig& cfg);
  const Scan& scan(const std::string& id) const;
  int scan_index(const std::string& id) const;
};

// Pseudo-label stand-in: k-means on (intensity, row/H, col/W), then
// components under kMinComponent pixels merged into their largest neighbour.
inline constexpr int kPseudoIterations = 20;
inline constexpr int kMinComponent = 10;
LabelMap compute_pseudo_labels(const Image2D& image, int k, std::uint64_t seed);

struct Components {
  LabelMap id;                // component index per pixel
  std::vector<int> sizes;     // per component
  std::vector<int> labels;    // source label per component
  std::vector<bool> touches_border;
};
Components connected_components(const LabelMap& labels);

// Connected pseudo-label regions usable as training classes: area at least
// min_area and not touching the image border.
std::vector<Mask> candidate_regions(const LabelMap& pseudo, int min_area);

struct AugmentConfig {
  double rotation_deg = 15.0;
  double translation = 0.1;  // fraction of the image size
  double scale_lo = 0.9, scale_hi = 1.1;
  double gamma_lo = 0.8, gamma_hi = 1.25;

  static AugmentConfig identity();
};

struct Affine {
  double angle = 0.0;  // radians
  double scale = 1.0;
  double dy = 0.0, dx = 0.0;  // pixels
  double gamma = 1.0;
};

Affine draw_affine(const AugmentConfig& cfg, int height, int width, Rng& rng);
Image2D warp_image(const Image2D& image, const Affine& a);
Mask warp_mask(const Mask& mask, const Affine& a);

struct Episode {
  Image2D support;
  Mask support_mask;
  Image2D query;
  Mask query_mask;
  int class_id = 0;  // organ class for evaluation, pseudo-label for training
  std::string episode_id;
  std::string query_scan, support_scan;
  int query_slice = -1, support_slice = -1;
};

enum class Setting { one = 1, two = 2 };
Setting parse_setting(int value);

struct SamplerConfig {
  int fold = 0;
  Setting setting = Setting::one;
  std::vector<int> held_out_classes;  // Setting 2 filter; empty = every class
  int pseudo_k = 8;
  int min_region_area = 100;
  int max_draws = 100;
  AugmentConfig augment;
};

class EpisodeSampler {
 public:
  EpisodeSampler(const Dataset& data, SamplerConfig cfg, std::uint64_t seed);

  Episode next();
  // Training slices eligible under the setting: (scan index, slice).
  const std::vector<std::pair<int, int>>& eligible_slices() const { return slices_; }
  Rng& rng() { return rng_; }
  std::uint64_t episodes_drawn() const { return drawn_; }
  void set_episodes_drawn(std::uint64_t n) { drawn_ = n; }

 private:
  const std::vector<Mask>& regions(int scan, int slice);

  const Dataset* data_;
  SamplerConfig cfg_;
  Rng rng_;
  std::uint64_t drawn_ = 0;
  std::vector<std::pair<int, int>> slices_;
  std::map<std::pair<int, int>, std::vector<Mask>> cache_;
};

Episode build_training_episode(const Dataset& data, int fold, Setting setting, std::uint64_t seed);

// Three inclusive segments of [first, last]; remainder slices go to earlier
// segments and an empty segment repeats the previous one.
std::array<std::pair<int, int>, 3> roi_segments(int first, int last);
int segment_center(std::pair<int, int> seg);

std::vector<Episode> build_eval_episodes(const Dataset& data, int fold, int class_id);

}  // namespace pami

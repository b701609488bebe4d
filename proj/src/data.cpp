#include "pami/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <set>

#include "json.hpp"
#include "pami/error.hpp"
#include "pami/io.hpp"

namespace pami {

using nlohmann::json;

bool Scan::slice_has_class(int slice, int class_id) const {
  for (auto v : labels.at(static_cast<std::size_t>(slice)).data)
    if (v == class_id) return true;
  return false;
}

std::pair<int, int> Scan::class_range(int class_id) const {
  int first = -1, last = -1;
  for (int z = 0; z < slice_count(); ++z)
    if (slice_has_class(z, class_id)) {
      if (first < 0) first = z;
      last = z;
    }
  return {first, last};
}

std::vector<std::string> DatasetManifest::held_out(int fold) const {
  if (fold < 0 || fold >= fold_count())
    throw Error("invalid-count", "fold " + std::to_string(fold) + " out of range");
  return folds[static_cast<std::size_t>(fold)];
}

std::vector<std::string> DatasetManifest::training(int fold) const {
  const auto out_ids = held_out(fold);
  std::vector<std::string> ids;
  for (const auto& s : scans)
    if (std::find(out_ids.begin(), out_ids.end(), s.id) == out_ids.end()) ids.push_back(s.id);
  return ids;
}

void DatasetManifest::validate() const {
  std::map<std::string, int> seen;
  for (const auto& f : folds)
    for (const auto& id : f) ++seen[id];
  for (const auto& s : scans)
    if (seen[s.id] != 1) throw Error("invalid-count", "scan " + s.id + " is not in exactly one fold");
  if (seen.size() != scans.size()) throw Error("invalid-count", "fold lists name unknown scans");
}

void SynthConfig::validate() const {
  if (n_scans < 1 || slices_per_scan < 1 || height < 1 || width < 1 || n_classes < 1 || n_folds < 1)
    throw Error("invalid-count", "synthetic dataset counts must be >= 1");
  if (n_classes > 254) throw Error("invalid-count", "at most 254 classes fit an 8-bit label map");
  if (n_folds > n_scans) throw Error("invalid-count", "more folds than scans");
}

std::vector<std::vector<std::string>> split_folds(const std::vector<std::string>& ids, int n_folds) {
  if (n_folds < 1 || static_cast<std::size_t>(n_folds) > ids.size())
    throw Error("invalid-count", "cannot split " + std::to_string(ids.size()) + " scans into " +
                                     std::to_string(n_folds) + " folds");
  std::vector<std::vector<std::string>> folds(static_cast<std::size_t>(n_folds));
  const std::size_t base = ids.size() / n_folds, rem = ids.size() % n_folds;
  std::size_t pos = 0;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    const std::size_t n = base + (f < rem ? 1 : 0);
    folds[f].assign(ids.begin() + static_cast<std::ptrdiff_t>(pos),
                    ids.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
  }
  return folds;
}

// ---- synthetic volumes -----------------------------------------------------

namespace {

std::string scan_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scan_%02d", index);
  return buf;
}

std::string class_name(int k) { return "organ_" + std::to_string(k); }

constexpr double kBandLo = 0.42, kBandSpan = 0.5;

// An ellipsoid-like blob whose in-plane outline wobbles smoothly with angle
// and slice position.
struct Blob {
  double cy, cx;         // fraction of H, W
  double ry, rx;         // fraction of H, W
  double z0, zr;         // center slice and half extent (slices)
  double orient;
  double wob_a, wob_b, phase_a, phase_b, drift;
  double intensity;
  double texture;

  // Cross-section scale at slice z (0 = absent).
  double section(double z) const {
    const double t = (z - z0) / zr;
    return t * t >= 1.0 ? 0.0 : std::pow(1.0 - t * t, 0.25);
  }

  bool inside(double r, double c, double z, int height, int width) const {
    const double s = section(z);
    if (s <= 0.0) return false;
    const double dy = r - cy * height, dx = c - cx * width;
    const double co = std::cos(orient), si = std::sin(orient);
    const double u = (co * dx + si * dy) / (rx * width * s);
    const double v = (-si * dx + co * dy) / (ry * height * s);
    const double theta = std::atan2(v, u);
    const double radius = 1.0 + wob_a * std::sin(2.0 * theta + phase_a + drift * z) +
                          wob_b * std::sin(3.0 * theta + phase_b - drift * z);
    return u * u + v * v <= radius * radius;
  }
};

}  // namespace

Scan synthesize_scan(const SynthConfig& cfg, int index) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(index)));
  const int H = cfg.height, W = cfg.width, Z = cfg.slices_per_scan;
  const double zmid = (Z - 1) / 2.0;

  Scan scan;
  scan.id = scan_id(index);
  scan.class_table[0] = "background";
  for (int k = 1; k <= cfg.n_classes; ++k) scan.class_table[k] = class_name(k);

  const double body_ry = 0.40 + 0.04 * rng.uniform(), body_rx = 0.44 + 0.04 * rng.uniform();
  const double body_level = 0.22 + 0.04 * rng.uniform();

  // Organs: fixed anchors on a ring so classes never overlap; each one is
  // centred near the middle slice so every class shows up in every scan.
  const double ring = 0.24;
  const double max_r = std::min(0.14, 0.9 * ring * std::sin(std::numbers::pi / std::max(cfg.n_classes, 2)) / 1.15);
  std::vector<Blob> organs;
  for (int k = 0; k < cfg.n_classes; ++k) {
    const double ang = 2.0 * std::numbers::pi * k / cfg.n_classes + std::numbers::pi / 4.0;
    Blob b;
    b.cy = 0.5 + ring * std::sin(ang) + 0.02 * (rng.uniform() - 0.5);
    b.cx = 0.5 + ring * std::cos(ang) + 0.02 * (rng.uniform() - 0.5);
    b.ry = max_r * (0.75 + 0.25 * rng.uniform());
    b.rx = max_r * (0.75 + 0.25 * rng.uniform());
    b.zr = std::max(1.0, Z * (0.22 + 0.08 * rng.uniform()));
    b.z0 = std::round(zmid) + (rng.uniform() - 0.5) * std::min(2.0, b.zr * 0.5);
    b.orient = std::numbers::pi * rng.uniform();
    b.wob_a = 0.08 * rng.uniform();
    b.wob_b = 0.06 * rng.uniform();
    b.phase_a = 2.0 * std::numbers::pi * rng.uniform();
    b.phase_b = 2.0 * std::numbers::pi * rng.uniform();
    b.drift = 0.15 * (rng.uniform() - 0.5);
    b.intensity = kBandLo + kBandSpan * (k + 0.5) / cfg.n_classes + 0.03 * (rng.uniform() - 0.5);
    b.texture = 0.02 + 0.02 * rng.uniform();
    organs.push_back(b);
  }
  // Organ-like distractors spanning every slice, unlabelled, with intensities
  // on the edges between class bands.
  std::vector<Blob> distractors;
  const int n_distract = 3 + static_cast<int>(rng.below(3));
  for (int i = 0; i < n_distract; ++i) {
    Blob b;
    const double ang = 2.0 * std::numbers::pi * rng.uniform();
    const double rad = 0.05 + 0.25 * rng.uniform();
    b.cy = 0.5 + rad * std::sin(ang);
    b.cx = 0.5 + rad * std::cos(ang);
    b.ry = 0.08 + 0.06 * rng.uniform();
    b.rx = 0.08 + 0.06 * rng.uniform();
    b.zr = Z * (0.8 + 0.6 * rng.uniform());
    b.z0 = Z * rng.uniform();
    b.orient = std::numbers::pi * rng.uniform();
    b.wob_a = 0.1 * rng.uniform();
    b.wob_b = 0.08 * rng.uniform();
    b.phase_a = 2.0 * std::numbers::pi * rng.uniform();
    b.phase_b = 2.0 * std::numbers::pi * rng.uniform();
    b.drift = 0.2 * (rng.uniform() - 0.5);
    b.intensity = kBandLo + kBandSpan * static_cast<double>(rng.below(cfg.n_classes + 1)) / cfg.n_classes +
                  0.02 * (rng.uniform() - 0.5);
    b.texture = 0.02 + 0.02 * rng.uniform();
    distractors.push_back(b);
  }
  const double noise = 0.015 + 0.01 * rng.uniform();
  const double fy = 1.0 + 2.0 * rng.uniform(), fx = 1.0 + 2.0 * rng.uniform();
  const double py = 2.0 * std::numbers::pi * rng.uniform(), px = 2.0 * std::numbers::pi * rng.uniform();

  for (int z = 0; z < Z; ++z) {
    Image2D img(H, W, 0.0f);
    ClassMap lab(H, W, 0);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const double yr = (r + 0.5) / H - 0.5, xr = (c + 0.5) / W - 0.5;
        const double shade = std::sin(fy * 2.0 * std::numbers::pi * yr + py) *
                             std::cos(fx * 2.0 * std::numbers::pi * xr + px);
        double v = 0.02;
        const bool in_body = (yr * yr) / (body_ry * body_ry) + (xr * xr) / (body_rx * body_rx) <= 1.0;
        if (in_body) v = body_level + 0.03 * shade;
        if (in_body) {
          for (const auto& b : distractors)
            if (b.inside(r + 0.5, c + 0.5, z, H, W)) v = b.intensity + b.texture * shade;
          for (int k = 0; k < cfg.n_classes; ++k)
            if (organs[k].inside(r + 0.5, c + 0.5, z, H, W)) {
              v = organs[k].intensity + organs[k].texture * shade;
              lab(r, c) = static_cast<std::uint8_t>(k + 1);
            }
        }
        v += noise * rng.normal();
        img(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    scan.slices.push_back(std::move(img));
    scan.labels.push_back(std::move(lab));
  }
  // The middle slice crosses every organ at full size; guarantee a visible
  // section even for tiny volumes.
  const int zm = static_cast<int>(std::round(zmid));
  for (int k = 0; k < cfg.n_classes; ++k) {
    if (scan.slice_has_class(zm, k + 1)) continue;
    const int r = std::clamp(static_cast<int>(organs[k].cy * H), 0, H - 1);
    const int c = std::clamp(static_cast<int>(organs[k].cx * W), 0, W - 1);
    scan.labels[zm](r, c) = static_cast<std::uint8_t>(k + 1);
    scan.slices[zm](r, c) = static_cast<float>(organs[k].intensity);
  }
  return scan;
}

namespace {

std::string slice_name(const char* stem, int z) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%04d.png", stem, z);
  return buf;
}

json manifest_json(const DatasetManifest& m) {
  json classes = json::array();
  for (const auto& c : m.classes) classes.push_back({{"id", c.id}, {"name", c.name}});
  json scans = json::array();
  for (const auto& s : m.scans) scans.push_back({{"id", s.id}, {"dir", s.dir}, {"slices", s.slice_count}});
  return {{"version", m.version}, {"height", m.height}, {"width", m.width}, {"seed", m.seed},
          {"classes", classes},   {"scans", scans},     {"folds", m.folds}};
}

}  // namespace

void save_manifest(const DatasetManifest& m) {
  io::write_text(m.root / "manifest.json", manifest_json(m).dump(2) + "\n");
}

DatasetManifest generate_synthetic_dataset(const SynthConfig& cfg, const fs::path& out) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out / "scans", ec);
  if (ec) throw Error("io", "cannot create " + (out / "scans").string() + ": " + ec.message());

  DatasetManifest m;
  m.root = out;
  m.height = cfg.height;
  m.width = cfg.width;
  m.seed = cfg.seed;
  for (int k = 1; k <= cfg.n_classes; ++k) m.classes.push_back({k, class_name(k)});
  std::vector<std::string> ids;
  for (int i = 0; i < cfg.n_scans; ++i) {
    const Scan scan = synthesize_scan(cfg, i);
    const std::string dir = "scans/" + scan.id;
    for (int z = 0; z < scan.slice_count(); ++z) {
      io::write_slice_png(out / dir / slice_name("slice", z), scan.slices[z]);
      io::write_label_png(out / dir / slice_name("labels", z), scan.labels[z]);
    }
    json legend = json::object();
    for (const auto& [k, name] : scan.class_table) legend[std::to_string(k)] = name;
    io::write_text(out / dir / "legend.json", legend.dump(2) + "\n");
    m.scans.push_back({scan.id, dir, scan.slice_count()});
    ids.push_back(scan.id);
  }
  m.folds = split_folds(ids, cfg.n_folds);
  save_manifest(m);
  return m;
}

DatasetManifest load_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  if (!fs::exists(path)) throw Error("io", "no manifest.json under " + root.string());
  json j;
  try {
    j = json::parse(io::read_text(path));
  } catch (const json::exception& e) {
    throw Error("io", "malformed manifest: " + std::string(e.what()));
  }
  DatasetManifest m;
  m.root = root;
  m.version = j.value("version", m.version);
  m.height = j.at("height").get<int>();
  m.width = j.at("width").get<int>();
  m.seed = j.value("seed", std::uint64_t{0});
  for (const auto& c : j.at("classes")) m.classes.push_back({c.at("id").get<int>(), c.at("name").get<std::string>()});
  for (const auto& s : j.at("scans"))
    m.scans.push_back({s.at("id").get<std::string>(), s.at("dir").get<std::string>(), s.at("slices").get<int>()});
  m.folds = j.at("folds").get<std::vector<std::vector<std::string>>>();
  m.validate();
  return m;
}

Scan load_scan(const DatasetManifest& m, const ScanRef& ref) {
  Scan scan;
  scan.id = ref.id;
  const fs::path dir = m.root / ref.dir;
  const fs::path legend = dir / "legend.json";
  if (fs::exists(legend)) {
    const json table = json::parse(io::read_text(legend));
    for (const auto& [k, v] : table.items()) scan.class_table[std::stoi(k)] = v.get<std::string>();
  }
  for (int z = 0; z < ref.slice_count; ++z) {
    scan.slices.push_back(io::read_slice_png(dir / slice_name("slice", z)));
    scan.labels.push_back(io::read_label_png(dir / slice_name("labels", z)));
    if (scan.slices.back().height != scan.labels.back().height || scan.slices.back().width != scan.labels.back().width)
      throw Error("bad-shape", "slice and label map differ in shape in " + ref.id);
  }
  return scan;
}

Dataset Dataset::load(const fs::path& root) {
  Dataset d;
  d.manifest = load_manifest(root);
  for (const auto& ref : d.manifest.scans) d.scans.push_back(load_scan(d.manifest, ref));
  return d;
}

Dataset Dataset::in_memory(const SynthConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.manifest.height = cfg.height;
  d.manifest.width = cfg.width;
  d.manifest.seed = cfg.seed;
  for (int k = 1; k <= cfg.n_classes; ++k) d.manifest.classes.push_back({k, class_name(k)});
  std::vector<std::string> ids;
  for (int i = 0; i < cfg.n_scans; ++i) {
    d.scans.push_back(synthesize_scan(cfg, i));
    d.manifest.scans.push_back({d.scans.back().id, "scans/" + d.scans.back().id, cfg.slices_per_scan});
    ids.push_back(d.scans.back().id);
  }
  d.manifest.folds = split_folds(ids, cfg.n_folds);
  return d;
}

int Dataset::scan_index(const std::string& id) const {
  for (std::size_t i = 0; i < scans.size(); ++i)
    if (scans[i].id == id) return static_cast<int>(i);
  throw Error("io", "unknown scan " + id);
}

const Scan& Dataset::scan(const std::string& id) const { return scans[static_cast<std::size_t>(scan_index(id))]; }

// ---- pseudo-labels ---------------------------------------------------------

Components connected_components(const LabelMap& labels) {
  const int H = labels.height, W = labels.width;
  Components out;
  out.id = LabelMap(H, W, -1);
  std::vector<int> stack;
  for (int r0 = 0; r0 < H; ++r0)
    for (int c0 = 0; c0 < W; ++c0) {
      if (out.id(r0, c0) >= 0) continue;
      const int comp = static_cast<int>(out.sizes.size());
      const int lab = labels(r0, c0);
      int size = 0;
      bool border = false;
      out.id(r0, c0) = comp;
      stack.assign(1, r0 * W + c0);
      while (!stack.empty()) {
        const int p = stack.back();
        stack.pop_back();
        const int r = p / W, c = p % W;
        ++size;
        if (r == 0 || c == 0 || r == H - 1 || c == W - 1) border = true;
        const int nr[4] = {r - 1, r + 1, r, r}, nc[4] = {c, c, c - 1, c + 1};
        for (int d = 0; d < 4; ++d) {
          if (nr[d] < 0 || nr[d] >= H || nc[d] < 0 || nc[d] >= W) continue;
          if (out.id(nr[d], nc[d]) >= 0 || labels(nr[d], nc[d]) != lab) continue;
          out.id(nr[d], nc[d]) = comp;
          stack.push_back(nr[d] * W + nc[d]);
        }
      }
      out.sizes.push_back(size);
      out.labels.push_back(lab);
      out.touches_border.push_back(border);
    }
  return out;
}

namespace {

void merge_small_components(LabelMap& labels) {
  const int H = labels.height, W = labels.width;
  for (int pass = 0; pass < 1000; ++pass) {
    const auto comps = connected_components(labels);
    if (comps.sizes.size() < 2) return;
    bool changed = false;
    std::vector<int> target(comps.sizes.size(), -1);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const int a = comps.id(r, c);
        if (comps.sizes[a] >= kMinComponent) continue;
        const int nr[4] = {r - 1, r + 1, r, r}, nc[4] = {c, c, c - 1, c + 1};
        for (int d = 0; d < 4; ++d) {
          if (nr[d] < 0 || nr[d] >= H || nc[d] < 0 || nc[d] >= W) continue;
          const int b = comps.id(nr[d], nc[d]);
          if (b == a) continue;
          const int cur = target[a];
          if (cur < 0 || comps.sizes[b] > comps.sizes[cur] || (comps.sizes[b] == comps.sizes[cur] && b < cur))
            target[a] = b;
        }
      }
    // Merge only small components whose chosen neighbour is not itself being
    // merged this pass, so results do not depend on traversal order.
    std::vector<int> new_label(comps.sizes.size(), -1);
    for (std::size_t a = 0; a < target.size(); ++a) {
      const int b = target[a];
      if (b < 0) continue;
      if (comps.sizes[b] < kMinComponent && target[b] >= 0 && (comps.sizes[b] < comps.sizes[a] ||
                                                                (comps.sizes[b] == comps.sizes[a] && static_cast<std::size_t>(b) > a)))
        continue;
      new_label[a] = comps.labels[b];
    }
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const int a = comps.id(r, c);
        if (new_label[a] >= 0 && new_label[a] != labels(r, c)) {
          labels(r, c) = new_label[a];
          changed = true;
        }
      }
    if (!changed) return;
  }
}

}  // namespace

LabelMap compute_pseudo_labels(const Image2D& image, int k, std::uint64_t seed) {
  if (k < 2) throw Error("invalid-count", "pseudo-label k must be >= 2");
  const int H = image.height, W = image.width;
  const std::size_t n = image.size();
  if (n == 0) throw Error("bad-shape", "empty image");
  std::vector<std::array<double, 3>> x(n);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      x[static_cast<std::size_t>(r) * W + c] = {image(r, c), static_cast<double>(r) / H, static_cast<double>(c) / W};
  auto dist2 = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
    double s = 0;
    for (int i = 0; i < 3; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
  };

  // k-means++ seeding.
  Rng rng(seed);
  const int kk = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(k), n));
  std::vector<std::array<double, 3>> centers;
  centers.push_back(x[rng.below(n)]);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < kk) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], dist2(x[i], centers.back()));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double u = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        u -= d2[pick];
        if (u < 0 && d2[pick] > 0) break;
      }
    } else {
      pick = rng.below(n);
    }
    centers.push_back(x[pick]);
  }

  std::vector<int> assign(n, 0);
  for (int iter = 0; iter < kPseudoIterations; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = dist2(x[i], centers[0]);
      for (int j = 1; j < kk; ++j) {
        const double d = dist2(x[i], centers[j]);
        if (d < bd) {
          bd = d;
          best = j;
        }
      }
      assign[i] = best;
    }
    std::vector<std::array<double, 3>> sum(kk, {0, 0, 0});
    std::vector<int> cnt(kk, 0);
    for (std::size_t i = 0; i < n; ++i) {
      for (int d = 0; d < 3; ++d) sum[assign[i]][d] += x[i][d];
      ++cnt[assign[i]];
    }
    for (int j = 0; j < kk; ++j)
      if (cnt[j] > 0)
        for (int d = 0; d < 3; ++d) centers[j][d] = sum[j][d] / cnt[j];
  }

  LabelMap labels(H, W, 0);
  labels.data = assign;
  merge_small_components(labels);
  return labels;
}

std::vector<Mask> candidate_regions(const LabelMap& pseudo, int min_area) {
  const auto comps = connected_components(pseudo);
  std::vector<Mask> out;
  for (std::size_t a = 0; a < comps.sizes.size(); ++a) {
    if (comps.sizes[a] < min_area || comps.touches_border[a]) continue;
    Mask m(pseudo.height, pseudo.width, 0);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = comps.id.data[i] == static_cast<int>(a);
    out.push_back(std::move(m));
  }
  return out;
}

// ---- augmentation ----------------------------------------------------------

AugmentConfig AugmentConfig::identity() {
  AugmentConfig a;
  a.rotation_deg = 0;
  a.translation = 0;
  a.scale_lo = a.scale_hi = 1;
  a.gamma_lo = a.gamma_hi = 1;
  return a;
}

Affine draw_affine(const AugmentConfig& cfg, int height, int width, Rng& rng) {
  Affine a;
  a.angle = rng.uniform(-cfg.rotation_deg, cfg.rotation_deg) * std::numbers::pi / 180.0;
  a.dy = rng.uniform(-cfg.translation, cfg.translation) * height;
  a.dx = rng.uniform(-cfg.translation, cfg.translation) * width;
  a.scale = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  // Log-uniform so the gamma range is symmetric around 1.
  a.gamma = std::exp(rng.uniform(std::log(cfg.gamma_lo), std::log(cfg.gamma_hi)));
  return a;
}

namespace {

bool is_identity(const Affine& a) { return a.angle == 0 && a.scale == 1 && a.dy == 0 && a.dx == 0; }

// Source coordinate for an output pixel centre (inverse mapping around the
// image centre).
std::pair<double, double> source_of(const Affine& a, int r, int c, int height, int width) {
  const double cy = (height - 1) / 2.0, cx = (width - 1) / 2.0;
  const double y = r - cy - a.dy, x = c - cx - a.dx;
  const double co = std::cos(a.angle), si = std::sin(a.angle);
  return {(co * y - si * x) / a.scale + cy, (si * y + co * x) / a.scale + cx};
}

}  // namespace

Image2D warp_image(const Image2D& image, const Affine& a) {
  Image2D out = image;
  if (!is_identity(a)) {
    for (int r = 0; r < image.height; ++r)
      for (int c = 0; c < image.width; ++c) {
        const auto [sy, sx] = source_of(a, r, c, image.height, image.width);
        const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
        const double fy = sy - y0, fx = sx - x0;
        auto px = [&](int y, int x) -> double {
          return (y < 0 || y >= image.height || x < 0 || x >= image.width) ? 0.0 : image(y, x);
        };
        out(r, c) = static_cast<float>((1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                                       fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1)));
      }
  }
  if (a.gamma != 1.0)
    for (auto& v : out.data) v = static_cast<float>(std::pow(std::clamp(static_cast<double>(v), 0.0, 1.0), a.gamma));
  return out;
}

Mask warp_mask(const Mask& mask, const Affine& a) {
  if (is_identity(a)) return mask;
  Mask out(mask.height, mask.width, 0);
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c) {
      const auto [sy, sx] = source_of(a, r, c, mask.height, mask.width);
      const int y = static_cast<int>(std::lround(sy)), x = static_cast<int>(std::lround(sx));
      if (y >= 0 && y < mask.height && x >= 0 && x < mask.width) out(r, c) = mask(y, x);
    }
  return out;
}

// ---- episodes --------------------------------------------------------------

Setting parse_setting(int value) {
  if (value == 1) return Setting::one;
  if (value == 2) return Setting::two;
  throw Error("usage", "setting must be 1 or 2");
}

EpisodeSampler::EpisodeSampler(const Dataset& data, SamplerConfig cfg, std::uint64_t seed)
    : data_(&data), cfg_(std::move(cfg)), rng_(seed) {
  std::vector<int> held = cfg_.held_out_classes;
  if (held.empty())
    for (const auto& c : data.manifest.classes) held.push_back(c.id);
  for (const auto& id : data.manifest.training(cfg_.fold)) {
    const int s = data.scan_index(id);
    const Scan& scan = data.scans[static_cast<std::size_t>(s)];
    for (int z = 0; z < scan.slice_count(); ++z) {
      bool excluded = false;
      if (cfg_.setting == Setting::two)
        for (int k : held) excluded = excluded || scan.slice_has_class(z, k);
      if (!excluded) slices_.emplace_back(s, z);
    }
  }
  if (slices_.empty()) throw Error("no-region", "no training slices are eligible for this fold/setting");
}

const std::vector<Mask>& EpisodeSampler::regions(int scan, int slice) {
  const auto key = std::make_pair(scan, slice);
  auto it = cache_.find(key);
  if (it != cache_.end()) return it->second;
  const auto& img = data_->scans[static_cast<std::size_t>(scan)].slices[static_cast<std::size_t>(slice)];
  const auto pseudo = compute_pseudo_labels(
      img, cfg_.pseudo_k, mix_seed(data_->manifest.seed, 0x5000 + static_cast<std::uint64_t>(scan) * 4096 + slice));
  return cache_.emplace(key, candidate_regions(pseudo, cfg_.min_region_area)).first->second;
}

Episode EpisodeSampler::next() {
  for (int draw = 0; draw < cfg_.max_draws; ++draw) {
    const auto [s, z] = slices_[rng_.below(slices_.size())];
    const auto& cands = regions(s, z);
    if (cands.empty()) continue;
    const std::size_t pick = rng_.below(cands.size());
    const Scan& scan = data_->scans[static_cast<std::size_t>(s)];
    const Image2D& img = scan.slices[static_cast<std::size_t>(z)];
    const Affine a = draw_affine(cfg_.augment, img.height, img.width, rng_);
    Mask qmask = warp_mask(cands[pick], a);
    if (count_nonzero(qmask) == 0) continue;
    Episode e;
    e.support = img;
    e.support_mask = cands[pick];
    e.query = warp_image(img, a);
    e.query_mask = std::move(qmask);
    e.class_id = static_cast<int>(pick);
    e.episode_id = "train-" + std::to_string(drawn_);
    e.support_scan = e.query_scan = scan.id;
    e.support_slice = e.query_slice = z;
    ++drawn_;
    return e;
  }
  throw Error("no-region", "no eligible pseudo-label region after " + std::to_string(cfg_.max_draws) + " draws");
}

Episode build_training_episode(const Dataset& data, int fold, Setting setting, std::uint64_t seed) {
  SamplerConfig cfg;
  cfg.fold = fold;
  cfg.setting = setting;
  EpisodeSampler sampler(data, cfg, seed);
  return sampler.next();
}

std::array<std::pair<int, int>, 3> roi_segments(int first, int last) {
  if (first < 0 || last < first) throw Error("bad-shape", "empty region of interest");
  const int len = last - first + 1, base = len / 3, rem = len % 3;
  std::array<std::pair<int, int>, 3> seg{};
  int pos = first;
  for (int i = 0; i < 3; ++i) {
    const int n = base + (i < rem ? 1 : 0);
    if (n == 0) {
      seg[i] = seg[i - 1];
    } else {
      seg[i] = {pos, pos + n - 1};
      pos += n;
    }
  }
  return seg;
}

int segment_center(std::pair<int, int> seg) { return (seg.first + seg.second) / 2; }

std::vector<Episode> build_eval_episodes(const Dataset& data, int fold, int class_id) {
  const auto held = data.manifest.held_out(fold);
  std::vector<std::string> with_class;
  for (const auto& id : held)
    if (data.scan(id).class_range(class_id).first >= 0) with_class.push_back(id);
  if (with_class.empty())
    throw Error("class-missing", "class " + std::to_string(class_id) + " is absent from fold " + std::to_string(fold));

  const std::string& designated = with_class.front();
  std::vector<Episode> out;
  for (std::size_t qi = 0; qi < with_class.size(); ++qi) {
    const Scan& q = data.scan(with_class[qi]);
    // Queries from the designated scan use the next scan cyclically; with a
    // single scan available it supports itself.
    const Scan& s = data.scan(with_class[qi] == designated ? with_class[(qi + 1) % with_class.size()] : designated);
    const auto [qf, ql] = q.class_range(class_id);
    const auto [sf, sl] = s.class_range(class_id);
    const auto qseg = roi_segments(qf, ql);
    const auto sseg = roi_segments(sf, sl);
    for (int z = qf; z <= ql; ++z) {
      int j = 0;
      while (j < 2 && z > qseg[j].second) ++j;
      int sz = segment_center(sseg[j]);
      if (!s.slice_has_class(sz, class_id)) {
        // Fall back to the nearest slice of the segment that shows the class.
        int best = -1;
        for (int c = sseg[j].first; c <= sseg[j].second; ++c)
          if (s.slice_has_class(c, class_id) && (best < 0 || std::abs(c - sz) < std::abs(best - sz))) best = c;
        if (best < 0) continue;
        sz = best;
      }
      Episode e;
      e.class_id = class_id;
      e.support = s.slices[static_cast<std::size_t>(sz)];
      e.support_mask = Mask(e.support.height, e.support.width, 0);
      for (std::size_t i = 0; i < e.support_mask.size(); ++i)
        e.support_mask.data[i] = s.labels[static_cast<std::size_t>(sz)].data[i] == class_id;
      e.query = q.slices[static_cast<std::size_t>(z)];
      e.query_mask = Mask(e.query.height, e.query.width, 0);
      for (std::size_t i = 0; i < e.query_mask.size(); ++i)
        e.query_mask.data[i] = q.labels[static_cast<std::size_t>(z)].data[i] == class_id;
      e.query_scan = q.id;
      e.support_scan = s.id;
      e.query_slice = z;
      e.support_slice = sz;
      e.episode_id = "f" + std::to_string(fold) + "-c" + std::to_string(class_id) + "-" + q.id + "-z" + std::to_string(z);
      out.push_back(std::move(e));
    }
  }
  return out;
}

}  // namespace pami

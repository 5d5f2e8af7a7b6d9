#pragma once

#include "crate/image.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace crate {

struct Sample {
  Image image;                    // C x H x W in [0,1]
  int label = 0;                  // shape family
  std::vector<uint8_t> gt_mask;   // H*W foreground support
  std::vector<uint8_t> patch_gt;  // per-patch majority vote of gt_mask
};

// Shapes-on-texture generator: one textured foreground shape per image on a
// textured background. Classes are shape families (disk, triangle, cross);
// each family also carries its own fill pattern (checker, horizontal
// stripes, vertical stripes) around the shared base level, so foreground and
// background are iso-luminant and mean brightness alone carries no signal.
// The pattern phase re-randomizes per patch cell, which decorrelates the raw
// pixels of one object's patches; only phase-invariant features group them.
struct SynthDataConfig {
  int num_classes = 3;
  int channels = 1;
  int height = 32;
  int width = 32;
  int patch_h = 8;
  int patch_w = 8;
  Scalar base_level = 0.5;    // shared mean brightness
  Scalar pattern_amp = 0.25;  // foreground pattern amplitude
  Scalar bg_noise = 0.10;     // uniform noise amplitude
  Scalar fg_noise = 0.10;
  Scalar min_area = 0.15;  // mask area bounds as a fraction of pixels
  Scalar max_area = 0.38;
  Scalar jitter = 0.5;  // center offset bound as a fraction of image size
  uint64_t seed = 0;

  int grid_x() const { return width / patch_w; }
  int grid_y() const { return height / patch_h; }
  int num_patches() const { return grid_x() * grid_y(); }

  void validate() const {
    auto require = [](bool ok, const std::string& what) {
      if (!ok) throw ConfigError("invalid dataset config: " + what);
    };
    require(num_classes >= 2 && num_classes <= 3, "num_classes must be 2 or 3");
    require(channels == 1 || channels == 3, "channels must be 1 or 3");
    require(height > 0 && width > 0, "image size must be positive");
    require(patch_h > 0 && height % patch_h == 0, "patch_h must divide height");
    require(patch_w > 0 && width % patch_w == 0, "patch_w must divide width");
    require(min_area > 0.0 && max_area < 1.0 && min_area < max_area, "bad area bounds");
    require(bg_noise >= 0.0 && fg_noise >= 0.0, "noise amplitudes must be nonnegative");
  }
};

namespace detail {

inline bool inside_disk(Scalar x, Scalar y, Scalar cx, Scalar cy, Scalar r) {
  const Scalar dx = x - cx, dy = y - cy;
  return dx * dx + dy * dy <= r * r;
}

// Isoceles triangle pointing up, base width equal to its height h.
inline bool inside_triangle(Scalar x, Scalar y, Scalar cx, Scalar cy, Scalar h) {
  const Scalar top = cy - h / 2, bottom = cy + h / 2;
  if (y < top || y > bottom) return false;
  const Scalar frac = (y - top) / h;              // 0 at apex, 1 at base
  return std::abs(x - cx) <= frac * (h / 2.0);
}

// Plus sign: two s-long bars of width s/3 through the center.
inline bool inside_cross(Scalar x, Scalar y, Scalar cx, Scalar cy, Scalar s) {
  const Scalar half = s / 2.0, bar = s / 6.0;
  const bool horiz = std::abs(y - cy) <= bar && std::abs(x - cx) <= half;
  const bool vert = std::abs(x - cx) <= bar && std::abs(y - cy) <= half;
  return horiz || vert;
}

}  // namespace detail

// Derives the per-patch ground truth by strict majority vote over pixels.
inline std::vector<uint8_t> patch_majority(const std::vector<uint8_t>& mask, int height,
                                           int width, int patch_h, int patch_w) {
  const int gx = width / patch_w, gy = height / patch_h;
  std::vector<uint8_t> out(static_cast<size_t>(gx) * gy, 0);
  for (int py = 0; py < gy; ++py)
    for (int px = 0; px < gx; ++px) {
      int count = 0;
      for (int y = py * patch_h; y < (py + 1) * patch_h; ++y)
        for (int x = px * patch_w; x < (px + 1) * patch_w; ++x)
          count += mask[static_cast<size_t>(y) * width + x] ? 1 : 0;
      out[static_cast<size_t>(py) * gx + px] = (2 * count > patch_h * patch_w) ? 1 : 0;
    }
  return out;
}

// Generates sample `index` of the stream. Each sample has its own RNG stream,
// so generation order and parallelism cannot change the result.
inline Sample generate_sample(const SynthDataConfig& cfg, int index) {
  Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(index)));
  Sample s;
  s.label = index % cfg.num_classes;
  const Scalar total = static_cast<Scalar>(cfg.height) * cfg.width;

  std::uniform_real_distribution<Scalar> unit(0.0, 1.0);
  // keep the sampled target away from the bounds so rasterization noise
  // cannot push the realized area outside them
  const Scalar margin = 0.04 * (cfg.max_area - cfg.min_area);
  std::uniform_real_distribution<Scalar> area_dist(cfg.min_area + margin,
                                                   cfg.max_area - margin);

  std::vector<uint8_t> mask;
  for (int attempt = 0;; ++attempt) {
    if (attempt >= 100)
      throw NumericError("generate_sample: could not place shape within area bounds");
    const Scalar area = area_dist(rng) * total;
    Scalar size;  // radius for the disk, height/extent for the others
    switch (s.label) {
      case 0: size = std::sqrt(area / std::numbers::pi); break;
      case 1: size = std::sqrt(2.0 * area); break;
      default: size = 3.0 * std::sqrt(area / 5.0); break;
    }
    const Scalar half_extent = (s.label == 0) ? size : size / 2.0;
    Scalar cx = cfg.width / 2.0 + (2.0 * unit(rng) - 1.0) * cfg.jitter * cfg.width;
    Scalar cy = cfg.height / 2.0 + (2.0 * unit(rng) - 1.0) * cfg.jitter * cfg.height;
    // clip placement so the shape stays on the canvas
    cx = std::clamp(cx, half_extent, cfg.width - half_extent);
    cy = std::clamp(cy, half_extent, cfg.height - half_extent);

    mask.assign(static_cast<size_t>(cfg.height) * cfg.width, 0);
    int on = 0;
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x) {
        const Scalar px = x + 0.5, py = y + 0.5;
        bool in = false;
        switch (s.label) {
          case 0: in = detail::inside_disk(px, py, cx, cy, size); break;
          case 1: in = detail::inside_triangle(px, py, cx, cy, size); break;
          default: in = detail::inside_cross(px, py, cx, cy, size); break;
        }
        if (in) {
          mask[static_cast<size_t>(y) * cfg.width + x] = 1;
          ++on;
        }
      }
    const Scalar frac = on / total;
    if (frac >= cfg.min_area && frac <= cfg.max_area) break;
  }

  s.gt_mask = mask;
  s.patch_gt = patch_majority(mask, cfg.height, cfg.width, cfg.patch_h, cfg.patch_w);
  s.image = Image(cfg.channels, cfg.height, cfg.width);

  // per-cell pattern phase on the patch grid
  const int gx = cfg.grid_x(), gy = cfg.grid_y();
  std::vector<int> phase(static_cast<size_t>(gx) * gy);
  std::uniform_int_distribution<int> phase_dist(0, 3);
  for (auto& ph : phase) ph = phase_dist(rng);

  std::uniform_real_distribution<Scalar> noise(-1.0, 1.0);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x) {
      const bool fg = mask[static_cast<size_t>(y) * cfg.width + x] != 0;
      const int ph = phase[static_cast<size_t>(y / cfg.patch_h) * gx + (x / cfg.patch_w)];
      for (int c = 0; c < cfg.channels; ++c) {
        Scalar v = cfg.base_level;
        if (fg) {
          int bit;
          switch (s.label) {
            case 0: bit = (((x + ph) / 2) + ((y + ph) / 2)) % 2; break;  // checker
            case 1: bit = ((y + ph) / 2) % 2; break;                     // horizontal stripes
            default: bit = ((x + ph) / 2) % 2; break;                    // vertical stripes
          }
          v += bit ? cfg.pattern_amp : -cfg.pattern_amp;
        }
        v += (fg ? cfg.fg_noise : cfg.bg_noise) * noise(rng);
        s.image.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  return s;
}

inline std::vector<Sample> generate_dataset(const SynthDataConfig& cfg, int count) {
  cfg.validate();
  if (count <= 0) throw ConfigError("generate_dataset: count must be positive");
  std::vector<Sample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_sample(cfg, i));
  return out;
}

// ---------------------------------------------------------------------------
// dataset directory format: images/NNNNN.pgm|ppm, masks/NNNNN.pgm,
// manifest.json with labels and geometry

struct Dataset {
  int num_classes = 0;
  int channels = 0, height = 0, width = 0;
  int patch_h = 0, patch_w = 0;
  std::vector<Sample> samples;
};

namespace detail {

inline std::string index_name(int i) {
  std::ostringstream os;
  os << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

}  // namespace detail

inline void save_dataset(const std::string& dir, const std::vector<Sample>& samples,
                         const SynthDataConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  nlohmann::json manifest;
  manifest["count"] = samples.size();
  manifest["classes"] = cfg.num_classes;
  manifest["channels"] = cfg.channels;
  manifest["height"] = cfg.height;
  manifest["width"] = cfg.width;
  manifest["patch_h"] = cfg.patch_h;
  manifest["patch_w"] = cfg.patch_w;
  manifest["samples"] = nlohmann::json::array();
  const std::string ext = cfg.channels == 3 ? ".ppm" : ".pgm";
  for (size_t i = 0; i < samples.size(); ++i) {
    const std::string name = detail::index_name(static_cast<int>(i));
    const std::string image_rel = "images/" + name + ext;
    const std::string mask_rel = "masks/" + name + ".pgm";
    write_pnm(samples[i].image, (fs::path(dir) / image_rel).string());
    Image mask_img(1, samples[i].image.height, samples[i].image.width);
    for (size_t px = 0; px < samples[i].gt_mask.size(); ++px)
      mask_img.data[px] = samples[i].gt_mask[px] ? 1.0 : 0.0;
    write_pnm(mask_img, (fs::path(dir) / mask_rel).string());
    manifest["samples"].push_back(
        {{"image", image_rel}, {"mask", mask_rel}, {"label", samples[i].label}});
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir);
  out << manifest.dump(2) << "\n";
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw IoError("cannot open dataset manifest in " + dir);
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed dataset manifest in " + dir + ": " + e.what());
  }
  Dataset ds;
  ds.num_classes = manifest.at("classes").get<int>();
  ds.channels = manifest.at("channels").get<int>();
  ds.height = manifest.at("height").get<int>();
  ds.width = manifest.at("width").get<int>();
  ds.patch_h = manifest.at("patch_h").get<int>();
  ds.patch_w = manifest.at("patch_w").get<int>();
  for (const auto& entry : manifest.at("samples")) {
    Sample s;
    s.image = read_image((fs::path(dir) / entry.at("image").get<std::string>()).string());
    s.label = entry.at("label").get<int>();
    if (s.label < 0 || s.label >= ds.num_classes)
      throw IoError("dataset label out of range in " + dir);
    Image mask = read_image((fs::path(dir) / entry.at("mask").get<std::string>()).string());
    s.gt_mask.resize(mask.pixel_count());
    for (size_t i = 0; i < mask.pixel_count(); ++i) s.gt_mask[i] = mask.data[i] > 0.5 ? 1 : 0;
    s.patch_gt = patch_majority(s.gt_mask, ds.height, ds.width, ds.patch_h, ds.patch_w);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace crate

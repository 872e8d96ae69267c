#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "odg/geometry.hpp"
#include "odg/rng.hpp"
#include "odg/tensor.hpp"

namespace odg {

struct ClassShape {
  double w_min, w_max;
  double aspect_min, aspect_max;  // h = w / aspect
  std::array<double, 3> base_color;
};

/// Scene recipe: object counts, per-class shape/aspect ranges, placement
/// separation. Angles are uniform over [-pi/2, pi/2).
struct SceneSpec {
  int image_size = 64;
  int min_objects = 1;
  int max_objects = 4;
  double max_pair_iou = 0.1;
  double margin = 1.5;
  std::vector<ClassShape> classes = {
      {16.0, 24.0, 2.6, 3.8, {0.82, 0.78, 0.70}},   // elongated, striped
      {7.0, 11.0, 1.3, 2.0, {0.75, 0.30, 0.25}},    // compact
      {18.0, 26.0, 1.15, 1.5, {0.30, 0.62, 0.30}},  // broad, checkered
  };

  int num_classes() const { return static_cast<int>(classes.size()); }
  static const std::vector<std::string>& class_names() {
    static const std::vector<std::string> names = {"elongated", "compact", "broad"};
    return names;
  }
};

/// Photometric transform parameters. All pixel-wise or small-kernel: geometry
/// and annotations are untouched by construction.
struct DomainStyle {
  std::string name = "A";
  std::array<double, 3> gain = {1.0, 1.0, 1.0};
  std::array<double, 3> bias = {0.0, 0.0, 0.0};
  double gamma = 1.0;
  int blur_radius = 0;
  double noise = 0.0;
};

inline DomainStyle domain_style_a() { return DomainStyle{}; }

// low contrast, blue cast, slight blur
inline DomainStyle domain_style_b() {
  return DomainStyle{"B", {0.50, 0.55, 0.75}, {0.10, 0.14, 0.30}, 1.25, 1, 0.01};
}

// overexposed with sensor noise
inline DomainStyle domain_style_c() {
  return DomainStyle{"C", {1.40, 1.35, 1.25}, {0.05, 0.04, 0.03}, 0.78, 0, 0.045};
}

inline DomainStyle builtin_domain_style(const std::string& name) {
  if (name == "A") return domain_style_a();
  if (name == "B") return domain_style_b();
  if (name == "C") return domain_style_c();
  throw ConfigError("unknown builtin domain style: " + name);
}

struct Annotation {
  OrientedBox box;
  int class_id = 0;
};

/// One image plus its oriented annotations. Images are (3,H,W) in memory,
/// values in [0,1]. Coverage masks are kept only when requested.
struct Sample {
  Tensor image;
  std::vector<Annotation> boxes;
  std::vector<Tensor> masks;  // (H,W) per object, optional
};

namespace detail {

inline bool corners_inside(const OrientedBox& b, double size, double margin) {
  for (const Vec2& v : to_corners(b).vertices)
    if (v.x < margin || v.x > size - margin || v.y < margin || v.y > size - margin) return false;
  return true;
}

/// Per-class fill color at box-frame coordinates (lx, ly in pixels from the
/// center). Patterns rotate with the box so that orientation is visible.
inline std::array<double, 3> object_color(const ClassShape& cls, int class_id, double lx, double ly,
                                          double w, double h, double jitter) {
  double factor = 1.0;
  switch (class_id) {
    case 0:  // stripes across the long axis
      factor = std::fmod(std::floor((lx + 0.5 * w) / 3.0), 2.0) == 0.0 ? 1.18 : 0.72;
      break;
    case 1: {  // radial falloff
      const double rx = 2.0 * lx / w, ry = 2.0 * ly / h;
      factor = 1.1 - 0.35 * (rx * rx + ry * ry);
      break;
    }
    default: {  // checkerboard
      const double cell = std::floor((lx + 0.5 * w) / 4.0) + std::floor((ly + 0.5 * h) / 4.0);
      factor = std::fmod(cell, 2.0) == 0.0 ? 1.12 : 0.78;
      break;
    }
  }
  std::array<double, 3> c;
  for (int i = 0; i < 3; ++i) c[static_cast<std::size_t>(i)] = cls.base_color[static_cast<std::size_t>(i)] * factor + jitter;
  return c;
}

}  // namespace detail

/// Render one style-neutral scene. Objects are anti-aliased filled rotated
/// rectangles (4x4 subpixel coverage); the annotation of each object is
/// exactly the rectangle that was rasterized.
inline Sample generate_scene(const SceneSpec& spec, Rng& rng, bool with_masks = false) {
  const int s = spec.image_size;
  Sample out;
  out.image = Tensor({3, s, s});

  // background: soft vertical gradient plus pixel noise
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const double base = 0.30 + 0.12 * static_cast<double>(y) / s;
      const double n = rng.uniform(-0.02, 0.02);
      out.image.at(0, y, x) = base + n;
      out.image.at(1, y, x) = base + 0.02 + n;
      out.image.at(2, y, x) = base - 0.02 + n;
    }

  const int target = spec.min_objects +
                     static_cast<int>(rng.uniform_index(
                         static_cast<std::uint64_t>(spec.max_objects - spec.min_objects + 1)));
  for (int obj = 0; obj < target; ++obj) {
    std::optional<OrientedBox> placed;
    int class_id = 0;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      class_id = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(spec.num_classes())));
      const ClassShape& cls = spec.classes[static_cast<std::size_t>(class_id)];
      const double w = rng.uniform(cls.w_min, cls.w_max);
      const double h = w / rng.uniform(cls.aspect_min, cls.aspect_max);
      const double theta = rng.uniform(-M_PI / 2.0, M_PI / 2.0);
      const double half = 0.5 * std::hypot(w, h) + spec.margin;
      if (2.0 * half >= s) continue;
      const double cx = rng.uniform(half, s - half);
      const double cy = rng.uniform(half, s - half);
      OrientedBox box = OrientedBox::make(cx, cy, w, h, theta);
      if (!detail::corners_inside(box, s, spec.margin)) continue;
      bool separated = true;
      for (const Annotation& a : out.boxes)
        if (rotated_iou(box, a.box) >= spec.max_pair_iou) {
          separated = false;
          break;
        }
      if (separated) placed = box;
    }
    if (!placed) {
      log_warn("generate_scene: placement failed after 100 attempts, rendering fewer objects");
      break;
    }

    const OrientedBox& b = *placed;
    const ClassShape& cls = spec.classes[static_cast<std::size_t>(class_id)];
    const double jitter = rng.uniform(-0.06, 0.06);
    const double c = std::cos(b.theta), sn = std::sin(b.theta);
    const HorizontalBox hull = aabb_hull(b);
    const int x0 = std::max(0, static_cast<int>(std::floor(hull.x)));
    const int x1 = std::min(s - 1, static_cast<int>(std::ceil(hull.x + hull.w)));
    const int y0 = std::max(0, static_cast<int>(std::floor(hull.y)));
    const int y1 = std::min(s - 1, static_cast<int>(std::ceil(hull.y + hull.h)));
    Tensor mask;
    if (with_masks) mask = Tensor({s, s});
    for (int py = y0; py <= y1; ++py) {
      for (int px = x0; px <= x1; ++px) {
        // 4x4 subpixel coverage
        int hits = 0;
        for (int sy = 0; sy < 4; ++sy)
          for (int sx = 0; sx < 4; ++sx) {
            const double qx = px + (sx + 0.5) / 4.0 - b.cx;
            const double qy = py + (sy + 0.5) / 4.0 - b.cy;
            const double lx = qx * c + qy * sn;
            const double ly = -qx * sn + qy * c;
            if (std::fabs(lx) <= 0.5 * b.w && std::fabs(ly) <= 0.5 * b.h) ++hits;
          }
        if (hits == 0) continue;
        const double coverage = hits / 16.0;
        if (with_masks) mask.at(py, px) = coverage;
        const double qx = px + 0.5 - b.cx, qy = py + 0.5 - b.cy;
        const double lx = qx * c + qy * sn, ly = -qx * sn + qy * c;
        const std::array<double, 3> color = detail::object_color(cls, class_id, lx, ly, b.w, b.h, jitter);
        for (int ch = 0; ch < 3; ++ch) {
          double& pix = out.image.at(ch, py, px);
          pix = (1.0 - coverage) * pix + coverage * color[static_cast<std::size_t>(ch)];
        }
      }
    }
    out.boxes.push_back(Annotation{b, class_id});
    if (with_masks) out.masks.push_back(std::move(mask));
  }

  for (double& v : out.image.data) v = std::clamp(v, 0.0, 1.0);
  return out;
}

/// Photometric domain shift: per-channel gamma/gain/bias, optional binomial
/// blur passes, optional additive noise. Annotations pass through untouched.
inline Sample apply_domain_style(const Sample& sample, const DomainStyle& style, Rng& rng) {
  Sample out;
  out.boxes = sample.boxes;
  out.image = sample.image;
  const int s = out.image.shape[1];
  for (int ch = 0; ch < 3; ++ch)
    for (int y = 0; y < s; ++y)
      for (int x = 0; x < s; ++x) {
        double v = std::pow(std::max(out.image.at(ch, y, x), 0.0), style.gamma);
        v = style.gain[static_cast<std::size_t>(ch)] * v + style.bias[static_cast<std::size_t>(ch)];
        out.image.at(ch, y, x) = std::clamp(v, 0.0, 1.0);
      }
  for (int pass = 0; pass < style.blur_radius; ++pass) {
    // separable [1,2,1]/4 with replicated edges
    Tensor tmp = out.image;
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const int xm = std::max(0, x - 1), xp = std::min(s - 1, x + 1);
          tmp.at(ch, y, x) =
              0.25 * out.image.at(ch, y, xm) + 0.5 * out.image.at(ch, y, x) + 0.25 * out.image.at(ch, y, xp);
        }
    for (int ch = 0; ch < 3; ++ch)
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const int ym = std::max(0, y - 1), yp = std::min(s - 1, y + 1);
          out.image.at(ch, y, x) =
              0.25 * tmp.at(ch, ym, x) + 0.5 * tmp.at(ch, y, x) + 0.25 * tmp.at(ch, yp, x);
        }
  }
  if (style.noise > 0.0) {
    for (double& v : out.image.data) v = std::clamp(v + style.noise * rng.normal(), 0.0, 1.0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// on-disk dataset format: manifest.json + one raw LE float64 blob per image,
// row-major H x W x 3, CRC32 of each blob recorded in the manifest.

constexpr int kDatasetVersion = 1;

inline std::vector<double> image_to_hwc(const Tensor& image) {
  const int h = image.shape[1], w = image.shape[2];
  std::vector<double> flat(static_cast<std::size_t>(h) * w * 3);
  std::size_t i = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) flat[i++] = image.at(ch, y, x);
  return flat;
}

inline Tensor image_from_hwc(const std::vector<double>& flat, int h, int w) {
  Tensor image({3, h, w});
  std::size_t i = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) image.at(ch, y, x) = flat[i++];
  return image;
}

inline void write_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir,
                          int image_size, const std::vector<std::string>& class_names) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["version"] = kDatasetVersion;
  manifest["image_size"] = {image_size, image_size, 3};
  manifest["classes"] = class_names;
  manifest["samples"] = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char id[16];
    std::snprintf(id, sizeof(id), "%06zu", i);
    const std::string image_file = std::string(id) + ".f64";
    const std::vector<double> flat = image_to_hwc(samples[i].image);
    write_f64_blob(dir / image_file, flat);
    nlohmann::json boxes = nlohmann::json::array();
    for (const Annotation& a : samples[i].boxes)
      boxes.push_back({a.box.cx, a.box.cy, a.box.w, a.box.h, a.box.theta, a.class_id});
    manifest["samples"].push_back({{"id", id},
                                   {"image_file", image_file},
                                   {"crc32", blob_crc32(flat)},
                                   {"boxes", std::move(boxes)}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("cannot read manifest: " + (dir / "manifest.json").string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + (dir / "manifest.json").string() + ": " + e.what());
  }
  if (manifest.at("version").get<int>() != kDatasetVersion)
    throw IoError("unsupported dataset version in " + dir.string());
  const auto size = manifest.at("image_size");
  const int h = size.at(0).get<int>(), w = size.at(1).get<int>();
  std::vector<Sample> samples;
  for (const auto& js : manifest.at("samples")) {
    const std::filesystem::path blob = dir / js.at("image_file").get<std::string>();
    const std::vector<double> flat = read_f64_blob(blob, static_cast<std::size_t>(h) * w * 3);
    if (blob_crc32(flat) != js.at("crc32").get<std::uint32_t>())
      throw IoError("checksum mismatch: " + blob.string());
    Sample s;
    s.image = image_from_hwc(flat, h, w);
    for (const auto& jb : js.at("boxes")) {
      Annotation a;
      a.box = OrientedBox::make(jb.at(0).get<double>(), jb.at(1).get<double>(), jb.at(2).get<double>(),
                                jb.at(3).get<double>(), jb.at(4).get<double>());
      a.class_id = jb.at(5).get<int>();
      s.boxes.push_back(a);
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace odg

#include "anomseg/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "anomseg/image_io.hpp"
#include "anomseg/rng.hpp"

namespace anomseg::datagen {

namespace {

using nlohmann::json;

constexpr double kTau = 6.283185307179586476925286766559;
constexpr double kBaseUncertainty = 0.02;
constexpr double kBoundaryBump = 0.9;
constexpr double kBoundarySigma = 1.5;
// Anomaly area fractions of the frame (log-uniform).
constexpr double kAreaLoV = 0.01, kAreaHiV = 0.20;
constexpr double kAreaLoA = 0.005, kAreaHiA = 0.35;
constexpr int kPlacementRetries = 24;
// Minimum palette distance (in units) for style-mismatched anomaly colors.
constexpr double kMismatchMargin = 5.0;

double quantize255(double v) {
  return std::lround(std::min(std::max(v, 0.0), 1.0) * 255.0) / 255.0;
}

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) {
    r = c; g = x;
  } else if (hp < 2) {
    r = x; g = c;
  } else if (hp < 3) {
    g = c; b = x;
  } else if (hp < 4) {
    g = x; b = c;
  } else if (hp < 5) {
    r = x; b = c;
  } else {
    r = c; b = x;
  }
  double m = v - c;
  return {r + m, g + m, b + m};
}

struct MaskDraw {
  ByteMap mask;
  long area = 0;
};

// Rasterizes one parametric shape into a fresh mask; returns pixel count.
MaskDraw rasterize_shape(ShapeKind kind, int h, int w, double cy, double cx, double target_area,
                         Rng& rng) {
  MaskDraw out;
  out.mask = ByteMap(h, w, 0);
  auto set_px = [&](int y, int x) {
    if (y >= 0 && y < h && x >= 0 && x < w && !out.mask.at(y, x)) {
      out.mask.at(y, x) = 1;
      ++out.area;
    }
  };
  switch (kind) {
    case ShapeKind::disk: {
      double r = std::sqrt(target_area / 3.14159265358979323846);
      for (int y = static_cast<int>(cy - r - 1); y <= static_cast<int>(cy + r + 1); ++y)
        for (int x = static_cast<int>(cx - r - 1); x <= static_cast<int>(cx + r + 1); ++x)
          if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) set_px(y, x);
      break;
    }
    case ShapeKind::rectangle: {
      double aspect = rng.uniform(0.5, 2.0);
      double rw = std::sqrt(target_area * aspect);
      double rh = target_area / rw;
      double theta = rng.uniform(0.0, kTau / 4.0);
      double ct = std::cos(theta), st = std::sin(theta);
      double ext = std::sqrt(rw * rw + rh * rh) / 2.0 + 1.0;
      for (int y = static_cast<int>(cy - ext); y <= static_cast<int>(cy + ext); ++y)
        for (int x = static_cast<int>(cx - ext); x <= static_cast<int>(cx + ext); ++x) {
          double dy = y - cy, dx = x - cx;
          double u = dx * ct + dy * st;
          double v = -dx * st + dy * ct;
          if (std::abs(u) <= rw / 2.0 && std::abs(v) <= rh / 2.0) set_px(y, x);
        }
      break;
    }
    case ShapeKind::triangle: {
      // three vertices near a circle of matching area
      double r = std::sqrt(target_area / 1.299);  // area of equilateral in circle: (3√3/4) r²
      double a0 = rng.uniform(0.0, kTau);
      double vx[3], vy[3];
      for (int i = 0; i < 3; ++i) {
        double ang = a0 + i * kTau / 3.0 + rng.uniform(-0.25, 0.25);
        double rr = r * rng.uniform(0.85, 1.15);
        vy[i] = cy + rr * std::sin(ang);
        vx[i] = cx + rr * std::cos(ang);
      }
      auto edge = [](double ax, double ay, double bx, double by, double px, double py) {
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
      };
      double ext = r * 1.3 + 1.0;
      for (int y = static_cast<int>(cy - ext); y <= static_cast<int>(cy + ext); ++y)
        for (int x = static_cast<int>(cx - ext); x <= static_cast<int>(cx + ext); ++x) {
          double e0 = edge(vx[0], vy[0], vx[1], vy[1], x, y);
          double e1 = edge(vx[1], vy[1], vx[2], vy[2], x, y);
          double e2 = edge(vx[2], vy[2], vx[0], vy[0], x, y);
          if ((e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0)) set_px(y, x);
        }
      break;
    }
    case ShapeKind::blob: {
      double r0 = std::sqrt(target_area / 3.14159265358979323846);
      double amp[3], phase[3];
      for (int k = 0; k < 3; ++k) {
        amp[k] = rng.uniform(0.05, 0.22);
        phase[k] = rng.uniform(0.0, kTau);
      }
      double ext = r0 * 1.6 + 1.0;
      for (int y = static_cast<int>(cy - ext); y <= static_cast<int>(cy + ext); ++y)
        for (int x = static_cast<int>(cx - ext); x <= static_cast<int>(cx + ext); ++x) {
          double dy = y - cy, dx = x - cx;
          double rad = std::sqrt(dy * dy + dx * dx);
          double theta = std::atan2(dy, dx);
          double rb = r0;
          for (int k = 0; k < 3; ++k) rb += r0 * amp[k] * std::sin((k + 2) * theta + phase[k]);
          if (rad <= rb) set_px(y, x);
        }
      break;
    }
  }
  return out;
}

struct AnomalyPlacement {
  ByteMap mask;
  ShapeKind shape;
};

AnomalyPlacement place_anomaly(const SceneSpec& spec, Rng& rng, double lo_frac, double hi_frac) {
  int h = spec.height, w = spec.width;
  double frame = static_cast<double>(h) * w;
  int margin = kVoidRingWidth + 2;  // ring + reconstruction dilation must stay in frame
  for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
    double frac = std::exp(rng.uniform(std::log(lo_frac * 1.12), std::log(hi_frac * 0.9)));
    double target = frac * frame;
    ShapeKind kind =
        spec.anomaly_shapes[static_cast<size_t>(rng.uniform_int(
            0, static_cast<int64_t>(spec.anomaly_shapes.size()) - 1))];
    double cy = rng.uniform(margin, h - 1 - margin);
    double cx = rng.uniform(margin, w - 1 - margin);
    MaskDraw draw = rasterize_shape(kind, h, w, cy, cx, target, rng);
    double got = draw.area / frame;
    if (got < lo_frac || got > hi_frac) continue;
    // reject shapes that touch the margin band
    bool inside = true;
    for (int y = 0; y < h && inside; ++y)
      for (int x = 0; x < w; ++x)
        if (draw.mask.at(y, x) && (y < margin || y >= h - margin || x < margin || x >= w - margin)) {
          inside = false;
          break;
        }
    if (!inside) continue;
    return {std::move(draw.mask), kind};
  }
  throw GenerationError("anomaly placement failed after bounded retries");
}

ByteMap make_gt(const ByteMap& mask) {
  ByteMap ring = dilate(mask, kVoidRingWidth);
  ByteMap gt(mask.h, mask.w, kLabelNormal);
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x) {
      if (mask.at(y, x))
        gt.at(y, x) = kLabelAnomaly;
      else if (ring.at(y, x))
        gt.at(y, x) = kLabelIgnore;
    }
  return gt;
}

uint8_t majority_class_under(const ByteMap& mask, const ByteMap& semantic, int num_classes) {
  std::vector<long> counts(static_cast<size_t>(num_classes), 0);
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      if (mask.at(y, x)) ++counts[semantic.at(y, x)];
  return static_cast<uint8_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

Sample assemble_sample(const SceneSpec& spec, uint64_t seed, Scene scene, const ByteMap& mask,
                       Domain domain) {
  Sample s;
  s.domain = domain;
  s.semantic = std::move(scene.semantic);
  s.image = std::move(scene.image);
  s.gt = make_gt(mask);
  s.recon = make_reconstruction(s.image, mask, s.semantic,
                                derive_seed(spec.rng_seed, "recon", seed));
  s.uncertainty = make_uncertainty(s.gt, kDefaultUncertaintyNoise,
                                   derive_seed(spec.rng_seed, "uncert", seed));
  return s;
}

}  // namespace

ShapeKind shape_from_string(const std::string& s) {
  if (s == "disk") return ShapeKind::disk;
  if (s == "rectangle") return ShapeKind::rectangle;
  if (s == "triangle") return ShapeKind::triangle;
  if (s == "blob") return ShapeKind::blob;
  throw ConfigError("unknown anomaly shape: " + s);
}

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::disk: return "disk";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::triangle: return "triangle";
    case ShapeKind::blob: return "blob";
  }
  return "?";
}

void SceneSpec::validate() const {
  if (height < 32 || width < 32)
    throw ConfigError("scene spec: height and width must be >= 32");
  if (num_background_classes < 2)
    throw ConfigError("scene spec: num_background_classes must be >= 2");
  if (anomaly_shapes.empty()) throw ConfigError("scene spec: anomaly_shapes must be nonempty");
}

std::vector<Rgb> scene_palette(const SceneSpec& spec, uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(spec.rng_seed, "palette", seed));
  std::vector<Rgb> palette;
  double base_hue = rng.uniform();
  for (int k = 0; k < spec.num_background_classes; ++k) {
    double hue = base_hue + k * 0.61803398875 + rng.uniform(-0.04, 0.04);
    double sat = rng.uniform(0.30, 0.65);
    double val = rng.uniform(0.25, 0.75);
    palette.push_back(hsv_to_rgb(hue, sat, val));
  }
  return palette;
}

double palette_distance(const Rgb& c, const std::vector<Rgb>& palette) {
  double best = 1e300;
  for (const Rgb& p : palette) {
    double d = std::sqrt((c.r - p.r) * (c.r - p.r) + (c.g - p.g) * (c.g - p.g) +
                         (c.b - p.b) * (c.b - p.b));
    best = std::min(best, d);
  }
  return best / kPaletteUnit;
}

Rgb mean_color(const Tensor& image, const ByteMap& mask, uint8_t inside_value) {
  Rgb acc;
  long n = 0;
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      if (mask.at(y, x) == inside_value) {
        acc.r += image.at3(0, y, x);
        acc.g += image.at3(1, y, x);
        acc.b += image.at3(2, y, x);
        ++n;
      }
  if (n == 0) return acc;
  acc.r /= n;
  acc.g /= n;
  acc.b /= n;
  return acc;
}

Scene gen_scene(const SceneSpec& spec, uint64_t seed) {
  spec.validate();
  Scene scene;
  scene.palette = scene_palette(spec, seed);
  int h = spec.height, w = spec.width, k = spec.num_background_classes;

  Rng rng(derive_seed(spec.rng_seed, "scene", seed));
  // Weighted Voronoi partition; every class gets at least one site. Retry with
  // fresh sites in the unlikely case a class ends up with no pixels.
  for (int attempt = 0; attempt < 16; ++attempt) {
    int sites = 2 * k;
    std::vector<double> sy(static_cast<size_t>(sites)), sx(static_cast<size_t>(sites)),
        sw(static_cast<size_t>(sites));
    for (int i = 0; i < sites; ++i) {
      sy[static_cast<size_t>(i)] = rng.uniform(0.0, h - 1.0);
      sx[static_cast<size_t>(i)] = rng.uniform(0.0, w - 1.0);
      sw[static_cast<size_t>(i)] = rng.uniform(0.8, 1.3);
    }
    ByteMap sem(h, w, 0);
    std::vector<long> counts(static_cast<size_t>(k), 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double best = 1e300;
        int best_site = 0;
        for (int i = 0; i < sites; ++i) {
          double dy = y - sy[static_cast<size_t>(i)];
          double dx = x - sx[static_cast<size_t>(i)];
          double d = (dy * dy + dx * dx) * sw[static_cast<size_t>(i)];
          if (d < best) {
            best = d;
            best_site = i;
          }
        }
        uint8_t cls = static_cast<uint8_t>(best_site % k);
        sem.at(y, x) = cls;
        ++counts[cls];
      }
    if (std::find(counts.begin(), counts.end(), 0L) != counts.end()) continue;
    scene.semantic = std::move(sem);
    break;
  }
  if (scene.semantic.v.empty())
    throw GenerationError("scene generation failed: a class has no region");

  scene.image = Tensor({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const Rgb& c = scene.palette[scene.semantic.at(y, x)];
      scene.image.at3(0, y, x) = quantize255(c.r + rng.normal(0.0, kBackgroundNoiseStd));
      scene.image.at3(1, y, x) = quantize255(c.g + rng.normal(0.0, kBackgroundNoiseStd));
      scene.image.at3(2, y, x) = quantize255(c.b + rng.normal(0.0, kBackgroundNoiseStd));
    }
  return scene;
}

Sample synth_voidclass(const SceneSpec& spec, uint64_t seed) {
  Scene scene = gen_scene(spec, seed);
  Rng rng(derive_seed(spec.rng_seed, "void_anomaly", seed));
  AnomalyPlacement placed = place_anomaly(spec, rng, kAreaLoV, kAreaHiV);

  // Style-consistent: paint with another background class's palette color and
  // the scene's own noise statistics.
  uint8_t under = majority_class_under(placed.mask, scene.semantic, spec.num_background_classes);
  uint8_t color_class = under;
  while (color_class == under)
    color_class = static_cast<uint8_t>(rng.uniform_int(0, spec.num_background_classes - 1));
  const Rgb& c = scene.palette[color_class];
  for (int y = 0; y < placed.mask.h; ++y)
    for (int x = 0; x < placed.mask.w; ++x)
      if (placed.mask.at(y, x)) {
        scene.image.at3(0, y, x) = quantize255(c.r + rng.normal(0.0, kBackgroundNoiseStd));
        scene.image.at3(1, y, x) = quantize255(c.g + rng.normal(0.0, kBackgroundNoiseStd));
        scene.image.at3(2, y, x) = quantize255(c.b + rng.normal(0.0, kBackgroundNoiseStd));
      }
  return assemble_sample(spec, seed, std::move(scene), placed.mask, Domain::V);
}

Sample synth_anomalymix(const SceneSpec& spec, uint64_t seed) {
  Scene scene = gen_scene(spec, seed);
  Rng rng(derive_seed(spec.rng_seed, "mix_anomaly", seed));
  AnomalyPlacement placed = place_anomaly(spec, rng, kAreaLoA, kAreaHiA);

  // Style-mismatched: saturated out-of-palette color, flat pasted texture.
  Rgb c;
  double best_dist = -1.0;
  Rgb best{0.5, 0.5, 0.5};
  bool found = false;
  for (int attempt = 0; attempt < 100; ++attempt) {
    c = hsv_to_rgb(rng.uniform(), rng.uniform(0.85, 1.0), rng.uniform(0.85, 1.0));
    double d = palette_distance(c, scene.palette);
    if (d > best_dist) {
      best_dist = d;
      best = c;
    }
    if (d >= kMismatchMargin) {
      found = true;
      break;
    }
  }
  if (!found) c = best;  // farthest candidate seen
  for (int y = 0; y < placed.mask.h; ++y)
    for (int x = 0; x < placed.mask.w; ++x)
      if (placed.mask.at(y, x)) {
        scene.image.at3(0, y, x) = quantize255(c.r);
        scene.image.at3(1, y, x) = quantize255(c.g);
        scene.image.at3(2, y, x) = quantize255(c.b);
      }
  return assemble_sample(spec, seed, std::move(scene), placed.mask, Domain::A);
}

Tensor make_reconstruction(const Tensor& image, const ByteMap& anomaly_mask,
                           const ByteMap& semantic, uint64_t seed) {
  if (image.ndim() != 3 || image.dim(0) != 3) throw ContractViolation("recon: image must be [3,H,W]");
  int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  if (anomaly_mask.h != h || anomaly_mask.w != w || semantic.h != h || semantic.w != w)
    throw ContractViolation("recon: plane shapes disagree");

  ByteMap dilated = dilate(anomaly_mask, 1);
  // background texture statistics from unmasked pixels, per class
  int num_classes = 0;
  for (uint8_t v : semantic.v) num_classes = std::max(num_classes, static_cast<int>(v) + 1);
  std::vector<Rgb> mean(static_cast<size_t>(num_classes), Rgb{0.5, 0.5, 0.5});
  std::vector<long> count(static_cast<size_t>(num_classes), 0);
  std::vector<Rgb> acc(static_cast<size_t>(num_classes));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (!dilated.at(y, x)) {
        uint8_t cls = semantic.at(y, x);
        acc[cls].r += image.at3(0, y, x);
        acc[cls].g += image.at3(1, y, x);
        acc[cls].b += image.at3(2, y, x);
        ++count[cls];
      }
  for (int cls = 0; cls < num_classes; ++cls)
    if (count[static_cast<size_t>(cls)] > 0) {
      double n = static_cast<double>(count[static_cast<size_t>(cls)]);
      mean[static_cast<size_t>(cls)] = {acc[static_cast<size_t>(cls)].r / n,
                                        acc[static_cast<size_t>(cls)].g / n,
                                        acc[static_cast<size_t>(cls)].b / n};
    }

  Rng rng(seed);
  Tensor recon = image;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (dilated.at(y, x)) {
        const Rgb& c = mean[semantic.at(y, x)];
        recon.at3(0, y, x) = quantize255(c.r + rng.normal(0.0, kBackgroundNoiseStd));
        recon.at3(1, y, x) = quantize255(c.g + rng.normal(0.0, kBackgroundNoiseStd));
        recon.at3(2, y, x) = quantize255(c.b + rng.normal(0.0, kBackgroundNoiseStd));
      }
  return recon;
}

Tensor make_uncertainty(const ByteMap& gt, double noise_level, uint64_t seed) {
  if (noise_level < 0.0 || noise_level > 0.5)
    throw ConfigError("uncertainty noise_level must lie in [0, 0.5]");
  int h = gt.h, w = gt.w;

  // Multi-source BFS distance (8-neighborhood) to the anomaly boundary.
  std::vector<int> dist(static_cast<size_t>(h) * w, -1);
  std::deque<std::pair<int, int>> frontier;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (gt.at(y, x) != kLabelAnomaly) continue;
      bool edge = false;
      for (int dy = -1; dy <= 1 && !edge; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int ny = y + dy, nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w ||
              gt.at(ny, nx) != kLabelAnomaly) {
            edge = true;
            break;
          }
        }
      if (edge) {
        dist[static_cast<size_t>(y) * w + x] = 0;
        frontier.emplace_back(y, x);
      }
    }
  while (!frontier.empty()) {
    auto [y, x] = frontier.front();
    frontier.pop_front();
    int d = dist[static_cast<size_t>(y) * w + x];
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        int ny = y + dy, nx = x + dx;
        if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
        int& dn = dist[static_cast<size_t>(ny) * w + nx];
        if (dn < 0) {
          dn = d + 1;
          frontier.emplace_back(ny, nx);
        }
      }
  }

  Rng rng(seed);
  Tensor u({h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double v = kBaseUncertainty;
      int d = dist[static_cast<size_t>(y) * w + x];
      if (d >= 0)
        v += kBoundaryBump * std::exp(-(static_cast<double>(d) * d) /
                                      (2.0 * kBoundarySigma * kBoundarySigma));
      v += rng.uniform(0.0, noise_level);
      u.at2(y, x) = quantize255(v);
    }
  return u;
}

ByteMap dilate(const ByteMap& mask, int radius) {
  ByteMap out(mask.h, mask.w, 0);
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x) {
      if (!mask.at(y, x)) continue;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          int ny = y + dy, nx = x + dx;
          if (ny >= 0 && ny < mask.h && nx >= 0 && nx < mask.w) out.at(ny, nx) = 1;
        }
    }
  return out;
}

ByteMap anomaly_mask_of(const ByteMap& gt) {
  ByteMap m(gt.h, gt.w, 0);
  for (size_t i = 0; i < gt.v.size(); ++i) m.v[i] = gt.v[i] == kLabelAnomaly ? 1 : 0;
  return m;
}

std::vector<long> Dataset::indices_of(Domain d) const {
  std::vector<long> out;
  for (size_t i = 0; i < samples.size(); ++i)
    if (samples[i].domain == d) out.push_back(static_cast<long>(i));
  return out;
}

namespace {

json spec_to_json(const SceneSpec& spec) {
  json shapes = json::array();
  for (ShapeKind k : spec.anomaly_shapes) shapes.push_back(to_string(k));
  return json{{"height", spec.height},
              {"width", spec.width},
              {"num_background_classes", spec.num_background_classes},
              {"anomaly_shapes", shapes},
              {"rng_seed", spec.rng_seed}};
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec spec;
  spec.height = j.at("height").get<int>();
  spec.width = j.at("width").get<int>();
  spec.num_background_classes = j.at("num_background_classes").get<int>();
  spec.anomaly_shapes.clear();
  for (const auto& s : j.at("anomaly_shapes")) spec.anomaly_shapes.push_back(shape_from_string(s));
  spec.rng_seed = j.at("rng_seed").get<uint64_t>();
  return spec;
}

constexpr const char* kGeneratorVersion = "anomseg-datagen/1.0";

}  // namespace

DatasetManifest write_dataset(const std::vector<Sample>& samples,
                              const std::filesystem::path& dir, const SceneSpec& spec) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  DatasetManifest manifest;
  manifest.generator = kGeneratorVersion;
  manifest.spec = spec;

  json jsamples = json::array();
  long ordinal_v = 0, ordinal_a = 0;
  for (const Sample& s : samples) {
    char idbuf[32];
    long ord = s.domain == Domain::V ? ordinal_v++ : ordinal_a++;
    std::snprintf(idbuf, sizeof(idbuf), "%s_%06ld", s.domain == Domain::V ? "v" : "a", ord);
    std::string id = idbuf;
    fs::path sdir = dir / id;
    fs::create_directories(sdir);
    io::write_ppm(sdir / "image.ppm", s.image);
    io::write_ppm(sdir / "recon.ppm", s.recon);
    io::write_pgm(sdir / "uncertainty.pgm", s.uncertainty);
    io::write_pgm_bytes(sdir / "semantic.pgm", s.semantic);
    io::write_pgm_bytes(sdir / "gt.pgm", s.gt);
    manifest.samples.push_back({id, s.domain, id});
    jsamples.push_back(json{{"id", id},
                            {"domain", domain_name(s.domain)},
                            {"dir", id},
                            {"files",
                             {{"image", id + "/image.ppm"},
                              {"recon", id + "/recon.ppm"},
                              {"uncertainty", id + "/uncertainty.pgm"},
                              {"semantic", id + "/semantic.pgm"},
                              {"gt", id + "/gt.pgm"}}}});
  }

  json j{{"format_version", manifest.format_version},
         {"generator", manifest.generator},
         {"scene_spec", spec_to_json(spec)},
         {"encodings",
          {{"image", "P6 PPM, 8-bit per channel, value = byte/255"},
           {"recon", "P6 PPM, 8-bit per channel, value = byte/255"},
           {"uncertainty", "P5 PGM, 8-bit, value = byte/255"},
           {"semantic", "P5 PGM, 8-bit class index"},
           {"gt", "P5 PGM, 8-bit, values restricted to {0,1,255}"}}},
         {"samples", jsamples}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("cannot write manifest: " + (dir / "manifest.json").string());
  out << j.dump(2) << "\n";
  return manifest;
}

Dataset read_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath))
    throw IoError("no dataset manifest found at " + mpath.string());
  std::ifstream in(mpath);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw IoError("corrupt manifest " + mpath.string() + ": " + e.what());
  }

  Dataset ds;
  ds.manifest.format_version = j.at("format_version").get<int>();
  ds.manifest.generator = j.at("generator").get<std::string>();
  ds.manifest.spec = spec_from_json(j.at("scene_spec"));

  std::set<std::string> seen_ids;
  for (const auto& js : j.at("samples")) {
    ManifestEntry e;
    e.id = js.at("id").get<std::string>();
    std::string dom = js.at("domain").get<std::string>();
    if (dom != "V" && dom != "A") throw IoError("manifest: unknown domain tag " + dom);
    e.domain = dom == "V" ? Domain::V : Domain::A;
    e.dir = js.at("dir").get<std::string>();
    if (!seen_ids.insert(e.id).second)
      throw IoError("manifest: duplicate sample id " + e.id);
    fs::path sdir = dir / e.dir;

    Sample s;
    s.domain = e.domain;
    s.image = io::read_ppm(sdir / "image.ppm");
    s.recon = io::read_ppm(sdir / "recon.ppm");
    s.uncertainty = io::read_pgm(sdir / "uncertainty.pgm");
    s.semantic = io::read_pgm_bytes(sdir / "semantic.pgm");
    s.gt = io::read_pgm_bytes(sdir / "gt.pgm");
    for (uint8_t v : s.gt.v)
      if (v != kLabelNormal && v != kLabelAnomaly && v != kLabelIgnore)
        throw IoError("invalid gt value " + std::to_string(v) + " in " +
                      (sdir / "gt.pgm").string());
    for (uint8_t v : s.semantic.v)
      if (v >= ds.manifest.spec.num_background_classes)
        throw IoError("semantic class out of range in " + (sdir / "semantic.pgm").string());
    if (s.image.dim(1) != ds.manifest.spec.height || s.image.dim(2) != ds.manifest.spec.width)
      throw IoError("sample size disagrees with manifest spec in " + sdir.string());
    ds.manifest.samples.push_back(e);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace anomseg::datagen

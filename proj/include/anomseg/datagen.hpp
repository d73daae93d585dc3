#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "anomseg/common.hpp"
#include "anomseg/tensor.hpp"

namespace anomseg::datagen {

enum class ShapeKind { disk, rectangle, triangle, blob };

ShapeKind shape_from_string(const std::string& s);
std::string to_string(ShapeKind k);

struct SceneSpec {
  int height = 64;
  int width = 64;
  int num_background_classes = 3;
  std::vector<ShapeKind> anomaly_shapes = {ShapeKind::disk, ShapeKind::rectangle,
                                           ShapeKind::triangle, ShapeKind::blob};
  uint64_t rng_seed = 0;

  void validate() const;
};

struct Rgb {
  double r = 0, g = 0, b = 0;
};

struct Scene {
  Tensor image;      // [3,H,W]
  ByteMap semantic;  // class indices
  std::vector<Rgb> palette;
};

// One training/eval instance. Real planes are quantized to the k/255 grid so
// the on-disk round trip is exact.
struct Sample {
  Tensor image;        // [3,H,W] in [0,1]
  Tensor recon;        // [3,H,W] in [0,1]
  Tensor uncertainty;  // [H,W] in [0,1]
  ByteMap semantic;
  ByteMap gt;          // {0,1,255}
  Domain domain = Domain::V;
};

// RGB distance to the nearest palette color, measured in palette units.
constexpr double kPaletteUnit = 0.05;
// 255 "void" band: ring width around each anomaly.
constexpr int kVoidRingWidth = 2;
// background texture noise
constexpr double kBackgroundNoiseStd = 0.02;
// uncertainty noise used by the sample synthesizers
constexpr double kDefaultUncertaintyNoise = 0.1;

std::vector<Rgb> scene_palette(const SceneSpec& spec, uint64_t seed);
double palette_distance(const Rgb& c, const std::vector<Rgb>& palette);
Rgb mean_color(const Tensor& image, const ByteMap& mask, uint8_t inside_value);

// Piecewise-constant-plus-noise background whose regions follow the semantic
// map. Deterministic in (spec, seed).
Scene gen_scene(const SceneSpec& spec, uint64_t seed);

// Domain V: anomaly rendered in the scene's own palette/texture statistics.
Sample synth_voidclass(const SceneSpec& spec, uint64_t seed);
// Domain A: pasted-object look, colors away from the scene palette, flat
// texture, wider size range.
Sample synth_anomalymix(const SceneSpec& spec, uint64_t seed);

// In-paints the (1-dilated) mask with background-class texture estimated from
// the unmasked pixels; outside the dilated mask the image is copied verbatim.
Tensor make_reconstruction(const Tensor& image, const ByteMap& anomaly_mask,
                           const ByteMap& semantic, uint64_t seed);

// High near anomaly boundaries, low elsewhere, plus uniform noise in
// [0, noise_level]; clamped to [0,1]. noise_level must lie in [0, 0.5].
Tensor make_uncertainty(const ByteMap& gt, double noise_level, uint64_t seed);

ByteMap dilate(const ByteMap& mask, int radius);
ByteMap anomaly_mask_of(const ByteMap& gt);

struct ManifestEntry {
  std::string id;
  Domain domain = Domain::V;
  std::string dir;  // sample subdirectory, relative to the dataset root
};

struct DatasetManifest {
  int format_version = 1;
  std::string generator;
  SceneSpec spec;
  std::vector<ManifestEntry> samples;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;

  std::vector<long> indices_of(Domain d) const;
};

DatasetManifest write_dataset(const std::vector<Sample>& samples,
                              const std::filesystem::path& dir, const SceneSpec& spec);
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace anomseg::datagen

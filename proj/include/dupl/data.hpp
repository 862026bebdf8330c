#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dupl/maps.hpp"

namespace dupl {

// Planar RGB image, values in [0, 1].
struct Image {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // C x H x W

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w),
        pixels(static_cast<std::size_t>(c) * h * w, fill) {}

  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

struct SynthSample {
  std::string id;
  Image image;
  std::vector<std::uint8_t> image_label;  // C entries, 0/1
  LabelMap gt_mask;                       // 0..C; evaluation only
};

struct DatasetSpec {
  int n_train = 500;
  int n_val = 100;
  int height = 64;
  int width = 64;
  int num_classes = 4;
  std::uint64_t seed = 1;

  void validate() const;
};

struct ManifestRow {
  std::string id;
  std::string split;
  std::string image_path;  // relative to the dataset root
  std::string mask_path;
  std::string label_bits;  // C characters of '0'/'1'
};

// Textured background, 1-3 distractor blobs, then 1-3 class shapes (class
// identity = shape + colour family). Pure function of (spec, index).
SynthSample generate_sample(const DatasetSpec& spec, int index);

// Writes images/<id>.ppm, masks/<id>.pgm and manifest.csv under out_dir.
std::vector<ManifestRow> generate_dataset(const DatasetSpec& spec,
                                          const std::filesystem::path& out_dir);

std::vector<ManifestRow> read_manifest(const std::filesystem::path& root);
void write_manifest(const std::filesystem::path& root,
                    const std::vector<ManifestRow>& rows);

// Loads every sample of `split` ("train" or "val") listed in the manifest.
std::vector<SynthSample> load_split(const std::filesystem::path& root,
                                    const std::string& split);

// Binary PNM (P6 / P5, maxval 255).
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const LabelMap& map);
LabelMap read_pgm(const std::filesystem::path& path);

std::vector<std::uint8_t> labels_from_mask(const LabelMap& mask, int num_classes);
std::string label_bits_string(const std::vector<std::uint8_t>& bits);

// Spatial part: horizontal flip, then resize by `scale` to
// round(H*scale) x round(W*scale), then an H x W window at
// (crop_y, crop_x) in the resized frame; negative offsets pad. Colour part:
// optional grayscale, then per-channel gain/bias, clamped to [0, 1].
struct AugmentRecord {
  int height = 0;
  int width = 0;
  bool hflip = false;
  double scale = 1.0;
  int crop_y = 0;
  int crop_x = 0;
  std::array<double, 3> gain{1.0, 1.0, 1.0};
  std::array<double, 3> bias{0.0, 0.0, 0.0};
  bool grayscale = false;

  static AugmentRecord identity(int h, int w);
  bool spatial_identity() const;
};

// Bilinear resampling of the image geometry only; out-of-view pixels are 0.
Image apply_spatial(const AugmentRecord& record, const Image& image);
Image apply_color(const AugmentRecord& record, const Image& image);

// Nearest-neighbour transport; out-of-view pixels become ignore / false.
LabelMap replay_spatial(const AugmentRecord& record, const LabelMap& map);
NoiseMask replay_spatial(const AugmentRecord& record, const NoiseMask& mask);

struct WeakView {
  Image image;
  LabelMap gt_mask;
  AugmentRecord record;
};

// Random hflip, scale in [0.8, 1.25], crop/pad and mild colour jitter.
WeakView weak_augment(const SynthSample& sample, std::uint64_t seed);

// Colour: gain in [0.6, 1.4], bias in [-0.2, 0.2], grayscale with p = 0.2.
// Spatial: hflip with p = 0.5, scale in {0.75, 1, 1.25}, crop/pad.
std::pair<Image, AugmentRecord> strong_augment(const Image& image,
                                               std::uint64_t seed);

}  // namespace dupl

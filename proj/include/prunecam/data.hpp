#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace prunecam::data {

inline constexpr int kNumClasses = 4;
// Cleansing classes, worst to best.
inline constexpr std::array<const char*, 4> kClassNames = {"poor", "fair",
                                                           "good", "excellent"};
inline constexpr int kBorderWidth = 4;

// Deterministic seed derivation (splitmix64 over the combined words).
uint64_t mix_seed(uint64_t a, uint64_t b);

struct LabeledImage {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;       // H*W*3 interleaved RGB
  int label = -1;                  // 0=Poor .. 3=Excellent
  std::vector<uint8_t> valid_mask; // H*W; 1 inside circle-and-border mask
  std::string id;
  bool degenerate = false;         // zero variance inside the mask
  // Generator metadata (empty for loaded datasets): 1 where synthetic
  // debris was painted. Used by localization oracles in tests.
  std::vector<uint8_t> debris_mask;
};

// Inscribed circle intersected with the border-stripped interior.
std::vector<uint8_t> make_valid_mask(int height, int width,
                                     int border = kBorderWidth);

// Zeroes pixels outside the mask and normalizes in-mask pixels to zero
// mean / unit std jointly across the three channels. A degenerate image
// (zero variance inside the mask) comes back all-zero with the flag set.
LabeledImage preprocess(const LabeledImage& raw);

// Each applied independently with probability 0.5: horizontal flip,
// rotation uniform in [-15, +15] degrees, per-channel color scale
// uniform in [0.8, 1.2].
LabeledImage augment(const LabeledImage& img, uint64_t seed);

// Exposed for tests: bilinear rotation about the image center, fill 0.
std::vector<float> rotate_bilinear(const std::vector<float>& pixels, int height,
                                   int width, double degrees);

// Most frequent class; ties break toward the lower (worse) class.
int mode_label(const std::vector<int>& votes);

struct FoldPlan {
  int k = 0;
  std::map<std::string, int> assignments;  // image id -> fold
  uint64_t seed = 0;
};

FoldPlan stratified_kfold(const std::vector<LabeledImage>& dataset, int k,
                          uint64_t seed);

struct SynthSpec {
  int image_size = 64;
  // Debris area fraction interval per class, index = class id.
  std::array<std::pair<float, float>, 4> occlusion = {
      std::pair<float, float>{0.50f, 0.85f},   // Poor
      std::pair<float, float>{0.25f, 0.50f},   // Fair
      std::pair<float, float>{0.05f, 0.25f},   // Good
      std::pair<float, float>{0.00f, 0.05f}};  // Excellent
  int samples_per_class = 125;
  uint64_t seed = 0;
};

// Pink mucosa background, brown/yellow elliptical debris whose in-mask
// area fraction lands inside the class interval, optional bubble rings.
// Labels are assigned by construction. Deterministic for a fixed spec.
std::vector<LabeledImage> generate_synth(const SynthSpec& spec);

double debris_fraction(const LabeledImage& img);

// On-disk layout: <dir>/<classname>/<id>.png plus <dir>/manifest.csv with
// columns id,class,split.
void save_dataset(const std::vector<LabeledImage>& dataset,
                  const std::filesystem::path& dir, const std::string& split);
std::vector<LabeledImage> load_dataset(const std::filesystem::path& dir);

}  // namespace prunecam::data

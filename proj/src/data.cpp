#include "prunecam/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "prunecam/errors.hpp"
#include "prunecam/png_io.hpp"

namespace prunecam::data {

uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

constexpr double kPi = 3.14159265358979323846;

float smoothstep(float edge0, float edge1, float x) {
  const float t = std::clamp((x - edge0) / (edge1 - edge0), 0.0f, 1.0f);
  return t * t * (3.0f - 2.0f * t);
}

}  // namespace

std::vector<uint8_t> make_valid_mask(int height, int width, int border) {
  std::vector<uint8_t> mask(static_cast<size_t>(height) * width, 0);
  const double cy = (height - 1) / 2.0;
  const double cx = (width - 1) / 2.0;
  const double radius = std::floor(std::min(height, width) / 2.0) - border;
  const double r2 = radius * radius;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const bool in_border = y >= border && y < height - border && x >= border &&
                             x < width - border;
      const double dy = y - cy, dx = x - cx;
      if (in_border && dy * dy + dx * dx <= r2)
        mask[static_cast<size_t>(y) * width + x] = 1;
    }
  }
  return mask;
}

LabeledImage preprocess(const LabeledImage& raw) {
  if (raw.height != raw.width || raw.height < 16)
    throw std::invalid_argument("preprocess: image must be square with side >= 16, got " +
                                std::to_string(raw.height) + "x" +
                                std::to_string(raw.width));
  LabeledImage out = raw;
  if (out.valid_mask.empty())
    out.valid_mask = make_valid_mask(out.height, out.width);

  const size_t hw = static_cast<size_t>(out.height) * out.width;
  double sum = 0.0, sum2 = 0.0;
  int64_t count = 0;
  for (size_t p = 0; p < hw; ++p) {
    if (!out.valid_mask[p]) continue;
    for (int c = 0; c < 3; ++c) {
      const double v = out.pixels[p * 3 + c];
      sum += v;
      sum2 += v * v;
      ++count;
    }
  }
  const double mean = count ? sum / count : 0.0;
  const double var = count ? std::max(0.0, sum2 / count - mean * mean) : 0.0;
  if (var < 1e-12) {
    std::fill(out.pixels.begin(), out.pixels.end(), 0.0f);
    out.degenerate = true;
    return out;
  }
  const double inv_std = 1.0 / std::sqrt(var);
  for (size_t p = 0; p < hw; ++p) {
    for (int c = 0; c < 3; ++c) {
      out.pixels[p * 3 + c] =
          out.valid_mask[p]
              ? static_cast<float>((out.pixels[p * 3 + c] - mean) * inv_std)
              : 0.0f;
    }
  }
  return out;
}

std::vector<float> rotate_bilinear(const std::vector<float>& pixels, int height,
                                   int width, double degrees) {
  std::vector<float> out(pixels.size(), 0.0f);
  const double rad = degrees * kPi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cy = (height - 1) / 2.0;
  const double cx = (width - 1) / 2.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      // inverse map: rotate the destination point by -angle
      const double dy = y - cy, dx = x - cx;
      const double sx = c * dx + s * dy + cx;
      const double sy = -s * dx + c * dy + cy;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      if (x0 < -1 || x0 >= width || y0 < -1 || y0 >= height) continue;
      const double fx = sx - x0, fy = sy - y0;
      for (int ch = 0; ch < 3; ++ch) {
        auto at = [&](int yy, int xx) -> double {
          if (yy < 0 || yy >= height || xx < 0 || xx >= width) return 0.0;
          return pixels[(static_cast<size_t>(yy) * width + xx) * 3 + ch];
        };
        const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                         fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        out[(static_cast<size_t>(y) * width + x) * 3 + ch] =
            static_cast<float>(v);
      }
    }
  }
  return out;
}

LabeledImage augment(const LabeledImage& img, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);
  LabeledImage out = img;
  const bool do_flip = uni(rng) < 0.5f;
  const bool do_rotate = uni(rng) < 0.5f;
  const bool do_jitter = uni(rng) < 0.5f;

  if (do_flip) {
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width / 2; ++x) {
        const size_t a = (static_cast<size_t>(y) * out.width + x);
        const size_t b = (static_cast<size_t>(y) * out.width + out.width - 1 - x);
        for (int c = 0; c < 3; ++c)
          std::swap(out.pixels[a * 3 + c], out.pixels[b * 3 + c]);
        if (!out.valid_mask.empty()) std::swap(out.valid_mask[a], out.valid_mask[b]);
        if (!out.debris_mask.empty())
          std::swap(out.debris_mask[a], out.debris_mask[b]);
      }
    }
  }
  if (do_rotate) {
    std::uniform_real_distribution<double> ang(-15.0, 15.0);
    const double degrees = ang(rng);
    out.pixels = rotate_bilinear(out.pixels, out.height, out.width, degrees);
    // The valid region (centered circle within the border box) is
    // rotation-invariant, so the transformed mask equals the original;
    // re-zero pixels that interpolation bled across the mask edge.
    if (!out.valid_mask.empty()) {
      for (size_t p = 0; p < out.valid_mask.size(); ++p)
        if (!out.valid_mask[p])
          for (int c = 0; c < 3; ++c) out.pixels[p * 3 + c] = 0.0f;
    }
  }
  if (do_jitter) {
    std::uniform_real_distribution<float> sc(0.8f, 1.2f);
    float scales[3] = {sc(rng), sc(rng), sc(rng)};
    for (size_t p = 0; p < out.pixels.size() / 3; ++p)
      for (int c = 0; c < 3; ++c)
        out.pixels[p * 3 + c] =
            std::clamp(out.pixels[p * 3 + c] * scales[c], 0.0f, 1.0f);
  }
  return out;
}

int mode_label(const std::vector<int>& votes) {
  if (votes.empty())
    throw std::invalid_argument("mode_label: empty vote list");
  int counts[kNumClasses] = {0, 0, 0, 0};
  for (int v : votes) {
    if (v < 0 || v >= kNumClasses)
      throw std::invalid_argument("mode_label: vote out of range: " +
                                  std::to_string(v));
    ++counts[v];
  }
  int best = 0;
  for (int c = 1; c < kNumClasses; ++c)
    if (counts[c] > counts[best]) best = c;  // ties keep the lower class
  return best;
}

FoldPlan stratified_kfold(const std::vector<LabeledImage>& dataset, int k,
                          uint64_t seed) {
  if (k < 2) throw std::invalid_argument("stratified_kfold: k must be >= 2");
  std::array<std::vector<const LabeledImage*>, kNumClasses> by_class;
  for (const auto& img : dataset) {
    if (img.label < 0 || img.label >= kNumClasses)
      throw std::invalid_argument("stratified_kfold: image " + img.id +
                                  " has invalid label");
    by_class[img.label].push_back(&img);
  }
  for (int c = 0; c < kNumClasses; ++c) {
    if (!by_class[c].empty() && static_cast<int>(by_class[c].size()) < k)
      throw ConfigError(std::string("stratified_kfold: class '") +
                        kClassNames[c] + "' has " +
                        std::to_string(by_class[c].size()) +
                        " samples, fewer than k=" + std::to_string(k));
  }
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  std::mt19937_64 rng(seed);
  int offset = 0;  // staggered so fold totals stay balanced
  for (int c = 0; c < kNumClasses; ++c) {
    auto& ids = by_class[c];
    std::shuffle(ids.begin(), ids.end(), rng);
    for (size_t i = 0; i < ids.size(); ++i)
      plan.assignments[ids[i]->id] = static_cast<int>((offset + i) % k);
    offset = static_cast<int>((offset + ids.size()) % k);
  }
  return plan;
}

namespace {

struct SynthPainter {
  int size;
  std::vector<float>& pixels;
  std::vector<uint8_t>& debris;
  const std::vector<uint8_t>& mask;

  void blend(int y, int x, float alpha, const float rgb[3]) {
    if (y < 0 || y >= size || x < 0 || x >= size || alpha <= 0.0f) return;
    float* p = pixels.data() + (static_cast<size_t>(y) * size + x) * 3;
    for (int c = 0; c < 3; ++c) p[c] = (1.0f - alpha) * p[c] + alpha * rgb[c];
  }
};

// Paints a soft-edged ellipse; returns the number of fresh in-mask debris
// pixels (alpha >= 0.5). With count_only, nothing is painted.
int paint_ellipse(SynthPainter& pt, double cx, double cy, double a, double b,
                  double theta, const float rgb[3], bool count_only) {
  const double ct = std::cos(theta), st = std::sin(theta);
  const double reach = std::max(a, b) + 2.0;
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
  const int x1 = std::min(pt.size - 1, static_cast<int>(std::ceil(cx + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
  const int y1 = std::min(pt.size - 1, static_cast<int>(std::ceil(cy + reach)));
  const float edge = static_cast<float>(1.5 / std::max(1.5, std::min(a, b)));
  int fresh = 0;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double u = (ct * dx + st * dy) / a;
      const double v = (-st * dx + ct * dy) / b;
      const float s = static_cast<float>(std::sqrt(u * u + v * v));
      const float alpha = smoothstep(1.0f + edge, 1.0f - edge, s);
      if (alpha < 0.004f) continue;
      const size_t p = static_cast<size_t>(y) * pt.size + x;
      const bool is_debris = alpha >= 0.5f && pt.mask[p];
      if (is_debris && !pt.debris[p]) ++fresh;
      if (!count_only) {
        pt.blend(y, x, alpha, rgb);
        if (is_debris) pt.debris[p] = 1;
      }
    }
  }
  return fresh;
}

void paint_ring(SynthPainter& pt, double cx, double cy, double radius,
                double width) {
  const float rgb[3] = {0.95f, 0.90f, 0.88f};
  const double reach = radius + width + 2.0;
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - reach)));
  const int x1 = std::min(pt.size - 1, static_cast<int>(std::ceil(cx + reach)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - reach)));
  const int y1 = std::min(pt.size - 1, static_cast<int>(std::ceil(cy + reach)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double d = std::abs(std::hypot(x - cx, y - cy) - radius);
      const float alpha =
          0.38f * smoothstep(static_cast<float>(width),
                             static_cast<float>(width) * 0.4f,
                             static_cast<float>(d));
      pt.blend(y, x, alpha, rgb);
    }
  }
}

LabeledImage synth_image(const SynthSpec& spec, int cls, int index) {
  const int S = spec.image_size;
  LabeledImage img;
  img.height = img.width = S;
  img.label = cls;
  std::ostringstream oss;
  oss << kClassNames[cls] << "_";
  oss.fill('0');
  oss.width(4);
  oss << index;
  img.id = oss.str();
  img.valid_mask = make_valid_mask(S, S);
  img.debris_mask.assign(static_cast<size_t>(S) * S, 0);
  img.pixels.assign(static_cast<size_t>(S) * S * 3, 0.0f);

  std::mt19937_64 rng(mix_seed(spec.seed, (static_cast<uint64_t>(cls) << 32) |
                                              static_cast<uint64_t>(index)));
  std::uniform_real_distribution<float> uni(0.0f, 1.0f);

  // Mucosa background: pink base with a coarse low-frequency texture and
  // mild radial shading. Kept smooth so interpolation-based augmentations
  // stay low-loss.
  const float base[3] = {0.80f + 0.06f * (uni(rng) - 0.5f),
                         0.52f + 0.06f * (uni(rng) - 0.5f),
                         0.55f + 0.06f * (uni(rng) - 0.5f)};
  const int grid = 9;
  std::vector<float> noise(static_cast<size_t>(grid) * grid * 3);
  for (auto& v : noise) v = 2.0f * uni(rng) - 1.0f;
  const double cy = (S - 1) / 2.0, cx = (S - 1) / 2.0;
  const double rmax = S / 2.0;
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double gy = static_cast<double>(y) / (S - 1) * (grid - 1);
      const double gx = static_cast<double>(x) / (S - 1) * (grid - 1);
      const int iy = std::min(grid - 2, static_cast<int>(gy));
      const int ix = std::min(grid - 2, static_cast<int>(gx));
      const double fy = gy - iy, fx = gx - ix;
      const double rr = (std::pow(y - cy, 2) + std::pow(x - cx, 2)) / (rmax * rmax);
      const float shade = static_cast<float>(0.94 + 0.10 * (1.0 - rr));
      float* p = img.pixels.data() + (static_cast<size_t>(y) * S + x) * 3;
      for (int c = 0; c < 3; ++c) {
        auto nz = [&](int yy, int xx) {
          return noise[(static_cast<size_t>(yy) * grid + xx) * 3 + c];
        };
        const double nv = (1 - fy) * ((1 - fx) * nz(iy, ix) + fx * nz(iy, ix + 1)) +
                          fy * ((1 - fx) * nz(iy + 1, ix) + fx * nz(iy + 1, ix + 1));
        p[c] = std::clamp(base[c] * shade + 0.05f * static_cast<float>(nv),
                          0.0f, 1.0f);
      }
    }
  }

  // Debris blobs up to a target in-mask fraction inside the class range.
  const auto [lo, hi] = spec.occlusion[cls];
  const double span = hi - lo;
  const double margin = 0.12 * span;
  std::uniform_real_distribution<double> tdist(
      lo == 0.0f ? 0.0 : lo + margin, hi - margin);
  const double target_frac = tdist(rng);
  int64_t mask_px = 0;
  for (uint8_t m : img.valid_mask) mask_px += m;
  const int64_t target_px = std::llround(target_frac * mask_px);
  const int64_t cap_px = static_cast<int64_t>((hi - 0.008) * mask_px);
  const double mask_radius = std::floor(S / 2.0) - kBorderWidth;

  SynthPainter pt{S, img.pixels, img.debris_mask, img.valid_mask};
  int64_t placed = 0;
  if (target_px >= 4) {
    int stall = 0;
    std::uniform_real_distribution<double> angle(0.0, kPi);
    while (placed < target_px) {
      // propose a blob center inside the mask
      int bx = 0, by = 0;
      for (int tries = 0; tries < 24; ++tries) {
        bx = static_cast<int>(uni(rng) * (S - 1));
        by = static_cast<int>(uni(rng) * (S - 1));
        if (img.valid_mask[static_cast<size_t>(by) * S + bx]) break;
      }
      const double budget = static_cast<double>(target_px - placed);
      const double amax =
          std::min(std::sqrt(budget / kPi) * 1.7 + 2.0, 0.38 * mask_radius);
      double a = 1.6 + uni(rng) * std::max(0.0, amax - 1.6);
      double b = a * (0.55 + 0.45 * uni(rng));
      const double th = angle(rng);
      const float shade_pick = uni(rng);
      float rgb[3];
      if (shade_pick < 0.55f) {
        rgb[0] = 0.42f; rgb[1] = 0.27f; rgb[2] = 0.12f;  // brown
      } else if (shade_pick < 0.8f) {
        rgb[0] = 0.30f; rgb[1] = 0.19f; rgb[2] = 0.09f;  // dark brown
      } else {
        rgb[0] = 0.78f; rgb[1] = 0.64f; rgb[2] = 0.24f;  // yellow
      }
      for (float& c : rgb) c = std::clamp(c + 0.05f * (uni(rng) - 0.5f), 0.0f, 1.0f);

      bool committed = false;
      for (int shrink = 0; shrink < 7; ++shrink) {
        const int fresh = paint_ellipse(pt, bx, by, a, b, th, rgb, true);
        if (placed + fresh <= cap_px) {
          if (fresh > 0) {
            paint_ellipse(pt, bx, by, a, b, th, rgb, false);
            placed += fresh;
            committed = true;
          }
          break;
        }
        a *= 0.72;
        b *= 0.72;
        if (std::min(a, b) < 1.0) break;
      }
      if (committed) {
        stall = 0;
      } else if (++stall >= 12) {
        // Deterministic fallback: fill single free in-mask pixels so the
        // loop always terminates inside the class range.
        for (size_t p = 0; p < img.valid_mask.size() && placed < target_px; ++p) {
          if (img.valid_mask[p] && !img.debris_mask[p]) {
            img.debris_mask[p] = 1;
            float* px = img.pixels.data() + p * 3;
            for (int c = 0; c < 3; ++c)
              px[c] = 0.6f * px[c] + 0.4f * rgb[c];
            ++placed;
          }
        }
        break;
      }
    }
  }

  // Occasional bubbles, independent of class.
  if (uni(rng) < 0.3f) {
    const int nrings = 1 + (uni(rng) < 0.4f ? 1 : 0);
    for (int i = 0; i < nrings; ++i) {
      const double r = 3.0 + uni(rng) * std::min(8.0, 0.25 * mask_radius);
      const double margin_px = r + 2.0;
      const double bx = cx + (uni(rng) * 2.0 - 1.0) * (mask_radius - margin_px);
      const double by = cy + (uni(rng) * 2.0 - 1.0) * (mask_radius - margin_px);
      paint_ring(pt, bx, by, r, 1.6);
    }
  }
  return img;
}

}  // namespace

double debris_fraction(const LabeledImage& img) {
  if (img.debris_mask.empty()) return 0.0;
  int64_t mask_px = 0, debris_px = 0;
  for (size_t p = 0; p < img.valid_mask.size(); ++p) {
    if (!img.valid_mask[p]) continue;
    ++mask_px;
    if (img.debris_mask[p]) ++debris_px;
  }
  return mask_px ? static_cast<double>(debris_px) / mask_px : 0.0;
}

std::vector<LabeledImage> generate_synth(const SynthSpec& spec) {
  if (spec.image_size < 16)
    throw ConfigError("generate_synth: image_size must be >= 16");
  for (int c = 0; c + 1 < kNumClasses; ++c) {
    const auto& worse = spec.occlusion[c];
    const auto& better = spec.occlusion[c + 1];
    if (better.second > worse.first + 1e-9f)
      throw ConfigError("generate_synth: occlusion ranges must be disjoint and "
                        "ordered worst-to-best");
  }
  std::vector<LabeledImage> out;
  out.reserve(static_cast<size_t>(spec.samples_per_class) * kNumClasses);
  for (int cls = 0; cls < kNumClasses; ++cls)
    for (int i = 0; i < spec.samples_per_class; ++i)
      out.push_back(synth_image(spec, cls, i));
  return out;
}

void save_dataset(const std::vector<LabeledImage>& dataset,
                  const std::filesystem::path& dir, const std::string& split) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (const char* name : kClassNames) fs::create_directories(dir / name);
  std::ostringstream manifest;
  manifest << "id,class,split\n";
  for (const auto& img : dataset) {
    png_io::Rgb8Image out;
    out.height = img.height;
    out.width = img.width;
    out.pixels.resize(img.pixels.size());
    for (size_t i = 0; i < img.pixels.size(); ++i)
      out.pixels[i] = static_cast<uint8_t>(
          std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
    png_io::write_rgb8(dir / kClassNames[img.label] / (img.id + ".png"), out);
    manifest << img.id << "," << img.label << "," << split << "\n";
  }
  const fs::path tmp = dir / "manifest.csv.tmp";
  std::ofstream f(tmp, std::ios::binary);
  f << manifest.str();
  f.close();
  fs::rename(tmp, dir / "manifest.csv");
}

std::vector<LabeledImage> load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest = dir / "manifest.csv";
  if (!fs::exists(manifest))
    throw MissingArtifactError("load_dataset: missing " + manifest.string());
  std::ifstream f(manifest);
  std::string line;
  std::getline(f, line);  // header
  std::vector<LabeledImage> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, cls_str, split;
    std::getline(ss, id, ',');
    std::getline(ss, cls_str, ',');
    std::getline(ss, split, ',');
    const int cls = std::stoi(cls_str);
    if (cls < 0 || cls >= kNumClasses)
      throw ConfigError("load_dataset: bad class for image " + id);
    auto rgb = png_io::read_rgb8(dir / kClassNames[cls] / (id + ".png"));
    LabeledImage img;
    img.height = rgb.height;
    img.width = rgb.width;
    img.label = cls;
    img.id = id;
    img.pixels.resize(rgb.pixels.size());
    for (size_t i = 0; i < rgb.pixels.size(); ++i)
      img.pixels[i] = rgb.pixels[i] / 255.0f;
    img.valid_mask = make_valid_mask(img.height, img.width);
    out.push_back(std::move(img));
  }
  return out;
}

}  // namespace prunecam::data

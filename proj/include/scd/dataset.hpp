#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "scd/errors.hpp"
#include "scd/png_io.hpp"
#include "scd/rng.hpp"

namespace scd {

namespace fs = std::filesystem;

// Display colors and names per class id; id 0 is the non-change slot and
// renders white. For 6 classes the names follow the usual land-cover set.
struct LabelPalette {
  std::vector<std::array<std::uint8_t, 3>> colors;  // index = class id
  std::vector<std::string> names;

  static LabelPalette for_classes(int num_classes) {
    static const std::array<std::array<std::uint8_t, 3>, 10> kColors = {{
        {255, 255, 255},  // non-change
        {128, 128, 128},  // n.v.g. surface
        {34, 139, 34},    // tree
        {154, 205, 50},   // low vegetation
        {30, 144, 255},   // water
        {205, 92, 92},    // buildings
        {255, 165, 0},    // playgrounds
        {139, 69, 19},
        {186, 85, 211},
        {0, 206, 209},
    }};
    static const std::array<const char*, 7> kSecondNames = {
        "non-change", "n.v.g. surface", "tree", "low vegetation",
        "water",      "buildings",      "playgrounds"};
    if (num_classes < 1 || num_classes > 9)
      throw ConfigError("LabelPalette supports 1..9 classes");
    LabelPalette p;
    for (int c = 0; c <= num_classes; ++c) {
      p.colors.push_back(kColors[static_cast<std::size_t>(c)]);
      if (num_classes == 6)
        p.names.emplace_back(kSecondNames[static_cast<std::size_t>(c)]);
      else
        p.names.emplace_back(c == 0 ? "non-change" : "class " + std::to_string(c));
    }
    return p;
  }
};

// One bitemporal sample. Images live in [0,1] (H*W*d, interleaved); label
// maps hold class ids with 0 on unchanged pixels; the change mask is derived.
struct SampleRecord {
  std::string id;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> image1, image2;
  std::vector<std::uint8_t> label1, label2;
  std::vector<std::uint8_t> change_mask;

  std::size_t pixel_count() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
};

// Enforces the annotation biconditional: label1 != 0 <=> label2 != 0, and
// rebuilds the mask from label1.
inline void validate_record(SampleRecord& rec, int num_classes) {
  const std::size_t n = rec.pixel_count();
  if (rec.image1.size() != n * static_cast<std::size_t>(rec.channels) ||
      rec.image2.size() != rec.image1.size() || rec.label1.size() != n ||
      rec.label2.size() != n)
    throw FormatError("sample " + rec.id + ": extent mismatch across files");
  std::size_t bad = 0;
  for (std::size_t p = 0; p < n; ++p) {
    if ((rec.label1[p] != 0) != (rec.label2[p] != 0)) ++bad;
    if (rec.label1[p] > num_classes || rec.label2[p] > num_classes)
      throw ValueError("sample " + rec.id + ": label exceeds class count");
  }
  if (bad > 0)
    throw AnnotationError("sample " + rec.id + ": " + std::to_string(bad) +
                          " pixels violate the change biconditional");
  rec.change_mask.assign(n, 0);
  for (std::size_t p = 0; p < n; ++p) rec.change_mask[p] = rec.label1[p] != 0 ? 1 : 0;
}

namespace detail {

inline std::vector<double> image_from_u8(const ImageU8& img) {
  std::vector<double> out(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    out[i] = static_cast<double>(img.pixels[i]) / 255.0;
  return out;
}

inline ImageU8 image_to_u8(const std::vector<double>& v, int h, int w, int c) {
  ImageU8 img;
  img.width = w;
  img.height = h;
  img.channels = c;
  img.pixels.resize(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double x = std::clamp(v[i], 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(x * 255.0));
  }
  return img;
}

}  // namespace detail

// Dataset layout: root/{im1,im2,label1,label2}/<id>.png
inline SampleRecord load_sample(const fs::path& root, const std::string& id,
                                int num_classes) {
  SampleRecord rec;
  rec.id = id;
  const ImageU8 im1 = read_png(root / "im1" / (id + ".png"));
  const ImageU8 im2 = read_png(root / "im2" / (id + ".png"));
  const ImageU8 l1 = read_png(root / "label1" / (id + ".png"), true);
  const ImageU8 l2 = read_png(root / "label2" / (id + ".png"), true);
  if (im1.width != im2.width || im1.height != im2.height || im1.channels != im2.channels ||
      l1.width != im1.width || l1.height != im1.height || l2.width != im1.width ||
      l2.height != im1.height)
    throw FormatError("sample " + id + ": extent mismatch across files");
  rec.height = im1.height;
  rec.width = im1.width;
  rec.channels = im1.channels;
  rec.image1 = detail::image_from_u8(im1);
  rec.image2 = detail::image_from_u8(im2);
  rec.label1 = l1.pixels;
  rec.label2 = l2.pixels;
  validate_record(rec, num_classes);
  return rec;
}

// Writes the four PNGs plus a palette-rendered preview strip. Refuses to
// overwrite existing files unless forced.
inline void save_sample(const fs::path& root, const SampleRecord& rec, int num_classes,
                        bool force = false, bool preview = true) {
  const LabelPalette palette = LabelPalette::for_classes(num_classes);
  for (const char* sub : {"im1", "im2", "label1", "label2"})
    fs::create_directories(root / sub);
  const std::string file = rec.id + ".png";
  for (const char* sub : {"im1", "im2", "label1", "label2"}) {
    const fs::path p = root / sub / file;
    if (!force && fs::exists(p))
      throw IoError("refusing to overwrite " + p.string() + " (use force)");
  }
  write_png(root / "im1" / file,
            detail::image_to_u8(rec.image1, rec.height, rec.width, rec.channels));
  write_png(root / "im2" / file,
            detail::image_to_u8(rec.image2, rec.height, rec.width, rec.channels));
  write_png_indexed(root / "label1" / file, rec.width, rec.height, rec.label1,
                    palette.colors);
  write_png_indexed(root / "label2" / file, rec.width, rec.height, rec.label2,
                    palette.colors);
  if (preview) {
    fs::create_directories(root / "preview");
    // [im1 | im2 | label1 | label2] rendered side by side
    ImageU8 strip;
    strip.height = rec.height;
    strip.width = rec.width * 4;
    strip.channels = 3;
    strip.pixels.assign(static_cast<std::size_t>(strip.width) * strip.height * 3, 0);
    auto put = [&](int panel, int y, int x, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
      const std::size_t o =
          (static_cast<std::size_t>(y) * strip.width + panel * rec.width + x) * 3;
      strip.pixels[o] = r;
      strip.pixels[o + 1] = g;
      strip.pixels[o + 2] = b;
    };
    for (int y = 0; y < rec.height; ++y)
      for (int x = 0; x < rec.width; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * rec.width + x;
        for (int panel = 0; panel < 2; ++panel) {
          const auto& img = panel == 0 ? rec.image1 : rec.image2;
          std::uint8_t rgb[3];
          for (int c = 0; c < 3; ++c) {
            const std::size_t src = p * static_cast<std::size_t>(rec.channels) +
                                    static_cast<std::size_t>(std::min(c, rec.channels - 1));
            rgb[c] = static_cast<std::uint8_t>(
                std::lround(std::clamp(img[src], 0.0, 1.0) * 255.0));
          }
          put(panel, y, x, rgb[0], rgb[1], rgb[2]);
        }
        const auto& c1 = palette.colors[rec.label1[p]];
        const auto& c2 = palette.colors[rec.label2[p]];
        put(2, y, x, c1[0], c1[1], c1[2]);
        put(3, y, x, c2[0], c2[1], c2[2]);
      }
    write_png(root / "preview" / file, strip);
  }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct DatasetManifest {
  int version = 1;
  int num_classes = 0;
  std::vector<std::string> class_names;
  struct Entry {
    std::string id;
    std::string split;  // "train" | "test"
  };
  std::vector<Entry> entries;
  fs::path root;

  std::vector<std::string> ids(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (e.split == split) out.push_back(e.id);
    return out;
  }

  void save(const fs::path& path) const {
    nlohmann::json j;
    j["version"] = version;
    j["num_classes"] = num_classes;
    j["class_names"] = class_names;
    nlohmann::json es = nlohmann::json::array();
    for (const auto& e : entries) es.push_back({{"id", e.id}, {"split", e.split}});
    j["entries"] = es;
    std::ofstream os(path);
    if (!os) throw IoError("cannot write manifest " + path.string());
    os << j.dump(2) << '\n';
  }

  static DatasetManifest load(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read manifest " + path.string());
    nlohmann::json j;
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest parse error: " + std::string(e.what()));
    }
    DatasetManifest m;
    m.version = j.at("version").get<int>();
    m.num_classes = j.at("num_classes").get<int>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    for (const auto& e : j.at("entries"))
      m.entries.push_back({e.at("id").get<std::string>(), e.at("split").get<std::string>()});
    m.root = path.parent_path();
    // splits must be disjoint by construction; ids unique
    std::vector<std::string> ids;
    for (const auto& e : m.entries) ids.push_back(e.id);
    std::sort(ids.begin(), ids.end());
    if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
      throw FormatError("manifest contains duplicate sample ids");
    return m;
  }
};

// Deterministic shuffled split. ratio is the train fraction, open interval.
inline DatasetManifest split_manifest(std::vector<std::string> ids, int num_classes,
                                      double ratio, std::uint64_t seed) {
  if (ids.empty()) throw ConfigError("split_manifest: empty entry list");
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ConfigError("split_manifest: ratio must lie strictly between 0 and 1");
  Rng rng = Rng::derive(seed, 0x51u, 1);
  rng.shuffle(ids);
  const auto n_train = static_cast<std::size_t>(
      std::llround(ratio * static_cast<double>(ids.size())));
  DatasetManifest m;
  m.num_classes = num_classes;
  m.class_names = LabelPalette::for_classes(num_classes).names;
  for (std::size_t i = 0; i < ids.size(); ++i)
    m.entries.push_back({ids[i], i < n_train ? "train" : "test"});
  return m;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

inline SampleRecord flip_record(const SampleRecord& rec) {
  SampleRecord out = rec;
  const int W = rec.width, C = rec.channels;
  for (int y = 0; y < rec.height; ++y)
    for (int x = 0; x < W; ++x) {
      const std::size_t src = static_cast<std::size_t>(y) * W + x;
      const std::size_t dst = static_cast<std::size_t>(y) * W + (W - 1 - x);
      out.label1[dst] = rec.label1[src];
      out.label2[dst] = rec.label2[src];
      out.change_mask[dst] = rec.change_mask[src];
      for (int c = 0; c < C; ++c) {
        out.image1[dst * C + c] = rec.image1[src * C + c];
        out.image2[dst * C + c] = rec.image2[src * C + c];
      }
    }
  return out;
}

// Joint geometric rescale: bilinear for images, nearest-neighbor for labels.
inline SampleRecord scale_record(const SampleRecord& rec, double factor) {
  SampleRecord out;
  out.id = rec.id;
  out.channels = rec.channels;
  out.height = std::max(1, static_cast<int>(std::lround(rec.height * factor)));
  out.width = std::max(1, static_cast<int>(std::lround(rec.width * factor)));
  const int H = out.height, W = out.width, C = rec.channels;
  out.image1.resize(static_cast<std::size_t>(H) * W * C);
  out.image2.resize(out.image1.size());
  out.label1.resize(static_cast<std::size_t>(H) * W);
  out.label2.resize(out.label1.size());
  out.change_mask.resize(out.label1.size());
  const double sy = static_cast<double>(rec.height) / H;
  const double sx = static_cast<double>(rec.width) / W;
  for (int y = 0; y < H; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    const int ny = std::clamp(static_cast<int>(std::lround((y + 0.5) * sy - 0.5)), 0,
                              rec.height - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor(fy)), 0, rec.height - 1);
    const int y1 = std::clamp(y0 + 1, 0, rec.height - 1);
    const double wy = std::clamp(fy - std::floor(fy), 0.0, 1.0);
    for (int x = 0; x < W; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      const int nx = std::clamp(static_cast<int>(std::lround((x + 0.5) * sx - 0.5)), 0,
                                rec.width - 1);
      const int x0 = std::clamp(static_cast<int>(std::floor(fx)), 0, rec.width - 1);
      const int x1 = std::clamp(x0 + 1, 0, rec.width - 1);
      const double wx = std::clamp(fx - std::floor(fx), 0.0, 1.0);
      const std::size_t dst = static_cast<std::size_t>(y) * W + x;
      const std::size_t nsrc = static_cast<std::size_t>(ny) * rec.width + nx;
      out.label1[dst] = rec.label1[nsrc];
      out.label2[dst] = rec.label2[nsrc];
      out.change_mask[dst] = rec.change_mask[nsrc];
      for (int c = 0; c < C; ++c) {
        auto bilerp = [&](const std::vector<double>& img) {
          auto at = [&](int yy, int xx) {
            return img[(static_cast<std::size_t>(yy) * rec.width + xx) * C +
                       static_cast<std::size_t>(c)];
          };
          return (1 - wy) * ((1 - wx) * at(y0, x0) + wx * at(y0, x1)) +
                 wy * ((1 - wx) * at(y1, x0) + wx * at(y1, x1));
        };
        out.image1[dst * C + c] = bilerp(rec.image1);
        out.image2[dst * C + c] = bilerp(rec.image2);
      }
    }
  }
  return out;
}

// Crop (or zero-pad) to a fixed square extent; offset picked by the caller.
inline SampleRecord crop_record(const SampleRecord& rec, int crop, int off_y, int off_x) {
  SampleRecord out;
  out.id = rec.id;
  out.channels = rec.channels;
  out.height = crop;
  out.width = crop;
  const int C = rec.channels;
  out.image1.assign(static_cast<std::size_t>(crop) * crop * C, 0.0);
  out.image2.assign(out.image1.size(), 0.0);
  out.label1.assign(static_cast<std::size_t>(crop) * crop, 0);
  out.label2.assign(out.label1.size(), 0);
  out.change_mask.assign(out.label1.size(), 0);
  for (int y = 0; y < crop; ++y) {
    const int sy = y + off_y;
    if (sy < 0 || sy >= rec.height) continue;
    for (int x = 0; x < crop; ++x) {
      const int sx = x + off_x;
      if (sx < 0 || sx >= rec.width) continue;
      const std::size_t dst = static_cast<std::size_t>(y) * crop + x;
      const std::size_t src = static_cast<std::size_t>(sy) * rec.width + sx;
      out.label1[dst] = rec.label1[src];
      out.label2[dst] = rec.label2[src];
      out.change_mask[dst] = rec.change_mask[src];
      for (int c = 0; c < C; ++c) {
        out.image1[dst * C + c] = rec.image1[src * C + c];
        out.image2[dst * C + c] = rec.image2[src * C + c];
      }
    }
  }
  return out;
}

// Training augmentation: random horizontal flip (p = 0.5) and random scale
// in [0.5, 2], applied jointly to both images and both label maps, then
// cropped/padded back to a fixed extent.
inline SampleRecord augment(const SampleRecord& rec, Rng& rng, int crop_size) {
  SampleRecord cur = rec;
  if (rng.bernoulli(0.5)) cur = flip_record(cur);
  const double factor = rng.uniform(0.5, 2.0);
  cur = scale_record(cur, factor);
  int off_y = 0, off_x = 0;
  if (cur.height > crop_size)
    off_y = rng.int_range(0, cur.height - crop_size);
  else if (cur.height < crop_size)
    off_y = -((crop_size - cur.height) / 2);
  if (cur.width > crop_size)
    off_x = rng.int_range(0, cur.width - crop_size);
  else if (cur.width < crop_size)
    off_x = -((crop_size - cur.width) / 2);
  return crop_record(cur, crop_size, off_y, off_x);
}

// ---------------------------------------------------------------------------
// Class statistics
// ---------------------------------------------------------------------------

// Pixel counts for labels 0..N over both label maps of a split.
inline std::vector<std::int64_t> class_histogram(const std::vector<SampleRecord>& samples,
                                                 int num_classes) {
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes) + 1, 0);
  for (const auto& rec : samples) {
    for (auto l : rec.label1) ++counts[l];
    for (auto l : rec.label2) ++counts[l];
  }
  return counts;
}

// Inverse-log-frequency weights, normalized to mean 1. A uniform histogram
// maps to all-ones.
inline std::vector<double> inverse_log_frequency_weights(
    const std::vector<std::int64_t>& counts) {
  const double total = static_cast<double>(
      std::max<std::int64_t>(1, std::accumulate(counts.begin(), counts.end(),
                                                std::int64_t{0})));
  std::vector<double> w(counts.size());
  for (std::size_t c = 0; c < counts.size(); ++c) {
    const double freq = static_cast<double>(counts[c]) / total;
    w[c] = 1.0 / std::log(1.02 + freq);
  }
  double mean = std::accumulate(w.begin(), w.end(), 0.0) / static_cast<double>(w.size());
  for (auto& v : w) v /= mean;
  return w;
}

}  // namespace scd

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "biprompt/core.hpp"
#include "biprompt/errors.hpp"
#include "biprompt/rng.hpp"

namespace biprompt {

// One evaluation unit: image, true class, and the spurious attribute that
// defines its group (group id = class * S + spurious).
struct GroupedExample {
  ImageView image;
  int class_label = 0;
  int spurious_label = 0;
};

// Synthetic analogue of background-object correlation benchmarks: a
// class-determined center patch with a spurious-label-determined border
// texture, aligned with probability rho.
struct BiasSpec {
  int num_classes = 2;
  int num_spurious = 2;
  double rho = 0.95;
  int image_size = 32;
  int patch_size = 10;
  int border_width = 5;
  double base_level = 0.25;
  double patch_level = 0.9;
  double texture_low = 0.1;
  double texture_high = 0.8;
  double noise = 0.02;
  std::uint64_t seed = 1234;
};

inline void validate_bias_spec(const BiasSpec& spec) {
  if (spec.num_classes < 2 || spec.num_spurious < 2)
    throw InvalidInputError("bias spec requires at least two classes and two spurious labels");
  if (spec.num_classes != spec.num_spurious)
    throw InvalidInputError("aligned-correlation construction requires C == S");
  if (!(spec.rho >= 0.0 && spec.rho <= 1.0)) throw InvalidInputError("rho must lie in [0,1]");
  if (spec.image_size < kMinImageSide) throw InvalidInputError("image_size below minimum");
  if (spec.patch_size < 2 || spec.border_width < 1)
    throw InvalidInputError("degenerate patch or border geometry");
  if (spec.patch_size + 2 * spec.border_width > spec.image_size)
    throw InvalidInputError("center patch overlaps the border band");
  for (double v : {spec.base_level, spec.patch_level, spec.texture_low, spec.texture_high})
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInputError("intensity levels must lie in [0,1]");
  if (!(spec.noise >= 0.0 && spec.noise <= 0.2))
    throw InvalidInputError("noise level must lie in [0, 0.2]");
}

namespace detail {

inline double class_color(const BiasSpec& spec, int cls, int channel) {
  const double two_pi = 6.283185307179586476925286766559;
  return 0.5 * (1.0 + std::cos(two_pi * (static_cast<double>(cls) / spec.num_classes +
                                         static_cast<double>(channel) / 3.0)));
}

inline bool texture_on(int spurious, int y, int x) {
  switch (spurious % 3) {
    case 0: return (x / 2) % 2 == 0;
    case 1: return (y / 2) % 2 == 0;
    default: return ((x + y) / 2) % 2 == 0;
  }
}

}  // namespace detail

inline ImageView blank_image(const BiasSpec& spec) {
  return make_image(spec.image_size, spec.image_size, spec.base_level);
}

inline void paint_class_patch(const BiasSpec& spec, int cls, ImageView& img) {
  const int lo = (spec.image_size - spec.patch_size) / 2;
  for (int c = 0; c < kImageChannels; ++c) {
    double v = spec.base_level + (spec.patch_level - spec.base_level) * detail::class_color(spec, cls, c);
    for (int y = lo; y < lo + spec.patch_size; ++y)
      for (int x = lo; x < lo + spec.patch_size; ++x) img.at(c, y, x) = v;
  }
}

inline void paint_border_texture(const BiasSpec& spec, int spurious, ImageView& img) {
  const int side = spec.image_size;
  const int bw = spec.border_width;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      bool border = y < bw || y >= side - bw || x < bw || x >= side - bw;
      if (!border) continue;
      img.at(1, y, x) = detail::texture_on(spurious, y, x) ? spec.texture_high : spec.texture_low;
    }
}

// Noise-free calibration content for the planted-bias encoder factory.
inline ImageView class_canonical_image(const BiasSpec& spec, int cls) {
  ImageView img = blank_image(spec);
  paint_class_patch(spec, cls, img);
  return img;
}

inline ImageView texture_canonical_image(const BiasSpec& spec, int spurious) {
  ImageView img = blank_image(spec);
  paint_border_texture(spec, spurious, img);
  return img;
}

inline std::vector<GroupedExample> generate_dataset(const BiasSpec& spec, int n) {
  validate_bias_spec(spec);
  if (n < spec.num_classes * spec.num_spurious)
    throw InvalidInputError("dataset too small to represent every group in expectation");
  std::vector<GroupedExample> out;
  out.reserve(n);
  SeededRng rng(mix_seed(spec.seed, 0xda7a5e7));
  for (int i = 0; i < n; ++i) {
    GroupedExample ex;
    ex.class_label = static_cast<int>(rng.uniform_int(spec.num_classes));
    if (rng.uniform() < spec.rho) {
      ex.spurious_label = ex.class_label;
    } else {
      int r = static_cast<int>(rng.uniform_int(spec.num_spurious - 1));
      ex.spurious_label = r >= ex.class_label ? r + 1 : r;
    }
    ex.image = blank_image(spec);
    paint_class_patch(spec, ex.class_label, ex.image);
    paint_border_texture(spec, ex.spurious_label, ex.image);
    if (spec.noise > 0.0)
      for (double& v : ex.image.pixels)
        v = std::clamp(v + rng.uniform(-spec.noise, spec.noise), 0.0, 1.0);
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Group-aware metrics.
// ---------------------------------------------------------------------------

inline double average_accuracy(const std::vector<int>& preds,
                               const std::vector<GroupedExample>& examples) {
  if (preds.size() != examples.size())
    throw InvalidInputError("predictions and examples differ in length");
  if (examples.empty()) throw InvalidInputError("cannot score an empty example set");
  int correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == examples[i].class_label) ++correct;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

struct WorstGroupResult {
  double accuracy = 0.0;
  int group_id = -1;
};

// Minimum per-group accuracy; ties resolve to the lowest group id. When
// num_spurious is not given it is inferred from the labels present.
inline WorstGroupResult worst_group_accuracy(const std::vector<int>& preds,
                                             const std::vector<GroupedExample>& examples,
                                             int num_spurious = 0) {
  if (preds.size() != examples.size())
    throw InvalidInputError("predictions and examples differ in length");
  if (examples.empty()) throw InvalidInputError("cannot score an empty example set");
  int max_spur = 0;
  for (const auto& ex : examples) max_spur = std::max(max_spur, ex.spurious_label);
  const int s = num_spurious > 0 ? num_spurious : max_spur + 1;
  if (max_spur >= s) throw InvalidInputError("spurious label outside declared range");

  std::map<std::pair<int, int>, std::pair<int, int>> per_group;  // (correct, total)
  for (std::size_t i = 0; i < preds.size(); ++i) {
    auto& cell = per_group[{examples[i].class_label, examples[i].spurious_label}];
    cell.first += preds[i] == examples[i].class_label ? 1 : 0;
    cell.second += 1;
  }
  WorstGroupResult result;
  result.accuracy = 2.0;  // above any achievable accuracy
  for (const auto& [key, cell] : per_group) {
    double acc = static_cast<double>(cell.first) / static_cast<double>(cell.second);
    if (acc < result.accuracy) {
      result.accuracy = acc;
      result.group_id = key.first * s + key.second;
    }
  }
  return result;
}

// Plug-in estimate of I(spurious; prediction | causal) over discrete labels,
// in nats: sum_c p(c) sum_{s,y} p(s,y|c) log[ p(s,y|c) / (p(s|c) p(y|c)) ].
inline double conditional_mutual_information(const std::vector<int>& spurious,
                                             const std::vector<int>& preds,
                                             const std::vector<int>& causal) {
  if (spurious.size() != preds.size() || preds.size() != causal.size())
    throw InvalidInputError("label sequences differ in length");
  if (spurious.empty()) throw InvalidInputError("cannot estimate CMI from no samples");

  struct Slice {
    double total = 0.0;
    std::map<std::pair<int, int>, double> joint;
    std::map<int, double> marg_s;
    std::map<int, double> marg_y;
  };
  std::map<int, Slice> slices;
  for (std::size_t i = 0; i < causal.size(); ++i) {
    Slice& sl = slices[causal[i]];
    sl.total += 1.0;
    sl.joint[{spurious[i], preds[i]}] += 1.0;
    sl.marg_s[spurious[i]] += 1.0;
    sl.marg_y[preds[i]] += 1.0;
  }
  const double n = static_cast<double>(causal.size());
  double cmi = 0.0;
  for (const auto& [c, sl] : slices) {
    double acc = 0.0;
    for (const auto& [sy, cnt] : sl.joint) {
      double denom = sl.marg_s.at(sy.first) * sl.marg_y.at(sy.second);
      acc += cnt * std::log(cnt * sl.total / denom);
    }
    cmi += acc / n;
  }
  return cmi;
}

// ---------------------------------------------------------------------------
// Dataset directory format: metadata.csv + one 8-bit PPM per example.
// ---------------------------------------------------------------------------

inline std::string example_image_name(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ex_%06zu.ppm", id);
  return buf;
}

inline void save_ppm(const ImageView& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot open image for writing: " + path);
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < kImageChannels; ++c) {
        unsigned char byte =
            static_cast<unsigned char>(std::lround(std::clamp(img.at(c, y, x), 0.0, 1.0) * 255.0));
        out.write(reinterpret_cast<const char*>(&byte), 1);
      }
}

inline ImageView load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInputError("cannot open image: " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || maxval != 255 || w < 1 || h < 1)
    throw InvalidInputError("unsupported image format (need binary P6, maxval 255): " + path);
  in.get();  // single whitespace after the header
  ImageView img = make_image(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < kImageChannels; ++c) {
        int byte = in.get();
        if (byte < 0) throw InvalidInputError("truncated image data: " + path);
        img.at(c, y, x) = static_cast<double>(byte) / 255.0;
      }
  return img;
}

inline void export_dataset(const std::vector<GroupedExample>& examples, const std::string& dir,
                           const std::string& split = "test") {
  std::filesystem::create_directories(dir);
  std::ofstream meta(std::filesystem::path(dir) / "metadata.csv");
  if (!meta) throw InvalidInputError("cannot write dataset metadata in " + dir);
  meta << "id,class_label,spurious_label,split\n";
  for (std::size_t i = 0; i < examples.size(); ++i) {
    meta << i << "," << examples[i].class_label << "," << examples[i].spurious_label << ","
         << split << "\n";
    save_ppm(examples[i].image, (std::filesystem::path(dir) / example_image_name(i)).string());
  }
}

inline std::vector<GroupedExample> import_dataset(const std::string& dir) {
  std::ifstream meta(std::filesystem::path(dir) / "metadata.csv");
  if (!meta) throw InvalidInputError("dataset metadata not found in " + dir);
  std::string line;
  if (!std::getline(meta, line) || line.rfind("id,class_label,spurious_label,split", 0) != 0)
    throw InvalidInputError("bad metadata header in " + dir);
  std::vector<GroupedExample> out;
  while (std::getline(meta, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string id_s, class_s, spur_s;
    if (!std::getline(row, id_s, ',') || !std::getline(row, class_s, ',') ||
        !std::getline(row, spur_s, ','))
      throw InvalidInputError("bad metadata row in " + dir + ": " + line);
    GroupedExample ex;
    try {
      std::size_t id = std::stoul(id_s);
      ex.class_label = std::stoi(class_s);
      ex.spurious_label = std::stoi(spur_s);
      ex.image = load_ppm((std::filesystem::path(dir) / example_image_name(id)).string());
    } catch (const std::logic_error&) {
      throw InvalidInputError("bad metadata row in " + dir + ": " + line);
    }
    if (ex.class_label < 0 || ex.spurious_label < 0)
      throw InvalidInputError("negative label in " + dir + ": " + line);
    out.push_back(std::move(ex));
  }
  if (out.empty()) throw InvalidInputError("dataset in " + dir + " has no examples");
  return out;
}

}  // namespace biprompt

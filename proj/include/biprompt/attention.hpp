#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "biprompt/core.hpp"
#include "biprompt/encoders.hpp"
#include "biprompt/errors.hpp"

namespace biprompt {

// Soft spatial weighting m(x) in [0,1]; 1 = causal foreground.
struct AttentionMap {
  int height = 0;
  int width = 0;
  Vec weights;
  int source_class = -1;

  double& at(int y, int x) { return weights[y * width + x]; }
  double at(int y, int x) const { return weights[y * width + x]; }
};

inline void validate_attention(const AttentionMap& map) {
  if (map.weights.size() != static_cast<std::size_t>(map.height) * map.width)
    throw InvalidInputError("attention buffer size does not match dimensions");
  for (double v : map.weights)
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInputError("attention weights must lie in [0,1]");
}

// Bilinear resize; outputs are convex combinations of inputs, so the value
// range is preserved.
inline Vec upsample_bilinear(const Vec& src, int sh, int sw, int dh, int dw) {
  Vec dst(static_cast<std::size_t>(dh) * dw);
  const double sy = static_cast<double>(sh) / dh;
  const double sx = static_cast<double>(sw) / dw;
  for (int y = 0; y < dh; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(sh - 1));
    int y0 = static_cast<int>(fy);
    int y1 = std::min(y0 + 1, sh - 1);
    double wy = fy - y0;
    for (int x = 0; x < dw; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(sw - 1));
      int x0 = static_cast<int>(fx);
      int x1 = std::min(x0 + 1, sw - 1);
      double wx = fx - x0;
      double top = (1.0 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1];
      double bot = (1.0 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1];
      dst[y * dw + x] = (1.0 - wy) * top + wy * bot;
    }
  }
  return dst;
}

// Argmax class of the pre-adaptation zero-shot prediction, lowest index on
// ties; this is what drives the Grad-CAM target at test time.
inline int resolve_target_class(const ImageView& img, const VisualEncoder& enc,
                                const std::vector<EmbeddingVector>& prompts, Temperature tau) {
  return argmax_lowest_tie(predict(enc.encode(img), prompts, tau));
}

// Fixed centered prior for encoders without spatial features: peak 1 at the
// center, ~0.1 at the corners.
inline AttentionMap center_prior_map(int height, int width, int source_class) {
  AttentionMap map;
  map.height = height;
  map.width = width;
  map.source_class = source_class;
  map.weights.assign(static_cast<std::size_t>(height) * width, 0.0);
  const double sigma2 = 1.0 / std::log(10.0);
  const double cy = (height - 1) / 2.0;
  const double cx = (width - 1) / 2.0;
  for (int y = 0; y < height; ++y) {
    double ny = cy > 0 ? (y - cy) / cy : 0.0;
    for (int x = 0; x < width; ++x) {
      double nx = cx > 0 ? (x - cx) / cx : 0.0;
      map.at(y, x) = std::exp(-(nx * nx + ny * ny) / (2.0 * sigma2));
    }
  }
  return map;
}

// Grad-CAM on the scaled similarity logit of the target class: channel
// weights are the spatial mean of d(logit)/d(feature), combined as a
// weighted channel sum, rectified at zero, min-max normalized, then
// bilinearly upsampled to the image size. A constant raw map degenerates
// to an all-0.5 neutral split.
inline AttentionMap gradcam(const VisualEncoder& enc, const ImageView& img,
                            const std::vector<EmbeddingVector>& prompts, Temperature tau,
                            std::optional<int> target_class = std::nullopt) {
  int target = target_class.has_value() ? *target_class
                                        : resolve_target_class(img, enc, prompts, tau);
  if (target < 0 || target >= static_cast<int>(prompts.size()))
    throw InvalidInputError("gradcam target class out of range");
  if (!enc.has_spatial_features()) return center_prior_map(img.height, img.width, target);

  auto handle = enc.spatial_features(img);
  const FeatureGrid& features = handle->features();

  // d(logit)/d(embedding) for logit = tau * cos(embedding, prompt).
  Vec cotangent = normalized(prompts[target]);
  for (double& v : cotangent) v *= tau.tau;
  FeatureGrid grad = handle->embedding_vjp(cotangent);
  for (double v : grad.values)
    if (!std::isfinite(v)) throw NumericalFailureError("non-finite Grad-CAM gradients");

  const int h = features.height;
  const int w = features.width;
  Vec channel_weights(features.channels, 0.0);
  const double inv = 1.0 / (h * w);
  for (int c = 0; c < features.channels; ++c) {
    double acc = 0.0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) acc += grad.at(c, y, x);
    channel_weights[c] = acc * inv;
  }

  Vec raw(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int c = 0; c < features.channels; ++c) acc += channel_weights[c] * features.at(c, y, x);
      raw[y * w + x] = std::max(acc, 0.0);
    }

  AttentionMap map;
  map.height = img.height;
  map.width = img.width;
  map.source_class = target;
  // Min-max normalization runs after upsampling so the delivered map hits
  // 0 and 1 exactly; it is an affine rescale, so argmax is unchanged.
  map.weights = upsample_bilinear(raw, h, w, img.height, img.width);
  auto [mn_it, mx_it] = std::minmax_element(map.weights.begin(), map.weights.end());
  double mn = *mn_it;
  double mx = *mx_it;
  if (mx - mn < 1e-12) {
    map.weights.assign(map.weights.size(), 0.5);
  } else {
    for (double& v : map.weights) v = std::clamp((v - mn) / (mx - mn), 0.0, 1.0);
  }
  return map;
}

// 8-bit grayscale PGM export for visual inspection.
inline void save_attention_pgm(const AttentionMap& map, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot open attention dump for writing: " + path);
  out << "P5\n" << map.width << " " << map.height << "\n255\n";
  for (double v : map.weights) {
    unsigned char byte = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    out.write(reinterpret_cast<const char*>(&byte), 1);
  }
}

}  // namespace biprompt

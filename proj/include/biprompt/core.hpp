#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "biprompt/errors.hpp"

namespace biprompt {

using Vec = std::vector<double>;

// A unit-norm vector in the shared visual-textual embedding space.
using EmbeddingVector = Vec;

// A length-C probability vector on the simplex.
using PredictionDistribution = Vec;

inline constexpr int kImageChannels = 3;
inline constexpr int kMinImageSide = 8;

enum class ViewTag { Original, Foreground, Background, RandomErased };

// 3-channel raster, planar layout (channel-major), values in [0,1].
struct ImageView {
  int height = 0;
  int width = 0;
  Vec pixels;  // size 3*height*width
  ViewTag tag = ViewTag::Original;

  double& at(int c, int y, int x) { return pixels[(c * height + y) * width + x]; }
  double at(int c, int y, int x) const { return pixels[(c * height + y) * width + x]; }
};

inline ImageView make_image(int height, int width, double fill = 0.0,
                            ViewTag tag = ViewTag::Original) {
  if (height < kMinImageSide || width < kMinImageSide)
    throw InvalidInputError("image sides must be at least " + std::to_string(kMinImageSide));
  ImageView img;
  img.height = height;
  img.width = width;
  img.pixels.assign(static_cast<std::size_t>(kImageChannels) * height * width, fill);
  img.tag = tag;
  return img;
}

inline void validate_image(const ImageView& img) {
  if (img.height < kMinImageSide || img.width < kMinImageSide)
    throw InvalidInputError("image sides must be at least " + std::to_string(kMinImageSide));
  if (img.pixels.size() != static_cast<std::size_t>(kImageChannels) * img.height * img.width)
    throw InvalidInputError("pixel buffer size does not match image dimensions");
  for (double v : img.pixels)
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidInputError("pixel values must lie in [0,1]");
}

// Channel-major spatial feature grid (channels x height x width).
struct FeatureGrid {
  int channels = 0;
  int height = 0;
  int width = 0;
  Vec values;

  double& at(int c, int y, int x) { return values[(c * height + y) * width + x]; }
  double at(int c, int y, int x) const { return values[(c * height + y) * width + x]; }
};

inline FeatureGrid make_grid(int channels, int height, int width, double fill = 0.0) {
  FeatureGrid g;
  g.channels = channels;
  g.height = height;
  g.width = width;
  g.values.assign(static_cast<std::size_t>(channels) * height * width, fill);
  return g;
}

// Inverse-softness of the similarity softmax. Frozen during adaptation;
// only the prompt-side gating and scale are learnable.
struct Temperature {
  double tau = 100.0;

  explicit Temperature(double t = 100.0) : tau(t) {
    if (!(tau > 0.0)) throw InvalidInputError("temperature must be positive");
  }
};

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(const Vec& a) { return std::sqrt(dot(a, a)); }

inline Vec normalized(const Vec& a, double floor = 1e-12) {
  double n = norm(a);
  if (n < floor) throw DegenerateInputError("cannot normalize a (near-)zero vector");
  Vec out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / n;
  return out;
}

inline bool is_unit_norm(const Vec& a, double tol = 1e-6) {
  return std::abs(norm(a) - 1.0) <= tol;
}

inline bool is_distribution(const Vec& p, double tol = 1e-9) {
  double sum = 0.0;
  for (double v : p) {
    if (v < 0.0) return false;
    sum += v;
  }
  return std::abs(sum - 1.0) <= tol;
}

inline int argmax_lowest_tie(const Vec& v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

// Numerically stable softmax; shifting logits by a constant is a no-op.
inline Vec softmax(const Vec& logits) {
  double m = *std::max_element(logits.begin(), logits.end());
  Vec out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// cos(a, b) = dot(a,b) / (|a||b|). Symmetric in its arguments.
inline double cosine_similarity(const Vec& a, const Vec& b) {
  if (a.size() != b.size())
    throw InvalidInputError("cosine_similarity: dimension mismatch");
  double na = norm(a);
  double nb = norm(b);
  if (na < 1e-12 || nb < 1e-12)
    throw DegenerateInputError("cosine_similarity: zero-norm vector");
  return dot(a, b) / (na * nb);
}

// p(y|x) = softmax(tau * cos(image_embedding, prompt_y)).
inline PredictionDistribution predict(const EmbeddingVector& image_embedding,
                                      const std::vector<EmbeddingVector>& prompts,
                                      Temperature tau) {
  if (prompts.size() < 2)
    throw InvalidTaskError("predict: at least two class prompts required");
  Vec logits(prompts.size());
  for (std::size_t c = 0; c < prompts.size(); ++c)
    logits[c] = tau.tau * cosine_similarity(image_embedding, prompts[c]);
  return softmax(logits);
}

}  // namespace biprompt

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "biprompt/attention.hpp"
#include "biprompt/core.hpp"
#include "biprompt/digest.hpp"
#include "biprompt/encoders.hpp"
#include "biprompt/errors.hpp"
#include "biprompt/rng.hpp"

namespace biprompt {

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double logit(double p) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidInputError("logit argument must lie in (0,1)");
  return std::log(p / (1.0 - p));
}

// Frozen class prompt embeddings plus the learnable debiasing parameters:
// the gating alpha (through a logistic map) and the per-dimension scale.
struct PromptSet {
  std::vector<EmbeddingVector> base_embeddings;
  double alpha_raw = 0.0;
  double init_alpha_raw = 0.0;
  Vec scale;

  double alpha() const { return logistic(alpha_raw); }
  int num_classes() const { return static_cast<int>(base_embeddings.size()); }
  int dim() const { return base_embeddings.empty() ? 0 : static_cast<int>(base_embeddings[0].size()); }
};

inline PromptSet make_prompt_set(std::vector<EmbeddingVector> base, double alpha_init = 0.9) {
  if (base.size() < 2) throw InvalidTaskError("prompt set requires at least two classes");
  for (const auto& row : base) {
    if (row.size() != base[0].size()) throw InvalidInputError("prompt embeddings differ in dimension");
    if (!is_unit_norm(row)) throw InvalidInputError("prompt embeddings must be unit-norm");
  }
  PromptSet ps;
  ps.alpha_raw = logit(alpha_init);
  ps.init_alpha_raw = ps.alpha_raw;
  ps.scale.assign(base[0].size(), 1.0);
  ps.base_embeddings = std::move(base);
  return ps;
}

// x_fg = m(x) . x, x_bg = (1 - m(x)) . x; the mask broadcasts over channels
// and the two views sum back to the original image.
inline std::pair<ImageView, ImageView> split_views(const ImageView& img, const AttentionMap& map) {
  if (map.height != img.height || map.width != img.width)
    throw InvalidInputError("attention map and image dimensions differ");
  ImageView fg = img;
  fg.tag = ViewTag::Foreground;
  ImageView bg = img;
  bg.tag = ViewTag::Background;
  for (int c = 0; c < kImageChannels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double m = map.at(y, x);
        double v = img.at(c, y, x);
        fg.at(c, y, x) = m * v;
        bg.at(c, y, x) = (1.0 - m) * v;
      }
  return {std::move(fg), std::move(bg)};
}

// Balanced prompt normalization with explicit parameters:
// out_c = normalize(scale . (alpha f_c + (1 - alpha) centroid)).
inline std::vector<EmbeddingVector> normalize_prompts_with(
    const std::vector<EmbeddingVector>& base, double alpha, const Vec& scale) {
  if (base.size() < 2) throw InvalidTaskError("prompt normalization requires at least two classes");
  const std::size_t d = base[0].size();
  if (scale.size() != d) throw InvalidInputError("scale dimension mismatch");
  Vec centroid(d, 0.0);
  for (const auto& row : base)
    for (std::size_t i = 0; i < d; ++i) centroid[i] += row[i] / static_cast<double>(base.size());
  std::vector<EmbeddingVector> out;
  out.reserve(base.size());
  for (const auto& row : base) {
    Vec u(d);
    for (std::size_t i = 0; i < d; ++i)
      u[i] = scale[i] * (alpha * row[i] + (1.0 - alpha) * centroid[i]);
    double n = norm(u);
    if (n < 1e-8)
      throw DegenerateCollapseError("prompt interpolation collapsed to zero before renormalization");
    for (double& v : u) v /= n;
    out.push_back(std::move(u));
  }
  return out;
}

inline std::vector<EmbeddingVector> normalize_prompts(const PromptSet& ps) {
  return normalize_prompts_with(ps.base_embeddings, ps.alpha(), ps.scale);
}

// Seeded random grid erasure (the SEraser auxiliary view). Sides that are
// not multiples of the grid are center-cropped first.
inline ImageView random_erase(const ImageView& img, int grid, int num_patches,
                              std::uint64_t rng_seed) {
  if (grid < 1) throw InvalidInputError("erasure grid must be positive");
  if (num_patches < 0 || num_patches > grid * grid)
    throw InvalidInputError("num_patches must lie in [0, grid^2]");
  const int ch = (img.height / grid) * grid;
  const int cw = (img.width / grid) * grid;
  if (ch < kMinImageSide || cw < kMinImageSide)
    throw InvalidInputError("image too small for the erasure grid");
  const int oy = (img.height - ch) / 2;
  const int ox = (img.width - cw) / 2;

  ImageView out = make_image(ch, cw, 0.0, ViewTag::RandomErased);
  for (int c = 0; c < kImageChannels; ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) out.at(c, y, x) = img.at(c, y + oy, x + ox);

  // Partial Fisher-Yates draw of distinct cells.
  std::vector<int> cells(static_cast<std::size_t>(grid) * grid);
  std::iota(cells.begin(), cells.end(), 0);
  SeededRng rng(mix_seed(rng_seed, 0xe7a5e));
  const int cell_h = ch / grid;
  const int cell_w = cw / grid;
  for (int k = 0; k < num_patches; ++k) {
    std::size_t j = k + rng.uniform_int(cells.size() - k);
    std::swap(cells[k], cells[j]);
    const int gy = cells[k] / grid;
    const int gx = cells[k] % grid;
    for (int c = 0; c < kImageChannels; ++c)
      for (int y = gy * cell_h; y < (gy + 1) * cell_h; ++y)
        for (int x = gx * cell_w; x < (gx + 1) * cell_w; ++x) out.at(c, y, x) = 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prompt state file: versioned little-endian binary with alpha_raw, the
// scale vector, and a digest of the frozen base embeddings.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kPromptStateMagic = 0x42505053;  // "BPPS"
inline constexpr std::uint32_t kPromptStateVersion = 1;

struct PromptState {
  double alpha_raw = 0.0;
  double init_alpha_raw = 0.0;
  Vec scale;
  std::string base_digest;  // hex
};

inline PromptState capture_prompt_state(const PromptSet& ps) {
  return {ps.alpha_raw, ps.init_alpha_raw, ps.scale, embeddings_digest(ps.base_embeddings)};
}

inline void save_prompt_state(const PromptSet& ps, const std::string& path) {
  ByteBuffer bytes;
  append_le_u32(bytes, kPromptStateMagic);
  append_le_u32(bytes, kPromptStateVersion);
  append_le_u32(bytes, static_cast<std::uint32_t>(ps.num_classes()));
  append_le_u32(bytes, static_cast<std::uint32_t>(ps.scale.size()));
  append_le_double(bytes, ps.alpha_raw);
  append_le_double(bytes, ps.init_alpha_raw);
  append_le_doubles(bytes, ps.scale);
  std::string digest = embeddings_digest(ps.base_embeddings);
  bytes.insert(bytes.end(), digest.begin(), digest.end());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot open prompt state for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline PromptState load_prompt_state(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInputError("cannot open prompt state: " + path);
  auto read_u32 = [&in, &path]() {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
      throw InvalidInputError("truncated prompt state: " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  auto read_double = [&in, &path]() {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8))
      throw InvalidInputError("truncated prompt state: " + path);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  };
  if (read_u32() != kPromptStateMagic) throw InvalidInputError("not a prompt state file: " + path);
  if (read_u32() != kPromptStateVersion)
    throw InvalidInputError("unsupported prompt state version: " + path);
  read_u32();  // class count, informational
  const std::uint32_t d = read_u32();
  PromptState state;
  state.alpha_raw = read_double();
  state.init_alpha_raw = read_double();
  state.scale.resize(d);
  for (double& v : state.scale) v = read_double();
  char digest[65] = {0};
  if (!in.read(digest, 64)) throw InvalidInputError("truncated prompt state: " + path);
  state.base_digest = digest;
  return state;
}

// Restores learnable parameters after checking the state belongs to the
// same frozen base embeddings.
inline void apply_prompt_state(PromptSet& ps, const PromptState& state) {
  if (state.base_digest != embeddings_digest(ps.base_embeddings))
    throw InvalidInputError("prompt state does not match these base embeddings");
  if (state.scale.size() != ps.scale.size())
    throw InvalidInputError("prompt state scale dimension mismatch");
  ps.alpha_raw = state.alpha_raw;
  ps.init_alpha_raw = state.init_alpha_raw;
  ps.scale = state.scale;
}

}  // namespace biprompt

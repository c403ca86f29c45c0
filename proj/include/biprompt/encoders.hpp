#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "biprompt/core.hpp"
#include "biprompt/digest.hpp"
#include "biprompt/errors.hpp"
#include "biprompt/rng.hpp"

namespace biprompt {

using Mat = std::vector<Vec>;  // row-major

// Handle over one forward pass; answers gradient queries against the
// spatial feature map. Single consumer, do not share across threads.
class FeatureGradientHandle {
 public:
  virtual ~FeatureGradientHandle() = default;
  virtual const FeatureGrid& features() const = 0;
  virtual const EmbeddingVector& embedding() const = 0;
  // d(cotangent . embedding) / d(features)
  virtual FeatureGrid embedding_vjp(const Vec& cotangent) const = 0;
};

class VisualEncoder {
 public:
  virtual ~VisualEncoder() = default;
  virtual int embed_dim() const = 0;
  virtual EmbeddingVector encode(const ImageView& img) const = 0;
  virtual bool has_spatial_features() const { return false; }
  virtual std::unique_ptr<FeatureGradientHandle> spatial_features(const ImageView&) const {
    throw UnsupportedEncoderError("encoder has no spatial feature map");
  }
  // Serializes every learnable parameter; feeds the frozen-weights digest.
  virtual void append_parameters(ByteBuffer& out) const = 0;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual int embed_dim() const = 0;
  virtual EmbeddingVector encode(const std::string& text) const = 0;
  virtual void append_parameters(ByteBuffer& out) const = 0;
};

inline std::string encoder_digest(const VisualEncoder& enc) {
  ByteBuffer bytes;
  enc.append_parameters(bytes);
  return sha256_hex(bytes);
}

inline std::string embeddings_digest(const std::vector<EmbeddingVector>& embeddings) {
  ByteBuffer bytes;
  append_le_u32(bytes, static_cast<std::uint32_t>(embeddings.size()));
  for (const auto& e : embeddings) append_le_doubles(bytes, e);
  return sha256_hex(bytes);
}

// ---------------------------------------------------------------------------
// Toy visual encoder: conv -> conv -> pool -> linear -> L2 normalize.
// ---------------------------------------------------------------------------

enum class Activation { Tanh, Relu };
enum class Pooling { Uniform, TopLeftCell };

// 3x3 convolution, stride 2, replicate padding. Replicate padding keeps
// constant inputs spatially constant, which the tests rely on.
struct Conv3x3 {
  int in_channels = 0;
  int out_channels = 0;
  Vec weights;  // [out][in][ky][kx]
  Vec bias;     // [out]

  double w(int o, int i, int ky, int kx) const {
    return weights[((o * in_channels + i) * 3 + ky) * 3 + kx];
  }

  FeatureGrid forward(const FeatureGrid& in, Activation act) const {
    const int oh = (in.height + 1) / 2;
    const int ow = (in.width + 1) / 2;
    FeatureGrid out = make_grid(out_channels, oh, ow);
    for (int o = 0; o < out_channels; ++o) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias[o];
          for (int i = 0; i < in_channels; ++i) {
            for (int ky = 0; ky < 3; ++ky) {
              int sy = std::clamp(2 * oy + ky - 1, 0, in.height - 1);
              for (int kx = 0; kx < 3; ++kx) {
                int sx = std::clamp(2 * ox + kx - 1, 0, in.width - 1);
                acc += w(o, i, ky, kx) * in.at(i, sy, sx);
              }
            }
          }
          out.at(o, oy, ox) = act == Activation::Tanh ? std::tanh(acc) : std::max(acc, 0.0);
        }
      }
    }
    return out;
  }
};

struct ToyVisualEncoderConfig {
  int embed_dim = 32;
  int conv1_channels = 8;
  int conv2_channels = 16;
  Activation activation = Activation::Tanh;
  bool conv_bias = true;
  Pooling pooling = Pooling::Uniform;
  std::uint64_t seed = 0x5eed;
};

class ToyVisualEncoder;

namespace detail {
class ToyFeatureHandle;
}

class ToyVisualEncoder : public VisualEncoder {
 public:
  explicit ToyVisualEncoder(const ToyVisualEncoderConfig& cfg) : cfg_(cfg) {
    SeededRng rng(mix_seed(cfg.seed, 0x76656e63));
    init_conv(conv1_, kImageChannels, cfg.conv1_channels, rng);
    init_conv(conv2_, cfg.conv1_channels, cfg.conv2_channels, rng);
    projection_.assign(cfg.embed_dim, Vec(cfg.conv2_channels, 0.0));
    const double ws = 1.0 / std::sqrt(static_cast<double>(cfg.conv2_channels));
    for (auto& row : projection_)
      for (double& v : row) v = ws * rng.gaussian();
    projection_bias_.assign(cfg.embed_dim, 0.0);
    for (double& v : projection_bias_) v = 0.1 * rng.gaussian();
  }

  int embed_dim() const override { return cfg_.embed_dim; }
  bool has_spatial_features() const override { return true; }

  // conv1 -> act -> conv2 -> act. Last spatial map before pooling.
  FeatureGrid feature_map(const ImageView& img) const {
    check_image(img);
    FeatureGrid in = make_grid(kImageChannels, img.height, img.width);
    in.values = img.pixels;
    FeatureGrid h = conv1_.forward(in, cfg_.activation);
    return conv2_.forward(h, cfg_.activation);
  }

  Vec pooled_features(const FeatureGrid& f) const {
    Vec g(f.channels, 0.0);
    if (cfg_.pooling == Pooling::TopLeftCell) {
      for (int c = 0; c < f.channels; ++c) g[c] = f.at(c, 0, 0);
      return g;
    }
    const double inv = 1.0 / (f.height * f.width);
    for (int c = 0; c < f.channels; ++c) {
      double acc = 0.0;
      for (int y = 0; y < f.height; ++y)
        for (int x = 0; x < f.width; ++x) acc += f.at(c, y, x);
      g[c] = acc * inv;
    }
    return g;
  }

  EmbeddingVector embed_from_features(const FeatureGrid& f) const {
    Vec g = pooled_features(f);
    Vec raw(cfg_.embed_dim, 0.0);
    for (int i = 0; i < cfg_.embed_dim; ++i) raw[i] = dot(projection_[i], g) + projection_bias_[i];
    return normalized(raw);
  }

  EmbeddingVector encode(const ImageView& img) const override {
    return embed_from_features(feature_map(img));
  }

  std::unique_ptr<FeatureGradientHandle> spatial_features(const ImageView& img) const override;

  // Replaces the projection head; used by the planted-bias factory and
  // by constructed test encoders.
  void set_projection(Mat weights, Vec bias) {
    if (weights.size() != static_cast<std::size_t>(cfg_.embed_dim) ||
        bias.size() != static_cast<std::size_t>(cfg_.embed_dim))
      throw InvalidInputError("projection shape mismatch");
    for (const auto& row : weights)
      if (row.size() != static_cast<std::size_t>(cfg_.conv2_channels))
        throw InvalidInputError("projection shape mismatch");
    projection_ = std::move(weights);
    projection_bias_ = std::move(bias);
  }

  void set_convolutions(Conv3x3 c1, Conv3x3 c2) {
    if (c1.in_channels != kImageChannels || c1.out_channels != cfg_.conv1_channels ||
        c2.in_channels != cfg_.conv1_channels || c2.out_channels != cfg_.conv2_channels)
      throw InvalidInputError("convolution shape mismatch");
    conv1_ = std::move(c1);
    conv2_ = std::move(c2);
  }

  const ToyVisualEncoderConfig& config() const { return cfg_; }
  const Conv3x3& conv1() const { return conv1_; }
  const Conv3x3& conv2() const { return conv2_; }
  const Mat& projection() const { return projection_; }
  const Vec& projection_bias() const { return projection_bias_; }

  void append_parameters(ByteBuffer& out) const override {
    append_le_u32(out, static_cast<std::uint32_t>(cfg_.embed_dim));
    append_le_u32(out, static_cast<std::uint32_t>(cfg_.conv1_channels));
    append_le_u32(out, static_cast<std::uint32_t>(cfg_.conv2_channels));
    append_le_u32(out, static_cast<std::uint32_t>(cfg_.activation));
    append_le_u32(out, static_cast<std::uint32_t>(cfg_.pooling));
    append_le_doubles(out, conv1_.weights);
    append_le_doubles(out, conv1_.bias);
    append_le_doubles(out, conv2_.weights);
    append_le_doubles(out, conv2_.bias);
    for (const auto& row : projection_) append_le_doubles(out, row);
    append_le_doubles(out, projection_bias_);
  }

 private:
  friend class detail::ToyFeatureHandle;

  void check_image(const ImageView& img) const {
    if (img.height < kMinImageSide || img.width < kMinImageSide)
      throw InvalidInputError("image below minimum encoder input size");
    if (img.pixels.size() != static_cast<std::size_t>(kImageChannels) * img.height * img.width)
      throw InvalidInputError("pixel buffer size does not match image dimensions");
  }

  void init_conv(Conv3x3& conv, int in_ch, int out_ch, SeededRng& rng) const {
    conv.in_channels = in_ch;
    conv.out_channels = out_ch;
    conv.weights.assign(static_cast<std::size_t>(out_ch) * in_ch * 9, 0.0);
    const double ws = 1.0 / std::sqrt(9.0 * in_ch);
    for (double& v : conv.weights) v = ws * rng.gaussian();
    conv.bias.assign(out_ch, 0.0);
    if (cfg_.conv_bias)
      for (double& v : conv.bias) v = 0.1 * rng.gaussian();
  }

  ToyVisualEncoderConfig cfg_;
  Conv3x3 conv1_;
  Conv3x3 conv2_;
  Mat projection_;
  Vec projection_bias_;
};

namespace detail {

class ToyFeatureHandle : public FeatureGradientHandle {
 public:
  ToyFeatureHandle(const ToyVisualEncoder& enc, FeatureGrid f) : enc_(enc), features_(std::move(f)) {
    pooled_ = enc.pooled_features(features_);
    raw_.assign(enc.config().embed_dim, 0.0);
    for (int i = 0; i < enc.config().embed_dim; ++i)
      raw_[i] = dot(enc.projection()[i], pooled_) + enc.projection_bias()[i];
    raw_norm_ = norm(raw_);
    embedding_ = normalized(raw_);
  }

  const FeatureGrid& features() const override { return features_; }
  const EmbeddingVector& embedding() const override { return embedding_; }

  FeatureGrid embedding_vjp(const Vec& cotangent) const override {
    if (cotangent.size() != embedding_.size())
      throw InvalidInputError("cotangent dimension mismatch");
    // Through L2 normalization: d(raw) = (w - (w.e) e) / |raw|.
    const double we = dot(cotangent, embedding_);
    Vec draw(raw_.size());
    for (std::size_t i = 0; i < raw_.size(); ++i)
      draw[i] = (cotangent[i] - we * embedding_[i]) / raw_norm_;
    // Through the projection.
    Vec dg(pooled_.size(), 0.0);
    for (std::size_t i = 0; i < draw.size(); ++i)
      for (std::size_t c = 0; c < dg.size(); ++c) dg[c] += enc_.projection()[i][c] * draw[i];
    // Through pooling.
    FeatureGrid out = make_grid(features_.channels, features_.height, features_.width);
    if (enc_.config().pooling == Pooling::TopLeftCell) {
      for (int c = 0; c < out.channels; ++c) out.at(c, 0, 0) = dg[c];
    } else {
      const double inv = 1.0 / (features_.height * features_.width);
      for (int c = 0; c < out.channels; ++c)
        for (int y = 0; y < out.height; ++y)
          for (int x = 0; x < out.width; ++x) out.at(c, y, x) = dg[c] * inv;
    }
    return out;
  }

 private:
  const ToyVisualEncoder& enc_;
  FeatureGrid features_;
  Vec pooled_;
  Vec raw_;
  double raw_norm_ = 0.0;
  EmbeddingVector embedding_;
};

}  // namespace detail

inline std::unique_ptr<FeatureGradientHandle> ToyVisualEncoder::spatial_features(
    const ImageView& img) const {
  return std::make_unique<detail::ToyFeatureHandle>(*this, feature_map(img));
}

// ---------------------------------------------------------------------------
// Toy text encoder: hashed token embeddings, mean pool, linear, normalize.
// ---------------------------------------------------------------------------

struct ToyTextEncoderConfig {
  int embed_dim = 32;
  int table_dim = 48;
  std::uint64_t seed = 0x7e47;
};

class ToyTextEncoder : public TextEncoder {
 public:
  explicit ToyTextEncoder(const ToyTextEncoderConfig& cfg) : cfg_(cfg) {
    SeededRng rng(mix_seed(cfg.seed, 0x7e47e0c0));
    projection_.assign(cfg.embed_dim, Vec(cfg.table_dim, 0.0));
    const double ws = 1.0 / std::sqrt(static_cast<double>(cfg.table_dim));
    for (auto& row : projection_)
      for (double& v : row) v = ws * rng.gaussian();
  }

  int embed_dim() const override { return cfg_.embed_dim; }

  EmbeddingVector encode(const std::string& text) const override {
    auto tokens = tokenize(text);
    if (tokens.empty()) throw InvalidInputError("cannot encode text without tokens");
    Vec pooled(cfg_.table_dim, 0.0);
    for (const auto& tok : tokens) {
      SeededRng trng(mix_seed(cfg_.seed, fnv1a64(tok)));
      for (int i = 0; i < cfg_.table_dim; ++i) pooled[i] += trng.gaussian();
    }
    for (double& v : pooled) v /= static_cast<double>(tokens.size());
    Vec raw(cfg_.embed_dim, 0.0);
    for (int i = 0; i < cfg_.embed_dim; ++i) raw[i] = dot(projection_[i], pooled);
    return normalized(raw);
  }

  void append_parameters(ByteBuffer& out) const override {
    append_le_u32(out, static_cast<std::uint32_t>(cfg_.embed_dim));
    append_le_u32(out, static_cast<std::uint32_t>(cfg_.table_dim));
    append_le_u64(out, cfg_.seed);
    for (const auto& row : projection_) append_le_doubles(out, row);
  }

  static std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : text) {
      if (std::isalnum(static_cast<unsigned char>(ch))) {
        cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
      } else if (!cur.empty()) {
        tokens.push_back(cur);
        cur.clear();
      }
    }
    if (!cur.empty()) tokens.push_back(cur);
    return tokens;
  }

 private:
  ToyTextEncoderConfig cfg_;
  Mat projection_;
};

// Fills the template's single "{}" placeholder and encodes each class name.
inline std::vector<EmbeddingVector> encode_class_prompts(const TextEncoder& enc,
                                                         const std::vector<std::string>& names,
                                                         const std::string& tmpl) {
  if (names.size() < 2) throw InvalidTaskError("at least two class names required");
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos || tmpl.find("{}", pos + 1) != std::string::npos)
    throw InvalidInputError("template must contain exactly one {} placeholder");
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].empty()) throw InvalidInputError("class names must be nonempty");
    for (std::size_t j = i + 1; j < names.size(); ++j)
      if (names[i] == names[j]) throw InvalidTaskError("duplicate class name: " + names[i]);
  }
  std::vector<EmbeddingVector> out;
  out.reserve(names.size());
  for (const auto& name : names) {
    std::string prompt = tmpl;
    prompt.replace(pos, 2, name);
    out.push_back(enc.encode(prompt));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Planted-bias variant: the projection is solved so that border-texture
// features land on class prompt directions with gain `spurious_gain`,
// giving the benchmark a controllable spurious channel.
// ---------------------------------------------------------------------------

struct PlantedBiasConfig {
  double spurious_gain = 2.0;   // border texture mass along the co-occurring class prompt
  double off_class_mix = 0.4;   // fraction of the spurious direction off the class axis
  double saliency_gain = 0.8;   // patch mass shared across classes (centroid direction)
  double blank_gain = 0.05;     // where the blank background maps (centroid direction)
  double residual_mix = 0.05;   // random mapping of feature directions outside the signatures
  std::uint64_t seed = 0xb1a5;
};

namespace detail {

// Solves the square system A x = b in place; A is n x n row-major.
inline Vec solve_linear(Mat a, Vec b) {
  const std::size_t n = b.size();
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t pivot = col;
    for (std::size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[pivot][col])) pivot = r;
    if (std::abs(a[pivot][col]) < 1e-12)
      throw NumericalFailureError("planted-bias signature system is singular");
    std::swap(a[col], a[pivot]);
    std::swap(b[col], b[pivot]);
    for (std::size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  Vec x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = b[i] / a[i][i];
  return x;
}

inline Vec gram_schmidt_unit(Vec candidate, const std::vector<Vec>& basis) {
  for (const auto& b : basis) {
    double proj = dot(candidate, b) / dot(b, b);
    for (std::size_t i = 0; i < candidate.size(); ++i) candidate[i] -= proj * b[i];
  }
  return normalized(candidate);
}

}  // namespace detail

// Builds a toy encoder whose embedding space is calibrated against the given
// prompt embeddings: the class patch maps near its prompt, the border texture
// maps onto the co-occurring class prompt (amplified), and the blank
// background maps near zero.
inline ToyVisualEncoder make_planted_bias_encoder(
    const ToyVisualEncoderConfig& base, const PlantedBiasConfig& plant,
    const std::vector<ImageView>& class_canonicals,
    const std::vector<ImageView>& texture_canonicals, const ImageView& blank,
    const std::vector<EmbeddingVector>& prompt_embeddings) {
  const std::size_t num_classes = class_canonicals.size();
  const std::size_t num_textures = texture_canonicals.size();
  if (prompt_embeddings.size() != num_classes)
    throw InvalidInputError("one prompt embedding per class required");
  if (num_textures > num_classes)
    throw InvalidInputError("planted bias requires num textures <= num classes");

  ToyVisualEncoder enc(base);
  const int d = base.embed_dim;
  const int k = base.conv2_channels;
  const std::size_t n_sig = num_classes + num_textures + 1;
  if (n_sig > static_cast<std::size_t>(k))
    throw InvalidTaskError("conv2_channels too small for the planted signature set");

  // Pooled feature signatures of the canonical content, blank-subtracted.
  const Vec g_blank = enc.pooled_features(enc.feature_map(blank));
  Mat signatures;  // n_sig rows of length k
  for (const auto& img : class_canonicals) {
    Vec s = enc.pooled_features(enc.feature_map(img));
    for (int i = 0; i < k; ++i) s[i] -= g_blank[i];
    signatures.push_back(std::move(s));
  }
  for (const auto& img : texture_canonicals) {
    Vec s = enc.pooled_features(enc.feature_map(img));
    for (int i = 0; i < k; ++i) s[i] -= g_blank[i];
    signatures.push_back(std::move(s));
  }
  signatures.push_back(g_blank);

  // Embedding-space targets for each signature.
  Vec centroid(d, 0.0);
  for (const auto& u : prompt_embeddings)
    for (int i = 0; i < d; ++i) centroid[i] += u[i] / static_cast<double>(num_classes);
  centroid = normalized(centroid);

  std::vector<Vec> protected_dirs(prompt_embeddings.begin(), prompt_embeddings.end());
  protected_dirs.push_back(centroid);
  SeededRng rng(mix_seed(plant.seed, 0x0ffc1a55));
  Mat targets;
  for (std::size_t c = 0; c < num_classes; ++c) {
    Vec t(d);
    for (int i = 0; i < d; ++i)
      t[i] = prompt_embeddings[c][i] + plant.saliency_gain * centroid[i];
    targets.push_back(std::move(t));
  }
  const double on_axis = std::sqrt(1.0 - plant.off_class_mix * plant.off_class_mix);
  for (std::size_t j = 0; j < num_textures; ++j) {
    Vec q(d);
    for (double& v : q) v = rng.gaussian();
    q = detail::gram_schmidt_unit(std::move(q), protected_dirs);
    protected_dirs.push_back(q);
    Vec t(d);
    for (int i = 0; i < d; ++i)
      t[i] = plant.spurious_gain * (on_axis * prompt_embeddings[j][i] + plant.off_class_mix * q[i]);
    targets.push_back(std::move(t));
  }
  {
    Vec t(d);
    for (int i = 0; i < d; ++i) t[i] = plant.blank_gain * centroid[i];
    targets.push_back(std::move(t));
  }

  // Least-norm exact interpolation: W = T M S^T with M = (S S^T)^-1, so that
  // W s_i = t_i for every signature. Residual feature directions get a small
  // seeded random mapping through the complement projector.
  Mat gram(n_sig, Vec(n_sig, 0.0));
  for (std::size_t i = 0; i < n_sig; ++i)
    for (std::size_t j = 0; j < n_sig; ++j) gram[i][j] = dot(signatures[i], signatures[j]);

  // coeff[i] = M . (column of T per embedding dim); assembled per dim below.
  Mat weights(d, Vec(k, 0.0));
  for (int dim = 0; dim < d; ++dim) {
    Vec rhs(n_sig);
    for (std::size_t i = 0; i < n_sig; ++i) rhs[i] = targets[i][dim];
    Vec coeff = detail::solve_linear(gram, std::move(rhs));
    for (int c = 0; c < k; ++c) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n_sig; ++i) acc += coeff[i] * signatures[i][c];
      weights[dim][c] = acc;
    }
  }

  if (plant.residual_mix > 0.0) {
    // R (I - S^T M S): random map on the orthogonal complement of the
    // signature span, leaving the planted responses untouched.
    Mat r(d, Vec(k, 0.0));
    const double ws = plant.residual_mix / std::sqrt(static_cast<double>(k));
    for (auto& row : r)
      for (double& v : row) v = ws * rng.gaussian();
    for (int dim = 0; dim < d; ++dim) {
      Vec rs(n_sig);
      for (std::size_t i = 0; i < n_sig; ++i) rs[i] = dot(r[dim], signatures[i]);
      Vec coeff = detail::solve_linear(gram, std::move(rs));
      for (int c = 0; c < k; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n_sig; ++i) acc += coeff[i] * signatures[i][c];
        weights[dim][c] += r[dim][c] - acc;
      }
    }
  }

  enc.set_projection(std::move(weights), Vec(d, 0.0));
  return enc;
}

// ---------------------------------------------------------------------------
// Checkpoint adapter: a visual encoder loaded from a weight file, behind the
// same interface and contract as the in-process toys.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kVisualCheckpointMagic = 0x42505645;  // "BPVE"
inline constexpr std::uint32_t kVisualCheckpointVersion = 1;

inline void save_visual_encoder(const ToyVisualEncoder& enc, const std::string& path) {
  ByteBuffer bytes;
  append_le_u32(bytes, kVisualCheckpointMagic);
  append_le_u32(bytes, kVisualCheckpointVersion);
  enc.append_parameters(bytes);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInputError("cannot open checkpoint for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline ToyVisualEncoder load_visual_encoder(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInputError("cannot open checkpoint: " + path);
  auto read_u32 = [&in, &path]() {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
      throw InvalidInputError("truncated checkpoint: " + path);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  };
  auto read_doubles = [&in, &path](Vec& out) {
    for (double& v : out) {
      unsigned char b[8];
      if (!in.read(reinterpret_cast<char*>(b), 8))
        throw InvalidInputError("truncated checkpoint: " + path);
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
      std::memcpy(&v, &bits, sizeof(v));
    }
  };
  if (read_u32() != kVisualCheckpointMagic) throw InvalidInputError("not an encoder checkpoint: " + path);
  if (read_u32() != kVisualCheckpointVersion)
    throw InvalidInputError("unsupported checkpoint version: " + path);
  ToyVisualEncoderConfig cfg;
  cfg.embed_dim = static_cast<int>(read_u32());
  cfg.conv1_channels = static_cast<int>(read_u32());
  cfg.conv2_channels = static_cast<int>(read_u32());
  cfg.activation = static_cast<Activation>(read_u32());
  cfg.pooling = static_cast<Pooling>(read_u32());
  ToyVisualEncoder enc(cfg);
  Conv3x3 c1{kImageChannels, cfg.conv1_channels,
             Vec(static_cast<std::size_t>(cfg.conv1_channels) * kImageChannels * 9), Vec(cfg.conv1_channels)};
  Conv3x3 c2{cfg.conv1_channels, cfg.conv2_channels,
             Vec(static_cast<std::size_t>(cfg.conv2_channels) * cfg.conv1_channels * 9), Vec(cfg.conv2_channels)};
  read_doubles(c1.weights);
  read_doubles(c1.bias);
  read_doubles(c2.weights);
  read_doubles(c2.bias);
  Mat w(cfg.embed_dim, Vec(cfg.conv2_channels));
  for (auto& row : w) read_doubles(row);
  Vec b(cfg.embed_dim);
  read_doubles(b);
  enc.set_convolutions(std::move(c1), std::move(c2));
  enc.set_projection(std::move(w), std::move(b));
  return enc;
}

}  // namespace biprompt

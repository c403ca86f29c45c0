#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "biprompt/attention.hpp"
#include "biprompt/core.hpp"
#include "biprompt/debias.hpp"
#include "biprompt/encoders.hpp"
#include "biprompt/errors.hpp"
#include "biprompt/objective.hpp"

namespace biprompt {

enum class AdaptMethod { Vanilla, SEraser, BiPrompt };

inline std::string to_string(AdaptMethod m) {
  switch (m) {
    case AdaptMethod::Vanilla: return "vanilla";
    case AdaptMethod::SEraser: return "seraser";
    default: return "biprompt";
  }
}

struct AdaptationConfig {
  int steps = 1;
  double step_size = 5e-3;
  LossWeights weights;
  AdaptMethod method = AdaptMethod::BiPrompt;
  bool episodic = true;
  std::uint64_t seed = 0;
  Temperature tau{100.0};
  double alpha_init = 0.9;
  bool use_pseudo_ce = true;
  bool learn_scale = true;
  int erase_grid = 8;
  int erase_patches = 4;
};

inline void validate_adaptation_config(const AdaptationConfig& cfg) {
  if (cfg.steps < 0) throw InvalidInputError("steps must be >= 0");
  if (!(cfg.step_size > 0.0)) throw InvalidInputError("step_size must be positive");
  if (!(cfg.alpha_init > 0.0 && cfg.alpha_init < 1.0))
    throw InvalidInputError("alpha_init must lie in (0,1)");
  if (cfg.erase_grid < 1 || cfg.erase_patches < 0 ||
      cfg.erase_patches > cfg.erase_grid * cfg.erase_grid)
    throw InvalidInputError("invalid erasure grid");
  validate_loss_weights(cfg.weights);
}

// One record per gradient step: the losses that drove the update, then the
// state the update produced.
struct StepRecord {
  double total = 0.0;
  double ce = 0.0;
  double consistency = 0.0;
  double entropy = 0.0;
  double alpha = 0.0;
  double prediction_entropy = 0.0;
};

struct AdaptationTrace {
  std::vector<StepRecord> records;
  int pseudo_label = -1;
  bool failed = false;
};

struct AdaptResult {
  PredictionDistribution prediction;
  AdaptationTrace trace;
  PromptSet prompts;
  std::optional<AttentionMap> attention;
};

// Restores the learnable parameters; the frozen base embeddings are
// untouched. Applied between samples under the episodic protocol.
inline void reset(PromptSet& ps) {
  ps.alpha_raw = ps.init_alpha_raw;
  ps.scale.assign(ps.scale.size(), 1.0);
}

inline double shannon_entropy(const PredictionDistribution& p) {
  double acc = 0.0;
  for (double v : p)
    if (v > 0.0) acc += v * std::log(v);
  return -acc;
}

namespace detail {

inline bool all_finite(const Vec& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

inline bool eval_finite(const ObjectiveEval& e) {
  return std::isfinite(e.terms.total) && std::isfinite(e.grads.alpha_raw) &&
         all_finite(e.grads.scale);
}

}  // namespace detail

// Episodic per-sample adaptation: resolve the pseudo-label from the
// zero-shot prediction, build the auxiliary views once, take `steps`
// first-order updates of alpha_raw and scale, then predict with the adapted
// prompts. Encoder weights and base embeddings are read-only throughout; on
// numerical failure the zero-shot prediction is returned with the trace
// marked failed.
inline AdaptResult adapt_sample(const ImageView& img, const PromptSet& ps,
                                const VisualEncoder& enc, const AdaptationConfig& cfg) {
  validate_adaptation_config(cfg);
  AdaptResult res;
  res.prompts = ps;

  const Vec v_orig = enc.encode(img);
  const PredictionDistribution zero_shot = predict(v_orig, ps.base_embeddings, cfg.tau);
  res.trace.pseudo_label = argmax_lowest_tie(zero_shot);

  if (cfg.method == AdaptMethod::Vanilla || cfg.steps == 0) {
    res.prediction = zero_shot;
    return res;
  }

  try {
    Vec v_fg, v_bg, v_erased;
    if (cfg.method == AdaptMethod::BiPrompt) {
      AttentionMap map =
          gradcam(enc, img, ps.base_embeddings, cfg.tau, res.trace.pseudo_label);
      auto [fg, bg] = split_views(img, map);
      v_fg = enc.encode(fg);
      v_bg = enc.encode(bg);
      res.attention = std::move(map);
    } else {
      v_erased = enc.encode(random_erase(img, cfg.erase_grid, cfg.erase_patches, cfg.seed));
    }

    res.trace.records.reserve(cfg.steps);
    for (int step = 0; step < cfg.steps; ++step) {
      ObjectiveEval eval =
          cfg.method == AdaptMethod::BiPrompt
              ? evaluate_biprompt_objective(res.prompts, v_orig, v_fg, v_bg,
                                            res.trace.pseudo_label, cfg.tau, cfg.weights,
                                            cfg.use_pseudo_ce)
              : evaluate_seraser_objective(res.prompts, v_orig, v_erased,
                                           res.trace.pseudo_label, cfg.tau, cfg.weights,
                                           cfg.use_pseudo_ce);
      if (!detail::eval_finite(eval)) throw NumericalFailureError("non-finite loss or gradient");

      res.prompts.alpha_raw -= cfg.step_size * eval.grads.alpha_raw;
      if (cfg.learn_scale)
        for (std::size_t i = 0; i < res.prompts.scale.size(); ++i)
          res.prompts.scale[i] =
              std::max(res.prompts.scale[i] - cfg.step_size * eval.grads.scale[i], 1e-4);

      StepRecord rec;
      rec.total = eval.terms.total;
      rec.ce = eval.terms.ce;
      rec.consistency = eval.terms.consistency;
      rec.entropy = eval.terms.entropy;
      rec.alpha = res.prompts.alpha();
      rec.prediction_entropy =
          shannon_entropy(predict(v_orig, normalize_prompts(res.prompts), cfg.tau));
      res.trace.records.push_back(rec);
    }

    res.prediction = predict(v_orig, normalize_prompts(res.prompts), cfg.tau);
    if (!detail::all_finite(res.prediction))
      throw NumericalFailureError("non-finite adapted prediction");
  } catch (const NumericalFailureError&) {
    res.trace.failed = true;
    res.prediction = zero_shot;
    res.prompts = ps;
  } catch (const DegenerateCollapseError&) {
    res.trace.failed = true;
    res.prediction = zero_shot;
    res.prompts = ps;
  }
  return res;
}

}  // namespace biprompt

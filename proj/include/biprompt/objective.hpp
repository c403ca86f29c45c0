#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "biprompt/core.hpp"
#include "biprompt/debias.hpp"
#include "biprompt/errors.hpp"

namespace biprompt {

inline constexpr double kProbFloor = 1e-12;

// Eq. 7 writes a minus sign on the background-cosine term, but the
// surrounding text asks for orthogonality between x_bg and x, which under
// minimization requires a plus. Both readings are implemented; the text
// reading is the default and the sweep covers the ablation.
enum class OrthogonalitySign { PaperEq7, TextSemantics };

inline std::string to_string(OrthogonalitySign s) {
  return s == OrthogonalitySign::PaperEq7 ? "paper_eq7" : "text_semantics";
}

struct LossWeights {
  double lambda1 = 1.0;  // consistency term (BSE or SEraser KL)
  double lambda2 = 0.1;  // entropy regularizer
  double beta = 1.0;     // background-cosine weight inside BSE
  OrthogonalitySign orthogonality_sign = OrthogonalitySign::TextSemantics;
};

inline void validate_loss_weights(const LossWeights& w) {
  for (double v : {w.lambda1, w.lambda2, w.beta})
    if (!(std::isfinite(v) && v >= 0.0)) throw InvalidInputError("loss weights must be finite and >= 0");
}

// D_KL(p || q) with q clamped below at 1e-12; 0 log 0 = 0.
inline double kl_divergence(const PredictionDistribution& p, const PredictionDistribution& q) {
  if (p.size() != q.size()) throw InvalidInputError("kl_divergence: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    acc += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kProbFloor)));
  }
  return acc;
}

// Eq. 3 verbatim, including the 1/C prefactor: a scaled entropy.
inline double entropy_reg(const PredictionDistribution& p) {
  double acc = 0.0;
  for (double v : p)
    if (v > 0.0) acc += v * std::log(v);
  return -acc / static_cast<double>(p.size());
}

// Cosine between two probability vectors; nonnegative entries keep it in [0,1].
inline double distribution_cosine(const PredictionDistribution& p,
                                  const PredictionDistribution& q) {
  if (p.size() != q.size()) throw InvalidInputError("distribution_cosine: length mismatch");
  double c = dot(p, q) / (norm(p) * norm(q));
  return std::clamp(c, 0.0, 1.0);
}

// L_BSE = KL(p_fg || p) -/+ beta cos(p_bg, p), sign per orthogonality_sign.
inline double bse_loss(const PredictionDistribution& p_fg, const PredictionDistribution& p_bg,
                       const PredictionDistribution& p, const LossWeights& w) {
  double sign = w.orthogonality_sign == OrthogonalitySign::TextSemantics ? 1.0 : -1.0;
  return kl_divergence(p_fg, p) + sign * w.beta * distribution_cosine(p_bg, p);
}

// Test-time CE against the frozen pseudo-label: -log p[label].
inline double pseudo_ce(const PredictionDistribution& p, int pseudo_label) {
  if (pseudo_label < 0 || pseudo_label >= static_cast<int>(p.size()))
    throw InvalidInputError("pseudo_ce: label out of range");
  return -std::log(std::max(p[pseudo_label], kProbFloor));
}

struct LossTerms {
  double total = 0.0;
  double ce = 0.0;
  double consistency = 0.0;  // lambda1's term: L_BSE or L_SEraser
  double entropy = 0.0;
  double kl_fg = 0.0;   // BSE decomposition
  double cos_bg = 0.0;  // BSE decomposition
};

inline LossTerms total_loss_biprompt(const PredictionDistribution& p,
                                     const PredictionDistribution& p_fg,
                                     const PredictionDistribution& p_bg, int pseudo_label,
                                     const LossWeights& w) {
  validate_loss_weights(w);
  LossTerms t;
  t.ce = pseudo_ce(p, pseudo_label);
  t.kl_fg = kl_divergence(p_fg, p);
  t.cos_bg = distribution_cosine(p_bg, p);
  t.consistency = bse_loss(p_fg, p_bg, p, w);
  t.entropy = entropy_reg(p);
  t.total = t.ce + w.lambda1 * t.consistency + w.lambda2 * t.entropy;
  return t;
}

inline LossTerms total_loss_seraser(const PredictionDistribution& p,
                                    const PredictionDistribution& p_erased, int pseudo_label,
                                    const LossWeights& w) {
  validate_loss_weights(w);
  LossTerms t;
  t.ce = pseudo_ce(p, pseudo_label);
  t.consistency = kl_divergence(p, p_erased);
  t.entropy = entropy_reg(p);
  t.total = t.ce + w.lambda1 * t.consistency + w.lambda2 * t.entropy;
  return t;
}

// ---------------------------------------------------------------------------
// Differentiable evaluation against the PromptSet parameters. View
// embeddings are fixed during adaptation, so the only parameters are
// alpha_raw and the per-dimension scale. Forward runs in log space; the
// probability clamps above never activate on softmax outputs.
// ---------------------------------------------------------------------------

struct ObjectiveGradients {
  double alpha_raw = 0.0;
  Vec scale;
};

struct ObjectiveEval {
  LossTerms terms;
  PredictionDistribution p_original;
  ObjectiveGradients grads;
};

namespace detail {

struct PromptForward {
  double alpha = 0.0;
  Vec centroid;                    // mean of base embeddings
  std::vector<Vec> interpolated;   // m_c = alpha f_c + (1-alpha) centroid
  std::vector<Vec> scaled;         // u_c = scale . m_c
  Vec norms;                       // |u_c|
  std::vector<Vec> prompts;        // u_c / |u_c|
};

inline PromptForward prompt_forward(const PromptSet& ps) {
  PromptForward f;
  const std::size_t c_count = ps.base_embeddings.size();
  const std::size_t d = ps.scale.size();
  f.alpha = ps.alpha();
  f.centroid.assign(d, 0.0);
  for (const auto& row : ps.base_embeddings)
    for (std::size_t i = 0; i < d; ++i) f.centroid[i] += row[i] / static_cast<double>(c_count);
  f.interpolated.resize(c_count, Vec(d));
  f.scaled.resize(c_count, Vec(d));
  f.norms.resize(c_count);
  f.prompts.resize(c_count, Vec(d));
  for (std::size_t c = 0; c < c_count; ++c) {
    for (std::size_t i = 0; i < d; ++i) {
      f.interpolated[c][i] =
          f.alpha * ps.base_embeddings[c][i] + (1.0 - f.alpha) * f.centroid[i];
      f.scaled[c][i] = ps.scale[i] * f.interpolated[c][i];
    }
    f.norms[c] = norm(f.scaled[c]);
    if (f.norms[c] < 1e-8)
      throw DegenerateCollapseError("prompt interpolation collapsed during adaptation");
    for (std::size_t i = 0; i < d; ++i) f.prompts[c][i] = f.scaled[c][i] / f.norms[c];
  }
  return f;
}

struct ViewForward {
  Vec unit_embedding;
  Vec logits;
  Vec log_probs;
  Vec probs;
};

inline ViewForward view_forward(const Vec& embedding, const PromptForward& pf, double tau) {
  ViewForward v;
  v.unit_embedding = normalized(embedding);
  const std::size_t c_count = pf.prompts.size();
  v.logits.resize(c_count);
  for (std::size_t c = 0; c < c_count; ++c)
    v.logits[c] = tau * dot(v.unit_embedding, pf.prompts[c]);
  const double mx = *std::max_element(v.logits.begin(), v.logits.end());
  double sum = 0.0;
  for (double z : v.logits) sum += std::exp(z - mx);
  const double lse = mx + std::log(sum);
  v.log_probs.resize(c_count);
  v.probs.resize(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    v.log_probs[c] = v.logits[c] - lse;
    v.probs[c] = std::exp(v.log_probs[c]);
  }
  return v;
}

// Pulls dL/dp through the softmax Jacobian: dz_i = p_i (g_i - sum_j p_j g_j).
inline void add_softmax_vjp(const Vec& probs, const Vec& dprobs, Vec& dlogits) {
  double mean = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) mean += probs[i] * dprobs[i];
  for (std::size_t i = 0; i < probs.size(); ++i) dlogits[i] += probs[i] * (dprobs[i] - mean);
}

// Chains per-view logit gradients back to alpha_raw and scale.
inline ObjectiveGradients prompt_backward(const PromptSet& ps, const PromptForward& pf,
                                          const std::vector<const ViewForward*>& views,
                                          const std::vector<Vec>& dlogits, double tau) {
  const std::size_t c_count = pf.prompts.size();
  const std::size_t d = ps.scale.size();
  ObjectiveGradients g;
  g.scale.assign(d, 0.0);
  double dalpha = 0.0;
  Vec dprompt(d);
  for (std::size_t c = 0; c < c_count; ++c) {
    std::fill(dprompt.begin(), dprompt.end(), 0.0);
    for (std::size_t k = 0; k < views.size(); ++k) {
      const double dz = dlogits[k][c];
      if (dz == 0.0) continue;
      const Vec& v = views[k]->unit_embedding;
      for (std::size_t i = 0; i < d; ++i) dprompt[i] += tau * dz * v[i];
    }
    // Through u/|u|: du = (dh - (h.dh) h) / |u|.
    const double hd = dot(pf.prompts[c], dprompt);
    for (std::size_t i = 0; i < d; ++i) {
      const double du = (dprompt[i] - hd * pf.prompts[c][i]) / pf.norms[c];
      g.scale[i] += du * pf.interpolated[c][i];
      dalpha += du * ps.scale[i] * (ps.base_embeddings[c][i] - pf.centroid[i]);
    }
  }
  g.alpha_raw = dalpha * pf.alpha * (1.0 - pf.alpha);
  return g;
}

}  // namespace detail

inline ObjectiveEval evaluate_biprompt_objective(const PromptSet& ps, const Vec& v_orig,
                                                 const Vec& v_fg, const Vec& v_bg,
                                                 int pseudo_label, Temperature tau,
                                                 const LossWeights& w, bool use_ce = true) {
  validate_loss_weights(w);
  if (pseudo_label < 0 || pseudo_label >= ps.num_classes())
    throw InvalidInputError("pseudo-label out of range");
  const auto pf = detail::prompt_forward(ps);
  const auto fo = detail::view_forward(v_orig, pf, tau.tau);
  const auto ff = detail::view_forward(v_fg, pf, tau.tau);
  const auto fb = detail::view_forward(v_bg, pf, tau.tau);
  const std::size_t c_count = pf.prompts.size();
  const double sign = w.orthogonality_sign == OrthogonalitySign::TextSemantics ? 1.0 : -1.0;

  ObjectiveEval out;
  out.p_original = fo.probs;
  LossTerms& t = out.terms;
  t.ce = use_ce ? -fo.log_probs[pseudo_label] : 0.0;
  t.kl_fg = 0.0;
  for (std::size_t c = 0; c < c_count; ++c)
    t.kl_fg += ff.probs[c] * (ff.log_probs[c] - fo.log_probs[c]);
  const double nb = norm(fb.probs);
  const double no = norm(fo.probs);
  const double bo = dot(fb.probs, fo.probs);
  t.cos_bg = bo / (nb * no);
  t.consistency = t.kl_fg + sign * w.beta * t.cos_bg;
  t.entropy = 0.0;
  for (std::size_t c = 0; c < c_count; ++c) t.entropy += fo.probs[c] * fo.log_probs[c];
  t.entropy = -t.entropy / static_cast<double>(c_count);
  t.total = t.ce + w.lambda1 * t.consistency + w.lambda2 * t.entropy;

  // Logit gradients per view.
  Vec dz_o(c_count, 0.0), dz_f(c_count, 0.0), dz_b(c_count, 0.0);
  if (use_ce) {
    for (std::size_t c = 0; c < c_count; ++c) dz_o[c] += fo.probs[c];
    dz_o[pseudo_label] -= 1.0;
  }
  // KL(p_fg || p_o): w.r.t. z_o collapses to p_o - p_fg; w.r.t. z_fg to
  // p_fg (logdiff - KL).
  for (std::size_t c = 0; c < c_count; ++c) {
    dz_o[c] += w.lambda1 * (fo.probs[c] - ff.probs[c]);
    dz_f[c] += w.lambda1 * ff.probs[c] * ((ff.log_probs[c] - fo.log_probs[c]) - t.kl_fg);
  }
  {
    Vec dcos_o(c_count), dcos_b(c_count);
    for (std::size_t c = 0; c < c_count; ++c) {
      dcos_o[c] = (fb.probs[c] - (bo / (no * no)) * fo.probs[c]) / (nb * no);
      dcos_b[c] = (fo.probs[c] - (bo / (nb * nb)) * fb.probs[c]) / (nb * no);
    }
    const double cw = w.lambda1 * sign * w.beta;
    for (double& v : dcos_o) v *= cw;
    for (double& v : dcos_b) v *= cw;
    detail::add_softmax_vjp(fo.probs, dcos_o, dz_o);
    detail::add_softmax_vjp(fb.probs, dcos_b, dz_b);
  }
  {
    Vec dent(c_count);
    const double lw = w.lambda2 / static_cast<double>(c_count);
    for (std::size_t c = 0; c < c_count; ++c) dent[c] = -lw * (fo.log_probs[c] + 1.0);
    detail::add_softmax_vjp(fo.probs, dent, dz_o);
  }

  out.grads = detail::prompt_backward(ps, pf, {&fo, &ff, &fb}, {dz_o, dz_f, dz_b}, tau.tau);
  return out;
}

inline ObjectiveEval evaluate_seraser_objective(const PromptSet& ps, const Vec& v_orig,
                                                const Vec& v_erased, int pseudo_label,
                                                Temperature tau, const LossWeights& w,
                                                bool use_ce = true) {
  validate_loss_weights(w);
  if (pseudo_label < 0 || pseudo_label >= ps.num_classes())
    throw InvalidInputError("pseudo-label out of range");
  const auto pf = detail::prompt_forward(ps);
  const auto fo = detail::view_forward(v_orig, pf, tau.tau);
  const auto fe = detail::view_forward(v_erased, pf, tau.tau);
  const std::size_t c_count = pf.prompts.size();

  ObjectiveEval out;
  out.p_original = fo.probs;
  LossTerms& t = out.terms;
  t.ce = use_ce ? -fo.log_probs[pseudo_label] : 0.0;
  t.consistency = 0.0;
  for (std::size_t c = 0; c < c_count; ++c)
    t.consistency += fo.probs[c] * (fo.log_probs[c] - fe.log_probs[c]);
  t.entropy = 0.0;
  for (std::size_t c = 0; c < c_count; ++c) t.entropy += fo.probs[c] * fo.log_probs[c];
  t.entropy = -t.entropy / static_cast<double>(c_count);
  t.total = t.ce + w.lambda1 * t.consistency + w.lambda2 * t.entropy;

  Vec dz_o(c_count, 0.0), dz_e(c_count, 0.0);
  if (use_ce) {
    for (std::size_t c = 0; c < c_count; ++c) dz_o[c] += fo.probs[c];
    dz_o[pseudo_label] -= 1.0;
  }
  // KL(p_o || p_e): w.r.t. z_o gives p_o (logdiff - KL); w.r.t. z_e gives
  // p_e - p_o.
  for (std::size_t c = 0; c < c_count; ++c) {
    dz_o[c] += w.lambda1 * fo.probs[c] * ((fo.log_probs[c] - fe.log_probs[c]) - t.consistency);
    dz_e[c] += w.lambda1 * (fe.probs[c] - fo.probs[c]);
  }
  {
    Vec dent(c_count);
    const double lw = w.lambda2 / static_cast<double>(c_count);
    for (std::size_t c = 0; c < c_count; ++c) dent[c] = -lw * (fo.log_probs[c] + 1.0);
    detail::add_softmax_vjp(fo.probs, dent, dz_o);
  }

  out.grads = detail::prompt_backward(ps, pf, {&fo, &fe}, {dz_o, dz_e}, tau.tau);
  return out;
}

}  // namespace biprompt

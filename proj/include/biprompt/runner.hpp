#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <mutex>
#include <thread>
#include <vector>

#include <json.hpp>

#include "biprompt/adapt.hpp"
#include "biprompt/attention.hpp"
#include "biprompt/core.hpp"
#include "biprompt/debias.hpp"
#include "biprompt/encoders.hpp"
#include "biprompt/errors.hpp"
#include "biprompt/evalbench.hpp"
#include "biprompt/objective.hpp"

namespace biprompt {

// Config-stage problems: malformed document, unknown keys, bad values,
// missing referenced paths. CLI exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dataset-stage problems: unreadable or corrupt dataset content. CLI exit
// code 3.
struct IngestionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SweepGrid {
  std::vector<double> lambda1;
  std::vector<double> lambda2;
  std::vector<double> beta;
  std::vector<int> steps;
  std::vector<double> step_size;
  std::vector<OrthogonalitySign> orthogonality_sign;

  bool empty() const {
    return lambda1.empty() && lambda2.empty() && beta.empty() && steps.empty() &&
           step_size.empty() && orthogonality_sign.empty();
  }
};

struct ExperimentConfig {
  // dataset
  bool synthetic = true;
  BiasSpec bias;
  int num_examples = 2000;
  std::string dataset_path;
  // encoder
  std::string encoder_type = "planted";  // toy | planted | checkpoint
  ToyVisualEncoderConfig visual;
  PlantedBiasConfig plant;
  std::string checkpoint_path;
  ToyTextEncoderConfig text;
  std::vector<std::string> class_names;
  std::string prompt_template = "a photo of a {}";
  // adaptation
  AdaptationConfig adapt;
  // report
  std::string out_dir = "out";
  std::vector<AdaptMethod> methods = {AdaptMethod::Vanilla, AdaptMethod::SEraser,
                                      AdaptMethod::BiPrompt};
  std::string dump_attention_dir;
  double failure_tolerance = 0.0;
  int workers = 0;  // 0 = hardware concurrency
  // sweep
  SweepGrid sweep;
};

// ---------------------------------------------------------------------------
// Config document parsing. Unknown keys are hard errors with a line number,
// so a mistyped hyperparameter cannot silently fall back to a default.
// ---------------------------------------------------------------------------

namespace detail {

inline int find_key_line(const std::string& text, const std::string& key) {
  auto pos = text.find("\"" + key + "\"");
  if (pos == std::string::npos) return -1;
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + pos, '\n'));
}

inline int byte_to_line(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + byte, '\n'));
}

inline void require_known_keys(const nlohmann::json& section, const std::string& name,
                               const std::set<std::string>& allowed, const std::string& text) {
  for (const auto& [key, value] : section.items()) {
    if (allowed.count(key)) continue;
    int line = find_key_line(text, key);
    std::ostringstream msg;
    msg << "line " << (line > 0 ? std::to_string(line) : "?") << ": unknown key \"" << key
        << "\" in section \"" << name << "\"";
    throw ConfigError(msg.str());
  }
}

template <typename T>
T fetch(const nlohmann::json& section, const std::string& key, T fallback,
        const std::string& text) {
  if (!section.contains(key)) return fallback;
  try {
    return section.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    int line = find_key_line(text, key);
    throw ConfigError("line " + (line > 0 ? std::to_string(line) : std::string("?")) +
                      ": bad value type for \"" + key + "\"");
  }
}

inline OrthogonalitySign parse_sign(const std::string& s) {
  if (s == "paper_eq7") return OrthogonalitySign::PaperEq7;
  if (s == "text_semantics") return OrthogonalitySign::TextSemantics;
  throw ConfigError("orthogonality_sign must be \"paper_eq7\" or \"text_semantics\", got \"" + s +
                    "\"");
}

inline AdaptMethod parse_method(const std::string& s) {
  if (s == "vanilla") return AdaptMethod::Vanilla;
  if (s == "seraser") return AdaptMethod::SEraser;
  if (s == "biprompt") return AdaptMethod::BiPrompt;
  throw ConfigError("method must be one of vanilla/seraser/biprompt, got \"" + s + "\"");
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("line " + std::to_string(detail::byte_to_line(text, e.byte)) +
                      ": " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
  detail::require_known_keys(doc, "top-level", {"dataset", "encoder", "adaptation", "report", "sweep"},
                             text);

  ExperimentConfig cfg;
  using detail::fetch;

  if (doc.contains("dataset")) {
    const auto& d = doc["dataset"];
    detail::require_known_keys(
        d, "dataset",
        {"type", "path", "n", "num_classes", "num_spurious", "rho", "image_size", "patch_size",
         "border_width", "base_level", "patch_level", "texture_low", "texture_high", "noise",
         "seed"},
        text);
    std::string type = fetch<std::string>(d, "type", "synthetic", text);
    if (type == "synthetic") {
      cfg.synthetic = true;
    } else if (type == "directory") {
      cfg.synthetic = false;
    } else {
      throw ConfigError("dataset.type must be \"synthetic\" or \"directory\", got \"" + type + "\"");
    }
    cfg.dataset_path = fetch<std::string>(d, "path", "", text);
    cfg.num_examples = fetch<int>(d, "n", cfg.num_examples, text);
    cfg.bias.num_classes = fetch<int>(d, "num_classes", cfg.bias.num_classes, text);
    cfg.bias.num_spurious = fetch<int>(d, "num_spurious", cfg.bias.num_spurious, text);
    cfg.bias.rho = fetch<double>(d, "rho", cfg.bias.rho, text);
    cfg.bias.image_size = fetch<int>(d, "image_size", cfg.bias.image_size, text);
    cfg.bias.patch_size = fetch<int>(d, "patch_size", cfg.bias.patch_size, text);
    cfg.bias.border_width = fetch<int>(d, "border_width", cfg.bias.border_width, text);
    cfg.bias.base_level = fetch<double>(d, "base_level", cfg.bias.base_level, text);
    cfg.bias.patch_level = fetch<double>(d, "patch_level", cfg.bias.patch_level, text);
    cfg.bias.texture_low = fetch<double>(d, "texture_low", cfg.bias.texture_low, text);
    cfg.bias.texture_high = fetch<double>(d, "texture_high", cfg.bias.texture_high, text);
    cfg.bias.noise = fetch<double>(d, "noise", cfg.bias.noise, text);
    cfg.bias.seed = fetch<std::uint64_t>(d, "seed", cfg.bias.seed, text);
  }

  if (doc.contains("encoder")) {
    const auto& e = doc["encoder"];
    detail::require_known_keys(
        e, "encoder",
        {"type", "seed", "embed_dim", "conv1_channels", "conv2_channels", "path", "spurious_gain",
         "off_class_mix", "saliency_gain", "blank_gain", "residual_mix", "plant_seed", "text_seed",
         "table_dim", "class_names", "template"},
        text);
    cfg.encoder_type = fetch<std::string>(e, "type", cfg.encoder_type, text);
    if (cfg.encoder_type != "toy" && cfg.encoder_type != "planted" &&
        cfg.encoder_type != "checkpoint")
      throw ConfigError("encoder.type must be toy, planted, or checkpoint, got \"" +
                        cfg.encoder_type + "\"");
    cfg.visual.seed = fetch<std::uint64_t>(e, "seed", cfg.visual.seed, text);
    cfg.visual.embed_dim = fetch<int>(e, "embed_dim", cfg.visual.embed_dim, text);
    cfg.visual.conv1_channels = fetch<int>(e, "conv1_channels", cfg.visual.conv1_channels, text);
    cfg.visual.conv2_channels = fetch<int>(e, "conv2_channels", cfg.visual.conv2_channels, text);
    cfg.checkpoint_path = fetch<std::string>(e, "path", "", text);
    cfg.plant.spurious_gain = fetch<double>(e, "spurious_gain", cfg.plant.spurious_gain, text);
    cfg.plant.off_class_mix = fetch<double>(e, "off_class_mix", cfg.plant.off_class_mix, text);
    cfg.plant.saliency_gain = fetch<double>(e, "saliency_gain", cfg.plant.saliency_gain, text);
    cfg.plant.blank_gain = fetch<double>(e, "blank_gain", cfg.plant.blank_gain, text);
    cfg.plant.residual_mix = fetch<double>(e, "residual_mix", cfg.plant.residual_mix, text);
    cfg.plant.seed = fetch<std::uint64_t>(e, "plant_seed", cfg.plant.seed, text);
    cfg.text.seed = fetch<std::uint64_t>(e, "text_seed", cfg.text.seed, text);
    cfg.text.table_dim = fetch<int>(e, "table_dim", cfg.text.table_dim, text);
    cfg.text.embed_dim = cfg.visual.embed_dim;
    cfg.class_names = fetch<std::vector<std::string>>(e, "class_names", {}, text);
    cfg.prompt_template = fetch<std::string>(e, "template", cfg.prompt_template, text);
  } else {
    cfg.text.embed_dim = cfg.visual.embed_dim;
  }

  if (doc.contains("adaptation")) {
    const auto& a = doc["adaptation"];
    detail::require_known_keys(
        a, "adaptation",
        {"method", "steps", "step_size", "lambda1", "lambda2", "beta", "orthogonality_sign",
         "tau", "alpha_init", "use_pseudo_ce", "learn_scale", "episodic", "seed", "erase_grid",
         "erase_patches"},
        text);
    cfg.adapt.method = detail::parse_method(fetch<std::string>(a, "method", "biprompt", text));
    cfg.adapt.steps = fetch<int>(a, "steps", cfg.adapt.steps, text);
    cfg.adapt.step_size = fetch<double>(a, "step_size", cfg.adapt.step_size, text);
    cfg.adapt.weights.lambda1 = fetch<double>(a, "lambda1", cfg.adapt.weights.lambda1, text);
    cfg.adapt.weights.lambda2 = fetch<double>(a, "lambda2", cfg.adapt.weights.lambda2, text);
    cfg.adapt.weights.beta = fetch<double>(a, "beta", cfg.adapt.weights.beta, text);
    cfg.adapt.weights.orthogonality_sign =
        detail::parse_sign(fetch<std::string>(a, "orthogonality_sign", "text_semantics", text));
    double tau = fetch<double>(a, "tau", cfg.adapt.tau.tau, text);
    if (!(tau > 0.0)) throw ConfigError("adaptation.tau must be positive");
    cfg.adapt.tau = Temperature(tau);
    cfg.adapt.alpha_init = fetch<double>(a, "alpha_init", cfg.adapt.alpha_init, text);
    cfg.adapt.use_pseudo_ce = fetch<bool>(a, "use_pseudo_ce", cfg.adapt.use_pseudo_ce, text);
    cfg.adapt.learn_scale = fetch<bool>(a, "learn_scale", cfg.adapt.learn_scale, text);
    cfg.adapt.episodic = fetch<bool>(a, "episodic", cfg.adapt.episodic, text);
    cfg.adapt.seed = fetch<std::uint64_t>(a, "seed", cfg.adapt.seed, text);
    cfg.adapt.erase_grid = fetch<int>(a, "erase_grid", cfg.adapt.erase_grid, text);
    cfg.adapt.erase_patches = fetch<int>(a, "erase_patches", cfg.adapt.erase_patches, text);
  }

  if (doc.contains("report")) {
    const auto& r = doc["report"];
    detail::require_known_keys(
        r, "report", {"out_dir", "methods", "dump_attention", "failure_tolerance", "workers"},
        text);
    cfg.out_dir = fetch<std::string>(r, "out_dir", cfg.out_dir, text);
    auto names = fetch<std::vector<std::string>>(r, "methods", {}, text);
    if (!names.empty()) {
      cfg.methods.clear();
      for (const auto& n : names) cfg.methods.push_back(detail::parse_method(n));
    }
    cfg.dump_attention_dir = fetch<std::string>(r, "dump_attention", "", text);
    cfg.failure_tolerance = fetch<double>(r, "failure_tolerance", cfg.failure_tolerance, text);
    cfg.workers = fetch<int>(r, "workers", cfg.workers, text);
  }

  if (doc.contains("sweep")) {
    const auto& s = doc["sweep"];
    detail::require_known_keys(
        s, "sweep", {"lambda1", "lambda2", "beta", "steps", "step_size", "orthogonality_sign"},
        text);
    cfg.sweep.lambda1 = fetch<std::vector<double>>(s, "lambda1", {}, text);
    cfg.sweep.lambda2 = fetch<std::vector<double>>(s, "lambda2", {}, text);
    cfg.sweep.beta = fetch<std::vector<double>>(s, "beta", {}, text);
    cfg.sweep.steps = fetch<std::vector<int>>(s, "steps", {}, text);
    cfg.sweep.step_size = fetch<std::vector<double>>(s, "step_size", {}, text);
    for (const auto& name : fetch<std::vector<std::string>>(s, "orthogonality_sign", {}, text))
      cfg.sweep.orthogonality_sign.push_back(detail::parse_sign(name));
  }

  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_experiment_config(buf.str());
}

inline void validate_experiment_config(const ExperimentConfig& cfg) {
  try {
    if (cfg.synthetic) {
      validate_bias_spec(cfg.bias);
      if (cfg.num_examples < cfg.bias.num_classes * cfg.bias.num_spurious)
        throw InvalidInputError("dataset.n too small for the group structure");
    } else if (cfg.dataset_path.empty() || !std::filesystem::exists(cfg.dataset_path)) {
      throw InvalidInputError("dataset.path does not exist: " + cfg.dataset_path);
    }
    if (cfg.encoder_type == "checkpoint" &&
        (cfg.checkpoint_path.empty() || !std::filesystem::exists(cfg.checkpoint_path)))
      throw InvalidInputError("encoder.path does not exist: " + cfg.checkpoint_path);
    if (cfg.encoder_type == "planted" && !cfg.synthetic)
      throw InvalidInputError("encoder.type=planted requires a synthetic dataset");
    validate_adaptation_config(cfg.adapt);
    if (cfg.methods.empty()) throw InvalidInputError("report.methods must not be empty");
    if (!(cfg.failure_tolerance >= 0.0 && cfg.failure_tolerance <= 1.0))
      throw InvalidInputError("report.failure_tolerance must lie in [0,1]");
    if (cfg.workers < 0) throw InvalidInputError("report.workers must be >= 0");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

// ---------------------------------------------------------------------------
// Experiment execution.
// ---------------------------------------------------------------------------

struct MethodSummary {
  AdaptMethod method = AdaptMethod::Vanilla;
  double avg = 0.0;
  double wg = 0.0;
  int wg_group = -1;
  double mean_alpha = 0.0;
  double mean_total = 0.0;
  double mean_ce = 0.0;
  double mean_consistency = 0.0;
  double mean_entropy = 0.0;
  double cmi_before = 0.0;
  double cmi_after = 0.0;
  int failures = 0;
};

struct RunReport {
  std::vector<MethodSummary> rows;
  std::string out_dir;
  int total_examples = 0;
  bool failure_tolerance_exceeded = false;
};

namespace detail {

struct SampleOutcome {
  int predicted = 0;
  double total = 0.0, ce = 0.0, consistency = 0.0, entropy = 0.0;
  double alpha = 0.0;
  bool failed = false;
  std::vector<StepRecord> records;
};

struct EncoderBundle {
  std::unique_ptr<VisualEncoder> visual;
  std::vector<EmbeddingVector> prompts;
  std::vector<std::string> class_names;
};

inline std::vector<GroupedExample> load_examples(const ExperimentConfig& cfg) {
  if (cfg.synthetic) return generate_dataset(cfg.bias, cfg.num_examples);
  try {
    return import_dataset(cfg.dataset_path);
  } catch (const InvalidInputError& e) {
    throw IngestionError(e.what());
  }
}

inline EncoderBundle build_encoders(const ExperimentConfig& cfg,
                                    const std::vector<GroupedExample>& examples) {
  EncoderBundle bundle;
  int num_classes = cfg.bias.num_classes;
  if (!cfg.synthetic) {
    num_classes = 0;
    for (const auto& ex : examples) num_classes = std::max(num_classes, ex.class_label + 1);
  }
  if (num_classes < 2) throw IngestionError("dataset defines fewer than two classes");

  bundle.class_names = cfg.class_names;
  if (bundle.class_names.empty())
    for (int c = 0; c < num_classes; ++c) bundle.class_names.push_back("class " + std::to_string(c));
  if (static_cast<int>(bundle.class_names.size()) != num_classes)
    throw ConfigError("encoder.class_names must list exactly one name per class");

  ToyTextEncoder text(cfg.text);
  bundle.prompts = encode_class_prompts(text, bundle.class_names, cfg.prompt_template);

  if (cfg.encoder_type == "checkpoint") {
    bundle.visual = std::make_unique<ToyVisualEncoder>(load_visual_encoder(cfg.checkpoint_path));
  } else if (cfg.encoder_type == "planted") {
    ToyVisualEncoderConfig vcfg = cfg.visual;
    vcfg.conv_bias = false;
    std::vector<ImageView> class_canon, texture_canon;
    for (int c = 0; c < cfg.bias.num_classes; ++c)
      class_canon.push_back(class_canonical_image(cfg.bias, c));
    for (int s = 0; s < cfg.bias.num_spurious; ++s)
      texture_canon.push_back(texture_canonical_image(cfg.bias, s));
    bundle.visual = std::make_unique<ToyVisualEncoder>(make_planted_bias_encoder(
        vcfg, cfg.plant, class_canon, texture_canon, blank_image(cfg.bias), bundle.prompts));
  } else {
    bundle.visual = std::make_unique<ToyVisualEncoder>(cfg.visual);
  }
  return bundle;
}

inline int resolve_worker_count(const ExperimentConfig& cfg) {
  if (const char* env = std::getenv("BIPROMPT_WORKERS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  if (cfg.workers > 0) return cfg.workers;
  unsigned hc = std::thread::hardware_concurrency();
  return hc > 0 ? static_cast<int>(hc) : 1;
}

inline std::vector<SampleOutcome> run_method(const ExperimentConfig& cfg,
                                             const std::vector<GroupedExample>& examples,
                                             const EncoderBundle& bundle, AdaptMethod method) {
  const std::size_t n = examples.size();
  std::vector<SampleOutcome> outcomes(n);
  PromptSet initial = make_prompt_set(bundle.prompts, cfg.adapt.alpha_init);

  const bool dump = !cfg.dump_attention_dir.empty() && method == AdaptMethod::BiPrompt;
  if (dump) std::filesystem::create_directories(cfg.dump_attention_dir);

  auto process = [&](std::size_t i, const PromptSet& state) {
    AdaptationConfig acfg = cfg.adapt;
    acfg.method = method;
    acfg.seed = mix_seed(cfg.adapt.seed, i);
    AdaptResult res = adapt_sample(examples[i].image, state, *bundle.visual, acfg);
    SampleOutcome& out = outcomes[i];
    out.predicted = argmax_lowest_tie(res.prediction);
    out.failed = res.trace.failed;
    out.alpha = res.prompts.alpha();
    out.records = res.trace.records;
    if (!res.trace.records.empty()) {
      const StepRecord& last = res.trace.records.back();
      out.total = last.total;
      out.ce = last.ce;
      out.consistency = last.consistency;
      out.entropy = last.entropy;
    }
    if (dump && res.attention.has_value()) {
      char name[48];
      std::snprintf(name, sizeof(name), "ex_%06zu_attn.pgm", i);
      save_attention_pgm(*res.attention,
                         (std::filesystem::path(cfg.dump_attention_dir) / name).string());
    }
    return res.prompts;
  };

  if (!cfg.adapt.episodic && method != AdaptMethod::Vanilla) {
    // Streaming mode carries state across samples; inherently sequential.
    PromptSet state = initial;
    for (std::size_t i = 0; i < n; ++i) state = process(i, state);
    return outcomes;
  }

  const int workers = std::min<int>(resolve_worker_count(cfg), static_cast<int>(n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) process(i, initial);
    return outcomes;
  }
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex error_mutex;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        for (std::size_t i = static_cast<std::size_t>(w); i < n; i += workers)
          process(i, initial);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return outcomes;
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline RunReport run_experiment(const ExperimentConfig& cfg) {
  validate_experiment_config(cfg);
  const auto examples = detail::load_examples(cfg);
  const auto bundle = detail::build_encoders(cfg, examples);
  std::filesystem::create_directories(cfg.out_dir);

  int num_spurious = cfg.bias.num_spurious;
  if (!cfg.synthetic) {
    num_spurious = 0;
    for (const auto& ex : examples) num_spurious = std::max(num_spurious, ex.spurious_label + 1);
  }

  // The pre-adaptation reference: zero-shot predictions on the base prompts.
  std::vector<int> vanilla_preds(examples.size());
  {
    PromptSet base = make_prompt_set(bundle.prompts, cfg.adapt.alpha_init);
    for (std::size_t i = 0; i < examples.size(); ++i)
      vanilla_preds[i] = argmax_lowest_tie(
          predict(bundle.visual->encode(examples[i].image), base.base_embeddings, cfg.adapt.tau));
  }
  std::vector<int> spurious(examples.size()), causal(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    spurious[i] = examples[i].spurious_label;
    causal[i] = examples[i].class_label;
  }
  const double cmi_before = conditional_mutual_information(spurious, vanilla_preds, causal);

  RunReport report;
  report.out_dir = cfg.out_dir;
  report.total_examples = static_cast<int>(examples.size());

  std::ofstream log(std::filesystem::path(cfg.out_dir) / "run.log");
  for (AdaptMethod method : cfg.methods) {
    auto outcomes = detail::run_method(cfg, examples, bundle, method);

    std::vector<int> preds(outcomes.size());
    for (std::size_t i = 0; i < outcomes.size(); ++i) preds[i] = outcomes[i].predicted;

    MethodSummary row;
    row.method = method;
    row.avg = average_accuracy(preds, examples);
    auto wg = worst_group_accuracy(preds, examples, num_spurious);
    row.wg = wg.accuracy;
    row.wg_group = wg.group_id;
    row.cmi_before = cmi_before;
    row.cmi_after = conditional_mutual_information(spurious, preds, causal);
    for (const auto& out : outcomes) {
      row.mean_alpha += out.alpha / outcomes.size();
      row.mean_total += out.total / outcomes.size();
      row.mean_ce += out.ce / outcomes.size();
      row.mean_consistency += out.consistency / outcomes.size();
      row.mean_entropy += out.entropy / outcomes.size();
      row.failures += out.failed ? 1 : 0;
    }
    report.rows.push_back(row);

    // Per-example results file.
    std::ofstream res(std::filesystem::path(cfg.out_dir) /
                      ("results_" + to_string(method) + ".csv"));
    res << "id,class_label,spurious_label,predicted,total,ce,consistency,entropy,alpha,failed\n";
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
      const auto& o = outcomes[i];
      res << i << "," << examples[i].class_label << "," << examples[i].spurious_label << ","
          << o.predicted << "," << detail::fmt_double(o.total) << "," << detail::fmt_double(o.ce)
          << "," << detail::fmt_double(o.consistency) << "," << detail::fmt_double(o.entropy)
          << "," << detail::fmt_double(o.alpha) << "," << (o.failed ? 1 : 0) << "\n";
    }

    // Structured per-step trace, one line per adaptation step.
    for (std::size_t i = 0; i < outcomes.size(); ++i)
      for (std::size_t s = 0; s < outcomes[i].records.size(); ++s) {
        const auto& r = outcomes[i].records[s];
        log << "method=" << to_string(method) << " sample=" << i << " step=" << s + 1
            << " total=" << detail::fmt_double(r.total) << " ce=" << detail::fmt_double(r.ce)
            << " consistency=" << detail::fmt_double(r.consistency)
            << " entropy=" << detail::fmt_double(r.entropy)
            << " alpha=" << detail::fmt_double(r.alpha)
            << " pred_entropy=" << detail::fmt_double(r.prediction_entropy) << "\n";
      }

    if (cfg.failure_tolerance < 1.0 &&
        row.failures > cfg.failure_tolerance * static_cast<double>(outcomes.size()))
      report.failure_tolerance_exceeded = true;
  }

  // Machine-readable summary.
  {
    std::ofstream sum(std::filesystem::path(cfg.out_dir) / "summary.csv");
    sum << "method,avg,wg,wg_group,mean_alpha,mean_total,mean_ce,mean_consistency,mean_entropy,"
           "cmi_before,cmi_after,failures\n";
    for (const auto& r : report.rows)
      sum << to_string(r.method) << "," << detail::fmt_double(r.avg) << ","
          << detail::fmt_double(r.wg) << "," << r.wg_group << ","
          << detail::fmt_double(r.mean_alpha) << "," << detail::fmt_double(r.mean_total) << ","
          << detail::fmt_double(r.mean_ce) << "," << detail::fmt_double(r.mean_consistency) << ","
          << detail::fmt_double(r.mean_entropy) << "," << detail::fmt_double(r.cmi_before) << ","
          << detail::fmt_double(r.cmi_after) << "," << r.failures << "\n";
  }

  // Human-readable table in the AVG./W.G. layout.
  {
    std::ofstream txt(std::filesystem::path(cfg.out_dir) / "summary.txt");
    char line[256];
    std::snprintf(line, sizeof(line), "%-10s %8s %8s %10s %12s %12s\n", "method", "AVG.", "W.G.",
                  "mean a", "CMI before", "CMI after");
    txt << line;
    for (const auto& r : report.rows) {
      std::snprintf(line, sizeof(line), "%-10s %8.4f %8.4f %10.4f %12.6f %12.6f\n",
                    to_string(r.method).c_str(), r.avg, r.wg, r.mean_alpha, r.cmi_before,
                    r.cmi_after);
      txt << line;
    }
  }

  return report;
}

// Recomputes AVG./W.G. from the per-example results files and compares them
// with the summary file; returns false on any mismatch.
inline bool verify_report_consistency(const std::string& out_dir) {
  std::ifstream sum(std::filesystem::path(out_dir) / "summary.csv");
  if (!sum) return false;
  std::string line;
  std::getline(sum, line);  // header
  while (std::getline(sum, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string method, avg_s, wg_s;
    std::getline(row, method, ',');
    std::getline(row, avg_s, ',');
    std::getline(row, wg_s, ',');

    std::ifstream res(std::filesystem::path(out_dir) / ("results_" + method + ".csv"));
    if (!res) return false;
    std::string rline;
    std::getline(res, rline);  // header
    std::vector<GroupedExample> examples;
    std::vector<int> preds;
    while (std::getline(res, rline)) {
      if (rline.empty()) continue;
      std::istringstream rrow(rline);
      std::string id_s, cls_s, spur_s, pred_s;
      std::getline(rrow, id_s, ',');
      std::getline(rrow, cls_s, ',');
      std::getline(rrow, spur_s, ',');
      std::getline(rrow, pred_s, ',');
      GroupedExample ex;
      ex.class_label = std::stoi(cls_s);
      ex.spurious_label = std::stoi(spur_s);
      examples.push_back(std::move(ex));
      preds.push_back(std::stoi(pred_s));
    }
    if (examples.empty()) return false;
    double avg = average_accuracy(preds, examples);
    double wg = worst_group_accuracy(preds, examples).accuracy;
    if (detail::fmt_double(avg) != avg_s) return false;
    if (detail::fmt_double(wg) != wg_s) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Hyperparameter sweep: cross product over the configured axes, one summary
// row per grid point, best biprompt W.G. marked.
// ---------------------------------------------------------------------------

struct SweepPoint {
  double lambda1, lambda2, beta, step_size;
  int steps;
  OrthogonalitySign sign;
};

struct SweepReport {
  std::vector<SweepPoint> points;
  std::vector<RunReport> runs;
  int best_index = -1;  // by biprompt worst-group accuracy
  std::string out_dir;
};

inline std::vector<SweepPoint> expand_grid(const ExperimentConfig& cfg) {
  const SweepGrid& g = cfg.sweep;
  auto l1 = g.lambda1.empty() ? std::vector<double>{cfg.adapt.weights.lambda1} : g.lambda1;
  auto l2 = g.lambda2.empty() ? std::vector<double>{cfg.adapt.weights.lambda2} : g.lambda2;
  auto bt = g.beta.empty() ? std::vector<double>{cfg.adapt.weights.beta} : g.beta;
  auto st = g.steps.empty() ? std::vector<int>{cfg.adapt.steps} : g.steps;
  auto ss = g.step_size.empty() ? std::vector<double>{cfg.adapt.step_size} : g.step_size;
  auto sg = g.orthogonality_sign.empty()
                ? std::vector<OrthogonalitySign>{cfg.adapt.weights.orthogonality_sign}
                : g.orthogonality_sign;
  std::vector<SweepPoint> points;
  for (double a : l1)
    for (double b : l2)
      for (double c : bt)
        for (int d : st)
          for (double e : ss)
            for (auto f : sg) points.push_back({a, b, c, e, d, f});
  return points;
}

inline SweepReport sweep(const ExperimentConfig& cfg) {
  if (cfg.sweep.empty()) throw InvalidTaskError("sweep requires a nonempty parameter grid");
  validate_experiment_config(cfg);

  SweepReport report;
  report.points = expand_grid(cfg);
  report.out_dir = cfg.out_dir;
  std::filesystem::create_directories(cfg.out_dir);

  double best_wg = -1.0;
  for (std::size_t i = 0; i < report.points.size(); ++i) {
    const SweepPoint& pt = report.points[i];
    ExperimentConfig point_cfg = cfg;
    point_cfg.adapt.weights.lambda1 = pt.lambda1;
    point_cfg.adapt.weights.lambda2 = pt.lambda2;
    point_cfg.adapt.weights.beta = pt.beta;
    point_cfg.adapt.weights.orthogonality_sign = pt.sign;
    point_cfg.adapt.steps = pt.steps;
    point_cfg.adapt.step_size = pt.step_size;
    char sub[32];
    std::snprintf(sub, sizeof(sub), "point_%03zu", i);
    point_cfg.out_dir = (std::filesystem::path(cfg.out_dir) / sub).string();
    report.runs.push_back(run_experiment(point_cfg));

    for (const auto& row : report.runs.back().rows)
      if (row.method == AdaptMethod::BiPrompt && row.wg > best_wg) {
        best_wg = row.wg;
        report.best_index = static_cast<int>(i);
      }
  }
  if (report.best_index < 0) report.best_index = 0;  // no biprompt rows swept

  std::ofstream out(std::filesystem::path(cfg.out_dir) / "sweep.csv");
  out << "point,lambda1,lambda2,beta,steps,step_size,orthogonality_sign";
  for (AdaptMethod m : cfg.methods)
    out << "," << to_string(m) << "_avg," << to_string(m) << "_wg," << to_string(m)
        << "_cmi_after";
  out << ",best_wg\n";
  for (std::size_t i = 0; i < report.points.size(); ++i) {
    const auto& pt = report.points[i];
    out << i << "," << detail::fmt_double(pt.lambda1) << "," << detail::fmt_double(pt.lambda2)
        << "," << detail::fmt_double(pt.beta) << "," << pt.steps << ","
        << detail::fmt_double(pt.step_size) << "," << to_string(pt.sign);
    for (const auto& row : report.runs[i].rows)
      out << "," << detail::fmt_double(row.avg) << "," << detail::fmt_double(row.wg) << ","
          << detail::fmt_double(row.cmi_after);
    out << "," << (static_cast<int>(i) == report.best_index ? 1 : 0) << "\n";
  }
  return report;
}

}  // namespace biprompt

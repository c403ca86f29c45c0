#include <cstdint>
#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "biprompt/biprompt.hpp"

namespace {

void print_summary(const biprompt::RunReport& report) {
  std::printf("%-10s %8s %8s %10s %12s %12s %9s\n", "method", "AVG.", "W.G.", "mean a",
              "CMI before", "CMI after", "failures");
  for (const auto& row : report.rows)
    std::printf("%-10s %8.4f %8.4f %10.4f %12.6f %12.6f %9d\n",
                biprompt::to_string(row.method).c_str(), row.avg, row.wg, row.mean_alpha,
                row.cmi_before, row.cmi_after, row.failures);
  std::printf("reports written to %s\n", report.out_dir.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BiPrompt: bilateral test-time debiasing for zero-shot classification"};
  app.require_subcommand(1);

  std::string config_path;
  std::string method_override;
  std::string out_override;
  std::string dump_dir;
  std::uint64_t seed_override = 0;
  bool seed_given = false;

  auto add_common = [&](CLI::App* cmd, bool with_method) {
    cmd->add_option("--config", config_path, "experiment config file (JSON)")->required();
    cmd->add_option("--out", out_override, "output directory override");
    cmd->add_option_function<std::uint64_t>(
           "--seed", [&](std::uint64_t v) { seed_override = v; seed_given = true; },
           "adaptation seed override");
    if (with_method)
      cmd->add_option("--method", method_override, "run a single method")
          ->check(CLI::IsMember({"vanilla", "seraser", "biprompt"}));
  };

  CLI::App* run_cmd = app.add_subcommand("run", "run the configured experiment");
  add_common(run_cmd, true);
  run_cmd->add_option("--dump-attention", dump_dir, "directory for attention map dumps");

  CLI::App* sweep_cmd = app.add_subcommand("sweep", "run the configured parameter grid");
  add_common(sweep_cmd, false);

  CLI::App* gen_cmd = app.add_subcommand("gen", "generate and export the synthetic dataset");
  gen_cmd->add_option("--config", config_path, "experiment config file (JSON)")->required();
  std::string gen_out;
  gen_cmd->add_option("--out", gen_out, "dataset output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    biprompt::ExperimentConfig cfg = biprompt::load_experiment_config(config_path);
    if (seed_given) cfg.adapt.seed = seed_override;
    if (!out_override.empty()) cfg.out_dir = out_override;

    if (gen_cmd->parsed()) {
      if (!cfg.synthetic)
        throw biprompt::ConfigError("gen requires dataset.type = synthetic");
      biprompt::validate_experiment_config(cfg);
      auto data = biprompt::generate_dataset(cfg.bias, cfg.num_examples);
      biprompt::export_dataset(data, gen_out);
      std::printf("wrote %zu examples to %s\n", data.size(), gen_out.c_str());
      return 0;
    }

    if (sweep_cmd->parsed()) {
      auto report = biprompt::sweep(cfg);
      std::printf("swept %zu grid points; best worst-group accuracy at point %d\n",
                  report.points.size(), report.best_index);
      std::printf("sweep table written to %s/sweep.csv\n", report.out_dir.c_str());
      return 0;
    }

    if (!method_override.empty()) {
      cfg.methods = {biprompt::detail::parse_method(method_override)};
      cfg.adapt.method = cfg.methods[0];
    }
    if (!dump_dir.empty()) cfg.dump_attention_dir = dump_dir;

    auto report = biprompt::run_experiment(cfg);
    print_summary(report);
    if (report.failure_tolerance_exceeded) {
      std::fprintf(stderr, "error: sample failures exceeded the configured tolerance\n");
      return 1;
    }
    return 0;
  } catch (const biprompt::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const biprompt::IngestionError& e) {
    std::fprintf(stderr, "dataset error: %s\n", e.what());
    return 3;
  } catch (const biprompt::InvalidTaskError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const biprompt::InvalidInputError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

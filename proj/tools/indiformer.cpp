// indiformer: synth | train | separate | eval | gradcheck

#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "indiformer/commands.hpp"

namespace {

using namespace indiformer;

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  std::optional<std::string> data_dir, out_dir;
  std::optional<std::size_t> num_mixtures, epochs, max_steps, batch_size;
  std::optional<int> sample_rate;
  std::optional<double> nll_weight;
  bool no_decoupling = false;
  bool no_timing = false;
};

RunConfig effective_config(const std::string& path, const Overrides& o) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.precision) cfg.precision = *o.precision;
  if (o.data_dir) cfg.data_dir = *o.data_dir;
  if (o.out_dir) cfg.out_dir = *o.out_dir;
  if (o.num_mixtures) cfg.num_mixtures = *o.num_mixtures;
  if (o.epochs) cfg.epochs = *o.epochs;
  if (o.max_steps) cfg.max_steps = *o.max_steps;
  if (o.batch_size) cfg.batch_size = *o.batch_size;
  if (o.sample_rate) cfg.sample_rate = *o.sample_rate;
  if (o.nll_weight) cfg.nll_weight = *o.nll_weight;
  if (o.no_decoupling) cfg.decoupling_enabled = false;
  if (o.no_timing) cfg.record_wall_time = false;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-source time-domain separation with a decoupled dual-path network"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  Overrides o;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", o.seed, "Master seed");
  app.add_option("--precision", o.precision, "Floating-point width")
      ->check(CLI::IsMember({32, 64}));

  auto* synth = app.add_subcommand("synth", "Generate a labeled synthetic mixture dataset");
  synth->add_option("--out", o.data_dir, "Dataset directory");
  synth->add_option("--mixtures", o.num_mixtures, "Number of mixtures");
  synth->add_option("--sample-rate", o.sample_rate, "Sample rate in Hz");

  auto* train = app.add_subcommand("train", "Train a separator on a synthesized dataset");
  train->add_option("--data", o.data_dir, "Dataset directory");
  train->add_option("--out", o.out_dir, "Run directory for checkpoint and log");
  train->add_option("--epochs", o.epochs, "Number of epochs");
  train->add_option("--max-steps", o.max_steps, "Stop after this many optimizer steps");
  train->add_option("--batch-size", o.batch_size, "Mixtures per optimizer step");
  train->add_option("--nll-weight", o.nll_weight, "Weight of the coupling likelihood term");
  train->add_flag("--no-decoupling", o.no_decoupling, "Bypass the coupling stack (ablation)");
  train->add_flag("--no-timing", o.no_timing, "Log 0 seconds per epoch (byte-stable logs)");

  std::string checkpoint, input, sep_out;
  auto* separate = app.add_subcommand("separate", "Separate mixtures with a trained model");
  separate->add_option("--checkpoint", checkpoint, "Checkpoint manifest (model.json)")
      ->required();
  separate->add_option("--input", input, "Mixture WAV file or directory")->required();
  separate->add_option("--out", sep_out, "Output directory")->required();

  std::string est_dir, ref_dir, mix_dir, csv_path;
  auto* eval = app.add_subcommand("eval", "Score separated sources against references");
  eval->add_option("--est", est_dir, "Directory of <stem>_src<i>.wav estimates")->required();
  eval->add_option("--ref", ref_dir, "Directory of <stem>_src<i>.wav references")->required();
  eval->add_option("--mix", mix_dir, "Directory of <stem>.wav mixtures")->required();
  eval->add_option("--csv", csv_path, "Also write the report as CSV");

  bool corrupt = false;
  double eps = 1e-5;
  auto* gradcheck =
      app.add_subcommand("gradcheck", "Finite-difference check of the micro model gradients");
  gradcheck->add_option("--eps", eps, "Central-difference step");
  gradcheck->add_flag("--corrupt-gradient", corrupt, "Test hook: perturb one analytic gradient")
      ->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) {
      cmd_synth(effective_config(config_path, o));
    } else if (*train) {
      const RunConfig cfg = effective_config(config_path, o);
      if (cfg.precision == 32) {
        cmd_train<float>(cfg);
      } else {
        cmd_train<double>(cfg);
      }
    } else if (*separate) {
      const RunConfig cfg = effective_config(config_path, o);
      if (cfg.precision == 32) {
        cmd_separate<float>(checkpoint, input, sep_out);
      } else {
        cmd_separate<double>(checkpoint, input, sep_out);
      }
    } else if (*eval) {
      const auto rep = cmd_eval(est_dir, ref_dir, mix_dir);
      std::cout << rep.text();
      if (!csv_path.empty()) {
        std::ofstream f(csv_path, std::ios::trunc);
        if (!f) throw IoError("cannot write " + csv_path);
        f << rep.csv();
      }
    } else if (*gradcheck) {
      const auto rep = cmd_gradcheck(effective_config(config_path, o), corrupt, eps);
      return rep.passed ? 0 : 1;
    }
  } catch (const indiformer::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

// Command-line runner: `colab run <config>` and `colab validate <config>`.
#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "colab/experiment.hpp"

namespace {

enum Exit { ok = 0, failure = 1, invalid = 2, missing_file = 3, schema = 4, shape = 5 };

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> probe_size;
};

colab::ExperimentConfig load(const std::string& path, const Overrides& o) {
  colab::ExperimentConfig cfg = colab::load_config(path);
  if (o.seed) {
    cfg.seeds = {*o.seed};
    cfg.source["seeds"] = cfg.seeds;
  }
  if (o.out_dir) cfg.output_dir = *o.out_dir;
  if (o.probe_size) {
    cfg.dataset.n_probe = *o.probe_size;
    cfg.source["dataset"]["n_probe"] = *o.probe_size;
  }
  return cfg;
}

int report(const std::vector<std::string>& problems) {
  for (const auto& p : problems) std::cerr << "problem: " << p << '\n';
  return problems.empty() ? ok : invalid;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale adversarial training runner"};
  app.set_version_flag("--version", std::string(COLAB_VERSION));
  app.require_subcommand(1);

  std::string config;
  Overrides o;
  bool quiet = false;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("config", config, "JSON experiment config")->required();
    sub->add_option("--seed-override", o.seed, "Run this single seed instead of the config's list");
    sub->add_option("--out-dir", o.out_dir, "Write outputs here instead of output_dir");
    sub->add_option("--probe-size", o.probe_size, "Override dataset.n_probe");
  };
  CLI::App* run = app.add_subcommand("run", "Run an experiment and write its outputs");
  add_common(run);
  run->add_flag("-q,--quiet", quiet, "No per-epoch progress on stderr");
  CLI::App* validate = app.add_subcommand("validate", "Check a config without running it");
  add_common(validate);

  CLI11_PARSE(app, argc, argv);

  try {
    const colab::ExperimentConfig cfg = load(config, o);
    if (validate->parsed()) {
      const int code = report(colab::validate_config(cfg));
      if (code == ok) std::cout << "ok: " << colab::name_of(cfg.kind) << " config is valid\n";
      return code;
    }
    if (const int code = report(colab::validate_config(cfg)); code != ok) return code;
    const colab::RunOutput out = colab::run_experiment(cfg, quiet ? nullptr : &std::cerr);
    for (const auto& f : out.files) std::cout << f.string() << '\n';
    return ok;
  } catch (const colab::MissingFileError& e) {
    std::cerr << "error: missing file: " << e.what() << '\n';
    return missing_file;
  } catch (const colab::SchemaError& e) {
    std::cerr << "error: schema violation: " << e.what() << '\n';
    return schema;
  } catch (const colab::ShapeError& e) {
    std::cerr << "error: shape mismatch: " << e.what() << '\n';
    return shape;
  } catch (const colab::FormatError& e) {
    std::cerr << "error: bad data file: " << e.what() << '\n';
    return missing_file;
  } catch (const colab::ContractError& e) {
    std::cerr << "error: invalid config: " << e.what() << '\n';
    return invalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return failure;
  }
}

// Copyright 2026 The ibq Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// ibq: command-line front end.
//
// Exit codes:
//   0  success
//   1  unexpected internal error
//   2  usage error (unknown subcommand, bad flag)
//   3  unknown preset
//   4  invalid or unreadable config
//   5  I/O or data error
//   6  run failure (retry budget exhausted)

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "ibq/data.hpp"
#include "ibq/harness.hpp"
#include "ibq/render.hpp"

namespace {

namespace fs = std::filesystem;

enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kUnknownPreset = 3,
  kBadConfig = 4,
  kIo = 5,
  kRunFailed = 6,
};

struct RunFlags {
  std::string out;
  std::optional<std::uint64_t> seed;
  int workers = 0;
  bool quiet = false;
};

ibq::RunOptions run_options(const RunFlags& f) {
  ibq::RunOptions o;
  o.workers = f.workers;
  if (!f.quiet)
    o.progress = [](const ibq::ProgressEvent& ev) {
      if (ev.finished)
        std::fprintf(stderr, "repetition %d attempt %d: test accuracy %.4f%s\n",
                     ev.repetition, ev.attempt, ev.test_accuracy,
                     ev.accepted ? "" : " (retrying)");
      else
        std::fprintf(stderr, "repetition %d attempt %d: epoch %lld/%lld\n", ev.repetition,
                     ev.attempt, static_cast<long long>(ev.epoch),
                     static_cast<long long>(ev.total_epochs));
    };
  return o;
}

int execute(ibq::ExperimentConfig config, const RunFlags& f) {
  if (f.seed) config.master_seed = *f.seed;
  config.validate();
  const auto artifacts = ibq::run_experiment(config, run_options(f));
  const fs::path out(f.out);
  const auto logs = ibq::write_logs(artifacts, out);
  const auto figs = ibq::write_figures(artifacts, out);
  if (!f.quiet) {
    std::fprintf(stderr, "wrote %zu files to %s (median run %d, %zu retries)\n",
                 logs.size() + figs.size(), out.string().c_str(),
                 artifacts.aggregate.median_run_id, artifacts.retries.size());
  }
  return kOk;
}

void add_run_flags(CLI::App* app, RunFlags& f) {
  app->add_option("--seed", f.seed,
                  "Master seed; every random choice derives from it (default: the "
                  "config's master_seed, 0 for presets)");
  app->add_option("--workers", f.workers,
                  "Repetitions run in parallel (default: $IBQ_WORKERS, else 1); "
                  "results do not depend on it")
      ->check(CLI::PositiveNumber);
  app->add_flag("--quiet,-q", f.quiet, "Suppress progress output on stderr");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exact information-plane analysis of quantized neural networks."};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  int code = kOk;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write the 12-bit synthetic dataset as text");
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out,-o", gen_out, "Output file (one '<12 bits> <label>' line per sample)")
      ->required();
  gen->add_option("--seed", gen_seed, "Dataset seed (default 0)");
  gen->callback([&] {
    const auto d = ibq::gen_synthetic(gen_seed);
    std::ostringstream text;
    ibq::write_synthetic_text(text, d);
    ibq::write_text(gen_out, text.str());
  });

  // run
  auto* run = app.add_subcommand("run", "Run an experiment described by a JSON config file");
  std::string config_path;
  RunFlags run_flags;
  run->add_option("--config,-c", config_path, "Config file (JSON, see README)")->required();
  run->add_option("--out,-o", run_flags.out, "Output directory for logs and figures")
      ->required();
  add_run_flags(run, run_flags);
  run->callback([&] {
    std::string text;
    try {
      text = ibq::read_text(config_path);
    } catch (const ibq::IoError& e) {
      throw ibq::ConfigError(std::string("unreadable config: ") + e.what());
    }
    code = execute(ibq::parse_config(text), run_flags);
  });

  // reproduce
  auto* rep = app.add_subcommand("reproduce", "Run a named preset and write logs and figures");
  std::string preset_name, mnist_dir = ibq::kDefaultMnistDir;
  double scale = 1.0;
  std::optional<int> reps, epochs;
  std::optional<std::int64_t> stride;
  RunFlags rep_flags;
  rep->add_option("preset", preset_name, "Preset name (see list-presets)")->required();
  rep->add_option("--scale", scale,
                  "Desk-scale factor in (0, 1]: repetitions and epochs are multiplied "
                  "by it and rounded down, minimum 1 (default 1)");
  rep->add_option("--reps", reps, "Override the repetition count (applied after --scale)")
      ->check(CLI::PositiveNumber);
  rep->add_option("--epochs", epochs, "Override the epoch count (applied after --scale)")
      ->check(CLI::PositiveNumber);
  rep->add_option("--stride", stride,
                  "Log MI every N epochs; the first and last epochs are always logged "
                  "(default 1)")
      ->check(CLI::PositiveNumber);
  rep->add_option("--out,-o", rep_flags.out,
                  "Output directory (default results/<preset>)");
  rep->add_option("--mnist-dir", mnist_dir,
                  "Directory holding the four MNIST IDX files (default data/mnist)");
  add_run_flags(rep, rep_flags);
  rep->callback([&] {
    auto c = ibq::preset(preset_name, mnist_dir);
    c = ibq::desk_scale(c, scale);
    if (reps || epochs)
      c = ibq::with_budget(c, reps.value_or(c.repetitions), epochs.value_or(c.epochs));
    if (stride) c.stride = *stride;
    if (rep_flags.out.empty()) rep_flags.out = "results/" + preset_name;
    code = execute(c, rep_flags);
  });

  // plot
  auto* plot = app.add_subcommand("plot", "Regenerate figures from a log directory");
  std::string plot_in, plot_out;
  plot->add_option("--in,-i", plot_in, "Log directory written by run or reproduce")
      ->required();
  plot->add_option("--out,-o", plot_out, "Output directory for SVG figures")->required();
  plot->callback([&] {
    const auto artifacts = ibq::read_logs(plot_in);
    ibq::write_figures(artifacts, plot_out);
  });

  // list-presets
  auto* list = app.add_subcommand("list-presets", "Print the preset catalog");
  list->callback([&] {
    for (const auto& name : ibq::preset_names()) {
      const auto c = ibq::preset(name);
      std::cout << name << "  reps=" << c.repetitions << " epochs=" << c.epochs
                << " mi=" << ibq::to_string(c.mi_mode) << " bits=" << c.network.quant_bits
                << '\n';
    }
  });

  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (const auto* sub : app.get_subcommands({})) known = known || sub->check_name(argv[1]);
    if (!known) {
      std::cerr << "ibq: unknown subcommand '" << argv[1] << "'\n"
                << "Run with --help for the list of subcommands.\n";
      return kUsage;
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  } catch (const ibq::UnknownPresetError& e) {
    std::cerr << "ibq: " << e.what() << '\n';
    return kUnknownPreset;
  } catch (const ibq::ConfigError& e) {
    std::cerr << "ibq: invalid config: " << e.what() << '\n';
    return kBadConfig;
  } catch (const ibq::IoError& e) {
    std::cerr << "ibq: I/O error: " << e.what() << '\n';
    return kIo;
  } catch (const ibq::DataError& e) {
    std::cerr << "ibq: data error: " << e.what() << '\n';
    return kIo;
  } catch (const ibq::RunError& e) {
    std::cerr << "ibq: run failed: " << e.what() << '\n';
    return kRunFailed;
  } catch (const std::exception& e) {
    std::cerr << "ibq: internal error: " << e.what() << '\n';
    return kInternal;
  }
  return code;
}

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

// Experiment orchestration: configurations, the preset catalog, repeated
// seeded runs with the low-accuracy retry rule, and random-label prefitting.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ibq/data.hpp"
#include "ibq/info.hpp"
#include "ibq/network.hpp"

namespace ibq {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class UnknownPresetError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class RunError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Configuration.

enum class DataKind { synthetic, synthetic_file, mnist };

struct DataConfig {
  DataKind kind = DataKind::synthetic;
  std::uint64_t seed = 0;   // synthetic labelling function
  std::string path;         // synthetic_file: "bits label" text file
  std::string mnist_dir;    // directory holding the four IDX files
  std::size_t limit = 0;    // MNIST: keep the first `limit` samples (0: all)

  bool operator==(const DataConfig&) const = default;
};

enum class MiMode { exact, binned, both };

inline std::string to_string(MiMode m) {
  switch (m) {
    case MiMode::exact: return "exact";
    case MiMode::binned: return "binned";
    case MiMode::both: return "both";
  }
  return "?";
}

inline MiMode mi_mode_from_string(const std::string& s) {
  if (s == "exact") return MiMode::exact;
  if (s == "binned") return MiMode::binned;
  if (s == "both") return MiMode::both;
  throw ConfigError("unknown mi mode '" + s + "'");
}

struct ExperimentConfig {
  std::string name;
  DataConfig data;
  NetworkSpec network;  // network.quant_bits: 0 turns quantization off
  int epochs = 1;
  int repetitions = 1;
  MiMode mi_mode = MiMode::exact;
  int bins = 30;
  bool bin_quantized = false;  // consent to bin activations of a quantized net
  int stride = 1;
  int prefit_epochs = 0;
  double retry_threshold = 0.55;
  int retry_budget = 10;
  int batch_size = 256;
  double learning_rate = 1e-4;
  double train_fraction = 0.8;
  std::uint64_t master_seed = 0;
  std::map<std::string, std::string> notes;  // e.g. desk scaling

  int quant_bits() const { return network.quant_bits; }
  bool wants_exact() const { return mi_mode != MiMode::binned; }
  bool wants_binned() const { return mi_mode != MiMode::exact; }

  void validate() const {
    if (repetitions < 1) throw ConfigError("repetitions must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (stride < 1) throw ConfigError("stride must be >= 1");
    if (prefit_epochs < 0) throw ConfigError("prefit epochs must be >= 0");
    if (retry_budget < 0) throw ConfigError("retry budget must be >= 0");
    if (!(retry_threshold >= 0.0 && retry_threshold <= 1.0))
      throw ConfigError("retry threshold must lie in [0, 1]");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      throw ConfigError("train fraction must lie in (0, 1)");
    if (wants_binned() && bins < 1) throw ConfigError("bins must be >= 1");
    if (wants_exact() && network.quant_bits == 0)
      throw ConfigError("exact MI needs a quantized network (quant_bits != off)");
    if (wants_binned() && network.quant_bits != 0 && !bin_quantized)
      throw ConfigError(
          "binning a quantized network needs bin_quantized = true");
    if (data.kind == DataKind::mnist && data.mnist_dir.empty())
      throw ConfigError("mnist data needs a directory");
    if (data.kind == DataKind::synthetic_file && data.path.empty())
      throw ConfigError("synthetic_file data needs a path");
    try {
      network.validate();
    } catch (const SpecError& e) {
      throw ConfigError(std::string("network: ") + e.what());
    }
  }

  bool operator==(const ExperimentConfig&) const = default;
};

// Config files are JSON documents mirroring ExperimentConfig:
//   {"name": "SYN-TANH-8BIT",
//    "dataset": {"kind": "synthetic", "seed": 0}
//             | {"kind": "synthetic_file", "path": "data.txt"}
//             | {"kind": "mnist", "dir": "data/mnist", "limit": 0},
//    "network": {... see network.hpp ...},
//    "epochs": 8000, "repetitions": 50,
//    "mi": {"mode": "exact" | "binned" | "both", "bins": 30,
//           "bin_quantized": false},
//    "stride": 1, "prefit_epochs": 0,
//    "retry": {"threshold": 0.55, "budget": 10},
//    "training": {"batch_size": 256, "learning_rate": 0.0001,
//                 "train_fraction": 0.8},
//    "master_seed": 0, "notes": {}}
// Every key except "network" is optional and defaults as in the struct.
inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json data;
  if (c.data.kind == DataKind::synthetic)
    data = {{"kind", "synthetic"}, {"seed", c.data.seed}};
  else if (c.data.kind == DataKind::synthetic_file)
    data = {{"kind", "synthetic_file"}, {"path", c.data.path}};
  else
    data = {{"kind", "mnist"}, {"dir", c.data.mnist_dir}, {"limit", c.data.limit}};
  nlohmann::json net = c.network;
  net.erase("seed");
  j = {{"name", c.name},
       {"dataset", data},
       {"network", net},
       {"epochs", c.epochs},
       {"repetitions", c.repetitions},
       {"mi",
        {{"mode", to_string(c.mi_mode)},
         {"bins", c.bins},
         {"bin_quantized", c.bin_quantized}}},
       {"stride", c.stride},
       {"prefit_epochs", c.prefit_epochs},
       {"retry", {{"threshold", c.retry_threshold}, {"budget", c.retry_budget}}},
       {"training",
        {{"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"train_fraction", c.train_fraction}}},
       {"master_seed", c.master_seed},
       {"notes", c.notes}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  c.name = j.value("name", std::string{});
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    const auto kind = d.value("kind", std::string("synthetic"));
    if (kind == "synthetic") {
      c.data.kind = DataKind::synthetic;
      c.data.seed = d.value("seed", std::uint64_t{0});
    } else if (kind == "synthetic_file") {
      c.data.kind = DataKind::synthetic_file;
      c.data.path = d.value("path", std::string{});
    } else if (kind == "mnist") {
      c.data.kind = DataKind::mnist;
      c.data.mnist_dir = d.value("dir", std::string{});
      c.data.limit = d.value("limit", std::size_t{0});
    } else {
      throw ConfigError("unknown dataset kind '" + kind + "'");
    }
  }
  c.network = j.at("network").get<NetworkSpec>();
  c.network.seed = 0;
  c.epochs = j.value("epochs", c.epochs);
  c.repetitions = j.value("repetitions", c.repetitions);
  if (j.contains("mi")) {
    const auto& m = j.at("mi");
    c.mi_mode = mi_mode_from_string(m.value("mode", std::string("exact")));
    c.bins = m.value("bins", c.bins);
    c.bin_quantized = m.value("bin_quantized", c.bin_quantized);
  }
  c.stride = j.value("stride", c.stride);
  c.prefit_epochs = j.value("prefit_epochs", c.prefit_epochs);
  if (j.contains("retry")) {
    c.retry_threshold = j.at("retry").value("threshold", c.retry_threshold);
    c.retry_budget = j.at("retry").value("budget", c.retry_budget);
  }
  if (j.contains("training")) {
    const auto& t = j.at("training");
    c.batch_size = t.value("batch_size", c.batch_size);
    c.learning_rate = t.value("learning_rate", c.learning_rate);
    c.train_fraction = t.value("train_fraction", c.train_fraction);
  }
  c.master_seed = j.value("master_seed", c.master_seed);
  c.notes = j.value("notes", std::map<std::string, std::string>{});
}

inline ExperimentConfig parse_config(const std::string& text) {
  try {
    return nlohmann::json::parse(text).get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const SpecError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline std::string dump_config(const ExperimentConfig& c) {
  return nlohmann::json(c).dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Presets.

inline NetworkSpec dense_network(int inputs, std::vector<int> hidden,
                                 Activation a, int classes, int bits) {
  NetworkSpec s;
  s.input_shape = {inputs};
  for (int w : hidden) s.layers.push_back(LayerSpec::dense(w, a));
  s.layers.push_back(LayerSpec::dense(classes, Activation::softmax));
  s.quant_bits = bits;
  return s;
}

/// The 12-10-7-5-4-3-2 network used on the synthetic task.
inline NetworkSpec standard_network(Activation a, int bits) {
  return dense_network(12, {10, 7, 5, 4, 3}, a, 2, bits);
}

inline NetworkSpec mnist_conv_network(int bits) {
  NetworkSpec s;
  s.input_shape = {1, 28, 28};
  s.layers = {LayerSpec::conv(3, 3, 2, Activation::relu), LayerSpec::maxpool(2, 2),
              LayerSpec::conv(3, 3, 2, Activation::relu), LayerSpec::maxpool(2, 2),
              LayerSpec::flatten(), LayerSpec::dense(20, Activation::relu),
              LayerSpec::dense(10, Activation::softmax)};
  s.quant_bits = bits;
  return s;
}

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "SYN-TANH-8BIT",     "SYN-RELU-8BIT",     "SYN-TANH-4BIT",
      "SYN-RELU-4BIT",     "SYN-TANH-32BIT",    "SYN-RELU-32BIT",
      "SYN-TANH-BINS-30",  "SYN-TANH-BINS-100", "SYN-TANH-BINS-256",
      "SYN-RELU-BINS-30",  "SYN-RELU-BINS-100", "SYN-RELU-BINS-256",
      "SYN-TANH-PREFIT",   "SYN-RELU-PREFIT",   "MNIST-BN2",
      "MNIST-BN4",         "MNIST-HOURGLASS",   "MNIST-4x10",
      "MNIST-CONV"};
  return names;
}

inline const char* kDefaultMnistDir = "data/mnist";

/// The named configuration. MNIST presets read from `mnist_dir`.
inline ExperimentConfig preset(const std::string& name,
                               const std::string& mnist_dir = kDefaultMnistDir) {
  ExperimentConfig c;
  c.name = name;
  auto act_of = [&](const std::string& tag) {
    return tag == "TANH" ? Activation::tanh : Activation::relu;
  };
  if (name.rfind("SYN-", 0) == 0) {
    const auto dash = name.find('-', 4);
    if (dash == std::string::npos) throw UnknownPresetError("unknown preset '" + name + "'");
    const auto act_tag = name.substr(4, dash - 4);
    const auto rest = name.substr(dash + 1);
    if (act_tag != "TANH" && act_tag != "RELU")
      throw UnknownPresetError("unknown preset '" + name + "'");
    const auto a = act_of(act_tag);
    c.epochs = 8000;
    if (rest == "8BIT" || rest == "4BIT" || rest == "32BIT") {
      const int bits = std::stoi(rest);
      c.network = standard_network(a, bits);
      c.repetitions = bits == 8 ? 50 : 30;
    } else if (rest == "BINS-30" || rest == "BINS-100" || rest == "BINS-256") {
      c.network = standard_network(a, 0);
      c.repetitions = 50;
      c.mi_mode = MiMode::binned;
      c.bins = std::stoi(rest.substr(5));
    } else if (rest == "PREFIT") {
      c.network = standard_network(a, 8);
      c.repetitions = 20;
      c.prefit_epochs = 1000;
    } else {
      throw UnknownPresetError("unknown preset '" + name + "'");
    }
    return c;
  }
  c.data.kind = DataKind::mnist;
  c.data.mnist_dir = mnist_dir;
  c.epochs = 3000;
  c.repetitions = 20;
  if (name == "MNIST-BN2")
    c.network = dense_network(784, {16, 8, 4, 2}, Activation::relu, 10, 8);
  else if (name == "MNIST-BN4")
    c.network = dense_network(784, {16, 12, 8, 4}, Activation::relu, 10, 8);
  else if (name == "MNIST-HOURGLASS")
    c.network = dense_network(784, {16, 8, 4, 2, 4, 8}, Activation::relu, 10, 8);
  else if (name == "MNIST-4x10")
    c.network = dense_network(784, {10, 10, 10, 10}, Activation::relu, 10, 8);
  else if (name == "MNIST-CONV")
    c.network = mnist_conv_network(8);
  else
    throw UnknownPresetError("unknown preset '" + name + "'");
  return c;
}

/// Scales repetitions and epochs (and prefit epochs) by `factor`, rounding
/// down with a minimum of 1, and notes the scaling.
inline ExperimentConfig desk_scale(ExperimentConfig c, double factor) {
  if (!(factor > 0.0 && factor <= 1.0))
    throw ConfigError("scale factor must lie in (0, 1]");
  if (factor == 1.0) return c;
  auto scale = [&](int n) {
    return std::max(1, static_cast<int>(std::floor(n * factor + 1e-9)));
  };
  std::ostringstream f;
  f << factor;
  c.notes["desk_scale"] = f.str();
  c.notes["full_repetitions"] = std::to_string(c.repetitions);
  c.notes["full_epochs"] = std::to_string(c.epochs);
  c.repetitions = scale(c.repetitions);
  c.epochs = scale(c.epochs);
  if (c.prefit_epochs > 0) c.prefit_epochs = scale(c.prefit_epochs);
  return c;
}

/// Replaces the repetition and epoch budget outright, noting the change.
inline ExperimentConfig with_budget(ExperimentConfig c, int repetitions,
                                    int epochs) {
  if (!c.notes.contains("full_repetitions")) {
    c.notes["full_repetitions"] = std::to_string(c.repetitions);
    c.notes["full_epochs"] = std::to_string(c.epochs);
  }
  c.repetitions = repetitions;
  c.epochs = epochs;
  c.notes["budget"] = std::to_string(repetitions) + " reps x " +
                      std::to_string(epochs) + " epochs";
  return c;
}

// ---------------------------------------------------------------------------
// Data.

inline Dataset load_dataset(const DataConfig& d) {
  if (d.kind == DataKind::synthetic) return gen_synthetic(d.seed);
  if (d.kind == DataKind::synthetic_file) {
    std::ifstream in(d.path);
    if (!in) throw DataError("cannot open " + d.path);
    return read_synthetic_text(in);
  }
  const std::filesystem::path dir(d.mnist_dir);
  auto all = concat({load_idx(dir / "train-images-idx3-ubyte",
                              dir / "train-labels-idx1-ubyte"),
                     load_idx(dir / "t10k-images-idx3-ubyte",
                              dir / "t10k-labels-idx1-ubyte")});
  all.name = "mnist";
  if (d.limit > 0 && d.limit < all.size()) {
    auto sub = all.head(d.limit);
    sub.name = "mnist[" + std::to_string(d.limit) + "]";
    return sub;
  }
  return all;
}

// ---------------------------------------------------------------------------
// Seeds. A repetition's attempt a uses mix(master, r + a * 2^32); within an
// attempt every consumer draws from its own stream.

inline constexpr std::uint64_t kRetryOffset = std::uint64_t{1} << 32;

inline std::uint64_t repetition_seed(std::uint64_t master, int repetition,
                                     int attempt) {
  return mix_seed(master, static_cast<std::uint64_t>(repetition) +
                              static_cast<std::uint64_t>(attempt) * kRetryOffset);
}

namespace stream {
inline constexpr std::uint64_t split = 1, init = 2, order = 3, shuffle = 4,
                               prefit_order = 5;
}

// ---------------------------------------------------------------------------
// Training loops.

/// Called after every training epoch with the global epoch number (prefit
/// epochs count first) and that epoch's statistics.
using EpochObserver = std::function<void(std::int64_t epoch, const Network&,
                                         const QuantState&, const EpochStats&)>;

/// Trains `net` on `train` with its labels shuffled (seeded) for `epochs`
/// epochs. The observer sees each epoch, numbered from `first_epoch`.
inline Network prefit_random_labels(Network net, const Dataset& train, int epochs,
                                    std::uint64_t seed, int batch_size = 256,
                                    double lr = 1e-4,
                                    const EpochObserver& observe = {},
                                    QuantState* quant = nullptr,
                                    std::int64_t first_epoch = 1) {
  if (epochs <= 0) return net;
  QuantState local = make_quant_state(net);
  QuantState& q = quant ? *quant : local;
  const auto shuffled = shuffle_labels(train, mix_seed(seed, stream::shuffle));
  for (int e = 0; e < epochs; ++e) {
    const auto st = train_epoch(net, shuffled, q, batch_size, lr,
                                mix_seed(seed, stream::prefit_order), e);
    if (observe) observe(first_epoch + e, net, q, st);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Running experiments.

struct RetryEntry {
  int repetition = 0;
  int attempt = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  std::string reason;
};

struct RunArtifacts {
  ExperimentConfig config;
  std::vector<InfoTrajectory> runs;         // primary estimator per repetition
  std::vector<InfoTrajectory> binned_runs;  // "both" mode only
  Aggregate aggregate;
  std::optional<Aggregate> binned_aggregate;
  std::vector<RetryEntry> retries;
  std::vector<std::uint64_t> seeds;  // seed of each accepted repetition
  std::string estimator;             // "exact" or "binned"
  std::size_t dataset_size = 0;
  int num_classes = 0;
  double label_entropy = 0.0;  // H(Y) over the full dataset, bits
};

struct ProgressEvent {
  int repetition = 0;
  int attempt = 0;
  std::int64_t epoch = 0;
  std::int64_t total_epochs = 0;
  bool finished = false;
  bool accepted = false;
  double test_accuracy = 0.0;
};

struct RunOptions {
  int workers = 0;  // 0: IBQ_WORKERS or 1
  std::function<void(const ProgressEvent&)> progress;
  std::int64_t progress_every = 100;  // epochs between progress events
};

inline int default_workers() {
  if (const char* env = std::getenv("IBQ_WORKERS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
  }
  return 1;
}

inline bool is_logged(std::int64_t epoch, std::int64_t total, int stride) {
  return epoch == 1 || epoch == total || epoch % stride == 0;
}

/// Activation governing each recorded layer; pooling layers inherit the
/// activation of the layer they pool.
inline std::vector<Activation> recorded_activations(const NetworkSpec& spec) {
  std::vector<Activation> out;
  for (auto li : spec.recorded_layers()) {
    Activation a = Activation::none;
    for (std::size_t j = li + 1; a == Activation::none && j-- > 0;)
      a = spec.layers[j].activation;
    out.push_back(a);
  }
  return out;
}

/// Binning bounds per recorded layer: tanh [-1, 1], softmax [0, 1], relu
/// [0, relu_max[k]] (1 when the layer never fired).
inline std::vector<BinBounds> bin_bounds(const NetworkSpec& spec,
                                         std::span<const double> relu_max) {
  std::vector<BinBounds> b;
  const auto acts = recorded_activations(spec);
  for (std::size_t k = 0; k < acts.size(); ++k) {
    switch (acts[k]) {
      case Activation::tanh: b.push_back({-1.0, 1.0}); break;
      case Activation::softmax: b.push_back({0.0, 1.0}); break;
      default: {
        const double hi = k < relu_max.size() && relu_max[k] > 0.0 ? relu_max[k] : 1.0;
        b.push_back({0.0, hi});
      }
    }
  }
  return b;
}

namespace detail {

struct AttemptResult {
  InfoTrajectory exact, binned;
  double final_test_accuracy = 0.0;
  std::vector<std::size_t> dead_layers;
};

inline std::map<std::string, std::string> trajectory_metadata(
    const ExperimentConfig& c, std::uint64_t seed, const std::string& estimator) {
  std::map<std::string, std::string> m = c.notes;
  m["preset"] = c.name;
  m["architecture"] = nlohmann::json(c.network).dump();
  m["quant_bits"] = c.network.quant_bits ? std::to_string(c.network.quant_bits) : "off";
  m["seed"] = std::to_string(seed);
  m["master_seed"] = std::to_string(c.master_seed);
  m["estimator"] = estimator;
  m["split"] = "independent per repetition";
  m["prefit_epochs"] = std::to_string(c.prefit_epochs);
  return m;
}

/// Trains one attempt from scratch, calling `at_logged` at each logged epoch.
inline double train_attempt(
    const ExperimentConfig& c, const Dataset& full, std::uint64_t seed,
    const std::function<void(std::int64_t, const Network&, const QuantState&,
                             const EpochStats&, const EpochStats&)>& at_logged,
    const RunOptions& opt, int repetition, int attempt) {
  const auto sp = split(full, c.train_fraction, mix_seed(seed, stream::split));
  Network net = init_network(c.network, mix_seed(seed, stream::init));
  QuantState q = make_quant_state(net);
  const std::int64_t total = c.prefit_epochs + c.epochs;
  double final_acc = 0.0;
  auto observe = [&](std::int64_t epoch, const Network& n, const QuantState& qs,
                     const EpochStats& st) {
    if (is_logged(epoch, total, c.stride)) {
      const auto test = evaluate(n, sp.test, qs);
      if (epoch == total) final_acc = test.accuracy;
      at_logged(epoch, n, qs, st, test);
    }
    if (opt.progress && (epoch % opt.progress_every == 0 || epoch == total))
      opt.progress({repetition, attempt, epoch, total, false, false, 0.0});
  };
  net = prefit_random_labels(std::move(net), sp.train, c.prefit_epochs, seed,
                             c.batch_size, c.learning_rate, observe, &q, 1);
  for (int e = 0; e < c.epochs; ++e) {
    const auto st = train_epoch(net, sp.train, q, c.batch_size, c.learning_rate,
                                mix_seed(seed, stream::order), e);
    observe(c.prefit_epochs + e + 1, net, q, st);
  }
  return final_acc;
}

inline AttemptResult run_attempt(const ExperimentConfig& c, const Dataset& full,
                                 std::uint64_t seed, const RunOptions& opt,
                                 int repetition, int attempt) {
  AttemptResult res;
  const bool binned = c.wants_binned();
  const auto n_rec = c.network.recorded_layers().size();
  std::vector<double> relu_max(n_rec, 0.0);
  const auto acts = recorded_activations(c.network);
  const bool needs_max =
      std::find(acts.begin(), acts.end(), Activation::relu) != acts.end();

  // With relu layers and binning, a first pass finds each layer's largest
  // activation over all logged epochs; training is deterministic, so the
  // second pass retraces it exactly and bins with those bounds.
  const bool two_pass = binned && needs_max;
  auto metrics_of = [](std::int64_t e, const EpochStats& st, const EpochStats& test) {
    return EpochMetrics{e, st.accuracy, test.accuracy, st.loss};
  };
  if (two_pass) {
    res.final_test_accuracy = train_attempt(
        c, full, seed,
        [&](std::int64_t e, const Network& net, const QuantState& q,
            const EpochStats&, const EpochStats&) {
          const auto rec = record_states(net, full, q, true, e);
          for (std::size_t k = 0; k < n_rec; ++k)
            relu_max[k] = std::max(relu_max[k], rec.layers[k].continuous.maxCoeff());
          if (e == c.prefit_epochs + c.epochs) res.dead_layers = detect_dead_layer(rec);
        },
        opt, repetition, attempt);
    if (res.final_test_accuracy < c.retry_threshold) return res;
  }
  const auto bounds = bin_bounds(c.network, relu_max);
  res.final_test_accuracy = train_attempt(
      c, full, seed,
      [&](std::int64_t e, const Network& net, const QuantState& q,
          const EpochStats& st, const EpochStats& test) {
        const auto rec = record_states(net, full, q, binned, e);
        const auto m = metrics_of(e, st, test);
        if (c.wants_exact()) res.exact.append(e, mi_exact(rec, full.labels), m);
        if (binned) res.binned.append(e, mi_binned(rec, full.labels, c.bins, bounds), m);
        if (e == c.prefit_epochs + c.epochs) res.dead_layers = detect_dead_layer(rec);
      },
      opt, repetition, attempt);
  return res;
}

}  // namespace detail

/// Runs every repetition (retrying low-accuracy attempts), then aggregates.
/// Results depend only on the config: worker count and scheduling do not
/// change them.
inline RunArtifacts run_experiment(const ExperimentConfig& config,
                                   const RunOptions& options = {}) {
  config.validate();
  const Dataset full = load_dataset(config.data);
  full.validate();
  if (full.num_classes != config.network.num_classes())
    throw ConfigError("network has " + std::to_string(config.network.num_classes()) +
                      " outputs but the data has " +
                      std::to_string(full.num_classes) + " classes");
  if (config.network.input().size() != full.inputs.cols())
    throw ConfigError("network input size does not match the data");

  const int reps = config.repetitions;
  std::vector<detail::AttemptResult> results(static_cast<std::size_t>(reps));
  std::vector<std::vector<RetryEntry>> retry_logs(static_cast<std::size_t>(reps));
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(reps));
  std::vector<std::string> errors(static_cast<std::size_t>(reps));

  std::mutex progress_mutex;
  RunOptions opt = options;
  if (options.progress)
    opt.progress = [&](const ProgressEvent& ev) {
      std::lock_guard lock(progress_mutex);
      options.progress(ev);
    };

  auto run_rep = [&](int r) {
    const auto ri = static_cast<std::size_t>(r);
    for (int attempt = 0; attempt <= config.retry_budget; ++attempt) {
      const auto seed = repetition_seed(config.master_seed, r, attempt);
      auto res = detail::run_attempt(config, full, seed, opt, r, attempt);
      const bool ok = res.final_test_accuracy >= config.retry_threshold;
      if (opt.progress)
        opt.progress({r, attempt, config.prefit_epochs + config.epochs,
                      config.prefit_epochs + config.epochs, true, ok,
                      res.final_test_accuracy});
      if (ok) {
        results[ri] = std::move(res);
        seeds[ri] = seed;
        return;
      }
      std::ostringstream why;
      why << "final test accuracy " << res.final_test_accuracy << " below "
          << config.retry_threshold;
      if (!res.dead_layers.empty()) {
        why << "; dead relu layer(s) at recorded position";
        for (auto k : res.dead_layers) why << ' ' << k;
      }
      retry_logs[ri].push_back({r, attempt, seed, res.final_test_accuracy, why.str()});
    }
    errors[ri] = "repetition " + std::to_string(r) + ": retry budget of " +
                 std::to_string(config.retry_budget) + " exhausted";
  };

  const int workers = std::clamp(options.workers > 0 ? options.workers : default_workers(),
                                 1, reps);
  if (workers == 1) {
    for (int r = 0; r < reps; ++r) {
      run_rep(r);
      if (!errors[static_cast<std::size_t>(r)].empty())
        throw RunError(errors[static_cast<std::size_t>(r)]);
    }
  } else {
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> failures(static_cast<std::size_t>(workers));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          for (int r = next++; r < reps; r = next++) run_rep(r);
        } catch (...) {
          failures[static_cast<std::size_t>(w)] = std::current_exception();
          next = reps;
        }
      });
    for (auto& t : pool) t.join();
    for (auto& f : failures)
      if (f) std::rethrow_exception(f);
    for (const auto& e : errors)
      if (!e.empty()) throw RunError(e);
  }

  RunArtifacts art;
  art.config = config;
  art.seeds = seeds;
  art.dataset_size = full.size();
  art.num_classes = full.num_classes;
  {
    std::vector<std::uint64_t> counts(static_cast<std::size_t>(full.num_classes), 0);
    for (int y : full.labels) ++counts[static_cast<std::size_t>(y)];
    art.label_entropy = entropy(counts);
  }
  art.estimator = config.wants_exact() ? "exact" : "binned";
  const std::string binned_name = "binned(m=" + std::to_string(config.bins) + ")";
  for (int r = 0; r < reps; ++r) {
    auto& res = results[static_cast<std::size_t>(r)];
    const auto seed = seeds[static_cast<std::size_t>(r)];
    for (auto& e : retry_logs[static_cast<std::size_t>(r)]) art.retries.push_back(e);
    res.exact.run_id = res.binned.run_id = r;
    res.exact.metadata = detail::trajectory_metadata(config, seed, "exact");
    res.binned.metadata = detail::trajectory_metadata(config, seed, binned_name);
    if (config.mi_mode == MiMode::binned) {
      art.runs.push_back(std::move(res.binned));
    } else {
      art.runs.push_back(std::move(res.exact));
      if (config.mi_mode == MiMode::both) art.binned_runs.push_back(std::move(res.binned));
    }
  }
  art.aggregate = aggregate_runs(art.runs);
  if (!art.binned_runs.empty()) art.binned_aggregate = aggregate_runs(art.binned_runs);
  return art;
}

// ---------------------------------------------------------------------------
// Phase report.

enum class PhaseMode { mean, vote };

/// Phase summary per recorded layer, from the mean trajectory (default) or
/// by majority vote over repetitions.
inline std::vector<PhaseSummary> phase_report(const RunArtifacts& art,
                                              PhaseMode mode = PhaseMode::mean,
                                              const PhaseThresholds& th = {}) {
  std::vector<PhaseSummary> out;
  for (std::size_t k = 0; k < art.aggregate.mean.num_layers(); ++k)
    out.push_back(mode == PhaseMode::mean
                      ? detect_phases(art.aggregate.mean.layers[k], th)
                      : detect_phases_vote(art.runs, k, th));
  return out;
}

}  // namespace ibq

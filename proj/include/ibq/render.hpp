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

// Result logs (CSV + JSON) and standalone SVG figures.
//
// Log directory layout:
//   rep_000.csv ...        one file per repetition
//   rep_000_binned.csv ... binned estimates when both estimators ran
//   aggregate.csv          per-epoch, per-layer means, variances and CIs
//   metadata.json          config, seeds, retry log, summary
//
// Figures use a five-stop viridis ramp (dark purple = first epoch, yellow =
// last) for epochs.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ibq/harness.hpp"
#include "ibq/info.hpp"

namespace ibq {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// CSV.

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline const char* kRunCsvHeader =
    "run_id,epoch,layer_index,i_xt_bits,i_ty_bits,train_acc,test_acc,loss";

inline std::string run_csv(const InfoTrajectory& t) {
  std::string out = std::string(kRunCsvHeader) + "\n";
  for (std::size_t e = 0; e < t.num_epochs(); ++e) {
    const auto& m = t.metrics.at(e);
    for (std::size_t k = 0; k < t.num_layers(); ++k) {
      const auto& p = t.layers[k][e];
      out += std::to_string(t.run_id) + ',' + std::to_string(p.epoch) + ',' +
             std::to_string(k) + ',' + format_g17(p.i_xt) + ',' +
             format_g17(p.i_ty) + ',' + format_g17(m.train_acc) + ',' +
             format_g17(m.test_acc) + ',' + format_g17(m.loss) + '\n';
    }
  }
  return out;
}

inline std::string aggregate_csv(const Aggregate& a) {
  std::string out =
      "epoch,layer_index,mean_i_xt_bits,var_i_xt,mean_i_ty_bits,var_i_ty,"
      "mean_train_acc,ci95_train_acc,mean_test_acc,ci95_test_acc,mean_loss,"
      "ci95_loss\n";
  for (std::size_t e = 0; e < a.metrics.size(); ++e) {
    const auto& m = a.metrics[e];
    for (std::size_t k = 0; k < a.stats.size(); ++k) {
      const auto& s = a.stats[k][e];
      out += std::to_string(s.epoch) + ',' + std::to_string(k) + ',' +
             format_g17(s.mean_i_xt) + ',' + format_g17(s.var_i_xt) + ',' +
             format_g17(s.mean_i_ty) + ',' + format_g17(s.var_i_ty) + ',' +
             format_g17(m.mean_train_acc) + ',' + format_g17(m.ci_train_acc) + ',' +
             format_g17(m.mean_test_acc) + ',' + format_g17(m.ci_test_acc) + ',' +
             format_g17(m.mean_loss) + ',' + format_g17(m.ci_loss) + '\n';
    }
  }
  return out;
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      f.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  f.push_back(cur);
  return f;
}

template <typename T>
T parse_field(const std::string& s, const std::string& where) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw IoError(where + ": cannot parse '" + s + "'");
  return v;
}

}  // namespace detail

/// Parses one repetition CSV back into a trajectory.
inline InfoTrajectory parse_run_csv(std::istream& in, const std::string& name = "csv") {
  std::string line;
  if (!std::getline(in, line) || detail::split_csv_line(line) !=
                                     detail::split_csv_line(kRunCsvHeader))
    throw IoError(name + ": missing or unexpected header");
  InfoTrajectory t;
  std::int64_t cur_epoch = -1;
  std::vector<MiPair> row_mi;
  EpochMetrics cur_m;
  auto flush = [&] {
    if (cur_epoch >= 0) t.append(cur_epoch, row_mi, cur_m);
    row_mi.clear();
  };
  std::size_t line_no = 1;
  bool have_id = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    const auto where = name + ":" + std::to_string(line_no);
    if (f.size() != 8) throw IoError(where + ": expected 8 fields");
    const int id = detail::parse_field<int>(f[0], where);
    if (have_id && id != t.run_id) throw IoError(where + ": mixed run ids");
    t.run_id = id;
    have_id = true;
    const auto epoch = detail::parse_field<std::int64_t>(f[1], where);
    const auto layer = detail::parse_field<std::size_t>(f[2], where);
    if (epoch != cur_epoch) {
      flush();
      cur_epoch = epoch;
    }
    if (layer != row_mi.size()) throw IoError(where + ": layers out of order");
    row_mi.push_back({detail::parse_field<double>(f[3], where),
                      detail::parse_field<double>(f[4], where)});
    cur_m = {epoch, detail::parse_field<double>(f[5], where),
             detail::parse_field<double>(f[6], where),
             detail::parse_field<double>(f[7], where)};
  }
  flush();
  return t;
}

// ---------------------------------------------------------------------------
// Writing and reading a log directory.

inline std::string rep_file_name(int run_id, bool binned = false) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rep_%03d%s.csv", run_id, binned ? "_binned" : "");
  return buf;
}

inline nlohmann::json metadata_json(const RunArtifacts& a) {
  nlohmann::json retries = nlohmann::json::array();
  for (const auto& r : a.retries)
    retries.push_back({{"repetition", r.repetition},
                       {"attempt", r.attempt},
                       {"seed", r.seed},
                       {"final_test_accuracy", r.accuracy},
                       {"reason", r.reason}});
  nlohmann::json runs = nlohmann::json::array();
  for (std::size_t i = 0; i < a.runs.size(); ++i) {
    nlohmann::json r = {{"run_id", a.runs[i].run_id},
                        {"seed", a.seeds.at(i)},
                        {"file", rep_file_name(a.runs[i].run_id)},
                        {"l2_distance_from_mean", a.aggregate.distances.at(i)},
                        {"metadata", a.runs[i].metadata}};
    if (!a.binned_runs.empty()) {
      r["binned_file"] = rep_file_name(a.runs[i].run_id, true);
      r["binned_metadata"] = a.binned_runs.at(i).metadata;
    }
    runs.push_back(r);
  }
  return {{"format", "ibq-run"},
          {"version", 1},
          {"preset", a.config.name},
          {"master_seed", a.config.master_seed},
          {"config", a.config},
          {"estimator", a.estimator},
          {"dataset_size", a.dataset_size},
          {"num_classes", a.num_classes},
          {"label_entropy_bits", a.label_entropy},
          {"split", "independent per repetition"},
          {"median_run_id", a.aggregate.median_run_id},
          {"runs", runs},
          {"retries", retries}};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes the CSV logs and metadata; returns the files written.
inline std::vector<std::filesystem::path> write_logs(const RunArtifacts& a,
                                                     const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<std::filesystem::path> files;
  for (const auto& t : a.runs) {
    files.push_back(dir / rep_file_name(t.run_id));
    write_text(files.back(), run_csv(t));
  }
  for (const auto& t : a.binned_runs) {
    files.push_back(dir / rep_file_name(t.run_id, true));
    write_text(files.back(), run_csv(t));
  }
  files.push_back(dir / "aggregate.csv");
  write_text(files.back(), aggregate_csv(a.aggregate));
  files.push_back(dir / "metadata.json");
  write_text(files.back(), metadata_json(a).dump(2) + "\n");
  return files;
}

/// Rebuilds artifacts from a log directory; aggregates are recomputed from
/// the per-repetition CSVs.
inline RunArtifacts read_logs(const std::filesystem::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_text(dir / "metadata.json"));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("metadata.json: " + std::string(e.what()));
  }
  RunArtifacts a;
  try {
    a.config = meta.at("config").get<ExperimentConfig>();
    a.estimator = meta.at("estimator").get<std::string>();
    a.dataset_size = meta.at("dataset_size").get<std::size_t>();
    a.num_classes = meta.at("num_classes").get<int>();
    a.label_entropy = meta.at("label_entropy_bits").get<double>();
    for (const auto& r : meta.at("runs")) {
      a.seeds.push_back(r.at("seed").get<std::uint64_t>());
      auto load = [&](const char* file_key, const char* meta_key) {
        const auto file = r.at(file_key).get<std::string>();
        std::istringstream in(read_text(dir / file));
        auto t = parse_run_csv(in, file);
        t.metadata = r.value(meta_key, std::map<std::string, std::string>{});
        return t;
      };
      a.runs.push_back(load("file", "metadata"));
      if (r.contains("binned_file"))
        a.binned_runs.push_back(load("binned_file", "binned_metadata"));
    }
    for (const auto& r : meta.at("retries"))
      a.retries.push_back({r.at("repetition").get<int>(), r.at("attempt").get<int>(),
                           r.at("seed").get<std::uint64_t>(),
                           r.at("final_test_accuracy").get<double>(),
                           r.at("reason").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw IoError("metadata.json: " + std::string(e.what()));
  }
  if (a.runs.empty()) throw IoError(dir.string() + ": no runs listed");
  a.aggregate = aggregate_runs(a.runs);
  if (!a.binned_runs.empty()) a.binned_aggregate = aggregate_runs(a.binned_runs);
  return a;
}

// ---------------------------------------------------------------------------
// SVG.

struct Rgb {
  int r = 0, g = 0, b = 0;
};

/// Viridis, linearly interpolated between five stops; t in [0, 1].
inline Rgb epoch_color(double t) {
  static constexpr int stops[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * 4.0;
  const int i = std::min(3, static_cast<int>(t));
  const double f = t - i;
  Rgb c;
  c.r = static_cast<int>(std::lround(stops[i][0] + f * (stops[i + 1][0] - stops[i][0])));
  c.g = static_cast<int>(std::lround(stops[i][1] + f * (stops[i + 1][1] - stops[i][1])));
  c.b = static_cast<int>(std::lround(stops[i][2] + f * (stops[i + 1][2] - stops[i][2])));
  return c;
}

inline std::string hex(Rgb c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c.r, c.g, c.b);
  return buf;
}

// Distinct line colours for per-layer curves.
inline std::string layer_color(std::size_t k) {
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                  "#bcbd22", "#17becf"};
  return palette[k % 10];
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Window {
  double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
};

struct PlaneStyle {
  double x_max = 12.0;  // bits; log2 |D|
  double y_max = 1.0;   // bits; H(Y)
  std::optional<Window> zoom;
  std::string title;
};

namespace detail {

struct Frame {
  double left, top, width, height;
  Window w;

  double sx(double x) const { return left + (x - w.x0) / (w.x1 - w.x0) * width; }
  double sy(double y) const { return top + height - (y - w.y0) / (w.y1 - w.y0) * height; }
};

inline double nice_step(double span) {
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 2.5, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10.0 * mag;
}

inline void axes(std::ostringstream& s, const Frame& f, const std::string& xlabel,
                 const std::string& ylabel) {
  s << "<rect x=\"" << num(f.left) << "\" y=\"" << num(f.top) << "\" width=\""
    << num(f.width) << "\" height=\"" << num(f.height)
    << "\" fill=\"none\" stroke=\"#000\" stroke-width=\"1\"/>\n";
  auto ticks = [&](double lo, double hi, bool x_axis) {
    const double step = nice_step(hi - lo);
    for (double v = std::ceil(lo / step - 1e-9) * step; v <= hi + 1e-9 * step; v += step) {
      const double shown = std::abs(v) < step * 1e-9 ? 0.0 : v;
      char label[32];
      std::snprintf(label, sizeof label, "%g", shown);
      if (x_axis) {
        const double x = f.sx(v);
        s << "<line x1=\"" << num(x) << "\" y1=\"" << num(f.top + f.height) << "\" x2=\""
          << num(x) << "\" y2=\"" << num(f.top + f.height + 4)
          << "\" stroke=\"#000\"/>\n<text x=\"" << num(x) << "\" y=\""
          << num(f.top + f.height + 16) << "\" text-anchor=\"middle\">" << label
          << "</text>\n";
      } else {
        const double y = f.sy(v);
        s << "<line x1=\"" << num(f.left - 4) << "\" y1=\"" << num(y) << "\" x2=\""
          << num(f.left) << "\" y2=\"" << num(y) << "\" stroke=\"#000\"/>\n<text x=\""
          << num(f.left - 7) << "\" y=\"" << num(y + 4) << "\" text-anchor=\"end\">"
          << label << "</text>\n";
      }
    }
  };
  ticks(f.w.x0, f.w.x1, true);
  ticks(f.w.y0, f.w.y1, false);
  s << "<text x=\"" << num(f.left + f.width / 2) << "\" y=\"" << num(f.top + f.height + 34)
    << "\" text-anchor=\"middle\">" << xml_escape(xlabel) << "</text>\n";
  s << "<text x=\"" << num(f.left - 40) << "\" y=\"" << num(f.top + f.height / 2)
    << "\" text-anchor=\"middle\" transform=\"rotate(-90 " << num(f.left - 40) << ' '
    << num(f.top + f.height / 2) << ")\">" << xml_escape(ylabel) << "</text>\n";
}

inline std::string header(double w, double h, const std::string& title) {
  std::ostringstream s;
  s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
    << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << num(w)
    << "\" height=\"" << num(h) << "\" viewBox=\"0 0 " << num(w) << ' ' << num(h)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n";
  if (!title.empty())
    s << "<text x=\"" << num(w / 2) << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">"
      << xml_escape(title) << "</text>\n";
  return s.str();
}

// Layer marker: six shapes, filled for layers 1-6 and outlined for 7-12.
inline void marker(std::ostringstream& s, std::size_t k, double cx, double cy,
                   const std::string& col, const char* cls = nullptr) {
  const std::string paint = (k / 6) % 2 == 0
                                ? "fill=\"" + col + "\""
                                : "fill=\"none\" stroke=\"" + col + "\" stroke-width=\"1.2\"";
  const std::string attr = cls ? std::string(" class=\"") + cls + "\"" : std::string();
  auto poly = [&](std::initializer_list<std::pair<double, double>> pts) {
    s << "<polygon" << attr << " points=\"";
    bool first = true;
    for (const auto& [dx, dy] : pts) {
      s << (first ? "" : " ") << num(cx + dx) << ',' << num(cy + dy);
      first = false;
    }
    s << "\" " << paint << "/>\n";
  };
  switch (k % 6) {
    case 0:
      s << "<circle" << attr << " cx=\"" << num(cx) << "\" cy=\"" << num(cy)
        << "\" r=\"3\" " << paint << "/>\n";
      break;
    case 1:
      s << "<rect" << attr << " x=\"" << num(cx - 2.7) << "\" y=\"" << num(cy - 2.7)
        << "\" width=\"5.4\" height=\"5.4\" " << paint << "/>\n";
      break;
    case 2: poly({{0, -3.5}, {3.2, 2.6}, {-3.2, 2.6}}); break;
    case 3: poly({{0, -3.8}, {3.8, 0}, {0, 3.8}, {-3.8, 0}}); break;
    case 4: poly({{0, 3.5}, {3.2, -2.6}, {-3.2, -2.6}}); break;
    default:
      poly({{-1.2, -3.6}, {1.2, -3.6}, {1.2, -1.2}, {3.6, -1.2}, {3.6, 1.2}, {1.2, 1.2},
            {1.2, 3.6}, {-1.2, 3.6}, {-1.2, 1.2}, {-3.6, 1.2}, {-3.6, -1.2}, {-1.2, -1.2}});
  }
}

// Plane panel: per layer, a grey polyline through the epochs and one
// epoch-coloured marker per point; points outside the window are skipped
// (the main panel's window always contains every point).
inline void plane_panel(std::ostringstream& s, const InfoTrajectory& t, const Frame& f,
                        const std::string& clip_id) {
  s << "<clipPath id=\"" << clip_id << "\"><rect x=\"" << num(f.left) << "\" y=\""
    << num(f.top) << "\" width=\"" << num(f.width) << "\" height=\"" << num(f.height)
    << "\"/></clipPath>\n<g clip-path=\"url(#" << clip_id << ")\">\n";
  const auto E = t.num_epochs();
  for (std::size_t k = 0; k < t.num_layers(); ++k) {
    s << "<polyline fill=\"none\" stroke=\"#999\" stroke-width=\"0.6\" points=\"";
    for (std::size_t e = 0; e < E; ++e) {
      const auto& p = t.layers[k][e];
      s << (e ? " " : "") << num(f.sx(p.i_xt)) << ',' << num(f.sy(p.i_ty));
    }
    s << "\"/>\n";
  }
  for (std::size_t k = 0; k < t.num_layers(); ++k) {
    s << "<g class=\"layer\" data-layer=\"" << k << "\">\n";
    for (std::size_t e = 0; e < E; ++e) {
      const auto& p = t.layers[k][e];
      if (p.i_xt < f.w.x0 || p.i_xt > f.w.x1 || p.i_ty < f.w.y0 || p.i_ty > f.w.y1)
        continue;
      const double frac = E > 1 ? static_cast<double>(e) / static_cast<double>(E - 1) : 0.0;
      const double cx = f.sx(p.i_xt), cy = f.sy(p.i_ty);
      const auto col = hex(epoch_color(frac));
      marker(s, k, cx, cy, col, "marker");
    }
    s << "</g>\n";
  }
  s << "</g>\n";
}

inline void color_bar(std::ostringstream& s, double x, double y, double w,
                      std::int64_t first, std::int64_t last) {
  s << "<defs><linearGradient id=\"epochs\" x1=\"0\" x2=\"1\" y1=\"0\" y2=\"0\">\n";
  for (int i = 0; i <= 4; ++i)
    s << "<stop offset=\"" << num(i / 4.0) << "\" stop-color=\"" << hex(epoch_color(i / 4.0))
      << "\"/>\n";
  s << "</linearGradient></defs>\n<rect x=\"" << num(x) << "\" y=\"" << num(y)
    << "\" width=\"" << num(w) << "\" height=\"10\" fill=\"url(#epochs)\"/>\n"
    << "<text x=\"" << num(x) << "\" y=\"" << num(y + 22) << "\">epoch " << first
    << "</text>\n<text x=\"" << num(x + w) << "\" y=\"" << num(y + 22)
    << "\" text-anchor=\"end\">epoch " << last << "</text>\n";
}

}  // namespace detail

/// Information plane of a (mean) trajectory, with an optional zoom panel.
inline std::string plot_plane(const InfoTrajectory& t, const PlaneStyle& style = {}) {
  if (t.num_layers() == 0 || t.num_epochs() == 0)
    throw std::invalid_argument("plot_plane: empty trajectory");
  if (!(style.x_max > 0.0 && std::isfinite(style.x_max) && style.y_max > 0.0 &&
        std::isfinite(style.y_max)))
    throw std::invalid_argument("plot_plane: axis ranges must be positive and finite");
  double mx = style.x_max, my = style.y_max;
  for (const auto& l : t.layers)
    for (const auto& p : l) {
      if (!std::isfinite(p.i_xt) || !std::isfinite(p.i_ty))
        throw std::invalid_argument("plot_plane: non-finite point");
      mx = std::max(mx, p.i_xt);
      my = std::max(my, p.i_ty);
    }
  // Axes grow by 5% past the largest point when a point exceeds the default.
  if (mx > style.x_max) mx *= 1.05;
  if (my > style.y_max) my *= 1.05;
  const bool zoom = style.zoom.has_value();
  const double panel = 360, pad_l = 60, pad_t = 34, gap = 80;
  const double width = pad_l + panel + (zoom ? gap + panel : 0) + 150;
  const double height = pad_t + panel + 90;
  std::ostringstream s;
  s << detail::header(width, height, style.title);
  const detail::Frame main{pad_l, pad_t, panel, panel, {0.0, mx, 0.0, my}};
  detail::axes(s, main, "I(X;T) [bits]", "I(T;Y) [bits]");
  detail::plane_panel(s, t, main, "clip-main");
  double legend_x = pad_l + panel + 20;
  if (zoom) {
    const auto& z = *style.zoom;
    if (!(z.x1 > z.x0 && z.y1 > z.y0))
      throw std::invalid_argument("plot_plane: empty zoom window");
    const detail::Frame zf{pad_l + panel + gap, pad_t, panel, panel, z};
    s << "<rect x=\"" << num(main.sx(z.x0)) << "\" y=\"" << num(main.sy(z.y1))
      << "\" width=\"" << num(main.sx(z.x1) - main.sx(z.x0)) << "\" height=\""
      << num(main.sy(z.y0) - main.sy(z.y1))
      << "\" fill=\"none\" stroke=\"#555\" stroke-dasharray=\"3,2\"/>\n";
    detail::axes(s, zf, "I(X;T) [bits]", "I(T;Y) [bits]");
    detail::plane_panel(s, t, zf, "clip-zoom");
    legend_x = pad_l + 2 * panel + gap + 20;
  }
  // Legend: marker shape per layer, colour bar for epochs.
  for (std::size_t k = 0; k < t.num_layers(); ++k) {
    const double y = pad_t + 10 + 16 * static_cast<double>(k);
    detail::marker(s, k, legend_x + 5, y, "#444");
    s << "<text x=\"" << num(legend_x + 14) << "\" y=\"" << num(y + 4) << "\">layer " << k + 1
      << "</text>\n";
  }
  detail::color_bar(s, legend_x, pad_t + 20 + 16 * static_cast<double>(t.num_layers()), 110,
                    t.layers[0].front().epoch, t.layers[0].back().epoch);
  s << "</svg>\n";
  return s.str();
}

enum class CurveKind { accuracy, mi_vs_epoch };

/// Accuracy curves (train solid, test dashed, shaded 95% CI) or MI against
/// epoch (one panel each for I(X;T) and I(T;Y), shaded +/- one standard
/// deviation across repetitions).
inline std::string plot_curves(const Aggregate& agg, CurveKind kind,
                               const std::string& title = {}) {
  if (agg.metrics.empty() || agg.stats.empty())
    throw std::invalid_argument("plot_curves: empty input");
  const double x0 = static_cast<double>(agg.metrics.front().epoch);
  double x1 = static_cast<double>(agg.metrics.back().epoch);
  if (x1 <= x0) x1 = x0 + 1;
  const double panel_w = 420, panel_h = 260, pad_l = 60, pad_t = 34, gap = 80;
  std::ostringstream s;
  auto band = [&](const detail::Frame& f, const std::vector<double>& xs,
                  const std::vector<double>& lo, const std::vector<double>& hi,
                  const std::string& col) {
    s << "<polygon fill=\"" << col << "\" fill-opacity=\"0.2\" stroke=\"none\" points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i)
      s << (i ? " " : "") << num(f.sx(xs[i])) << ',' << num(f.sy(hi[i]));
    for (std::size_t i = xs.size(); i-- > 0;)
      s << ' ' << num(f.sx(xs[i])) << ',' << num(f.sy(lo[i]));
    s << "\"/>\n";
  };
  auto line = [&](const detail::Frame& f, const std::vector<double>& xs,
                  const std::vector<double>& ys, const std::string& col, bool dashed) {
    s << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\""
      << (dashed ? " stroke-dasharray=\"5,3\"" : "") << " points=\"";
    for (std::size_t i = 0; i < xs.size(); ++i)
      s << (i ? " " : "") << num(f.sx(xs[i])) << ',' << num(f.sy(ys[i]));
    s << "\"/>\n";
  };
  std::vector<double> xs;
  for (const auto& m : agg.metrics) xs.push_back(static_cast<double>(m.epoch));
  if (kind == CurveKind::accuracy) {
    const double width = pad_l + panel_w + 140, height = pad_t + panel_h + 60;
    s << detail::header(width, height, title);
    const detail::Frame f{pad_l, pad_t, panel_w, panel_h, {x0, x1, 0.0, 1.0}};
    detail::axes(s, f, "epoch", "accuracy");
    std::vector<double> tr, te, trl, trh, tel, teh;
    for (const auto& m : agg.metrics) {
      tr.push_back(m.mean_train_acc);
      te.push_back(m.mean_test_acc);
      trl.push_back(std::max(0.0, m.mean_train_acc - m.ci_train_acc));
      trh.push_back(std::min(1.0, m.mean_train_acc + m.ci_train_acc));
      tel.push_back(std::max(0.0, m.mean_test_acc - m.ci_test_acc));
      teh.push_back(std::min(1.0, m.mean_test_acc + m.ci_test_acc));
    }
    band(f, xs, trl, trh, "#1f77b4");
    band(f, xs, tel, teh, "#d62728");
    line(f, xs, tr, "#1f77b4", false);
    line(f, xs, te, "#d62728", true);
    const double lx = pad_l + panel_w + 20;
    s << "<line x1=\"" << num(lx) << "\" y1=\"" << num(pad_t + 10) << "\" x2=\"" << num(lx + 24)
      << "\" y2=\"" << num(pad_t + 10) << "\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n"
      << "<text x=\"" << num(lx + 30) << "\" y=\"" << num(pad_t + 14) << "\">train</text>\n"
      << "<line x1=\"" << num(lx) << "\" y1=\"" << num(pad_t + 28) << "\" x2=\"" << num(lx + 24)
      << "\" y2=\"" << num(pad_t + 28)
      << "\" stroke=\"#d62728\" stroke-width=\"1.5\" stroke-dasharray=\"5,3\"/>\n"
      << "<text x=\"" << num(lx + 30) << "\" y=\"" << num(pad_t + 32) << "\">test</text>\n"
      << "<text x=\"" << num(lx) << "\" y=\"" << num(pad_t + 50)
      << "\">shaded: 95% CI</text>\n";
  } else {
    const double width = pad_l + 2 * panel_w + gap + 120, height = pad_t + panel_h + 60;
    s << detail::header(width, height, title);
    for (int which = 0; which < 2; ++which) {
      double ymax = 0.0;
      for (const auto& layer : agg.stats)
        for (const auto& p : layer) {
          const double m = which == 0 ? p.mean_i_xt : p.mean_i_ty;
          const double v = which == 0 ? p.var_i_xt : p.var_i_ty;
          ymax = std::max(ymax, m + std::sqrt(v));
        }
      if (ymax <= 0.0) ymax = 1.0;
      const detail::Frame f{pad_l + which * (panel_w + gap), pad_t, panel_w, panel_h,
                            {x0, x1, 0.0, ymax * 1.05}};
      detail::axes(s, f, "epoch", which == 0 ? "I(X;T) [bits]" : "I(T;Y) [bits]");
      for (std::size_t k = 0; k < agg.stats.size(); ++k) {
        std::vector<double> m, lo, hi;
        for (const auto& p : agg.stats[k]) {
          const double mean = which == 0 ? p.mean_i_xt : p.mean_i_ty;
          const double sd = std::sqrt(which == 0 ? p.var_i_xt : p.var_i_ty);
          m.push_back(mean);
          lo.push_back(std::max(0.0, mean - sd));
          hi.push_back(mean + sd);
        }
        band(f, xs, lo, hi, layer_color(k));
        line(f, xs, m, layer_color(k), false);
      }
    }
    const double lx = pad_l + 2 * panel_w + gap + 20;
    for (std::size_t k = 0; k < agg.stats.size(); ++k) {
      const double y = pad_t + 10 + 16 * static_cast<double>(k);
      s << "<line x1=\"" << num(lx) << "\" y1=\"" << num(y) << "\" x2=\"" << num(lx + 20)
        << "\" y2=\"" << num(y) << "\" stroke=\"" << layer_color(k)
        << "\" stroke-width=\"1.5\"/>\n<text x=\"" << num(lx + 26) << "\" y=\"" << num(y + 4)
        << "\">layer " << k + 1 << "</text>\n";
    }
    s << "<text x=\"" << num(lx) << "\" y=\"" << num(pad_t + 20 + 16 * static_cast<double>(agg.stats.size()))
      << "\">shaded: +/- 1 sd</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

/// Default plane style for a run: axes at log2 |D| and H(Y), zoom on the
/// upper right area.
inline PlaneStyle default_plane_style(const RunArtifacts& a, const std::string& title) {
  PlaneStyle st;
  st.x_max = std::log2(static_cast<double>(std::max<std::size_t>(a.dataset_size, 2)));
  st.y_max = a.label_entropy > 0.0 ? a.label_entropy : 1.0;
  st.zoom = Window{0.8 * st.x_max, st.x_max * 1.005, 0.8 * st.y_max, st.y_max * 1.005};
  st.title = title;
  return st;
}

/// Writes plane.svg, mi_curves.svg, accuracy.svg and median_plane.svg (and
/// binned_plane.svg in "both" mode); returns the files written.
inline std::vector<std::filesystem::path> write_figures(const RunArtifacts& a,
                                                        const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const std::string name = a.config.name.empty() ? "run" : a.config.name;
  std::vector<std::filesystem::path> files;
  auto put = [&](const std::string& file, const std::string& svg) {
    files.push_back(dir / file);
    write_text(files.back(), svg);
  };
  put("plane.svg", plot_plane(a.aggregate.mean,
                              default_plane_style(a, name + ": mean information plane (" +
                                                         a.estimator + ")")));
  put("mi_curves.svg", plot_curves(a.aggregate, CurveKind::mi_vs_epoch,
                                   name + ": MI per layer against epoch"));
  put("accuracy.svg", plot_curves(a.aggregate, CurveKind::accuracy, name + ": accuracy"));
  put("median_plane.svg",
      plot_plane(a.runs.at(a.aggregate.median_index),
                 default_plane_style(a, name + ": median deviating repetition (run " +
                                            std::to_string(a.aggregate.median_run_id) + ")")));
  if (a.binned_aggregate)
    put("binned_plane.svg",
        plot_plane(a.binned_aggregate->mean,
                   default_plane_style(a, name + ": mean information plane (binned)")));
  return files;
}

}  // namespace ibq

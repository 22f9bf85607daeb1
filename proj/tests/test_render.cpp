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

#include <filesystem>
#include <random>
#include <regex>
#include <sstream>

#include <gtest/gtest.h>

#include "ibq/render.hpp"

namespace ibq {
namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ibq_render_" + name);
  fs::remove_all(dir);
  return dir;
}

std::size_t count(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto p = s.find(needle); p != std::string::npos; p = s.find(needle, p + 1)) ++n;
  return n;
}

std::size_t data_rows(const std::string& csv) {
  return static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) - 1;
}

InfoTrajectory random_trajectory(int run_id, std::size_t layers, std::size_t epochs,
                                 std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 12.0);
  InfoTrajectory t;
  t.run_id = run_id;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<MiPair> mi;
    for (std::size_t k = 0; k < layers; ++k) mi.push_back({u(rng), u(rng) / 12.0});
    t.append(static_cast<std::int64_t>(e + 1), mi,
             {0, u(rng) / 12.0, u(rng) / 12.0, u(rng) / 7.0});
  }
  return t;
}

RunArtifacts fake_artifacts(std::size_t reps, std::size_t layers, std::size_t epochs) {
  RunArtifacts a;
  a.config = preset("SYN-TANH-8BIT");
  a.config.master_seed = 4242;
  a.estimator = "exact";
  a.dataset_size = 4096;
  a.num_classes = 2;
  a.label_entropy = 1.0;
  for (std::size_t r = 0; r < reps; ++r) {
    a.runs.push_back(random_trajectory(static_cast<int>(r), layers, epochs, r + 1));
    a.runs.back().metadata = {{"seed", std::to_string(100 + r)}};
    a.seeds.push_back(100 + r);
  }
  a.retries.push_back({1, 0, 77, 0.5, "final test accuracy 0.5 below 0.55"});
  a.aggregate = aggregate_runs(a.runs);
  return a;
}

TEST(Csv, RowCount) {
  const auto t = random_trajectory(0, 6, 2, 1);
  const auto csv = run_csv(t);
  EXPECT_EQ(data_rows(csv), 12u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "run_id,epoch,layer_index,i_xt_bits,i_ty_bits,train_acc,test_acc,loss");
  EXPECT_EQ(csv.find('\r'), std::string::npos);
  EXPECT_EQ(csv.find(';'), std::string::npos);
}

TEST(Csv, RoundTripIsExact) {
  const auto t = random_trajectory(7, 4, 25, 99);
  std::istringstream in(run_csv(t));
  const auto back = parse_run_csv(in);
  EXPECT_EQ(back.run_id, 7);
  ASSERT_EQ(back.num_layers(), 4u);
  ASSERT_EQ(back.num_epochs(), 25u);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t e = 0; e < 25; ++e) {
      EXPECT_EQ(back.layers[k][e].epoch, t.layers[k][e].epoch);
      EXPECT_EQ(back.layers[k][e].i_xt, t.layers[k][e].i_xt);
      EXPECT_EQ(back.layers[k][e].i_ty, t.layers[k][e].i_ty);
    }
  for (std::size_t e = 0; e < 25; ++e) {
    EXPECT_EQ(back.metrics[e].train_acc, t.metrics[e].train_acc);
    EXPECT_EQ(back.metrics[e].test_acc, t.metrics[e].test_acc);
    EXPECT_EQ(back.metrics[e].loss, t.metrics[e].loss);
  }
}

TEST(Csv, ExtremeValuesRoundTrip) {
  InfoTrajectory t;
  const std::vector<MiPair> mi = {{1e-300, 5e-324}, {0.1 + 0.2, 1.0 / 3.0}};
  t.append(1, mi, {1, 0.0, 1.0, 123456789.123456789});
  std::istringstream in(run_csv(t));
  const auto back = parse_run_csv(in);
  EXPECT_EQ(back.layers[0][0].i_xt, 1e-300);
  EXPECT_EQ(back.layers[0][0].i_ty, 5e-324);
  EXPECT_EQ(back.layers[1][0].i_xt, 0.1 + 0.2);
  EXPECT_EQ(back.metrics[0].loss, 123456789.123456789);
}

TEST(Csv, RejectsMalformedInput) {
  std::istringstream no_header("0,1,0,1,1,1,1,1\n");
  EXPECT_THROW(parse_run_csv(no_header), IoError);
  std::istringstream short_row(std::string(kRunCsvHeader) + "\n0,1,0,1\n");
  EXPECT_THROW(parse_run_csv(short_row), IoError);
  std::istringstream bad_number(std::string(kRunCsvHeader) + "\n0,1,0,x,1,1,1,1\n");
  EXPECT_THROW(parse_run_csv(bad_number), IoError);
  std::istringstream skipped_layer(std::string(kRunCsvHeader) + "\n0,1,1,1,1,1,1,1\n");
  EXPECT_THROW(parse_run_csv(skipped_layer), IoError);
}

TEST(Csv, AggregateRows) {
  const auto a = fake_artifacts(3, 5, 4);
  const auto csv = aggregate_csv(a.aggregate);
  EXPECT_EQ(data_rows(csv), 20u);
  EXPECT_NE(csv.find("mean_i_xt_bits,var_i_xt"), std::string::npos);
  EXPECT_NE(csv.find("ci95_test_acc"), std::string::npos);
}

TEST(Logs, WriteAndReadBack) {
  const auto dir = fresh_dir("logs");
  const auto a = fake_artifacts(3, 6, 5);
  const auto files = write_logs(a, dir);
  EXPECT_EQ(files.size(), 5u);
  EXPECT_TRUE(fs::exists(dir / "rep_000.csv"));
  EXPECT_TRUE(fs::exists(dir / "rep_002.csv"));
  EXPECT_TRUE(fs::exists(dir / "aggregate.csv"));

  const auto meta = nlohmann::json::parse(read_text(dir / "metadata.json"));
  EXPECT_EQ(meta.at("preset"), "SYN-TANH-8BIT");
  EXPECT_EQ(meta.at("master_seed"), 4242u);
  EXPECT_EQ(meta.at("config").at("master_seed"), 4242u);
  EXPECT_EQ(meta.at("retries").size(), 1u);
  EXPECT_EQ(meta.at("retries")[0].at("final_test_accuracy"), 0.5);
  EXPECT_EQ(meta.at("split"), "independent per repetition");

  const auto back = read_logs(dir);
  EXPECT_EQ(back.config, a.config);
  EXPECT_EQ(back.seeds, a.seeds);
  EXPECT_EQ(back.estimator, "exact");
  EXPECT_EQ(back.label_entropy, 1.0);
  ASSERT_EQ(back.runs.size(), 3u);
  EXPECT_EQ(back.runs[1].metadata, a.runs[1].metadata);
  EXPECT_EQ(back.aggregate.distances, a.aggregate.distances);
  EXPECT_EQ(back.aggregate.median_run_id, a.aggregate.median_run_id);
  EXPECT_EQ(aggregate_csv(back.aggregate), aggregate_csv(a.aggregate));
  EXPECT_EQ(back.retries.size(), 1u);
  EXPECT_EQ(back.retries[0].reason, a.retries[0].reason);
}

TEST(Logs, FiguresFromLogsMatchOriginals) {
  const auto dir = fresh_dir("figs");
  const auto a = fake_artifacts(2, 3, 6);
  write_logs(a, dir / "logs");
  const auto first = write_figures(a, dir / "a");
  const auto second = write_figures(read_logs(dir / "logs"), dir / "b");
  ASSERT_EQ(first.size(), second.size());
  for (std::size_t i = 0; i < first.size(); ++i)
    EXPECT_EQ(read_text(first[i]), read_text(second[i])) << first[i];
}

TEST(Logs, MissingDirectory) {
  EXPECT_THROW(read_logs(fresh_dir("missing")), IoError);
}

struct Marker {
  double x, y;
};

std::vector<Marker> circle_markers(const std::string& svg) {
  static const std::regex re(
      R"re(<circle class="marker" cx="([-0-9.]+)" cy="([-0-9.]+)")re");
  std::vector<Marker> out;
  for (std::sregex_iterator it(svg.begin(), svg.end(), re), end; it != end; ++it)
    out.push_back({std::stod((*it)[1]), std::stod((*it)[2])});
  return out;
}

// Main axis box of plot_plane: left 60, top 34, 360 x 360.
bool inside_main_box(const Marker& m) {
  return m.x >= 60.0 && m.x <= 420.0 && m.y >= 34.0 && m.y <= 394.0;
}

TEST(Plane, SinglePointInsideBox) {
  InfoTrajectory t;
  const std::vector<MiPair> mi = {{6.0, 0.5}};
  t.append(1, mi, {});
  const auto svg = plot_plane(t, {});
  const auto m = circle_markers(svg);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_TRUE(inside_main_box(m[0]));
  EXPECT_NEAR(m[0].x, 60.0 + 360.0 * 6.0 / 12.0, 0.01);
  EXPECT_NEAR(m[0].y, 34.0 + 360.0 * 0.5, 0.01);
}

TEST(Plane, AxesExpandToFitPoints) {
  InfoTrajectory t;
  const std::vector<MiPair> a = {{15.0, 1.4}}, b = {{3.0, 0.2}};
  t.append(1, a, {});
  t.append(2, b, {});
  PlaneStyle style;
  style.x_max = 12.0;
  style.y_max = 1.0;
  const auto m = circle_markers(plot_plane(t, style));
  ASSERT_EQ(m.size(), 2u);
  for (const auto& p : m) EXPECT_TRUE(inside_main_box(p)) << p.x << ',' << p.y;
}

TEST(Plane, ZoomPanelShowsOnlyItsWindow) {
  InfoTrajectory t;
  const std::vector<MiPair> a = {{11.9, 0.99}}, b = {{3.0, 0.2}};
  t.append(1, a, {});
  t.append(2, b, {});
  PlaneStyle style;
  style.zoom = Window{10.0, 12.0, 0.8, 1.0};
  const auto svg = plot_plane(t, style);
  EXPECT_EQ(circle_markers(svg).size(), 3u);
  EXPECT_EQ(count(svg, "clip-zoom"), 2u);
}

TEST(Plane, DeterministicAndEscaped) {
  const auto t = random_trajectory(0, 6, 40, 3);
  PlaneStyle style;
  style.title = "a<b & \"c\"";
  const auto a = plot_plane(t, style), b = plot_plane(t, style);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.find("a&lt;b &amp; &quot;c&quot;"), std::string::npos);
  EXPECT_EQ(count(a, "class=\"marker\""), 240u);
  EXPECT_NE(a.find("epoch 1"), std::string::npos);
  EXPECT_NE(a.find("epoch 40"), std::string::npos);
  EXPECT_NE(a.find("layer 6"), std::string::npos);
}

TEST(Plane, Errors) {
  EXPECT_THROW(plot_plane(InfoTrajectory{}, {}), std::invalid_argument);
  InfoTrajectory t;
  const std::vector<MiPair> mi = {{1.0, 0.5}};
  t.append(1, mi, {});
  PlaneStyle bad;
  bad.x_max = 0.0;
  EXPECT_THROW(plot_plane(t, bad), std::invalid_argument);
  bad = {};
  bad.y_max = std::numeric_limits<double>::infinity();
  EXPECT_THROW(plot_plane(t, bad), std::invalid_argument);
  bad = {};
  bad.zoom = Window{1.0, 1.0, 0.0, 1.0};
  EXPECT_THROW(plot_plane(t, bad), std::invalid_argument);
}

TEST(Colors, ViridisEndpoints) {
  EXPECT_EQ(hex(epoch_color(0.0)), "#440154");
  EXPECT_EQ(hex(epoch_color(1.0)), "#fde725");
  EXPECT_EQ(hex(epoch_color(0.5)), "#21918c");
  EXPECT_EQ(hex(epoch_color(-3.0)), "#440154");
  // Lightness grows along the ramp.
  double prev = -1.0;
  for (int i = 0; i <= 20; ++i) {
    const auto c = epoch_color(i / 20.0);
    const double luma = 0.2126 * c.r + 0.7152 * c.g + 0.0722 * c.b;
    EXPECT_GT(luma, prev);
    prev = luma;
  }
}

std::vector<std::vector<Marker>> polyline_points(const std::string& svg) {
  static const std::regex re(R"re(<polyline[^>]*points="([^"]*)")re");
  std::vector<std::vector<Marker>> out;
  for (std::sregex_iterator it(svg.begin(), svg.end(), re), end; it != end; ++it) {
    std::vector<Marker> pts;
    std::istringstream in((*it)[1].str());
    std::string tok;
    while (in >> tok) {
      const auto comma = tok.find(',');
      pts.push_back({std::stod(tok.substr(0, comma)), std::stod(tok.substr(comma + 1))});
    }
    out.push_back(pts);
  }
  return out;
}

std::vector<std::vector<Marker>> band_points(const std::string& svg) {
  static const std::regex re(R"re(<polygon fill="[^"]*" fill-opacity="0.2"[^>]*points="([^"]*)")re");
  std::vector<std::vector<Marker>> out;
  for (std::sregex_iterator it(svg.begin(), svg.end(), re), end; it != end; ++it) {
    std::vector<Marker> pts;
    std::istringstream in((*it)[1].str());
    std::string tok;
    while (in >> tok) {
      const auto comma = tok.find(',');
      pts.push_back({std::stod(tok.substr(0, comma)), std::stod(tok.substr(comma + 1))});
    }
    out.push_back(pts);
  }
  return out;
}

TEST(Curves, ConstantAccuracyIsFlatWithZeroBand) {
  std::vector<InfoTrajectory> runs(3);
  for (int r = 0; r < 3; ++r) {
    runs[static_cast<std::size_t>(r)].run_id = r;
    for (int e = 1; e <= 10; ++e) {
      const std::vector<MiPair> mi = {{1.0 + r, 0.5}};
      runs[static_cast<std::size_t>(r)].append(e, mi, {e, 0.5, 0.5, 0.7});
    }
  }
  const auto svg = plot_curves(aggregate_runs(runs), CurveKind::accuracy);
  // Accuracy panel: top 34, height 260, y range [0, 1].
  const double y_half = 34.0 + 260.0 * 0.5;
  const auto lines = polyline_points(svg);
  ASSERT_EQ(lines.size(), 2u);
  for (const auto& l : lines)
    for (const auto& p : l) EXPECT_NEAR(p.y, y_half, 1e-9);
  const auto bands = band_points(svg);
  ASSERT_EQ(bands.size(), 2u);
  for (const auto& b : bands)
    for (const auto& p : b) EXPECT_NEAR(p.y, y_half, 1e-9);
  EXPECT_NE(svg.find("stroke-dasharray=\"5,3\""), std::string::npos);
  EXPECT_NE(svg.find(">test<"), std::string::npos);
  EXPECT_NE(svg.find(">train<"), std::string::npos);
}

TEST(Curves, SingleRepetitionBandCollapses) {
  const std::vector<InfoTrajectory> runs = {random_trajectory(0, 3, 12, 5)};
  const auto agg = aggregate_runs(runs);
  for (auto kind : {CurveKind::accuracy, CurveKind::mi_vs_epoch}) {
    const auto svg = plot_curves(agg, kind);
    const auto lines = polyline_points(svg);
    const auto bands = band_points(svg);
    ASSERT_EQ(lines.size(), bands.size());
    for (std::size_t i = 0; i < lines.size(); ++i) {
      const auto& l = lines[i];
      const auto& b = bands[i];
      ASSERT_EQ(b.size(), 2 * l.size());
      for (std::size_t j = 0; j < l.size(); ++j) {
        EXPECT_NEAR(b[j].y, l[j].y, 1e-9);
        EXPECT_NEAR(b[b.size() - 1 - j].y, l[j].y, 1e-9);
      }
    }
  }
}

TEST(Curves, DeterministicAndRejectsEmpty) {
  const auto a = fake_artifacts(4, 5, 30);
  EXPECT_EQ(plot_curves(a.aggregate, CurveKind::mi_vs_epoch),
            plot_curves(a.aggregate, CurveKind::mi_vs_epoch));
  EXPECT_EQ(count(plot_curves(a.aggregate, CurveKind::mi_vs_epoch), "<polyline"), 10u);
  EXPECT_THROW(plot_curves(Aggregate{}, CurveKind::accuracy), std::invalid_argument);
}

}  // namespace
}  // namespace ibq

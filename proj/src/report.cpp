/*
 * Copyright 2026 The FedAD Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *      http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#include "fedad/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "fedad/errors.hpp"
#include "fedad/io.hpp"

namespace fedad {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kWidth = 640, kHeight = 400, kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

std::string color(std::size_t i) { return kPalette[i % std::size(kPalette)]; }

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

std::string num(double v) {
  std::ostringstream o;
  o << std::setprecision(4) << v;
  return o.str();
}

struct Frame {
  double x0, x1, y0, y1;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const { return kHeight - kBottom - (y - y0) / (y1 - y0) * (kHeight - kTop - kBottom); }
};

void axes(std::ostringstream& svg, const Frame& f, const std::string& title, const std::string& xl,
          const std::string& yl, bool x_ticks) {
  svg << "<text x='" << kWidth / 2 << "' y='22' text-anchor='middle' font-size='15'>" << escape(title) << "</text>\n";
  svg << "<line x1='" << kLeft << "' y1='" << kHeight - kBottom << "' x2='" << kWidth - kRight << "' y2='"
      << kHeight - kBottom << "' stroke='black'/>\n";
  svg << "<line x1='" << kLeft << "' y1='" << kTop << "' x2='" << kLeft << "' y2='" << kHeight - kBottom
      << "' stroke='black'/>\n";
  for (int i = 0; i <= 4; ++i) {
    double y = f.y0 + (f.y1 - f.y0) * i / 4.0;
    svg << "<text x='" << kLeft - 6 << "' y='" << f.py(y) + 4 << "' text-anchor='end' font-size='11'>" << num(y)
        << "</text>\n";
    if (x_ticks) {
      double x = f.x0 + (f.x1 - f.x0) * i / 4.0;
      svg << "<text x='" << f.px(x) << "' y='" << kHeight - kBottom + 16 << "' text-anchor='middle' font-size='11'>"
          << num(x) << "</text>\n";
    }
  }
  svg << "<text x='" << (kLeft + kWidth - kRight) / 2 << "' y='" << kHeight - 12
      << "' text-anchor='middle' font-size='12'>" << escape(xl) << "</text>\n";
  svg << "<text x='16' y='" << (kTop + kHeight - kBottom) / 2 << "' transform='rotate(-90 16 "
      << (kTop + kHeight - kBottom) / 2 << ")' text-anchor='middle' font-size='12'>" << escape(yl) << "</text>\n";
}

void legend(std::ostringstream& svg, const std::vector<Series>& series) {
  for (std::size_t i = 0; i < series.size(); ++i) {
    double y = kTop + 10 + 18.0 * static_cast<double>(i);
    svg << "<rect x='" << kWidth - kRight + 12 << "' y='" << y - 9 << "' width='12' height='12' fill='" << color(i)
        << "'/>\n<text x='" << kWidth - kRight + 30 << "' y='" << y + 1 << "' font-size='12'>"
        << escape(series[i].name) << "</text>\n";
  }
}

std::pair<double, double> padded(double lo, double hi) {
  if (!std::isfinite(lo) || !std::isfinite(hi)) return {0.0, 1.0};
  if (hi - lo < 1e-12) return {lo - 0.5, hi + 0.5};
  double pad = 0.05 * (hi - lo);
  return {lo - pad, hi + pad};
}

std::string open_svg(double w, double h) {
  std::ostringstream o;
  o << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "' viewBox='0 0 " << w << ' '
    << h << "' font-family='sans-serif'>\n<rect width='100%' height='100%' fill='white'/>\n";
  return o.str();
}

}  // namespace

std::string svg_line_chart(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                           const std::string& y_label) {
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      xmin = std::min(xmin, x), xmax = std::max(xmax, x);
      ymin = std::min(ymin, y), ymax = std::max(ymax, y);
    }
  auto [y0, y1] = padded(ymin, ymax);
  auto [x0, x1] = padded(xmin, xmax);
  Frame f{x0, x1, y0, y1};
  std::ostringstream svg;
  svg << open_svg(kWidth, kHeight);
  axes(svg, f, title, x_label, y_label, true);
  for (std::size_t i = 0; i < series.size(); ++i) {
    svg << "<polyline fill='none' stroke-width='1.5' stroke='" << color(i) << "' points='";
    for (auto [x, y] : series[i].points) svg << f.px(x) << ',' << f.py(y) << ' ';
    svg << "'/>\n";
  }
  legend(svg, series);
  svg << "</svg>\n";
  return svg.str();
}

std::string svg_bar_chart(const std::vector<std::string>& categories, const std::vector<Series>& series,
                          const std::string& title, const std::string& y_label) {
  double ymax = 0.0, ymin = 0.0;
  for (const auto& s : series)
    for (auto [x, y] : s.points) ymax = std::max(ymax, y), ymin = std::min(ymin, y);
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  Frame f{0.0, static_cast<double>(std::max<std::size_t>(categories.size(), 1)), ymin, ymax * 1.05};
  std::ostringstream svg;
  svg << open_svg(kWidth, kHeight);
  axes(svg, f, title, "", y_label, false);
  const double group = (kWidth - kLeft - kRight) / f.x1;
  const double bar = group * 0.8 / static_cast<double>(std::max<std::size_t>(series.size(), 1));
  for (std::size_t c = 0; c < categories.size(); ++c) {
    svg << "<text x='" << f.px(static_cast<double>(c) + 0.5) << "' y='" << kHeight - kBottom + 16
        << "' text-anchor='middle' font-size='11'>" << escape(categories[c]) << "</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
      auto it = std::find_if(series[s].points.begin(), series[s].points.end(),
                             [&](auto p) { return static_cast<std::size_t>(p.first) == c; });
      if (it == series[s].points.end()) continue;
      double x = f.px(static_cast<double>(c)) + group * 0.1 + bar * static_cast<double>(s);
      double top = f.py(it->second), base = f.py(0.0);
      svg << "<rect x='" << x << "' y='" << std::min(top, base) << "' width='" << bar << "' height='"
          << std::abs(base - top) << "' fill='" << color(s) << "'/>\n";
    }
  }
  legend(svg, series);
  svg << "</svg>\n";
  return svg.str();
}

std::vector<std::array<double, 4>> threshold_contour(const torch::Tensor& map, double threshold) {
  if (map.dim() != 2) throw std::invalid_argument("threshold_contour: map must be 2D");
  auto m = map.to(torch::kFloat64).contiguous();
  const auto h = m.size(0), w = m.size(1);
  const double* p = m.data_ptr<double>();
  auto inside = [&](std::int64_t r, std::int64_t c) {
    return r >= 0 && r < h && c >= 0 && c < w && p[r * w + c] >= threshold;
  };
  std::vector<std::array<double, 4>> segments;
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) {
      if (!inside(r, c)) continue;
      auto x = static_cast<double>(c), y = static_cast<double>(r);
      if (!inside(r - 1, c)) segments.push_back({x, y, x + 1, y});
      if (!inside(r + 1, c)) segments.push_back({x, y + 1, x + 1, y + 1});
      if (!inside(r, c - 1)) segments.push_back({x, y, x, y + 1});
      if (!inside(r, c + 1)) segments.push_back({x + 1, y, x + 1, y + 1});
    }
  return segments;
}

std::string svg_attention_overlay(const torch::Tensor& image, const torch::Tensor& consensus,
                                  const torch::Tensor& diversity, double threshold, const std::string& title) {
  if (image.dim() != 2) throw std::invalid_argument("attention overlay: image must be H x W");
  const auto h = image.size(0), w = image.size(1);
  namespace F = torch::nn::functional;
  auto resample = [&](const torch::Tensor& m) {
    return F::interpolate(m.to(torch::kFloat32).view({1, 1, m.size(0), m.size(1)}),
                          F::InterpolateFuncOptions().size(std::vector<std::int64_t>{h, w}).mode(torch::kNearest))
        .view({h, w});
  };
  auto cons = resample(consensus), div = resample(diversity);
  auto img = image.to(torch::kFloat64);
  double lo = img.min().item<double>(), hi = img.max().item<double>();
  const double cell = 16.0;
  std::ostringstream svg;
  svg << open_svg(static_cast<double>(w) * cell, static_cast<double>(h) * cell + 24);
  svg << "<text x='4' y='16' font-size='13'>" << escape(title) << "</text>\n<g transform='translate(0,24)'>\n";
  auto acc = img.accessor<double, 2>();
  auto cacc = cons.accessor<float, 2>();
  for (std::int64_t r = 0; r < h; ++r)
    for (std::int64_t c = 0; c < w; ++c) {
      int g = static_cast<int>(std::lround(255.0 * (acc[r][c] - lo) / std::max(hi - lo, 1e-12)));
      svg << "<rect x='" << static_cast<double>(c) * cell << "' y='" << static_cast<double>(r) * cell << "' width='"
          << cell << "' height='" << cell << "' fill='rgb(" << g << ',' << g << ',' << g << ")'/>";
      if (cacc[r][c] >= threshold)
        svg << "<rect x='" << static_cast<double>(c) * cell << "' y='" << static_cast<double>(r) * cell
            << "' width='" << cell << "' height='" << cell << "' fill='#d62728' fill-opacity='0.45'/>";
    }
  svg << '\n';
  for (const auto& s : threshold_contour(cons, threshold))
    svg << "<line x1='" << s[0] * cell << "' y1='" << s[1] * cell << "' x2='" << s[2] * cell << "' y2='" << s[3] * cell
        << "' stroke='#d62728' stroke-width='2'/>";
  for (const auto& s : threshold_contour(div, threshold))
    svg << "<line x1='" << s[0] * cell << "' y1='" << s[1] * cell << "' x2='" << s[2] * cell << "' y2='" << s[3] * cell
        << "' stroke='#1f77b4' stroke-width='2' stroke-dasharray='4,2'/>";
  svg << "\n</g>\n</svg>\n";
  return svg.str();
}

ReportFiles render_report(Federation& fed, std::int64_t overlay_samples) {
  const auto& out = fed.out_dir();
  if (!fs::exists(out / "report.json"))
    throw MissingArtifactError("report: no evaluation found in " + out.string() + "; run `evaluate` first");
  auto report = json::parse(io::read_file(out / "report.json"));
  ReportFiles files;
  auto emit = [&](const std::string& name, const std::string& svg) {
    auto path = out / "figures" / name;
    fs::create_directories(path.parent_path());
    io::atomic_write(path, svg);
    files.figures.push_back(path);
  };

  // loss curves of the central distillation
  auto training = json::parse(io::read_file(fed.central_dir() / "training.json"));
  std::vector<Series> losses{{"total", {}}, {"L_w", {}}, {"L_low", {}}, {"L_up", {}}};
  for (const auto& r : training.at("losses")) {
    auto step = r.at("step").get<double>();
    losses[0].points.emplace_back(step, r.at("total").get<double>());
    losses[1].points.emplace_back(step, r.at("L_w").get<double>());
    losses[2].points.emplace_back(step, r.at("L_low").get<double>());
    losses[3].points.emplace_back(step, r.at("L_up").get<double>());
  }
  emit("loss_curves.svg", svg_line_chart(losses, "Central distillation loss", "step", "loss"));

  // per-class metric bars
  auto central = report.at("central").get<MetricReport>();
  auto ensemble = report.at("ensemble").get<MetricReport>();
  auto standalone = report.at("standalone").get<std::vector<MetricReport>>();
  std::vector<std::string> categories;
  for (std::size_t c = 0; c < central.per_class.size(); ++c)
    categories.push_back(central.task == Task::kSegmentation ? std::to_string(c + 1) : std::to_string(c));
  auto bars = [&](const std::string& name, const MetricReport& r) {
    Series s{name, {}};
    for (std::size_t c = 0; c < r.per_class.size(); ++c)
      if (r.per_class[c]) s.points.emplace_back(static_cast<double>(c), *r.per_class[c]);
    return s;
  };
  std::vector<Series> per_class;
  for (std::size_t k = 0; k < standalone.size(); ++k)
    per_class.push_back(bars("Standalone " + node_id(static_cast<std::int64_t>(k)), standalone[k]));
  per_class.push_back(bars("Ensemble", ensemble));
  per_class.push_back(bars("FedAD", central));
  emit("per_class_" + central.metric + ".svg",
       svg_bar_chart(categories, per_class, "Per-class " + central.metric, central.metric));

  // ensemble attention overlays on public samples
  auto bundles = read_bundles(fed.central_dir() / "bundles.fadt");
  const auto& data = fed.public_data();
  const auto n = std::min<std::int64_t>(overlay_samples, data.size());
  for (std::int64_t i = 0; i < n; ++i) {
    auto image = data.samples[i][0];
    torch::Tensor lower, upper;
    std::string label;
    if (bundles.per_class()) {
      auto cls = bundles.z_hat[i].dim() == 1 ? bundles.z_hat[i].argmax().item<std::int64_t>()
                                             : bundles.z_hat[i].flatten(1).amax(1).argmax().item<std::int64_t>();
      lower = bundles.lower[i][cls];
      upper = bundles.upper[i][cls];
      label = "class " + std::to_string(cls);
    } else {
      // non-local matrices: attention received by each position (row means)
      auto side = static_cast<std::int64_t>(std::lround(std::sqrt(static_cast<double>(bundles.lower.size(1)))));
      auto norm = [&](const torch::Tensor& t) {
        auto v = t.mean(0).view({side, side});
        return v / v.max().clamp_min(1e-12);
      };
      lower = norm(bundles.lower[i]);
      upper = norm(bundles.upper[i]);
      label = "non-local";
    }
    emit("attention_sample" + std::to_string(i) + ".svg",
         svg_attention_overlay(image, lower, upper, 0.5,
                               "sample " + std::to_string(i) + ", " + label + ": consensus (filled) / diversity (dashed)"));
  }

  // comparison tables are produced by evaluate; list them
  for (const char* t : {"comparison.csv", "bandwidth.csv"})
    if (fs::exists(out / t)) files.tables.push_back(out / t);
  return files;
}

}  // namespace fedad

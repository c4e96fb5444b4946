#include "stepdpo/curves.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "stepdpo/error.hpp"

namespace stepdpo {

void MetricCurve::add(long step, std::vector<double> values) {
  if (values.size() != columns.size()) throw Error(ErrorKind::argument, "metric row arity mismatch");
  if (!rows.empty() && step <= rows.back().step) {
    throw Error(ErrorKind::argument, "metric curve steps must strictly increase");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw Error(ErrorKind::argument, "non-finite metric value at step " + std::to_string(step));
  }
  rows.push_back({step, std::move(values)});
}

std::vector<double> MetricCurve::column(const std::string& name) const {
  auto it = std::find(columns.begin(), columns.end(), name);
  if (it == columns.end()) throw Error(ErrorKind::argument, "no metric column \"" + name + "\"");
  const std::size_t c = static_cast<std::size_t>(it - columns.begin());
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(r.values[c]);
  return out;
}

std::vector<double> MetricCurve::steps() const {
  std::vector<double> out;
  for (const auto& r : rows) out.push_back(static_cast<double>(r.step));
  return out;
}

std::string format_number(double v) {
  if (v == 0.0) return "0";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string curve_to_csv(const MetricCurve& curve) {
  std::string out = "step";
  for (const auto& c : curve.columns) out += "," + c;
  out += '\n';
  for (const auto& r : curve.rows) {
    out += std::to_string(r.step);
    for (double v : r.values) out += "," + format_number(v);
    out += '\n';
  }
  return out;
}

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string fixed(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 2);
  return std::string(buf, res.ptr);
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string panels_to_svg(const std::string& title, const std::vector<Panel>& panels, const std::string& comment) {
  const double width = 640, panel_h = 160, margin_l = 60, margin_r = 20, margin_t = 30, gap = 40;
  const double height = margin_t + static_cast<double>(panels.size()) * (panel_h + gap);
  std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(width) + "\" height=\"" +
                    fixed(height) + "\" viewBox=\"0 0 " + fixed(width) + " " + fixed(height) + "\">\n";
  if (!comment.empty()) svg += "<!-- " + escape(comment) + " -->\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + fixed(margin_l) + "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" + escape(title) +
         "</text>\n";
  const double plot_w = width - margin_l - margin_r;
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const Panel& panel = panels[p];
    // Shared axes within a panel.
    double x_lo = 0, x_hi = 1, y_lo = 0, y_hi = 1;
    bool first = true;
    for (const auto& s : panel.series) {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (first) {
          x_lo = x_hi = s.x[i];
          y_lo = y_hi = s.y[i];
          first = false;
        }
        x_lo = std::min(x_lo, s.x[i]);
        x_hi = std::max(x_hi, s.x[i]);
        y_lo = std::min(y_lo, s.y[i]);
        y_hi = std::max(y_hi, s.y[i]);
      }
    }
    if (x_hi - x_lo < 1e-12) x_hi = x_lo + 1;
    if (y_hi - y_lo < 1e-12) {
      y_lo -= 0.5;
      y_hi += 0.5;
    }
    const double top = margin_t + static_cast<double>(p) * (panel_h + gap) + 10;
    svg += "<g>\n<rect x=\"" + fixed(margin_l) + "\" y=\"" + fixed(top) + "\" width=\"" + fixed(plot_w) +
           "\" height=\"" + fixed(panel_h) + "\" fill=\"none\" stroke=\"#999\"/>\n";
    svg += "<text x=\"" + fixed(margin_l + 4) + "\" y=\"" + fixed(top + 14) +
           "\" font-family=\"sans-serif\" font-size=\"12\">" + escape(panel.title) + " [" + format_number(y_lo) +
           ", " + format_number(y_hi) + "]</text>\n";
    for (std::size_t k = 0; k < panel.series.size(); ++k) {
      const auto& s = panel.series[k];
      const std::string color = kPalette[k % 6];
      svg += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        const double x = margin_l + (s.x[i] - x_lo) / (x_hi - x_lo) * plot_w;
        const double y = top + panel_h - (s.y[i] - y_lo) / (y_hi - y_lo) * panel_h;
        if (i) svg += ' ';
        svg += fixed(x) + "," + fixed(y);
      }
      svg += "\"/>\n";
      if (panel.series.size() > 1 || !s.label.empty()) {
        svg += "<text x=\"" + fixed(width - margin_r - 4) + "\" y=\"" + fixed(top + 14 + 14 * static_cast<double>(k)) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" + color + "\">" +
               escape(s.label) + "</text>\n";
      }
    }
    svg += "</g>\n";
  }
  svg += "</svg>\n";
  return svg;
}

std::string curve_to_svg(const MetricCurve& curve, const std::string& title, const std::string& comment) {
  std::vector<Panel> panels;
  const auto steps = curve.steps();
  for (const auto& c : curve.columns) panels.push_back({c, {{"", steps, curve.column(c)}}});
  return panels_to_svg(title, panels, comment);
}

void export_curves(const MetricCurve& curve, const std::string& path, const std::string& comment) {
  if (curve.empty()) throw Error(ErrorKind::argument, "export_curves: empty curve");
  const std::filesystem::path csv(path);
  std::filesystem::path svg = csv;
  svg.replace_extension(".svg");
  auto write = [](const std::filesystem::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write " + p.string());
    out << content;
    if (!out) throw Error(ErrorKind::io, "write failed for " + p.string());
  };
  write(csv, curve_to_csv(curve));
  write(svg, curve_to_svg(curve, csv.stem().string(), comment));
}

}  // namespace stepdpo

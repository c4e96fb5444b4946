#pragma once

#include <string>
#include <vector>

namespace stepdpo {

/// Per-step series of named scalar metrics. Steps strictly increase.
struct MetricCurve {
  std::vector<std::string> columns;  // metric names, excluding "step"
  struct Row {
    long step = 0;
    std::vector<double> values;
  };
  std::vector<Row> rows;

  explicit MetricCurve(std::vector<std::string> cols = {}) : columns(std::move(cols)) {}

  /// Throws Error(argument) on a non-increasing step, wrong arity or a
  /// non-finite value.
  void add(long step, std::vector<double> values);
  bool empty() const { return rows.empty(); }
  /// Column by name; throws Error(argument) for unknown names.
  std::vector<double> column(const std::string& name) const;
  std::vector<double> steps() const;
};

/// Shortest round-trip decimal form, '.' separator, locale independent.
std::string format_number(double v);

/// CSV: header "step,<columns...>", one line per row, LF endings.
std::string curve_to_csv(const MetricCurve& curve);
/// Static SVG line plot, one panel and <polyline> per metric column.
std::string curve_to_svg(const MetricCurve& curve, const std::string& title, const std::string& comment = {});

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct Panel {
  std::string title;
  std::vector<Series> series;
};

/// Stacked panels, several labelled polylines each, with an optional comment.
std::string panels_to_svg(const std::string& title, const std::vector<Panel>& panels,
                          const std::string& comment = {});

/// Writes `path` (CSV) and the same path with its extension replaced by
/// ".svg". Throws Error(argument) for an empty curve and Error(io) when
/// either file cannot be written.
void export_curves(const MetricCurve& curve, const std::string& path, const std::string& comment = {});

}  // namespace stepdpo

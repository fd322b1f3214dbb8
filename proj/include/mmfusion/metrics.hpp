#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mmfusion/datamodel.hpp"

namespace mmfusion {

/// counts[true][predicted]
using ConfusionMatrix = std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses>;
using ClassScores = std::array<double, kNumClasses>;

struct EvalReport {
  ConfusionMatrix confusion{};
  ClassScores per_class_f1{};
  std::optional<double> macro_f1;  // undefined for an empty evaluation
  std::optional<double> accuracy;
  std::uint64_t n_samples = 0;

  bool operator==(const EvalReport&) const = default;
};

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels);

/// F1_c = 2 TP / (2 TP + FP + FN); a class absent from both labels and
/// predictions scores 0.
ClassScores per_class_f1(const ConfusionMatrix& confusion);

/// Unweighted mean over all classes.
double macro_f1(std::span<const double> per_class);

/// trace / total, or nullopt when the matrix is empty.
std::optional<double> accuracy(const ConfusionMatrix& confusion);

EvalReport make_report(const ConfusionMatrix& confusion);
EvalReport evaluate_predictions(std::span<const int> preds, std::span<const int> labels);

/// One row of a comparison table: per-class F1, accuracy and Avg(F1) as
/// fractions in [0, 1].
struct TableRow {
  std::string name;
  ClassScores per_class_f1{};
  std::optional<double> accuracy;
  std::optional<double> macro_f1;
};

TableRow table_row(std::string name, const EvalReport& report);

enum class ReportStyle { Markdown, Csv };

/// Columns: name, the eight classes in index order, Acc, Avg(F1); values are
/// percentages with one decimal, undefined values print as "n/a".
std::string render_table(std::span<const TableRow> rows, ReportStyle style);
std::string render_report(const EvalReport& report, ReportStyle style, std::string_view name = "model");

/// Percentage with one decimal, e.g. 0.36125 -> "36.1".
std::string format_percent(std::optional<double> fraction);

nlohmann::json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

}  // namespace mmfusion

#include "mmfusion/metrics.hpp"

#include <cstdio>
#include <numeric>

#include "mmfusion/error.hpp"

namespace mmfusion {

using nlohmann::json;

ConfusionMatrix confusion_matrix(std::span<const int> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) {
    throw ValidationError("confusion_matrix: " + std::to_string(preds.size()) + " predictions for " +
                          std::to_string(labels.size()) + " labels");
  }
  ConfusionMatrix cm{};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], t = labels[i];
    if (p < 0 || p >= static_cast<int>(kNumClasses) || t < 0 || t >= static_cast<int>(kNumClasses)) {
      throw ValidationError("confusion_matrix: class out of range at position " + std::to_string(i));
    }
    ++cm[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return cm;
}

ClassScores per_class_f1(const ConfusionMatrix& cm) {
  ClassScores f1{};
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t o = 0; o < kNumClasses; ++o) {
      if (o == c) continue;
      fp += cm[o][c];
      fn += cm[c][o];
    }
    const std::uint64_t tp = cm[c][c];
    const std::uint64_t denom = 2 * tp + fp + fn;
    f1[c] = denom == 0 ? 0.0 : static_cast<double>(2 * tp) / static_cast<double>(denom);
  }
  return f1;
}

double macro_f1(std::span<const double> per_class) {
  if (per_class.empty()) throw ValidationError("macro_f1: no classes");
  return std::accumulate(per_class.begin(), per_class.end(), 0.0) / static_cast<double>(per_class.size());
}

std::optional<double> accuracy(const ConfusionMatrix& cm) {
  std::uint64_t total = 0, trace = 0;
  for (std::size_t t = 0; t < kNumClasses; ++t) {
    trace += cm[t][t];
    for (std::size_t p = 0; p < kNumClasses; ++p) total += cm[t][p];
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(trace) / static_cast<double>(total);
}

EvalReport make_report(const ConfusionMatrix& cm) {
  EvalReport r;
  r.confusion = cm;
  for (const auto& row : cm) r.n_samples += std::accumulate(row.begin(), row.end(), std::uint64_t{0});
  r.per_class_f1 = per_class_f1(cm);
  r.accuracy = accuracy(cm);
  if (r.n_samples > 0) r.macro_f1 = macro_f1(r.per_class_f1);
  return r;
}

EvalReport evaluate_predictions(std::span<const int> preds, std::span<const int> labels) {
  return make_report(confusion_matrix(preds, labels));
}

TableRow table_row(std::string name, const EvalReport& report) {
  return {std::move(name), report.per_class_f1, report.accuracy, report.macro_f1};
}

std::string format_percent(std::optional<double> fraction) {
  if (!fraction) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", *fraction * 100.0);
  return buf;
}

std::string render_table(std::span<const TableRow> rows, ReportStyle style) {
  std::vector<std::string> header{"Model"};
  for (auto name : kClassNames) header.emplace_back(name);
  header.emplace_back("Acc");
  header.emplace_back("Avg(F1)");

  std::vector<std::vector<std::string>> body;
  for (const auto& row : rows) {
    std::vector<std::string> cells{row.name};
    for (double f : row.per_class_f1) cells.push_back(format_percent(f));
    cells.push_back(format_percent(row.accuracy));
    cells.push_back(format_percent(row.macro_f1));
    body.push_back(std::move(cells));
  }

  std::string out;
  auto emit = [&](const std::vector<std::string>& cells) {
    if (style == ReportStyle::Csv) {
      for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ',';
        out += cells[i];
      }
    } else {
      out += '|';
      for (const auto& c : cells) out += " " + c + " |";
    }
    out += '\n';
  };
  emit(header);
  if (style == ReportStyle::Markdown) {
    out += "|---|";
    for (std::size_t i = 1; i < header.size(); ++i) out += "---:|";
    out += '\n';
  }
  for (const auto& cells : body) emit(cells);
  return out;
}

std::string render_report(const EvalReport& report, ReportStyle style, std::string_view name) {
  const TableRow row = table_row(std::string(name), report);
  return render_table(std::span(&row, 1), style);
}

json report_to_json(const EvalReport& r) {
  json j;
  j["confusion"] = r.confusion;
  j["per_class_f1"] = r.per_class_f1;
  j["macro_f1"] = r.macro_f1 ? json(*r.macro_f1) : json(nullptr);
  j["accuracy"] = r.accuracy ? json(*r.accuracy) : json(nullptr);
  j["n_samples"] = r.n_samples;
  j["classes"] = kClassNames;
  return j;
}

EvalReport report_from_json(const json& j) {
  try {
    ConfusionMatrix cm = j.at("confusion").get<ConfusionMatrix>();
    EvalReport r = make_report(cm);
    if (j.at("n_samples").get<std::uint64_t>() != r.n_samples) {
      throw ValidationError("report: n_samples does not match the confusion matrix");
    }
    return r;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed report: ") + e.what());
  }
}

}  // namespace mmfusion

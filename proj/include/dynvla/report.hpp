// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "dynvla/harness.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dynvla {

/// One surrogate/target cell in percent. `delta` overrides method - baseline when the
/// source printed its own rounded improvement.
struct TableCell {
  std::optional<double> baseline;
  std::optional<double> method;
  std::optional<double> delta;
};

struct ComparisonTable {
  std::string baseline_label = "Baseline";
  std::string method_label = "DynVLA";
  std::vector<std::string> surrogates;
  std::vector<std::string> targets;
  std::vector<std::vector<TableCell>> cells;  // [surrogate][target]
  /// Optional [surrogate][target] flags; flagged cells get a "(wb)" suffix.
  std::vector<std::vector<bool>> white_box;
};

/// "34.6 (+30.7)" for the method row, "3.9" for the baseline row, "-" when absent.
std::string format_baseline(const TableCell& cell);
std::string format_method(const TableCell& cell);

/// Two rows per surrogate (baseline, method) as a Markdown table.
std::string render_comparison_markdown(const ComparisonTable& table);
ComparisonTable table_from_comparison(const Comparison& c);
/// Reference cells bundled as a rendering fixture.
ComparisonTable load_reference_table(const std::filesystem::path& path);

std::string render_heatmap_svg(const ASRMatrix& m);
std::string render_curves_svg(const AblationResult& r);

/// Rates in percent with white-box cells suffixed "(wb)".
std::string render_matrix_markdown(const ASRMatrix& m);

nlohmann::json to_json(const ASRMatrix& m);
ASRMatrix matrix_from_json(const nlohmann::json& j);
/// Inverse of ASRMatrix::to_csv for ids and rates; metadata stays default.
ASRMatrix matrix_from_csv(const std::string& csv);
nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AblationResult& r);
AblationResult ablation_from_json(const nlohmann::json& j);
/// {"methods", "matrices", "per_run"} plus, for two or more methods, the deltas and the
/// sign test of the last method against the first.
nlohmann::json transfer_json(const std::vector<std::string>& methods, const std::vector<TransferResult>& results);

inline constexpr const char* kTransferFile = "transfer.json";
inline constexpr const char* kAblationFile = "ablation.json";

/// Renders every derived artifact (CSV, SVG, Markdown) of a run directory from its JSON
/// files. Returns the written file names.
std::vector<std::string> emit_reports(const std::filesystem::path& run_dir);

}  // namespace dynvla

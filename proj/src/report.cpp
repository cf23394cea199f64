// SPDX-License-Identifier: Apache-2.0
#include "dynvla/report.hpp"

#include "dynvla/config.hpp"
#include "dynvla/io.hpp"
#include "dynvla/util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace dynvla {

using nlohmann::json;

namespace {

std::string fixed1(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f", v);
  std::string s = buf;
  if (s == "-0.0") s = "0.0";
  return s;
}

std::string signed1(double v) {
  const std::string s = fixed1(v);
  return s.front() == '-' ? s : "+" + s;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string format_baseline(const TableCell& cell) { return cell.baseline ? fixed1(*cell.baseline) : "-"; }

std::string format_method(const TableCell& cell) {
  if (!cell.method) return "-";
  std::optional<double> delta = cell.delta;
  if (!delta && cell.baseline) delta = *cell.method - *cell.baseline;
  return delta ? fixed1(*cell.method) + " (" + signed1(*delta) + ")" : fixed1(*cell.method);
}

std::string render_comparison_markdown(const ComparisonTable& t) {
  std::ostringstream os;
  os << "| Surrogate | Attack |";
  for (const auto& target : t.targets) os << ' ' << target << " |";
  os << "\n|---|---|";
  for (size_t i = 0; i < t.targets.size(); ++i) os << "---|";
  os << '\n';
  for (size_t s = 0; s < t.surrogates.size(); ++s) {
    os << "| " << t.surrogates[s] << " | " << t.baseline_label << " |";
    auto wb = [&](size_t k) { return !t.white_box.empty() && t.white_box[s][k] ? " (wb)" : ""; };
    for (size_t k = 0; k < t.cells[s].size(); ++k) os << ' ' << format_baseline(t.cells[s][k]) << wb(k) << " |";
    os << "\n|  | " << t.method_label << " |";
    for (size_t k = 0; k < t.cells[s].size(); ++k) os << ' ' << format_method(t.cells[s][k]) << wb(k) << " |";
    os << '\n';
  }
  return os.str();
}

ComparisonTable table_from_comparison(const Comparison& c) {
  ComparisonTable t;
  t.baseline_label = c.methods.front();
  t.method_label = c.methods.back();
  const ASRMatrix& base = c.results.front().matrix;
  const ASRMatrix& method = c.results.back().matrix;
  t.surrogates = base.surrogates;
  t.targets = base.targets;
  for (size_t s = 0; s < base.surrogates.size(); ++s) {
    std::vector<TableCell> row;
    for (size_t tt = 0; tt < base.targets.size(); ++tt) {
      TableCell cell;
      cell.baseline = 100.0 * base.rate[s][tt];
      cell.method = 100.0 * method.rate[s][tt];
      row.push_back(cell);
    }
    t.cells.push_back(std::move(row));
  }
  return t;
}

ComparisonTable load_reference_table(const std::filesystem::path& path) {
  const json j = json::parse(read_text(path));
  ComparisonTable t;
  t.baseline_label = j.at("baseline_label").get<std::string>();
  t.method_label = j.at("method_label").get<std::string>();
  t.surrogates = j.at("surrogates").get<std::vector<std::string>>();
  t.targets = j.at("targets").get<std::vector<std::string>>();
  auto opt = [](const json& v) { return v.is_null() ? std::optional<double>{} : std::optional<double>(v.get<double>()); };
  for (size_t s = 0; s < t.surrogates.size(); ++s) {
    std::vector<TableCell> row;
    for (size_t k = 0; k < t.targets.size(); ++k)
      row.push_back({opt(j.at("baseline").at(s).at(k)), opt(j.at("method").at(s).at(k)), opt(j.at("delta").at(s).at(k))});
    t.cells.push_back(std::move(row));
  }
  return t;
}

std::string render_heatmap_svg(const ASRMatrix& m) {
  const int cell = 56, left = 110, top = 70;
  const int w = left + cell * static_cast<int>(m.targets.size()) + 20;
  const int h = top + cell * static_cast<int>(m.surrogates.size()) + 20;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << xml_escape(m.method) << " / " << xml_escape(m.task)
     << " / target \"" << xml_escape(m.target_text) << "\" (ASR %)</text>\n";
  for (size_t t = 0; t < m.targets.size(); ++t)
    os << "<text x=\"" << left + cell * static_cast<int>(t) + cell / 2 << "\" y=\"" << top - 8
       << "\" text-anchor=\"middle\">" << xml_escape(m.targets[t]) << "</text>\n";
  for (size_t s = 0; s < m.surrogates.size(); ++s) {
    const int y = top + cell * static_cast<int>(s);
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"end\">"
       << xml_escape(m.surrogates[s]) << "</text>\n";
    for (size_t t = 0; t < m.targets.size(); ++t) {
      const double r = std::clamp(m.rate[s][t], 0.0, 1.0);
      const int shade = static_cast<int>(std::lround(255 * (1 - r)));
      const int x = left + cell * static_cast<int>(t);
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(255,"
         << shade << ',' << shade << ")\" stroke=\"" << (m.white_box(s, t) ? "#000" : "#bbb") << "\" stroke-width=\""
         << (m.white_box(s, t) ? 2 : 1) << "\"/>\n";
      os << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 4 << "\" text-anchor=\"middle\">"
         << fixed1(100 * m.rate[s][t]) << "</text>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

std::string render_curves_svg(const AblationResult& r) {
  const int w = 520, h = 320, left = 60, right = 140, top = 30, bottom = 40;
  double xmin = 0, xmax = 1;
  bool first = true;
  for (const auto& c : r.curves)
    for (const auto& p : c.points) {
      if (first) {
        xmin = xmax = p.x;
        first = false;
      }
      xmin = std::min(xmin, p.x);
      xmax = std::max(xmax, p.x);
    }
  if (xmax == xmin) xmax = xmin + 1;
  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (w - left - right); };
  auto py = [&](double a) { return top + (1 - a) * (h - top - bottom); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << xml_escape(r.method) << ": sweep of "
     << xml_escape(r.parameter) << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << w - right << "\" y2=\"" << py(0)
     << "\" stroke=\"#000\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << py(0) << "\" x2=\"" << left << "\" y2=\"" << py(1)
     << "\" stroke=\"#000\"/>\n";
  for (int k = 0; k <= 4; ++k)
    os << "<text x=\"" << left - 6 << "\" y=\"" << py(k / 4.0) + 4 << "\" text-anchor=\"end\">" << 25 * k
       << "</text>\n";
  os << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 8 << "\" text-anchor=\"middle\">"
     << (r.parameter == "steps" ? "iteration" : xml_escape(r.parameter)) << "</text>\n";
  for (size_t i = 0; i < r.curves.size(); ++i) {
    const auto& c = r.curves[i];
    const char* color = palette[i % 7];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto& p : c.points) os << px(p.x) << ',' << py(p.asr) << ' ';
    os << "\"/>\n";
    for (const auto& p : c.points)
      os << "<circle cx=\"" << px(p.x) << "\" cy=\"" << py(p.asr) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    os << "<text x=\"" << w - right + 10 << "\" y=\"" << top + 16 * static_cast<int>(i) + 4 << "\" fill=\"" << color
       << "\">" << xml_escape(r.parameter) << '=' << xml_escape(c.value) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

json to_json(const ASRMatrix& m) {
  return json{{"surrogates", m.surrogates}, {"targets", m.targets}, {"rate", m.rate},
              {"samples", m.samples},       {"runs", m.runs},       {"method", m.method},
              {"task", m.task},             {"target_text", m.target_text}};
}

json to_json(const RunRecord& r) {
  json success = json::object();
  for (const auto& [target, bits] : r.success) {
    std::string s;
    for (bool b : bits) s += b ? '1' : '0';
    success[target] = s;
  }
  std::vector<std::string> hashes;
  for (auto h : r.adversarial_hashes) hashes.push_back(hex64(h));
  return json{{"config", json::parse(r.config_json)},
              {"zoo_manifest_hash", hex64(r.zoo_manifest_hash)},
              {"surrogate", r.surrogate},
              {"method", r.method},
              {"run_seed", r.run_seed},
              {"image_ids", r.image_ids},
              {"prompts", r.prompts},
              {"image_seeds", r.image_seeds},
              {"adversarial_hashes", hashes},
              {"success", success},
              {"seconds", r.seconds}};
}

RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.config_json = j.at("config").dump();
  r.zoo_manifest_hash = std::stoull(j.at("zoo_manifest_hash").get<std::string>(), nullptr, 16);
  r.surrogate = j.at("surrogate").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.run_seed = j.at("run_seed").get<std::uint64_t>();
  r.image_ids = j.at("image_ids").get<std::vector<int>>();
  r.prompts = j.at("prompts").get<std::vector<std::string>>();
  r.image_seeds = j.at("image_seeds").get<std::vector<std::uint64_t>>();
  for (const auto& h : j.at("adversarial_hashes")) r.adversarial_hashes.push_back(std::stoull(h.get<std::string>(), nullptr, 16));
  for (const auto& [target, bits] : j.at("success").items()) {
    std::vector<bool> v;
    for (char c : bits.get<std::string>()) v.push_back(c == '1');
    r.success[target] = v;
  }
  r.seconds = j.at("seconds").get<double>();
  return r;
}

json to_json(const AblationResult& r) {
  json curves = json::array();
  for (const auto& c : r.curves) {
    json pts = json::array();
    for (const auto& p : c.points) pts.push_back({{"x", p.x}, {"asr", p.asr}});
    curves.push_back({{"value", c.value}, {"points", pts}});
  }
  return json{{"parameter", r.parameter}, {"method", r.method}, {"curves", curves}, {"annotations", r.annotations}};
}

ASRMatrix matrix_from_json(const json& j) {
  ASRMatrix m;
  m.surrogates = j.at("surrogates").get<std::vector<std::string>>();
  m.targets = j.at("targets").get<std::vector<std::string>>();
  m.rate = j.at("rate").get<std::vector<std::vector<double>>>();
  m.samples = j.at("samples").get<std::vector<std::vector<int>>>();
  m.runs = j.at("runs").get<std::vector<std::vector<int>>>();
  m.method = j.at("method").get<std::string>();
  m.task = j.at("task").get<std::string>();
  m.target_text = j.at("target_text").get<std::string>();
  return m;
}

ASRMatrix matrix_from_csv(const std::string& csv) {
  auto split = [](const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string field; std::getline(ss, field, ',');) out.push_back(field);
    return out;
  };
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument("empty matrix CSV");
  auto header = split(line);
  if (header.empty() || header.front() != "surrogate") throw std::invalid_argument("matrix CSV lacks its header");
  ASRMatrix m;
  m.targets.assign(header.begin() + 1, header.end());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split(line);
    if (fields.size() != header.size()) throw std::invalid_argument("matrix CSV row has the wrong width");
    m.surrogates.push_back(fields.front());
    std::vector<double> row;
    for (size_t k = 1; k < fields.size(); ++k) row.push_back(std::stod(fields[k]));
    m.rate.push_back(std::move(row));
  }
  return m;
}

AblationResult ablation_from_json(const json& j) {
  AblationResult r;
  r.parameter = j.at("parameter").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.annotations = j.at("annotations").get<std::vector<std::string>>();
  for (const auto& c : j.at("curves")) {
    AblationCurve curve;
    curve.value = c.at("value").get<std::string>();
    for (const auto& p : c.at("points")) curve.points.push_back({p.at("x").get<double>(), p.at("asr").get<double>()});
    r.curves.push_back(std::move(curve));
  }
  return r;
}

json transfer_json(const std::vector<std::string>& methods, const std::vector<TransferResult>& results) {
  if (methods.empty() || methods.size() != results.size())
    throw std::invalid_argument("transfer report needs one result per method");
  json matrices = json::array(), per_run = json::array();
  for (const auto& r : results) {
    matrices.push_back(to_json(r.matrix));
    json runs = json::array();
    for (const auto& m : r.per_run) runs.push_back(to_json(m));
    per_run.push_back(runs);
  }
  json j{{"methods", methods}, {"matrices", matrices}, {"per_run", per_run}};
  if (methods.size() >= 2) {
    const Comparison c = compare_results(methods, results);
    j["delta"] = c.delta;
    j["seed_deltas"] = c.seed_deltas;
    j["mean_delta"] = c.mean_delta;
    j["sign_test"] = {{"positive", c.test.positive},
                      {"negative", c.test.negative},
                      {"ties", c.test.ties},
                      {"p_value", c.test.p_value}};
  }
  return j;
}

std::string render_matrix_markdown(const ASRMatrix& m) {
  std::ostringstream os;
  os << "| Surrogate |";
  for (const auto& t : m.targets) os << ' ' << t << " |";
  os << "\n|---|";
  for (size_t i = 0; i < m.targets.size(); ++i) os << "---|";
  os << '\n';
  for (size_t s = 0; s < m.surrogates.size(); ++s) {
    os << "| " << m.surrogates[s] << " |";
    for (size_t t = 0; t < m.targets.size(); ++t)
      os << ' ' << fixed1(100 * m.rate[s][t]) << (m.white_box(s, t) ? " (wb)" : "") << " |";
    os << '\n';
  }
  return os.str();
}

namespace {

std::string transfer_markdown(const json& j) {
  const auto methods = j.at("methods").get<std::vector<std::string>>();
  std::vector<ASRMatrix> matrices;
  for (const auto& m : j.at("matrices")) matrices.push_back(matrix_from_json(m));
  std::ostringstream os;
  const ASRMatrix& first = matrices.front();
  os << "# Transfer attack success rates\n\n";
  os << "Task " << first.task << ", target \"" << first.target_text << "\", rows are surrogates, columns are targets. "
     << "Rates are percentages averaged over " << first.runs.front().front() << " run(s) of "
     << first.samples.front().front() << " images. (wb) marks white-box cells.\n";
  for (size_t i = 0; i < methods.size(); ++i) {
    os << "\n## " << methods[i] << "\n\n" << render_matrix_markdown(matrices[i]);
    os << "\nMean off-diagonal ASR: " << fixed1(100 * matrices[i].mean_off_diagonal()) << "\n";
  }
  if (methods.size() >= 2) {
    ComparisonTable t;
    t.baseline_label = methods.front();
    t.method_label = methods.back();
    t.surrogates = first.surrogates;
    t.targets = first.targets;
    const ASRMatrix& last = matrices.back();
    for (size_t s = 0; s < first.surrogates.size(); ++s) {
      std::vector<TableCell> row;
      std::vector<bool> wb;
      for (size_t k = 0; k < first.targets.size(); ++k) {
        row.push_back({100 * first.rate[s][k], 100 * last.rate[s][k], std::nullopt});
        wb.push_back(first.white_box(s, k));
      }
      t.cells.push_back(std::move(row));
      t.white_box.push_back(std::move(wb));
    }
    os << "\n## " << methods.back() << " against " << methods.front() << "\n\n" << render_comparison_markdown(t);
    const auto& st = j.at("sign_test");
    os << "\nMean off-diagonal delta: " << signed1(100 * j.at("mean_delta").get<double>()) << " points\n\n";
    os << "Per-seed off-diagonal deltas:";
    for (double d : j.at("seed_deltas").get<std::vector<double>>()) os << ' ' << signed1(100 * d);
    char p[32];
    std::snprintf(p, sizeof(p), "%.5g", st.at("p_value").get<double>());
    os << "\n\nSign test: " << st.at("positive").get<int>() << " positive, " << st.at("negative").get<int>()
       << " negative, " << st.at("ties").get<int>() << " ties, one-sided p = " << p << "\n";
  }
  return os.str();
}

std::string ablation_markdown(const AblationResult& r) {
  std::ostringstream os;
  os << "# Ablation: " << r.parameter << " (" << r.method << ")\n\n";
  os << "Mean off-diagonal ASR in percent.\n\n| " << r.parameter << " | x | ASR |\n|---|---|---|\n";
  for (const auto& c : r.curves)
    for (const auto& p : c.points) {
      char x[32];
      std::snprintf(x, sizeof(x), "%g", p.x);
      os << "| " << c.value << " | " << x << " | " << fixed1(100 * p.asr) << " |\n";
    }
  for (const auto& a : r.annotations) os << "\nNote: " << a << "\n";
  return os.str();
}

}  // namespace

std::vector<std::string> emit_reports(const std::filesystem::path& dir) {
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& text) {
    write_text(dir / name, text);
    written.push_back(name);
  };
  if (std::filesystem::exists(dir / kTransferFile)) {
    const json j = json::parse(read_text(dir / kTransferFile));
    const auto methods = j.at("methods").get<std::vector<std::string>>();
    for (size_t i = 0; i < methods.size(); ++i) {
      const ASRMatrix m = matrix_from_json(j.at("matrices").at(i));
      emit("matrix_" + methods[i] + ".csv", m.to_csv());
      emit("heatmap_" + methods[i] + ".svg", render_heatmap_svg(m));
    }
    emit("transfer.md", transfer_markdown(j));
  }
  if (std::filesystem::exists(dir / kAblationFile)) {
    const AblationResult r = ablation_from_json(json::parse(read_text(dir / kAblationFile)));
    emit("curves_" + r.parameter + ".svg", render_curves_svg(r));
    emit("ablation.md", ablation_markdown(r));
  }
  return written;
}

}  // namespace dynvla

#include "biaslens/report.hpp"

#include <cstdio>
#include <sstream>

namespace biaslens {

using nlohmann::json;

json distribution_to_json(const ClassDistribution& dist) {
  json per_condition = json::object();
  for (const auto& [cond, counts] : dist.per_condition) per_condition[std::string(to_string(cond))] = counts;
  return {{"counts", dist.counts},
          {"percentages", dist.percentages},
          {"per_condition", per_condition},
          {"total", dist.total}};
}

namespace {

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

std::string format_percent(double fraction) { return fmt("%.2f", 100.0 * fraction); }

std::string distribution_csv(const ClassDistribution& dist) {
  std::ostringstream out;
  out << "class,count,percentage\n";
  for (const auto& [label, n] : dist.counts) out << label << ',' << n << ',' << fmt("%.17g", dist.percentages.at(label)) << '\n';
  return out.str();
}

std::string condition_csv(const ClassDistribution& dist) {
  std::ostringstream out;
  out << "condition,class,count,percentage_of_class\n";
  for (const auto& [cond, counts] : dist.per_condition) {
    for (const auto& [label, n] : counts) {
      const double share = 100.0 * static_cast<double>(n) / static_cast<double>(dist.counts.at(label));
      out << to_string(cond) << ',' << label << ',' << n << ',' << fmt("%.17g", share) << '\n';
    }
  }
  return out.str();
}

std::string metrics_table_csv(const json& phase) {
  const auto& eval = phase.at("evaluation");
  std::vector<std::string> classes;
  for (const auto& [label, m] : eval.at("classes").items()) classes.push_back(label);

  std::ostringstream out;
  out << "condition,metric";
  for (const auto& c : classes) out << ',' << c;
  out << ",mean\n";
  auto row = [&](const std::string& cond, const std::string& metric, const json& values) {
    out << cond << ',' << metric;
    double sum = 0.0;
    int n = 0;
    for (const auto& c : classes) {
      out << ',';
      if (values.contains(c)) {
        const double v = values[c].get<double>();
        out << format_percent(v);
        sum += v;
        ++n;
      }
    }
    out << ',' << (n ? format_percent(sum / n) : "") << '\n';
  };
  for (const auto& [cond, m] : eval.at("conditions").items()) {
    row(cond, "iou", m.at("iou"));
    row(cond, "ap", m.at("ap"));
  }
  json iou = json::object(), ap = json::object(), recall = json::object();
  for (const auto& c : classes) {
    iou[c] = eval["classes"][c]["iou"];
    ap[c] = eval["classes"][c]["ap"];
    recall[c] = eval["classes"][c]["recall"];
  }
  row("all", "iou", iou);
  row("all", "ap", ap);
  row("all", "recall", recall);
  return out.str();
}

namespace {

void phase_text(std::ostringstream& out, const std::string& title, const json& phase) {
  const auto& eval = phase.at("evaluation");
  out << title << '\n';
  out << "  mAP " << format_percent(eval["map"].get<double>()) << "  NDS " << format_percent(eval["nds"].get<double>())
      << "  macro IoU " << format_percent(eval["macro_iou"].get<double>()) << "  minority recall "
      << format_percent(eval["minority_recall"].get<double>()) << '\n';
  char line[256];
  std::snprintf(line, sizeof line, "  %-26s %8s %8s %8s %5s %5s %8s %8s\n", "class", "recall", "IoU", "AP", "FP", "FN",
                "sens", "select");
  out << line;
  for (const auto& [label, m] : eval["classes"].items()) {
    std::snprintf(line, sizeof line, "  %-26s %8s %8s %8s %5llu %5llu %8.4f %8.4f\n", label.c_str(),
                  format_percent(m["recall"].get<double>()).c_str(), format_percent(m["iou"].get<double>()).c_str(),
                  format_percent(m["ap"].get<double>()).c_str(), m["fp"].get<unsigned long long>(),
                  m["fn"].get<unsigned long long>(), m["sensitivity"].get<double>(), m["selectivity"].get<double>());
    out << line;
  }
  const auto& corr = phase["correlation"];
  out << "  FN rate vs selectivity (rank correlation): "
      << (corr["defined"].get<bool>() ? fmt("%.4f", corr["coefficient"].get<double>()) : std::string("undefined"))
      << '\n';
  const auto& plateau = phase["behavior"]["plateau_classes"];
  if (!plateau.empty()) {
    out << "  selectivity plateau:";
    for (const auto& c : plateau) out << ' ' << c.get<std::string>();
    out << '\n';
  }
}

}  // namespace

std::string render_text(const json& report) {
  std::ostringstream out;
  out << "Bias report (" << report.value("source", std::string("unknown source")) << ", seed "
      << report["config"]["seed"].get<std::uint64_t>() << ", model " << report["config"]["model"].get<std::string>()
      << ")\n\n";
  out << "Dataset: " << report["dataset"]["total"].get<std::uint64_t>() << " records\n";
  for (const auto& [label, pct] : report["dataset"]["percentages"].items()) {
    out << "  " << label << ": " << report["dataset"]["counts"][label].get<std::uint64_t>() << " ("
        << fmt("%.2f", pct.get<double>()) << "%)\n";
  }
  out << '\n';
  phase_text(out, "Baseline", report["pre"]);
  if (report.contains("post")) {
    out << '\n';
    phase_text(out, "After mitigation (" + report["mitigation"]["strategy"].get<std::string>() + ")", report["post"]);
    out << "\nVerdicts\n";
    for (const auto& [label, v] : report["verdicts"].items()) out << "  " << label << ": " << v.get<std::string>() << '\n';
  }
  return out.str();
}

}  // namespace biaslens

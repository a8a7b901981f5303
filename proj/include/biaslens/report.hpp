#pragma once

#include <string>

#include "biaslens/dataset.hpp"
#include "json.hpp"

namespace biaslens {

nlohmann::json distribution_to_json(const ClassDistribution& dist);

// class,count,percentage
std::string distribution_csv(const ClassDistribution& dist);
// condition,class,count,percentage_of_class
std::string condition_csv(const ClassDistribution& dist);

// Two-decimal percentage of a fraction, e.g. 0.2161 -> "21.61".
std::string format_percent(double fraction);

// Table layout: condition,metric,<class...>,mean with IoU and AP rows per
// condition plus an "all" block. Values in percent.
std::string metrics_table_csv(const nlohmann::json& phase);

// Plain-text summary of a bias report.
std::string render_text(const nlohmann::json& report);

}  // namespace biaslens

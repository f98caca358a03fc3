#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fundus/tensor.hpp"

namespace fundus {

// Positive class = glaucoma = 1.
struct ConfusionMatrix {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::int64_t total() const { return tp + fp + fn + tn; }
};

ConfusionMatrix confusion(const Tensor& pred, const Tensor& label);
ConfusionMatrix confusion(const std::vector<int>& pred, const std::vector<int>& label);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;
  bool degenerate = false;  // a zero-denominator ratio was reported as 0
};

struct ClassificationReport {
  ClassMetrics glaucoma;  // positive class
  ClassMetrics normal;
  double accuracy = 0.0;
  ClassMetrics macro_avg;     // unweighted mean (support = total)
  ClassMetrics weighted_avg;  // support-weighted mean
  std::int64_t total_support = 0;
};

ClassificationReport report(const ConfusionMatrix& cm);

nlohmann::json report_to_json(const ClassificationReport& r);
// aligned text table, 3-decimal cells
std::string report_to_text(const ClassificationReport& r);

}  // namespace fundus

#include "fundus/metrics.hpp"

#include <cmath>
#include <cstdio>

namespace fundus {

ConfusionMatrix confusion(const Tensor& pred, const Tensor& label) {
  if (pred.shape() != label.shape()) throw ShapeError("confusion: length mismatch");
  std::vector<int> p(static_cast<std::size_t>(pred.numel()));
  std::vector<int> y(static_cast<std::size_t>(label.numel()));
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    p[static_cast<std::size_t>(i)] = pred.data()[i] != 0.f ? 1 : 0;
    y[static_cast<std::size_t>(i)] = label.data()[i] != 0.f ? 1 : 0;
  }
  return confusion(p, y);
}

ConfusionMatrix confusion(const std::vector<int>& pred, const std::vector<int>& label) {
  if (pred.size() != label.size()) throw ShapeError("confusion: length mismatch");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] == 1 && label[i] == 1) ++cm.tp;
    else if (pred[i] == 1 && label[i] == 0) ++cm.fp;
    else if (pred[i] == 0 && label[i] == 1) ++cm.fn;
    else ++cm.tn;
  }
  return cm;
}

namespace {

double ratio(std::int64_t num, std::int64_t den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

double f1_of(double precision, double recall, bool& degenerate) {
  if (precision + recall == 0.0) {
    degenerate = true;
    return 0.0;
  }
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace

ClassificationReport report(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ContractError("report: empty confusion matrix");
  ClassificationReport r;
  r.total_support = cm.total();

  r.glaucoma.support = cm.tp + cm.fn;
  r.glaucoma.precision = ratio(cm.tp, cm.tp + cm.fp, r.glaucoma.degenerate);
  r.glaucoma.recall = ratio(cm.tp, cm.tp + cm.fn, r.glaucoma.degenerate);
  r.glaucoma.f1 = f1_of(r.glaucoma.precision, r.glaucoma.recall, r.glaucoma.degenerate);

  // the normal row treats label 0 as its own positive
  r.normal.support = cm.tn + cm.fp;
  r.normal.precision = ratio(cm.tn, cm.tn + cm.fn, r.normal.degenerate);
  r.normal.recall = ratio(cm.tn, cm.tn + cm.fp, r.normal.degenerate);
  r.normal.f1 = f1_of(r.normal.precision, r.normal.recall, r.normal.degenerate);

  r.accuracy = static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());

  r.macro_avg.support = r.total_support;
  r.macro_avg.precision = (r.glaucoma.precision + r.normal.precision) / 2.0;
  r.macro_avg.recall = (r.glaucoma.recall + r.normal.recall) / 2.0;
  r.macro_avg.f1 = (r.glaucoma.f1 + r.normal.f1) / 2.0;

  const double wg = static_cast<double>(r.glaucoma.support);
  const double wn = static_cast<double>(r.normal.support);
  const double wt = wg + wn;
  r.weighted_avg.support = r.total_support;
  r.weighted_avg.precision = (wg * r.glaucoma.precision + wn * r.normal.precision) / wt;
  r.weighted_avg.recall = (wg * r.glaucoma.recall + wn * r.normal.recall) / wt;
  r.weighted_avg.f1 = (wg * r.glaucoma.f1 + wn * r.normal.f1) / wt;
  return r;
}

namespace {

nlohmann::json class_json(const ClassMetrics& m) {
  nlohmann::json j{{"precision", m.precision},
                   {"recall", m.recall},
                   {"f1", m.f1},
                   {"support", m.support}};
  if (m.degenerate) j["degenerate"] = true;
  return j;
}

}  // namespace

nlohmann::json report_to_json(const ClassificationReport& r) {
  return nlohmann::json{{"glaucoma", class_json(r.glaucoma)},
                        {"normal", class_json(r.normal)},
                        {"accuracy", r.accuracy},
                        {"macro_avg", class_json(r.macro_avg)},
                        {"weighted_avg", class_json(r.weighted_avg)},
                        {"total_support", r.total_support}};
}

std::string report_to_text(const ClassificationReport& r) {
  char buf[128];
  std::string out;
  out += "              precision    recall  f1-score   support\n\n";
  auto row = [&](const char* name, const ClassMetrics& m) {
    std::snprintf(buf, sizeof(buf), "%12s      %5.3f     %5.3f     %5.3f %9lld\n", name,
                  m.precision, m.recall, m.f1, static_cast<long long>(m.support));
    out += buf;
  };
  row("Glaucoma", r.glaucoma);
  row("Normal", r.normal);
  out += "\n";
  std::snprintf(buf, sizeof(buf), "%12s                          %5.3f %9lld\n", "accuracy",
                r.accuracy, static_cast<long long>(r.total_support));
  out += buf;
  row("macro avg", r.macro_avg);
  row("weighted avg", r.weighted_avg);
  return out;
}

}  // namespace fundus

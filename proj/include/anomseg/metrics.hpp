#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "anomseg/common.hpp"
#include "anomseg/tensor.hpp"

namespace anomseg::metrics {

// One image worth of scores + labels. Labels use the {0,1,255} encoding;
// 255 pixels are excluded from both metrics.
struct EvalPair {
  Tensor scores;  // [H,W]
  ByteMap labels;
};

// Area under the precision-recall step curve over the pooled non-ignored
// pixels. Scores are sorted descending; equal scores form one operating-point
// group and every positive in a group contributes the group's precision.
double average_precision(const std::vector<EvalPair>& pairs);

// False positive rate at the first operating point (descending score groups)
// whose true positive rate reaches 0.95.
double fpr_at_95_tpr(const std::vector<EvalPair>& pairs);

struct PerImageMetrics {
  std::string id;
  std::optional<double> ap;
  std::optional<double> fpr95;
  long positives = 0, negatives = 0, ignored = 0;
};

struct EvalReport {
  double ap = 0;
  double fpr95 = 0;
  long positives = 0, negatives = 0, ignored = 0;
  std::vector<PerImageMetrics> per_image;  // sorted by id
};

// Pooled metrics plus a per-image breakdown; the scorer maps a sample index
// to its (scores, labels) pair. Ids determine the per-image row order.
EvalReport evaluate(const std::function<EvalPair(long)>& scorer,
                    const std::vector<std::string>& ids);

std::string report_to_json(const EvalReport& rep);
std::string report_to_csv(const EvalReport& rep);

// precision-recall operating points (descending score groups), for plotting
struct PrPoint {
  double recall = 0, precision = 0;
};
std::vector<PrPoint> pr_curve(const std::vector<EvalPair>& pairs);

}  // namespace anomseg::metrics

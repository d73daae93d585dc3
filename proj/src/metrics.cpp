#include "anomseg/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace anomseg::metrics {

namespace {

struct Pooled {
  std::vector<std::pair<double, uint8_t>> px;  // (score, label)
  long pos = 0, neg = 0, ignored = 0;
};

Pooled pool_pixels(const std::vector<EvalPair>& pairs) {
  Pooled out;
  for (const EvalPair& p : pairs) {
    if (p.scores.ndim() != 2 || p.scores.dim(0) != p.labels.h || p.scores.dim(1) != p.labels.w)
      throw ContractViolation("eval pair: score/label shape mismatch");
    for (int y = 0; y < p.labels.h; ++y)
      for (int x = 0; x < p.labels.w; ++x) {
        uint8_t lbl = p.labels.at(y, x);
        if (lbl == kLabelIgnore) {
          ++out.ignored;
          continue;
        }
        if (lbl != kLabelNormal && lbl != kLabelAnomaly)
          throw ContractViolation("eval pair: label outside {0,1,255}");
        out.px.emplace_back(p.scores.at2(y, x), lbl);
        if (lbl == kLabelAnomaly)
          ++out.pos;
        else
          ++out.neg;
      }
  }
  return out;
}

struct Group {
  long pos = 0, total = 0;
};

// descending-score tie groups
std::vector<Group> score_groups(std::vector<std::pair<double, uint8_t>>& px) {
  std::sort(px.begin(), px.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<Group> groups;
  size_t i = 0;
  while (i < px.size()) {
    size_t j = i;
    Group g;
    while (j < px.size() && px[j].first == px[i].first) {
      ++g.total;
      if (px[j].second == kLabelAnomaly) ++g.pos;
      ++j;
    }
    groups.push_back(g);
    i = j;
  }
  return groups;
}

}  // namespace

double average_precision(const std::vector<EvalPair>& pairs) {
  Pooled pooled = pool_pixels(pairs);
  if (pooled.pos == 0) throw MetricError("average precision undefined: no positive pixels");
  std::vector<Group> groups = score_groups(pooled.px);
  double ap = 0.0;
  long tp = 0, seen = 0;
  for (const Group& g : groups) {
    tp += g.pos;
    seen += g.total;
    if (g.pos > 0)
      ap += static_cast<double>(g.pos) * (static_cast<double>(tp) / static_cast<double>(seen));
  }
  return ap / static_cast<double>(pooled.pos);
}

double fpr_at_95_tpr(const std::vector<EvalPair>& pairs) {
  Pooled pooled = pool_pixels(pairs);
  if (pooled.pos == 0 || pooled.neg == 0)
    throw MetricError("fpr95 undefined: needs both positive and negative pixels");
  std::vector<Group> groups = score_groups(pooled.px);
  long tp = 0, fp = 0;
  for (const Group& g : groups) {
    tp += g.pos;
    fp += g.total - g.pos;
    double tpr = static_cast<double>(tp) / static_cast<double>(pooled.pos);
    if (tpr >= 0.95) return static_cast<double>(fp) / static_cast<double>(pooled.neg);
  }
  return 1.0;  // unreachable: the last group always reaches TPR = 1
}

std::vector<PrPoint> pr_curve(const std::vector<EvalPair>& pairs) {
  Pooled pooled = pool_pixels(pairs);
  if (pooled.pos == 0) throw MetricError("pr curve undefined: no positive pixels");
  std::vector<Group> groups = score_groups(pooled.px);
  std::vector<PrPoint> pts;
  long tp = 0, seen = 0;
  for (const Group& g : groups) {
    tp += g.pos;
    seen += g.total;
    pts.push_back({static_cast<double>(tp) / static_cast<double>(pooled.pos),
                   static_cast<double>(tp) / static_cast<double>(seen)});
  }
  return pts;
}

EvalReport evaluate(const std::function<EvalPair(long)>& scorer,
                    const std::vector<std::string>& ids) {
  if (ids.empty()) throw MetricError("evaluate: empty dataset");
  std::vector<long> order(ids.size());
  for (size_t i = 0; i < ids.size(); ++i) order[i] = static_cast<long>(i);
  std::sort(order.begin(), order.end(),
            [&](long a, long b) { return ids[static_cast<size_t>(a)] < ids[static_cast<size_t>(b)]; });

  EvalReport rep;
  std::vector<EvalPair> all;
  for (long i : order) {
    EvalPair pair = scorer(i);
    PerImageMetrics pm;
    pm.id = ids[static_cast<size_t>(i)];
    Pooled pooled = pool_pixels({pair});
    pm.positives = pooled.pos;
    pm.negatives = pooled.neg;
    pm.ignored = pooled.ignored;
    if (pooled.pos > 0) pm.ap = average_precision({pair});
    if (pooled.pos > 0 && pooled.neg > 0) pm.fpr95 = fpr_at_95_tpr({pair});
    rep.per_image.push_back(std::move(pm));
    rep.positives += pooled.pos;
    rep.negatives += pooled.neg;
    rep.ignored += pooled.ignored;
    all.push_back(std::move(pair));
  }
  rep.ap = average_precision(all);
  rep.fpr95 = fpr_at_95_tpr(all);
  return rep;
}

namespace {

std::string pct2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v * 100.0);
  return buf;
}

}  // namespace

std::string report_to_json(const EvalReport& rep) {
  std::ostringstream os;
  os << "{\n";
  os << "  \"ap\": " << fmt_g17(rep.ap) << ",\n";
  os << "  \"fpr95\": " << fmt_g17(rep.fpr95) << ",\n";
  os << "  \"ap_pct\": \"" << pct2(rep.ap) << "\",\n";
  os << "  \"fpr95_pct\": \"" << pct2(rep.fpr95) << "\",\n";
  os << "  \"positives\": " << rep.positives << ",\n";
  os << "  \"negatives\": " << rep.negatives << ",\n";
  os << "  \"ignored\": " << rep.ignored << ",\n";
  os << "  \"per_image\": [\n";
  for (size_t i = 0; i < rep.per_image.size(); ++i) {
    const PerImageMetrics& pm = rep.per_image[i];
    os << "    {\"id\": \"" << pm.id << "\", \"ap\": "
       << (pm.ap ? fmt_g17(*pm.ap) : "null") << ", \"fpr95\": "
       << (pm.fpr95 ? fmt_g17(*pm.fpr95) : "null") << ", \"positives\": " << pm.positives
       << ", \"negatives\": " << pm.negatives << ", \"ignored\": " << pm.ignored << "}"
       << (i + 1 < rep.per_image.size() ? "," : "") << "\n";
  }
  os << "  ]\n}\n";
  return os.str();
}

std::string report_to_csv(const EvalReport& rep) {
  std::ostringstream os;
  os << "id,ap_pct,fpr95_pct,positives,negatives,ignored\n";
  os << "POOLED," << pct2(rep.ap) << "," << pct2(rep.fpr95) << "," << rep.positives << ","
     << rep.negatives << "," << rep.ignored << "\n";
  for (const PerImageMetrics& pm : rep.per_image) {
    os << pm.id << "," << (pm.ap ? pct2(*pm.ap) : "") << ","
       << (pm.fpr95 ? pct2(*pm.fpr95) : "") << "," << pm.positives << "," << pm.negatives << ","
       << pm.ignored << "\n";
  }
  return os.str();
}

}  // namespace anomseg::metrics

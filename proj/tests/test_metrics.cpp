#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "anomseg/metrics.hpp"
#include "anomseg/rng.hpp"

using namespace anomseg;
using namespace anomseg::metrics;

namespace {

EvalPair pair_from(const std::vector<double>& scores, const std::vector<int>& labels) {
  long n = static_cast<long>(scores.size());
  EvalPair p;
  p.scores = Tensor({1, n});
  p.labels = ByteMap(1, static_cast<int>(n));
  for (long i = 0; i < n; ++i) {
    p.scores.at2(0, i) = scores[static_cast<size_t>(i)];
    p.labels.at(0, static_cast<int>(i)) = static_cast<uint8_t>(labels[static_cast<size_t>(i)]);
  }
  return p;
}

// Brute-force AP: for every distinct threshold (descending), recompute
// precision from scratch over the whole array; AP = sum of recall-step *
// precision.
double ap_bruteforce(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> kept_scores;
  std::vector<int> kept_labels;
  long total_pos = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 255) continue;
    kept_scores.push_back(scores[i]);
    kept_labels.push_back(labels[i]);
    total_pos += labels[i] == 1;
  }
  std::vector<double> thresholds = kept_scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  // positive counts and precisions recomputed from scratch per threshold;
  // the accumulation form (sum of count*precision, one final division)
  // matches the implementation so equality can be exact
  double ap = 0.0;
  long prev_tp = 0;
  for (double t : thresholds) {
    long tp = 0, fp = 0;
    for (size_t i = 0; i < kept_scores.size(); ++i) {
      if (kept_scores[i] >= t) {
        if (kept_labels[i] == 1)
          ++tp;
        else
          ++fp;
      }
    }
    double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    if (tp != prev_tp) ap += static_cast<double>(tp - prev_tp) * precision;
    prev_tp = tp;
  }
  return ap / static_cast<double>(total_pos);
}

// Brute-force FPR95: sweep distinct thresholds descending, recompute TPR/FPR
// from scratch, return FPR at the first threshold with TPR >= 0.95.
double fpr95_bruteforce(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> thresholds;
  long total_pos = 0, total_neg = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 255) continue;
    thresholds.push_back(scores[i]);
    total_pos += labels[i] == 1;
    total_neg += labels[i] == 0;
  }
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  for (double t : thresholds) {
    long tp = 0, fp = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
      if (labels[i] == 255 || scores[i] < t) continue;
      if (labels[i] == 1)
        ++tp;
      else
        ++fp;
    }
    if (static_cast<double>(tp) / static_cast<double>(total_pos) >= 0.95)
      return static_cast<double>(fp) / static_cast<double>(total_neg);
  }
  return 1.0;
}

struct RandomCase {
  std::vector<double> scores;
  std::vector<int> labels;
};

RandomCase random_case(Rng& rng, long n, bool with_ties, bool with_ignored) {
  RandomCase c;
  for (long i = 0; i < n; ++i) {
    double s = with_ties ? std::floor(rng.uniform() * 12.0) / 12.0 : rng.uniform();
    c.scores.push_back(s);
    double u = rng.uniform();
    int lbl = u < 0.3 ? 1 : 0;
    if (with_ignored && rng.uniform() < 0.15) lbl = 255;
    c.labels.push_back(lbl);
  }
  c.labels[0] = 1;
  if (n > 1) c.labels[1] = 0;
  return c;
}

}  // namespace

TEST_CASE("average precision hand cases") {
  CHECK(average_precision({pair_from({1, 1, 0, 0}, {1, 1, 0, 0})}) == 1.0);

  // scores [0.9 0.8 0.7 0.6], labels [1 0 1 0] -> (1 + 2/3)/2 = 5/6
  double ap = average_precision({pair_from({0.9, 0.8, 0.7, 0.6}, {1, 0, 1, 0})});
  CHECK(ap == doctest::Approx(5.0 / 6.0).epsilon(1e-12));

  // scores = 1 - labels with grouped ties: positives all in the final group;
  // the two groups contribute 0 and pos/total respectively
  double ap_inv = average_precision({pair_from({0, 1, 0, 1, 1}, {1, 0, 1, 0, 0})});
  CHECK(ap_inv == doctest::Approx(2.0 / 5.0).epsilon(1e-12));

  double ap_tie = average_precision({pair_from({0.5, 0.5, 0.5, 0.5}, {1, 0, 0, 1})});
  CHECK(ap_tie == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS_AS(average_precision({pair_from({0.5, 0.6}, {0, 0})}), MetricError);
}

TEST_CASE("fpr95 hand cases") {
  CHECK(fpr_at_95_tpr({pair_from({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})}) == 0.0);
  CHECK(fpr_at_95_tpr({pair_from({0.5, 0.5, 0.5}, {1, 0, 0})}) == 1.0);
  CHECK_THROWS_AS(fpr_at_95_tpr({pair_from({0.5, 0.6}, {1, 1})}), MetricError);
}

TEST_CASE("metrics equal brute-force oracles on 200 random instances") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    long n = 20 + static_cast<long>(rng.uniform_int(0, 400));
    bool ties = trial % 2 == 0;
    bool ignored = trial % 3 == 0;
    RandomCase c = random_case(rng, n, ties, ignored);
    EvalPair p = pair_from(c.scores, c.labels);
    CHECK(average_precision({p}) == ap_bruteforce(c.scores, c.labels));
    CHECK(fpr_at_95_tpr({p}) == fpr95_bruteforce(c.scores, c.labels));
  }
}

TEST_CASE("metrics invariant under strictly monotone score transforms") {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    RandomCase c = random_case(rng, 120, trial % 2 == 0, true);
    EvalPair p = pair_from(c.scores, c.labels);
    double ap0 = average_precision({p});
    double fpr0 = fpr_at_95_tpr({p});
    std::vector<double> warped;
    for (double s : c.scores) warped.push_back(std::exp(3.0 * s) + 7.0);
    EvalPair q = pair_from(warped, c.labels);
    CHECK(average_precision({q}) == ap0);
    CHECK(fpr_at_95_tpr({q}) == fpr0);
  }
}

TEST_CASE("ignored pixels never affect metrics") {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    RandomCase c = random_case(rng, 150, trial % 2 == 0, true);
    bool has_ignored = false;
    for (int l : c.labels) has_ignored |= l == 255;
    if (!has_ignored) c.labels[2] = 255;
    EvalPair p = pair_from(c.scores, c.labels);
    double ap0 = average_precision({p});
    double fpr0 = fpr_at_95_tpr({p});
    for (size_t i = 0; i < c.labels.size(); ++i)
      if (c.labels[i] == 255) c.scores[i] = rng.uniform(-5.0, 5.0);
    EvalPair q = pair_from(c.scores, c.labels);
    CHECK(average_precision({q}) == ap0);
    CHECK(fpr_at_95_tpr({q}) == fpr0);
  }
}

TEST_CASE("evaluate: oracle model, order invariance, concatenation") {
  Rng rng(5);
  std::vector<EvalPair> pairs;
  std::vector<std::string> ids{"img_b", "img_a", "img_c"};
  for (int i = 0; i < 3; ++i) {
    RandomCase c = random_case(rng, 80, false, true);
    pairs.push_back(pair_from(c.scores, c.labels));
  }

  {
    std::vector<EvalPair> oracle;
    for (const EvalPair& p : pairs) {
      EvalPair o = p;
      for (int y = 0; y < p.labels.h; ++y)
        for (int x = 0; x < p.labels.w; ++x)
          o.scores.at2(y, x) = p.labels.at(y, x) == 1 ? 1.0 : 0.0;
      oracle.push_back(std::move(o));
    }
    EvalReport rep = evaluate([&](long i) { return oracle[static_cast<size_t>(i)]; }, ids);
    CHECK(rep.ap == 1.0);
    CHECK(rep.fpr95 == 0.0);
  }

  EvalReport rep = evaluate([&](long i) { return pairs[static_cast<size_t>(i)]; }, ids);
  CHECK(rep.ap == average_precision(pairs));
  CHECK(rep.fpr95 == fpr_at_95_tpr(pairs));
  CHECK(rep.positives + rep.negatives + rep.ignored == 3 * 80);

  std::vector<EvalPair> permuted{pairs[2], pairs[0], pairs[1]};
  std::vector<std::string> pids{"img_c", "img_b", "img_a"};
  EvalReport rep2 = evaluate([&](long i) { return permuted[static_cast<size_t>(i)]; }, pids);
  CHECK(rep.ap == rep2.ap);
  CHECK(rep.fpr95 == rep2.fpr95);
  REQUIRE(rep.per_image.size() == rep2.per_image.size());
  for (size_t i = 0; i < rep.per_image.size(); ++i) {
    CHECK(rep.per_image[i].id == rep2.per_image[i].id);
    CHECK(rep.per_image[i].ap == rep2.per_image[i].ap);
    CHECK(rep.per_image[i].fpr95 == rep2.per_image[i].fpr95);
  }
  CHECK(report_to_json(rep) == report_to_json(rep2));
  CHECK(report_to_csv(rep) == report_to_csv(rep2));

  CHECK_THROWS_AS(evaluate([&](long) { return pairs[0]; }, {}), MetricError);
}

TEST_CASE("pr curve: oracle predictions keep precision 1 across recalls") {
  std::vector<double> scores{0.9, 0.8, 0.7, 0.2, 0.1};
  std::vector<int> labels{1, 1, 1, 0, 0};
  auto pts = pr_curve({pair_from(scores, labels)});
  bool seen_full_recall = false;
  for (const PrPoint& p : pts) {
    if (p.recall > 0.99) seen_full_recall = true;
    if (p.recall < 1.0) CHECK(p.precision == 1.0);
  }
  CHECK(seen_full_recall);
}

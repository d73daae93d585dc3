#pragma once

#include <vector>

#include "anomseg/autodiff.hpp"
#include "anomseg/common.hpp"
#include "anomseg/dissim_net.hpp"
#include "anomseg/rng.hpp"

namespace anomseg::contrast {

// Two 1x1 convolutions with ReLU between, output L2-normalized per pixel.
struct ProjectorConfig {
  int in_channels = 16;
  int hidden = 64;
  int embedding_dim = 128;

  void validate() const;
};

class Projector {
 public:
  Projector(ProjectorConfig cfg, Rng& rng);

  const ProjectorConfig& config() const { return cfg_; }
  net::ParamSet& params() { return params_; }
  const net::ParamSet& params() const { return params_; }

  // feats:[N,C,H,W]; returns [P,dim] unit rows for the requested pixels.
  ad::Var project_pixels(const ad::Var& feats, std::vector<PixelRef> refs) const;
  // all pixels of the map in (n, y, x) row-major order -> [N*H*W, dim]
  ad::Var project_map(const ad::Var& feats) const;

 private:
  ProjectorConfig cfg_;
  net::ParamSet params_;
  ad::Var w1_, b1_, w2_, b2_;
};

// Hard/easy split of the non-ignored pixels of one image under the current
// prediction: anomaly pixels are easy iff prob > threshold, normal pixels are
// easy iff prob <= threshold.
struct PixelPartition {
  std::vector<PixelRef> hard_anomaly, easy_anomaly, hard_normal, easy_normal;
};

PixelPartition partition_pixels(const ByteMap& gt, const Tensor& prob, double threshold,
                                int image_index);

struct SamplingBudget {
  int n_anchor = 50;
  int n_positive = 100;   // 2x anchors
  int n_neg_hard = 100;   // 2x anchors
  int n_neg_easy = 300;   // 6x anchors
  double temperature = 0.1;

  void validate() const;
  static SamplingBudget from_anchor_count(int n_a, double temperature = 0.1);
};

struct SampleMeta {
  PixelRef px;
  Domain domain = Domain::V;
  bool hard = false;
};

enum class SamplingMode {
  same_domain_random,   // per-domain positives, uniform sampling
  cross_domain_random,  // pooled positives, same-domain negatives, uniform
  cross_domain_aware,   // pooled positives + hard/easy anchor & negative quotas
};

// Index selection only; deterministic in (partitions, rng seed).
struct SelectedIndices {
  std::vector<SampleMeta> anchors_v, anchors_a;
  std::vector<SampleMeta> positives_v, positives_a;  // equal in cross-domain modes
  std::vector<SampleMeta> negatives_v, negatives_a;
  bool cross_domain = true;
};

SelectedIndices select_samples(const std::vector<PixelPartition>& partitions,
                               const std::vector<Domain>& domains, const SamplingBudget& budget,
                               SamplingMode mode, Rng& rng);

// Index sets with projected unit embeddings attached.
struct SampleSets {
  SelectedIndices idx;
  ad::Var anchors_v, anchors_a;      // [Av,dim] / [Aa,dim]
  ad::Var positives_v, positives_a;  // per-anchor-domain positive banks
  ad::Var negatives_v, negatives_a;
};

SampleSets build_sample_sets(const std::vector<PixelPartition>& partitions,
                             const std::vector<Domain>& domains, const Projector& projector,
                             const ad::Var& decoder_feats, const SamplingBudget& budget,
                             SamplingMode mode, Rng& rng);

struct CacResult {
  ad::Var loss;  // in (-2, 0] for the as-printed form
  bool v_skipped = false;
  bool a_skipped = false;
};

// The contrastive loss over the sets; each domain term averages the ratio
// e^{a·p/α} / (e^{a·p/α} + Σ_n e^{a·n/α}) over that domain's anchors and the
// positive bank. log_variant applies log to each ratio instead.
CacResult cac_loss(const SampleSets& sets, double alpha, bool log_variant = false);

}  // namespace anomseg::contrast

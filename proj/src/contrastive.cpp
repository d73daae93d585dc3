#include "anomseg/contrastive.hpp"

#include <algorithm>

namespace anomseg::contrast {

void ProjectorConfig::validate() const {
  if (in_channels < 1 || hidden < 1 || embedding_dim < 1)
    throw ConfigError("projector dimensions must be positive");
}

Projector::Projector(ProjectorConfig cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  w1_ = params_.make("proj.0.w", net::he_init({cfg_.hidden, cfg_.in_channels}, cfg_.in_channels, rng));
  b1_ = params_.make("proj.0.b", Tensor({cfg_.hidden}));
  w2_ = params_.make("proj.1.w", net::he_init({cfg_.embedding_dim, cfg_.hidden}, cfg_.hidden, rng));
  b2_ = params_.make("proj.1.b", Tensor({cfg_.embedding_dim}));
}

ad::Var Projector::project_pixels(const ad::Var& feats, std::vector<PixelRef> refs) const {
  if (feats->value.dim(1) != cfg_.in_channels)
    throw ContractViolation("projector: feature channel mismatch");
  ad::Var x = ad::gather_pixels(feats, std::move(refs));
  x = ad::relu(ad::linear(x, w1_, b1_));
  x = ad::linear(x, w2_, b2_);
  return ad::l2_normalize_rows(x);
}

ad::Var Projector::project_map(const ad::Var& feats) const {
  long n = feats->value.dim(0), h = feats->value.dim(2), w = feats->value.dim(3);
  std::vector<PixelRef> refs;
  refs.reserve(static_cast<size_t>(n * h * w));
  for (long i = 0; i < n; ++i)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x)
        refs.push_back({static_cast<int>(i), static_cast<int>(y), static_cast<int>(x)});
  return project_pixels(feats, std::move(refs));
}

PixelPartition partition_pixels(const ByteMap& gt, const Tensor& prob, double threshold,
                                int image_index) {
  if (prob.ndim() != 2 || prob.dim(0) != gt.h || prob.dim(1) != gt.w)
    throw ContractViolation("partition_pixels: prob/gt shape mismatch");
  PixelPartition part;
  for (int y = 0; y < gt.h; ++y)
    for (int x = 0; x < gt.w; ++x) {
      uint8_t lbl = gt.at(y, x);
      if (lbl == kLabelIgnore) continue;
      double p = prob.at2(y, x);
      PixelRef ref{image_index, y, x};
      if (lbl == kLabelAnomaly) {
        (p > threshold ? part.easy_anomaly : part.hard_anomaly).push_back(ref);
      } else {
        (p <= threshold ? part.easy_normal : part.hard_normal).push_back(ref);
      }
    }
  return part;
}

void SamplingBudget::validate() const {
  if (n_anchor < 1 || n_positive < 1 || n_neg_hard < 1 || n_neg_easy < 1)
    throw ConfigError("sampling budget counts must be >= 1");
  if (temperature <= 0.0) throw ConfigError("temperature must be positive");
}

SamplingBudget SamplingBudget::from_anchor_count(int n_a, double temperature) {
  SamplingBudget b;
  b.n_anchor = n_a;
  b.n_positive = 2 * n_a;
  b.n_neg_hard = 2 * n_a;
  b.n_neg_easy = 6 * n_a;
  b.temperature = temperature;
  return b;
}

namespace {

// without replacement, deterministic partial Fisher-Yates
std::vector<SampleMeta> draw(std::vector<SampleMeta> pool, size_t k, Rng& rng) {
  size_t take = std::min(k, pool.size());
  for (size_t i = 0; i < take; ++i) {
    size_t j = i + static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.size() - i) - 1));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(take);
  return pool;
}

std::vector<SampleMeta> tag(const std::vector<PixelRef>& refs, Domain d, bool hard) {
  std::vector<SampleMeta> out;
  out.reserve(refs.size());
  for (const PixelRef& r : refs) out.push_back({r, d, hard});
  return out;
}

void append(std::vector<SampleMeta>& dst, const std::vector<SampleMeta>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

// two-pool draw with quota rebalancing: deficits in one hardness pool are
// filled from the other
std::vector<SampleMeta> draw_balanced(const std::vector<SampleMeta>& hard_pool,
                                      const std::vector<SampleMeta>& easy_pool, size_t want_hard,
                                      size_t want_easy, Rng& rng) {
  std::vector<SampleMeta> hard_take = draw(hard_pool, want_hard, rng);
  size_t hard_deficit = want_hard - hard_take.size();
  std::vector<SampleMeta> easy_take = draw(easy_pool, want_easy + hard_deficit, rng);
  size_t easy_deficit = want_easy + hard_deficit - easy_take.size();
  if (easy_deficit > 0 && hard_pool.size() > hard_take.size()) {
    // remaining hard candidates, preserving pool order, minus already taken
    std::vector<SampleMeta> rest;
    for (const SampleMeta& m : hard_pool) {
      bool used = false;
      for (const SampleMeta& t : hard_take)
        if (t.px == m.px) {
          used = true;
          break;
        }
      if (!used) rest.push_back(m);
    }
    append(hard_take, draw(std::move(rest), easy_deficit, rng));
  }
  append(hard_take, easy_take);
  return hard_take;
}

struct DomainPools {
  std::vector<SampleMeta> hard_anom, easy_anom, hard_norm, easy_norm;
};

}  // namespace

SelectedIndices select_samples(const std::vector<PixelPartition>& partitions,
                               const std::vector<Domain>& domains, const SamplingBudget& budget,
                               SamplingMode mode, Rng& rng) {
  budget.validate();
  if (partitions.size() != domains.size())
    throw ContractViolation("select_samples: partitions/domains size mismatch");

  DomainPools pools[2];
  for (size_t i = 0; i < partitions.size(); ++i) {
    DomainPools& p = pools[static_cast<size_t>(domains[i])];
    Domain d = domains[i];
    append(p.hard_anom, tag(partitions[i].hard_anomaly, d, true));
    append(p.easy_anom, tag(partitions[i].easy_anomaly, d, false));
    append(p.hard_norm, tag(partitions[i].hard_normal, d, true));
    append(p.easy_norm, tag(partitions[i].easy_normal, d, false));
  }

  SelectedIndices out;
  out.cross_domain = mode != SamplingMode::same_domain_random;
  size_t n_a = static_cast<size_t>(budget.n_anchor);

  for (int d = 0; d < 2; ++d) {
    DomainPools& p = pools[d];
    std::vector<SampleMeta>& anchors = d == 0 ? out.anchors_v : out.anchors_a;
    std::vector<SampleMeta>& negatives = d == 0 ? out.negatives_v : out.negatives_a;
    if (mode == SamplingMode::cross_domain_aware) {
      anchors = draw_balanced(p.hard_anom, p.easy_anom, n_a - n_a / 2, n_a / 2, rng);
      negatives = draw_balanced(p.hard_norm, p.easy_norm,
                                static_cast<size_t>(budget.n_neg_hard),
                                static_cast<size_t>(budget.n_neg_easy), rng);
    } else {
      std::vector<SampleMeta> anom = p.hard_anom;
      append(anom, p.easy_anom);
      std::vector<SampleMeta> norm = p.hard_norm;
      append(norm, p.easy_norm);
      anchors = draw(std::move(anom), n_a, rng);
      negatives = draw(std::move(norm),
                       static_cast<size_t>(budget.n_neg_hard + budget.n_neg_easy), rng);
    }
  }

  if (out.cross_domain) {
    std::vector<SampleMeta> pooled = pools[0].hard_anom;
    append(pooled, pools[0].easy_anom);
    append(pooled, pools[1].hard_anom);
    append(pooled, pools[1].easy_anom);
    out.positives_v = draw(std::move(pooled), static_cast<size_t>(budget.n_positive), rng);
    out.positives_a = out.positives_v;
  } else {
    for (int d = 0; d < 2; ++d) {
      std::vector<SampleMeta> pool = pools[d].hard_anom;
      append(pool, pools[d].easy_anom);
      (d == 0 ? out.positives_v : out.positives_a) =
          draw(std::move(pool), static_cast<size_t>(budget.n_positive), rng);
    }
  }
  return out;
}

namespace {

std::vector<PixelRef> refs_of(const std::vector<SampleMeta>& metas) {
  std::vector<PixelRef> out;
  out.reserve(metas.size());
  for (const SampleMeta& m : metas) out.push_back(m.px);
  return out;
}

}  // namespace

SampleSets build_sample_sets(const std::vector<PixelPartition>& partitions,
                             const std::vector<Domain>& domains, const Projector& projector,
                             const ad::Var& decoder_feats, const SamplingBudget& budget,
                             SamplingMode mode, Rng& rng) {
  SampleSets sets;
  sets.idx = select_samples(partitions, domains, budget, mode, rng);
  auto project = [&](const std::vector<SampleMeta>& metas) {
    return projector.project_pixels(decoder_feats, refs_of(metas));
  };
  sets.anchors_v = project(sets.idx.anchors_v);
  sets.anchors_a = project(sets.idx.anchors_a);
  sets.positives_v = project(sets.idx.positives_v);
  sets.positives_a = sets.idx.cross_domain ? sets.positives_v : project(sets.idx.positives_a);
  sets.negatives_v = project(sets.idx.negatives_v);
  sets.negatives_a = project(sets.idx.negatives_a);
  return sets;
}

CacResult cac_loss(const SampleSets& sets, double alpha, bool log_variant) {
  if (alpha <= 0.0) throw ConfigError("temperature must be positive");
  CacResult res;
  long av = sets.anchors_v ? sets.anchors_v->value.dim(0) : 0;
  long aa = sets.anchors_a ? sets.anchors_a->value.dim(0) : 0;
  long pv = sets.positives_v ? sets.positives_v->value.dim(0) : 0;
  long pa = sets.positives_a ? sets.positives_a->value.dim(0) : 0;
  res.v_skipped = av == 0;
  res.a_skipped = aa == 0;
  if ((av > 0 && pv == 0) || (aa > 0 && pa == 0))
    throw ContractViolation("cac_loss: positive set is empty");

  std::vector<ad::Var> terms;
  auto domain_term = [&](const ad::Var& anchors, const ad::Var& positives, const ad::Var& negs) {
    ad::Var dots_p = ad::matmul_nt(anchors, positives);
    long nn = negs ? negs->value.dim(0) : 0;
    ad::Var dots_n = nn > 0 ? ad::matmul_nt(anchors, negs)
                            : ad::constant(Tensor({anchors->value.dim(0), 0}));
    return ad::contrastive_domain_term(dots_p, dots_n, alpha, log_variant);
  };
  if (av > 0) terms.push_back(domain_term(sets.anchors_v, sets.positives_v, sets.negatives_v));
  if (aa > 0) terms.push_back(domain_term(sets.anchors_a, sets.positives_a, sets.negatives_a));

  if (terms.empty()) {
    res.loss = ad::constant(Tensor::scalar(0.0));
  } else if (terms.size() == 1) {
    res.loss = ad::neg(terms[0]);
  } else {
    res.loss = ad::neg(ad::add(terms[0], terms[1]));
  }
  return res;
}

}  // namespace anomseg::contrast

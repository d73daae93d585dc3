#include "anomseg/domain_adv.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace anomseg::adv {

void SmoothingSchedule::validate() const {
  if (tau_base < 0.5 || tau_base > 1.0)
    throw ConfigError("tau_base must lie in [0.5, 1]");
  if (max_iters < 1) throw ConfigError("max_iters must be >= 1");
}

double tau_at(long iteration, const SmoothingSchedule& sched, bool* clamped) {
  sched.validate();
  if (clamped) *clamped = false;
  if (iteration < 0) throw ContractViolation("tau_at: negative iteration");
  if (iteration > sched.max_iters) {
    if (clamped)
      *clamped = true;
    else
      std::fprintf(stderr, "[anomseg] warning: iteration %ld past schedule end %ld, tau clamped to 0.5\n",
                   iteration, sched.max_iters);
    return 0.5;
  }
  return sched.tau_base - (sched.tau_base - 0.5) * static_cast<double>(iteration) /
                              static_cast<double>(sched.max_iters);
}

DomainLabelMaps DomainLabelMaps::make(long h, long w, double tau) {
  DomainLabelMaps m;
  m.y_v = Tensor::full({h, w}, tau);
  m.y_a = Tensor::full({h, w}, 1.0 - tau);
  return m;
}

void ClassifierConfig::validate() const {
  if (kind == ClfKind::feature) {
    if (in_channels < 8) throw ConfigError("feature classifier needs >= 8 input channels");
    if (in_channels % 8 != 0)
      throw ConfigError("feature classifier input channels must be divisible by 8");
  } else {
    if (in_channels < 1) throw ConfigError("output classifier needs >= 1 input channel");
  }
  if (input_pool < 1) throw ConfigError("classifier input_pool must be >= 1");
}

DomainClassifier::DomainClassifier(ClassifierConfig cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  const char* tag = cfg_.kind == ClfKind::feature ? "d_f" : "d_o";
  if (cfg_.stem_from > 0 && cfg_.stem_from != cfg_.in_channels) {
    has_stem_ = true;
    stem_.w = params_.make(std::string(tag) + ".stem.w",
                           net::he_init({cfg_.in_channels, cfg_.stem_from, 1, 1},
                                        cfg_.stem_from, rng));
    stem_.b = params_.make(std::string(tag) + ".stem.b", Tensor({cfg_.in_channels}));
  }
  std::vector<int> widths = hidden_widths();
  int ci = cfg_.in_channels;
  for (size_t i = 0; i < widths.size(); ++i) {
    int co = widths[i];
    Layer l;
    std::string base = std::string(tag) + "." + std::to_string(i);
    l.w = params_.make(base + ".w", net::he_init({co, ci, 3, 3}, static_cast<long>(ci) * 9, rng));
    l.b = params_.make(base + ".b", Tensor({co}));
    layers_.push_back(l);
    ci = co;
  }
}

std::vector<int> DomainClassifier::hidden_widths() const {
  if (cfg_.kind == ClfKind::feature) {
    int ic = cfg_.in_channels;
    return {ic / 2, ic / 4, ic / 8, 1};
  }
  return {32, 64, 128, 256, 1};
}

ad::Var DomainClassifier::forward(const ad::Var& x) const {
  int expect = has_stem_ ? cfg_.stem_from : cfg_.in_channels;
  if (x->value.dim(1) != expect)
    throw ContractViolation("domain classifier: input channel mismatch");
  ad::Var cur = cfg_.input_pool > 1 ? ad::avg_pool(x, cfg_.input_pool) : x;
  if (has_stem_) cur = ad::conv2d(cur, stem_.w, stem_.b, 1, 0);
  for (size_t i = 0; i < layers_.size(); ++i) {
    cur = ad::conv2d(cur, layers_[i].w, layers_[i].b, 1, 1);
    if (i + 1 < layers_.size()) cur = ad::relu(cur);
  }
  return ad::sigmoid(cur);
}

namespace {

ad::Var per_domain_term(const ad::Var& pred, const Tensor& target) {
  const Tensor& pv = pred->value;
  if (pv.ndim() != 4 || pv.dim(1) != 1)
    throw ContractViolation("mda loss: prediction must be [N,1,h,w]");
  if (pv.dim(2) != target.dim(0) || pv.dim(3) != target.dim(1))
    throw ContractViolation("mda loss: label map shape mismatch");
  long n = pv.dim(0);
  Tensor tiled({n, 1, target.dim(0), target.dim(1)});
  for (long i = 0; i < n; ++i)
    std::copy(target.data(), target.data() + target.numel(),
              tiled.data() + i * target.numel());
  ad::Var diff = ad::sub(pred, ad::constant(std::move(tiled)));
  return ad::mean_vec(ad::mean_per_example(ad::square(diff)));
}

}  // namespace

ad::Var mda_confusion_loss(const ad::Var& p_v, const ad::Var& p_a, const Tensor& y_v,
                           const Tensor& y_a) {
  return ad::add(per_domain_term(p_v, y_a), per_domain_term(p_a, y_v));
}

ad::Var mda_discriminator_loss(const ad::Var& p_v, const ad::Var& p_a, const Tensor& y_v,
                               const Tensor& y_a) {
  return ad::add(per_domain_term(p_v, y_v), per_domain_term(p_a, y_a));
}

contrast::SamplingMode StepOptions::sampling_mode() const {
  if (pcl) return contrast::SamplingMode::same_domain_random;
  return as ? contrast::SamplingMode::cross_domain_aware
            : contrast::SamplingMode::cross_domain_random;
}

void StepOptions::validate() const {
  if (pcl && cpcl) throw ConfigError("pcl and cpcl are mutually exclusive");
  if (as && !cpcl) throw ConfigError("anomaly-aware sampling (as) requires cpcl");
  if (lambda_f < 0 || lambda_o < 0 || lambda_c < 0)
    throw ConfigError("loss weights must be >= 0");
  if (contrastive_enabled()) budget.validate();
}

namespace {

// A zero weight disables its component outright: nothing is computed and the
// report shows an exact 0 for that column.
StepOptions effective_options(const StepOptions& opts) {
  StepOptions o = opts;
  if (o.lambda_f == 0.0) o.fda = false;
  if (o.lambda_o == 0.0) o.oda = false;
  if (o.lambda_c == 0.0) {
    o.pcl = false;
    o.cpcl = false;
    o.as = false;
  }
  return o;
}

Tensor slice_examples(const Tensor& t, const std::vector<long>& idx) {
  long rest = t.numel() / t.dim(0);
  std::vector<long> shape = t.shape();
  shape[0] = static_cast<long>(idx.size());
  Tensor out(shape);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(t.data() + idx[i] * rest, t.data() + (idx[i] + 1) * rest,
              out.data() + static_cast<long>(i) * rest);
  return out;
}

void require_both_domains(const net::Batch& batch, const StepOptions& opts) {
  if (!(opts.oda || opts.fda || opts.cpcl)) return;
  if (batch.indices_of(Domain::V).empty() || batch.indices_of(Domain::A).empty())
    throw ContractViolation(
        "adversarial step: batch must contain samples from both domains");
}

double resolve_tau(long iteration, const SmoothingSchedule& sched, bool dls) {
  if (!dls) return sched.tau_base;
  bool clamped = false;
  double t = tau_at(iteration, sched, &clamped);
  if (clamped)
    std::fprintf(stderr, "[anomseg] warning: tau clamped to 0.5 at iteration %ld\n", iteration);
  return t;
}

void check_finite(double v, const char* what) {
  if (std::isnan(v)) throw TrainingError(std::string("NaN in loss component: ") + what);
}

PhaseOneOut phase1_impl(const TrainerRefs& refs, const net::Batch& batch,
                        const net::ForwardResult& fwd, double tau, const StepOptions& opts) {
  PhaseOneOut out;
  out.tau = tau;
  if (!(opts.oda || opts.fda)) return out;
  auto idx_v = batch.indices_of(Domain::V);
  auto idx_a = batch.indices_of(Domain::A);

  auto train_classifier = [&](DomainClassifier* clf, optim::Adam* opt, const ad::Var& source,
                              double* loss_out) {
    // model detached: the classifier sees value copies, not graph nodes
    ad::Var in_v = ad::constant(slice_examples(source->value, idx_v));
    ad::Var in_a = ad::constant(slice_examples(source->value, idx_a));
    ad::Var p_v = clf->forward(in_v);
    ad::Var p_a = clf->forward(in_a);
    DomainLabelMaps labels = DomainLabelMaps::make(p_v->value.dim(2), p_v->value.dim(3), tau);
    ad::Var loss = mda_discriminator_loss(p_v, p_a, labels.y_v, labels.y_a);
    ad::backward(loss);
    opt->step(opts.lr);
    *loss_out = ad::item(loss);
    check_finite(*loss_out, "discriminator loss");
  };

  if (opts.fda) {
    if (!refs.d_f || !refs.d_f_opt) throw ContractViolation("fda enabled without a feature classifier");
    train_classifier(refs.d_f, refs.d_f_opt, fwd.coarse_feat, &out.d_f_loss);
  }
  if (opts.oda) {
    if (!refs.d_o || !refs.d_o_opt) throw ContractViolation("oda enabled without an output classifier");
    train_classifier(refs.d_o, refs.d_o_opt, fwd.pred.prob, &out.d_o_loss);
  }
  return out;
}

LossReport phase2_impl(const TrainerRefs& refs, const net::Batch& batch,
                       const net::ForwardResult& fwd, double tau, long iteration,
                       const StepOptions& opts) {
  LossReport rep;
  rep.iteration = iteration;
  rep.lr = opts.lr;
  rep.tau = tau;

  auto idx_v = batch.indices_of(Domain::V);
  auto idx_a = batch.indices_of(Domain::A);

  ad::zero_grad(refs.model_opt->params());

  ad::BceResult ce = ad::bce_with_ignore(fwd.pred.logits, batch.gt);
  rep.l_ce = ad::item(ce.loss);
  rep.ce_all_ignored = ce.all_ignored;
  check_finite(rep.l_ce, "cross-entropy");
  if (ce.all_ignored)
    std::fprintf(stderr, "[anomseg] warning: all pixels ignored in CE at iteration %ld\n",
                 iteration);
  ad::Var total = ce.loss;

  auto confusion_for = [&](DomainClassifier* clf, const ad::Var& source) {
    ad::Var p_v = clf->forward(ad::select_examples(source, idx_v));
    ad::Var p_a = clf->forward(ad::select_examples(source, idx_a));
    DomainLabelMaps labels = DomainLabelMaps::make(p_v->value.dim(2), p_v->value.dim(3), tau);
    return mda_confusion_loss(p_v, p_a, labels.y_v, labels.y_a);
  };

  if (opts.fda) {
    ad::Var conf = confusion_for(refs.d_f, fwd.coarse_feat);
    rep.l_mda_f = ad::item(conf);
    check_finite(rep.l_mda_f, "feature-level adversarial loss");
    total = ad::add(total, ad::mul_scalar(conf, opts.lambda_f));
  }
  if (opts.oda) {
    ad::Var conf = confusion_for(refs.d_o, fwd.pred.prob);
    rep.l_mda_o = ad::item(conf);
    check_finite(rep.l_mda_o, "output-level adversarial loss");
    total = ad::add(total, ad::mul_scalar(conf, opts.lambda_o));
  }

  if (opts.contrastive_enabled()) {
    if (!refs.projector) throw ContractViolation("contrastive loss enabled without a projector");
    const Tensor& probs = fwd.pred.prob->value;
    long h = probs.dim(2), w = probs.dim(3);
    std::vector<contrast::PixelPartition> parts;
    for (long i = 0; i < batch.size(); ++i) {
      Tensor plane({h, w});
      std::copy(probs.data() + i * h * w, probs.data() + (i + 1) * h * w, plane.data());
      parts.push_back(contrast::partition_pixels(batch.gt[static_cast<size_t>(i)], plane,
                                                 opts.hardness_threshold, static_cast<int>(i)));
    }
    Rng rng(opts.sampling_seed);
    contrast::SampleSets sets = contrast::build_sample_sets(
        parts, batch.domains, *refs.projector, fwd.penult, opts.budget, opts.sampling_mode(), rng);
    contrast::CacResult cac = contrast::cac_loss(sets, opts.budget.temperature, opts.log_variant);
    rep.l_cac = ad::item(cac.loss);
    rep.cac_v_skipped = cac.v_skipped;
    rep.cac_a_skipped = cac.a_skipped;
    check_finite(rep.l_cac, "contrastive loss");
    if (cac.v_skipped || cac.a_skipped)
      std::fprintf(stderr,
                   "[anomseg] note: contrastive term skipped for domain %s at iteration %ld\n",
                   cac.v_skipped ? "V" : "A", iteration);
    total = ad::add(total, ad::mul_scalar(cac.loss, opts.lambda_c));
  }

  rep.l_total = ad::item(total);
  check_finite(rep.l_total, "total loss");
  ad::backward(total);
  refs.model_opt->step(opts.lr);
  // classifiers stay frozen in this phase; grads that reached them through the
  // confusion path are discarded
  if (refs.d_f_opt) ad::zero_grad(refs.d_f_opt->params());
  if (refs.d_o_opt) ad::zero_grad(refs.d_o_opt->params());
  return rep;
}

}  // namespace

PhaseOneOut discriminator_phase(const TrainerRefs& refs, const net::Batch& batch, long iteration,
                                const SmoothingSchedule& sched, const StepOptions& raw_opts) {
  raw_opts.validate();
  StepOptions opts = effective_options(raw_opts);
  require_both_domains(batch, opts);
  double tau = resolve_tau(iteration, sched, opts.dls);
  net::ForwardResult fwd = refs.model->forward(batch);
  return phase1_impl(refs, batch, fwd, tau, opts);
}

LossReport model_phase(const TrainerRefs& refs, const net::Batch& batch, long iteration,
                       const SmoothingSchedule& sched, const StepOptions& raw_opts) {
  raw_opts.validate();
  StepOptions opts = effective_options(raw_opts);
  require_both_domains(batch, opts);
  double tau = resolve_tau(iteration, sched, opts.dls);
  net::ForwardResult fwd = refs.model->forward(batch);
  return phase2_impl(refs, batch, fwd, tau, iteration, opts);
}

LossReport adversarial_step(const TrainerRefs& refs, const net::Batch& batch, long iteration,
                            const SmoothingSchedule& sched, const StepOptions& raw_opts) {
  raw_opts.validate();
  StepOptions opts = effective_options(raw_opts);
  require_both_domains(batch, opts);
  double tau = resolve_tau(iteration, sched, opts.dls);
  // One model forward serves both phases: phase 1 consumes detached values,
  // phase 2 reuses the same graph (model weights are unchanged by phase 1).
  net::ForwardResult fwd = refs.model->forward(batch);
  PhaseOneOut p1 = phase1_impl(refs, batch, fwd, tau, opts);
  LossReport rep = phase2_impl(refs, batch, fwd, tau, iteration, opts);
  rep.d_f_loss = p1.d_f_loss;
  rep.d_o_loss = p1.d_o_loss;
  return rep;
}

}  // namespace anomseg::adv

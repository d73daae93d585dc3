#pragma once

#include <optional>
#include <string>
#include <vector>

#include "anomseg/autodiff.hpp"
#include "anomseg/common.hpp"
#include "anomseg/contrastive.hpp"
#include "anomseg/dissim_net.hpp"
#include "anomseg/optim.hpp"

namespace anomseg::adv {

// Dynamic label smoothing: tau(i) = tau_base - (tau_base - 0.5) * i / max_iters.
struct SmoothingSchedule {
  double tau_base = 1.0;
  long max_iters = 1;

  void validate() const;
};

// tau is clamped to 0.5 past max_iters; *clamped reports that case.
double tau_at(long iteration, const SmoothingSchedule& sched, bool* clamped = nullptr);

// Constant ground-truth domain maps: Y_V filled with tau, Y_A with 1-tau.
struct DomainLabelMaps {
  Tensor y_v;
  Tensor y_a;

  static DomainLabelMaps make(long h, long w, double tau);
};

enum class ClfKind { feature, output };

struct ClassifierConfig {
  ClfKind kind = ClfKind::feature;
  int in_channels = 0;
  // Area-average pool applied to the input before the conv stack; used to
  // keep the output classifier affordable on CPU at toy resolutions.
  int input_pool = 1;
  // Feature-kind inputs whose channel count is not divisible by 8 go through
  // a 1x1 stem that maps stem_from -> in_channels; 0 disables the stem.
  int stem_from = 0;

  void validate() const;
};

// Four (feature) / five (output) 3x3 stride-1 convs with ReLU between and a
// sigmoid on the final single-channel map.
class DomainClassifier {
 public:
  DomainClassifier(ClassifierConfig cfg, Rng& rng);

  const ClassifierConfig& config() const { return cfg_; }
  std::vector<int> hidden_widths() const;
  net::ParamSet& params() { return params_; }
  const net::ParamSet& params() const { return params_; }

  // single-channel sigmoid map
  ad::Var forward(const ad::Var& x) const;

 private:
  ClassifierConfig cfg_;
  net::ParamSet params_;
  struct Layer {
    ad::Var w, b;
  };
  std::vector<Layer> layers_;
  Layer stem_;
  bool has_stem_ = false;
};

// Eq-style multi-source losses. P_V/P_A are [Nv,1,h,w] / [Na,1,h,w] predicted
// domain maps; Y maps are [h,w] constants, broadcast over each batch. Spatial
// positions are averaged within each example, then over examples per domain.
//
// Confusion form (generator path): (P_V - Y_A)^2 + (P_A - Y_V)^2.
ad::Var mda_confusion_loss(const ad::Var& p_v, const ad::Var& p_a, const Tensor& y_v,
                           const Tensor& y_a);
// Discriminator form (true targets): (P_V - Y_V)^2 + (P_A - Y_A)^2.
ad::Var mda_discriminator_loss(const ad::Var& p_v, const ad::Var& p_a, const Tensor& y_v,
                               const Tensor& y_a);

struct StepOptions {
  double lambda_f = 0.04;
  double lambda_o = 0.06;
  double lambda_c = 0.1;
  bool oda = true;   // output-level adversarial
  bool fda = true;   // feature-level adversarial
  bool dls = true;   // dynamic label smoothing (off: tau stays at tau_base)
  bool pcl = false;  // same-domain contrastive, random sampling
  bool cpcl = false; // cross-domain contrastive, random sampling
  bool as = false;   // anomaly-aware sampling (upgrades the contrastive mode)
  contrast::SamplingBudget budget;
  double hardness_threshold = 0.5;
  bool log_variant = false;
  double lr = 1e-4;          // schedule-resolved learning rate for this step
  uint64_t sampling_seed = 0;

  bool contrastive_enabled() const { return pcl || cpcl; }
  contrast::SamplingMode sampling_mode() const;
  void validate() const;
};

struct LossReport {
  long iteration = 0;
  double lr = 0, tau = 0;
  double l_ce = 0, l_mda_f = 0, l_mda_o = 0, l_cac = 0, l_total = 0;
  double d_f_loss = 0, d_o_loss = 0;
  bool cac_v_skipped = false, cac_a_skipped = false, ce_all_ignored = false;
};

// Everything the two training phases need. Classifier/optimizer pointers may
// be null when the corresponding switch is off.
struct TrainerRefs {
  net::DissimNet* model = nullptr;
  DomainClassifier* d_f = nullptr;
  DomainClassifier* d_o = nullptr;
  contrast::Projector* projector = nullptr;
  optim::Adam* model_opt = nullptr;  // owns model + projector parameters
  optim::Adam* d_f_opt = nullptr;
  optim::Adam* d_o_opt = nullptr;
};

// Phase 1: update the domain classifiers on detached model outputs.
// Phase 2: update the model (and projector) against frozen classifiers with
// L_CE + λ_f·confusion(D_f) + λ_o·confusion(D_o) + λ_c·L_CAC.
// adversarial_step runs phase 1 then phase 2 and refreshes tau each call.
LossReport adversarial_step(const TrainerRefs& refs, const net::Batch& batch, long iteration,
                            const SmoothingSchedule& sched, const StepOptions& opts);

// Exposed separately so gradient-separation audits can run phase by phase.
struct PhaseOneOut {
  double d_f_loss = 0, d_o_loss = 0;
  double tau = 0;
};
PhaseOneOut discriminator_phase(const TrainerRefs& refs, const net::Batch& batch, long iteration,
                                const SmoothingSchedule& sched, const StepOptions& opts);
LossReport model_phase(const TrainerRefs& refs, const net::Batch& batch, long iteration,
                       const SmoothingSchedule& sched, const StepOptions& opts);

}  // namespace anomseg::adv

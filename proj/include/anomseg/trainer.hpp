#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "anomseg/config.hpp"
#include "anomseg/datagen.hpp"
#include "anomseg/domain_adv.hpp"
#include "anomseg/metrics.hpp"
#include "anomseg/optim.hpp"

namespace anomseg::train {

using LossReport = adv::LossReport;

double poly_lr(long i, long max_i, double base_lr, double power);

// Eq-4-style weighted sum; disabled ablation components contribute exactly 0.
// NaN components abort with a diagnostic.
double total_loss(double l_ce, double l_mda_f, double l_mda_o, double l_cac,
                  const TrainConfig& cfg);

datagen::Sample flip_horizontal(const datagen::Sample& s);
// joint horizontal flip of all planes with probability 0.5
datagen::Sample augment(const datagen::Sample& s, Rng& rng);

// Builds network-ready tensors (documented channel normalization, one-hot
// semantics) from dataset samples.
net::Batch assemble_batch(const std::vector<const datagen::Sample*>& samples, int num_classes);

// Deterministic batch plan for one iteration: per-domain epoch shuffles walked
// in fixed-size slots (V picks first, then A). Single-domain datasets fall
// back to whole-batch sampling from the available pool.
std::vector<long> batch_indices(const std::vector<long>& idx_v, const std::vector<long>& idx_a,
                                const TrainConfig& cfg, long iteration, long iters_per_epoch);

// The full mutable training state: model, classifiers, projector, optimizers
// and the iteration counter. Exactly one trainer owns it.
struct TrainerState {
  TrainConfig cfg;
  net::NetConfig net_cfg;
  std::unique_ptr<net::DissimNet> model;
  std::unique_ptr<adv::DomainClassifier> d_f, d_o;
  std::unique_ptr<contrast::Projector> projector;
  std::unique_ptr<optim::Adam> model_opt, d_f_opt, d_o_opt;
  long iteration = 0;
  long max_iters = 0;  // schedule horizon, fixed at the start of a run

  static TrainerState create(const TrainConfig& cfg, int in_h, int in_w);
  adv::TrainerRefs refs();
  // all parameters under their checkpoint names: model.*, d_f.*, d_o.*, proj.*
  std::vector<std::pair<std::string, ad::Var>> named_params() const;
};

struct RunResult {
  std::vector<LossReport> reports;
  std::filesystem::path final_checkpoint;
  long iters_per_epoch = 0;
};

// Runs the remaining iterations (fresh state: all of them). With an output
// directory, writes loss.csv, the resolved config and per-epoch checkpoints.
RunResult train_run(TrainerState& st, const datagen::Dataset& data,
                    const std::optional<std::filesystem::path>& out_dir);

std::string loss_csv_header();
std::string loss_csv_row(const LossReport& r);

// anomaly probability map [H,W] for one sample under the current weights
Tensor score_sample(const TrainerState& st, const datagen::Sample& s);
metrics::EvalReport evaluate_dataset(const TrainerState& st, const datagen::Dataset& data);

}  // namespace anomseg::train

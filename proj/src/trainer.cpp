#include "anomseg/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "anomseg/checkpoint.hpp"

namespace anomseg::train {

double poly_lr(long i, long max_i, double base_lr, double power) {
  if (i < 0 || i > max_i || max_i < 1) throw ContractViolation("poly_lr: iteration out of range");
  return base_lr * std::pow(1.0 - static_cast<double>(i) / static_cast<double>(max_i), power);
}

double total_loss(double l_ce, double l_mda_f, double l_mda_o, double l_cac,
                  const TrainConfig& cfg) {
  double f = cfg.fda ? l_mda_f : 0.0;
  double o = cfg.oda ? l_mda_o : 0.0;
  double c = (cfg.pcl || cfg.cpcl) ? l_cac : 0.0;
  for (auto [v, name] : {std::pair<double, const char*>{l_ce, "L_CE"},
                         {f, "L_MDA_f"},
                         {o, "L_MDA_o"},
                         {c, "L_CAC"}})
    if (std::isnan(v)) throw TrainingError(std::string("NaN in loss component ") + name);
  return l_ce + cfg.lambda_f * f + cfg.lambda_o * o + cfg.lambda_c * c;
}

namespace {

Tensor flip_plane(const Tensor& t) {
  Tensor out(t.shape());
  if (t.ndim() == 3) {
    long c = t.dim(0), h = t.dim(1), w = t.dim(2);
    for (long ch = 0; ch < c; ++ch)
      for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) out.at3(ch, y, x) = t.at3(ch, y, w - 1 - x);
  } else {
    long h = t.dim(0), w = t.dim(1);
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) out.at2(y, x) = t.at2(y, w - 1 - x);
  }
  return out;
}

ByteMap flip_map(const ByteMap& m) {
  ByteMap out(m.h, m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) out.at(y, x) = m.at(y, m.w - 1 - x);
  return out;
}

}  // namespace

datagen::Sample flip_horizontal(const datagen::Sample& s) {
  datagen::Sample out;
  out.image = flip_plane(s.image);
  out.recon = flip_plane(s.recon);
  out.uncertainty = flip_plane(s.uncertainty);
  out.semantic = flip_map(s.semantic);
  out.gt = flip_map(s.gt);
  out.domain = s.domain;
  return out;
}

datagen::Sample augment(const datagen::Sample& s, Rng& rng) {
  return rng.uniform() < 0.5 ? flip_horizontal(s) : s;
}

net::Batch assemble_batch(const std::vector<const datagen::Sample*>& samples, int num_classes) {
  if (samples.empty()) throw ContractViolation("assemble_batch: empty batch");
  long n = static_cast<long>(samples.size());
  long h = samples[0]->image.dim(1), w = samples[0]->image.dim(2);
  net::Batch b;
  b.image = Tensor({n, 3, h, w});
  b.recon = Tensor({n, 3, h, w});
  b.sem_onehot = Tensor({n, num_classes, h, w});
  b.uncertainty = Tensor({n, 1, h, w});
  for (long i = 0; i < n; ++i) {
    const datagen::Sample& s = *samples[static_cast<size_t>(i)];
    if (s.image.dim(1) != h || s.image.dim(2) != w)
      throw ContractViolation("assemble_batch: inconsistent sample sizes");
    for (long c = 0; c < 3; ++c)
      for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
          b.image.at4(i, c, y, x) = (s.image.at3(c, y, x) - net::kImageMean) / net::kImageStd;
          b.recon.at4(i, c, y, x) = (s.recon.at3(c, y, x) - net::kImageMean) / net::kImageStd;
        }
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        uint8_t cls = s.semantic.at(static_cast<int>(y), static_cast<int>(x));
        if (cls >= num_classes)
          throw ContractViolation("assemble_batch: semantic class exceeds num_classes");
        b.sem_onehot.at4(i, cls, y, x) = 1.0;
        b.uncertainty.at4(i, 0, y, x) = s.uncertainty.at2(y, x);
      }
    b.gt.push_back(s.gt);
    b.domains.push_back(s.domain);
  }
  return b;
}

TrainerState TrainerState::create(const TrainConfig& cfg, int in_h, int in_w) {
  cfg.validate();
  TrainerState st;
  st.cfg = cfg;
  st.net_cfg.levels = cfg.levels;
  st.net_cfg.base_channels = cfg.base_channels;
  st.net_cfg.in_h = in_h;
  st.net_cfg.in_w = in_w;
  st.net_cfg.num_classes = cfg.num_classes;
  st.net_cfg.norm = net::norm_mode_from_string(cfg.norm_mode);
  st.net_cfg.validate();

  // Component init order is fixed and switch-independent so that a given seed
  // yields the same model weights in every ablation configuration.
  Rng model_rng(derive_seed(cfg.seed, "init.model"));
  st.model = std::make_unique<net::DissimNet>(st.net_cfg, model_rng);

  int coarse = st.net_cfg.coarsest_channels();
  adv::ClassifierConfig fcfg;
  fcfg.kind = adv::ClfKind::feature;
  if (coarse % 8 == 0) {
    fcfg.in_channels = coarse;
  } else {
    fcfg.in_channels = std::max(8, coarse / 8 * 8);
    fcfg.stem_from = coarse;
  }
  Rng df_rng(derive_seed(cfg.seed, "init.d_f"));
  st.d_f = std::make_unique<adv::DomainClassifier>(fcfg, df_rng);

  adv::ClassifierConfig ocfg;
  ocfg.kind = adv::ClfKind::output;
  ocfg.in_channels = 1;
  ocfg.input_pool = cfg.out_clf_pool;
  Rng do_rng(derive_seed(cfg.seed, "init.d_o"));
  st.d_o = std::make_unique<adv::DomainClassifier>(ocfg, do_rng);

  contrast::ProjectorConfig pcfg;
  pcfg.in_channels = cfg.base_channels;
  Rng proj_rng(derive_seed(cfg.seed, "init.projector"));
  st.projector = std::make_unique<contrast::Projector>(pcfg, proj_rng);

  std::vector<ad::Var> model_params = st.model->params().vars();
  for (const auto& v : st.projector->params().vars()) model_params.push_back(v);
  st.model_opt = std::make_unique<optim::Adam>(std::move(model_params));
  st.d_f_opt = std::make_unique<optim::Adam>(st.d_f->params().vars());
  st.d_o_opt = std::make_unique<optim::Adam>(st.d_o->params().vars());
  return st;
}

adv::TrainerRefs TrainerState::refs() {
  adv::TrainerRefs r;
  r.model = model.get();
  r.d_f = d_f.get();
  r.d_o = d_o.get();
  r.projector = projector.get();
  r.model_opt = model_opt.get();
  r.d_f_opt = d_f_opt.get();
  r.d_o_opt = d_o_opt.get();
  return r;
}

std::vector<std::pair<std::string, ad::Var>> TrainerState::named_params() const {
  std::vector<std::pair<std::string, ad::Var>> out;
  for (const auto& [n, v] : model->params().items) out.emplace_back("model." + n, v);
  for (const auto& [n, v] : projector->params().items) out.emplace_back("projector." + n, v);
  for (const auto& [n, v] : d_f->params().items) out.emplace_back("clf_f." + n, v);
  for (const auto& [n, v] : d_o->params().items) out.emplace_back("clf_o." + n, v);
  return out;
}

std::string loss_csv_header() {
  return "iteration,lr,tau,l_ce,l_mda_f,l_mda_o,l_cac,l_total,d_f_loss,d_o_loss";
}

std::string loss_csv_row(const LossReport& r) {
  std::string row = std::to_string(r.iteration);
  for (double v : {r.lr, r.tau, r.l_ce, r.l_mda_f, r.l_mda_o, r.l_cac, r.l_total, r.d_f_loss,
                   r.d_o_loss}) {
    row += ",";
    row += fmt_g17(v);
  }
  return row;
}

namespace {

adv::StepOptions step_options(const TrainConfig& cfg) {
  adv::StepOptions o;
  o.lambda_f = cfg.lambda_f;
  o.lambda_o = cfg.lambda_o;
  o.lambda_c = cfg.lambda_c;
  o.oda = cfg.oda;
  o.fda = cfg.fda;
  o.dls = cfg.dls;
  o.pcl = cfg.pcl;
  o.cpcl = cfg.cpcl;
  o.as = cfg.as;
  o.budget = cfg.budget();
  o.hardness_threshold = cfg.hardness_threshold;
  o.log_variant = cfg.log_variant;
  return o;
}

std::vector<long> epoch_order(const std::vector<long>& pool, uint64_t seed, const char* tag,
                              long epoch) {
  std::vector<long> perm = pool;
  Rng rng(derive_seed(seed, tag, static_cast<uint64_t>(epoch)));
  rng.shuffle(perm);
  return perm;
}

}  // namespace

std::vector<long> batch_indices(const std::vector<long>& idx_v, const std::vector<long>& idx_a,
                                const TrainConfig& cfg, long iteration, long iters_per_epoch) {
  long epoch = iteration / iters_per_epoch;
  long slot = iteration % iters_per_epoch;
  std::vector<long> picks;
  bool both = !idx_v.empty() && !idx_a.empty();
  if (both) {
    auto perm_v = epoch_order(idx_v, cfg.seed, "order.v", epoch);
    auto perm_a = epoch_order(idx_a, cfg.seed, "order.a", epoch);
    for (long k = 0; k < cfg.per_domain; ++k)
      picks.push_back(perm_v[static_cast<size_t>(slot * cfg.per_domain + k)]);
    for (long k = 0; k < cfg.per_domain; ++k)
      picks.push_back(perm_a[static_cast<size_t>(slot * cfg.per_domain + k)]);
  } else {
    const auto& pool = idx_v.empty() ? idx_a : idx_v;
    auto perm = epoch_order(pool, cfg.seed, "order.single", epoch);
    for (long k = 0; k < cfg.batch_size; ++k)
      picks.push_back(perm[static_cast<size_t>(slot * cfg.batch_size + k)]);
  }
  return picks;
}

RunResult train_run(TrainerState& st, const datagen::Dataset& data,
                    const std::optional<std::filesystem::path>& out_dir) {
  const TrainConfig& cfg = st.cfg;
  auto idx_v = data.indices_of(Domain::V);
  auto idx_a = data.indices_of(Domain::A);
  bool both = !idx_v.empty() && !idx_a.empty();
  bool needs_both = cfg.oda || cfg.fda || cfg.cpcl;
  if (needs_both && !both)
    throw ConfigError("configuration requires training data from both domains");
  long ipe = 0;
  if (both) {
    if (static_cast<long>(idx_v.size()) < cfg.per_domain ||
        static_cast<long>(idx_a.size()) < cfg.per_domain)
      throw ConfigError("domain starvation: fewer samples than the per-domain batch share");
    ipe = static_cast<long>(std::min(idx_v.size(), idx_a.size())) / cfg.per_domain;
  } else {
    const auto& pool = idx_v.empty() ? idx_a : idx_v;
    if (static_cast<long>(pool.size()) < cfg.batch_size)
      throw ConfigError("domain starvation: fewer samples than one batch");
    ipe = static_cast<long>(pool.size()) / cfg.batch_size;
  }
  if (st.max_iters == 0) st.max_iters = cfg.epochs * ipe;

  adv::SmoothingSchedule sched{cfg.tau_base, st.max_iters};
  adv::TrainerRefs refs = st.refs();

  std::ofstream csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    st.cfg.save(*out_dir / "resolved_config.cfg");
    bool fresh = st.iteration == 0;
    bool new_file = fresh || !std::filesystem::exists(*out_dir / "loss.csv");
    csv.open(*out_dir / "loss.csv", fresh ? std::ios::trunc : std::ios::app);
    if (!csv) throw IoError("cannot write loss.csv in " + out_dir->string());
    if (new_file) csv << loss_csv_header() << "\n";
  }

  RunResult result;
  result.iters_per_epoch = ipe;
  while (st.iteration < st.max_iters) {
    long iter = st.iteration;
    std::vector<long> plan = batch_indices(idx_v, idx_a, cfg, iter, ipe);
    std::vector<const datagen::Sample*> picks;
    for (long i : plan) picks.push_back(&data.samples[static_cast<size_t>(i)]);

    Rng aug_rng(derive_seed(cfg.seed, "augment", static_cast<uint64_t>(iter)));
    std::vector<datagen::Sample> augmented;
    augmented.reserve(picks.size());
    for (const datagen::Sample* s : picks) augmented.push_back(augment(*s, aug_rng));
    std::vector<const datagen::Sample*> ptrs;
    for (const datagen::Sample& s : augmented) ptrs.push_back(&s);
    net::Batch batch = assemble_batch(ptrs, cfg.num_classes);

    adv::StepOptions opts = step_options(cfg);
    opts.lr = poly_lr(iter, st.max_iters, cfg.lr, cfg.poly_power);
    opts.sampling_seed = derive_seed(cfg.seed, "cacl", static_cast<uint64_t>(iter));

    LossReport rep = adv::adversarial_step(refs, batch, iter, sched, opts);
    if (csv.is_open()) csv << loss_csv_row(rep) << "\n";
    result.reports.push_back(rep);

    ++st.iteration;
    if (out_dir && st.iteration % ipe == 0) {
      char name[48];
      std::snprintf(name, sizeof(name), "checkpoint_epoch_%04ld.ckpt", st.iteration / ipe);
      save_checkpoint(st, *out_dir / name);
    }
  }

  if (out_dir) {
    result.final_checkpoint = *out_dir / "final.ckpt";
    save_checkpoint(st, result.final_checkpoint);
  }
  return result;
}

Tensor score_sample(const TrainerState& st, const datagen::Sample& s) {
  net::Batch b = assemble_batch({&s}, st.cfg.num_classes);
  net::ForwardResult fwd = st.model->forward(b);
  const Tensor& prob = fwd.pred.prob->value;
  Tensor out({prob.dim(2), prob.dim(3)});
  std::copy(prob.data(), prob.data() + prob.numel(), out.data());
  return out;
}

metrics::EvalReport evaluate_dataset(const TrainerState& st, const datagen::Dataset& data) {
  if (data.samples.empty()) throw MetricError("evaluate: empty dataset");
  std::vector<std::string> ids;
  bool manifest_ids = data.manifest.samples.size() == data.samples.size();
  for (size_t i = 0; i < data.samples.size(); ++i) {
    if (manifest_ids) {
      ids.push_back(data.manifest.samples[i].id);
    } else {
      char buf[24];
      std::snprintf(buf, sizeof(buf), "sample_%06zu", i);
      ids.push_back(buf);
    }
  }
  return metrics::evaluate(
      [&](long i) {
        metrics::EvalPair pair;
        pair.scores = score_sample(st, data.samples[static_cast<size_t>(i)]);
        pair.labels = data.samples[static_cast<size_t>(i)].gt;
        return pair;
      },
      ids);
}

}  // namespace anomseg::train

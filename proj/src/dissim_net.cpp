#include "anomseg/dissim_net.hpp"

#include <cmath>

namespace anomseg::net {

NormMode norm_mode_from_string(const std::string& s) {
  if (s == "spatial_aware") return NormMode::spatial_aware;
  if (s == "plain") return NormMode::plain;
  throw ConfigError("unknown normalization mode: " + s);
}

std::string to_string(NormMode m) {
  return m == NormMode::spatial_aware ? "spatial_aware" : "plain";
}

void NetConfig::validate() const {
  if (levels < 2) throw ConfigError("levels must be >= 2");
  if (base_channels < 4) throw ConfigError("base_channels must be >= 4");
  int div = 1 << levels;
  if (in_h < div || in_w < div || in_h % div || in_w % div)
    throw ConfigError("input size must be a positive multiple of 2^levels");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
}

std::vector<long> Batch::indices_of(Domain d) const {
  std::vector<long> out;
  for (long i = 0; i < size(); ++i)
    if (domains[static_cast<size_t>(i)] == d) out.push_back(i);
  return out;
}

Tensor he_init(std::vector<long> shape, long fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (long i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, stddev);
  return t;
}

DissimNet::ConvParam DissimNet::conv_param(const std::string& name, int co, int ci, int k,
                                           Rng& rng) {
  ConvParam p;
  p.w = params_.make(name + ".w", he_init({co, ci, k, k}, static_cast<long>(ci) * k * k, rng));
  p.b = params_.make(name + ".b", Tensor({co}));
  return p;
}

DissimNet::DissimNet(NetConfig cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  for (int l = 0; l < cfg_.levels; ++l) {
    int ci = l == 0 ? 3 : cfg_.channels(l - 1);
    enc_img_.push_back(conv_param("enc_img." + std::to_string(l), cfg_.channels(l), ci, 3, rng));
  }
  for (int l = 0; l < cfg_.levels; ++l) {
    int ci = l == 0 ? cfg_.num_classes : cfg_.channels(l - 1);
    enc_sem_.push_back(conv_param("enc_sem." + std::to_string(l), cfg_.channels(l), ci, 3, rng));
  }
  for (int l = 0; l < cfg_.levels; ++l)
    fuse_.push_back(
        conv_param("fuse." + std::to_string(l), cfg_.channels(l), 3 * cfg_.channels(l), 1, rng));

  // Decoder blocks coarse->fine; block d consumes the level's weighted map,
  // concatenated with the upsampled coarser decoded map except at the top.
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    int ci = l == cfg_.levels - 1 ? cfg_.channels(l) : cfg_.channels(l) + cfg_.channels(l + 1);
    dec_.push_back(conv_param("dec." + std::to_string(l), cfg_.channels(l), ci, 3, rng));
  }
  head_feat_ = conv_param("head.feat", cfg_.base_channels, cfg_.base_channels, 3, rng);
  head_logit_ = conv_param("head.logit", 1, cfg_.base_channels, 3, rng);

  // One normalization site per decoder block plus one in the head.
  int n_norm = cfg_.levels + 1;
  for (int i = 0; i < n_norm; ++i) {
    int c = i < cfg_.levels ? cfg_.channels(cfg_.levels - 1 - i) : cfg_.base_channels;
    if (cfg_.norm == NormMode::spatial_aware) {
      norm_gamma_.push_back(
          conv_param("norm." + std::to_string(i) + ".gamma", c, cfg_.num_classes, 1, rng));
      norm_beta_.push_back(
          conv_param("norm." + std::to_string(i) + ".beta", c, cfg_.num_classes, 1, rng));
    } else {
      plain_scale_.push_back(params_.make("norm." + std::to_string(i) + ".scale",
                                          Tensor({static_cast<long>(c)})));
      plain_shift_.push_back(params_.make("norm." + std::to_string(i) + ".shift",
                                          Tensor({static_cast<long>(c)})));
    }
  }
}

std::array<Pyramid, 3> DissimNet::encode(const ad::Var& img, const ad::Var& recon,
                                         const ad::Var& sem_onehot) const {
  const Tensor& iv = img->value;
  if (iv.ndim() != 4 || iv.dim(1) != 3 || iv.dim(2) != cfg_.in_h || iv.dim(3) != cfg_.in_w)
    throw ContractViolation("encode: image shape does not match config");
  if (!recon->value.same_shape(iv)) throw ContractViolation("encode: recon shape mismatch");
  if (sem_onehot->value.dim(1) != cfg_.num_classes)
    throw ContractViolation("encode: semantic channel count mismatch");

  auto run = [&](const ad::Var& x, const std::vector<ConvParam>& stack) {
    Pyramid p;
    ad::Var cur = x;
    for (int l = 0; l < cfg_.levels; ++l) {
      cur = ad::relu(ad::conv2d(cur, stack[static_cast<size_t>(l)].w,
                                stack[static_cast<size_t>(l)].b, 2, 1));
      p.levels.push_back(cur);
    }
    return p;
  };
  return {run(img, enc_img_), run(recon, enc_img_), run(sem_onehot, enc_sem_)};
}

ad::Var DissimNet::fuse_level(const ad::Var& f_img, const ad::Var& f_recon, const ad::Var& f_sem,
                              int level) const {
  if (level < 0 || level >= cfg_.levels) throw ContractViolation("fuse_level: level out of range");
  auto cat = ad::concat_channels({f_img, f_recon, f_sem});
  const ConvParam& f = fuse_[static_cast<size_t>(level)];
  return ad::conv2d(cat, f.w, f.b, 1, 0);
}

ad::Var DissimNet::apply_uncertainty(const ad::Var& fused, const ad::Var& uncertainty_full,
                                     int level) const {
  int factor = 1 << (level + 1);
  ad::Var u = ad::avg_pool(uncertainty_full, factor);
  if (u->value.dim(2) != fused->value.dim(2) || u->value.dim(3) != fused->value.dim(3))
    throw ContractViolation("apply_uncertainty: resolution mismatch");
  return ad::mul_map(fused, ad::add_scalar(u, 1.0));
}

ad::Var DissimNet::normalized(const ad::Var& x, int norm_index, const ad::Var& sem_onehot,
                              int pool_factor) const {
  ad::Var n = ad::instance_norm(x);
  if (cfg_.norm == NormMode::spatial_aware) {
    ad::Var sem = ad::avg_pool(sem_onehot, pool_factor);
    const ConvParam& cg = norm_gamma_[static_cast<size_t>(norm_index)];
    const ConvParam& cb = norm_beta_[static_cast<size_t>(norm_index)];
    ad::Var gamma = ad::conv2d(sem, cg.w, cg.b, 1, 0);
    ad::Var beta = ad::conv2d(sem, cb.w, cb.b, 1, 0);
    return ad::add(ad::mul(n, ad::add_scalar(gamma, 1.0)), beta);
  }
  // plain: learned per-channel affine
  return ad::channel_affine(n, plain_scale_[static_cast<size_t>(norm_index)],
                            plain_shift_[static_cast<size_t>(norm_index)]);
}

std::pair<Prediction, ad::Var> DissimNet::decode(const std::vector<ad::Var>& weighted,
                                                 const ad::Var& sem_onehot) const {
  if (static_cast<int>(weighted.size()) != cfg_.levels)
    throw ContractViolation("decode: pyramid is incomplete");
  ad::Var cur;
  int norm_index = 0;
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    ad::Var in = weighted[static_cast<size_t>(l)];
    if (l < cfg_.levels - 1) in = ad::concat_channels({in, ad::upsample2(cur)});
    const ConvParam& blk = dec_[static_cast<size_t>(cfg_.levels - 1 - l)];
    ad::Var conv = ad::conv2d(in, blk.w, blk.b, 1, 1);
    cur = ad::relu(normalized(conv, norm_index++, sem_onehot, 1 << (l + 1)));
  }
  ad::Var full = ad::upsample2(cur);
  ad::Var feat = ad::conv2d(full, head_feat_.w, head_feat_.b, 1, 1);
  ad::Var penult = ad::relu(normalized(feat, norm_index, sem_onehot, 1));
  Prediction pred;
  pred.logits = ad::conv2d(penult, head_logit_.w, head_logit_.b, 1, 1);
  pred.prob = ad::sigmoid(pred.logits);
  return {pred, penult};
}

ForwardResult DissimNet::forward(const ad::Var& img, const ad::Var& recon,
                                 const ad::Var& sem_onehot, const ad::Var& uncertainty) const {
  auto pyramids = encode(img, recon, sem_onehot);
  std::vector<ad::Var> weighted;
  for (int l = 0; l < cfg_.levels; ++l) {
    ad::Var fused = fuse_level(pyramids[0].levels[static_cast<size_t>(l)],
                               pyramids[1].levels[static_cast<size_t>(l)],
                               pyramids[2].levels[static_cast<size_t>(l)], l);
    weighted.push_back(apply_uncertainty(fused, uncertainty, l));
  }
  auto [pred, penult] = decode(weighted, sem_onehot);
  ForwardResult out;
  out.pred = pred;
  out.penult = penult;
  out.coarse_feat = pyramids[0].levels.back();
  return out;
}

ForwardResult DissimNet::forward(const Batch& batch) const {
  return forward(ad::constant(batch.image), ad::constant(batch.recon),
                 ad::constant(batch.sem_onehot), ad::constant(batch.uncertainty));
}

}  // namespace anomseg::net

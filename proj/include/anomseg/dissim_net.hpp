#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "anomseg/autodiff.hpp"
#include "anomseg/common.hpp"
#include "anomseg/rng.hpp"
#include "anomseg/tensor.hpp"

namespace anomseg::net {

enum class NormMode { spatial_aware, plain };

NormMode norm_mode_from_string(const std::string& s);
std::string to_string(NormMode m);

struct NetConfig {
  int levels = 3;
  int base_channels = 16;
  int in_h = 64;
  int in_w = 64;
  int num_classes = 4;  // semantic one-hot channels
  NormMode norm = NormMode::spatial_aware;

  void validate() const;
  // channels at pyramid level l (0 = finest)
  int channels(int level) const { return base_channels << level; }
  int coarsest_channels() const { return channels(levels - 1); }
};

// Normalization constants applied to image/recon channels when tensors are
// assembled for the network (documented in the README).
constexpr double kImageMean = 0.5;
constexpr double kImageStd = 0.5;

// Batch of network-ready tensors.
struct Batch {
  Tensor image;       // [N,3,H,W], normalized
  Tensor recon;       // [N,3,H,W], normalized
  Tensor sem_onehot;  // [N,K,H,W]
  Tensor uncertainty; // [N,1,H,W], raw [0,1]
  std::vector<ByteMap> gt;
  std::vector<Domain> domains;

  long size() const { return static_cast<long>(domains.size()); }
  std::vector<long> indices_of(Domain d) const;
};

struct Pyramid {
  std::vector<ad::Var> levels;  // fine -> coarse, level l at H/2^{l+1}
};

struct Prediction {
  ad::Var logits;  // [N,1,H,W]
  ad::Var prob;    // sigmoid(logits)
};

struct ForwardResult {
  Prediction pred;
  ad::Var penult;       // [N,base,H,W] full-resolution decoder features
  ad::Var coarse_feat;  // coarsest image-encoder level (domain classifier input)
};

// Named parameter registry shared by the network, domain classifiers and the
// projector; the checkpoint stores tensors under these names.
struct ParamSet {
  std::vector<std::pair<std::string, ad::Var>> items;

  ad::Var make(const std::string& name, Tensor init) {
    auto v = ad::variable(std::move(init));
    items.emplace_back(name, v);
    return v;
  }
  std::vector<ad::Var> vars() const {
    std::vector<ad::Var> out;
    out.reserve(items.size());
    for (const auto& [_, v] : items) out.push_back(v);
    return out;
  }
};

Tensor he_init(std::vector<long> shape, long fan_in, Rng& rng);

// Dissimilarity network: shared image/recon encoder, semantic encoder,
// per-level 1x1 fusion, uncertainty weighting, top-down decoder with
// semantic-modulated normalization, single-logit prediction head.
class DissimNet {
 public:
  DissimNet(NetConfig cfg, Rng& rng);

  const NetConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Three pyramids: image, reconstruction (shared weights), semantic.
  std::array<Pyramid, 3> encode(const ad::Var& img, const ad::Var& recon,
                                const ad::Var& sem_onehot) const;
  ad::Var fuse_level(const ad::Var& f_img, const ad::Var& f_recon, const ad::Var& f_sem,
                     int level) const;
  // weighted = fused * (1 + uncertainty), uncertainty area-resized to the level
  ad::Var apply_uncertainty(const ad::Var& fused, const ad::Var& uncertainty_full,
                            int level) const;
  // weighted maps (fine->coarse) -> prediction + penultimate features
  std::pair<Prediction, ad::Var> decode(const std::vector<ad::Var>& weighted,
                                        const ad::Var& sem_onehot) const;

  ForwardResult forward(const ad::Var& img, const ad::Var& recon, const ad::Var& sem_onehot,
                        const ad::Var& uncertainty) const;
  ForwardResult forward(const Batch& batch) const;

 private:
  struct ConvParam {
    ad::Var w, b;
  };
  ConvParam conv_param(const std::string& name, int co, int ci, int k, Rng& rng);

  ad::Var normalized(const ad::Var& x, int norm_index, const ad::Var& sem_onehot,
                     int pool_factor) const;

  NetConfig cfg_;
  ParamSet params_;
  std::vector<ConvParam> enc_img_;   // shared image/recon encoder
  std::vector<ConvParam> enc_sem_;   // semantic encoder
  std::vector<ConvParam> fuse_;      // 1x1 per level
  std::vector<ConvParam> dec_;       // decoder blocks, coarse->fine order
  ConvParam head_feat_, head_logit_;
  // spatial-aware norm: per norm site, gamma/beta predicted from semantics
  std::vector<ConvParam> norm_gamma_, norm_beta_;
  // plain norm: learned per-channel scale/shift
  std::vector<ad::Var> plain_scale_, plain_shift_;
};

}  // namespace anomseg::net

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "anomseg/common.hpp"
#include "anomseg/tensor.hpp"

namespace anomseg::ad {

// Define-by-run reverse-mode autodiff over Tensor. A fresh graph is built per
// forward pass; parameter leaves persist across passes and accumulate grads.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first use, same shape as value
  bool requires_grad = false;
  long id = 0;  // creation order, used for topological backward
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor(value.shape());
    return grad;
  }
};

Var variable(Tensor v);   // leaf with requires_grad = true
Var constant(Tensor v);   // leaf without grad

double item(const Var& v);

// Runs the reverse sweep from a scalar node (seeds d(loss)/d(loss) = 1).
void backward(const Var& loss);

void zero_grad(std::span<const Var> params);

// --- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& a, double s);
Var mul_scalar(const Var& a, double s);
Var neg(const Var& a);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var square(const Var& a);

// --- structure -------------------------------------------------------------
// x:[N,Ci,H,W] w:[Co,Ci,kh,kw] b:[Co] -> [N,Co,Ho,Wo], zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// nearest-neighbor 2x upsample
Var upsample2(const Var& x);
// area-average downsample by integer factor
Var avg_pool(const Var& x, int factor);
Var concat_channels(const std::vector<Var>& xs);
// per-(n,c) normalization over spatial dims
Var instance_norm(const Var& x, double eps = 1e-5);
// x:[N,C,H,W] * m:[N,1,H,W], broadcast over channels
Var mul_map(const Var& x, const Var& m);
// x:[N,C,H,W], scale/shift:[C] -> x*(1+scale_c)+shift_c
Var channel_affine(const Var& x, const Var& scale, const Var& shift);

// --- reductions ------------------------------------------------------------
Var mean_all(const Var& x);
Var sum_all(const Var& x);
// [N,...] -> [N], mean over all trailing dims
Var mean_per_example(const Var& x);
// [N] -> scalar
Var mean_vec(const Var& x);

// --- pixel sets / projection ------------------------------------------------
// select a subset of examples along dim 0
Var select_examples(const Var& x, std::vector<long> idx);
// x:[N,C,H,W], refs -> [P,C]
Var gather_pixels(const Var& x, std::vector<PixelRef> refs);
// x:[P,Ci] w:[Co,Ci] b:[Co] -> [P,Co]
Var linear(const Var& x, const Var& w, const Var& b);
// rows normalized to unit L2 norm; zero rows map to e_0 with zero gradient
Var l2_normalize_rows(const Var& x);
// a:[P,K] b:[Q,K] -> [P,Q] = a b^T
Var matmul_nt(const Var& a, const Var& b);

// --- losses ----------------------------------------------------------------
struct BceResult {
  Var loss;           // scalar
  long counted = 0;   // pixels with gt != ignore
  bool all_ignored = false;
};
// logits:[N,1,H,W], gt values in {0,1,255}; mean BCE over non-ignored pixels.
BceResult bce_with_ignore(const Var& logits, const ByteMap* gt, long n_images);
BceResult bce_with_ignore(const Var& logits, const std::vector<ByteMap>& gt);

// One domain term of the contrastive objective: given inner products between
// anchors and positives [A,P] / negatives [A,Ng], returns the mean over
// (anchor, positive) of f(ratio) where ratio = e^{ap/α} / (e^{ap/α} + Σ_n e^{an/α}),
// f = identity or log. Stabilized by the per-anchor max inner product.
Var contrastive_domain_term(const Var& dots_pos, const Var& dots_neg, double alpha,
                            bool log_variant);

// --- gradient checking ------------------------------------------------------
struct GradCheckReport {
  double max_rel_err = 0.0;
  long checked = 0;
};
// fn rebuilds the graph from current leaf values and returns a scalar Var.
// Checks d(fn)/d(leaf) against central differences for every listed leaf.
GradCheckReport grad_check(const std::function<Var()>& fn, std::span<const Var> leaves,
                           long max_entries_per_leaf = 1500, uint64_t sample_seed = 0);

}  // namespace anomseg::ad

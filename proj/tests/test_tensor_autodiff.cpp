#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "anomseg/autodiff.hpp"
#include "anomseg/rng.hpp"
#include "test_util.hpp"

using namespace anomseg;
using anomseg::testutil::conv2d_reference;
using anomseg::testutil::random_tensor;

namespace {

ad::GradCheckReport check(const std::function<ad::Var()>& fn, std::span<const ad::Var> leaves) {
  return ad::grad_check(fn, leaves, 1500, 42);
}

}  // namespace

TEST_CASE("tensor basics") {
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  t.fill(2.5);
  CHECK(t.at2(1, 2) == 2.5);
  Tensor r = t.reshaped({3, 2});
  CHECK(r.dim(0) == 3);
  CHECK_THROWS(t.reshaped({4, 2}));
  CHECK(Tensor::scalar(7.0)[0] == 7.0);
}

TEST_CASE("rng determinism and ranges") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) {
    double u = a.uniform();
    CHECK(u == b.uniform());
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  Rng c(7);
  for (int i = 0; i < 100; ++i) {
    int64_t v = c.uniform_int(3, 9);
    CHECK(v >= 3);
    CHECK(v <= 9);
  }
  CHECK(derive_seed(1, "x", 2) != derive_seed(1, "x", 3));
  CHECK(derive_seed(1, "x") != derive_seed(1, "y"));
}

TEST_CASE("conv2d forward matches naive reference") {
  Rng rng(11);
  for (auto [stride, pad] : {std::pair<int, int>{1, 1}, {2, 1}, {1, 0}}) {
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Tensor w = random_tensor({4, 3, 3, 3}, rng);
    Tensor b = random_tensor({4}, rng);
    ad::Var y = ad::conv2d(ad::constant(x), ad::constant(w), ad::constant(b), stride, pad);
    Tensor ref = conv2d_reference(x, w, b, stride, pad);
    CHECK(y->value.same_shape(ref));
    CHECK(y->value.allclose(ref, 1e-12));
  }
}

TEST_CASE("conv2d gradients match central differences") {
  Rng rng(5);
  ad::Var x = ad::variable(random_tensor({2, 2, 6, 6}, rng));
  ad::Var w = ad::variable(random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5));
  ad::Var b = ad::variable(random_tensor({3}, rng));
  for (auto [stride, pad] : {std::pair<int, int>{1, 1}, {2, 1}}) {
    auto fn = [&, stride = stride, pad = pad] {
      return ad::mean_all(ad::relu(ad::conv2d(x, w, b, stride, pad)));
    };
    std::vector<ad::Var> leaves{x, w, b};
    auto rep = check(fn, leaves);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("elementwise and reduction gradients") {
  Rng rng(6);
  ad::Var a = ad::variable(random_tensor({3, 2, 4, 4}, rng));
  ad::Var b = ad::variable(random_tensor({3, 2, 4, 4}, rng));
  ad::Var m = ad::variable(random_tensor({3, 1, 4, 4}, rng, 0.0, 1.0));
  auto fn = [&] {
    ad::Var t = ad::mul(ad::add(a, b), ad::sub(a, b));
    t = ad::mul_map(t, ad::add_scalar(m, 1.0));
    t = ad::sigmoid(t);
    return ad::mean_vec(ad::mean_per_example(t));
  };
  std::vector<ad::Var> leaves{a, b, m};
  auto rep = check(fn, leaves);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("instance norm forward and gradient") {
  Rng rng(7);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  ad::Var xv = ad::variable(x);
  ad::Var y = ad::instance_norm(xv);
  for (long n = 0; n < 2; ++n)
    for (long c = 0; c < 3; ++c) {
      double mean = 0, var = 0;
      for (long i = 0; i < 16; ++i) mean += y->value.at4(n, c, i / 4, i % 4);
      mean /= 16;
      for (long i = 0; i < 16; ++i) {
        double d = y->value.at4(n, c, i / 4, i % 4) - mean;
        var += d * d;
      }
      var /= 16;
      CHECK(std::abs(mean) < 1e-12);
      CHECK(std::abs(var - 1.0) < 1e-3);  // eps shifts variance slightly below 1
    }
  ad::Var s = ad::variable(random_tensor({3}, rng));
  ad::Var t = ad::variable(random_tensor({3}, rng));
  auto fn = [&] {
    return ad::mean_all(ad::square(ad::channel_affine(ad::instance_norm(xv), s, t)));
  };
  std::vector<ad::Var> leaves{xv, s, t};
  auto rep = check(fn, leaves);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("upsample, avg_pool, concat, select gradients") {
  Rng rng(8);
  ad::Var a = ad::variable(random_tensor({2, 2, 4, 4}, rng));
  ad::Var b = ad::variable(random_tensor({2, 3, 8, 8}, rng));
  auto fn = [&] {
    ad::Var up = ad::upsample2(a);                // [2,2,8,8]
    ad::Var cat = ad::concat_channels({up, b});   // [2,5,8,8]
    ad::Var pooled = ad::avg_pool(cat, 2);        // [2,5,4,4]
    ad::Var sel = ad::select_examples(pooled, {1, 0, 1});
    return ad::mean_all(ad::square(sel));
  };
  std::vector<ad::Var> leaves{a, b};
  auto rep = check(fn, leaves);
  CHECK(rep.max_rel_err < 1e-4);

  ad::Var p = ad::avg_pool(b, 2);
  double expect = (b->value.at4(0, 0, 0, 0) + b->value.at4(0, 0, 0, 1) +
                   b->value.at4(0, 0, 1, 0) + b->value.at4(0, 0, 1, 1)) /
                  4.0;
  CHECK(p->value.at4(0, 0, 0, 0) == doctest::Approx(expect).epsilon(1e-14));
  ad::Var u = ad::upsample2(a);
  CHECK(u->value.at4(1, 1, 5, 4) == a->value.at4(1, 1, 2, 2));
}

TEST_CASE("pixel gather + linear + l2 normalize chain") {
  Rng rng(9);
  ad::Var feats = ad::variable(random_tensor({2, 5, 4, 4}, rng));
  ad::Var w = ad::variable(random_tensor({7, 5}, rng, -0.5, 0.5));
  ad::Var b = ad::variable(random_tensor({7}, rng));
  std::vector<PixelRef> refs{{0, 1, 2}, {1, 3, 0}, {0, 0, 0}};
  // weight entries unevenly so the normalization gradient is non-trivial
  Tensor mask({3, 7});
  for (long i = 0; i < mask.numel(); ++i) mask[i] = 0.1 * static_cast<double>(i % 5) + 0.3;
  auto fn = [&] {
    ad::Var g = ad::gather_pixels(feats, refs);
    ad::Var z = ad::l2_normalize_rows(ad::linear(g, w, b));
    return ad::mean_all(ad::mul(z, ad::constant(mask)));
  };
  std::vector<ad::Var> leaves{feats, w, b};
  auto rep = check(fn, leaves);
  CHECK(rep.max_rel_err < 1e-4);

  ad::Var z = ad::l2_normalize_rows(ad::linear(ad::gather_pixels(feats, refs), w, b));
  for (long i = 0; i < 3; ++i) {
    double s = 0;
    for (long j = 0; j < 7; ++j) s += z->value.at2(i, j) * z->value.at2(i, j);
    CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-12);
  }

  Tensor zero({2, 4});
  ad::Var nz = ad::l2_normalize_rows(ad::constant(zero));
  CHECK(nz->value.at2(0, 0) == 1.0);
  CHECK(nz->value.at2(0, 1) == 0.0);
}

TEST_CASE("matmul_nt forward and gradient") {
  Rng rng(10);
  ad::Var a = ad::variable(random_tensor({3, 4}, rng));
  ad::Var b = ad::variable(random_tensor({5, 4}, rng));
  ad::Var c = ad::matmul_nt(a, b);
  for (long i = 0; i < 3; ++i)
    for (long j = 0; j < 5; ++j) {
      double acc = 0;
      for (long k = 0; k < 4; ++k) acc += a->value.at2(i, k) * b->value.at2(j, k);
      CHECK(c->value.at2(i, j) == doctest::Approx(acc).epsilon(1e-14));
    }
  auto fn = [&] { return ad::mean_all(ad::square(ad::matmul_nt(a, b))); };
  std::vector<ad::Var> leaves{a, b};
  auto rep = check(fn, leaves);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("bce with ignore: value oracle and ignore semantics") {
  Tensor logits({1, 1, 2, 2});
  std::vector<ByteMap> gt{ByteMap(2, 2)};
  gt[0].at(0, 0) = 0;
  gt[0].at(0, 1) = 1;
  gt[0].at(1, 0) = 0;
  gt[0].at(1, 1) = 1;
  ad::Var lv = ad::variable(logits);
  auto res = ad::bce_with_ignore(lv, gt);
  CHECK(ad::item(res.loss) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(res.counted == 4);

  Rng rng(12);
  Tensor z = random_tensor({2, 1, 8, 8}, rng, -3.0, 3.0);
  std::vector<ByteMap> labels{ByteMap(8, 8), ByteMap(8, 8)};
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        double u = rng.uniform();
        labels[n].at(y, x) = u < 0.4 ? 0 : u < 0.8 ? 1 : 255;
      }
  ad::Var zv = ad::variable(z);
  auto r2 = ad::bce_with_ignore(zv, labels);
  double ref = 0;
  long m = 0;
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) {
        uint8_t l = labels[n].at(y, x);
        if (l == 255) continue;
        double zz = z.at4(n, 0, y, x);
        double p = 1.0 / (1.0 + std::exp(-zz));
        ref += l ? -std::log(p) : -std::log(1.0 - p);
        ++m;
      }
  ref /= static_cast<double>(m);
  CHECK(testutil::rel_err(ad::item(r2.loss), ref) < 1e-10);

  auto fn = [&] { return ad::bce_with_ignore(zv, labels).loss; };
  std::vector<ad::Var> leaves{zv};
  auto rep = check(fn, leaves);
  CHECK(rep.max_rel_err < 1e-4);
  ad::zero_grad(leaves);
  ad::backward(fn());
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        if (labels[n].at(y, x) == 255) CHECK(zv->grad.at4(n, 0, y, x) == 0.0);

  std::vector<ByteMap> all_ign{ByteMap(2, 2, 255)};
  ad::Var lg = ad::variable(random_tensor({1, 1, 2, 2}, rng));
  auto r3 = ad::bce_with_ignore(lg, all_ign);
  CHECK(r3.all_ignored);
  CHECK(ad::item(r3.loss) == 0.0);
  ad::zero_grad(std::vector<ad::Var>{lg});
  ad::backward(r3.loss);
  CHECK(lg->grad.numel() == 0);  // nothing propagated
}

TEST_CASE("perturbing ignored logits never changes bce") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor z = random_tensor({1, 1, 6, 6}, rng, -2.0, 2.0);
    std::vector<ByteMap> labels{ByteMap(6, 6)};
    bool has_ign = false;
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        double u = rng.uniform();
        labels[0].at(y, x) = u < 0.4 ? 0 : u < 0.8 ? 1 : 255;
        has_ign |= labels[0].at(y, x) == 255;
      }
    if (!has_ign) labels[0].at(0, 0) = 255;
    double before = ad::item(ad::bce_with_ignore(ad::constant(z), labels).loss);
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x)
        if (labels[0].at(y, x) == 255) z.at4(0, 0, y, x) = rng.uniform(-50.0, 50.0);
    double after = ad::item(ad::bce_with_ignore(ad::constant(z), labels).loss);
    CHECK(before == after);
  }
}

TEST_CASE("contrastive domain term: stabilized equals naive, gradients ok") {
  Rng rng(14);
  for (bool log_variant : {false, true}) {
    ad::Var dp = ad::variable(random_tensor({4, 6}, rng));
    ad::Var dn = ad::variable(random_tensor({4, 9}, rng));
    double alpha = 0.1;
    ad::Var term = ad::contrastive_domain_term(dp, dn, alpha, log_variant);
    double ref = 0;
    for (long a = 0; a < 4; ++a)
      for (long p = 0; p < 6; ++p) {
        double ep = std::exp(dp->value.at2(a, p) / alpha);
        double s = 0;
        for (long n = 0; n < 9; ++n) s += std::exp(dn->value.at2(a, n) / alpha);
        double ratio = ep / (ep + s);
        ref += log_variant ? std::log(ratio) : ratio;
      }
    ref /= 24.0;
    CHECK(testutil::rel_err(ad::item(term), ref) < 1e-8);

    auto fn = [&] { return ad::contrastive_domain_term(dp, dn, alpha, log_variant); };
    std::vector<ad::Var> leaves{dp, dn};
    auto rep = check(fn, leaves);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("contrastive term handles empty negative set") {
  Tensor dp({2, 3});
  dp.fill(0.7);
  Tensor dn({2, 0});
  ad::Var term = ad::contrastive_domain_term(ad::constant(dp), ad::constant(dn), 0.1, false);
  CHECK(ad::item(term) == doctest::Approx(1.0).epsilon(1e-12));  // ratio = e/(e+0) = 1
}

TEST_CASE("backward accumulates across shared subgraphs") {
  ad::Var x = ad::variable(Tensor::scalar(3.0));
  ad::Var y = ad::mul(x, x);
  ad::Var z = ad::add(y, ad::mul_scalar(x, 2.0));
  ad::zero_grad(std::vector<ad::Var>{x});
  ad::backward(z);
  CHECK(x->grad[0] == doctest::Approx(8.0).epsilon(1e-14));  // d(x^2+2x)/dx at 3
}

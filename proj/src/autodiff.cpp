#include "anomseg/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "anomseg/rng.hpp"

namespace anomseg::ad {

namespace {

long next_id() {
  static long counter = 0;
  return ++counter;
}

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bwd) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->id = next_id();
  bool req = false;
  for (const auto& p : parents) req = req || p->requires_grad;
  n->requires_grad = req;
  if (req) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(bwd);
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw ContractViolation(std::string(op) + ": shape mismatch");
}

// im2col for one image: x [Ci,H,W] -> cols [Ci*kh*kw, Ho*Wo]
void im2col(const double* x, long ci, long h, long w, long kh, long kw, long stride, long pad,
            long ho, long wo, double* cols) {
  for (long c = 0; c < ci; ++c) {
    for (long ky = 0; ky < kh; ++ky) {
      for (long kx = 0; kx < kw; ++kx) {
        double* row = cols + ((c * kh + ky) * kw + kx) * (ho * wo);
        for (long oy = 0; oy < ho; ++oy) {
          long iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            for (long ox = 0; ox < wo; ++ox) row[oy * wo + ox] = 0.0;
            continue;
          }
          const double* src = x + (c * h + iy) * w;
          for (long ox = 0; ox < wo; ++ox) {
            long ix = ox * stride + kx - pad;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

// scatter-add transpose of im2col
void col2im_add(const double* cols, long ci, long h, long w, long kh, long kw, long stride,
                long pad, long ho, long wo, double* x) {
  for (long c = 0; c < ci; ++c) {
    for (long ky = 0; ky < kh; ++ky) {
      for (long kx = 0; kx < kw; ++kx) {
        const double* row = cols + ((c * kh + ky) * kw + kx) * (ho * wo);
        for (long oy = 0; oy < ho; ++oy) {
          long iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          double* dst = x + (c * h + iy) * w;
          for (long ox = 0; ox < wo; ++ox) {
            long ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Var variable(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  n->id = next_id();
  return n;
}

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = false;
  n->id = next_id();
  return n;
}

double item(const Var& v) {
  if (v->value.numel() != 1) throw ContractViolation("item: tensor is not a scalar");
  return v->value[0];
}

void backward(const Var& loss) {
  if (loss->value.numel() != 1) throw ContractViolation("backward: loss must be scalar");
  if (!loss->requires_grad) return;
  // Collect reachable nodes; creation ids give a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Var> stack{loss};
  while (!stack.empty()) {
    Var v = stack.back();
    stack.pop_back();
    if (!v->requires_grad || seen.count(v.get())) continue;
    seen.insert(v.get());
    order.push_back(v.get());
    for (const auto& p : v->parents) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (Node* n : order) {
    if (n->backward_fn && n->grad.numel() == n->value.numel()) n->backward_fn(*n);
  }
}

void zero_grad(std::span<const Var> params) {
  for (const auto& p : params)
    if (p->grad.numel()) p->grad.fill(0.0);
}

// --- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) out[i] += b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = a->ensure_grad();
      for (long i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->ensure_grad();
      for (long i = 0; i < n.grad.numel(); ++i) gb[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = a->ensure_grad();
      for (long i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->ensure_grad();
      for (long i = 0; i < n.grad.numel(); ++i) gb[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) {
      Tensor& ga = a->ensure_grad();
      for (long i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] * b->value[i];
    }
    if (b->requires_grad) {
      Tensor& gb = b->ensure_grad();
      for (long i = 0; i < n.grad.numel(); ++i) gb[i] += n.grad[i] * a->value[i];
    }
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) out[i] += s;
  return make_node(std::move(out), {a}, [a](Node& n) {
    Tensor& ga = a->ensure_grad();
    for (long i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
  });
}

Var mul_scalar(const Var& a, double s) {
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) out[i] *= s;
  return make_node(std::move(out), {a}, [a, s](Node& n) {
    Tensor& ga = a->ensure_grad();
    for (long i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] * s;
  });
}

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var relu(const Var& a) {
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return make_node(std::move(out), {a}, [a](Node& n) {
    Tensor& ga = a->ensure_grad();
    for (long i = 0; i < n.grad.numel(); ++i)
      if (a->value[i] > 0.0) ga[i] += n.grad[i];
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a->value;
  for (long i = 0; i < out.numel(); ++i) {
    double z = out[i];
    out[i] = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  }
  auto n = make_node(std::move(out), {a}, nullptr);
  if (n->requires_grad) {
    Node* raw = n.get();
    n->backward_fn = [a, raw](Node& node) {
      Tensor& ga = a->ensure_grad();
      for (long i = 0; i < node.grad.numel(); ++i) {
        double s = raw->value[i];
        ga[i] += node.grad[i] * s * (1.0 - s);
      }
    };
  }
  return n;
}

Var square(const Var& a) { return mul(a, a); }

// --- structure ---------------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  if (xv.ndim() != 4 || wv.ndim() != 4) throw ContractViolation("conv2d: rank must be 4");
  long n = xv.dim(0), ci = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  long co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != ci) throw ContractViolation("conv2d: channel mismatch");
  if (b->value.numel() != co) throw ContractViolation("conv2d: bias size mismatch");
  long ho = (h + 2 * pad - kh) / stride + 1;
  long wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ContractViolation("conv2d: empty output");

  Tensor out({n, co, ho, wo});
  long k = ci * kh * kw;
  AlignedVec cols(static_cast<size_t>(k) * ho * wo);
  ConstMatMap wm(wv.data(), co, k);
  for (long i = 0; i < n; ++i) {
    im2col(xv.data() + i * ci * h * wd, ci, h, wd, kh, kw, stride, pad, ho, wo, cols.data());
    ConstMatMap cm(cols.data(), k, ho * wo);
    MatMap om(out.data() + i * co * ho * wo, co, ho * wo);
    om.noalias() = wm * cm;
    for (long c = 0; c < co; ++c) om.row(c).array() += b->value[c];
  }

  int s = stride, p = pad;
  return make_node(std::move(out), {x, w, b}, [x, w, b, s, p](Node& node) {
    const Tensor& xv2 = x->value;
    const Tensor& wv2 = w->value;
    long n2 = xv2.dim(0), ci2 = xv2.dim(1), h2 = xv2.dim(2), w2 = xv2.dim(3);
    long co2 = wv2.dim(0), kh2 = wv2.dim(2), kw2 = wv2.dim(3);
    long ho2 = node.value.dim(2), wo2 = node.value.dim(3);
    long k2 = ci2 * kh2 * kw2;
    AlignedVec cols(static_cast<size_t>(k2) * ho2 * wo2);
    AlignedVec dcols;
    ConstMatMap wm(wv2.data(), co2, k2);
    for (long i = 0; i < n2; ++i) {
      ConstMatMap gm(node.grad.data() + i * co2 * ho2 * wo2, co2, ho2 * wo2);
      if (w->requires_grad || b->requires_grad) {
        if (w->requires_grad) {
          im2col(xv2.data() + i * ci2 * h2 * w2, ci2, h2, w2, kh2, kw2, s, p, ho2, wo2,
                 cols.data());
          ConstMatMap cm(cols.data(), k2, ho2 * wo2);
          MatMap gw(w->ensure_grad().data(), co2, k2);
          gw.noalias() += gm * cm.transpose();
        }
        if (b->requires_grad) {
          Tensor& gb = b->ensure_grad();
          for (long c = 0; c < co2; ++c) gb[c] += gm.row(c).sum();
        }
      }
      if (x->requires_grad) {
        dcols.resize(static_cast<size_t>(k2) * ho2 * wo2);
        MatMap dcm(dcols.data(), k2, ho2 * wo2);
        dcm.noalias() = wm.transpose() * gm;
        col2im_add(dcols.data(), ci2, h2, w2, kh2, kw2, s, p, ho2, wo2,
                   x->ensure_grad().data() + i * ci2 * h2 * w2);
      }
    }
  });
}

Var upsample2(const Var& x) {
  const Tensor& xv = x->value;
  long n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor out({n, c, h * 2, w * 2});
  for (long i = 0; i < n; ++i)
    for (long ch = 0; ch < c; ++ch)
      for (long y = 0; y < h * 2; ++y)
        for (long xx = 0; xx < w * 2; ++xx)
          out.at4(i, ch, y, xx) = xv.at4(i, ch, y / 2, xx / 2);
  return make_node(std::move(out), {x}, [x](Node& node) {
    Tensor& gx = x->ensure_grad();
    long n2 = gx.dim(0), c2 = gx.dim(1), h2 = gx.dim(2), w2 = gx.dim(3);
    for (long i = 0; i < n2; ++i)
      for (long ch = 0; ch < c2; ++ch)
        for (long y = 0; y < h2 * 2; ++y)
          for (long xx = 0; xx < w2 * 2; ++xx)
            gx.at4(i, ch, y / 2, xx / 2) += node.grad.at4(i, ch, y, xx);
  });
}

Var avg_pool(const Var& x, int factor) {
  if (factor < 1) throw ContractViolation("avg_pool: factor must be >= 1");
  if (factor == 1) return x;
  const Tensor& xv = x->value;
  long n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  if (h % factor || w % factor) throw ContractViolation("avg_pool: size not divisible");
  long ho = h / factor, wo = w / factor;
  double inv = 1.0 / (static_cast<double>(factor) * factor);
  Tensor out({n, c, ho, wo});
  for (long i = 0; i < n; ++i)
    for (long ch = 0; ch < c; ++ch)
      for (long oy = 0; oy < ho; ++oy)
        for (long ox = 0; ox < wo; ++ox) {
          double s = 0.0;
          for (long dy = 0; dy < factor; ++dy)
            for (long dx = 0; dx < factor; ++dx)
              s += xv.at4(i, ch, oy * factor + dy, ox * factor + dx);
          out.at4(i, ch, oy, ox) = s * inv;
        }
  int f = factor;
  return make_node(std::move(out), {x}, [x, f, inv](Node& node) {
    Tensor& gx = x->ensure_grad();
    long n2 = node.grad.dim(0), c2 = node.grad.dim(1), ho2 = node.grad.dim(2),
         wo2 = node.grad.dim(3);
    for (long i = 0; i < n2; ++i)
      for (long ch = 0; ch < c2; ++ch)
        for (long oy = 0; oy < ho2; ++oy)
          for (long ox = 0; ox < wo2; ++ox) {
            double g = node.grad.at4(i, ch, oy, ox) * inv;
            for (long dy = 0; dy < f; ++dy)
              for (long dx = 0; dx < f; ++dx)
                gx.at4(i, ch, oy * f + dy, ox * f + dx) += g;
          }
  });
}

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ContractViolation("concat_channels: empty input");
  long n = xs[0]->value.dim(0), h = xs[0]->value.dim(2), w = xs[0]->value.dim(3);
  long ctot = 0;
  for (const auto& v : xs) {
    if (v->value.dim(0) != n || v->value.dim(2) != h || v->value.dim(3) != w)
      throw ContractViolation("concat_channels: spatial/batch mismatch");
    ctot += v->value.dim(1);
  }
  Tensor out({n, ctot, h, w});
  long plane = h * w;
  for (long i = 0; i < n; ++i) {
    long off = 0;
    for (const auto& v : xs) {
      long c = v->value.dim(1);
      const double* src = v->value.data() + i * c * plane;
      double* dst = out.data() + (i * ctot + off) * plane;
      std::copy(src, src + c * plane, dst);
      off += c;
    }
  }
  std::vector<Var> parents = xs;
  return make_node(std::move(out), parents, [xs, ctot, plane](Node& node) {
    long n2 = node.grad.dim(0);
    for (long i = 0; i < n2; ++i) {
      long off = 0;
      for (const auto& v : xs) {
        long c = v->value.dim(1);
        if (v->requires_grad) {
          Tensor& gv = v->ensure_grad();
          const double* src = node.grad.data() + (i * ctot + off) * plane;
          double* dst = gv.data() + i * c * plane;
          for (long j = 0; j < c * plane; ++j) dst[j] += src[j];
        }
        off += c;
      }
    }
  });
}

Var instance_norm(const Var& x, double eps) {
  const Tensor& xv = x->value;
  long n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  long plane = h * w;
  Tensor out(xv.shape());
  Tensor inv_std({n, c});
  for (long i = 0; i < n; ++i)
    for (long ch = 0; ch < c; ++ch) {
      const double* src = xv.data() + (i * c + ch) * plane;
      double mean = 0.0;
      for (long j = 0; j < plane; ++j) mean += src[j];
      mean /= static_cast<double>(plane);
      double var = 0.0;
      for (long j = 0; j < plane; ++j) var += (src[j] - mean) * (src[j] - mean);
      var /= static_cast<double>(plane);
      double is = 1.0 / std::sqrt(var + eps);
      inv_std.at2(i, ch) = is;
      double* dst = out.data() + (i * c + ch) * plane;
      for (long j = 0; j < plane; ++j) dst[j] = (src[j] - mean) * is;
    }
  auto node = make_node(std::move(out), {x}, nullptr);
  if (node->requires_grad) {
    Node* raw = node.get();
    Tensor istd = std::move(inv_std);
    node->backward_fn = [x, raw, istd, plane](Node& nd) {
      // dx = istd * (g - mean(g) - xhat * mean(g*xhat)) per (n,c)
      Tensor& gx = x->ensure_grad();
      long n2 = nd.grad.dim(0), c2 = nd.grad.dim(1);
      for (long i = 0; i < n2; ++i)
        for (long ch = 0; ch < c2; ++ch) {
          const double* g = nd.grad.data() + (i * c2 + ch) * plane;
          const double* xh = raw->value.data() + (i * c2 + ch) * plane;
          double gm = 0.0, gxm = 0.0;
          for (long j = 0; j < plane; ++j) {
            gm += g[j];
            gxm += g[j] * xh[j];
          }
          gm /= static_cast<double>(plane);
          gxm /= static_cast<double>(plane);
          double is = istd.at2(i, ch);
          double* dst = gx.data() + (i * c2 + ch) * plane;
          for (long j = 0; j < plane; ++j) dst[j] += is * (g[j] - gm - xh[j] * gxm);
        }
    };
  }
  return node;
}

Var mul_map(const Var& x, const Var& m) {
  const Tensor& xv = x->value;
  const Tensor& mv = m->value;
  if (mv.dim(0) != xv.dim(0) || mv.dim(1) != 1 || mv.dim(2) != xv.dim(2) ||
      mv.dim(3) != xv.dim(3))
    throw ContractViolation("mul_map: map must be [N,1,H,W] matching x");
  long n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor out(xv.shape());
  for (long i = 0; i < n; ++i) {
    const double* mp = mv.data() + i * plane;
    for (long ch = 0; ch < c; ++ch) {
      const double* src = xv.data() + (i * c + ch) * plane;
      double* dst = out.data() + (i * c + ch) * plane;
      for (long j = 0; j < plane; ++j) dst[j] = src[j] * mp[j];
    }
  }
  return make_node(std::move(out), {x, m}, [x, m, n, c, plane](Node& node) {
    if (x->requires_grad) {
      Tensor& gx = x->ensure_grad();
      for (long i = 0; i < n; ++i) {
        const double* mp = m->value.data() + i * plane;
        for (long ch = 0; ch < c; ++ch) {
          const double* g = node.grad.data() + (i * c + ch) * plane;
          double* dst = gx.data() + (i * c + ch) * plane;
          for (long j = 0; j < plane; ++j) dst[j] += g[j] * mp[j];
        }
      }
    }
    if (m->requires_grad) {
      Tensor& gm = m->ensure_grad();
      for (long i = 0; i < n; ++i) {
        double* dst = gm.data() + i * plane;
        for (long ch = 0; ch < c; ++ch) {
          const double* g = node.grad.data() + (i * c + ch) * plane;
          const double* src = x->value.data() + (i * c + ch) * plane;
          for (long j = 0; j < plane; ++j) dst[j] += g[j] * src[j];
        }
      }
    }
  });
}

Var channel_affine(const Var& x, const Var& scale, const Var& shift) {
  const Tensor& xv = x->value;
  long n = xv.dim(0), c = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  if (scale->value.numel() != c || shift->value.numel() != c)
    throw ContractViolation("channel_affine: parameter size mismatch");
  Tensor out(xv.shape());
  for (long i = 0; i < n; ++i)
    for (long ch = 0; ch < c; ++ch) {
      double s = 1.0 + scale->value[ch];
      double t = shift->value[ch];
      const double* src = xv.data() + (i * c + ch) * plane;
      double* dst = out.data() + (i * c + ch) * plane;
      for (long j = 0; j < plane; ++j) dst[j] = src[j] * s + t;
    }
  return make_node(std::move(out), {x, scale, shift}, [x, scale, shift, n, c, plane](Node& node) {
    for (long i = 0; i < n; ++i)
      for (long ch = 0; ch < c; ++ch) {
        const double* g = node.grad.data() + (i * c + ch) * plane;
        if (x->requires_grad) {
          double s = 1.0 + scale->value[ch];
          double* dst = x->ensure_grad().data() + (i * c + ch) * plane;
          for (long j = 0; j < plane; ++j) dst[j] += g[j] * s;
        }
        if (scale->requires_grad) {
          const double* src = x->value.data() + (i * c + ch) * plane;
          double acc = 0.0;
          for (long j = 0; j < plane; ++j) acc += g[j] * src[j];
          scale->ensure_grad()[ch] += acc;
        }
        if (shift->requires_grad) {
          double acc = 0.0;
          for (long j = 0; j < plane; ++j) acc += g[j];
          shift->ensure_grad()[ch] += acc;
        }
      }
  });
}

// --- reductions ---------------------------------------------------------------

Var sum_all(const Var& x) {
  double s = 0.0;
  for (long i = 0; i < x->value.numel(); ++i) s += x->value[i];
  return make_node(Tensor::scalar(s), {x}, [x](Node& node) {
    Tensor& gx = x->ensure_grad();
    double g = node.grad[0];
    for (long i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

Var mean_all(const Var& x) { return mul_scalar(sum_all(x), 1.0 / x->value.numel()); }

Var mean_per_example(const Var& x) {
  long n = x->value.dim(0);
  long rest = x->value.numel() / n;
  Tensor out({n});
  for (long i = 0; i < n; ++i) {
    double s = 0.0;
    const double* src = x->value.data() + i * rest;
    for (long j = 0; j < rest; ++j) s += src[j];
    out[i] = s / static_cast<double>(rest);
  }
  return make_node(std::move(out), {x}, [x, n, rest](Node& node) {
    Tensor& gx = x->ensure_grad();
    for (long i = 0; i < n; ++i) {
      double g = node.grad[i] / static_cast<double>(rest);
      double* dst = gx.data() + i * rest;
      for (long j = 0; j < rest; ++j) dst[j] += g;
    }
  });
}

Var mean_vec(const Var& x) { return mean_all(x); }

// --- pixel sets / projection ----------------------------------------------------

Var select_examples(const Var& x, std::vector<long> idx) {
  const Tensor& xv = x->value;
  long rest = xv.numel() / xv.dim(0);
  std::vector<long> shape = xv.shape();
  shape[0] = static_cast<long>(idx.size());
  Tensor out(shape);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= xv.dim(0))
      throw ContractViolation("select_examples: index out of range");
    std::copy(xv.data() + idx[i] * rest, xv.data() + (idx[i] + 1) * rest,
              out.data() + static_cast<long>(i) * rest);
  }
  auto idx_sh = std::make_shared<std::vector<long>>(std::move(idx));
  return make_node(std::move(out), {x}, [x, idx_sh, rest](Node& node) {
    Tensor& gx = x->ensure_grad();
    for (size_t i = 0; i < idx_sh->size(); ++i) {
      const double* src = node.grad.data() + static_cast<long>(i) * rest;
      double* dst = gx.data() + (*idx_sh)[i] * rest;
      for (long j = 0; j < rest; ++j) dst[j] += src[j];
    }
  });
}

Var gather_pixels(const Var& x, std::vector<PixelRef> refs) {
  const Tensor& xv = x->value;
  long c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  long p = static_cast<long>(refs.size());
  Tensor out({p, c});
  for (long i = 0; i < p; ++i) {
    const PixelRef& r = refs[static_cast<size_t>(i)];
    for (long ch = 0; ch < c; ++ch) out.at2(i, ch) = xv.at4(r.n, ch, r.y, r.x);
  }
  auto refs_sh = std::make_shared<std::vector<PixelRef>>(std::move(refs));
  return make_node(std::move(out), {x}, [x, refs_sh, c, h, w](Node& node) {
    Tensor& gx = x->ensure_grad();
    long p2 = static_cast<long>(refs_sh->size());
    for (long i = 0; i < p2; ++i) {
      const PixelRef& r = (*refs_sh)[static_cast<size_t>(i)];
      for (long ch = 0; ch < c; ++ch) gx.at4(r.n, ch, r.y, r.x) += node.grad.at2(i, ch);
    }
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const Tensor& xv = x->value;
  const Tensor& wv = w->value;
  long p = xv.dim(0), ci = xv.dim(1), co = wv.dim(0);
  if (wv.dim(1) != ci || b->value.numel() != co)
    throw ContractViolation("linear: shape mismatch");
  Tensor out({p, co});
  ConstMatMap xm(xv.data(), p, ci);
  ConstMatMap wm(wv.data(), co, ci);
  MatMap om(out.data(), p, co);
  om.noalias() = xm * wm.transpose();
  for (long i = 0; i < p; ++i)
    for (long j = 0; j < co; ++j) out.at2(i, j) += b->value[j];
  return make_node(std::move(out), {x, w, b}, [x, w, b, p, ci, co](Node& node) {
    ConstMatMap gm(node.grad.data(), p, co);
    if (x->requires_grad) {
      MatMap gx(x->ensure_grad().data(), p, ci);
      ConstMatMap wm(w->value.data(), co, ci);
      gx.noalias() += gm * wm;
    }
    if (w->requires_grad) {
      MatMap gw(w->ensure_grad().data(), co, ci);
      ConstMatMap xm(x->value.data(), p, ci);
      gw.noalias() += gm.transpose() * xm;
    }
    if (b->requires_grad) {
      Tensor& gb = b->ensure_grad();
      for (long i = 0; i < p; ++i)
        for (long j = 0; j < co; ++j) gb[j] += node.grad.at2(i, j);
    }
  });
}

Var l2_normalize_rows(const Var& x) {
  const Tensor& xv = x->value;
  long p = xv.dim(0), k = xv.dim(1);
  Tensor out(xv.shape());
  Tensor norms({p});
  constexpr double kTiny = 1e-12;
  for (long i = 0; i < p; ++i) {
    double s = 0.0;
    for (long j = 0; j < k; ++j) s += xv.at2(i, j) * xv.at2(i, j);
    double nrm = std::sqrt(s);
    norms[i] = nrm;
    if (nrm < kTiny) {
      out.at2(i, 0) = 1.0;  // degenerate rows map to the first basis vector
      for (long j = 1; j < k; ++j) out.at2(i, j) = 0.0;
    } else {
      for (long j = 0; j < k; ++j) out.at2(i, j) = xv.at2(i, j) / nrm;
    }
  }
  auto node = make_node(std::move(out), {x}, nullptr);
  if (node->requires_grad) {
    Node* raw = node.get();
    Tensor nr = std::move(norms);
    node->backward_fn = [x, raw, nr, p, k](Node& nd) {
      Tensor& gx = x->ensure_grad();
      for (long i = 0; i < p; ++i) {
        double nrm = nr[i];
        if (nrm < kTiny) continue;  // constant output, zero gradient
        double dot = 0.0;
        for (long j = 0; j < k; ++j) dot += nd.grad.at2(i, j) * raw->value.at2(i, j);
        for (long j = 0; j < k; ++j)
          gx.at2(i, j) += (nd.grad.at2(i, j) - raw->value.at2(i, j) * dot) / nrm;
      }
    };
  }
  return node;
}

Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& av = a->value;
  const Tensor& bv = b->value;
  long p = av.dim(0), k = av.dim(1), q = bv.dim(0);
  if (bv.dim(1) != k) throw ContractViolation("matmul_nt: inner dim mismatch");
  Tensor out({p, q});
  ConstMatMap am(av.data(), p, k);
  ConstMatMap bm(bv.data(), q, k);
  MatMap om(out.data(), p, q);
  om.noalias() = am * bm.transpose();
  return make_node(std::move(out), {a, b}, [a, b, p, k, q](Node& node) {
    ConstMatMap gm(node.grad.data(), p, q);
    if (a->requires_grad) {
      MatMap ga(a->ensure_grad().data(), p, k);
      ConstMatMap bm(b->value.data(), q, k);
      ga.noalias() += gm * bm;
    }
    if (b->requires_grad) {
      MatMap gb(b->ensure_grad().data(), q, k);
      ConstMatMap am(a->value.data(), p, k);
      gb.noalias() += gm.transpose() * am;
    }
  });
}

// --- losses ---------------------------------------------------------------------

BceResult bce_with_ignore(const Var& logits, const ByteMap* gt, long n_images) {
  const Tensor& zv = logits->value;
  if (zv.ndim() != 4 || zv.dim(1) != 1)
    throw ContractViolation("bce_with_ignore: logits must be [N,1,H,W]");
  long n = zv.dim(0), h = zv.dim(2), w = zv.dim(3);
  if (n != n_images) throw ContractViolation("bce_with_ignore: batch size mismatch");
  for (long i = 0; i < n; ++i)
    if (gt[i].h != h || gt[i].w != w)
      throw ContractViolation("bce_with_ignore: gt shape mismatch");

  long counted = 0;
  double total = 0.0;
  for (long i = 0; i < n; ++i)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        uint8_t lbl = gt[i].at(static_cast<int>(y), static_cast<int>(x));
        if (lbl == kLabelIgnore) continue;
        if (lbl != kLabelNormal && lbl != kLabelAnomaly)
          throw ContractViolation("bce_with_ignore: gt value outside {0,1,255}");
        double z = zv.at4(i, 0, y, x);
        double yv = static_cast<double>(lbl);
        // max(z,0) - z*y + log(1 + e^{-|z|})
        total += std::max(z, 0.0) - z * yv + std::log1p(std::exp(-std::abs(z)));
        ++counted;
      }

  BceResult res;
  res.counted = counted;
  if (counted == 0) {
    res.all_ignored = true;
    res.loss = make_node(Tensor::scalar(0.0), {logits}, [](Node&) {});
    return res;
  }
  double inv = 1.0 / static_cast<double>(counted);
  std::vector<ByteMap> gts(gt, gt + n);
  res.loss = make_node(Tensor::scalar(total * inv), {logits},
                       [logits, gts = std::move(gts), n, h, w, inv](Node& node) {
                         Tensor& gz = logits->ensure_grad();
                         double g = node.grad[0] * inv;
                         for (long i = 0; i < n; ++i)
                           for (long y = 0; y < h; ++y)
                             for (long x = 0; x < w; ++x) {
                               uint8_t lbl = gts[static_cast<size_t>(i)].at(
                                   static_cast<int>(y), static_cast<int>(x));
                               if (lbl == kLabelIgnore) continue;
                               double z = logits->value.at4(i, 0, y, x);
                               double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                                   : std::exp(z) / (1.0 + std::exp(z));
                               gz.at4(i, 0, y, x) += g * (s - static_cast<double>(lbl));
                             }
                       });
  return res;
}

BceResult bce_with_ignore(const Var& logits, const std::vector<ByteMap>& gt) {
  return bce_with_ignore(logits, gt.data(), static_cast<long>(gt.size()));
}

Var contrastive_domain_term(const Var& dots_pos, const Var& dots_neg, double alpha,
                            bool log_variant) {
  if (alpha <= 0.0) throw ConfigError("temperature must be positive");
  const Tensor& dp = dots_pos->value;
  const Tensor& dn = dots_neg->value;
  long na = dp.dim(0), np = dp.dim(1);
  long nn = dn.numel() ? dn.dim(1) : 0;
  if (nn && dn.dim(0) != na) throw ContractViolation("contrastive term: anchor count mismatch");
  if (na == 0 || np == 0) throw ContractViolation("contrastive term: empty anchors/positives");

  // Shift by the per-anchor max inner product; every ratio is invariant.
  Tensor ep({na, np}), en(nn ? std::vector<long>{na, nn} : std::vector<long>{na, 1});
  Tensor sneg({na});
  double total = 0.0;
  for (long a = 0; a < na; ++a) {
    double m = -1e300;
    for (long p = 0; p < np; ++p) m = std::max(m, dp.at2(a, p));
    for (long q = 0; q < nn; ++q) m = std::max(m, dn.at2(a, q));
    double s = 0.0;
    for (long q = 0; q < nn; ++q) {
      double e = std::exp((dn.at2(a, q) - m) / alpha);
      en.at2(a, q) = e;
      s += e;
    }
    sneg[a] = s;
    for (long p = 0; p < np; ++p) {
      double e = std::exp((dp.at2(a, p) - m) / alpha);
      ep.at2(a, p) = e;
      double ratio = e / (e + s);
      total += log_variant ? std::log(ratio) : ratio;
    }
  }
  double scale = 1.0 / (static_cast<double>(na) * static_cast<double>(np));
  total *= scale;

  return make_node(
      Tensor::scalar(total), {dots_pos, dots_neg},
      [dots_pos, dots_neg, ep = std::move(ep), en = std::move(en), sneg = std::move(sneg), na, np,
       nn, alpha, log_variant, scale](Node& node) {
        double g0 = node.grad[0] * scale / alpha;
        Tensor* gp = dots_pos->requires_grad ? &dots_pos->ensure_grad() : nullptr;
        Tensor* gn = dots_neg->requires_grad ? &dots_neg->ensure_grad() : nullptr;
        for (long a = 0; a < na; ++a) {
          double s = sneg[a];
          double tneg = 0.0;  // Σ_p w_ap σ_ap / (e_ap + s)
          for (long p = 0; p < np; ++p) {
            double e = ep.at2(a, p);
            double denom = e + s;
            double sig = e / denom;
            // d f(σ)/d σ: 1 for identity, 1/σ for log
            double w = log_variant ? 1.0 / sig : 1.0;
            if (gp) gp->at2(a, p) += g0 * w * sig * (1.0 - sig);
            tneg += w * sig / denom;
          }
          if (gn)
            for (long q = 0; q < nn; ++q) gn->at2(a, q) -= g0 * en.at2(a, q) * tneg;
        }
      });
}

// --- gradient checking ------------------------------------------------------------

GradCheckReport grad_check(const std::function<Var()>& fn, std::span<const Var> leaves,
                           long max_entries_per_leaf, uint64_t sample_seed) {
  // Analytic pass
  zero_grad(leaves);
  Var loss = fn();
  backward(loss);
  std::vector<Tensor> analytic;
  analytic.reserve(leaves.size());
  for (const auto& l : leaves)
    analytic.push_back(l->grad.numel() ? l->grad : Tensor(l->value.shape()));

  GradCheckReport rep;
  Rng rng(sample_seed ^ 0x9e3779b97f4a7c15ULL);
  for (size_t li = 0; li < leaves.size(); ++li) {
    const Var& leaf = leaves[li];
    long n = leaf->value.numel();
    std::vector<long> idx;
    if (n <= max_entries_per_leaf) {
      idx.resize(static_cast<size_t>(n));
      for (long i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    } else {
      for (long i = 0; i < max_entries_per_leaf; ++i)
        idx.push_back(rng.uniform_int(0, n - 1));
    }
    for (long i : idx) {
      double orig = leaf->value[i];
      double h = 1e-5 * std::max(1.0, std::abs(orig));
      leaf->value[i] = orig + h;
      double fp = item(fn());
      leaf->value[i] = orig - h;
      double fm = item(fn());
      leaf->value[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = analytic[li][i];
      double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.checked;
    }
  }
  zero_grad(leaves);
  return rep;
}

}  // namespace anomseg::ad

#include "segkit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace segkit::ops {

namespace {

bool needs(const Node& self, std::size_t i) {
  const auto& p = self.parents[i];
  return p && p->requires_grad;
}

Tensor& gbuf(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }

void check_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
}

Shape with_last(const Shape& s, std::int64_t last) {
  Shape out = s;
  if (out.empty()) out.push_back(last);
  else out.back() = last;
  return out;
}

void require_rank3(const Var& x, const char* op) {
  if (x.value().rank() != 3) {
    throw std::invalid_argument(std::string(op) + ": expected [H, W, C], got " + shape_string(x.shape()));
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  Tensor out = a.value();
  out.matrix() += b.value().matrix();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t i = 0; i < 2; ++i)
      if (needs(self, i)) gbuf(self, i).matrix() += self.grad.matrix();
  });
}

Var sub(const Var& a, const Var& b) {
  check_same(a, b, "sub");
  Tensor out = a.value();
  out.matrix() -= b.value().matrix();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (needs(self, 0)) gbuf(self, 0).matrix() += self.grad.matrix();
    if (needs(self, 1)) gbuf(self, 1).matrix() -= self.grad.matrix();
  });
}

Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  Tensor out = a.value();
  out.matrix().array() *= b.value().matrix().array();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (needs(self, 0)) gbuf(self, 0).matrix().array() += self.grad.matrix().array() * bv.matrix().array();
    if (needs(self, 1)) gbuf(self, 1).matrix().array() += self.grad.matrix().array() * av.matrix().array();
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  out.matrix() *= s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    if (needs(self, 0)) gbuf(self, 0).matrix() += s * self.grad.matrix();
  });
}

Var add_bias(const Var& x, const Var& bias) {
  if (bias.value().size() != static_cast<std::size_t>(x.value().cols())) {
    throw std::invalid_argument("add_bias: bias size does not match last dimension");
  }
  Tensor out = x.value();
  Eigen::Map<const Eigen::RowVectorXd> bv(bias.value().data(), x.value().cols());
  out.matrix().rowwise() += bv;
  return make_result(std::move(out), {x, bias}, [](Node& self) {
    if (needs(self, 0)) gbuf(self, 0).matrix() += self.grad.matrix();
    if (needs(self, 1)) {
      auto& gb = gbuf(self, 1);
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), static_cast<Eigen::Index>(gb.size())) +=
          self.grad.matrix().colwise().sum();
    }
  });
}

Var detach(const Var& x) { return Var(x.value(), false); }

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    if (!needs(self, 0)) return;
    auto& g = gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var matmul(const Var& x, const Var& w) {
  const auto& wv = w.value();
  if (wv.rank() != 2 || wv.dim(0) != x.value().cols()) {
    throw std::invalid_argument("matmul: " + shape_string(x.shape()) + " x " + shape_string(w.shape()));
  }
  Tensor out(with_last(x.shape(), wv.dim(1)));
  out.matrix().noalias() = x.value().matrix() * wv.matrix();
  return make_result(std::move(out), {x, w}, [](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    if (needs(self, 0)) gbuf(self, 0).matrix().noalias() += self.grad.matrix() * wv.matrix().transpose();
    if (needs(self, 1)) gbuf(self, 1).matrix().noalias() += xv.matrix().transpose() * self.grad.matrix();
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const auto& wv = w.value();
  if (wv.rank() != 2 || wv.dim(0) != x.value().cols()) {
    throw std::invalid_argument("linear: " + shape_string(x.shape()) + " x " + shape_string(w.shape()));
  }
  Tensor out(with_last(x.shape(), wv.dim(1)));
  out.matrix().noalias() = x.value().matrix() * wv.matrix();
  if (b.defined()) {
    if (b.value().size() != static_cast<std::size_t>(wv.dim(1))) throw std::invalid_argument("linear: bias size");
    out.matrix().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), wv.dim(1));
  }
  return make_result(std::move(out), {x, w, b}, [](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    if (needs(self, 0)) gbuf(self, 0).matrix().noalias() += self.grad.matrix() * wv.matrix().transpose();
    if (needs(self, 1)) gbuf(self, 1).matrix().noalias() += xv.matrix().transpose() * self.grad.matrix();
    if (needs(self, 2)) {
      auto& gb = gbuf(self, 2);
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), static_cast<Eigen::Index>(gb.size())) +=
          self.grad.matrix().colwise().sum();
    }
  });
}

Var grouped_linear(const Var& x, const Var& w, const Var& b) {
  const auto& wv = w.value();
  if (wv.rank() != 3) throw std::invalid_argument("grouped_linear: weight must be [G, in, out]");
  const auto groups = wv.dim(0), gin = wv.dim(1), gout = wv.dim(2);
  if (x.value().cols() != groups * gin) throw std::invalid_argument("grouped_linear: input channels");
  const auto rows = x.value().rows();
  Tensor out(with_last(x.shape(), groups * gout));
  auto om = out.matrix();
  const auto xm = x.value().matrix();
  for (std::int64_t g = 0; g < groups; ++g) {
    ConstMatrixMap wg(wv.data() + g * gin * gout, gin, gout);
    om.middleCols(g * gout, gout).noalias() = xm.middleCols(g * gin, gin) * wg;
  }
  if (b.defined()) om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), groups * gout);
  (void)rows;
  return make_result(std::move(out), {x, w, b}, [groups, gin, gout](Node& self) {
    const auto& xv = self.parents[0]->value;
    const auto& wv = self.parents[1]->value;
    const auto gm = self.grad.matrix();
    for (std::int64_t g = 0; g < groups; ++g) {
      ConstMatrixMap wg(wv.data() + g * gin * gout, gin, gout);
      if (needs(self, 0))
        gbuf(self, 0).matrix().middleCols(g * gin, gin).noalias() += gm.middleCols(g * gout, gout) * wg.transpose();
      if (needs(self, 1)) {
        MatrixMap dwg(gbuf(self, 1).data() + g * gin * gout, gin, gout);
        dwg.noalias() += xv.matrix().middleCols(g * gin, gin).transpose() * gm.middleCols(g * gout, gout);
      }
    }
    if (needs(self, 2)) {
      auto& gb = gbuf(self, 2);
      Eigen::Map<Eigen::RowVectorXd>(gb.data(), static_cast<Eigen::Index>(gb.size())) += gm.colwise().sum();
    }
  });
}

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return make_result(std::move(out), {x}, [](Node& self) {
    if (!needs(self, 0)) return;
    const auto& xv = self.parents[0]->value;
    auto& g = gbuf(self, 0);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = std::max(v, 0.0);
  return make_result(std::move(out), {x}, [](Node& self) {
    if (!needs(self, 0)) return;
    const auto& xv = self.parents[0]->value;
    auto& g = gbuf(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) g[i] += self.grad[i];
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const auto rows = x.value().rows(), cols = x.value().cols();
  if (gamma.value().size() != static_cast<std::size_t>(cols) || beta.value().size() != static_cast<std::size_t>(cols)) {
    throw std::invalid_argument("layer_norm: affine parameter size mismatch");
  }
  Tensor out(x.shape());
  Tensor xhat(Shape{rows, cols});
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  const auto xm = x.value().matrix();
  auto hm = xhat.matrix();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double mu = xm.row(r).mean();
    const double var = (xm.row(r).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    hm.row(r) = (xm.row(r).array() - mu) * is;
  }
  Eigen::Map<const Eigen::RowVectorXd> gv(gamma.value().data(), cols), bv(beta.value().data(), cols);
  out.matrix() = (hm.array().rowwise() * gv.array()).rowwise() + bv.array();
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), cols](Node& self) {
                       const auto gm = self.grad.matrix();
                       const auto hm = xhat.matrix();
                       if (needs(self, 1)) {
                         auto& gg = gbuf(self, 1);
                         Eigen::Map<Eigen::RowVectorXd>(gg.data(), cols) += (gm.array() * hm.array()).colwise().sum().matrix();
                       }
                       if (needs(self, 2)) {
                         auto& gb = gbuf(self, 2);
                         Eigen::Map<Eigen::RowVectorXd>(gb.data(), cols) += gm.colwise().sum();
                       }
                       if (needs(self, 0)) {
                         const auto& gamma = self.parents[1]->value;
                         Eigen::Map<const Eigen::RowVectorXd> gv(gamma.data(), cols);
                         auto dx = gbuf(self, 0).matrix();
                         for (Eigen::Index r = 0; r < gm.rows(); ++r) {
                           Eigen::RowVectorXd dh = gm.row(r).array() * gv.array();
                           const double m1 = dh.mean();
                           const double m2 = (dh.array() * hm.row(r).array()).mean();
                           dx.row(r).array() += inv_std[static_cast<std::size_t>(r)] *
                                                (dh.array() - m1 - hm.row(r).array() * m2);
                         }
                       }
                     });
}

Var softmax_rows(const Var& x) {
  Tensor out = x.value();
  auto m = out.matrix();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
  return make_result(std::move(out), {x}, [](Node& self) {
    if (!needs(self, 0)) return;
    const auto y = self.value.matrix();
    const auto gy = self.grad.matrix();
    auto dx = gbuf(self, 0).matrix();
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = y.row(r).dot(gy.row(r));
      dx.row(r).array() += y.row(r).array() * (gy.row(r).array() - dot);
    }
  });
}

namespace {

void softmax_inplace(RowMatrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

void check_attention_inputs(const Tensor& q, const Tensor& k, int heads) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1)) {
    throw std::invalid_argument("attention: q/k must be [N, D] with matching D");
  }
  if (heads <= 0 || q.dim(1) % heads != 0) throw std::invalid_argument("attention: D must be divisible by heads");
}

}  // namespace

Tensor attention_probs(const Tensor& q, const Tensor& k, int heads) {
  check_attention_inputs(q, k, heads);
  const auto n = q.dim(0), m = k.dim(0), d = q.dim(1) / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  Tensor out(Shape{heads, n, m});
  for (int h = 0; h < heads; ++h) {
    RowMatrix s = sc * q.matrix().middleCols(h * d, d) * k.matrix().middleCols(h * d, d).transpose();
    softmax_inplace(s);
    MatrixMap(out.data() + h * n * m, n, m) = s;
  }
  return out;
}

Var attention(const Var& q, const Var& k, const Var& v, int heads) {
  check_attention_inputs(q.value(), k.value(), heads);
  if (v.value().rank() != 2 || v.value().dim(0) != k.value().dim(0)) {
    throw std::invalid_argument("attention: v must have one row per key");
  }
  const auto n = q.value().dim(0), dim = q.value().dim(1), dv = v.value().dim(1) / heads;
  const auto d = dim / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<RowMatrix> probs(static_cast<std::size_t>(heads));
  Tensor out(Shape{n, dv * heads});
  const auto qm = q.value().matrix(), km = k.value().matrix(), vm = v.value().matrix();
  for (int h = 0; h < heads; ++h) {
    RowMatrix s = sc * qm.middleCols(h * d, d) * km.middleCols(h * d, d).transpose();
    softmax_inplace(s);
    out.matrix().middleCols(h * dv, dv).noalias() = s * vm.middleCols(h * dv, dv);
    probs[static_cast<std::size_t>(h)] = std::move(s);
  }
  return make_result(std::move(out), {q, k, v}, [probs = std::move(probs), heads, d, dv, sc](Node& self) {
    const auto qm = self.parents[0]->value.matrix();
    const auto km = self.parents[1]->value.matrix();
    const auto vm = self.parents[2]->value.matrix();
    const auto go = self.grad.matrix();
    for (int h = 0; h < heads; ++h) {
      const auto& p = probs[static_cast<std::size_t>(h)];
      const auto goh = go.middleCols(h * dv, dv);
      if (needs(self, 2)) gbuf(self, 2).matrix().middleCols(h * dv, dv).noalias() += p.transpose() * goh;
      if (!needs(self, 0) && !needs(self, 1)) continue;
      RowMatrix dp = goh * vm.middleCols(h * dv, dv).transpose();
      Eigen::VectorXd rowdot = (dp.array() * p.array()).rowwise().sum();
      RowMatrix ds = p.array() * (dp.colwise() - rowdot).array();
      ds *= sc;
      if (needs(self, 0)) gbuf(self, 0).matrix().middleCols(h * d, d).noalias() += ds * km.middleCols(h * d, d);
      if (needs(self, 1)) gbuf(self, 1).matrix().middleCols(h * d, d).noalias() += ds.transpose() * qm.middleCols(h * d, d);
    }
  });
}

Var concat_last(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last: no inputs");
  const auto rows = parts.front().value().rows();
  std::int64_t total = 0;
  std::vector<std::int64_t> widths;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw std::invalid_argument("concat_last: row count mismatch");
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out(with_last(parts.front().shape(), total));
  auto om = out.matrix();
  std::int64_t at = 0;
  for (const auto& p : parts) {
    om.middleCols(at, p.value().cols()) = p.value().matrix();
    at += p.value().cols();
  }
  return make_result(std::move(out), parts, [widths = std::move(widths)](Node& self) {
    std::int64_t at = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (needs(self, i)) gbuf(self, i).matrix() += self.grad.matrix().middleCols(at, widths[i]);
      at += widths[i];
    }
  });
}

Var slice_last(const Var& x, std::int64_t begin, std::int64_t end) {
  const auto cols = x.value().cols();
  if (begin < 0 || end > cols || begin >= end) throw std::invalid_argument("slice_last: bad range");
  Tensor out(with_last(x.shape(), end - begin));
  out.matrix() = x.value().matrix().middleCols(begin, end - begin);
  return make_result(std::move(out), {x}, [begin, end](Node& self) {
    if (needs(self, 0)) gbuf(self, 0).matrix().middleCols(begin, end - begin) += self.grad.matrix();
  });
}

Var resample(const Var& x, const RowMatrix& ry, const RowMatrix& rx) {
  require_rank3(x, "resample");
  const auto h = x.value().dim(0), w = x.value().dim(1), c = x.value().dim(2);
  if (ry.cols() != h || rx.cols() != w) throw std::invalid_argument("resample: weight shape mismatch");
  const auto ho = ry.rows(), wo = rx.rows();
  ConstMatrixMap xm(x.value().data(), h, w * c);
  RowMatrix tmp = ry * xm;  // [ho, w*c]
  Tensor out(Shape{ho, wo, c});
  for (Eigen::Index o = 0; o < ho; ++o) {
    ConstMatrixMap to(tmp.data() + o * w * c, w, c);
    MatrixMap(out.data() + o * wo * c, wo, c).noalias() = rx * to;
  }
  return make_result(std::move(out), {x}, [ry, rx, h, w, c, ho, wo](Node& self) {
    if (!needs(self, 0)) return;
    RowMatrix dtmp(ho, w * c);
    for (Eigen::Index o = 0; o < ho; ++o) {
      ConstMatrixMap go(self.grad.data() + o * wo * c, wo, c);
      MatrixMap(dtmp.data() + o * w * c, w, c).noalias() = rx.transpose() * go;
    }
    MatrixMap(gbuf(self, 0).data(), h, w * c).noalias() += ry.transpose() * dtmp;
  });
}

RowMatrix bilinear_weights(std::int64_t in, std::int64_t out) {
  RowMatrix r = RowMatrix::Zero(out, in);
  const double sc = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * sc - 0.5;
    src = std::max(src, 0.0);
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    i0 = std::min(i0, in - 1);
    const auto i1 = std::min(i0 + 1, in - 1);
    const double t = src - static_cast<double>(i0);
    r(o, i0) += 1.0 - t;
    r(o, i1) += t;
  }
  return r;
}

RowMatrix bicubic_weights(std::int64_t in, std::int64_t out) {
  constexpr double a = -0.75;
  auto cubic = [](double t) {
    t = std::abs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
    return 0.0;
  };
  RowMatrix r = RowMatrix::Zero(out, in);
  const double sc = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * sc - 0.5;
    const auto base = static_cast<std::int64_t>(std::floor(src));
    const double t = src - static_cast<double>(base);
    for (int k = -1; k <= 2; ++k) {
      const auto idx = std::clamp<std::int64_t>(base + k, 0, in - 1);
      r(o, idx) += cubic(static_cast<double>(k) - t);
    }
  }
  return r;
}

RowMatrix adaptive_avg_weights(std::int64_t in, std::int64_t out) {
  RowMatrix r = RowMatrix::Zero(out, in);
  for (std::int64_t o = 0; o < out; ++o) {
    const auto start = (o * in) / out;
    const auto end = ((o + 1) * in + out - 1) / out;
    for (auto i = start; i < end; ++i) r(o, i) = 1.0 / static_cast<double>(end - start);
  }
  return r;
}

Var resize_bilinear(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank3(x, "resize_bilinear");
  if (x.value().dim(0) == out_h && x.value().dim(1) == out_w) return x;
  return resample(x, bilinear_weights(x.value().dim(0), out_h), bilinear_weights(x.value().dim(1), out_w));
}

Var adaptive_avg_pool(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank3(x, "adaptive_avg_pool");
  return resample(x, adaptive_avg_weights(x.value().dim(0), out_h), adaptive_avg_weights(x.value().dim(1), out_w));
}

Var conv2d(const Var& x, const Var& w, const Var& b, int kernel, int stride, int pad) {
  require_rank3(x, "conv2d");
  const auto h = x.value().dim(0), wd = x.value().dim(1), cin = x.value().dim(2);
  const auto& wv = w.value();
  if (wv.rank() != 2 || wv.dim(0) != kernel * kernel * cin) {
    throw std::invalid_argument("conv2d: weight " + shape_string(wv.shape()) + " does not fit input " +
                                shape_string(x.shape()));
  }
  const auto cout = wv.dim(1);
  const auto ho = (h + 2 * pad - kernel) / stride + 1;
  const auto wo = (wd + 2 * pad - kernel) / stride + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: output would be empty");
  const auto kc = kernel * kernel * cin;
  RowMatrix col = RowMatrix::Zero(ho * wo, kc);
  const double* xd = x.value().data();
  for (std::int64_t oy = 0; oy < ho; ++oy) {
    for (std::int64_t ox = 0; ox < wo; ++ox) {
      double* row = col.data() + (oy * wo + ox) * kc;
      for (int ky = 0; ky < kernel; ++ky) {
        const auto iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kernel; ++kx) {
          const auto ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= wd) continue;
          std::copy_n(xd + (iy * wd + ix) * cin, cin, row + (ky * kernel + kx) * cin);
        }
      }
    }
  }
  Tensor out(Shape{ho, wo, cout});
  out.matrix().noalias() = col * wv.matrix();
  if (b.defined()) out.matrix().rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), cout);
  return make_result(std::move(out), {x, w, b},
                     [col = std::move(col), h, wd, cin, ho, wo, kernel, stride, pad, kc](Node& self) {
                       const auto gm = self.grad.matrix();
                       const auto& wv = self.parents[1]->value;
                       if (needs(self, 1)) gbuf(self, 1).matrix().noalias() += col.transpose() * gm;
                       if (needs(self, 2)) {
                         auto& gb = gbuf(self, 2);
                         Eigen::Map<Eigen::RowVectorXd>(gb.data(), static_cast<Eigen::Index>(gb.size())) +=
                             gm.colwise().sum();
                       }
                       if (!needs(self, 0)) return;
                       RowMatrix dcol = gm * wv.matrix().transpose();
                       double* gx = gbuf(self, 0).data();
                       for (std::int64_t oy = 0; oy < ho; ++oy) {
                         for (std::int64_t ox = 0; ox < wo; ++ox) {
                           const double* row = dcol.data() + (oy * wo + ox) * kc;
                           for (int ky = 0; ky < kernel; ++ky) {
                             const auto iy = oy * stride - pad + ky;
                             if (iy < 0 || iy >= h) continue;
                             for (int kx = 0; kx < kernel; ++kx) {
                               const auto ix = ox * stride - pad + kx;
                               if (ix < 0 || ix >= wd) continue;
                               double* dst = gx + (iy * wd + ix) * cin;
                               const double* src = row + (ky * kernel + kx) * cin;
                               for (std::int64_t c = 0; c < cin; ++c) dst[c] += src[c];
                             }
                           }
                         }
                       }
                     });
}

Var depthwise_conv3x3(const Var& x, const Var& w, const Var& b) {
  require_rank3(x, "depthwise_conv3x3");
  const auto h = x.value().dim(0), wd = x.value().dim(1), c = x.value().dim(2);
  if (w.value().size() != static_cast<std::size_t>(9 * c)) throw std::invalid_argument("depthwise_conv3x3: weight");
  Tensor out(x.shape());
  const double* xd = x.value().data();
  const double* wdat = w.value().data();
  double* od = out.data();
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t xx = 0; xx < wd; ++xx) {
      double* o = od + (y * wd + xx) * c;
      if (b.defined()) std::copy_n(b.value().data(), c, o);
      for (int k = 0; k < 9; ++k) {
        const auto iy = y + k / 3 - 1, ix = xx + k % 3 - 1;
        if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
        const double* src = xd + (iy * wd + ix) * c;
        const double* wk = wdat + k * c;
        for (std::int64_t ch = 0; ch < c; ++ch) o[ch] += wk[ch] * src[ch];
      }
    }
  }
  return make_result(std::move(out), {x, w, b}, [h, wd, c](Node& self) {
    const double* xd = self.parents[0]->value.data();
    const double* wdat = self.parents[1]->value.data();
    const double* g = self.grad.data();
    double* gx = needs(self, 0) ? gbuf(self, 0).data() : nullptr;
    double* gw = needs(self, 1) ? gbuf(self, 1).data() : nullptr;
    double* gb = needs(self, 2) ? gbuf(self, 2).data() : nullptr;
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t xx = 0; xx < wd; ++xx) {
        const double* go = g + (y * wd + xx) * c;
        if (gb)
          for (std::int64_t ch = 0; ch < c; ++ch) gb[ch] += go[ch];
        for (int k = 0; k < 9; ++k) {
          const auto iy = y + k / 3 - 1, ix = xx + k % 3 - 1;
          if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
          const auto off = (iy * wd + ix) * c;
          for (std::int64_t ch = 0; ch < c; ++ch) {
            if (gx) gx[off + ch] += wdat[k * c + ch] * go[ch];
            if (gw) gw[k * c + ch] += xd[off + ch] * go[ch];
          }
        }
      }
    }
  });
}

Var mask_rows(const Var& x, std::span<const std::uint8_t> flags, const Var& fill) {
  const auto rows = x.value().rows(), cols = x.value().cols();
  if (static_cast<std::int64_t>(flags.size()) != rows) throw std::invalid_argument("mask_rows: flag count mismatch");
  if (fill.value().size() != static_cast<std::size_t>(cols)) throw std::invalid_argument("mask_rows: fill size");
  Tensor out = x.value();
  auto om = out.matrix();
  Eigen::Map<const Eigen::RowVectorXd> fv(fill.value().data(), cols);
  for (std::int64_t r = 0; r < rows; ++r)
    if (flags[static_cast<std::size_t>(r)]) om.row(r) = fv;
  std::vector<std::uint8_t> keep(flags.begin(), flags.end());
  return make_result(std::move(out), {x, fill}, [keep = std::move(keep), cols](Node& self) {
    const auto gm = self.grad.matrix();
    for (Eigen::Index r = 0; r < gm.rows(); ++r) {
      if (keep[static_cast<std::size_t>(r)]) {
        if (needs(self, 1)) Eigen::Map<Eigen::RowVectorXd>(gbuf(self, 1).data(), cols) += gm.row(r);
      } else if (needs(self, 0)) {
        gbuf(self, 0).matrix().row(r) += gm.row(r);
      }
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const std::int32_t> targets, std::span<const std::uint8_t> include) {
  const auto rows = logits.value().rows(), k = logits.value().cols();
  if (static_cast<std::int64_t>(targets.size()) != rows) throw std::invalid_argument("cross_entropy: target count");
  if (!include.empty() && static_cast<std::int64_t>(include.size()) != rows) {
    throw std::invalid_argument("cross_entropy: include flag count");
  }
  std::int64_t count = 0;
  for (std::int64_t r = 0; r < rows; ++r)
    if (include.empty() || include[static_cast<std::size_t>(r)]) ++count;
  if (count == 0) throw std::invalid_argument("cross_entropy: no rows selected, mean undefined");
  RowMatrix probs(rows, k);
  const auto lm = logits.value().matrix();
  double total = 0.0;
  std::vector<std::uint8_t> used(static_cast<std::size_t>(rows), 0);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  for (std::int64_t r = 0; r < rows; ++r) {
    if (!include.empty() && !include[static_cast<std::size_t>(r)]) continue;
    const auto t = tg[static_cast<std::size_t>(r)];
    if (t < 0 || t >= k) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(k) + ")");
    }
    used[static_cast<std::size_t>(r)] = 1;
    const double mx = lm.row(r).maxCoeff();
    probs.row(r) = (lm.row(r).array() - mx).exp();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    total += std::log(z) + mx - lm(r, t);
  }
  const double inv = 1.0 / static_cast<double>(count);
  return make_result(Tensor::scalar(total * inv), {logits},
                     [probs = std::move(probs), used = std::move(used), tg = std::move(tg), inv](Node& self) {
                       if (!needs(self, 0)) return;
                       const double g = self.grad[0] * inv;
                       auto dl = gbuf(self, 0).matrix();
                       for (Eigen::Index r = 0; r < dl.rows(); ++r) {
                         if (!used[static_cast<std::size_t>(r)]) continue;
                         dl.row(r) += g * probs.row(r);
                         dl(r, tg[static_cast<std::size_t>(r)]) -= g;
                       }
                     });
}

Var sum(const Var& x) {
  return make_result(Tensor::scalar(x.value().matrix().sum()), {x}, [](Node& self) {
    if (needs(self, 0)) gbuf(self, 0).matrix().array() += self.grad[0];
  });
}

Var mean(const Var& x) {
  const double n = static_cast<double>(x.value().size());
  return make_result(Tensor::scalar(x.value().matrix().sum() / n), {x}, [n](Node& self) {
    if (needs(self, 0)) gbuf(self, 0).matrix().array() += self.grad[0] / n;
  });
}

Var mean_row_sq_norm(const Var& x) {
  const double rows = static_cast<double>(x.value().rows());
  return make_result(Tensor::scalar(x.value().matrix().squaredNorm() / rows), {x}, [rows](Node& self) {
    if (needs(self, 0)) gbuf(self, 0).matrix() += (2.0 * self.grad[0] / rows) * self.parents[0]->value.matrix();
  });
}

Var l2_normalize_rows(const Var& x) {
  Tensor out = x.value();
  auto m = out.matrix();
  std::vector<double> norms(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double n = m.row(r).norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw std::domain_error("l2_normalize_rows: row " + std::to_string(r) + " has zero or non-finite norm");
    }
    norms[static_cast<std::size_t>(r)] = n;
    m.row(r) /= n;
  }
  return make_result(std::move(out), {x}, [norms = std::move(norms)](Node& self) {
    if (!needs(self, 0)) return;
    const auto y = self.value.matrix();
    const auto gy = self.grad.matrix();
    auto dx = gbuf(self, 0).matrix();
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = y.row(r).dot(gy.row(r));
      dx.row(r) += (gy.row(r) - dot * y.row(r)) / norms[static_cast<std::size_t>(r)];
    }
  });
}

Var cosine_distance_mean(const Var& a, const Var& b) {
  check_same(a, b, "cosine_distance_mean");
  const auto am = a.value().matrix(), bm = b.value().matrix();
  const auto rows = am.rows();
  std::vector<double> na(static_cast<std::size_t>(rows)), nb(static_cast<std::size_t>(rows)),
      cs(static_cast<std::size_t>(rows));
  double total = 0.0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto i = static_cast<std::size_t>(r);
    na[i] = std::max(am.row(r).norm(), 1e-12);
    nb[i] = std::max(bm.row(r).norm(), 1e-12);
    cs[i] = am.row(r).dot(bm.row(r)) / (na[i] * nb[i]);
    total += 1.0 - cs[i];
  }
  const double inv = 1.0 / static_cast<double>(rows);
  return make_result(Tensor::scalar(total * inv), {a, b},
                     [na = std::move(na), nb = std::move(nb), cs = std::move(cs), inv](Node& self) {
                       const auto am = self.parents[0]->value.matrix();
                       const auto bm = self.parents[1]->value.matrix();
                       const double g = -self.grad[0] * inv;
                       for (Eigen::Index r = 0; r < am.rows(); ++r) {
                         const auto i = static_cast<std::size_t>(r);
                         if (needs(self, 0))
                           gbuf(self, 0).matrix().row(r) +=
                               g * (bm.row(r) / (na[i] * nb[i]) - cs[i] * am.row(r) / (na[i] * na[i]));
                         if (needs(self, 1))
                           gbuf(self, 1).matrix().row(r) +=
                               g * (am.row(r) / (na[i] * nb[i]) - cs[i] * bm.row(r) / (nb[i] * nb[i]));
                       }
                     });
}

namespace {

struct Corner {
  std::int64_t y, x;
  double w, dwy, dwx;  // weight and its derivatives w.r.t. the sample point
};

// Up to four in-range bilinear corners for point (py, px).
int bilinear_corners(double py, double px, std::int64_t h, std::int64_t w, Corner out[4]) {
  const double fy = std::floor(py), fx = std::floor(px);
  const auto y0 = static_cast<std::int64_t>(fy), x0 = static_cast<std::int64_t>(fx);
  const double ly = py - fy, lx = px - fx;
  int n = 0;
  for (int dy = 0; dy < 2; ++dy) {
    const auto yy = y0 + dy;
    if (yy < 0 || yy >= h) continue;
    const double wy = dy ? ly : 1.0 - ly;
    const double dwy = dy ? 1.0 : -1.0;
    for (int dx = 0; dx < 2; ++dx) {
      const auto xx = x0 + dx;
      if (xx < 0 || xx >= w) continue;
      const double wx = dx ? lx : 1.0 - lx;
      const double dwx = dx ? 1.0 : -1.0;
      out[n++] = Corner{yy, xx, wy * wx, dwy * wx, wy * dwx};
    }
  }
  return n;
}

}  // namespace

Var dcn_sample(const Var& value, const Var& offsets, const Var& modulation, int groups) {
  require_rank3(value, "dcn_sample");
  constexpr int kPoints = 9;
  const auto h = value.value().dim(0), w = value.value().dim(1), c = value.value().dim(2);
  if (groups <= 0 || c % groups != 0) throw std::invalid_argument("dcn_sample: channels not divisible by groups");
  if (offsets.shape() != Shape{h, w, groups * kPoints * 2}) {
    throw std::invalid_argument("dcn_sample: offsets must be [H, W, G*9*2], got " + shape_string(offsets.shape()));
  }
  if (modulation.shape() != Shape{h, w, groups * kPoints}) {
    throw std::invalid_argument("dcn_sample: modulation must be [H, W, G*9], got " + shape_string(modulation.shape()));
  }
  const auto cg = c / groups;
  Tensor out(Shape{h, w, c});
  const double* vd = value.value().data();
  const double* od = offsets.value().data();
  const double* md = modulation.value().data();
  double* outd = out.data();
  Corner corners[4];
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x) {
      const auto p = y * w + x;
      for (int g = 0; g < groups; ++g) {
        double* o = outd + p * c + g * cg;
        for (int k = 0; k < kPoints; ++k) {
          const auto gk = g * kPoints + k;
          const double py = static_cast<double>(y + k / 3 - 1) + od[p * groups * kPoints * 2 + gk * 2];
          const double px = static_cast<double>(x + k % 3 - 1) + od[p * groups * kPoints * 2 + gk * 2 + 1];
          const double m = md[p * groups * kPoints + gk];
          const int n = bilinear_corners(py, px, h, w, corners);
          for (int q = 0; q < n; ++q) {
            const double* src = vd + (corners[q].y * w + corners[q].x) * c + g * cg;
            const double cw = m * corners[q].w;
            for (std::int64_t ch = 0; ch < cg; ++ch) o[ch] += cw * src[ch];
          }
        }
      }
    }
  }
  return make_result(std::move(out), {value, offsets, modulation}, [h, w, c, cg, groups](Node& self) {
    const double* vd = self.parents[0]->value.data();
    const double* od = self.parents[1]->value.data();
    const double* md = self.parents[2]->value.data();
    const double* g = self.grad.data();
    double* gv = needs(self, 0) ? gbuf(self, 0).data() : nullptr;
    double* go = needs(self, 1) ? gbuf(self, 1).data() : nullptr;
    double* gm = needs(self, 2) ? gbuf(self, 2).data() : nullptr;
    Corner corners[4];
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        const auto p = y * w + x;
        for (int grp = 0; grp < groups; ++grp) {
          const double* gout = g + p * c + grp * cg;
          for (int k = 0; k < kPoints; ++k) {
            const auto gk = grp * kPoints + k;
            const auto oi = p * groups * kPoints * 2 + gk * 2;
            const double py = static_cast<double>(y + k / 3 - 1) + od[oi];
            const double px = static_cast<double>(x + k % 3 - 1) + od[oi + 1];
            const double m = md[p * groups * kPoints + gk];
            const int n = bilinear_corners(py, px, h, w, corners);
            double dsample_dm = 0.0, dpy = 0.0, dpx = 0.0;
            for (int q = 0; q < n; ++q) {
              const auto base = (corners[q].y * w + corners[q].x) * c + grp * cg;
              double dot = 0.0;
              for (std::int64_t ch = 0; ch < cg; ++ch) {
                dot += gout[ch] * vd[base + ch];
                if (gv) gv[base + ch] += m * corners[q].w * gout[ch];
              }
              dsample_dm += corners[q].w * dot;
              dpy += corners[q].dwy * dot;
              dpx += corners[q].dwx * dot;
            }
            if (gm) gm[p * groups * kPoints + gk] += dsample_dm;
            if (go) {
              go[oi] += m * dpy;
              go[oi + 1] += m * dpx;
            }
          }
        }
      }
    }
  });
}

}  // namespace segkit::ops

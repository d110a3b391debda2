#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "invmat/errors.hpp"
#include "invmat/rng.hpp"

// Hand-rolled denoising UNet. Every layer owns its parameters and the
// activations it stashes during a recorded forward pass, so one instance
// serves exactly one position in the graph. Reductions accumulate in double
// regardless of the scalar type.
namespace invmat::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
struct Tensor {
  int n = 0, c = 0, d = 1, h = 0, w = 0;
  std::vector<S> v;

  void resize(int n_, int c_, int d_, int h_, int w_) {
    n = n_;
    c = c_;
    d = d_;
    h = h_;
    w = w_;
    v.assign(size_t(n) * c * d * h * w, S(0));
  }
  int spatial() const { return d * h * w; }
  size_t size() const { return v.size(); }
  S* at(int i, int ch) { return v.data() + (size_t(i) * c + ch) * spatial(); }
  const S* at(int i, int ch) const { return v.data() + (size_t(i) * c + ch) * spatial(); }
};

template <typename S>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<S> w, g;
  bool trainable = true;

  void init(const std::string& name_, std::vector<int> shape_) {
    name = name_;
    shape = std::move(shape_);
    size_t n = 1;
    for (int s : shape) n *= size_t(s);
    w.assign(n, S(0));
    g.assign(n, S(0));
  }
};

template <typename S>
inline void fill_normal(std::vector<S>& v, double stddev, Rng& rng) {
  for (auto& x : v) x = S(stddev * rng.normal());
}

// ---- convolution ----

template <typename S>
struct Conv {
  int dims = 2, k = 3, cin = 0, cout = 0, pad = 0, K = 1;
  Param<S> w, b;
  Tensor<S> x_;
  Mat<S> col_;

  void init(const std::string& name, int dims_, int k_, int cin_, int cout_, Rng& rng,
            bool zero_init) {
    dims = dims_;
    k = k_;
    cin = cin_;
    cout = cout_;
    pad = (k - 1) / 2;
    K = 1;
    for (int d = 0; d < dims; ++d) K *= k;
    w.init(name + ".w", {cout, cin, K});
    b.init(name + ".b", {cout});
    if (!zero_init) fill_normal(w.w, std::sqrt(2.0 / (double(cin) * K)), rng);
  }

  void im2col(const Tensor<S>& x, Mat<S>& col) const {
    const int S_ = x.spatial();
    col.resize(cin * K, size_t(x.n) * S_);
    if (pad > 0) col.setZero();
    const int kd = dims == 3 ? k : 1;
    for (int i = 0; i < x.n; ++i) {
      for (int ci = 0; ci < cin; ++ci) {
        const S* src = x.at(i, ci);
        for (int kz = 0; kz < kd; ++kz) {
          const int dz = dims == 3 ? kz - pad : 0;
          for (int ky = 0; ky < k; ++ky) {
            const int dy = ky - pad;
            for (int kx = 0; kx < k; ++kx) {
              const int dx = kx - pad;
              const int kidx = (kz * k + ky) * k + kx;
              S* dst = col.data() + (size_t(ci) * K + kidx) * col.cols() + size_t(i) * S_;
              for (int z = 0; z < x.d; ++z) {
                const int sz = z + dz;
                if (sz < 0 || sz >= x.d) continue;
                for (int y = 0; y < x.h; ++y) {
                  const int sy = y + dy;
                  if (sy < 0 || sy >= x.h) continue;
                  const int x0 = std::max(0, -dx), x1 = std::min(x.w, x.w - dx);
                  const S* s = src + (size_t(sz) * x.h + sy) * x.w + dx;
                  S* dd = dst + (size_t(z) * x.h + y) * x.w;
                  for (int xx = x0; xx < x1; ++xx) dd[xx] = s[xx];
                }
              }
            }
          }
        }
      }
    }
  }

  void col2im(const Mat<S>& col, Tensor<S>& x) const {
    const int S_ = x.spatial();
    const int kd = dims == 3 ? k : 1;
    for (int i = 0; i < x.n; ++i) {
      for (int ci = 0; ci < cin; ++ci) {
        S* dst = x.at(i, ci);
        for (int kz = 0; kz < kd; ++kz) {
          const int dz = dims == 3 ? kz - pad : 0;
          for (int ky = 0; ky < k; ++ky) {
            const int dy = ky - pad;
            for (int kx = 0; kx < k; ++kx) {
              const int dx = kx - pad;
              const int kidx = (kz * k + ky) * k + kx;
              const S* src =
                  col.data() + (size_t(ci) * K + kidx) * col.cols() + size_t(i) * S_;
              for (int z = 0; z < x.d; ++z) {
                const int sz = z + dz;
                if (sz < 0 || sz >= x.d) continue;
                for (int y = 0; y < x.h; ++y) {
                  const int sy = y + dy;
                  if (sy < 0 || sy >= x.h) continue;
                  const int x0 = std::max(0, -dx), x1 = std::min(x.w, x.w - dx);
                  S* dd = dst + (size_t(sz) * x.h + sy) * x.w + dx;
                  const S* s = src + (size_t(z) * x.h + y) * x.w;
                  for (int xx = x0; xx < x1; ++xx) dd[xx] += s[xx];
                }
              }
            }
          }
        }
      }
    }
  }

  Tensor<S> forward(const Tensor<S>& x, bool stash) {
    if (x.c != cin) throw ValidationError(w.name + ": channel mismatch");
    im2col(x, col_);
    Eigen::Map<const Mat<S>> W(w.w.data(), cout, size_t(cin) * K);
    Mat<S> Y(cout, col_.cols());
    Y.noalias() = W * col_;
    Tensor<S> y;
    y.resize(x.n, cout, x.d, x.h, x.w);
    const int S_ = x.spatial();
    for (int i = 0; i < x.n; ++i)
      for (int co = 0; co < cout; ++co) {
        const S* src = Y.data() + size_t(co) * Y.cols() + size_t(i) * S_;
        S* dst = y.at(i, co);
        const S bias = b.w[co];
        for (int s = 0; s < S_; ++s) dst[s] = src[s] + bias;
      }
    if (stash) x_ = x;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy, bool pgrads) {
    const int S_ = x_.spatial();
    Mat<S> dY(cout, size_t(dy.n) * S_);
    for (int i = 0; i < dy.n; ++i)
      for (int co = 0; co < cout; ++co) {
        const S* src = dy.at(i, co);
        S* dst = dY.data() + size_t(co) * dY.cols() + size_t(i) * S_;
        for (int s = 0; s < S_; ++s) dst[s] = src[s];
      }
    im2col(x_, col_);
    if (pgrads) {
      Eigen::Map<Mat<S>> gW(w.g.data(), cout, size_t(cin) * K);
      gW.noalias() += dY * col_.transpose();
      for (int co = 0; co < cout; ++co) {
        double acc = 0.0;
        const S* row = dY.data() + size_t(co) * dY.cols();
        for (Eigen::Index j = 0; j < dY.cols(); ++j) acc += double(row[j]);
        b.g[co] += S(acc);
      }
    }
    Eigen::Map<const Mat<S>> W(w.w.data(), cout, size_t(cin) * K);
    Mat<S> dcol(size_t(cin) * K, dY.cols());
    dcol.noalias() = W.transpose() * dY;
    Tensor<S> dx;
    dx.resize(x_.n, cin, x_.d, x_.h, x_.w);
    col2im(dcol, dx);
    return dx;
  }

  void collect(std::vector<Param<S>*>& ps) {
    ps.push_back(&w);
    ps.push_back(&b);
  }
};

// ---- group normalization ----

template <typename S>
struct GroupNorm {
  int c = 0, groups = 8;
  double eps = 1e-5;
  Param<S> gamma, beta;
  Tensor<S> xhat_;
  std::vector<double> inv_;  // per (sample, group)

  void init(const std::string& name, int c_, int groups_) {
    c = c_;
    groups = groups_;
    if (c % groups != 0) throw ValidationError(name + ": channels not divisible by groups");
    gamma.init(name + ".gamma", {c});
    beta.init(name + ".beta", {c});
    std::fill(gamma.w.begin(), gamma.w.end(), S(1));
  }

  Tensor<S> forward(const Tensor<S>& x, bool stash) {
    const int cpg = c / groups;
    const int S_ = x.spatial();
    const size_t m = size_t(cpg) * S_;
    Tensor<S> y = x;
    Tensor<S> xhat;
    xhat.resize(x.n, x.c, x.d, x.h, x.w);
    std::vector<double> inv(size_t(x.n) * groups);
    for (int i = 0; i < x.n; ++i) {
      for (int g = 0; g < groups; ++g) {
        double mean = 0.0;
        for (int cc = 0; cc < cpg; ++cc) {
          const S* p = x.at(i, g * cpg + cc);
          for (int s = 0; s < S_; ++s) mean += double(p[s]);
        }
        mean /= double(m);
        double var = 0.0;
        for (int cc = 0; cc < cpg; ++cc) {
          const S* p = x.at(i, g * cpg + cc);
          for (int s = 0; s < S_; ++s) {
            const double d = double(p[s]) - mean;
            var += d * d;
          }
        }
        var /= double(m);
        const double iv = 1.0 / std::sqrt(var + eps);
        inv[size_t(i) * groups + g] = iv;
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          const S* p = x.at(i, ch);
          S* xh = xhat.at(i, ch);
          S* yy = y.at(i, ch);
          const double ga = double(gamma.w[ch]), be = double(beta.w[ch]);
          for (int s = 0; s < S_; ++s) {
            const double v = (double(p[s]) - mean) * iv;
            xh[s] = S(v);
            yy[s] = S(ga * v + be);
          }
        }
      }
    }
    if (stash) {
      xhat_ = std::move(xhat);
      inv_ = std::move(inv);
    }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy, bool pgrads) {
    const int cpg = c / groups;
    const int S_ = xhat_.spatial();
    const double m = double(cpg) * S_;
    Tensor<S> dx;
    dx.resize(dy.n, dy.c, dy.d, dy.h, dy.w);
    if (pgrads) {
      for (int ch = 0; ch < c; ++ch) {
        double dg = 0.0, db = 0.0;
        for (int i = 0; i < dy.n; ++i) {
          const S* d = dy.at(i, ch);
          const S* xh = xhat_.at(i, ch);
          for (int s = 0; s < S_; ++s) {
            dg += double(d[s]) * double(xh[s]);
            db += double(d[s]);
          }
        }
        gamma.g[ch] += S(dg);
        beta.g[ch] += S(db);
      }
    }
    for (int i = 0; i < dy.n; ++i) {
      for (int g = 0; g < groups; ++g) {
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          const S* d = dy.at(i, ch);
          const S* xh = xhat_.at(i, ch);
          const double ga = double(gamma.w[ch]);
          for (int s = 0; s < S_; ++s) {
            const double dxh = double(d[s]) * ga;
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * double(xh[s]);
          }
        }
        const double iv = inv_[size_t(i) * groups + g];
        for (int cc = 0; cc < cpg; ++cc) {
          const int ch = g * cpg + cc;
          const S* d = dy.at(i, ch);
          const S* xh = xhat_.at(i, ch);
          S* o = dx.at(i, ch);
          const double ga = double(gamma.w[ch]);
          for (int s = 0; s < S_; ++s) {
            const double dxh = double(d[s]) * ga;
            o[s] = S(iv * (dxh - sum_dxhat / m - double(xh[s]) * sum_dxhat_xhat / m));
          }
        }
      }
    }
    return dx;
  }

  void collect(std::vector<Param<S>*>& ps) {
    ps.push_back(&gamma);
    ps.push_back(&beta);
  }
};

// ---- SiLU ----

template <typename S>
struct SiLU {
  Tensor<S> x_;

  Tensor<S> forward(const Tensor<S>& x, bool stash) {
    Tensor<S> y = x;
    for (auto& v : y.v) {
      const double xv = double(v);
      v = S(xv / (1.0 + std::exp(-xv)));
    }
    if (stash) x_ = x;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy, bool) {
    Tensor<S> dx = dy;
    for (size_t i = 0; i < dx.v.size(); ++i) {
      const double xv = double(x_.v[i]);
      const double sg = 1.0 / (1.0 + std::exp(-xv));
      dx.v[i] = S(double(dy.v[i]) * sg * (1.0 + xv * (1.0 - sg)));
    }
    return dx;
  }
};

// ---- pooling / upsampling ----

template <typename S>
struct AvgPool2 {
  int dims = 2;
  std::array<int, 5> in_shape_{};

  Tensor<S> forward(const Tensor<S>& x, bool stash) {
    const int pd = dims == 3 ? 2 : 1;
    if (x.h % 2 || x.w % 2 || (dims == 3 && x.d % 2))
      throw ValidationError("pooling needs even spatial extents");
    Tensor<S> y;
    y.resize(x.n, x.c, x.d / pd, x.h / 2, x.w / 2);
    const double scale = 1.0 / (4.0 * pd);
    for (int i = 0; i < x.n; ++i)
      for (int ch = 0; ch < x.c; ++ch) {
        const S* src = x.at(i, ch);
        S* dst = y.at(i, ch);
        for (int z = 0; z < y.d; ++z)
          for (int yy = 0; yy < y.h; ++yy)
            for (int xx = 0; xx < y.w; ++xx) {
              double acc = 0.0;
              for (int a = 0; a < pd; ++a)
                for (int by = 0; by < 2; ++by)
                  for (int bx = 0; bx < 2; ++bx)
                    acc += double(src[(size_t(pd * z + a) * x.h + 2 * yy + by) * x.w +
                                      2 * xx + bx]);
              dst[(size_t(z) * y.h + yy) * y.w + xx] = S(acc * scale);
            }
      }
    if (stash) in_shape_ = {x.n, x.c, x.d, x.h, x.w};
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy, bool) {
    const int pd = dims == 3 ? 2 : 1;
    Tensor<S> dx;
    dx.resize(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3], in_shape_[4]);
    const double scale = 1.0 / (4.0 * pd);
    for (int i = 0; i < dy.n; ++i)
      for (int ch = 0; ch < dy.c; ++ch) {
        const S* src = dy.at(i, ch);
        S* dst = dx.at(i, ch);
        for (int z = 0; z < dy.d; ++z)
          for (int yy = 0; yy < dy.h; ++yy)
            for (int xx = 0; xx < dy.w; ++xx) {
              const S g = S(double(src[(size_t(z) * dy.h + yy) * dy.w + xx]) * scale);
              for (int a = 0; a < pd; ++a)
                for (int by = 0; by < 2; ++by)
                  for (int bx = 0; bx < 2; ++bx)
                    dst[(size_t(pd * z + a) * dx.h + 2 * yy + by) * dx.w + 2 * xx + bx] = g;
            }
      }
    return dx;
  }
};

template <typename S>
struct UpsampleNearest2 {
  int dims = 2;

  Tensor<S> forward(const Tensor<S>& x, bool) {
    const int pd = dims == 3 ? 2 : 1;
    Tensor<S> y;
    y.resize(x.n, x.c, x.d * pd, x.h * 2, x.w * 2);
    for (int i = 0; i < x.n; ++i)
      for (int ch = 0; ch < x.c; ++ch) {
        const S* src = x.at(i, ch);
        S* dst = y.at(i, ch);
        for (int z = 0; z < y.d; ++z)
          for (int yy = 0; yy < y.h; ++yy)
            for (int xx = 0; xx < y.w; ++xx)
              dst[(size_t(z) * y.h + yy) * y.w + xx] =
                  src[(size_t(z / pd) * x.h + yy / 2) * x.w + xx / 2];
      }
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy, bool) {
    const int pd = dims == 3 ? 2 : 1;
    Tensor<S> dx;
    dx.resize(dy.n, dy.c, dy.d / pd, dy.h / 2, dy.w / 2);
    for (int i = 0; i < dy.n; ++i)
      for (int ch = 0; ch < dy.c; ++ch) {
        const S* src = dy.at(i, ch);
        S* dst = dx.at(i, ch);
        for (int z = 0; z < dy.d; ++z)
          for (int yy = 0; yy < dy.h; ++yy)
            for (int xx = 0; xx < dy.w; ++xx)
              dst[(size_t(z / pd) * dx.h + yy / 2) * dx.w + xx / 2] +=
                  src[(size_t(z) * dy.h + yy) * dy.w + xx];
      }
    return dx;
  }
};

// ---- dense layer on [n, features] tensors ----

template <typename S>
struct Linear {
  int in = 0, out = 0;
  Param<S> w, b;
  Tensor<S> x_;

  void init(const std::string& name, int in_, int out_, Rng& rng) {
    in = in_;
    out = out_;
    w.init(name + ".w", {out, in});
    b.init(name + ".b", {out});
    fill_normal(w.w, std::sqrt(2.0 / double(in)), rng);
  }

  Tensor<S> forward(const Tensor<S>& x, bool stash) {
    Tensor<S> y;
    y.resize(x.n, out, 1, 1, 1);
    Eigen::Map<const Mat<S>> X(x.v.data(), x.n, in);
    Eigen::Map<const Mat<S>> W(w.w.data(), out, in);
    Eigen::Map<Mat<S>> Y(y.v.data(), x.n, out);
    Y.noalias() = X * W.transpose();
    for (int i = 0; i < x.n; ++i)
      for (int o = 0; o < out; ++o) Y(i, o) += b.w[o];
    if (stash) x_ = x;
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy, bool pgrads) {
    Eigen::Map<const Mat<S>> dY(dy.v.data(), dy.n, out);
    Eigen::Map<const Mat<S>> X(x_.v.data(), x_.n, in);
    Eigen::Map<const Mat<S>> W(w.w.data(), out, in);
    if (pgrads) {
      Eigen::Map<Mat<S>> gW(w.g.data(), out, in);
      gW.noalias() += dY.transpose() * X;
      for (int o = 0; o < out; ++o) {
        double acc = 0.0;
        for (int i = 0; i < dy.n; ++i) acc += double(dY(i, o));
        b.g[o] += S(acc);
      }
    }
    Tensor<S> dx;
    dx.resize(dy.n, in, 1, 1, 1);
    Eigen::Map<Mat<S>> dX(dx.v.data(), dy.n, in);
    dX.noalias() = dY * W;
    return dx;
  }

  void collect(std::vector<Param<S>*>& ps) {
    ps.push_back(&w);
    ps.push_back(&b);
  }
};

// ---- Gaussian Fourier timestep embedding (frozen frequencies) ----

template <typename S>
struct FourierEmbed {
  int n_freq = 8;
  double scale = 0.016;
  Param<S> freq;

  void init(const std::string& name, Rng& rng) {
    freq.init(name + ".freq", {n_freq});
    freq.trainable = false;
    fill_normal(freq.w, scale, rng);
  }

  Tensor<S> forward(const std::vector<int>& t) const {
    Tensor<S> y;
    y.resize(int(t.size()), 2 * n_freq, 1, 1, 1);
    constexpr double two_pi = 6.28318530717958647692;
    for (size_t i = 0; i < t.size(); ++i)
      for (int j = 0; j < n_freq; ++j) {
        const double a = two_pi * double(t[i]) * double(freq.w[j]);
        y.v[i * 2 * n_freq + j] = S(std::sin(a));
        y.v[i * 2 * n_freq + n_freq + j] = S(std::cos(a));
      }
    return y;
  }

  void collect(std::vector<Param<S>*>& ps) { ps.push_back(&freq); }
};

// ---- residual unit ----

template <typename S>
struct ResUnit {
  int cin = 0, cout = 0;
  GroupNorm<S> gn1, gn2;
  SiLU<S> act1, act2;
  Conv<S> conv1, conv2, shortcut;
  Linear<S> temb_proj;

  void init(const std::string& name, int dims, int cin_, int cout_, int temb_dim, int groups,
            Rng& rng) {
    cin = cin_;
    cout = cout_;
    gn1.init(name + ".gn1", cin, groups);
    conv1.init(name + ".conv1", dims, 3, cin, cout, rng, false);
    temb_proj.init(name + ".temb", temb_dim, cout, rng);
    gn2.init(name + ".gn2", cout, groups);
    conv2.init(name + ".conv2", dims, 3, cout, cout, rng, true);
    shortcut.init(name + ".shortcut", dims, 1, cin, cout, rng, false);
  }

  Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& temb, bool stash) {
    Tensor<S> h = conv1.forward(act1.forward(gn1.forward(x, stash), stash), stash);
    const int S_ = h.spatial();
    for (int i = 0; i < h.n; ++i) {
      const S* tp = temb.at(i, 0);
      for (int ch = 0; ch < cout; ++ch) {
        S* p = h.at(i, ch);
        const S add = tp[ch];
        for (int s = 0; s < S_; ++s) p[s] += add;
      }
    }
    h = conv2.forward(act2.forward(gn2.forward(h, stash), stash), stash);
    Tensor<S> sc = shortcut.forward(x, stash);
    for (size_t i = 0; i < h.v.size(); ++i) h.v[i] += sc.v[i];
    return h;
  }

  // dtemb accumulates the gradient of the shared time embedding.
  Tensor<S> backward(const Tensor<S>& dy, Tensor<S>& dtemb, bool pgrads) {
    Tensor<S> dx = shortcut.backward(dy, pgrads);
    Tensor<S> dh = gn2.backward(act2.backward(conv2.backward(dy, pgrads), pgrads), pgrads);
    Tensor<S> dt;
    dt.resize(dh.n, cout, 1, 1, 1);
    const int S_ = dh.spatial();
    for (int i = 0; i < dh.n; ++i)
      for (int ch = 0; ch < cout; ++ch) {
        const S* p = dh.at(i, ch);
        double acc = 0.0;
        for (int s = 0; s < S_; ++s) acc += double(p[s]);
        dt.v[size_t(i) * cout + ch] = S(acc);
      }
    Tensor<S> dte = temb_proj.backward(dt, pgrads);
    for (size_t i = 0; i < dtemb.v.size(); ++i) dtemb.v[i] += dte.v[i];
    Tensor<S> dmain = gn1.backward(act1.backward(conv1.backward(dh, pgrads), pgrads), pgrads);
    for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dmain.v[i];
    return dx;
  }

  Tensor<S> temb_forward(const Tensor<S>& temb, bool stash) {
    return temb_proj.forward(temb, stash);
  }

  void collect(std::vector<Param<S>*>& ps) {
    gn1.collect(ps);
    conv1.collect(ps);
    temb_proj.collect(ps);
    gn2.collect(ps);
    conv2.collect(ps);
    shortcut.collect(ps);
  }
};

// ---- self attention over spatial positions ----

template <typename S>
struct Attention {
  int c = 0, heads = 16, head_dim = 0;
  GroupNorm<S> gn;
  Conv<S> qkv, proj;
  std::vector<Mat<S>> q_, k_, v_, attn_;  // per (sample, head)

  void init(const std::string& name, int dims, int c_, int groups, Rng& rng) {
    c = c_;
    head_dim = c / heads;
    if (head_dim * heads != c) throw ValidationError(name + ": channels not divisible by heads");
    gn.init(name + ".gn", c, groups);
    qkv.init(name + ".qkv", dims, 1, c, 3 * c, rng, false);
    proj.init(name + ".proj", dims, 1, c, c, rng, true);
  }

  Tensor<S> forward(const Tensor<S>& x, bool stash) {
    Tensor<S> hn = gn.forward(x, stash);
    Tensor<S> qkv_out = qkv.forward(hn, stash);
    const int S_ = x.spatial();
    const double inv_sqrt = 1.0 / std::sqrt(double(head_dim));
    Tensor<S> att_out;
    att_out.resize(x.n, c, x.d, x.h, x.w);
    if (stash) {
      q_.assign(size_t(x.n) * heads, {});
      k_.assign(size_t(x.n) * heads, {});
      v_.assign(size_t(x.n) * heads, {});
      attn_.assign(size_t(x.n) * heads, {});
    }
    for (int i = 0; i < x.n; ++i) {
      for (int hd = 0; hd < heads; ++hd) {
        Mat<S> Q(head_dim, S_), Km(head_dim, S_), V(head_dim, S_);
        for (int dch = 0; dch < head_dim; ++dch) {
          const int ch = hd * head_dim + dch;
          std::copy_n(qkv_out.at(i, ch), S_, Q.data() + size_t(dch) * S_);
          std::copy_n(qkv_out.at(i, c + ch), S_, Km.data() + size_t(dch) * S_);
          std::copy_n(qkv_out.at(i, 2 * c + ch), S_, V.data() + size_t(dch) * S_);
        }
        Mat<S> scores(S_, S_);
        scores.noalias() = Q.transpose() * Km;
        Mat<S> A(S_, S_);
        for (int r = 0; r < S_; ++r) {
          double mx = -1e300;
          for (int cc = 0; cc < S_; ++cc) mx = std::max(mx, double(scores(r, cc)) * inv_sqrt);
          double sum = 0.0;
          for (int cc = 0; cc < S_; ++cc) {
            const double e = std::exp(double(scores(r, cc)) * inv_sqrt - mx);
            A(r, cc) = S(e);
            sum += e;
          }
          for (int cc = 0; cc < S_; ++cc) A(r, cc) = S(double(A(r, cc)) / sum);
        }
        Mat<S> O(head_dim, S_);
        O.noalias() = V * A.transpose();
        for (int dch = 0; dch < head_dim; ++dch)
          std::copy_n(O.data() + size_t(dch) * S_, S_, att_out.at(i, hd * head_dim + dch));
        if (stash) {
          const size_t idx = size_t(i) * heads + hd;
          q_[idx] = std::move(Q);
          k_[idx] = std::move(Km);
          v_[idx] = std::move(V);
          attn_[idx] = std::move(A);
        }
      }
    }
    Tensor<S> y = proj.forward(att_out, stash);
    for (size_t i = 0; i < y.v.size(); ++i) y.v[i] += x.v[i];
    return y;
  }

  Tensor<S> backward(const Tensor<S>& dy, bool pgrads) {
    Tensor<S> datt = proj.backward(dy, pgrads);
    const int S_ = datt.spatial();
    const double inv_sqrt = 1.0 / std::sqrt(double(head_dim));
    Tensor<S> dqkv;
    dqkv.resize(datt.n, 3 * c, datt.d, datt.h, datt.w);
    for (int i = 0; i < datt.n; ++i) {
      for (int hd = 0; hd < heads; ++hd) {
        const size_t idx = size_t(i) * heads + hd;
        Mat<S> dO(head_dim, S_);
        for (int dch = 0; dch < head_dim; ++dch)
          std::copy_n(datt.at(i, hd * head_dim + dch), S_, dO.data() + size_t(dch) * S_);
        const Mat<S>&Q = q_[idx], &Km = k_[idx], &V = v_[idx], &A = attn_[idx];
        Mat<S> dV(head_dim, S_);
        dV.noalias() = dO * A;
        Mat<S> dA(S_, S_);
        dA.noalias() = dO.transpose() * V;  // dA(r,c') = dO(:,r).V(:,c')
        // softmax backward per row
        Mat<S> dS(S_, S_);
        for (int r = 0; r < S_; ++r) {
          double dot = 0.0;
          for (int cc = 0; cc < S_; ++cc) dot += double(dA(r, cc)) * double(A(r, cc));
          for (int cc = 0; cc < S_; ++cc)
            dS(r, cc) = S((double(dA(r, cc)) - dot) * double(A(r, cc)) * inv_sqrt);
        }
        Mat<S> dQ(head_dim, S_), dK(head_dim, S_);
        dQ.noalias() = Km * dS.transpose();  // scores = Q^T K
        dK.noalias() = Q * dS;
        for (int dch = 0; dch < head_dim; ++dch) {
          const int ch = hd * head_dim + dch;
          std::copy_n(dQ.data() + size_t(dch) * S_, S_, dqkv.at(i, ch));
          std::copy_n(dK.data() + size_t(dch) * S_, S_, dqkv.at(i, c + ch));
          std::copy_n(dV.data() + size_t(dch) * S_, S_, dqkv.at(i, 2 * c + ch));
        }
      }
    }
    Tensor<S> dx = gn.backward(qkv.backward(dqkv, pgrads), pgrads);
    for (size_t i = 0; i < dx.v.size(); ++i) dx.v[i] += dy.v[i];
    return dx;
  }

  void collect(std::vector<Param<S>*>& ps) {
    gn.collect(ps);
    qkv.collect(ps);
    proj.collect(ps);
  }
};

// ---- the UNet ----

template <typename S>
class UNet {
 public:
  UNet(int dims, bool attention, uint64_t seed) : dims_(dims), attention_(attention) {
    if (dims != 2 && dims != 3) throw ValidationError("dims must be 2 or 3");
    Rng rng(splitmix64_once(seed));
    fourier_.init("time.fourier", rng);
    mlp1_.init("time.mlp1", 16, 32, rng);
    mlp2_.init("time.mlp2", 32, 32, rng);
    stem_.init("stem", dims, 1, 3, 8, rng, false);
    d1r0_.init("down1.res0", dims, 8, 32, 32, 8, rng);
    d1r1_.init("down1.res1", dims, 32, 32, 32, 8, rng);
    d2r0_.init("down2.res0", dims, 32, 64, 32, 8, rng);
    d2r1_.init("down2.res1", dims, 64, 64, 32, 8, rng);
    pool1_.dims = pool2_.dims = dims;
    up1_.dims = up2_.dims = dims;
    mid0_.init("mid.res0", dims, 64, 128, 32, 8, rng);
    if (attention_) attn0_.init("mid.attn0", dims, 128, 8, rng);
    mid1_.init("mid.res1", dims, 128, 128, 32, 8, rng);
    if (attention_) attn1_.init("mid.attn1", dims, 128, 8, rng);
    mid2_.init("mid.res2", dims, 128, 64, 32, 8, rng);
    u2r0_.init("up2.res0", dims, 128, 64, 32, 8, rng);
    u2r1_.init("up2.res1", dims, 128, 64, 32, 8, rng);
    u1r0_.init("up1.res0", dims, 96, 32, 32, 8, rng);
    u1r1_.init("up1.res1", dims, 64, 32, 32, 8, rng);
    final_.init("final", dims, 1, 32, 3, rng, true);
  }

  int dims() const { return dims_; }
  bool attention() const { return attention_; }

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> ps;
    fourier_.collect(ps);
    mlp1_.collect(ps);
    mlp2_.collect(ps);
    stem_.collect(ps);
    d1r0_.collect(ps);
    d1r1_.collect(ps);
    d2r0_.collect(ps);
    d2r1_.collect(ps);
    mid0_.collect(ps);
    if (attention_) attn0_.collect(ps);
    mid1_.collect(ps);
    if (attention_) attn1_.collect(ps);
    mid2_.collect(ps);
    u2r0_.collect(ps);
    u2r1_.collect(ps);
    u1r0_.collect(ps);
    u1r1_.collect(ps);
    final_.collect(ps);
    return ps;
  }

  Tensor<S> forward(const Tensor<S>& x, const std::vector<int>& t, bool stash) {
    if (x.n != int(t.size())) throw ValidationError("batch/timestep count mismatch");
    for (const auto& v : x.v)
      if (!std::isfinite(double(v))) throw NumericalError("non-finite network input");
    temb_ = mlp2_.forward(mlpact_.forward(mlp1_.forward(fourier_.forward(t), stash), stash),
                          stash);
    Tensor<S> h = stem_.forward(x, stash);
    h = d1r0_.forward(h, d1r0_.temb_forward(temb_, stash), stash);
    skip1_ = d1r1_.forward(h, d1r1_.temb_forward(temb_, stash), stash);
    h = pool1_.forward(skip1_, stash);
    h = d2r0_.forward(h, d2r0_.temb_forward(temb_, stash), stash);
    skip2_ = d2r1_.forward(h, d2r1_.temb_forward(temb_, stash), stash);
    h = pool2_.forward(skip2_, stash);
    h = mid0_.forward(h, mid0_.temb_forward(temb_, stash), stash);
    if (attention_) h = attn0_.forward(h, stash);
    h = mid1_.forward(h, mid1_.temb_forward(temb_, stash), stash);
    if (attention_) h = attn1_.forward(h, stash);
    h = mid2_.forward(h, mid2_.temb_forward(temb_, stash), stash);
    h = up2_.forward(h, stash);
    h = u2r0_.forward(concat(h, skip2_), u2r0_.temb_forward(temb_, stash), stash);
    h = u2r1_.forward(concat(h, skip2_), u2r1_.temb_forward(temb_, stash), stash);
    h = up1_.forward(h, stash);
    h = u1r0_.forward(concat(h, skip1_), u1r0_.temb_forward(temb_, stash), stash);
    h = u1r1_.forward(concat(h, skip1_), u1r1_.temb_forward(temb_, stash), stash);
    return final_.forward(h, stash);
  }

  // Reverse pass for the most recent stashed forward. Returns d/dx.
  Tensor<S> backward(const Tensor<S>& dy, bool pgrads) {
    Tensor<S> dtemb;
    dtemb.resize(dy.n, 32, 1, 1, 1);
    Tensor<S> dskip1, dskip2;
    dskip1.resize(skip1_.n, skip1_.c, skip1_.d, skip1_.h, skip1_.w);
    dskip2.resize(skip2_.n, skip2_.c, skip2_.d, skip2_.h, skip2_.w);

    Tensor<S> dh = final_.backward(dy, pgrads);
    dh = u1r1_.backward(dh, dtemb, pgrads);
    dh = split_accum(dh, dskip1);
    dh = u1r0_.backward(dh, dtemb, pgrads);
    dh = split_accum(dh, dskip1);
    dh = up1_.backward(dh, pgrads);
    dh = u2r1_.backward(dh, dtemb, pgrads);
    dh = split_accum(dh, dskip2);
    dh = u2r0_.backward(dh, dtemb, pgrads);
    dh = split_accum(dh, dskip2);
    dh = up2_.backward(dh, pgrads);
    dh = mid2_.backward(dh, dtemb, pgrads);
    if (attention_) dh = attn1_.backward(dh, pgrads);
    dh = mid1_.backward(dh, dtemb, pgrads);
    if (attention_) dh = attn0_.backward(dh, pgrads);
    dh = mid0_.backward(dh, dtemb, pgrads);
    dh = pool2_.backward(dh, pgrads);
    for (size_t i = 0; i < dh.v.size(); ++i) dh.v[i] += dskip2.v[i];
    dh = d2r1_.backward(dh, dtemb, pgrads);
    dh = d2r0_.backward(dh, dtemb, pgrads);
    dh = pool1_.backward(dh, pgrads);
    for (size_t i = 0; i < dh.v.size(); ++i) dh.v[i] += dskip1.v[i];
    dh = d1r1_.backward(dh, dtemb, pgrads);
    dh = d1r0_.backward(dh, dtemb, pgrads);
    Tensor<S> dx = stem_.backward(dh, pgrads);
    mlp1_.backward(mlpact_.backward(mlp2_.backward(dtemb, pgrads), pgrads), pgrads);
    return dx;
  }

 private:
  static uint64_t splitmix64_once(uint64_t seed) {
    uint64_t s = seed;
    return splitmix64(s);
  }

  static Tensor<S> concat(const Tensor<S>& a, const Tensor<S>& b) {
    Tensor<S> y;
    y.resize(a.n, a.c + b.c, a.d, a.h, a.w);
    const int S_ = a.spatial();
    for (int i = 0; i < a.n; ++i) {
      for (int ch = 0; ch < a.c; ++ch) std::copy_n(a.at(i, ch), S_, y.at(i, ch));
      for (int ch = 0; ch < b.c; ++ch) std::copy_n(b.at(i, ch), S_, y.at(i, a.c + ch));
    }
    return y;
  }

  // Splits a concat gradient: the trailing channels accumulate into the skip
  // gradient, the leading channels are returned.
  static Tensor<S> split_accum(const Tensor<S>& dcat, Tensor<S>& dskip) {
    const int c_main = dcat.c - dskip.c;
    Tensor<S> dmain;
    dmain.resize(dcat.n, c_main, dcat.d, dcat.h, dcat.w);
    const int S_ = dcat.spatial();
    for (int i = 0; i < dcat.n; ++i) {
      for (int ch = 0; ch < c_main; ++ch) std::copy_n(dcat.at(i, ch), S_, dmain.at(i, ch));
      for (int ch = 0; ch < dskip.c; ++ch) {
        const S* src = dcat.at(i, c_main + ch);
        S* dst = dskip.at(i, ch);
        for (int s = 0; s < S_; ++s) dst[s] += src[s];
      }
    }
    return dmain;
  }

  int dims_;
  bool attention_;
  FourierEmbed<S> fourier_;
  Linear<S> mlp1_, mlp2_;
  SiLU<S> mlpact_;
  Conv<S> stem_, final_;
  ResUnit<S> d1r0_, d1r1_, d2r0_, d2r1_, mid0_, mid1_, mid2_, u2r0_, u2r1_, u1r0_, u1r1_;
  Attention<S> attn0_, attn1_;
  AvgPool2<S> pool1_, pool2_;
  UpsampleNearest2<S> up1_, up2_;
  Tensor<S> temb_, skip1_, skip2_;
};

}  // namespace invmat::nn

#include <algorithm>
#include <cmath>
#include <thread>
#include <vector>

#include "ng/tensor.hpp"

namespace ng {

namespace {

struct ConvDims {
  int Cin, W, H, D;
  int Cout, k;
  int s, p;
  int Wo, Ho, Do;
};

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

// valid output indices o with 0 <= o*s + koff - p < n_in
void out_range(int n_in, int n_out, int koff, int s, int p, int& lo, int& hi) {
  int a = p - koff;
  lo = a <= 0 ? 0 : (a + s - 1) / s;
  hi = std::min(n_out, floor_div(n_in - 1 + p - koff, s) + 1);
  if (hi < lo) hi = lo;
}

void parallel_chunks(int n, const std::function<void(int, int)>& body) {
  int threads = std::min(worker_threads(), n);
  if (threads <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  int chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    int b = t * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back(body, b, e);
  }
  for (auto& th : pool) th.join();
}

// Copies [C,W,H,D] into a zero-padded [C,W+2p,H+2p,D+2p] buffer so the
// stride-1 kernels below run branch-free over full rows.
std::vector<double> pad_channels(const double* x, int C, int W, int H, int D, int p) {
  const int Wp = W + 2 * p, Hp = H + 2 * p, Dp = D + 2 * p;
  std::vector<double> out(size_t(C) * Wp * Hp * Dp, 0.0);
  for (int c = 0; c < C; ++c)
    for (int ix = 0; ix < W; ++ix)
      for (int iy = 0; iy < H; ++iy) {
        const double* src = x + ((int64_t(c) * W + ix) * H + iy) * D;
        double* dst = out.data() + ((int64_t(c) * Wp + ix + p) * Hp + iy + p) * Dp + p;
        std::copy_n(src, D, dst);
      }
  return out;
}

// Stride-1 convolution over a pre-padded input, one output row at a time.
void conv_rows_s1(const double* xpad, const double* w, const double* bias, double* out,
                  int cin, int k, int cout, int wo, int ho, int do_, bool accumulate,
                  int co_begin, int co_end) {
  const int hp = ho + k - 1, dp = do_ + k - 1;
  const int64_t xplane = int64_t(wo + k - 1) * hp * dp;
  const int k3 = k * k * k;
  std::vector<double> acc(static_cast<size_t>(do_));
  for (int co = co_begin; co < co_end; ++co) {
    double* ocbase = out + int64_t(co) * wo * ho * do_;
    for (int ox = 0; ox < wo; ++ox) {
      for (int oy = 0; oy < ho; ++oy) {
        std::fill(acc.begin(), acc.end(), bias ? bias[co] : 0.0);
        for (int ci = 0; ci < cin; ++ci) {
          const double* xc = xpad + ci * xplane;
          const double* wc = w + (int64_t(co) * cin + ci) * k3;
          for (int kx = 0; kx < k; ++kx) {
            for (int ky = 0; ky < k; ++ky) {
              const double* xr = xc + (int64_t(ox + kx) * hp + oy + ky) * dp;
              const double* wk = wc + (kx * k + ky) * k;
              if (k == 3) {
                const double w0 = wk[0], w1 = wk[1], w2 = wk[2];
                for (int oz = 0; oz < do_; ++oz)
                  acc[size_t(oz)] += w0 * xr[oz] + w1 * xr[oz + 1] + w2 * xr[oz + 2];
              } else {
                for (int kz = 0; kz < k; ++kz) {
                  const double wv = wk[kz];
                  for (int oz = 0; oz < do_; ++oz) acc[size_t(oz)] += wv * xr[oz + kz];
                }
              }
            }
          }
        }
        double* orow = ocbase + (int64_t(ox) * ho + oy) * do_;
        if (accumulate)
          for (int oz = 0; oz < do_; ++oz) orow[oz] += acc[size_t(oz)];
        else
          std::copy(acc.begin(), acc.end(), orow);
      }
    }
  }
}

// Stride-1 weight gradients: per (co,ci) the k^3 accumulators ride in
// registers while one g row and k^2 x rows stream through.
void conv_wgrad_s1(const double* xpad, const double* g, double* gw, double* gb, int cin, int k,
                   int cout, int wo, int ho, int do_, int co_begin, int co_end) {
  const int hp = ho + k - 1, dp = do_ + k - 1;
  const int64_t xplane = int64_t(wo + k - 1) * hp * dp;
  const int64_t oplane = int64_t(wo) * ho * do_;
  const int k3 = k * k * k;
  std::vector<double> accw(static_cast<size_t>(k3));
  for (int co = co_begin; co < co_end; ++co) {
    const double* gc = g + co * oplane;
    if (gb) {
      double s = 0.0;
      for (int64_t i = 0; i < oplane; ++i) s += gc[i];
      gb[co] += s;
    }
    for (int ci = 0; ci < cin; ++ci) {
      const double* xc = xpad + ci * xplane;
      std::fill(accw.begin(), accw.end(), 0.0);
      for (int ox = 0; ox < wo; ++ox) {
        for (int oy = 0; oy < ho; ++oy) {
          const double* grow = gc + (int64_t(ox) * ho + oy) * do_;
          for (int kx = 0; kx < k; ++kx) {
            for (int ky = 0; ky < k; ++ky) {
              const double* xr = xc + (int64_t(ox + kx) * hp + oy + ky) * dp;
              if (k == 3) {
                double a0 = 0.0, a1 = 0.0, a2 = 0.0;
                for (int oz = 0; oz < do_; ++oz) {
                  const double gv = grow[oz];
                  a0 += gv * xr[oz];
                  a1 += gv * xr[oz + 1];
                  a2 += gv * xr[oz + 2];
                }
                double* aw = accw.data() + (kx * 3 + ky) * 3;
                aw[0] += a0;
                aw[1] += a1;
                aw[2] += a2;
              } else {
                for (int kz = 0; kz < k; ++kz) {
                  double a = 0.0;
                  for (int oz = 0; oz < do_; ++oz) a += grow[oz] * xr[oz + kz];
                  accw[size_t((kx * k + ky) * k + kz)] += a;
                }
              }
            }
          }
        }
      }
      double* gwc = gw + (int64_t(co) * cin + ci) * k3;
      for (int j = 0; j < k3; ++j) gwc[j] += accw[size_t(j)];
    }
  }
}

void conv_forward(const double* x, const double* w, const double* bias, double* out,
                  const ConvDims& d, int co_begin, int co_end) {
  const int64_t xplane = int64_t(d.W) * d.H * d.D;
  const int64_t oplane = int64_t(d.Wo) * d.Ho * d.Do;
  const int k3 = d.k * d.k * d.k;
  for (int co = co_begin; co < co_end; ++co) {
    double* oc = out + co * oplane;
    std::fill_n(oc, oplane, bias ? bias[co] : 0.0);
    for (int ci = 0; ci < d.Cin; ++ci) {
      const double* xc = x + ci * xplane;
      const double* wc = w + (int64_t(co) * d.Cin + ci) * k3;
      for (int kx = 0; kx < d.k; ++kx) {
        int xlo, xhi;
        out_range(d.W, d.Wo, kx, d.s, d.p, xlo, xhi);
        for (int ky = 0; ky < d.k; ++ky) {
          int ylo, yhi;
          out_range(d.H, d.Ho, ky, d.s, d.p, ylo, yhi);
          for (int kz = 0; kz < d.k; ++kz) {
            int zlo, zhi;
            out_range(d.D, d.Do, kz, d.s, d.p, zlo, zhi);
            if (zlo >= zhi) continue;
            const double wv = wc[(kx * d.k + ky) * d.k + kz];
            const int zoff = kz - d.p;
            for (int ox = xlo; ox < xhi; ++ox) {
              const int ix = ox * d.s + kx - d.p;
              for (int oy = ylo; oy < yhi; ++oy) {
                const int iy = oy * d.s + ky - d.p;
                const double* xrow = xc + (int64_t(ix) * d.H + iy) * d.D;
                double* orow = oc + (int64_t(ox) * d.Ho + oy) * d.Do;
                if (d.s == 1) {
                  for (int oz = zlo; oz < zhi; ++oz) orow[oz] += wv * xrow[oz + zoff];
                } else {
                  for (int oz = zlo; oz < zhi; ++oz) orow[oz] += wv * xrow[oz * d.s + zoff];
                }
              }
            }
          }
        }
      }
    }
  }
}

void conv_backward_input(const double* g, const double* w, double* gx, const ConvDims& d,
                         int ci_begin, int ci_end) {
  const int64_t xplane = int64_t(d.W) * d.H * d.D;
  const int64_t oplane = int64_t(d.Wo) * d.Ho * d.Do;
  const int k3 = d.k * d.k * d.k;
  for (int ci = ci_begin; ci < ci_end; ++ci) {
    double* gxc = gx + ci * xplane;
    for (int co = 0; co < d.Cout; ++co) {
      const double* gc = g + co * oplane;
      const double* wc = w + (int64_t(co) * d.Cin + ci) * k3;
      for (int kx = 0; kx < d.k; ++kx) {
        int xlo, xhi;
        out_range(d.W, d.Wo, kx, d.s, d.p, xlo, xhi);
        for (int ky = 0; ky < d.k; ++ky) {
          int ylo, yhi;
          out_range(d.H, d.Ho, ky, d.s, d.p, ylo, yhi);
          for (int kz = 0; kz < d.k; ++kz) {
            int zlo, zhi;
            out_range(d.D, d.Do, kz, d.s, d.p, zlo, zhi);
            if (zlo >= zhi) continue;
            const double wv = wc[(kx * d.k + ky) * d.k + kz];
            const int zoff = kz - d.p;
            for (int ox = xlo; ox < xhi; ++ox) {
              const int ix = ox * d.s + kx - d.p;
              for (int oy = ylo; oy < yhi; ++oy) {
                const int iy = oy * d.s + ky - d.p;
                double* gxrow = gxc + (int64_t(ix) * d.H + iy) * d.D;
                const double* grow = gc + (int64_t(ox) * d.Ho + oy) * d.Do;
                if (d.s == 1) {
                  for (int oz = zlo; oz < zhi; ++oz) gxrow[oz + zoff] += wv * grow[oz];
                } else {
                  for (int oz = zlo; oz < zhi; ++oz) gxrow[oz * d.s + zoff] += wv * grow[oz];
                }
              }
            }
          }
        }
      }
    }
  }
}

void conv_backward_params(const double* g, const double* x, double* gw, double* gb,
                          const ConvDims& d, int co_begin, int co_end) {
  const int64_t xplane = int64_t(d.W) * d.H * d.D;
  const int64_t oplane = int64_t(d.Wo) * d.Ho * d.Do;
  const int k3 = d.k * d.k * d.k;
  for (int co = co_begin; co < co_end; ++co) {
    const double* gc = g + co * oplane;
    if (gb) {
      double s = 0.0;
      for (int64_t i = 0; i < oplane; ++i) s += gc[i];
      gb[co] += s;
    }
    for (int ci = 0; ci < d.Cin; ++ci) {
      const double* xc = x + ci * xplane;
      double* gwc = gw + (int64_t(co) * d.Cin + ci) * k3;
      for (int kx = 0; kx < d.k; ++kx) {
        int xlo, xhi;
        out_range(d.W, d.Wo, kx, d.s, d.p, xlo, xhi);
        for (int ky = 0; ky < d.k; ++ky) {
          int ylo, yhi;
          out_range(d.H, d.Ho, ky, d.s, d.p, ylo, yhi);
          for (int kz = 0; kz < d.k; ++kz) {
            int zlo, zhi;
            out_range(d.D, d.Do, kz, d.s, d.p, zlo, zhi);
            if (zlo >= zhi) continue;
            const int zoff = kz - d.p;
            double acc = 0.0;
            for (int ox = xlo; ox < xhi; ++ox) {
              const int ix = ox * d.s + kx - d.p;
              for (int oy = ylo; oy < yhi; ++oy) {
                const int iy = oy * d.s + ky - d.p;
                const double* xrow = xc + (int64_t(ix) * d.H + iy) * d.D;
                const double* grow = gc + (int64_t(ox) * d.Ho + oy) * d.Do;
                if (d.s == 1) {
                  for (int oz = zlo; oz < zhi; ++oz) acc += xrow[oz + zoff] * grow[oz];
                } else {
                  for (int oz = zlo; oz < zhi; ++oz) acc += xrow[oz * d.s + zoff] * grow[oz];
                }
              }
            }
            gwc[(kx * d.k + ky) * d.k + kz] += acc;
          }
        }
      }
    }
  }
}

Tensor conv3d_impl(const Tensor& x, const Tensor& kernels, const Tensor* bias, int stride,
                   int padding) {
  auto xi = x.impl();
  auto wi = kernels.impl();
  NG_CHECK(xi->shape.size() == 4, "conv3d input must be [C,W,H,D], got ", shape_str(xi->shape));
  NG_CHECK(wi->shape.size() == 5, "conv3d kernels must be [Cout,Cin,k,k,k], got ",
           shape_str(wi->shape));
  NG_CHECK(wi->shape[2] == wi->shape[3] && wi->shape[3] == wi->shape[4],
           "conv3d kernels must be cubic, got ", shape_str(wi->shape));
  NG_CHECK(xi->shape[0] == wi->shape[1], "conv3d channel mismatch: input ", shape_str(xi->shape),
           " vs kernels ", shape_str(wi->shape));
  NG_CHECK(stride >= 1 && padding >= 0, "conv3d stride ", stride, " padding ", padding);
  ConvDims d;
  d.Cin = xi->shape[0];
  d.W = xi->shape[1];
  d.H = xi->shape[2];
  d.D = xi->shape[3];
  d.Cout = wi->shape[0];
  d.k = wi->shape[2];
  d.s = stride;
  d.p = padding;
  d.Wo = (d.W + 2 * padding - d.k) / stride + 1;
  d.Ho = (d.H + 2 * padding - d.k) / stride + 1;
  d.Do = (d.D + 2 * padding - d.k) / stride + 1;
  NG_CHECK(d.Wo >= 1 && d.Ho >= 1 && d.Do >= 1, "conv3d output collapses: input ",
           shape_str(xi->shape), " kernel ", d.k, " stride ", stride, " padding ", padding);
  std::shared_ptr<TensorImpl> bimpl;
  if (bias) {
    bimpl = bias->impl();
    NG_CHECK(bimpl->shape.size() == 1 && bimpl->shape[0] == d.Cout, "conv3d bias must be [",
             d.Cout, "], got ", shape_str(bimpl->shape));
  }
  std::vector<double> out(size_t(d.Cout) * d.Wo * d.Ho * d.Do);
  if (d.s == 1) {
    auto xpad = pad_channels(xi->data.data(), d.Cin, d.W, d.H, d.D, d.p);
    parallel_chunks(d.Cout, [&](int b, int e) {
      conv_rows_s1(xpad.data(), wi->data.data(), bimpl ? bimpl->data.data() : nullptr, out.data(),
                   d.Cin, d.k, d.Cout, d.Wo, d.Ho, d.Do, false, b, e);
    });
  } else {
    parallel_chunks(d.Cout, [&](int b, int e) {
      conv_forward(xi->data.data(), wi->data.data(), bimpl ? bimpl->data.data() : nullptr,
                   out.data(), d, b, e);
    });
  }

  std::vector<Tensor> inputs = {x, kernels};
  if (bias) inputs.push_back(*bias);
  auto bwd = [xi, wi, bimpl, d](const std::vector<double>& g) {
    if (xi->requires_grad) {
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), 0.0);
      if (d.s == 1 && d.k - 1 - d.p >= 0) {
        // Input gradient of a stride-1 conv is itself a stride-1 conv of the
        // output gradient with channel-swapped, spatially flipped kernels.
        const int q = d.k - 1 - d.p;
        auto gpad = pad_channels(g.data(), d.Cout, d.Wo, d.Ho, d.Do, q);
        std::vector<double> wflip(wi->data.size());
        const int k3 = d.k * d.k * d.k;
        for (int co = 0; co < d.Cout; ++co)
          for (int ci = 0; ci < d.Cin; ++ci) {
            const double* src = wi->data.data() + (int64_t(co) * d.Cin + ci) * k3;
            double* dst = wflip.data() + (int64_t(ci) * d.Cout + co) * k3;
            for (int j = 0; j < k3; ++j) dst[j] = src[k3 - 1 - j];
          }
        parallel_chunks(d.Cin, [&](int b, int e) {
          conv_rows_s1(gpad.data(), wflip.data(), nullptr, xi->grad.data(), d.Cout, d.k, d.Cin,
                       d.W, d.H, d.D, true, b, e);
        });
      } else {
        parallel_chunks(d.Cin, [&](int b, int e) {
          conv_backward_input(g.data(), wi->data.data(), xi->grad.data(), d, b, e);
        });
      }
    }
    if (wi->requires_grad || (bimpl && bimpl->requires_grad)) {
      std::vector<double> scratch;
      double* gw;
      if (wi->requires_grad) {
        if (wi->grad.empty()) wi->grad.assign(wi->data.size(), 0.0);
        gw = wi->grad.data();
      } else {
        scratch.assign(wi->data.size(), 0.0);
        gw = scratch.data();
      }
      double* gb = nullptr;
      if (bimpl && bimpl->requires_grad) {
        if (bimpl->grad.empty()) bimpl->grad.assign(bimpl->data.size(), 0.0);
        gb = bimpl->grad.data();
      }
      if (d.s == 1) {
        auto xpad = pad_channels(xi->data.data(), d.Cin, d.W, d.H, d.D, d.p);
        parallel_chunks(d.Cout, [&](int b, int e) {
          conv_wgrad_s1(xpad.data(), g.data(), gw, gb, d.Cin, d.k, d.Cout, d.Wo, d.Ho, d.Do, b,
                        e);
        });
      } else {
        parallel_chunks(d.Cout, [&](int b, int e) {
          conv_backward_params(g.data(), xi->data.data(), gw, gb, d, b, e);
        });
      }
    }
  };
  return custom_op("conv3d", {d.Cout, d.Wo, d.Ho, d.Do}, std::move(out), inputs, std::move(bwd));
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& kernels, int stride, int padding) {
  return conv3d_impl(x, kernels, nullptr, stride, padding);
}

Tensor conv3d(const Tensor& x, const Tensor& kernels, const Tensor& bias, int stride, int padding) {
  return conv3d_impl(x, kernels, &bias, stride, padding);
}

}  // namespace ng

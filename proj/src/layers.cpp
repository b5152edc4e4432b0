#include "subcnn/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace subcnn {

namespace {

void check_conv_args(const std::vector<int>& xs, const std::vector<int>& ws,
                     const std::vector<int>& bs, int stride, int pad) {
  SUBCNN_CHECK(xs.size() == 3, "conv2d: input must be (H,W,Cin)");
  SUBCNN_CHECK(ws.size() == 4, "conv2d: weight must be (kh,kw,cin,cout)");
  SUBCNN_CHECK(bs.size() == 1 && bs[0] == ws[3], "conv2d: bias must be (cout)");
  SUBCNN_CHECK(ws[2] == xs[2], "conv2d: channel mismatch (%d vs %d)", ws[2], xs[2]);
  SUBCNN_CHECK(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  SUBCNN_CHECK(xs[0] + 2 * pad >= ws[0] && xs[1] + 2 * pad >= ws[1],
               "conv2d: kernel larger than padded input");
}

}  // namespace

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int stride,
                  int pad) {
  check_conv_args(x.shape, w.shape, b.shape, stride, pad);
  int H = x.dim(0), W = x.dim(1), Cin = x.dim(2);
  int kh = w.dim(0), kw = w.dim(1), Cout = w.dim(3);
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  TensorT<T> out = TensorT<T>::zeros({OH, OW, Cout});
  std::vector<T> acc(Cout);
  for (int oy = 0; oy < OH; ++oy) {
    for (int ox = 0; ox < OW; ++ox) {
      for (int c = 0; c < Cout; ++c) acc[c] = b.data[c];
      for (int ky = 0; ky < kh; ++ky) {
        int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= H) continue;
        for (int kx = 0; kx < kw; ++kx) {
          int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= W) continue;
          const T* px = &x.data[(static_cast<int64_t>(iy) * W + ix) * Cin];
          const T* pw = &w.data[(static_cast<int64_t>(ky) * kw + kx) * Cin * Cout];
          for (int ci = 0; ci < Cin; ++ci) {
            T v = px[ci];
            const T* pwr = pw + static_cast<int64_t>(ci) * Cout;
            for (int co = 0; co < Cout; ++co) acc[co] += v * pwr[co];
          }
        }
      }
      std::copy(acc.begin(), acc.end(), &out.data[(static_cast<int64_t>(oy) * OW + ox) * Cout]);
    }
  }
  return out;
}

template <typename T>
typename GraphT<T>::Ref conv2d(GraphT<T>& g, typename GraphT<T>::Ref x,
                               typename GraphT<T>::Ref w, typename GraphT<T>::Ref b,
                               int stride, int pad) {
  TensorT<T> out = conv2d(g.value(x), g.value(w), g.value(b), stride, pad);
  return g.make_node(std::move(out), {x, w, b}, [x, w, b, stride, pad](GraphT<T>& g,
                                                                       typename GraphT<T>::Ref self) {
    const TensorT<T>& go = g.grad(self);
    const TensorT<T>& vx = g.value(x);
    const TensorT<T>& vw = g.value(w);
    int H = vx.dim(0), W = vx.dim(1), Cin = vx.dim(2);
    int kh = vw.dim(0), kw = vw.dim(1), Cout = vw.dim(3);
    int OH = go.dim(0), OW = go.dim(1);
    bool need_x = g.requires_grad(x), need_w = g.requires_grad(w), need_b = g.requires_grad(b);
    TensorT<T>* gx = need_x ? &g.grad(x) : nullptr;
    TensorT<T>* gw = need_w ? &g.grad(w) : nullptr;
    TensorT<T>* gb = need_b ? &g.grad(b) : nullptr;
    for (int oy = 0; oy < OH; ++oy) {
      for (int ox = 0; ox < OW; ++ox) {
        const T* gor = &go.data[(static_cast<int64_t>(oy) * OW + ox) * Cout];
        if (gb)
          for (int co = 0; co < Cout; ++co) gb->data[co] += gor[co];
        if (!need_x && !need_w) continue;
        for (int ky = 0; ky < kh; ++ky) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kw; ++kx) {
            int ix = ox * stride - pad + kx;
            if (ix < 0 || ix >= W) continue;
            int64_t xoff = (static_cast<int64_t>(iy) * W + ix) * Cin;
            int64_t woff = (static_cast<int64_t>(ky) * kw + kx) * Cin * Cout;
            for (int ci = 0; ci < Cin; ++ci) {
              const T* pwr = &vw.data[woff + static_cast<int64_t>(ci) * Cout];
              if (gx) {
                T acc = 0;
                for (int co = 0; co < Cout; ++co) acc += gor[co] * pwr[co];
                gx->data[xoff + ci] += acc;
              }
              if (gw) {
                T xv = vx.data[xoff + ci];
                T* pgw = &gw->data[woff + static_cast<int64_t>(ci) * Cout];
                for (int co = 0; co < Cout; ++co) pgw[co] += xv * gor[co];
              }
            }
          }
        }
      }
    }
  });
}

template <typename T>
TensorT<T> maxpool2(const TensorT<T>& x) {
  SUBCNN_CHECK(x.rank() == 3, "maxpool2: input must be (H,W,C)");
  int H = x.dim(0), W = x.dim(1), C = x.dim(2);
  int OH = H / 2, OW = W / 2;
  SUBCNN_CHECK(OH >= 1 && OW >= 1, "maxpool2: input smaller than window");
  TensorT<T> out = TensorT<T>::zeros({OH, OW, C});
  for (int oy = 0; oy < OH; ++oy)
    for (int ox = 0; ox < OW; ++ox)
      for (int c = 0; c < C; ++c) {
        T best = x.at(2 * oy, 2 * ox, c);
        best = std::max(best, x.at(2 * oy, 2 * ox + 1, c));
        best = std::max(best, x.at(2 * oy + 1, 2 * ox, c));
        best = std::max(best, x.at(2 * oy + 1, 2 * ox + 1, c));
        out.at(oy, ox, c) = best;
      }
  return out;
}

template <typename T>
typename GraphT<T>::Ref maxpool2(GraphT<T>& g, typename GraphT<T>::Ref x) {
  const TensorT<T>& vx = g.value(x);
  SUBCNN_CHECK(vx.rank() == 3, "maxpool2: input must be (H,W,C)");
  int H = vx.dim(0), W = vx.dim(1), C = vx.dim(2);
  int OH = H / 2, OW = W / 2;
  SUBCNN_CHECK(OH >= 1 && OW >= 1, "maxpool2: input smaller than window");
  TensorT<T> out = TensorT<T>::zeros({OH, OW, C});
  // Argmax as linear index into x; ties go to the lowest index (scan order).
  std::vector<int64_t> arg(out.numel());
  int64_t o = 0;
  for (int oy = 0; oy < OH; ++oy)
    for (int ox = 0; ox < OW; ++ox)
      for (int c = 0; c < C; ++c, ++o) {
        int64_t best_i = (static_cast<int64_t>(2 * oy) * W + 2 * ox) * C + c;
        T best = vx.data[best_i];
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            int64_t i = (static_cast<int64_t>(2 * oy + dy) * W + 2 * ox + dx) * C + c;
            if (vx.data[i] > best) {
              best = vx.data[i];
              best_i = i;
            }
          }
        out.data[o] = best;
        arg[o] = best_i;
      }
  return g.make_node(std::move(out), {x},
                     [x, arg = std::move(arg)](GraphT<T>& g, typename GraphT<T>::Ref self) {
                       if (!g.requires_grad(x)) return;
                       const TensorT<T>& go = g.grad(self);
                       TensorT<T>& gx = g.grad(x);
                       for (int64_t i = 0; i < go.numel(); ++i) gx.data[arg[i]] += go.data[i];
                     });
}

template <typename T>
TensorT<T> fc(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
  SUBCNN_CHECK(x.rank() == 2, "fc: input must be (R,in)");
  SUBCNN_CHECK(w.rank() == 2 && w.dim(0) == x.dim(1), "fc: weight must be (in,out)");
  SUBCNN_CHECK(b.rank() == 1 && b.dim(0) == w.dim(1), "fc: bias must be (out)");
  int R = x.dim(0), In = x.dim(1), Out = w.dim(1);
  TensorT<T> y = TensorT<T>::zeros({R, Out});
  for (int r = 0; r < R; ++r) {
    T* yr = &y.data[static_cast<int64_t>(r) * Out];
    for (int o2 = 0; o2 < Out; ++o2) yr[o2] = b.data[o2];
    const T* xr = &x.data[static_cast<int64_t>(r) * In];
    for (int i = 0; i < In; ++i) {
      T v = xr[i];
      const T* wr = &w.data[static_cast<int64_t>(i) * Out];
      for (int o2 = 0; o2 < Out; ++o2) yr[o2] += v * wr[o2];
    }
  }
  return y;
}

template <typename T>
typename GraphT<T>::Ref fc(GraphT<T>& g, typename GraphT<T>::Ref x, typename GraphT<T>::Ref w,
                           typename GraphT<T>::Ref b) {
  TensorT<T> y = fc(g.value(x), g.value(w), g.value(b));
  return g.make_node(std::move(y), {x, w, b}, [x, w, b](GraphT<T>& g,
                                                        typename GraphT<T>::Ref self) {
    const TensorT<T>& go = g.grad(self);
    const TensorT<T>& vx = g.value(x);
    const TensorT<T>& vw = g.value(w);
    int R = vx.dim(0), In = vx.dim(1), Out = vw.dim(1);
    if (g.requires_grad(b)) {
      TensorT<T>& gb = g.grad(b);
      for (int r = 0; r < R; ++r)
        for (int o2 = 0; o2 < Out; ++o2) gb.data[o2] += go.at(r, o2);
    }
    if (g.requires_grad(x)) {
      TensorT<T>& gx = g.grad(x);
      for (int r = 0; r < R; ++r)
        for (int i = 0; i < In; ++i) {
          const T* wr = &vw.data[static_cast<int64_t>(i) * Out];
          const T* gor = &go.data[static_cast<int64_t>(r) * Out];
          T acc = 0;
          for (int o2 = 0; o2 < Out; ++o2) acc += gor[o2] * wr[o2];
          gx.at(r, i) += acc;
        }
    }
    if (g.requires_grad(w)) {
      TensorT<T>& gw = g.grad(w);
      for (int r = 0; r < R; ++r) {
        const T* xr = &vx.data[static_cast<int64_t>(r) * In];
        const T* gor = &go.data[static_cast<int64_t>(r) * Out];
        for (int i = 0; i < In; ++i) {
          T v = xr[i];
          T* gwr = &gw.data[static_cast<int64_t>(i) * Out];
          for (int o2 = 0; o2 < Out; ++o2) gwr[o2] += v * gor[o2];
        }
      }
    }
  });
}

namespace {

struct PoolCell {
  int y0, y1, x0, x1;  // half-open cell window in map coords
};

/// Snaps a RoI window to whole cells and splits it into gh x gw sub-windows
/// with the floor/ceil proportional rule.
std::vector<PoolCell> roi_cells(const RoiWindow& roi, int H, int W, int gh, int gw) {
  int ix1 = std::clamp(static_cast<int>(std::llround(roi.x1)), 0, W);
  int iy1 = std::clamp(static_cast<int>(std::llround(roi.y1)), 0, H);
  int ix2 = std::clamp(static_cast<int>(std::llround(roi.x2)), 0, W);
  int iy2 = std::clamp(static_cast<int>(std::llround(roi.y2)), 0, H);
  SUBCNN_CHECK(ix2 > ix1 && iy2 > iy1, "roi_pool: empty roi after clipping");
  int h = iy2 - iy1, w = ix2 - ix1;
  std::vector<PoolCell> cells(static_cast<size_t>(gh) * gw);
  for (int gi = 0; gi < gh; ++gi)
    for (int gj = 0; gj < gw; ++gj) {
      PoolCell& c = cells[static_cast<size_t>(gi) * gw + gj];
      c.y0 = iy1 + static_cast<int>(std::floor(static_cast<double>(gi) * h / gh));
      c.y1 = iy1 + static_cast<int>(std::ceil(static_cast<double>(gi + 1) * h / gh));
      c.x0 = ix1 + static_cast<int>(std::floor(static_cast<double>(gj) * w / gw));
      c.x1 = ix1 + static_cast<int>(std::ceil(static_cast<double>(gj + 1) * w / gw));
    }
  return cells;
}

}  // namespace

template <typename T>
TensorT<T> roi_pool(const TensorT<T>& fmap, const std::vector<RoiWindow>& rois, int gh, int gw) {
  SUBCNN_CHECK(fmap.rank() == 3, "roi_pool: feature map must be (H,W,C)");
  SUBCNN_CHECK(gh >= 1 && gw >= 1, "roi_pool: bad grid");
  int H = fmap.dim(0), W = fmap.dim(1), C = fmap.dim(2);
  int R = static_cast<int>(rois.size());
  TensorT<T> out = TensorT<T>::zeros({R, gh, gw, C});
  for (int r = 0; r < R; ++r) {
    auto cells = roi_cells(rois[r], H, W, gh, gw);
    for (int cell = 0; cell < gh * gw; ++cell) {
      const PoolCell& pc = cells[cell];
      T* dst = &out.data[((static_cast<int64_t>(r) * gh * gw) + cell) * C];
      bool first = true;
      for (int y = pc.y0; y < pc.y1; ++y)
        for (int x = pc.x0; x < pc.x1; ++x) {
          const T* src = &fmap.data[(static_cast<int64_t>(y) * W + x) * C];
          if (first) {
            for (int c = 0; c < C; ++c) dst[c] = src[c];
            first = false;
          } else {
            for (int c = 0; c < C; ++c) dst[c] = std::max(dst[c], src[c]);
          }
        }
    }
  }
  return out;
}

template <typename T>
typename GraphT<T>::Ref roi_pool(GraphT<T>& g, typename GraphT<T>::Ref fmap,
                                 const std::vector<RoiWindow>& rois, int gh, int gw) {
  const TensorT<T>& vm = g.value(fmap);
  SUBCNN_CHECK(vm.rank() == 3, "roi_pool: feature map must be (H,W,C)");
  SUBCNN_CHECK(gh >= 1 && gw >= 1, "roi_pool: bad grid");
  int H = vm.dim(0), W = vm.dim(1), C = vm.dim(2);
  int R = static_cast<int>(rois.size());
  TensorT<T> out = TensorT<T>::zeros({R, gh, gw, C});
  std::vector<int64_t> arg(out.numel());
  int64_t o = 0;
  for (int r = 0; r < R; ++r) {
    auto cells = roi_cells(rois[r], H, W, gh, gw);
    for (int cell = 0; cell < gh * gw; ++cell) {
      const PoolCell& pc = cells[cell];
      for (int c = 0; c < C; ++c, ++o) {
        int64_t best_i = (static_cast<int64_t>(pc.y0) * W + pc.x0) * C + c;
        T best = vm.data[best_i];
        for (int y = pc.y0; y < pc.y1; ++y)
          for (int x = pc.x0; x < pc.x1; ++x) {
            int64_t i = (static_cast<int64_t>(y) * W + x) * C + c;
            if (vm.data[i] > best) {
              best = vm.data[i];
              best_i = i;
            }
          }
        out.data[o] = best;
        arg[o] = best_i;
      }
    }
  }
  return g.make_node(std::move(out), {fmap},
                     [fmap, arg = std::move(arg)](GraphT<T>& g, typename GraphT<T>::Ref self) {
                       if (!g.requires_grad(fmap)) return;
                       const TensorT<T>& go = g.grad(self);
                       TensorT<T>& gm = g.grad(fmap);
                       for (int64_t i = 0; i < go.numel(); ++i) gm.data[arg[i]] += go.data[i];
                     });
}

template <typename T>
void softmax_inplace(T* p, int n) {
  T mx = p[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, p[i]);
  T sum = 0;
  for (int i = 0; i < n; ++i) {
    p[i] = std::exp(p[i] - mx);
    sum += p[i];
  }
  for (int i = 0; i < n; ++i) p[i] /= sum;
}

template <typename T>
typename GraphT<T>::Ref softmax_xent(GraphT<T>& g, typename GraphT<T>::Ref logits,
                                     const std::vector<int>& labels) {
  const TensorT<T>& vl = g.value(logits);
  SUBCNN_CHECK(vl.rank() == 2, "softmax_xent: logits must be (R,C)");
  int R = vl.dim(0), C = vl.dim(1);
  SUBCNN_CHECK(static_cast<int>(labels.size()) == R, "softmax_xent: R labels expected");
  for (int l : labels) SUBCNN_CHECK(l >= 0 && l < C, "softmax_xent: label %d out of range", l);
  TensorT<T> probs = vl;
  T loss = 0;
  for (int r = 0; r < R; ++r) {
    T* pr = &probs.data[static_cast<int64_t>(r) * C];
    softmax_inplace(pr, C);
    loss -= std::log(std::max(pr[labels[r]], std::numeric_limits<T>::min()));
  }
  loss /= R;
  return g.make_node(TensorT<T>::scalar(loss), {logits},
                     [logits, labels, probs = std::move(probs)](GraphT<T>& g,
                                                                typename GraphT<T>::Ref self) {
                       if (!g.requires_grad(logits)) return;
                       T go = g.grad(self).data[0];
                       TensorT<T>& gl = g.grad(logits);
                       int R = gl.dim(0), C = gl.dim(1);
                       T inv = go / R;
                       for (int r = 0; r < R; ++r)
                         for (int c = 0; c < C; ++c)
                           gl.at(r, c) += inv * (probs.at(r, c) - T(c == labels[r]));
                     });
}

template <typename T>
typename GraphT<T>::Ref smooth_l1(GraphT<T>& g, typename GraphT<T>::Ref pred,
                                  const TensorT<T>& target, const std::vector<T>& row_weight) {
  const TensorT<T>& vp = g.value(pred);
  SUBCNN_CHECK(vp.rank() == 2, "smooth_l1: pred must be (R,C)");
  SUBCNN_CHECK(vp.same_shape(target), "smooth_l1: pred/target shape mismatch");
  SUBCNN_CHECK(static_cast<int>(row_weight.size()) == vp.dim(0),
               "smooth_l1: one weight per row expected");
  check_finite(target, "smooth_l1 target");
  int R = vp.dim(0), C = vp.dim(1);
  T loss = 0;
  for (int r = 0; r < R; ++r) {
    T acc = 0;
    for (int c = 0; c < C; ++c) {
      T d = vp.at(r, c) - target.at(r, c);
      T a = std::abs(d);
      acc += a < T(1) ? T(0.5) * d * d : a - T(0.5);
    }
    loss += row_weight[r] * acc;
  }
  return g.make_node(TensorT<T>::scalar(loss), {pred},
                     [pred, target, row_weight](GraphT<T>& g, typename GraphT<T>::Ref self) {
                       if (!g.requires_grad(pred)) return;
                       T go = g.grad(self).data[0];
                       const TensorT<T>& vp = g.value(pred);
                       TensorT<T>& gp = g.grad(pred);
                       int R = vp.dim(0), C = vp.dim(1);
                       for (int r = 0; r < R; ++r)
                         for (int c = 0; c < C; ++c) {
                           T d = vp.at(r, c) - target.at(r, c);
                           T dd = std::abs(d) < T(1) ? d : (d > 0 ? T(1) : T(-1));
                           gp.at(r, c) += go * row_weight[r] * dd;
                         }
                     });
}

template <typename T>
typename GraphT<T>::Ref gather_cols(GraphT<T>& g, typename GraphT<T>::Ref x,
                                    const std::vector<int>& col_start, int width) {
  const TensorT<T>& vx = g.value(x);
  SUBCNN_CHECK(vx.rank() == 2, "gather_cols: input must be (R,C)");
  int R = vx.dim(0), C = vx.dim(1);
  SUBCNN_CHECK(static_cast<int>(col_start.size()) == R, "gather_cols: R offsets expected");
  for (int s : col_start)
    SUBCNN_CHECK(s >= 0 && s + width <= C, "gather_cols: slice [%d,%d) out of range", s,
                 s + width);
  TensorT<T> out = TensorT<T>::zeros({R, width});
  for (int r = 0; r < R; ++r)
    for (int j = 0; j < width; ++j) out.at(r, j) = vx.at(r, col_start[r] + j);
  return g.make_node(std::move(out), {x},
                     [x, col_start, width](GraphT<T>& g, typename GraphT<T>::Ref self) {
                       if (!g.requires_grad(x)) return;
                       const TensorT<T>& go = g.grad(self);
                       TensorT<T>& gx = g.grad(x);
                       int R = go.dim(0);
                       for (int r = 0; r < R; ++r)
                         for (int j = 0; j < width; ++j)
                           gx.at(r, col_start[r] + j) += go.at(r, j);
                     });
}

#define SUBCNN_INSTANTIATE_LAYERS(T)                                                        \
  template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,   \
                                int, int);                                                  \
  template GraphT<T>::Ref conv2d<T>(GraphT<T>&, GraphT<T>::Ref, GraphT<T>::Ref,            \
                                    GraphT<T>::Ref, int, int);                              \
  template TensorT<T> maxpool2<T>(const TensorT<T>&);                                       \
  template GraphT<T>::Ref maxpool2<T>(GraphT<T>&, GraphT<T>::Ref);                          \
  template TensorT<T> fc<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&);       \
  template GraphT<T>::Ref fc<T>(GraphT<T>&, GraphT<T>::Ref, GraphT<T>::Ref, GraphT<T>::Ref); \
  template TensorT<T> roi_pool<T>(const TensorT<T>&, const std::vector<RoiWindow>&, int,    \
                                  int);                                                     \
  template GraphT<T>::Ref roi_pool<T>(GraphT<T>&, GraphT<T>::Ref,                           \
                                      const std::vector<RoiWindow>&, int, int);             \
  template void softmax_inplace<T>(T*, int);                                                \
  template GraphT<T>::Ref softmax_xent<T>(GraphT<T>&, GraphT<T>::Ref,                       \
                                          const std::vector<int>&);                         \
  template GraphT<T>::Ref smooth_l1<T>(GraphT<T>&, GraphT<T>::Ref, const TensorT<T>&,       \
                                       const std::vector<T>&);                              \
  template GraphT<T>::Ref gather_cols<T>(GraphT<T>&, GraphT<T>::Ref, const std::vector<int>&, \
                                         int);

SUBCNN_INSTANTIATE_LAYERS(float)
SUBCNN_INSTANTIATE_LAYERS(double)

}  // namespace subcnn

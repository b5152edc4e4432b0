#include "subcnn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace subcnn {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) {
    SUBCNN_CHECK(e > 0, "tensor: non-positive extent %d", e);
    n *= e;
  }
  return n;
}

template <typename T>
void check_finite(const TensorT<T>& t, const char* what) {
  for (const T& v : t.data)
    SUBCNN_CHECK(std::isfinite(static_cast<double>(v)), "%s: non-finite value", what);
}

template void check_finite<float>(const TensorT<float>&, const char*);
template void check_finite<double>(const TensorT<double>&, const char*);

template <typename T>
typename GraphT<T>::Ref GraphT<T>::input(TensorT<T> v, bool requires_grad) {
  check_finite(v, "graph input");
  Node n;
  n.value = std::move(v);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return static_cast<Ref>(nodes_.size()) - 1;
}

template <typename T>
typename GraphT<T>::Ref GraphT<T>::make_node(TensorT<T> value, std::vector<Ref> parents,
                                             BackwardFn backward) {
  check_finite(value, "graph op output");
  bool req = false;
  for (Ref p : parents) {
    SUBCNN_CHECK(p >= 0 && p < size(), "graph: bad parent ref %d", p);
    req = req || nodes_[p].requires_grad;
  }
  Node n;
  n.value = std::move(value);
  n.requires_grad = req;
  n.parents = std::move(parents);
  if (req) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return static_cast<Ref>(nodes_.size()) - 1;
}

template <typename T>
TensorT<T>& GraphT<T>::grad(Ref r) {
  Node& n = nodes_[r];
  if (!n.grad_alloc) {
    n.grad = TensorT<T>::zeros(n.value.shape);
    n.grad_alloc = true;
  }
  return n.grad;
}

template <typename T>
void GraphT<T>::backward(Ref loss) {
  SUBCNN_CHECK(!ran_backward_, "graph: backward already ran on this graph");
  SUBCNN_CHECK(loss >= 0 && loss < size(), "graph: bad loss ref");
  SUBCNN_CHECK(nodes_[loss].value.numel() == 1, "graph: backward needs a scalar loss");
  ran_backward_ = true;
  grad(loss).data[0] = T(1);
  for (Ref r = loss; r >= 0; --r) {
    Node& n = nodes_[r];
    if (n.requires_grad && n.backward && n.grad_alloc) n.backward(*this, r);
  }
}

template <typename T>
typename GraphT<T>::Ref GraphT<T>::elementwise(Elementwise op, Ref a, Ref b) {
  const TensorT<T>& va = value(a);
  TensorT<T> out;
  std::vector<Ref> parents{a};
  switch (op) {
    case Elementwise::kAdd:
    case Elementwise::kSub:
    case Elementwise::kMul: {
      SUBCNN_CHECK(b >= 0, "elementwise: binary op needs two operands");
      const TensorT<T>& vb = value(b);
      bool b_scalar = vb.numel() == 1;
      SUBCNN_CHECK(va.same_shape(vb) || b_scalar, "elementwise: shape mismatch");
      out = TensorT<T>::zeros(va.shape);
      for (int64_t i = 0; i < va.numel(); ++i) {
        T x = va.data[i], y = vb.data[b_scalar ? 0 : i];
        out.data[i] = op == Elementwise::kAdd ? x + y
                      : op == Elementwise::kSub ? x - y
                                                : x * y;
      }
      parents.push_back(b);
      break;
    }
    case Elementwise::kRelu: {
      out = TensorT<T>::zeros(va.shape);
      for (int64_t i = 0; i < va.numel(); ++i) out.data[i] = std::max(va.data[i], T(0));
      break;
    }
  }
  return make_node(std::move(out), std::move(parents), [op, a, b](GraphT& g, Ref self) {
    const TensorT<T>& go = g.grad(self);
    const TensorT<T>& va = g.value(a);
    switch (op) {
      case Elementwise::kAdd:
      case Elementwise::kSub: {
        T sign = op == Elementwise::kSub ? T(-1) : T(1);
        if (g.requires_grad(a)) {
          TensorT<T>& ga = g.grad(a);
          for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
        }
        if (g.requires_grad(b)) {
          TensorT<T>& gb = g.grad(b);
          bool b_scalar = gb.numel() == 1 && go.numel() > 1;
          for (int64_t i = 0; i < go.numel(); ++i) gb.data[b_scalar ? 0 : i] += sign * go.data[i];
        }
        break;
      }
      case Elementwise::kMul: {
        const TensorT<T>& vb = g.value(b);
        bool b_scalar = vb.numel() == 1 && go.numel() > 1;
        if (g.requires_grad(a)) {
          TensorT<T>& ga = g.grad(a);
          for (int64_t i = 0; i < go.numel(); ++i)
            ga.data[i] += go.data[i] * vb.data[b_scalar ? 0 : i];
        }
        if (g.requires_grad(b)) {
          TensorT<T>& gb = g.grad(b);
          for (int64_t i = 0; i < go.numel(); ++i)
            gb.data[b_scalar ? 0 : i] += go.data[i] * va.data[i];
        }
        break;
      }
      case Elementwise::kRelu: {
        if (g.requires_grad(a)) {
          TensorT<T>& ga = g.grad(a);
          for (int64_t i = 0; i < go.numel(); ++i)
            if (va.data[i] > T(0)) ga.data[i] += go.data[i];
        }
        break;
      }
    }
  });
}

template <typename T>
typename GraphT<T>::Ref GraphT<T>::scale(Ref a, T s) {
  TensorT<T> out = value(a);
  for (auto& x : out.data) x *= s;
  return make_node(std::move(out), {a}, [a, s](GraphT& g, Ref self) {
    if (!g.requires_grad(a)) return;
    const TensorT<T>& go = g.grad(self);
    TensorT<T>& ga = g.grad(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += s * go.data[i];
  });
}

template <typename T>
typename GraphT<T>::Ref GraphT<T>::sum(Ref a) {
  T acc = T(0);
  for (const T& x : value(a).data) acc += x;
  return make_node(TensorT<T>::scalar(acc), {a}, [a](GraphT& g, Ref self) {
    if (!g.requires_grad(a)) return;
    T go = g.grad(self).data[0];
    TensorT<T>& ga = g.grad(a);
    for (auto& x : ga.data) x += go;
  });
}

template <typename T>
typename GraphT<T>::Ref GraphT<T>::reshape(Ref a, std::vector<int> shape) {
  SUBCNN_CHECK(shape_numel(shape) == value(a).numel(), "reshape: element count mismatch");
  TensorT<T> out;
  out.shape = std::move(shape);
  out.data = value(a).data;
  return make_node(std::move(out), {a}, [a](GraphT& g, Ref self) {
    if (!g.requires_grad(a)) return;
    const TensorT<T>& go = g.grad(self);
    TensorT<T>& ga = g.grad(a);
    for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
  });
}

namespace {

/// Sample positions for align-corners-false resize along one axis.
struct LerpAxis {
  std::vector<int> lo, hi;
  std::vector<double> frac;  // weight of hi
};

LerpAxis make_axis(int in, int out) {
  LerpAxis ax;
  ax.lo.resize(out);
  ax.hi.resize(out);
  ax.frac.resize(out);
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * static_cast<double>(in) / out - 0.5;
    src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
    int lo = static_cast<int>(std::floor(src));
    ax.lo[i] = lo;
    ax.hi[i] = std::min(lo + 1, in - 1);
    ax.frac[i] = src - lo;
  }
  return ax;
}

}  // namespace

template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& t, int out_h, int out_w) {
  SUBCNN_CHECK(out_h >= 1 && out_w >= 1, "bilinear_resize: non-positive target extents");
  SUBCNN_CHECK(t.rank() == 2 || t.rank() == 3, "bilinear_resize: rank-2/3 input expected");
  int H = t.dim(0), W = t.dim(1), C = t.rank() == 3 ? t.dim(2) : 1;
  if (out_h == H && out_w == W) return t;  // identity, exact
  LerpAxis ay = make_axis(H, out_h), ax = make_axis(W, out_w);
  std::vector<int> oshape = t.rank() == 3 ? std::vector<int>{out_h, out_w, C}
                                          : std::vector<int>{out_h, out_w};
  TensorT<T> out = TensorT<T>::zeros(oshape);
  const T* src = t.data.data();
  T* dst = out.data.data();
  for (int i = 0; i < out_h; ++i) {
    const T* r0 = src + static_cast<int64_t>(ay.lo[i]) * W * C;
    const T* r1 = src + static_cast<int64_t>(ay.hi[i]) * W * C;
    double fy = ay.frac[i];
    for (int j = 0; j < out_w; ++j) {
      double fx = ax.frac[j];
      const T* p00 = r0 + static_cast<int64_t>(ax.lo[j]) * C;
      const T* p01 = r0 + static_cast<int64_t>(ax.hi[j]) * C;
      const T* p10 = r1 + static_cast<int64_t>(ax.lo[j]) * C;
      const T* p11 = r1 + static_cast<int64_t>(ax.hi[j]) * C;
      for (int c = 0; c < C; ++c) {
        double top = p00[c] + fx * (p01[c] - p00[c]);
        double bot = p10[c] + fx * (p11[c] - p10[c]);
        *dst++ = static_cast<T>(top + fy * (bot - top));
      }
    }
  }
  return out;
}

template TensorT<float> bilinear_resize<float>(const TensorT<float>&, int, int);
template TensorT<double> bilinear_resize<double>(const TensorT<double>&, int, int);

template <typename T>
typename GraphT<T>::Ref GraphT<T>::bilinear_resize(Ref a, int out_h, int out_w) {
  TensorT<T> out = subcnn::bilinear_resize(value(a), out_h, out_w);
  int H = value(a).dim(0), W = value(a).dim(1);
  return make_node(std::move(out), {a}, [a, H, W, out_h, out_w](GraphT& g, Ref self) {
    if (!g.requires_grad(a)) return;
    const TensorT<T>& go = g.grad(self);
    TensorT<T>& ga = g.grad(a);
    int C = go.rank() == 3 ? go.dim(2) : 1;
    if (out_h == H && out_w == W) {
      for (int64_t i = 0; i < go.numel(); ++i) ga.data[i] += go.data[i];
      return;
    }
    LerpAxis ay = make_axis(H, out_h), ax = make_axis(W, out_w);
    const T* src = go.data.data();
    for (int i = 0; i < out_h; ++i) {
      double fy = ay.frac[i];
      for (int j = 0; j < out_w; ++j) {
        double fx = ax.frac[j];
        int64_t o00 = (static_cast<int64_t>(ay.lo[i]) * W + ax.lo[j]) * C;
        int64_t o01 = (static_cast<int64_t>(ay.lo[i]) * W + ax.hi[j]) * C;
        int64_t o10 = (static_cast<int64_t>(ay.hi[i]) * W + ax.lo[j]) * C;
        int64_t o11 = (static_cast<int64_t>(ay.hi[i]) * W + ax.hi[j]) * C;
        for (int c = 0; c < C; ++c) {
          T gv = *src++;
          ga.data[o00 + c] += static_cast<T>(gv * (1 - fy) * (1 - fx));
          ga.data[o01 + c] += static_cast<T>(gv * (1 - fy) * fx);
          ga.data[o10 + c] += static_cast<T>(gv * fy * (1 - fx));
          ga.data[o11 + c] += static_cast<T>(gv * fy * fx);
        }
      }
    }
  });
}

template class GraphT<float>;
template class GraphT<double>;

double grad_check(
    const std::function<GraphD::Ref(GraphD&, const std::vector<GraphD::Ref>&)>& f,
    const std::vector<TensorD>& inputs, double eps) {
  // Analytic pass.
  GraphD g;
  std::vector<GraphD::Ref> refs;
  refs.reserve(inputs.size());
  for (const auto& x : inputs) refs.push_back(g.input(x, true));
  GraphD::Ref out = f(g, refs);
  SUBCNN_CHECK(g.value(out).numel() == 1, "grad_check: non-scalar output");
  g.backward(out);
  std::vector<TensorD> analytic;
  analytic.reserve(inputs.size());
  for (auto r : refs) analytic.push_back(g.grad(r));

  auto eval = [&](const std::vector<TensorD>& xs) {
    GraphD h;
    std::vector<GraphD::Ref> rs;
    rs.reserve(xs.size());
    for (const auto& x : xs) rs.push_back(h.input(x, false));
    return h.value(f(h, rs)).data[0];
  };

  double max_err = 0.0;
  std::vector<TensorD> xs = inputs;
  for (size_t t = 0; t < xs.size(); ++t) {
    for (int64_t i = 0; i < xs[t].numel(); ++i) {
      double keep = xs[t].data[i];
      xs[t].data[i] = keep + eps;
      double fp = eval(xs);
      xs[t].data[i] = keep - eps;
      double fm = eval(xs);
      xs[t].data[i] = keep;
      double fd = (fp - fm) / (2 * eps);
      double an = analytic[t].data[i];
      double err = std::abs(an - fd) / std::max(1.0, std::abs(an));
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

namespace {

void put_u32(FILE* fp, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  SUBCNN_CHECK(fwrite(b, 1, 4, fp) == 4, "tensor file: short write");
}

uint32_t get_u32(FILE* fp, const char* path) {
  unsigned char b[4];
  SUBCNN_CHECK(fread(b, 1, 4, fp) == 4, "tensor file %s: truncated", path);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

void save_f32(const std::string& path, const std::vector<int>& shape,
              const std::vector<float>& data) {
  FILE* fp = fopen(path.c_str(), "wb");
  SUBCNN_CHECK(fp, "tensor file %s: cannot open for write", path.c_str());
  fwrite("STNS", 1, 4, fp);
  put_u32(fp, static_cast<uint32_t>(shape.size()));
  for (int e : shape) put_u32(fp, static_cast<uint32_t>(e));
  for (float v : data) {
    uint32_t bits;
    memcpy(&bits, &v, 4);
    put_u32(fp, bits);
  }
  SUBCNN_CHECK(fclose(fp) == 0, "tensor file %s: close failed", path.c_str());
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) { save_f32(path, t.shape, t.data); }

void save_tensor(const std::string& path, const TensorD& t) {
  save_f32(path, t.shape, t.cast<float>().data);
}

Tensor load_tensor(const std::string& path) {
  FILE* fp = fopen(path.c_str(), "rb");
  SUBCNN_CHECK(fp, "tensor file %s: cannot open", path.c_str());
  char magic[4];
  SUBCNN_CHECK(fread(magic, 1, 4, fp) == 4 && memcmp(magic, "STNS", 4) == 0,
               "tensor file %s: bad magic", path.c_str());
  uint32_t rank = get_u32(fp, path.c_str());
  SUBCNN_CHECK(rank <= 8, "tensor file %s: implausible rank %u", path.c_str(), rank);
  std::vector<int> shape(rank);
  for (auto& e : shape) e = static_cast<int>(get_u32(fp, path.c_str()));
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.data) {
    uint32_t bits = get_u32(fp, path.c_str());
    memcpy(&v, &bits, 4);
  }
  fclose(fp);
  return t;
}

}  // namespace subcnn

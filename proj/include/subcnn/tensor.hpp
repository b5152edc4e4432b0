#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "subcnn/common.hpp"

namespace subcnn {

int64_t shape_numel(const std::vector<int>& shape);

/// Dense row-major array. Feature maps are channels-last (H, W, C);
/// matrices are (rows, cols); scalars are shape {1}.
template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;

  TensorT() = default;
  TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    SUBCNN_CHECK(shape_numel(shape) == static_cast<int64_t>(data.size()),
                 "tensor: shape/data size mismatch");
  }
  static TensorT zeros(std::vector<int> s) {
    TensorT t;
    t.shape = std::move(s);
    t.data.assign(shape_numel(t.shape), T(0));
    return t;
  }
  static TensorT full(std::vector<int> s, T v) {
    TensorT t = zeros(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }
  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  int rank() const { return static_cast<int>(shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int dim(int i) const { return shape[i]; }
  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  T& at(int i) { return data[i]; }
  const T& at(int i) const { return data[i]; }
  T& at(int i, int j) { return data[static_cast<int64_t>(i) * shape[1] + j]; }
  const T& at(int i, int j) const { return data[static_cast<int64_t>(i) * shape[1] + j]; }
  T& at(int i, int j, int k) {
    return data[(static_cast<int64_t>(i) * shape[1] + j) * shape[2] + k];
  }
  const T& at(int i, int j, int k) const {
    return data[(static_cast<int64_t>(i) * shape[1] + j) * shape[2] + k];
  }
  T& at(int i, int j, int k, int l) {
    return data[((static_cast<int64_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  const T& at(int i, int j, int k, int l) const {
    return data[((static_cast<int64_t>(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

/// Throws if any value is NaN/Inf; ops call this so bad numbers surface
/// at the op that produced them instead of propagating.
template <typename T>
void check_finite(const TensorT<T>& t, const char* what);

enum class Elementwise { kAdd, kSub, kMul, kRelu };

/// Reverse-mode tape. Nodes live in an arena and are addressed by integer
/// refs; parents always precede children, so one reverse walk over the
/// arena is a reverse-topological traversal.
template <typename T>
class GraphT {
 public:
  using Ref = int;
  /// Backward rule: reads grad(self), accumulates into parents' grads.
  using BackwardFn = std::function<void(GraphT&, Ref)>;

  Ref input(TensorT<T> v, bool requires_grad = false);
  /// Registers an op result. The backward rule is kept only when some
  /// parent requires grad; otherwise the node is a plain value.
  Ref make_node(TensorT<T> value, std::vector<Ref> parents, BackwardFn backward);

  const TensorT<T>& value(Ref r) const { return nodes_[r].value; }
  /// Gradient buffer, zero-initialized on first touch.
  TensorT<T>& grad(Ref r);
  bool requires_grad(Ref r) const { return nodes_[r].requires_grad; }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Seeds d(loss)/d(loss) = 1 and walks the tape in reverse creation
  /// order. Scalar losses only; running twice on one graph is an error.
  void backward(Ref loss);

  Ref elementwise(Elementwise op, Ref a, Ref b = -1);
  Ref add(Ref a, Ref b) { return elementwise(Elementwise::kAdd, a, b); }
  Ref sub(Ref a, Ref b) { return elementwise(Elementwise::kSub, a, b); }
  Ref mul(Ref a, Ref b) { return elementwise(Elementwise::kMul, a, b); }
  Ref relu(Ref a) { return elementwise(Elementwise::kRelu, a); }
  Ref scale(Ref a, T s);
  /// Sum of all entries -> scalar.
  Ref sum(Ref a);
  /// Same data, new extents (row-major element order preserved).
  Ref reshape(Ref a, std::vector<int> shape);
  Ref bilinear_resize(Ref a, int out_h, int out_w);

 private:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad;
    bool grad_alloc = false;
    bool requires_grad = false;
    BackwardFn backward;
    std::vector<Ref> parents;
  };
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

using Graph = GraphT<float>;
using GraphD = GraphT<double>;

/// Resamples (H,W) or (H,W,C) to (out_h, out_w[, C]) with the
/// align-corners-false convention: src = (dst + 0.5) * in/out - 0.5, clamped.
template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& t, int out_h, int out_w);

/// Finite-difference check of every registered backward rule reachable from
/// f's scalar output. f must be pure: it is re-run per perturbed coordinate.
/// Returns max over coordinates of |analytic - central diff| / max(1, |analytic|).
double grad_check(
    const std::function<GraphD::Ref(GraphD&, const std::vector<GraphD::Ref>&)>& f,
    const std::vector<TensorD>& inputs, double eps = 1e-5);

/// Binary tensor file: magic "STNS", u32 rank, u32 extents, raw f32, all LE.
void save_tensor(const std::string& path, const Tensor& t);
void save_tensor(const std::string& path, const TensorD& t);
Tensor load_tensor(const std::string& path);

}  // namespace subcnn

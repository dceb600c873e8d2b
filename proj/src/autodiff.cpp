#include "eqtrack/autodiff.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>

#include "eqtrack/conv3d.hpp"

namespace eqtrack {

const Tensor& Value::val() const { return graph->node(id).val; }
const Tensor& Value::grad() const { return graph->node(id).grad; }

Tensor& Graph::grad_buffer(int id) {
  Node& n = node(id);
  if (!n.grad_touched) {
    n.grad = Tensor(n.val.shape());
    n.grad_touched = true;
  }
  return n.grad;
}

Value Graph::add_node(std::unique_ptr<Node> n, std::vector<int> inputs) {
  for (int i : inputs) {
    if (i < 0 || i >= size()) throw Error("graph: input node id out of range");
    if (node(i).needs_grad) n->needs_grad = true;
  }
  n->in = std::move(inputs);
  nodes_.push_back(std::move(n));
  return Value{this, size() - 1};
}

namespace {

void check_graph(const Graph* g, Value v) {
  if (v.graph != g) throw Error("graph: value belongs to a different graph");
}

// ---------------------------------------------------------------- broadcast

std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  std::vector<int> out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < r - ra ? 1 : a[i - (r - ra)];
    int db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw Error("shape mismatch: cannot broadcast " + Tensor::shape_str(a) + " with " +
                  Tensor::shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

std::vector<std::int64_t> aligned_strides(const std::vector<int>& shape,
                                          const std::vector<int>& out_shape) {
  size_t r = out_shape.size(), rs = shape.size();
  std::vector<std::int64_t> strides(r, 0);
  std::int64_t s = 1;
  for (size_t i = rs; i-- > 0;) {
    size_t oi = i + (r - rs);
    strides[oi] = (shape[i] == 1 && out_shape[oi] != 1) ? 0 : s;
    s *= shape[i];
  }
  return strides;
}

// visits out elements in linear order, giving offsets into both operands
template <class F>
void bcast_iterate(const std::vector<int>& out_shape, const std::vector<std::int64_t>& sa,
                   const std::vector<std::int64_t>& sb, F&& f) {
  size_t r = out_shape.size();
  std::int64_t n = shape_numel(out_shape);
  std::vector<int> idx(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t flat = 0; flat < n; ++flat) {
    f(flat, ia, ib);
    for (size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      ia -= sa[d] * out_shape[d];
      ib -= sb[d] * out_shape[d];
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

class BinaryNode : public Node {
 public:
  BinaryNode(BinOp op) : op_(op) {}
  void forward(const Tensor& a, const Tensor& b) {
    auto shape = broadcast_shape(a.shape(), b.shape());
    val = Tensor(shape);
    if (a.same_shape(b) && a.shape() == shape) {
      const double* pa = a.data();
      const double* pb = b.data();
      double* po = val.data();
      std::int64_t n = val.numel();
      switch (op_) {
        case BinOp::Add: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
        case BinOp::Sub: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
        case BinOp::Mul: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
        case BinOp::Div: for (std::int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i]; break;
      }
      return;
    }
    auto sa = aligned_strides(a.shape(), shape);
    auto sb = aligned_strides(b.shape(), shape);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = val.data();
    switch (op_) {
      case BinOp::Add:
        bcast_iterate(shape, sa, sb, [&](std::int64_t o, std::int64_t i, std::int64_t j) { po[o] = pa[i] + pb[j]; });
        break;
      case BinOp::Sub:
        bcast_iterate(shape, sa, sb, [&](std::int64_t o, std::int64_t i, std::int64_t j) { po[o] = pa[i] - pb[j]; });
        break;
      case BinOp::Mul:
        bcast_iterate(shape, sa, sb, [&](std::int64_t o, std::int64_t i, std::int64_t j) { po[o] = pa[i] * pb[j]; });
        break;
      case BinOp::Div:
        bcast_iterate(shape, sa, sb, [&](std::int64_t o, std::int64_t i, std::int64_t j) { po[o] = pa[i] / pb[j]; });
        break;
    }
  }

  void backward(Graph& g) override {
    Node& na = g.node(in[0]);
    Node& nb = g.node(in[1]);
    auto sa = aligned_strides(na.val.shape(), val.shape());
    auto sb = aligned_strides(nb.val.shape(), val.shape());
    const double* go = grad.data();
    const double* pa = na.val.data();
    const double* pb = nb.val.data();
    double* ga = na.needs_grad ? g.grad_buffer(in[0]).data() : nullptr;
    double* gb = nb.needs_grad ? g.grad_buffer(in[1]).data() : nullptr;
    switch (op_) {
      case BinOp::Add:
        bcast_iterate(val.shape(), sa, sb, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
          if (ga) ga[i] += go[o];
          if (gb) gb[j] += go[o];
        });
        break;
      case BinOp::Sub:
        bcast_iterate(val.shape(), sa, sb, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
          if (ga) ga[i] += go[o];
          if (gb) gb[j] -= go[o];
        });
        break;
      case BinOp::Mul:
        bcast_iterate(val.shape(), sa, sb, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
          if (ga) ga[i] += go[o] * pb[j];
          if (gb) gb[j] += go[o] * pa[i];
        });
        break;
      case BinOp::Div:
        bcast_iterate(val.shape(), sa, sb, [&](std::int64_t o, std::int64_t i, std::int64_t j) {
          if (ga) ga[i] += go[o] / pb[j];
          if (gb) gb[j] -= go[o] * pa[i] / (pb[j] * pb[j]);
        });
        break;
    }
  }

 private:
  BinOp op_;
};

// ------------------------------------------------------------- elementwise

class ScaleNode : public Node {
 public:
  ScaleNode(double c, double shift) : c_(c), shift_(shift) {}
  void forward(const Tensor& a) {
    val = Tensor(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) val[i] = c_ * a[i] + shift_;
  }
  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    Tensor& ga = g.grad_buffer(in[0]);
    for (std::int64_t i = 0; i < val.numel(); ++i) ga[i] += c_ * grad[i];
  }

 private:
  double c_, shift_;
};

class ReluNode : public Node {
 public:
  void forward(const Tensor& a) {
    val = Tensor(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) val[i] = a[i] > 0.0 ? a[i] : 0.0;
  }
  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    const Tensor& a = g.node(in[0]).val;
    Tensor& ga = g.grad_buffer(in[0]);
    for (std::int64_t i = 0; i < val.numel(); ++i)
      if (a[i] > 0.0) ga[i] += grad[i];
  }
};

class SqrtNode : public Node {
 public:
  void forward(const Tensor& a) {
    val = Tensor(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) val[i] = std::sqrt(a[i]);
  }
  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    Tensor& ga = g.grad_buffer(in[0]);
    for (std::int64_t i = 0; i < val.numel(); ++i) ga[i] += 0.5 / val[i] * grad[i];
  }
};

constexpr double kAcosClamp = 1e-7;

class AcosNode : public Node {
 public:
  void forward(const Tensor& a) {
    val = Tensor(a.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i)
      val[i] = std::acos(std::clamp(a[i], -1.0 + kAcosClamp, 1.0 - kAcosClamp));
  }
  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    const Tensor& a = g.node(in[0]).val;
    Tensor& ga = g.grad_buffer(in[0]);
    for (std::int64_t i = 0; i < val.numel(); ++i) {
      double x = std::clamp(a[i], -1.0 + kAcosClamp, 1.0 - kAcosClamp);
      ga[i] += grad[i] * (-1.0 / std::sqrt(1.0 - x * x));
    }
  }
};

// ------------------------------------------------------------ linear algebra

class MatmulNode : public Node {
 public:
  void forward(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
      throw Error("matmul: need [m,k] x [k,n], got " + Tensor::shape_str(a.shape()) +
                  " x " + Tensor::shape_str(b.shape()));
    m_ = a.dim(0);
    k_ = a.dim(1);
    n_ = b.dim(1);
    val = Tensor({m_, n_});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = val.data();
    for (int i = 0; i < m_; ++i)
      for (int k = 0; k < k_; ++k) {
        double aik = pa[static_cast<std::int64_t>(i) * k_ + k];
        const double* brow = pb + static_cast<std::int64_t>(k) * n_;
        double* orow = po + static_cast<std::int64_t>(i) * n_;
        for (int j = 0; j < n_; ++j) orow[j] += aik * brow[j];
      }
  }
  void backward(Graph& g) override {
    Node& na = g.node(in[0]);
    Node& nb = g.node(in[1]);
    const double* go = grad.data();
    if (na.needs_grad) {
      double* ga = g.grad_buffer(in[0]).data();
      const double* pb = nb.val.data();
      for (int i = 0; i < m_; ++i)
        for (int k = 0; k < k_; ++k) {
          double s = 0.0;
          const double* grow = go + static_cast<std::int64_t>(i) * n_;
          const double* brow = pb + static_cast<std::int64_t>(k) * n_;
          for (int j = 0; j < n_; ++j) s += grow[j] * brow[j];
          ga[static_cast<std::int64_t>(i) * k_ + k] += s;
        }
    }
    if (nb.needs_grad) {
      double* gb = g.grad_buffer(in[1]).data();
      const double* pa = na.val.data();
      for (int k = 0; k < k_; ++k)
        for (int i = 0; i < m_; ++i) {
          double aik = pa[static_cast<std::int64_t>(i) * k_ + k];
          const double* grow = go + static_cast<std::int64_t>(i) * n_;
          double* brow = gb + static_cast<std::int64_t>(k) * n_;
          for (int j = 0; j < n_; ++j) brow[j] += aik * grow[j];
        }
    }
  }

 private:
  int m_ = 0, k_ = 0, n_ = 0;
};

class TransposeNode : public Node {
 public:
  void forward(const Tensor& a) {
    if (a.rank() != 2) throw Error("transpose: need rank-2 tensor");
    m_ = a.dim(0);
    n_ = a.dim(1);
    val = Tensor({n_, m_});
    for (int i = 0; i < m_; ++i)
      for (int j = 0; j < n_; ++j)
        val[static_cast<std::int64_t>(j) * m_ + i] = a[static_cast<std::int64_t>(i) * n_ + j];
  }
  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    Tensor& ga = g.grad_buffer(in[0]);
    for (int i = 0; i < m_; ++i)
      for (int j = 0; j < n_; ++j)
        ga[static_cast<std::int64_t>(i) * n_ + j] += grad[static_cast<std::int64_t>(j) * m_ + i];
  }

 private:
  int m_ = 0, n_ = 0;
};

class ReshapeNode : public Node {
 public:
  void forward(const Tensor& a, std::vector<int> shape) { val = a.reshaped(std::move(shape)); }
  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    Tensor& ga = g.grad_buffer(in[0]);
    for (std::int64_t i = 0; i < val.numel(); ++i) ga[i] += grad[i];
  }
};

class ReduceSumNode : public Node {
 public:
  // axes sorted ascending; empty means all axes
  void forward(const Tensor& a, std::vector<int> axes) {
    axes_ = std::move(axes);
    in_shape_ = a.shape();
    if (axes_.empty()) {
      val = Tensor::scalar(a.sum());
      return;
    }
    std::vector<int> out_shape;
    for (int d = 0; d < a.rank(); ++d)
      if (std::find(axes_.begin(), axes_.end(), d) == axes_.end())
        out_shape.push_back(a.dim(d));
    if (out_shape.empty()) out_shape.push_back(1);
    val = Tensor(out_shape);
    iterate(a.shape(), [&](std::int64_t ii, std::int64_t oi) { val[oi] += a[ii]; });
  }
  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    Tensor& ga = g.grad_buffer(in[0]);
    if (axes_.empty()) {
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += grad[0];
      return;
    }
    iterate(in_shape_, [&](std::int64_t ii, std::int64_t oi) { ga[ii] += grad[oi]; });
  }

 private:
  template <class F>
  void iterate(const std::vector<int>& shape, F&& f) const {
    // walks input linearly, tracking the reduced (output) offset
    size_t r = shape.size();
    std::vector<std::int64_t> out_stride(r, 0);
    std::int64_t s = 1;
    for (size_t d = r; d-- > 0;) {
      bool reduced = std::find(axes_.begin(), axes_.end(), static_cast<int>(d)) != axes_.end();
      out_stride[d] = reduced ? 0 : s;
      if (!reduced) s *= shape[d];
    }
    std::vector<int> idx(r, 0);
    std::int64_t oi = 0;
    std::int64_t n = shape_numel(shape);
    for (std::int64_t ii = 0; ii < n; ++ii) {
      f(ii, oi);
      for (size_t d = r; d-- > 0;) {
        ++idx[d];
        oi += out_stride[d];
        if (idx[d] < shape[d]) break;
        idx[d] = 0;
        oi -= out_stride[d] * shape[d];
      }
    }
  }

  std::vector<int> axes_;
  std::vector<int> in_shape_;
};

class Slice0Node : public Node {
 public:
  void forward(const Tensor& a, int begin, int end) {
    if (a.rank() < 1 || begin < 0 || end > a.dim(0) || begin >= end)
      throw Error("slice0: bad range");
    begin_ = begin;
    row_ = a.numel() / a.dim(0);
    std::vector<int> shape = a.shape();
    shape[0] = end - begin;
    val = Tensor(shape);
    const double* src = a.data() + begin * row_;
    for (std::int64_t i = 0; i < val.numel(); ++i) val[i] = src[i];
  }
  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    double* ga = g.grad_buffer(in[0]).data() + begin_ * row_;
    for (std::int64_t i = 0; i < val.numel(); ++i) ga[i] += grad[i];
  }

 private:
  std::int64_t begin_ = 0, row_ = 0;
};

class Concat0Node : public Node {
 public:
  void forward(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) throw Error("concat0: empty");
    std::vector<int> shape = parts[0]->shape();
    offsets_.clear();
    int total = 0;
    for (const Tensor* p : parts) {
      if (p->rank() != static_cast<int>(shape.size()))
        throw Error("concat0: rank mismatch");
      for (size_t d = 1; d < shape.size(); ++d)
        if (p->shape()[d] != shape[d]) throw Error("concat0: trailing shape mismatch");
      offsets_.push_back(total);
      total += p->dim(0);
    }
    shape[0] = total;
    val = Tensor(shape);
    std::int64_t row = val.numel() / total;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      double* dst = val.data() + offsets_[pi] * row;
      for (std::int64_t i = 0; i < parts[pi]->numel(); ++i) dst[i] = (*parts[pi])[i];
    }
  }
  void backward(Graph& g) override {
    std::int64_t row = val.numel() / val.dim(0);
    for (size_t pi = 0; pi < in.size(); ++pi) {
      Node& np = g.node(in[pi]);
      if (!np.needs_grad) continue;
      Tensor& gp = g.grad_buffer(in[pi]);
      const double* src = grad.data() + offsets_[pi] * row;
      for (std::int64_t i = 0; i < gp.numel(); ++i) gp[i] += src[i];
    }
  }

 private:
  std::vector<std::int64_t> offsets_;
};

constexpr double kNormGuard = 1e-12;

class VectorNormNode : public Node {
 public:
  void forward(const Tensor& a) {
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) s += a[i] * a[i];
    norm_ = std::sqrt(s);
    val = Tensor::scalar(norm_);
  }
  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    const Tensor& a = g.node(in[0]).val;
    Tensor& ga = g.grad_buffer(in[0]);
    double inv = grad[0] / std::max(norm_, kNormGuard);
    for (std::int64_t i = 0; i < a.numel(); ++i) ga[i] += inv * a[i];
  }

 private:
  double norm_ = 0.0;
};

// ------------------------------------------------------------------- conv

class ConvNode : public Node {
 public:
  void forward(const Tensor& x, const Tensor& k) { val = conv3d_forward(x, k); }
  void backward(Graph& g) override {
    Node& nx = g.node(in[0]);
    Node& nk = g.node(in[1]);
    if (nk.needs_grad) {
      Tensor gk = conv3d_grad_kernel(grad, nx.val, nk.val.dim(2));
      Tensor& acc = g.grad_buffer(in[1]);
      for (std::int64_t i = 0; i < gk.numel(); ++i) acc[i] += gk[i];
    }
    if (nx.needs_grad) {
      Tensor gx = conv3d_grad_input(grad, nk.val, nx.val.dim(0));
      Tensor& acc = g.grad_buffer(in[0]);
      for (std::int64_t i = 0; i < gx.numel(); ++i) acc[i] += gx[i];
    }
  }
};

// -------------------------------------------------------------------- svd3

// Packed factorization node: val = [U(9) | S(3) | V(9)].
// Backward uses the first-order perturbation expansion with the cross-coupling
// denominator regularized as sign(d)*max(|d|, 1e-8) when singular values
// coincide within 1e-8 (reported on the graph).
class Svd3Node : public Node {
 public:
  void forward(const Tensor& m) {
    if (m.rank() != 2 || m.dim(0) != 3 || m.dim(1) != 3) throw Error("svd3: need [3,3]");
    if (!m.all_finite()) throw Error("svd3: non-finite input");
    Eigen::Matrix3d em;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) em(i, j) = m[i * 3 + j];
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(em, Eigen::ComputeFullU | Eigen::ComputeFullV);
    val = Tensor({21});
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        val[i * 3 + j] = svd.matrixU()(i, j);
        val[12 + i * 3 + j] = svd.matrixV()(i, j);
      }
    for (int i = 0; i < 3; ++i) val[9 + i] = svd.singularValues()(i);
  }

  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    Eigen::Matrix3d U, V, gU, gV;
    Eigen::Vector3d S, gS;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        U(i, j) = val[i * 3 + j];
        V(i, j) = val[12 + i * 3 + j];
        gU(i, j) = grad[i * 3 + j];
        gV(i, j) = grad[12 + i * 3 + j];
      }
    for (int i = 0; i < 3; ++i) {
      S(i) = val[9 + i];
      gS(i) = grad[9 + i];
    }
    constexpr double kDegenerate = 1e-8;
    bool degenerate = false;
    Eigen::Matrix3d F = Eigen::Matrix3d::Zero();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        if (i == j) continue;
        double diff = S(j) - S(i);
        if (std::fabs(diff) < kDegenerate) degenerate = true;
        double sd = diff >= 0 ? std::max(diff, kDegenerate) : std::min(diff, -kDegenerate);
        double sum = std::max(S(j) + S(i), kDegenerate);
        F(i, j) = 1.0 / (sd * sum);
      }
    if (degenerate) g.note_svd_degenerate();
    Eigen::Matrix3d utgu = U.transpose() * gU;
    Eigen::Matrix3d vtgv = V.transpose() * gV;
    Eigen::Matrix3d inner = Eigen::Matrix3d::Zero();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        if (i == j) {
          inner(i, j) = gS(i);
        } else {
          inner(i, j) = F(i, j) * (utgu(i, j) - utgu(j, i)) * S(j) +
                        S(i) * F(i, j) * (vtgv(i, j) - vtgv(j, i));
        }
      }
    Eigen::Matrix3d gM = U * inner * V.transpose();
    Tensor& ga = g.grad_buffer(in[0]);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) ga[i * 3 + j] += gM(i, j);
  }
};

// --------------------------------------------------------------- norm relu

class NormReluNode : public Node {
 public:
  void forward(const Tensor& field, const Tensor& bias) {
    if (field.rank() < 2) throw Error("norm_relu: field must have component axis first");
    if (bias.numel() != 1) throw Error("norm_relu: bias must be a scalar");
    comps_ = field.dim(0);
    vox_ = field.numel() / comps_;
    double b = bias[0];
    norms_ = Tensor({static_cast<int>(vox_)});
    val = Tensor(field.shape());
    for (std::int64_t p = 0; p < vox_; ++p) {
      double n2 = 0.0;
      for (int c = 0; c < comps_; ++c) {
        double v = field[c * vox_ + p];
        n2 += v * v;
      }
      double n = std::sqrt(n2);
      norms_[p] = n;
      double m = n + b;
      double s = m > 0.0 ? m / std::max(n, kNormGuard) : 0.0;
      for (int c = 0; c < comps_; ++c) val[c * vox_ + p] = field[c * vox_ + p] * s;
    }
  }

  void backward(Graph& g) override {
    Node& nf = g.node(in[0]);
    Node& nb = g.node(in[1]);
    const Tensor& f = nf.val;
    double b = nb.val[0];
    double* gf = nf.needs_grad ? g.grad_buffer(in[0]).data() : nullptr;
    double* gb = nb.needs_grad ? g.grad_buffer(in[1]).data() : nullptr;
    for (std::int64_t p = 0; p < vox_; ++p) {
      double n = norms_[p];
      double m = n + b;
      if (m <= 0.0) continue;
      double nn = std::max(n, kNormGuard);
      double s = m / nn;
      double dot = 0.0;
      for (int c = 0; c < comps_; ++c) dot += grad[c * vox_ + p] * f[c * vox_ + p];
      if (gf) {
        double coupling = n > kNormGuard ? b * dot / (n * n * n) : 0.0;
        for (int c = 0; c < comps_; ++c)
          gf[c * vox_ + p] += grad[c * vox_ + p] * s - coupling * f[c * vox_ + p];
      }
      if (gb) *gb += dot / nn;
    }
  }

 private:
  int comps_ = 0;
  std::int64_t vox_ = 0;
  Tensor norms_;
};

// ---------------------------------------------------------- kernel assembly

class AssembleKernelNode : public Node {
 public:
  AssembleKernelNode(std::vector<int> shape,
                     std::shared_ptr<const std::vector<KernelPlacement>> placements)
      : shape_(std::move(shape)), placements_(std::move(placements)) {}

  void forward(const Tensor& weights) {
    val = Tensor(shape_);
    const int cin = shape_[1];
    const std::int64_t kvol =
        static_cast<std::int64_t>(shape_[2]) * shape_[3] * shape_[4];
    for (const KernelPlacement& p : *placements_) {
      double w = weights[p.weight_index];
      const Tensor& basis = *p.basis;
      int bo = basis.dim(0), bi = basis.dim(1);
      for (int a = 0; a < bo; ++a)
        for (int c = 0; c < bi; ++c) {
          const double* src = basis.data() + (static_cast<std::int64_t>(a) * bi + c) * kvol;
          double* dst = val.data() +
                        (static_cast<std::int64_t>(p.out_channel0 + a) * cin +
                         (p.in_channel0 + c)) * kvol;
          for (std::int64_t i = 0; i < kvol; ++i) dst[i] += w * src[i];
        }
    }
  }

  void backward(Graph& g) override {
    if (!g.node(in[0]).needs_grad) return;
    Tensor& gw = g.grad_buffer(in[0]);
    const int cin = shape_[1];
    const std::int64_t kvol =
        static_cast<std::int64_t>(shape_[2]) * shape_[3] * shape_[4];
    for (const KernelPlacement& p : *placements_) {
      const Tensor& basis = *p.basis;
      int bo = basis.dim(0), bi = basis.dim(1);
      double s = 0.0;
      for (int a = 0; a < bo; ++a)
        for (int c = 0; c < bi; ++c) {
          const double* src = basis.data() + (static_cast<std::int64_t>(a) * bi + c) * kvol;
          const double* go = grad.data() +
                             (static_cast<std::int64_t>(p.out_channel0 + a) * cin +
                              (p.in_channel0 + c)) * kvol;
          for (std::int64_t i = 0; i < kvol; ++i) s += go[i] * src[i];
        }
      gw[p.weight_index] += s;
    }
  }

 private:
  std::vector<int> shape_;
  std::shared_ptr<const std::vector<KernelPlacement>> placements_;
};

class LeafNode : public Node {
 public:
  void backward(Graph&) override {}
};

}  // namespace

// ----------------------------------------------------------- Graph methods

Value Graph::constant(Tensor v) {
  auto n = std::make_unique<LeafNode>();
  n->val = std::move(v);
  return add_node(std::move(n), {});
}

Value Graph::param(Tensor v) {
  auto n = std::make_unique<LeafNode>();
  n->val = std::move(v);
  Value out = add_node(std::move(n), {});
  node(out.id).needs_grad = true;
  return out;
}

namespace {
template <class NodeT, class... Args>
Value binary_like(Graph& g, Value a, Value b, Args&&... args) {
  auto n = std::make_unique<NodeT>(std::forward<Args>(args)...);
  n->forward(a.val(), b.val());
  return g.add_node(std::move(n), {a.id, b.id});
}
}  // namespace

Value Graph::add(Value a, Value b) {
  check_graph(this, a);
  check_graph(this, b);
  auto n = std::make_unique<BinaryNode>(BinOp::Add);
  n->forward(a.val(), b.val());
  return add_node(std::move(n), {a.id, b.id});
}

Value Graph::sub(Value a, Value b) {
  check_graph(this, a);
  check_graph(this, b);
  auto n = std::make_unique<BinaryNode>(BinOp::Sub);
  n->forward(a.val(), b.val());
  return add_node(std::move(n), {a.id, b.id});
}

Value Graph::mul(Value a, Value b) {
  check_graph(this, a);
  check_graph(this, b);
  auto n = std::make_unique<BinaryNode>(BinOp::Mul);
  n->forward(a.val(), b.val());
  return add_node(std::move(n), {a.id, b.id});
}

Value Graph::div(Value a, Value b) {
  check_graph(this, a);
  check_graph(this, b);
  auto n = std::make_unique<BinaryNode>(BinOp::Div);
  n->forward(a.val(), b.val());
  return add_node(std::move(n), {a.id, b.id});
}

Value Graph::scale(Value a, double c) {
  check_graph(this, a);
  auto n = std::make_unique<ScaleNode>(c, 0.0);
  n->forward(a.val());
  return add_node(std::move(n), {a.id});
}

Value Graph::add_const(Value a, double c) {
  check_graph(this, a);
  auto n = std::make_unique<ScaleNode>(1.0, c);
  n->forward(a.val());
  return add_node(std::move(n), {a.id});
}

Value Graph::relu(Value a) {
  check_graph(this, a);
  auto n = std::make_unique<ReluNode>();
  n->forward(a.val());
  return add_node(std::move(n), {a.id});
}

Value Graph::sqrt(Value a) {
  check_graph(this, a);
  auto n = std::make_unique<SqrtNode>();
  n->forward(a.val());
  return add_node(std::move(n), {a.id});
}

Value Graph::acos_clamped(Value a) {
  check_graph(this, a);
  auto n = std::make_unique<AcosNode>();
  n->forward(a.val());
  return add_node(std::move(n), {a.id});
}

Value Graph::matmul(Value a, Value b) {
  check_graph(this, a);
  check_graph(this, b);
  auto n = std::make_unique<MatmulNode>();
  n->forward(a.val(), b.val());
  return add_node(std::move(n), {a.id, b.id});
}

Value Graph::transpose(Value a) {
  check_graph(this, a);
  auto n = std::make_unique<TransposeNode>();
  n->forward(a.val());
  return add_node(std::move(n), {a.id});
}

Value Graph::reshape(Value a, std::vector<int> shape) {
  check_graph(this, a);
  auto n = std::make_unique<ReshapeNode>();
  n->forward(a.val(), std::move(shape));
  return add_node(std::move(n), {a.id});
}

Value Graph::reduce_sum(Value a) {
  check_graph(this, a);
  auto n = std::make_unique<ReduceSumNode>();
  n->forward(a.val(), {});
  return add_node(std::move(n), {a.id});
}

Value Graph::reduce_sum_axes(Value a, std::vector<int> axes) {
  check_graph(this, a);
  std::sort(axes.begin(), axes.end());
  auto n = std::make_unique<ReduceSumNode>();
  n->forward(a.val(), std::move(axes));
  return add_node(std::move(n), {a.id});
}

Value Graph::slice0(Value a, int begin, int end) {
  check_graph(this, a);
  auto n = std::make_unique<Slice0Node>();
  n->forward(a.val(), begin, end);
  return add_node(std::move(n), {a.id});
}

Value Graph::concat0(const std::vector<Value>& parts) {
  std::vector<const Tensor*> tensors;
  std::vector<int> ids;
  for (Value v : parts) {
    check_graph(this, v);
    tensors.push_back(&v.val());
    ids.push_back(v.id);
  }
  auto n = std::make_unique<Concat0Node>();
  n->forward(tensors);
  return add_node(std::move(n), std::move(ids));
}

Value Graph::vector_norm(Value a) {
  check_graph(this, a);
  auto n = std::make_unique<VectorNormNode>();
  n->forward(a.val());
  return add_node(std::move(n), {a.id});
}

Value Graph::conv3d(Value input, Value kernel) {
  check_graph(this, input);
  check_graph(this, kernel);
  auto n = std::make_unique<ConvNode>();
  n->forward(input.val(), kernel.val());
  return add_node(std::move(n), {input.id, kernel.id});
}

Graph::Svd Graph::svd3(Value m) {
  check_graph(this, m);
  auto n = std::make_unique<Svd3Node>();
  n->forward(m.val());
  Value packed = add_node(std::move(n), {m.id});
  Svd out;
  out.u = reshape(slice0(packed, 0, 9), {3, 3});
  out.s = slice0(packed, 9, 12);
  out.v = reshape(slice0(packed, 12, 21), {3, 3});
  return out;
}

Value Graph::norm_relu(Value field, Value bias) {
  check_graph(this, field);
  check_graph(this, bias);
  auto n = std::make_unique<NormReluNode>();
  n->forward(field.val(), bias.val());
  return add_node(std::move(n), {field.id, bias.id});
}

Value Graph::assemble_kernel(Value weights, std::vector<int> kernel_shape,
                             std::shared_ptr<const std::vector<KernelPlacement>> placements) {
  check_graph(this, weights);
  if (kernel_shape.size() != 5) throw Error("assemble_kernel: shape must be rank 5");
  auto n = std::make_unique<AssembleKernelNode>(std::move(kernel_shape), std::move(placements));
  n->forward(weights.val());
  return add_node(std::move(n), {weights.id});
}

void Graph::backward(Value loss) {
  check_graph(this, loss);
  if (loss.val().numel() != 1) throw Error("backward: loss must be scalar");
  for (auto& n : nodes_) n->grad_touched = false;
  grad_buffer(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& nd = node(id);
    if (!nd.grad_touched || !nd.needs_grad || nd.in.empty()) continue;
    nd.backward(*this);
  }
}

}  // namespace eqtrack

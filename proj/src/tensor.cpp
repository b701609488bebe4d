#include "pami/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "pami/error.hpp"

namespace pami::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;
template <typename T>
using Backward = std::function<void(Node<T>&)>;

[[noreturn]] void bad_shape(const std::string& what) { throw Error("bad-shape", what); }

void require(bool ok, const std::string& what) {
  if (!ok) bad_shape(what);
}

// Builds the result node; history is kept only if some input needs it.
template <typename T>
Tensor<T> make_op(Shape shape, Buffer<T> value, std::initializer_list<Tensor<T>> inputs,
                  Backward<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_op_n(Shape shape, Buffer<T> value, const std::vector<Tensor<T>>& inputs,
                    Backward<T> backward) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return Tensor<T>(std::move(node));
}

// Parent i, with its gradient buffer allocated, or nullptr if it needs none.
template <typename T>
Node<T>* grad_target(Node<T>& self, std::size_t i) {
  Node<T>* p = self.parents[i].get();
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p;
}

template <typename T>
void require_2d(const Tensor<T>& x, const char* op) {
  require(x.defined() && x.rank() == 2, std::string(op) + " expects a 2D tensor");
}

template <typename T>
void require_3d(const Tensor<T>& x, const char* op) {
  require(x.defined() && x.rank() == 3, std::string(op) + " expects a [C×H×W] tensor");
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad) {
  if (ad::numel(shape) != values.size())
    bad_shape("value count " + std::to_string(values.size()) + " does not match " +
              shape_str(shape));
  node_ = std::make_shared<Node<T>>();
  node_->shape = std::move(shape);
  node_->value.assign(values.begin(), values.end());
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::from_buffer(Shape shape, Buffer<T> values, bool requires_grad) {
  if (ad::numel(shape) != values.size())
    bad_shape("value count " + std::to_string(values.size()) + " does not match " +
              shape_str(shape));
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = ad::numel(shape);
  return from_buffer(std::move(shape), Buffer<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const std::size_t n = ad::numel(shape);
  return from_buffer(std::move(shape), Buffer<T>(n, value));
}

template <typename T>
T Tensor<T>::item() const {
  require(numel() == 1, "item() on a tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(int r, int c) const {
  return node_->value[static_cast<std::size_t>(r) * static_cast<std::size_t>(dim(1)) +
                      static_cast<std::size_t>(c)];
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
void Tensor<T>::backward() const {
  if (!requires_grad()) return;
  // Iterative post-order DFS; creation order is not tracked, so sort here.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node<T>* p = n->parents[next++].get();
      if (p->requires_grad && p->backward_fn && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  std::fill(node_->grad.begin(), node_->grad.end(), T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

template <typename T>
Tensor<T> Tensor<T>::detached() const {
  return from_buffer(node_->shape, node_->value, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone_leaf() const {
  return from_buffer(node_->shape, node_->value, node_->requires_grad);
}

// ---- linear algebra --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const int m = ta ? ac : ar, k = ta ? ar : ac;
  const int kb = tb ? bc : br, n = tb ? br : bc;
  require(k == kb, "matmul inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Buffer<T> out(static_cast<std::size_t>(m) * n);
  MapC<T> A(a.values().data(), ar, ac), B(b.values().data(), br, bc);
  MapM<T> C(out.data(), m, n);
  if (!ta && !tb) C.noalias() = A * B;
  else if (ta && !tb) C.noalias() = A.transpose() * B;
  else if (!ta && tb) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();
  return make_op<T>({m, n}, std::move(out), {a, b}, [=](Node<T>& self) {
    MapC<T> G(self.grad.data(), m, n);
    const Node<T>& na = *self.parents[0];
    const Node<T>& nb = *self.parents[1];
    MapC<T> A(na.value.data(), ar, ac), B(nb.value.data(), br, bc);
    if (auto* pa = grad_target(self, 0)) {
      MapM<T> dA(pa->grad.data(), ar, ac);
      if (!ta) {
        if (!tb) dA.noalias() += G * B.transpose();
        else dA.noalias() += G * B;
      } else {
        if (!tb) dA.noalias() += B * G.transpose();
        else dA.noalias() += B.transpose() * G.transpose();
      }
    }
    if (auto* pb = grad_target(self, 1)) {
      MapM<T> dB(pb->grad.data(), br, bc);
      if (!tb) {
        if (!ta) dB.noalias() += A.transpose() * G;
        else dB.noalias() += A * G;
      } else {
        if (!ta) dB.noalias() += G.transpose() * A;
        else dB.noalias() += G.transpose() * A.transpose();
      }
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_2d(x, "transpose");
  const int r = x.dim(0), c = x.dim(1);
  Buffer<T> out(x.numel());
  MapM<T>(out.data(), c, r) = MapC<T>(x.values().data(), r, c).transpose();
  return make_op<T>({c, r}, std::move(out), {x}, [=](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      MapM<T>(p->grad.data(), r, c) += MapC<T>(self.grad.data(), c, r).transpose();
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(numel(shape) == x.numel(),
          "reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Buffer<T> out(x.values().begin(), x.values().end());
  return make_op<T>(std::move(shape), std::move(out), {x}, [](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_rowvec(matmul(x, w), b);
}

// ---- elementwise -----------------------------------------------------------

namespace {

template <typename T>
void require_same(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.defined() && b.defined() && a.shape() == b.shape(),
          std::string(op) + " shape mismatch " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "add");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    for (std::size_t k = 0; k < 2; ++k)
      if (auto* p = grad_target(self, k))
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "sub");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    if (auto* p = grad_target(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] -= self.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a, b, "mul");
  Buffer<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return make_op<T>(a.shape(), std::move(out), {a, b}, [](Node<T>& self) {
    const auto& va = self.parents[0]->value;
    const auto& vb = self.parents[1]->value;
    if (auto* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * vb[i];
    if (auto* p = grad_target(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * va[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * factor;
  return make_op<T>(x.shape(), std::move(out), {x}, [factor](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& x, T offset) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] + offset;
  return make_op<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, const Tensor<T>& s) {
  require(s.defined() && s.numel() == 1, "add_scalar expects a one-element tensor");
  const T v = s.values()[0];
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] + v;
  return make_op<T>(x.shape(), std::move(out), {x, s}, [](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    if (auto* p = grad_target(self, 1)) {
      T acc = 0;
      for (T g : self.grad) acc += g;
      p->grad[0] += acc;
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x.values()[i]);
  return make_op<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const T y = self.value[i];
        p->grad[i] += self.grad[i] * y * (T(1) - y);
      }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Buffer<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(x.values()[i], T(0));
  return make_op<T>(x.shape(), std::move(out), {x}, [](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (p->value[i] > T(0)) p->grad[i] += self.grad[i];
  });
}

// ---- 2D broadcasting -------------------------------------------------------

template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  require_2d(x, "add_rowvec");
  const int n = x.dim(0), c = x.dim(1);
  require(static_cast<int>(v.numel()) == c,
          "add_rowvec " + shape_str(x.shape()) + " + " + shape_str(v.shape()));
  Buffer<T> out(x.numel());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] + v.values()[j];
  return make_op<T>(x.shape(), std::move(out), {x, v}, [=](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    if (auto* p = grad_target(self, 1))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) p->grad[j] += self.grad[i * c + j];
  });
}

template <typename T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  require_2d(x, "mul_rowvec");
  const int n = x.dim(0), c = x.dim(1);
  require(static_cast<int>(v.numel()) == c,
          "mul_rowvec " + shape_str(x.shape()) + " * " + shape_str(v.shape()));
  Buffer<T> out(x.numel());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] * v.values()[j];
  return make_op<T>(x.shape(), std::move(out), {x, v}, [=](Node<T>& self) {
    const auto& vx = self.parents[0]->value;
    const auto& vv = self.parents[1]->value;
    if (auto* p = grad_target(self, 0))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) p->grad[i * c + j] += self.grad[i * c + j] * vv[j];
    if (auto* p = grad_target(self, 1))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) p->grad[j] += self.grad[i * c + j] * vx[i * c + j];
  });
}

template <typename T>
Tensor<T> mul_colvec(const Tensor<T>& x, const Tensor<T>& v) {
  require_2d(x, "mul_colvec");
  const int n = x.dim(0), c = x.dim(1);
  require(static_cast<int>(v.numel()) == n,
          "mul_colvec " + shape_str(x.shape()) + " * " + shape_str(v.shape()));
  Buffer<T> out(x.numel());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out[i * c + j] = x.values()[i * c + j] * v.values()[i];
  return make_op<T>(x.shape(), std::move(out), {x, v}, [=](Node<T>& self) {
    const auto& vx = self.parents[0]->value;
    const auto& vv = self.parents[1]->value;
    if (auto* p = grad_target(self, 0))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) p->grad[i * c + j] += self.grad[i * c + j] * vv[i];
    if (auto* p = grad_target(self, 1))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) p->grad[i] += self.grad[i * c + j] * vx[i * c + j];
  });
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x) {
  require_2d(x, "mean_rows");
  const int n = x.dim(0), c = x.dim(1);
  require(n >= 1, "mean_rows over zero rows");
  Buffer<T> out(static_cast<std::size_t>(c), T(0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < c; ++j) out[j] += x.values()[i * c + j];
  for (auto& v : out) v /= T(n);
  return make_op<T>({1, c}, std::move(out), {x}, [=](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) p->grad[i * c + j] += self.grad[j] / T(n);
  });
}

template <typename T>
Tensor<T> max_rows(const Tensor<T>& x) {
  require_2d(x, "max_rows");
  const int n = x.dim(0), c = x.dim(1);
  require(n >= 1, "max_rows over zero rows");
  Buffer<T> out(static_cast<std::size_t>(c));
  std::vector<int> arg(static_cast<std::size_t>(c), 0);
  for (int j = 0; j < c; ++j) {
    out[j] = x.values()[j];
    for (int i = 1; i < n; ++i)
      if (x.values()[i * c + j] > out[j]) {
        out[j] = x.values()[i * c + j];
        arg[j] = i;
      }
  }
  return make_op<T>({1, c}, std::move(out), {x}, [=](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (int j = 0; j < c; ++j) p->grad[arg[j] * c + j] += self.grad[j];
  });
}

template <typename T>
Tensor<T> mean_cols(const Tensor<T>& x) {
  require_2d(x, "mean_cols");
  const int n = x.dim(0), c = x.dim(1);
  require(c >= 1, "mean_cols over zero columns");
  Buffer<T> out(static_cast<std::size_t>(n), T(0));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) out[i] += x.values()[i * c + j];
    out[i] /= T(c);
  }
  return make_op<T>({n, 1}, std::move(out), {x}, [=](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) p->grad[i * c + j] += self.grad[i] / T(c);
  });
}

template <typename T>
Tensor<T> max_cols(const Tensor<T>& x) {
  require_2d(x, "max_cols");
  const int n = x.dim(0), c = x.dim(1);
  require(c >= 1, "max_cols over zero columns");
  Buffer<T> out(static_cast<std::size_t>(n));
  std::vector<int> arg(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    out[i] = x.values()[i * c];
    for (int j = 1; j < c; ++j)
      if (x.values()[i * c + j] > out[i]) {
        out[i] = x.values()[i * c + j];
        arg[i] = j;
      }
  }
  return make_op<T>({n, 1}, std::move(out), {x}, [=](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (int i = 0; i < n; ++i) p->grad[i * c + arg[i]] += self.grad[i];
  });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.values()) acc += v;
  return make_op<T>({1}, {acc}, {x}, [](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (auto& g : p->grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// ---- structure -------------------------------------------------------------

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_cols of nothing");
  const int n = parts[0].dim(0);
  std::vector<int> widths;
  int total = 0;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    require(p.dim(0) == n, "concat_cols row mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
  }
  Buffer<T> out(static_cast<std::size_t>(n) * total);
  int offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int w = widths[k];
    for (int i = 0; i < n; ++i)
      std::copy_n(parts[k].values().data() + i * w, w, out.data() + i * total + offset);
    offset += w;
  }
  return make_op_n<T>({n, total}, std::move(out), parts, [=](Node<T>& self) {
    int off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const int w = widths[k];
      if (auto* p = grad_target(self, k))
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < w; ++j) p->grad[i * w + j] += self.grad[i * total + off + j];
      off += w;
    }
  });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int start, int count) {
  require_2d(x, "slice_cols");
  const int n = x.dim(0), c = x.dim(1);
  require(start >= 0 && count >= 1 && start + count <= c, "slice_cols out of range");
  Buffer<T> out(static_cast<std::size_t>(n) * count);
  for (int i = 0; i < n; ++i)
    std::copy_n(x.values().data() + i * c + start, count, out.data() + i * count);
  return make_op<T>({n, count}, std::move(out), {x}, [=](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < count; ++j) p->grad[i * c + start + j] += self.grad[i * count + j];
  });
}

// ---- normalization / attention ---------------------------------------------

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_2d(x, "softmax_rows");
  const int n = x.dim(0), c = x.dim(1);
  Buffer<T> out(x.numel());
  for (int i = 0; i < n; ++i) {
    const T* row = x.values().data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < c; ++j) mx = std::max(mx, row[j]);
    if (!std::isfinite(mx)) throw Error("degenerate-softmax", "row has no finite entry");
    T z = 0;
    for (int j = 0; j < c; ++j) {
      // exp(-inf) == 0 exactly.
      out[i * c + j] = std::exp(row[j] - mx);
      z += out[i * c + j];
    }
    for (int j = 0; j < c; ++j) out[i * c + j] /= z;
  }
  return make_op<T>(x.shape(), std::move(out), {x}, [=](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (int i = 0; i < n; ++i) {
        const T* y = self.value.data() + i * c;
        const T* g = self.grad.data() + i * c;
        T dot = 0;
        for (int j = 0; j < c; ++j) dot += y[j] * g[j];
        for (int j = 0; j < c; ++j) p->grad[i * c + j] += y[j] * (g[j] - dot);
      }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_2d(x, "layer_norm");
  const int n = x.dim(0), c = x.dim(1);
  require(static_cast<int>(gain.numel()) == c && static_cast<int>(bias.numel()) == c,
          "layer_norm gain/bias width");
  Buffer<T> out(x.numel()), xhat(x.numel()), inv_std(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const T* row = x.values().data() + i * c;
    T mean = 0;
    for (int j = 0; j < c; ++j) mean += row[j];
    mean /= T(c);
    T var = 0;
    for (int j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= T(c);
    inv_std[i] = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) {
      xhat[i * c + j] = (row[j] - mean) * inv_std[i];
      out[i * c + j] = xhat[i * c + j] * gain.values()[j] + bias.values()[j];
    }
  }
  return make_op<T>(x.shape(), std::move(out), {x, gain, bias},
                    [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    const auto& g = self.parents[1]->value;
    auto* px = grad_target(self, 0);
    auto* pg = grad_target(self, 1);
    auto* pb = grad_target(self, 2);
    for (int i = 0; i < n; ++i) {
      const T* dy = self.grad.data() + i * c;
      const T* xh = xhat.data() + i * c;
      if (pg)
        for (int j = 0; j < c; ++j) pg->grad[j] += dy[j] * xh[j];
      if (pb)
        for (int j = 0; j < c; ++j) pb->grad[j] += dy[j];
      if (px) {
        T s1 = 0, s2 = 0;
        for (int j = 0; j < c; ++j) {
          const T d = dy[j] * g[j];
          s1 += d;
          s2 += d * xh[j];
        }
        for (int j = 0; j < c; ++j) {
          const T d = dy[j] * g[j];
          px->grad[i * c + j] += inv_std[i] * (d - s1 / T(c) - xh[j] * s2 / T(c));
        }
      }
    }
  });
}

// ---- feature maps ----------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  require_3d(x, "conv2d");
  require(weight.rank() == 4, "conv2d weight must be [Cout×Cin×k×k]");
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = weight.dim(0), k = weight.dim(2);
  require(weight.dim(1) == cin && weight.dim(3) == k,
          "conv2d weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  require(static_cast<int>(bias.numel()) == cout, "conv2d bias width");
  require(stride >= 1 && padding >= 0, "conv2d stride/padding");
  const int ho = (h + 2 * padding - k) / stride + 1;
  const int wo = (w + 2 * padding - k) / stride + 1;
  require(ho >= 1 && wo >= 1, "conv2d output would be empty");
  const int rows = cin * k * k, cols = ho * wo;

  Buffer<T> col(static_cast<std::size_t>(rows) * cols, T(0));
  const T* xv = x.values().data();
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * cols;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - padding + kx;
            if (ix >= 0 && ix < w) dst[oy * wo + ox] = xv[(ci * h + iy) * w + ix];
          }
        }
      }

  Buffer<T> out(static_cast<std::size_t>(cout) * cols);
  MapM<T> O(out.data(), cout, cols);
  O.noalias() = MapC<T>(weight.values().data(), cout, rows) * MapC<T>(col.data(), rows, cols);
  for (int co = 0; co < cout; ++co) O.row(co).array() += bias.values()[co];

  return make_op<T>({cout, ho, wo}, std::move(out), {x, weight, bias},
                    [=, col = std::move(col)](Node<T>& self) {
    MapC<T> G(self.grad.data(), cout, cols);
    if (auto* pw = grad_target(self, 1))
      MapM<T>(pw->grad.data(), cout, rows).noalias() += G * MapC<T>(col.data(), rows, cols).transpose();
    if (auto* pb = grad_target(self, 2))
      for (int co = 0; co < cout; ++co) pb->grad[co] += G.row(co).sum();
    if (auto* px = grad_target(self, 0)) {
      RowMat<T> dcol = MapC<T>(self.parents[1]->value.data(), cout, rows).transpose() * G;
      for (int ci = 0; ci < cin; ++ci)
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const T* src = dcol.data() + static_cast<std::size_t>((ci * k + ky) * k + kx) * cols;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= h) continue;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride - padding + kx;
                if (ix >= 0 && ix < w) px->grad[(ci * h + iy) * w + ix] += src[oy * wo + ox];
              }
            }
          }
    }
  });
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  require_3d(x, "instance_norm");
  const int c = x.dim(0);
  const int hw = x.dim(1) * x.dim(2);
  require(static_cast<int>(gain.numel()) == c && static_cast<int>(bias.numel()) == c,
          "instance_norm gain/bias width");
  Buffer<T> out(x.numel()), xhat(x.numel()), inv_std(static_cast<std::size_t>(c));
  const T* xv = x.values().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* row = xv + static_cast<std::size_t>(ch) * hw;
    T mean = 0;
    for (int i = 0; i < hw; ++i) mean += row[i];
    mean /= T(hw);
    T var = 0;
    for (int i = 0; i < hw; ++i) var += (row[i] - mean) * (row[i] - mean);
    var /= T(hw);
    inv_std[ch] = T(1) / std::sqrt(var + eps);
    const T g = gain.values()[ch], b = bias.values()[ch];
    for (int i = 0; i < hw; ++i) {
      xhat[ch * hw + i] = (row[i] - mean) * inv_std[ch];
      out[ch * hw + i] = xhat[ch * hw + i] * g + b;
    }
  }
  return make_op<T>(x.shape(), std::move(out), {x, gain, bias},
                    [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& self) {
    const auto& gv = self.parents[1]->value;
    auto* px = grad_target(self, 0);
    auto* pg = grad_target(self, 1);
    auto* pb = grad_target(self, 2);
    for (int ch = 0; ch < c; ++ch) {
      const T* dy = self.grad.data() + static_cast<std::size_t>(ch) * hw;
      const T* xh = xhat.data() + static_cast<std::size_t>(ch) * hw;
      T s1 = 0, s2 = 0;
      for (int i = 0; i < hw; ++i) {
        s1 += dy[i];
        s2 += dy[i] * xh[i];
      }
      if (pg) pg->grad[ch] += s2;
      if (pb) pb->grad[ch] += s1;
      if (px) {
        const T k = gv[ch] * inv_std[ch];
        for (int i = 0; i < hw; ++i)
          px->grad[ch * hw + i] += k * (dy[i] - s1 / T(hw) - xh[i] * s2 / T(hw));
      }
    }
  });
}

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int height, int width) {
  require_3d(x, "upsample_bilinear");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (height < h || width < w)
    throw Error("downsample-unsupported", "target " + std::to_string(height) + "x" +
                                              std::to_string(width) + " smaller than source " +
                                              shape_str(x.shape()));
  struct Tap {
    int i0, i1;
    T l;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> t(static_cast<std::size_t>(out));
    const double s = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      const double src = std::max((o + 0.5) * s - 0.5, 0.0);
      const int i0 = std::min(static_cast<int>(src), in - 1);
      const int i1 = i0 + (i0 < in - 1 ? 1 : 0);
      t[o] = {i0, i1, static_cast<T>(src - i0)};
    }
    return t;
  };
  const auto ty = taps(h, height), tx = taps(w, width);
  Buffer<T> out(static_cast<std::size_t>(c) * height * width);
  const T* xv = x.values().data();
  for (int ch = 0; ch < c; ++ch) {
    const T* src = xv + static_cast<std::size_t>(ch) * h * w;
    T* dst = out.data() + static_cast<std::size_t>(ch) * height * width;
    for (int y = 0; y < height; ++y) {
      const Tap& a = ty[y];
      for (int xx = 0; xx < width; ++xx) {
        const Tap& b = tx[xx];
        const T top = (T(1) - b.l) * src[a.i0 * w + b.i0] + b.l * src[a.i0 * w + b.i1];
        const T bot = (T(1) - b.l) * src[a.i1 * w + b.i0] + b.l * src[a.i1 * w + b.i1];
        dst[y * width + xx] = (T(1) - a.l) * top + a.l * bot;
      }
    }
  }
  return make_op<T>({c, height, width}, std::move(out), {x}, [=](Node<T>& self) {
    auto* p = grad_target(self, 0);
    if (!p) return;
    for (int ch = 0; ch < c; ++ch) {
      T* dsrc = p->grad.data() + static_cast<std::size_t>(ch) * h * w;
      const T* g = self.grad.data() + static_cast<std::size_t>(ch) * height * width;
      for (int y = 0; y < height; ++y) {
        const Tap& a = ty[y];
        for (int xx = 0; xx < width; ++xx) {
          const Tap& b = tx[xx];
          const T gv = g[y * width + xx];
          dsrc[a.i0 * w + b.i0] += gv * (T(1) - a.l) * (T(1) - b.l);
          dsrc[a.i0 * w + b.i1] += gv * (T(1) - a.l) * b.l;
          dsrc[a.i1 * w + b.i0] += gv * a.l * (T(1) - b.l);
          dsrc[a.i1 * w + b.i1] += gv * a.l * b.l;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& fm) {
  require_3d(fm, "global_avg_pool");
  const int c = fm.dim(0);
  return reshape(mean_cols(reshape(fm, {c, fm.dim(1) * fm.dim(2)})), {1, c});
}

template <typename T>
Tensor<T> weighted_pool(const Tensor<T>& fm, const Tensor<T>& mask) {
  require_3d(fm, "weighted_pool");
  const int c = fm.dim(0);
  const int hw = fm.dim(1) * fm.dim(2);
  require(static_cast<int>(mask.numel()) == hw,
          "mask " + shape_str(mask.shape()) + " vs features " + shape_str(fm.shape()));
  const T* f = fm.values().data();
  const T* m = mask.values().data();
  T total = 0;
  for (int i = 0; i < hw; ++i) total += m[i];
  if (!(total > T(0))) throw Error("empty-mask", "mask weights sum to zero");
  Buffer<T> out(static_cast<std::size_t>(c), T(0));
  for (int ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (int i = 0; i < hw; ++i) acc += f[ch * hw + i] * m[i];
    out[ch] = acc / total;
  }
  return make_op<T>({1, c}, std::move(out), {fm, mask}, [=](Node<T>& self) {
    const auto& fv = self.parents[0]->value;
    const auto& mv = self.parents[1]->value;
    if (auto* pf = grad_target(self, 0))
      for (int ch = 0; ch < c; ++ch) {
        const T g = self.grad[ch] / total;
        for (int i = 0; i < hw; ++i) pf->grad[ch * hw + i] += g * mv[i];
      }
    if (auto* pm = grad_target(self, 1))
      for (int ch = 0; ch < c; ++ch) {
        const T g = self.grad[ch] / total;
        const T mean = self.value[ch];
        for (int i = 0; i < hw; ++i) pm->grad[i] += g * (fv[ch * hw + i] - mean);
      }
  });
}

template <typename T>
Tensor<T> label_pool(const Tensor<T>& fm, std::span<const int> labels, int n_labels) {
  require_3d(fm, "label_pool");
  const int c = fm.dim(0);
  const int hw = fm.dim(1) * fm.dim(2);
  require(static_cast<int>(labels.size()) == hw, "label map size vs features");
  require(n_labels >= 1, "label_pool needs at least one label");
  std::vector<int> count(static_cast<std::size_t>(n_labels), 0);
  for (int l : labels) {
    require(l < n_labels, "label out of range");
    if (l >= 0) ++count[l];
  }
  for (int n = 0; n < n_labels; ++n)
    if (count[n] == 0) throw Error("empty-mask", "region " + std::to_string(n) + " is empty");
  Buffer<T> out(static_cast<std::size_t>(n_labels) * c, T(0));
  const T* f = fm.values().data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i)
      if (labels[i] >= 0) out[labels[i] * c + ch] += f[ch * hw + i];
  for (int n = 0; n < n_labels; ++n)
    for (int ch = 0; ch < c; ++ch) out[n * c + ch] /= T(count[n]);
  std::vector<int> lab(labels.begin(), labels.end());
  return make_op<T>({n_labels, c}, std::move(out), {fm},
                    [=, lab = std::move(lab), count = std::move(count)](Node<T>& self) {
    if (auto* p = grad_target(self, 0))
      for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < hw; ++i)
          if (lab[i] >= 0) p->grad[ch * hw + i] += self.grad[lab[i] * c + ch] / T(count[lab[i]]);
  });
}

template <typename T>
Tensor<T> neg_cosine(const Tensor<T>& fm, const Tensor<T>& p, T alpha, T eps) {
  require_3d(fm, "neg_cosine");
  const int c = fm.dim(0), h = fm.dim(1), w = fm.dim(2);
  const int hw = h * w;
  require(static_cast<int>(p.numel()) == c,
          "prototype " + shape_str(p.shape()) + " vs features " + shape_str(fm.shape()));
  const T* f = fm.values().data();
  const T* pv = p.values().data();
  T pn2 = 0;
  for (int ch = 0; ch < c; ++ch) pn2 += pv[ch] * pv[ch];
  const T pn = std::sqrt(pn2);
  if (!(pn > T(0))) throw Error("degenerate-prototype", "prototype has zero norm");
  Buffer<T> dot(static_cast<std::size_t>(hw), T(0)), fnorm(static_cast<std::size_t>(hw), T(0));
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i) {
      dot[i] += f[ch * hw + i] * pv[ch];
      fnorm[i] += f[ch * hw + i] * f[ch * hw + i];
    }
  Buffer<T> out(static_cast<std::size_t>(hw));
  for (int i = 0; i < hw; ++i) {
    fnorm[i] = std::sqrt(fnorm[i]);
    out[i] = -alpha * dot[i] / (std::max(fnorm[i], eps) * pn);
  }
  return make_op<T>({h, w}, std::move(out), {fm, p},
                    [=, dot = std::move(dot), fnorm = std::move(fnorm)](Node<T>& self) {
    const auto& fv = self.parents[0]->value;
    const auto& pvv = self.parents[1]->value;
    auto* pf = grad_target(self, 0);
    auto* pp = grad_target(self, 1);
    for (int i = 0; i < hw; ++i) {
      const T g = self.grad[i];
      if (g == T(0)) continue;
      const bool guarded = fnorm[i] <= eps;
      const T fn = guarded ? eps : fnorm[i];
      const T base = -alpha * g / (fn * pn);
      if (pf) {
        const T radial = guarded ? T(0) : dot[i] / (fn * fn);
        for (int ch = 0; ch < c; ++ch)
          pf->grad[ch * hw + i] += base * (pvv[ch] - radial * fv[ch * hw + i]);
      }
      if (pp) {
        const T radial = dot[i] / pn2;
        for (int ch = 0; ch < c; ++ch)
          pp->grad[ch] += base * (fv[ch * hw + i] - radial * pvv[ch]);
      }
    }
  });
}

template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& pred, std::span<const T> target, T eps) {
  require(pred.numel() == target.size(), "prediction and target sizes differ");
  const std::size_t n = pred.numel();
  const T* pv = pred.values().data();
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T p = std::clamp(pv[i], eps, T(1) - eps);
    const T y = target[i];
    acc += y * std::log(p) + (T(1) - y) * std::log(T(1) - p);
  }
  Buffer<T> tgt(target.begin(), target.end());
  return make_op<T>({1}, {-acc / static_cast<T>(n)}, {pred},
                    [=, tgt = std::move(tgt)](Node<T>& self) {
    auto* p = grad_target(self, 0);
    if (!p) return;
    const T g = self.grad[0] / static_cast<T>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const T x = p->value[i];
      if (x < eps || x > T(1) - eps) continue;
      p->grad[i] += -g * (tgt[i] / x - (T(1) - tgt[i]) / (T(1) - x));
    }
  });
}

// ---- explicit instantiation ------------------------------------------------

#define PAMI_INSTANTIATE(T)                                                                     \
  template class Tensor<T>;                                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                    \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> add_const(const Tensor<T>&, T);                                            \
  template Tensor<T> add_scalar(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                 \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> add_rowvec(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> mul_rowvec(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> mul_colvec(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> mean_rows(const Tensor<T>&);                                               \
  template Tensor<T> max_rows(const Tensor<T>&);                                                \
  template Tensor<T> mean_cols(const Tensor<T>&);                                               \
  template Tensor<T> max_cols(const Tensor<T>&);                                                \
  template Tensor<T> sum_all(const Tensor<T>&);                                                 \
  template Tensor<T> mean_all(const Tensor<T>&);                                                \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                \
  template Tensor<T> slice_cols(const Tensor<T>&, int, int);                                    \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                            \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);    \
  template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);    \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, int, int);                             \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                         \
  template Tensor<T> weighted_pool(const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> label_pool(const Tensor<T>&, std::span<const int>, int);                   \
  template Tensor<T> neg_cosine(const Tensor<T>&, const Tensor<T>&, T, T);                      \
  template Tensor<T> binary_cross_entropy(const Tensor<T>&, std::span<const T>, T);

PAMI_INSTANTIATE(float)
PAMI_INSTANTIATE(double)

}  // namespace pami::ad

#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors. Every op records a backward closure when any input requires a
// gradient; Tensor::backward() walks the recorded graph in reverse
// topological order. Instantiated for float (training) and double
// (gradient checks).

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace pami::ad {

using Shape = std::vector<int>;

// Fixed 64-byte alignment for tensor storage. Vectorized reductions peel a
// different number of leading elements depending on the buffer address, so
// plain heap alignment would make sums differ between otherwise identical runs.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}
  static Tensor from_buffer(Shape shape, Buffer<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value) { return full({1}, value); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  // Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<T> values_mut() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_mut() {
    node_->ensure_grad();
    return node_->grad;
  }

  T item() const;
  T at(int i) const { return node_->value[static_cast<std::size_t>(i)]; }
  T at(int r, int c) const;

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad();
  // Seeds d(this)/d(this) = 1 everywhere and accumulates into every leaf
  // that requires a gradient.
  void backward() const;
  // Same values, no history.
  Tensor detached() const;
  // Deep copy of a leaf, preserving requires_grad.
  Tensor clone_leaf() const;

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// ---- linear algebra --------------------------------------------------------
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_a = false,
                 bool transpose_b = false);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// x[N×in]·w[in×out] + b[1×out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

// ---- elementwise -----------------------------------------------------------
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_const(const Tensor<T>& x, T offset);
// x + s with s a one-element tensor.
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, const Tensor<T>& s);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// ---- 2D broadcasting -------------------------------------------------------
// x[N×C] + v[1×C] on every row.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v);
// x[N×C] ⊙ v[1×C] on every row.
template <typename T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& v);
// x[N×C] ⊙ v[N×1] on every column.
template <typename T>
Tensor<T> mul_colvec(const Tensor<T>& x, const Tensor<T>& v);

// ---- reductions (2D) -------------------------------------------------------
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& x);  // [N×C] -> [1×C]
template <typename T>
Tensor<T> max_rows(const Tensor<T>& x);  // [N×C] -> [1×C]
template <typename T>
Tensor<T> mean_cols(const Tensor<T>& x);  // [N×C] -> [N×1]
template <typename T>
Tensor<T> max_cols(const Tensor<T>& x);  // [N×C] -> [N×1]
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& x);

// ---- structure -------------------------------------------------------------
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, int start, int count);

// ---- normalization / attention helpers -------------------------------------
// Softmax along the last axis of a 2D tensor. -inf entries get weight 0.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

// ---- feature maps ([C×H×W]) ------------------------------------------------
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding);
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);
// Bilinear resampling with half-pixel centers (corner alignment off).
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int height, int width);
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& fm);  // [C×H×W] -> [1×C]
// Weighted per-channel mean of fm[C×H×W] under weights mask[H×W] -> [1×C].
template <typename T>
Tensor<T> weighted_pool(const Tensor<T>& fm, const Tensor<T>& mask);
// Per-label channel means; labels hold a region index per pixel or -1.
template <typename T>
Tensor<T> label_pool(const Tensor<T>& fm, std::span<const int> labels, int n_labels);
// -alpha·cos(fm[:,i], p) per pixel -> [H×W]. Feature norms are guarded by eps.
template <typename T>
Tensor<T> neg_cosine(const Tensor<T>& fm, const Tensor<T>& p, T alpha, T eps);
// Mean binary cross-entropy; pred clamped to [eps, 1-eps].
template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& pred, std::span<const T> target, T eps);

}  // namespace pami::ad

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmfuse/util.hpp"

namespace mmfuse::numcore {

class GradTape;

// Dense 2-D double tensor. All sequence/feature data in the project is a
// matrix (scalars are 1x1), which keeps every gradient rule auditable.
struct TensorData {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;
  std::unique_ptr<std::vector<double>> grad;  // allocated on first accumulation
  bool requires_grad = false;
  GradTape* tape = nullptr;  // tape the producing op was recorded on
  int node = -1;             // index of the producing op in that tape
};

class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData>()) {}
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

  static Tensor zeros(int rows, int cols, bool requires_grad = false);
  static Tensor full(int rows, int cols, double value,
                     bool requires_grad = false);
  static Tensor from(std::vector<double> values, int rows, int cols,
                     bool requires_grad = false);
  static Tensor from_rows(const std::vector<std::vector<double>>& rows,
                          bool requires_grad = false);
  static Tensor scalar(double v);
  // i.i.d. normal entries scaled by `scale`
  static Tensor randn(int rows, int cols, Rng& rng, double scale = 1.0,
                      bool requires_grad = false);

  int rows() const { return d_->rows; }
  int cols() const { return d_->cols; }
  int numel() const { return d_->rows * d_->cols; }
  bool is_scalar() const { return numel() == 1; }

  double& at(int r, int c) { return d_->data[static_cast<size_t>(r) * d_->cols + c]; }
  double at(int r, int c) const { return d_->data[static_cast<size_t>(r) * d_->cols + c]; }
  double value() const;

  std::vector<double>& data() { return d_->data; }
  const std::vector<double>& data() const { return d_->data; }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }

  // nullptr until a backward pass has accumulated into this tensor
  const std::vector<double>* grad() const { return d_->grad.get(); }
  std::vector<double>& ensure_grad();
  void zero_grad();

  const std::shared_ptr<TensorData>& impl() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

// Records one backward closure per forward op, in creation order; creation
// order is a topological order of the graph, so the reverse sweep visits
// each node exactly once.
class GradTape {
 public:
  void record(std::function<void()> backward_fn,
              const std::shared_ptr<TensorData>& out);
  void backward_from(int node_index);
  void clear();
  size_t size() const { return nodes_.size(); }

  static GradTape* active();

 private:
  friend struct TapeScope;
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<TensorData>> outputs_;
};

// RAII activation of a tape for the current thread.
struct TapeScope {
  explicit TapeScope(GradTape& t);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  GradTape* prev_;
};

// ----- differentiable ops -----

Tensor add(const Tensor& a, const Tensor& b);            // same shape
Tensor mul(const Tensor& a, const Tensor& b);            // elementwise
Tensor scale(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& x, int axis);               // axis 0 or 1
Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& labels,
                            const std::vector<bool>& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice(const Tensor& x, int r0, int r1, int c0, int c1);
Tensor row_scale(const Tensor& x, const Tensor& col);     // col: n x 1
Tensor add_row_vector(const Tensor& x, const Tensor& b);  // b: 1 x cols
Tensor sum(const Tensor& x);
Tensor transpose(const Tensor& x);
// Multi-head causal self-attention over row-major [seq x d] q/k/v.
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int n_heads);

// Seeds d(loss)/d(loss) = 1 and runs the reverse sweep of the tape that
// produced `loss`. Repeated calls accumulate.
void backward(const Tensor& loss);

}  // namespace mmfuse::numcore

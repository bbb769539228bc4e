// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/numcore.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace mmfuse::numcore {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

static CMap cmap(const TensorData& t) { return CMap(t.data.data(), t.rows, t.cols); }
static MMap gmap(TensorData& t) { return MMap(t.grad->data(), t.rows, t.cols); }

static std::string shape_str(const TensorData& t) {
  return "[" + std::to_string(t.rows) + "x" + std::to_string(t.cols) + "]";
}

static std::string shape_str(const Tensor& t) { return shape_str(*t.impl()); }

// ----- Tensor -----

Tensor Tensor::zeros(int rows, int cols, bool requires_grad) {
  if (rows < 0 || cols < 0) throw ShapeError("negative dimension");
  auto d = std::make_shared<TensorData>();
  d->rows = rows;
  d->cols = cols;
  d->data.assign(static_cast<size_t>(rows) * cols, 0.0);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::full(int rows, int cols, double value, bool requires_grad) {
  Tensor t = zeros(rows, cols, requires_grad);
  std::fill(t.data().begin(), t.data().end(), value);
  return t;
}

Tensor Tensor::from(std::vector<double> values, int rows, int cols,
                    bool requires_grad) {
  if (values.size() != static_cast<size_t>(rows) * cols) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape [" + std::to_string(rows) + "x" +
                     std::to_string(cols) + "]");
  }
  auto d = std::make_shared<TensorData>();
  d->rows = rows;
  d->cols = cols;
  d->data = std::move(values);
  d->requires_grad = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows,
                         bool requires_grad) {
  int r = static_cast<int>(rows.size());
  int c = r > 0 ? static_cast<int>(rows[0].size()) : 0;
  std::vector<double> flat;
  flat.reserve(static_cast<size_t>(r) * c);
  for (const auto& row : rows) {
    if (static_cast<int>(row.size()) != c) throw ShapeError("ragged rows");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  return from(std::move(flat), r, c, requires_grad);
}

Tensor Tensor::scalar(double v) { return from({v}, 1, 1); }

Tensor Tensor::randn(int rows, int cols, Rng& rng, double scale,
                     bool requires_grad) {
  Tensor t = zeros(rows, cols, requires_grad);
  for (auto& v : t.data()) v = rng.normal() * scale;
  return t;
}

double Tensor::value() const {
  if (!is_scalar()) throw ShapeError("value() on non-scalar " + shape_str(*this));
  return d_->data[0];
}

std::vector<double>& Tensor::ensure_grad() {
  if (!d_->grad) {
    d_->grad = std::make_unique<std::vector<double>>(d_->data.size(), 0.0);
  }
  return *d_->grad;
}

void Tensor::zero_grad() {
  if (d_->grad) std::fill(d_->grad->begin(), d_->grad->end(), 0.0);
}

// ----- tape -----

static thread_local GradTape* g_active_tape = nullptr;

GradTape* GradTape::active() { return g_active_tape; }

TapeScope::TapeScope(GradTape& t) : prev_(g_active_tape) { g_active_tape = &t; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

void GradTape::record(std::function<void()> backward_fn,
                      const std::shared_ptr<TensorData>& out) {
  out->tape = this;
  out->node = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(backward_fn));
  outputs_.push_back(out);
}

void GradTape::backward_from(int node_index) {
  // Node-output grads are scratch per sweep; only leaves accumulate across
  // repeated backward calls.
  for (int i = node_index; i >= 0; --i) {
    auto& g = outputs_[i]->grad;
    if (g) std::fill(g->begin(), g->end(), 0.0);
  }
  auto& seed = outputs_[node_index]->grad;
  if (!seed) {
    seed = std::make_unique<std::vector<double>>(outputs_[node_index]->data.size(), 0.0);
  }
  (*seed)[0] = 1.0;
  for (int i = node_index; i >= 0; --i) nodes_[i]();
}

void GradTape::clear() {
  nodes_.clear();
  outputs_.clear();
}

void backward(const Tensor& loss) {
  if (!loss.is_scalar()) {
    throw ShapeError("backward expects a scalar loss, got " + shape_str(loss));
  }
  TensorData* d = loss.impl().get();
  if (d->tape == nullptr) {
    throw NumericError("backward: loss was not produced on an active tape");
  }
  d->tape->backward_from(d->node);
}

// ----- op plumbing -----

// Accumulate `delta` into t's grad unless t is frozen.
static void accum(const std::shared_ptr<TensorData>& t, const EMat& delta) {
  if (!t->requires_grad) return;
  if (!t->grad) t->grad = std::make_unique<std::vector<double>>(t->data.size(), 0.0);
  gmap(*t) += delta;
}

static bool out_requires(std::initializer_list<const Tensor*> ins) {
  for (auto* t : ins) {
    if (t->requires_grad()) return true;
  }
  return false;
}

static Tensor make_out(int rows, int cols, bool requires_grad) {
  Tensor t = Tensor::zeros(rows, cols, requires_grad);
  return t;
}

// Record a node if a tape is active and the output participates in grads.
static void maybe_record(const Tensor& out, std::function<void()> fn) {
  GradTape* tape = GradTape::active();
  if (tape && out.requires_grad()) tape->record(std::move(fn), out.impl());
}

// Returns the output grad map, or nullptr if no grad ever reached it.
static const std::vector<double>* out_grad(const std::shared_ptr<TensorData>& o) {
  return o->grad.get();
}

// ----- ops -----

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("add shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
  }
  Tensor out = make_out(a.rows(), a.cols(), out_requires({&a, &b}));
  MMap(out.data().data(), out.rows(), out.cols()) = cmap(*a.impl()) + cmap(*b.impl());
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  maybe_record(out, [ai, bi, oi] {
    const auto* g = out_grad(oi);
    if (!g) return;
    CMap go(g->data(), oi->rows, oi->cols);
    accum(ai, go);
    accum(bi, go);
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("mul shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
  }
  Tensor out = make_out(a.rows(), a.cols(), out_requires({&a, &b}));
  MMap(out.data().data(), out.rows(), out.cols()) =
      cmap(*a.impl()).cwiseProduct(cmap(*b.impl()));
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  maybe_record(out, [ai, bi, oi] {
    const auto* g = out_grad(oi);
    if (!g) return;
    CMap go(g->data(), oi->rows, oi->cols);
    accum(ai, go.cwiseProduct(cmap(*bi)));
    accum(bi, go.cwiseProduct(cmap(*ai)));
  });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = make_out(a.rows(), a.cols(), a.requires_grad());
  MMap(out.data().data(), out.rows(), out.cols()) = cmap(*a.impl()) * c;
  auto ai = a.impl(), oi = out.impl();
  maybe_record(out, [ai, oi, c] {
    const auto* g = out_grad(oi);
    if (!g) return;
    CMap go(g->data(), oi->rows, oi->cols);
    accum(ai, go * c);
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul inner dimension mismatch: " + shape_str(a) +
                     " x " + shape_str(b));
  }
  Tensor out = make_out(a.rows(), b.cols(), out_requires({&a, &b}));
  MMap(out.data().data(), out.rows(), out.cols()) = cmap(*a.impl()) * cmap(*b.impl());
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  maybe_record(out, [ai, bi, oi] {
    const auto* g = out_grad(oi);
    if (!g) return;
    CMap go(g->data(), oi->rows, oi->cols);
    if (ai->requires_grad) accum(ai, go * cmap(*bi).transpose());
    if (bi->requires_grad) accum(bi, cmap(*ai).transpose() * go);
  });
  return out;
}

static void check_finite(const Tensor& x, const char* op) {
  for (double v : x.data()) {
    if (std::isnan(v)) throw NumericError(std::string(op) + ": NaN input");
  }
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis != 0 && axis != 1) throw ShapeError("softmax axis must be 0 or 1");
  check_finite(x, "softmax");
  Tensor out = make_out(x.rows(), x.cols(), x.requires_grad());
  auto apply_line = [](const double* in, double* o, int n, int stride) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) mx = std::max(mx, in[i * stride]);
    double z = 0.0;
    for (int i = 0; i < n; ++i) {
      double e = std::exp(in[i * stride] - mx);
      o[i * stride] = e;
      z += e;
    }
    for (int i = 0; i < n; ++i) o[i * stride] /= z;
  };
  const auto& xd = x.data();
  auto& od = out.data();
  if (axis == 1) {
    for (int r = 0; r < x.rows(); ++r) {
      apply_line(xd.data() + static_cast<size_t>(r) * x.cols(),
                 od.data() + static_cast<size_t>(r) * x.cols(), x.cols(), 1);
    }
  } else {
    for (int c = 0; c < x.cols(); ++c) {
      apply_line(xd.data() + c, od.data() + c, x.rows(), x.cols());
    }
  }
  auto xi = x.impl(), oi = out.impl();
  maybe_record(out, [xi, oi, axis] {
    const auto* g = out_grad(oi);
    if (!g) return;
    // dx = s .* (dy - sum(dy .* s) along axis)
    int rows = oi->rows, cols = oi->cols;
    auto line = [&](int n, int stride, const double* s, const double* dy,
                    double* dx) {
      double dot = 0.0;
      for (int i = 0; i < n; ++i) dot += dy[i * stride] * s[i * stride];
      for (int i = 0; i < n; ++i) {
        dx[i * stride] += s[i * stride] * (dy[i * stride] - dot);
      }
    };
    if (!xi->requires_grad) return;
    if (!xi->grad) xi->grad = std::make_unique<std::vector<double>>(xi->data.size(), 0.0);
    if (axis == 1) {
      for (int r = 0; r < rows; ++r) {
        size_t off = static_cast<size_t>(r) * cols;
        line(cols, 1, oi->data.data() + off, g->data() + off, xi->grad->data() + off);
      }
    } else {
      for (int c = 0; c < cols; ++c) {
        line(rows, cols, oi->data.data() + c, g->data() + c, xi->grad->data() + c);
      }
    }
  });
  return out;
}

Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& labels,
                            const std::vector<bool>& mask) {
  const int T = logits.rows();
  const int V = logits.cols();
  if (static_cast<int>(labels.size()) != T || static_cast<int>(mask.size()) != T) {
    throw ShapeError("cross_entropy_masked: labels/mask length " +
                     std::to_string(labels.size()) + "/" +
                     std::to_string(mask.size()) + " vs T=" + std::to_string(T));
  }
  int count = 0;
  for (int t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    ++count;
    if (labels[t] < 0 || labels[t] >= V) {
      throw ShapeError("cross_entropy_masked: label " + std::to_string(labels[t]) +
                       " out of range [0," + std::to_string(V) + ") at t=" +
                       std::to_string(t));
    }
  }
  if (count == 0) {
    throw NumericError("cross_entropy_masked: empty target (all positions masked out)");
  }
  check_finite(logits, "cross_entropy_masked");

  // per masked row: logsumexp(row) - row[label]
  const auto& xd = logits.data();
  double total = 0.0;
  std::vector<double> lse(T, 0.0);
  for (int t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    const double* row = xd.data() + static_cast<size_t>(t) * V;
    double mx = row[0];
    for (int v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    double z = 0.0;
    for (int v = 0; v < V; ++v) z += std::exp(row[v] - mx);
    lse[t] = mx + std::log(z);
    total += lse[t] - row[labels[t]];
  }
  Tensor out = Tensor::from({total / count}, 1, 1, logits.requires_grad());
  auto xi = logits.impl(), oi = out.impl();
  maybe_record(out, [xi, oi, labels, mask, lse, count] {
    const auto* g = out_grad(oi);
    if (!g || !xi->requires_grad) return;
    double go = (*g)[0];
    if (!xi->grad) xi->grad = std::make_unique<std::vector<double>>(xi->data.size(), 0.0);
    const int T = xi->rows, V = xi->cols;
    for (int t = 0; t < T; ++t) {
      if (!mask[t]) continue;
      const double* row = xi->data.data() + static_cast<size_t>(t) * V;
      double* grow = xi->grad->data() + static_cast<size_t>(t) * V;
      double s = go / count;
      for (int v = 0; v < V; ++v) {
        double p = std::exp(row[v] - lse[t]);
        grow[v] += s * (p - (v == labels[t] ? 1.0 : 0.0));
      }
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const int n = x.rows(), d = x.cols();
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw ShapeError("layer_norm: gain/bias must be [1x" + std::to_string(d) +
                     "], got " + shape_str(gain) + " and " + shape_str(bias));
  }
  constexpr double kEps = 1e-5;
  Tensor out = make_out(n, d, out_requires({&x, &gain, &bias}));
  std::vector<double> mean(n), inv_std(n);
  for (int r = 0; r < n; ++r) {
    const double* row = x.data().data() + static_cast<size_t>(r) * d;
    double m = 0.0;
    for (int c = 0; c < d; ++c) m += row[c];
    m /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) var += (row[c] - m) * (row[c] - m);
    var /= d;
    double is = 1.0 / std::sqrt(var + kEps);
    mean[r] = m;
    inv_std[r] = is;
    double* orow = out.data().data() + static_cast<size_t>(r) * d;
    for (int c = 0; c < d; ++c) {
      orow[c] = (row[c] - m) * is * gain.data()[c] + bias.data()[c];
    }
  }
  auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
  maybe_record(out, [xi, gi, bi, oi, mean, inv_std] {
    const auto* g = out_grad(oi);
    if (!g) return;
    const int n = xi->rows, d = xi->cols;
    std::vector<double> dgain(d, 0.0), dbias(d, 0.0);
    for (int r = 0; r < n; ++r) {
      const double* xrow = xi->data.data() + static_cast<size_t>(r) * d;
      const double* grow = g->data() + static_cast<size_t>(r) * d;
      double m = mean[r], is = inv_std[r];
      // accumulate parameter grads
      for (int c = 0; c < d; ++c) {
        double xhat = (xrow[c] - m) * is;
        dgain[c] += grow[c] * xhat;
        dbias[c] += grow[c];
      }
      if (xi->requires_grad) {
        // dxhat = dy * gain; dx = is*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
        double s1 = 0.0, s2 = 0.0;
        for (int c = 0; c < d; ++c) {
          double dxhat = grow[c] * gi->data[c];
          double xhat = (xrow[c] - m) * is;
          s1 += dxhat;
          s2 += dxhat * xhat;
        }
        s1 /= d;
        s2 /= d;
        if (!xi->grad) xi->grad = std::make_unique<std::vector<double>>(xi->data.size(), 0.0);
        double* dxr = xi->grad->data() + static_cast<size_t>(r) * d;
        for (int c = 0; c < d; ++c) {
          double dxhat = grow[c] * gi->data[c];
          double xhat = (xrow[c] - m) * is;
          dxr[c] += is * (dxhat - s1 - xhat * s2);
        }
      }
    }
    if (gi->requires_grad) {
      if (!gi->grad) gi->grad = std::make_unique<std::vector<double>>(gi->data.size(), 0.0);
      for (int c = 0; c < d; ++c) (*gi->grad)[c] += dgain[c];
    }
    if (bi->requires_grad) {
      if (!bi->grad) bi->grad = std::make_unique<std::vector<double>>(bi->data.size(), 0.0);
      for (int c = 0; c < d; ++c) (*bi->grad)[c] += dbias[c];
    }
  });
  return out;
}

Tensor gelu(const Tensor& x) {
  Tensor out = make_out(x.rows(), x.cols(), x.requires_grad());
  const auto& xd = x.data();
  auto& od = out.data();
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < xd.size(); ++i) {
    od[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * kInvSqrt2));
  }
  auto xi = x.impl(), oi = out.impl();
  maybe_record(out, [xi, oi] {
    const auto* g = out_grad(oi);
    if (!g || !xi->requires_grad) return;
    if (!xi->grad) xi->grad = std::make_unique<std::vector<double>>(xi->data.size(), 0.0);
    constexpr double kInvSqrt2 = 0.7071067811865475244;
    constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    for (size_t i = 0; i < xi->data.size(); ++i) {
      double v = xi->data[i];
      double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      (*xi->grad)[i] += (*g)[i] * (cdf + v * pdf);
    }
  });
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = make_out(x.rows(), x.cols(), x.requires_grad());
  const auto& xd = x.data();
  auto& od = out.data();
  for (size_t i = 0; i < xd.size(); ++i) od[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  auto xi = x.impl(), oi = out.impl();
  maybe_record(out, [xi, oi] {
    const auto* g = out_grad(oi);
    if (!g || !xi->requires_grad) return;
    if (!xi->grad) xi->grad = std::make_unique<std::vector<double>>(xi->data.size(), 0.0);
    for (size_t i = 0; i < xi->data.size(); ++i) {
      if (xi->data[i] > 0.0) (*xi->grad)[i] += (*g)[i];
    }
  });
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  const int V = table.rows(), D = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= V) {
      throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                       " out of range [0," + std::to_string(V) + ")");
    }
  }
  const int L = static_cast<int>(ids.size());
  Tensor out = make_out(L, D, table.requires_grad());
  for (int i = 0; i < L; ++i) {
    const double* src = table.data().data() + static_cast<size_t>(ids[i]) * D;
    std::copy(src, src + D, out.data().data() + static_cast<size_t>(i) * D);
  }
  auto ti = table.impl(), oi = out.impl();
  maybe_record(out, [ti, oi, ids] {
    const auto* g = out_grad(oi);
    if (!g || !ti->requires_grad) return;
    if (!ti->grad) ti->grad = std::make_unique<std::vector<double>>(ti->data.size(), 0.0);
    const int D = ti->cols;
    for (size_t i = 0; i < ids.size(); ++i) {
      const double* grow = g->data() + i * D;
      double* trow = ti->grad->data() + static_cast<size_t>(ids[i]) * D;
      for (int c = 0; c < D; ++c) trow[c] += grow[c];
    }
  });
  return out;
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.numel() == 0) return b;
  if (b.numel() == 0) return a;
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows width mismatch: " + shape_str(a) + " vs " +
                     shape_str(b));
  }
  Tensor out = make_out(a.rows() + b.rows(), a.cols(), out_requires({&a, &b}));
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.numel());
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  maybe_record(out, [ai, bi, oi] {
    const auto* g = out_grad(oi);
    if (!g) return;
    size_t na = ai->data.size();
    if (ai->requires_grad) {
      if (!ai->grad) ai->grad = std::make_unique<std::vector<double>>(na, 0.0);
      for (size_t i = 0; i < na; ++i) (*ai->grad)[i] += (*g)[i];
    }
    if (bi->requires_grad) {
      if (!bi->grad) bi->grad = std::make_unique<std::vector<double>>(bi->data.size(), 0.0);
      for (size_t i = 0; i < bi->data.size(); ++i) (*bi->grad)[i] += (*g)[na + i];
    }
  });
  return out;
}

Tensor slice(const Tensor& x, int r0, int r1, int c0, int c1) {
  if (r0 < 0 || r1 > x.rows() || c0 < 0 || c1 > x.cols() || r0 > r1 || c0 > c1) {
    throw ShapeError("slice bounds [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ")x[" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") invalid for " + shape_str(x));
  }
  const int R = r1 - r0, C = c1 - c0;
  Tensor out = make_out(R, C, x.requires_grad());
  for (int r = 0; r < R; ++r) {
    const double* src = x.data().data() + static_cast<size_t>(r0 + r) * x.cols() + c0;
    std::copy(src, src + C, out.data().data() + static_cast<size_t>(r) * C);
  }
  auto xi = x.impl(), oi = out.impl();
  maybe_record(out, [xi, oi, r0, c0] {
    const auto* g = out_grad(oi);
    if (!g || !xi->requires_grad) return;
    if (!xi->grad) xi->grad = std::make_unique<std::vector<double>>(xi->data.size(), 0.0);
    const int R = oi->rows, C = oi->cols;
    for (int r = 0; r < R; ++r) {
      const double* grow = g->data() + static_cast<size_t>(r) * C;
      double* dst = xi->grad->data() + static_cast<size_t>(r0 + r) * xi->cols + c0;
      for (int c = 0; c < C; ++c) dst[c] += grow[c];
    }
  });
  return out;
}

Tensor row_scale(const Tensor& x, const Tensor& col) {
  if (col.rows() != x.rows() || col.cols() != 1) {
    throw ShapeError("row_scale: scale must be [" + std::to_string(x.rows()) +
                     "x1], got " + shape_str(col));
  }
  Tensor out = make_out(x.rows(), x.cols(), out_requires({&x, &col}));
  for (int r = 0; r < x.rows(); ++r) {
    double s = col.data()[r];
    const double* src = x.data().data() + static_cast<size_t>(r) * x.cols();
    double* dst = out.data().data() + static_cast<size_t>(r) * x.cols();
    for (int c = 0; c < x.cols(); ++c) dst[c] = src[c] * s;
  }
  auto xi = x.impl(), si = col.impl(), oi = out.impl();
  maybe_record(out, [xi, si, oi] {
    const auto* g = out_grad(oi);
    if (!g) return;
    const int R = xi->rows, C = xi->cols;
    if (xi->requires_grad) {
      if (!xi->grad) xi->grad = std::make_unique<std::vector<double>>(xi->data.size(), 0.0);
      for (int r = 0; r < R; ++r) {
        double s = si->data[r];
        const double* grow = g->data() + static_cast<size_t>(r) * C;
        double* dst = xi->grad->data() + static_cast<size_t>(r) * C;
        for (int c = 0; c < C; ++c) dst[c] += grow[c] * s;
      }
    }
    if (si->requires_grad) {
      if (!si->grad) si->grad = std::make_unique<std::vector<double>>(si->data.size(), 0.0);
      for (int r = 0; r < R; ++r) {
        const double* grow = g->data() + static_cast<size_t>(r) * C;
        const double* xrow = xi->data.data() + static_cast<size_t>(r) * C;
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += grow[c] * xrow[c];
        (*si->grad)[r] += dot;
      }
    }
  });
  return out;
}

Tensor add_row_vector(const Tensor& x, const Tensor& b) {
  if (b.rows() != 1 || b.cols() != x.cols()) {
    throw ShapeError("add_row_vector: bias must be [1x" + std::to_string(x.cols()) +
                     "], got " + shape_str(b));
  }
  Tensor out = make_out(x.rows(), x.cols(), out_requires({&x, &b}));
  for (int r = 0; r < x.rows(); ++r) {
    const double* src = x.data().data() + static_cast<size_t>(r) * x.cols();
    double* dst = out.data().data() + static_cast<size_t>(r) * x.cols();
    for (int c = 0; c < x.cols(); ++c) dst[c] = src[c] + b.data()[c];
  }
  auto xi = x.impl(), bi = b.impl(), oi = out.impl();
  maybe_record(out, [xi, bi, oi] {
    const auto* g = out_grad(oi);
    if (!g) return;
    const int R = xi->rows, C = xi->cols;
    if (xi->requires_grad) {
      if (!xi->grad) xi->grad = std::make_unique<std::vector<double>>(xi->data.size(), 0.0);
      for (size_t i = 0; i < xi->data.size(); ++i) (*xi->grad)[i] += (*g)[i];
    }
    if (bi->requires_grad) {
      if (!bi->grad) bi->grad = std::make_unique<std::vector<double>>(bi->data.size(), 0.0);
      for (int r = 0; r < R; ++r) {
        const double* grow = g->data() + static_cast<size_t>(r) * C;
        for (int c = 0; c < C; ++c) (*bi->grad)[c] += grow[c];
      }
    }
  });
  return out;
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  Tensor out = Tensor::from({total}, 1, 1, x.requires_grad());
  auto xi = x.impl(), oi = out.impl();
  maybe_record(out, [xi, oi] {
    const auto* g = out_grad(oi);
    if (!g || !xi->requires_grad) return;
    if (!xi->grad) xi->grad = std::make_unique<std::vector<double>>(xi->data.size(), 0.0);
    for (auto& v : *xi->grad) v += (*g)[0];
  });
  return out;
}

Tensor transpose(const Tensor& x) {
  Tensor out = make_out(x.cols(), x.rows(), x.requires_grad());
  MMap(out.data().data(), out.rows(), out.cols()) = cmap(*x.impl()).transpose();
  auto xi = x.impl(), oi = out.impl();
  maybe_record(out, [xi, oi] {
    const auto* g = out_grad(oi);
    if (!g || !xi->requires_grad) return;
    CMap go(g->data(), oi->rows, oi->cols);
    accum(xi, go.transpose());
  });
  return out;
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        int n_heads) {
  const int L = q.rows(), D = q.cols();
  if (k.rows() != L || k.cols() != D || v.rows() != L || v.cols() != D) {
    throw ShapeError("causal_attention: q/k/v shapes differ: " + shape_str(q) +
                     ", " + shape_str(k) + ", " + shape_str(v));
  }
  if (n_heads <= 0 || D % n_heads != 0) {
    throw ShapeError("causal_attention: d_model " + std::to_string(D) +
                     " not divisible by n_heads " + std::to_string(n_heads));
  }
  const int dh = D / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor out = make_out(L, D, out_requires({&q, &k, &v}));
  // per-head row-softmaxed causal score matrices, saved for backward
  auto probs = std::make_shared<std::vector<EMat>>();
  probs->reserve(n_heads);

  CMap Q = cmap(*q.impl()), K = cmap(*k.impl()), V = cmap(*v.impl());
  MMap O(out.data().data(), L, D);
  for (int h = 0; h < n_heads; ++h) {
    auto Qh = Q.middleCols(h * dh, dh);
    auto Kh = K.middleCols(h * dh, dh);
    auto Vh = V.middleCols(h * dh, dh);
    EMat S = (Qh * Kh.transpose()) * scale;  // [L x L]
    EMat P = EMat::Zero(L, L);
    for (int i = 0; i < L; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j <= i; ++j) mx = std::max(mx, S(i, j));
      double z = 0.0;
      for (int j = 0; j <= i; ++j) {
        double e = std::exp(S(i, j) - mx);
        P(i, j) = e;
        z += e;
      }
      for (int j = 0; j <= i; ++j) P(i, j) /= z;
    }
    O.middleCols(h * dh, dh) = P * Vh;
    probs->push_back(std::move(P));
  }

  auto qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = out.impl();
  maybe_record(out, [qi, ki, vi, oi, probs, n_heads, dh, scale] {
    const auto* g = out_grad(oi);
    if (!g) return;
    const int L = oi->rows;
    CMap GO(g->data(), oi->rows, oi->cols);
    CMap Q = cmap(*qi), K = cmap(*ki), V = cmap(*vi);
    EMat dQ, dK, dV;
    if (qi->requires_grad) dQ = EMat::Zero(L, qi->cols);
    if (ki->requires_grad) dK = EMat::Zero(L, ki->cols);
    if (vi->requires_grad) dV = EMat::Zero(L, vi->cols);
    for (int h = 0; h < n_heads; ++h) {
      const EMat& P = (*probs)[h];
      auto GOh = GO.middleCols(h * dh, dh);
      auto Vh = V.middleCols(h * dh, dh);
      EMat dP = GOh * Vh.transpose();  // [L x L]
      // softmax backward per row, restricted to the causal prefix
      EMat dS = EMat::Zero(L, L);
      for (int i = 0; i < L; ++i) {
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) dot += dP(i, j) * P(i, j);
        for (int j = 0; j <= i; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot);
      }
      if (vi->requires_grad) dV.middleCols(h * dh, dh) = P.transpose() * GOh;
      if (qi->requires_grad) {
        dQ.middleCols(h * dh, dh) = (dS * K.middleCols(h * dh, dh)) * scale;
      }
      if (ki->requires_grad) {
        dK.middleCols(h * dh, dh) = (dS.transpose() * Q.middleCols(h * dh, dh)) * scale;
      }
    }
    if (qi->requires_grad) accum(qi, dQ);
    if (ki->requires_grad) accum(ki, dK);
    if (vi->requires_grad) accum(vi, dV);
  });
  return out;
}

}  // namespace mmfuse::numcore

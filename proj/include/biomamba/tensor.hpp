#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "biomamba/common.hpp"

namespace biomamba {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {
struct TensorNode;
struct NodeAccess;
}

// Dense row-major tensor of doubles. Values are immutable while a graph is
// being recorded; the optimizer mutates parameters in place only between
// batches (single writer, empty tape). Gradients accumulate on the node and
// persist until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi,
                        bool requires_grad = false);
  static Tensor normal(Shape shape, Rng& rng, double mean, double stddev,
                       bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int dim(int axis) const;
  int64_t size() const;
  uint64_t node_id() const;

  std::span<const double> values() const;
  // Reserved for owners (optimizer steps, finite-difference probes). Must not
  // be called while a recorded graph that read this tensor is still alive.
  std::span<double> mutable_values();

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  double item() const;
  double at(std::initializer_list<int> idx) const;

 private:
  friend struct detail::NodeAccess;
  std::shared_ptr<detail::TensorNode> node_;
};

// Ordered record of executed operations. backward(loss) seeds d(loss)=1,
// replays entries newest-first (reverse execution order is a valid reverse
// topological order), then clears the record. One tape per logical thread.
class ComputationTape {
 public:
  static ComputationTape& current();

  void backward(const Tensor& loss);
  size_t size() const;
  void clear();
  bool recording_enabled() const { return disable_depth_ == 0; }

 private:
  friend struct OpAccess;
  friend struct NoGradGuard;
  struct Entry {
    const char* op;
    std::vector<uint64_t> input_ids;
    uint64_t output_id;
    std::function<void()> pull;
  };
  std::vector<Entry> entries_;
  int disable_depth_ = 0;
};

// Suspends recording on the current thread's tape while alive.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Hooks for authoring differentiable operations outside this translation
// unit (convolutions, scans, losses). Not part of the end-user surface.
struct OpAccess {
  static bool needs_grad(const Tensor& t);
  static bool should_record(std::initializer_list<const Tensor*> inputs);
  static void record(const char* op,
                     std::initializer_list<const Tensor*> inputs,
                     const Tensor& output, std::function<void()> pull);
  // Lazily allocated, zero-filled gradient buffer of t.
  static std::span<double> grad_buffer(const Tensor& t);
  // Gradient of t if any backward pass has touched it, else empty.
  static std::span<const double> grad_view(const Tensor& t);
  static void mark_on_tape(const Tensor& t);
};

// Elementwise arithmetic. Binary ops broadcast with right-aligned numpy
// rules: each trailing dimension pair must match or one side must be 1;
// missing leading dimensions broadcast.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor silu(const Tensor& a);
Tensor softplus(const Tensor& a);
// exp with the argument clamped at 709 to stay finite; clamped elements
// bump the saturation counter below.
Tensor exp_clamped(const Tensor& a);
// Throws contract_error on a zero element.
Tensor reciprocal(const Tensor& a);

uint64_t exp_saturation_count();
void reset_exp_saturation_count();

// Strict 2-D matrix product [m,k] x [k,n] -> [m,n].
Tensor matmul(const Tensor& a, const Tensor& b);
// x [..., In] -> [..., Out] with weight [In, Out]; bias [Out] optional
// (pass a default-constructed Tensor to omit it).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Normalizes over the last axis. gamma/beta have the last-axis length.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor reverse_axis(const Tensor& x, int axis);
Tensor concat(const std::vector<Tensor>& parts, int axis);
// Zero-pads the last axis up to target length (no-op when already there).
Tensor pad_last(const Tensor& x, int target);

Tensor sum_all(const Tensor& x);
Tensor mean_axis(const Tensor& x, int axis);

void backward(const Tensor& loss);

// Central-difference verification of reverse-mode gradients:
// max over elements of |analytic - central| / max(|central|, 1e-8).
// f must be a pure scalar-valued function of x; x must require grad.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                  double h = 1e-5);

}  // namespace biomamba

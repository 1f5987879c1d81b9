#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cxrgen/errors.hpp"
#include "cxrgen/rng.hpp"

namespace cxrgen {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// 64-bit float tensor, row-major, value-semantic handle over shared storage.
// Gradients live next to the data and accumulate across backward passes
// until zero_grad() is called.
class Tensor {
  public:
    Tensor();  // empty, numel 0

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0);

    const Shape& shape() const;
    std::int64_t numel() const;
    std::int64_t dim(std::size_t axis) const;
    std::size_t rank() const;

    std::vector<double>& data();
    const std::vector<double>& data() const;
    double item() const;  // requires numel == 1

    bool requires_grad() const;
    Tensor& set_requires_grad(bool on);  // returns *this for chaining

    bool has_grad() const;
    std::vector<double>& grad();        // allocates zeros on first use
    const std::vector<double>& grad() const;
    void zero_grad();

    // Same values, fresh storage, no gradient tracking.
    Tensor detach() const;

    bool defined() const;
    bool same_storage(const Tensor& other) const;

  private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
};

// Append-only record of differentiable operations (define-by-run).  A Tape on
// the stack makes itself current for its lifetime; operations record a
// backward closure when any input requires a gradient.  backward() seeds the
// scalar loss with 1 and replays the closures once, in reverse append order.
class Tape {
  public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current();
    std::size_t size() const { return nodes_.size(); }

    // No-op when the loss does not require a gradient (constant graph).
    // Throws ContractError when the loss is not scalar.  Gradients of leaf
    // tensors accumulate across calls; gradients of recorded intermediates are
    // reset at the start of every pass, so two passes double the leaf grads.
    static void backward(const Tensor& loss);

    void record(const Tensor& out, std::function<void()> node);

  private:
    std::vector<std::function<void()>> nodes_;
    std::vector<Tensor> outputs_;
    Tape* prev_;
};

// Scope that suppresses recording (inference / finite-difference evaluation).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---- primitives -----------------------------------------------------------
// Binary elementwise ops accept equal shapes, a scalar (numel == 1) on either
// side, or a trailing-shape broadcast: the smaller operand's shape must equal
// a suffix of the larger one's and is repeated over the leading rows.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // DomainError on zero divisor

Tensor matmul(const Tensor& a, const Tensor& b);  // rank-2 only

Tensor exp(const Tensor& x);   // DomainError on overflow to Inf
Tensor log(const Tensor& x);   // DomainError on x <= 0
Tensor sqrt(const Tensor& x);  // DomainError on x < 0
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor tanh(const Tensor& x);

// y = gain * x / rms(x) over the last axis; eps inside the square root.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps = 1e-6);

Tensor softmax_rows(const Tensor& x);  // softmax over the last axis

// Per-row negative log softmax picked at the target id; logits [R, V],
// targets length R, result [R].
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::int64_t>& targets);

// Rows (last axis) scaled to unit L2 norm; DomainError on an all-zero row.
Tensor l2_normalize_rows(const Tensor& x);

Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose2d(const Tensor& x);
Tensor reduce_sum_all(const Tensor& x);   // -> [1]
Tensor reduce_mean_all(const Tensor& x);  // -> [1]
Tensor mean_rows(const Tensor& x);        // mean over axis 0
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& index);
Tensor scale(const Tensor& x, double c);

// [dims...] -> [dims..., k] by repetition along a new trailing axis.
Tensor expand_last(const Tensor& x, std::int64_t k);

// a [L, D], b [L, S] -> out [L, D, S] with out[t, d, s] = a[t, d] * b[t, s].
Tensor batched_outer(const Tensor& a, const Tensor& b);

// First-order linear recurrence along axis 0 with readout:
//   h_t = a_bar_t * h_{t-1} + b_bar_t * u_t      (h_{-1} = 0)
//   y_t[d] = sum_s c_t[s] * h_t[d, s] + d_skip[d] * u_t[d]
// u [L, D], a_bar/b_bar [L, D, S], c [L, S], d_skip [D] -> y [L, D].
Tensor ssm_scan(const Tensor& u, const Tensor& a_bar, const Tensor& b_bar,
                const Tensor& c, const Tensor& d_skip);

// ---- gradient verification ------------------------------------------------

// Max over coordinates of |analytic - numeric| / max(1, |numeric|), where
// numeric is the central difference of fn at the point with step h.
// fn must return the same scalar for the same input (purity) and must not
// keep references into its argument's storage.
double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                  double h = 1e-5);

// Same check for a scalar function of several parameter tensors; perturbs up
// to max_coords_per_tensor coordinates of each (all when <= 0), chosen with
// rng when sampling is needed.
double grad_check_params(const std::function<Tensor()>& fn, const std::vector<Tensor>& params,
                         double h = 1e-5, std::int64_t max_coords_per_tensor = 0,
                         Rng* rng = nullptr);

}  // namespace cxrgen

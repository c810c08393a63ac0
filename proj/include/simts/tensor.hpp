#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace simts {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {
struct TensorImpl;
struct GraphNode;
struct TensorAccess;
}  // namespace detail

/// Gradients keyed by parameter name, as produced by backward().
using GradMap = std::map<std::string, std::vector<double>>;

/// Backward rule of a recorded operation. `grad_out` is the gradient of the
/// loss w.r.t. the op output; entries of `grad_in` are accumulation buffers
/// (add into them) for each input, empty when that input needs no gradient.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

/**
 * Dense row-major float64 array that can take part in a reverse-mode
 * differentiation graph.
 *
 * Tensor is a cheap handle: copies share the same storage and graph node.
 * Op outputs are immutable; only leaves (parameters) may be written through
 * mutable_data(), which the optimizer uses between steps.
 *
 * The graph is recorded per forward pass. Calling backward() releases the
 * nodes it traversed, so a second backward() over the same graph throws.
 */
class Tensor {
public:
    Tensor();

    static Tensor zeros(Shape shape);
    static Tensor constant(Shape shape, std::vector<double> data);
    /// A named leaf that accumulates gradient during backward().
    static Tensor parameter(Shape shape, std::vector<double> data, std::string name);
    static Tensor scalar(double value);

    /// Builds the output of a custom differentiable op. A graph node is
    /// recorded only if some input requires grad and grad mode is enabled.
    static Tensor from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                          BackwardFn backward, const char* op_name);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const;
    std::span<const double> data() const;
    double item() const;
    double at(std::size_t i) const { return data()[i]; }

    bool requires_grad() const;
    bool is_leaf() const;
    /// True when the tensor carries a recorded node that has not been released yet.
    bool has_graph() const;
    const std::string& name() const;
    const char* op_name() const;

    bool has_grad() const;
    /// Gradient buffer; empty span when no gradient has been accumulated.
    std::span<const double> grad() const;
    void zero_grad();

    /// Write access for leaves only (throws for op outputs).
    std::span<double> mutable_data();

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl);

    std::shared_ptr<detail::TensorImpl> impl_;

    friend struct detail::TensorAccess;
    friend Tensor detach(const Tensor& input);
};

/// Disables graph recording for the lifetime of the guard (thread-local).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_mode_enabled();

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Causal 1d convolution: input C_in×L, weight C_out×C_in×k, bias C_out.
/// The input is left-padded with k−1 zeros, so output[t] sees input[t−k+1..t].
Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Last output column of conv1d(input, weight, bias), shape {C_out}.
/// Costs O(C_out·C_in·k) instead of O(C_out·C_in·k·L).
Tensor conv1d_last(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// weight (m×n) · input (n) + bias (m).
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Row-wise linear map: input (N×n) · weightᵀ + bias, shape N×m.
Tensor linear_rows(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// Mean of conv kernels C_out×C_in×k_i, each right-aligned in a zero kernel of
/// the widest size. A causal conv with the result equals the mean of the
/// causal convs with the originals (up to bias).
Tensor merge_kernels(std::span<const Tensor> weights);

Tensor relu(const Tensor& input);

/// Elementwise arithmetic mean of same-shape tensors.
Tensor mean_over(std::span<const Tensor> inputs);

/// Each column of a d×n matrix divided by max(‖col‖₂, eps).
Tensor l2_normalize_columns(const Tensor& input, double eps = 1e-8);

/// Same values, no graph node, never receives gradient.
Tensor detach(const Tensor& input);

Tensor reshape(const Tensor& input, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& input, double factor);
Tensor sum(const Tensor& input);
Tensor mean(const Tensor& input);

/// Dot product of matching columns of two d×n matrices, shape {n}.
Tensor column_dots(const Tensor& a, const Tensor& b);

/// Stacks N tensors of shape {n} into N×n.
Tensor stack_rows(std::span<const Tensor> rows);

/// Row i of an N×n matrix, shape {n}.
Tensor select_row(const Tensor& input, std::size_t i);

/// log Σ_i exp(x[i][j]) over rows of an N×n matrix, shape {n}.
Tensor logsumexp_rows(const Tensor& input);

/// Reverse-mode sweep from a scalar loss. Accumulates into the grad of every
/// requires-grad leaf reached and returns the named leaves' gradients from
/// this call alone.
GradMap backward(const Tensor& loss);

/// The same sweep without the per-call copies: gradients are only added into
/// the leaves' grad buffers.
void accumulate_grad(const Tensor& loss);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

using TensorFn = std::function<Tensor(std::span<const Tensor>)>;

/// Max over all input entries of |analytic − numeric| / max(1, |analytic|, |numeric|)
/// using central differences with step eps. Inputs must be leaves.
double grad_check(const TensorFn& f, std::span<const Tensor> inputs, double eps = 1e-6);

/// As above, but the finite differences are taken on `reference`. Used when f
/// stops gradients: `reference` holds the stopped values fixed.
double grad_check(const TensorFn& f, const TensorFn& reference, std::span<const Tensor> inputs,
                  double eps = 1e-6);

}  // namespace simts

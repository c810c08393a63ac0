#include "simts/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <new>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace simts {

namespace detail {

// Storage is 64-byte aligned so that vectorized kernels split every buffer the
// same way, which keeps floating-point results identical from run to run.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

struct GraphNode {
    const char* op_name = "";
    std::vector<Tensor> inputs;
    BackwardFn backward;
    bool released = false;
};

struct TensorImpl {
    Shape shape;
    Buffer data;
    bool requires_grad = false;
    Buffer grad;  // empty when absent
    std::shared_ptr<GraphNode> node;
    std::string name;
};

struct TensorAccess {
    static void sweep(const Tensor& loss, GradMap* named);
    static Tensor make(Shape shape, Buffer data) {
        for (auto e : shape)
            if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape));
        if (shape_numel(shape) != data.size()) {
            throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " needs " +
                                        std::to_string(shape_numel(shape)) + " values, got " +
                                        std::to_string(data.size()));
        }
        auto impl = std::make_shared<TensorImpl>();
        impl->shape = std::move(shape);
        impl->data = std::move(data);
        return Tensor(std::move(impl));
    }

    static Tensor make_op(Shape shape, Buffer data, std::vector<Tensor> inputs, BackwardFn backward,
                          const char* op_name);
};

}  // namespace detail

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using CMapRow = Eigen::Map<const RowMat>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;
using detail::Buffer;

[[noreturn]] void shape_error(const std::string& op, const std::string& what) {
    throw std::invalid_argument(op + ": " + what);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* arg) {
    if (!t.defined()) shape_error(op, std::string(arg) + " is undefined");
    if (t.rank() != rank) {
        shape_error(op, std::string(arg) + " must have rank " + std::to_string(rank) + ", got " +
                            shape_str(t.shape()));
    }
}

// Copies tap j of a C_out×C_in×k weight into a contiguous C_out×C_in matrix.
RowMat weight_tap(std::span<const double> w, std::size_t cout, std::size_t cin, std::size_t k,
                  std::size_t j) {
    RowMat tap(cout, cin);
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t c = 0; c < cin; ++c) tap(o, c) = w[(o * cin + c) * k + j];
    return tap;
}

void check_conv_shapes(const Tensor& input, const Tensor& weight, const Tensor& bias, const char* op) {
    require_rank(input, 2, op, "input");
    require_rank(weight, 3, op, "weight");
    require_rank(bias, 1, op, "bias");
    if (weight.dim(1) != input.dim(0)) {
        shape_error(op, "weight " + shape_str(weight.shape()) + " expects " +
                            std::to_string(weight.dim(1)) + " input channels but input is " +
                            shape_str(input.shape()));
    }
    if (bias.dim(0) != weight.dim(0)) {
        shape_error(op, "bias " + shape_str(bias.shape()) + " does not match weight " +
                            shape_str(weight.shape()));
    }
    if (weight.dim(2) < 1) shape_error(op, "kernel size must be >= 1");
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor() = default;
Tensor::Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

Tensor Tensor::zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return constant(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
    return detail::TensorAccess::make(std::move(shape), detail::Buffer(data.begin(), data.end()));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data, std::string name) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    t.impl_->name = std::move(name);
    return t;
}

Tensor Tensor::scalar(double value) { return constant({1}, {value}); }

Tensor Tensor::from_op(Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                       BackwardFn backward, const char* op_name) {
    return detail::TensorAccess::make_op(std::move(shape), detail::Buffer(data.begin(), data.end()),
                                         std::move(inputs), std::move(backward), op_name);
}

Tensor detail::TensorAccess::make_op(Shape shape, Buffer data, std::vector<Tensor> inputs, BackwardFn backward,
                                     const char* op_name) {
    Tensor out = make(std::move(shape), std::move(data));
    if (!g_grad_enabled) return out;
    const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
    if (!needs) return out;
    auto node = std::make_shared<detail::GraphNode>();
    node->op_name = op_name;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
    out.impl_->requires_grad = true;
    out.impl_->node = std::move(node);
    return out;
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= impl_->shape.size())
        throw std::out_of_range("Tensor::dim: axis " + std::to_string(axis) + " out of range for " +
                                shape_str(impl_->shape));
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::item: tensor " + shape_str(shape()) + " is not scalar");
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
bool Tensor::is_leaf() const { return !impl_->node; }
bool Tensor::has_graph() const { return impl_->node && !impl_->node->released; }
const std::string& Tensor::name() const { return impl_->name; }
const char* Tensor::op_name() const { return impl_->node ? impl_->node->op_name : "leaf"; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
void Tensor::zero_grad() { impl_->grad.clear(); }

std::span<double> Tensor::mutable_data() {
    if (impl_->node) throw std::logic_error("Tensor::mutable_data: only leaves are writable");
    return impl_->data;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor conv1d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    check_conv_shapes(input, weight, bias, "conv1d");
    const std::size_t cin = input.dim(0), len = input.dim(1);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);

    Buffer out(cout * len);
    MapRow y(out.data(), cout, len);
    CMapRow x(input.data().data(), cin, len);
    for (std::size_t o = 0; o < cout; ++o) y.row(o).setConstant(bias.at(o));
    for (std::size_t j = 0; j < k; ++j) {
        const std::size_t shift = k - 1 - j;
        if (shift >= len) continue;
        const std::size_t n = len - shift;
        y.rightCols(n).noalias() += weight_tap(weight.data(), cout, cin, k, j) * x.leftCols(n);
    }

    auto backward = [input, weight, cin, cout, len, k](std::span<const double> gout,
                                                       std::span<const std::span<double>> gin) {
        CMapRow go(gout.data(), cout, len);
        CMapRow x(input.data().data(), cin, len);
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t shift = k - 1 - j;
            if (shift >= len) continue;
            const std::size_t n = len - shift;
            if (!gin[0].empty()) {
                MapRow gx(gin[0].data(), cin, len);
                gx.leftCols(n).noalias() +=
                    weight_tap(weight.data(), cout, cin, k, j).transpose() * go.rightCols(n);
            }
            if (!gin[1].empty()) {
                RowMat gtap = go.rightCols(n) * x.leftCols(n).transpose();
                double* gw = gin[1].data();
                for (std::size_t o = 0; o < cout; ++o)
                    for (std::size_t c = 0; c < cin; ++c) gw[(o * cin + c) * k + j] += gtap(o, c);
            }
        }
        if (!gin[2].empty()) {
            MapVec gb(gin[2].data(), cout);
            gb += go.rowwise().sum();
        }
    };
    return detail::TensorAccess::make_op({cout, len}, std::move(out), {input, weight, bias}, backward, "conv1d");
}

Tensor conv1d_last(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    check_conv_shapes(input, weight, bias, "conv1d_last");
    const std::size_t cin = input.dim(0), len = input.dim(1);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);

    // window[c*k + j] = input[c][len-k+j], zero where that index is negative
    Buffer window(cin * k, 0.0);
    const auto xin = input.data();
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t j = 0; j < k; ++j)
            if (len + j >= k) window[c * k + j] = xin[c * len + (len + j - k)];

    Buffer out(bias.data().begin(), bias.data().end());
    CMapRow w(weight.data().data(), cout, cin * k);
    MapVec(out.data(), cout).noalias() += w * CMapVec(window.data(), cin * k);

    auto backward = [weight, window = std::move(window), cin, cout, len, k](
                        std::span<const double> gout, std::span<const std::span<double>> gin) {
        CMapVec go(gout.data(), cout);
        CMapRow w(weight.data().data(), cout, cin * k);
        if (!gin[0].empty()) {
            Eigen::VectorXd gwin = w.transpose() * go;
            for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t j = 0; j < k; ++j)
                    if (len + j >= k) gin[0][c * len + (len + j - k)] += gwin[c * k + j];
        }
        if (!gin[1].empty()) {
            MapRow gw(gin[1].data(), cout, cin * k);
            gw.noalias() += go * CMapVec(window.data(), cin * k).transpose();
        }
        if (!gin[2].empty()) MapVec(gin[2].data(), cout) += go;
    };
    return detail::TensorAccess::make_op({cout}, std::move(out), {input, weight, bias}, backward, "conv1d_last");
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    require_rank(input, 1, "linear", "input");
    require_rank(weight, 2, "linear", "weight");
    require_rank(bias, 1, "linear", "bias");
    const std::size_t m = weight.dim(0), n = weight.dim(1);
    if (input.dim(0) != n || bias.dim(0) != m) {
        shape_error("linear", "weight " + shape_str(weight.shape()) + ", input " +
                                  shape_str(input.shape()) + " and bias " + shape_str(bias.shape()) +
                                  " do not conform");
    }
    Buffer out(bias.data().begin(), bias.data().end());
    CMapRow w(weight.data().data(), m, n);
    MapVec(out.data(), m).noalias() += w * CMapVec(input.data().data(), n);

    auto backward = [input, weight, m, n](std::span<const double> gout,
                                          std::span<const std::span<double>> gin) {
        CMapVec go(gout.data(), m);
        if (!gin[0].empty()) {
            CMapRow w(weight.data().data(), m, n);
            MapVec(gin[0].data(), n).noalias() += w.transpose() * go;
        }
        if (!gin[1].empty()) {
            MapRow gw(gin[1].data(), m, n);
            gw.noalias() += go * CMapVec(input.data().data(), n).transpose();
        }
        if (!gin[2].empty()) MapVec(gin[2].data(), m) += go;
    };
    return detail::TensorAccess::make_op({m}, std::move(out), {input, weight, bias}, backward, "linear");
}

Tensor linear_rows(const Tensor& input, const Tensor& weight, const Tensor& bias) {
    require_rank(input, 2, "linear_rows", "input");
    require_rank(weight, 2, "linear_rows", "weight");
    require_rank(bias, 1, "linear_rows", "bias");
    const std::size_t rows = input.dim(0), m = weight.dim(0), n = weight.dim(1);
    if (input.dim(1) != n || bias.dim(0) != m) {
        shape_error("linear_rows", "weight " + shape_str(weight.shape()) + ", input " + shape_str(input.shape()) +
                                       " and bias " + shape_str(bias.shape()) + " do not conform");
    }
    Buffer out(rows * m);
    MapRow y(out.data(), rows, m);
    y.rowwise() = CMapVec(bias.data().data(), m).transpose();
    y.noalias() += CMapRow(input.data().data(), rows, n) * CMapRow(weight.data().data(), m, n).transpose();

    auto backward = [input, weight, rows, m, n](std::span<const double> gout,
                                                std::span<const std::span<double>> gin) {
        CMapRow go(gout.data(), rows, m);
        if (!gin[0].empty())
            MapRow(gin[0].data(), rows, n).noalias() += go * CMapRow(weight.data().data(), m, n);
        if (!gin[1].empty())
            MapRow(gin[1].data(), m, n).noalias() += go.transpose() * CMapRow(input.data().data(), rows, n);
        if (!gin[2].empty()) MapVec(gin[2].data(), m) += go.colwise().sum().transpose();
    };
    return detail::TensorAccess::make_op({rows, m}, std::move(out), {input, weight, bias}, backward, "linear_rows");
}

Tensor merge_kernels(std::span<const Tensor> weights) {
    if (weights.empty()) throw std::invalid_argument("merge_kernels: empty input list");
    std::size_t widest = 0;
    for (const auto& w : weights) {
        require_rank(w, 3, "merge_kernels", "weight");
        if (w.dim(0) != weights[0].dim(0) || w.dim(1) != weights[0].dim(1))
            shape_error("merge_kernels", "kernel " + shape_str(w.shape()) + " does not match " +
                                             shape_str(weights[0].shape()));
        widest = std::max(widest, w.dim(2));
    }
    const std::size_t pairs = weights[0].dim(0) * weights[0].dim(1);
    const double share = 1.0 / static_cast<double>(weights.size());
    Buffer out(pairs * widest, 0.0);
    std::vector<std::size_t> widths;
    for (const auto& w : weights) {
        const std::size_t k = w.dim(2), offset = widest - k;
        const auto src = w.data();
        for (std::size_t p = 0; p < pairs; ++p)
            for (std::size_t j = 0; j < k; ++j) out[p * widest + offset + j] += share * src[p * k + j];
        widths.push_back(k);
    }
    auto backward = [widths, pairs, widest, share](std::span<const double> gout,
                                                   std::span<const std::span<double>> gin) {
        for (std::size_t i = 0; i < gin.size(); ++i) {
            if (gin[i].empty()) continue;
            const std::size_t k = widths[i], offset = widest - k;
            for (std::size_t p = 0; p < pairs; ++p)
                for (std::size_t j = 0; j < k; ++j) gin[i][p * k + j] += share * gout[p * widest + offset + j];
        }
    };
    return detail::TensorAccess::make_op({weights[0].dim(0), weights[0].dim(1), widest}, std::move(out),
                                         {weights.begin(), weights.end()}, backward, "merge_kernels");
}

Tensor relu(const Tensor& input) {
    std::vector<double> out(input.data().begin(), input.data().end());
    for (auto& v : out) v = v > 0.0 ? v : 0.0;
    auto backward = [input](std::span<const double> gout, std::span<const std::span<double>> gin) {
        const auto x = input.data();
        for (std::size_t i = 0; i < gout.size(); ++i)
            if (x[i] > 0.0) gin[0][i] += gout[i];
    };
    return Tensor::from_op(input.shape(), std::move(out), {input}, backward, "relu");
}

Tensor mean_over(std::span<const Tensor> inputs) {
    if (inputs.empty()) throw std::invalid_argument("mean_over: empty input list");
    const Shape& shape = inputs[0].shape();
    for (const auto& t : inputs)
        if (t.shape() != shape)
            shape_error("mean_over", "shape " + shape_str(t.shape()) + " differs from " + shape_str(shape));
    const double inv = 1.0 / static_cast<double>(inputs.size());
    std::vector<double> out(inputs[0].numel(), 0.0);
    for (const auto& t : inputs) {
        const auto d = t.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += d[i];
    }
    for (auto& v : out) v *= inv;
    auto backward = [inv](std::span<const double> gout, std::span<const std::span<double>> gin) {
        for (const auto& g : gin) {
            if (g.empty()) continue;
            for (std::size_t i = 0; i < gout.size(); ++i) g[i] += inv * gout[i];
        }
    };
    return Tensor::from_op(shape, std::move(out), {inputs.begin(), inputs.end()}, backward, "mean_over");
}

Tensor l2_normalize_columns(const Tensor& input, double eps) {
    require_rank(input, 2, "l2_normalize_columns", "input");
    if (!(eps > 0.0)) throw std::invalid_argument("l2_normalize_columns: eps must be > 0");
    const std::size_t d = input.dim(0), n = input.dim(1);
    const auto x = input.data();
    std::vector<double> norms(n, 0.0);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < n; ++c) norms[c] += x[r * n + c] * x[r * n + c];
    for (auto& v : norms) v = std::sqrt(v);
    std::vector<double> out(d * n);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[r * n + c] / std::max(norms[c], eps);

    auto backward = [norms = std::move(norms), y = out, d, n, eps](
                        std::span<const double> gout, std::span<const std::span<double>> gin) {
        std::vector<double> ydotg(n, 0.0);
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < n; ++c) ydotg[c] += y[r * n + c] * gout[r * n + c];
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
                const std::size_t i = r * n + c;
                if (norms[c] > eps)
                    gin[0][i] += (gout[i] - y[i] * ydotg[c]) / norms[c];
                else
                    gin[0][i] += gout[i] / eps;
            }
        }
    };
    return Tensor::from_op(input.shape(), std::move(out), {input}, backward, "l2_normalize_columns");
}

Tensor detach(const Tensor& input) {
    return Tensor::constant(input.shape(), {input.data().begin(), input.data().end()});
}

Tensor reshape(const Tensor& input, Shape shape) {
    if (shape_numel(shape) != input.numel())
        shape_error("reshape", "cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
    auto backward = [](std::span<const double> gout, std::span<const std::span<double>> gin) {
        for (std::size_t i = 0; i < gout.size(); ++i) gin[0][i] += gout[i];
    };
    return Tensor::from_op(std::move(shape), {input.data().begin(), input.data().end()}, {input},
                           backward, "reshape");
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        shape_error(op, "shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    auto backward = [](std::span<const double> gout, std::span<const std::span<double>> gin) {
        for (const auto& g : gin)
            if (!g.empty())
                for (std::size_t i = 0; i < gout.size(); ++i) g[i] += gout[i];
    };
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, backward, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    auto backward = [](std::span<const double> gout, std::span<const std::span<double>> gin) {
        if (!gin[0].empty())
            for (std::size_t i = 0; i < gout.size(); ++i) gin[0][i] += gout[i];
        if (!gin[1].empty())
            for (std::size_t i = 0; i < gout.size(); ++i) gin[1][i] -= gout[i];
    };
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, backward, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * b.at(i);
    auto backward = [a, b](std::span<const double> gout, std::span<const std::span<double>> gin) {
        if (!gin[0].empty())
            for (std::size_t i = 0; i < gout.size(); ++i) gin[0][i] += gout[i] * b.at(i);
        if (!gin[1].empty())
            for (std::size_t i = 0; i < gout.size(); ++i) gin[1][i] += gout[i] * a.at(i);
    };
    return Tensor::from_op(a.shape(), std::move(out), {a, b}, backward, "mul");
}

Tensor scale(const Tensor& input, double factor) {
    std::vector<double> out(input.data().begin(), input.data().end());
    for (auto& v : out) v *= factor;
    auto backward = [factor](std::span<const double> gout, std::span<const std::span<double>> gin) {
        for (std::size_t i = 0; i < gout.size(); ++i) gin[0][i] += factor * gout[i];
    };
    return Tensor::from_op(input.shape(), std::move(out), {input}, backward, "scale");
}

Tensor sum(const Tensor& input) {
    const auto d = input.data();
    const double total = std::accumulate(d.begin(), d.end(), 0.0);
    auto backward = [](std::span<const double> gout, std::span<const std::span<double>> gin) {
        for (auto& v : gin[0]) v += gout[0];
    };
    return Tensor::from_op({1}, {total}, {input}, backward, "sum");
}

Tensor mean(const Tensor& input) { return scale(sum(input), 1.0 / static_cast<double>(input.numel())); }

Tensor column_dots(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "column_dots", "a");
    require_same_shape(a, b, "column_dots");
    const std::size_t d = a.dim(0), n = a.dim(1);
    std::vector<double> out(n, 0.0);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t c = 0; c < n; ++c) out[c] += a.at(r * n + c) * b.at(r * n + c);
    auto backward = [a, b, d, n](std::span<const double> gout, std::span<const std::span<double>> gin) {
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = 0; c < n; ++c) {
                const std::size_t i = r * n + c;
                if (!gin[0].empty()) gin[0][i] += gout[c] * b.at(i);
                if (!gin[1].empty()) gin[1][i] += gout[c] * a.at(i);
            }
        }
    };
    return Tensor::from_op({n}, std::move(out), {a, b}, backward, "column_dots");
}

Tensor stack_rows(std::span<const Tensor> rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty input list");
    for (const auto& r : rows) {
        require_rank(r, 1, "stack_rows", "row");
        require_same_shape(r, rows[0], "stack_rows");
    }
    const std::size_t n = rows[0].dim(0);
    std::vector<double> out;
    out.reserve(rows.size() * n);
    for (const auto& r : rows) out.insert(out.end(), r.data().begin(), r.data().end());
    auto backward = [n](std::span<const double> gout, std::span<const std::span<double>> gin) {
        for (std::size_t k = 0; k < gin.size(); ++k)
            if (!gin[k].empty())
                for (std::size_t i = 0; i < n; ++i) gin[k][i] += gout[k * n + i];
    };
    return Tensor::from_op({rows.size(), n}, std::move(out), {rows.begin(), rows.end()}, backward,
                           "stack_rows");
}

Tensor select_row(const Tensor& input, std::size_t i) {
    require_rank(input, 2, "select_row", "input");
    const std::size_t n = input.dim(1);
    if (i >= input.dim(0))
        shape_error("select_row", "row " + std::to_string(i) + " of " + shape_str(input.shape()));
    const auto x = input.data();
    Buffer out(x.begin() + static_cast<std::ptrdiff_t>(i * n), x.begin() + static_cast<std::ptrdiff_t>((i + 1) * n));
    auto backward = [i, n](std::span<const double> gout, std::span<const std::span<double>> gin) {
        for (std::size_t c = 0; c < n; ++c) gin[0][i * n + c] += gout[c];
    };
    return detail::TensorAccess::make_op({n}, std::move(out), {input}, backward, "select_row");
}

Tensor logsumexp_rows(const Tensor& input) {
    require_rank(input, 2, "logsumexp_rows", "input");
    const std::size_t rows = input.dim(0), n = input.dim(1);
    const auto x = input.data();
    std::vector<double> out(n);
    for (std::size_t c = 0; c < n; ++c) {
        double peak = x[c];
        for (std::size_t r = 1; r < rows; ++r) peak = std::max(peak, x[r * n + c]);
        double acc = 0.0;
        for (std::size_t r = 0; r < rows; ++r) acc += std::exp(x[r * n + c] - peak);
        out[c] = peak + std::log(acc);
    }
    auto backward = [input, lse = out, rows, n](std::span<const double> gout,
                                                std::span<const std::span<double>> gin) {
        const auto x = input.data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c)
                gin[0][r * n + c] += gout[c] * std::exp(x[r * n + c] - lse[c]);
    };
    return Tensor::from_op({n}, std::move(out), {input}, backward, "logsumexp_rows");
}

// ---------------------------------------------------------------------------
// Backward engine
// ---------------------------------------------------------------------------

// With `named` set, leaf gradients go to separate buffers that are added to
// the leaves afterwards and copied out by name; otherwise they go straight
// into the leaf grads.
void detail::TensorAccess::sweep(const Tensor& loss, GradMap* named) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined loss");
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

    using Impl = detail::TensorImpl;
    auto grad_buffer = [](Impl* impl) -> detail::Buffer& {
        if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
        return impl->grad;
    };

    Impl* root = loss.impl_.get();
    if (!root->node) {
        if (root->requires_grad) {
            grad_buffer(root)[0] += 1.0;
            if (named && !root->name.empty()) (*named)[root->name] = {1.0};
        }
        return;
    }
    if (root->node->released)
        throw std::logic_error("backward: graph already released by a previous backward()");

    // Post-order DFS gives a topological order (inputs before consumers).
    std::vector<Impl*> order;
    std::unordered_map<Impl*, bool> visited;
    std::vector<std::pair<Impl*, std::size_t>> stack{{root, 0}};
    visited[root] = true;
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        if (impl->node && next < impl->node->inputs.size()) {
            Impl* child = impl->node->inputs[next++].impl_.get();
            if (!child->requires_grad || visited[child]) continue;
            if (child->node && child->node->released)
                throw std::logic_error("backward: graph already released by a previous backward()");
            visited[child] = true;
            stack.emplace_back(child, 0);
        } else {
            order.push_back(impl);
            stack.pop_back();
        }
    }

    std::unordered_map<Impl*, detail::Buffer> pending;
    pending[root].assign(1, 1.0);
    std::vector<Impl*> leaves;
    std::vector<std::shared_ptr<detail::GraphNode>> visited_nodes;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Impl* impl = *it;
        if (!impl->node) {
            leaves.push_back(impl);
            continue;
        }
        auto found = pending.find(impl);
        if (found == pending.end()) continue;
        detail::Buffer gout = std::move(found->second);
        pending.erase(found);

        auto& node = *impl->node;
        std::vector<std::span<double>> gin(node.inputs.size());
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            Impl* in = node.inputs[i].impl_.get();
            if (!in->requires_grad) continue;
            if (!in->node && !named) {
                gin[i] = grad_buffer(in);
                continue;
            }
            auto& buf = pending[in];
            if (buf.empty()) buf.assign(in->data.size(), 0.0);
            gin[i] = buf;
        }
        node.backward(gout, gin);
        node.released = true;
        visited_nodes.push_back(impl->node);
    }
    // Dropping inputs may free intermediate tensors, so it waits until the sweep is done.
    for (auto& node : visited_nodes) {
        node->backward = nullptr;
        node->inputs.clear();
    }
    if (!named) return;

    for (Impl* leaf : leaves) {
        const auto found = pending.find(leaf);
        if (found == pending.end()) continue;
        if (!leaf->name.empty()) (*named)[leaf->name].assign(found->second.begin(), found->second.end());
        if (leaf->grad.empty()) {
            leaf->grad = std::move(found->second);
        } else {
            MapVec(leaf->grad.data(), leaf->grad.size()) += CMapVec(found->second.data(), found->second.size());
        }
    }
}

GradMap backward(const Tensor& loss) {
    GradMap result;
    detail::TensorAccess::sweep(loss, &result);
    return result;
}

void accumulate_grad(const Tensor& loss) { detail::TensorAccess::sweep(loss, nullptr); }

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

double grad_check(const TensorFn& f, std::span<const Tensor> inputs, double eps) {
    return grad_check(f, f, inputs, eps);
}

double grad_check(const TensorFn& f, const TensorFn& reference, std::span<const Tensor> inputs, double eps) {
    std::vector<Tensor> args(inputs.begin(), inputs.end());
    for (auto& t : args) {
        if (!t.is_leaf() || !t.requires_grad())
            throw std::invalid_argument("grad_check: inputs must be requires-grad leaves");
        t.zero_grad();
    }
    backward(f(args));
    std::vector<std::vector<double>> analytic;
    for (auto& t : args) {
        analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                           : std::vector<double>(t.numel(), 0.0));
        t.zero_grad();
    }

    NoGradGuard no_grad;
    double worst = 0.0;
    for (std::size_t a = 0; a < args.size(); ++a) {
        auto values = args[a].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + eps;
            const double plus = reference(args).item();
            values[i] = saved - eps;
            const double minus = reference(args).item();
            values[i] = saved;
            const double numeric = (plus - minus) / (2.0 * eps);
            const double exact = analytic[a][i];
            const double denom = std::max({1.0, std::abs(exact), std::abs(numeric)});
            worst = std::max(worst, std::abs(exact - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace simts

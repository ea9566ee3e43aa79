#pragma once

// Dense double-precision tensors and a small reverse-mode differentiation
// engine over a fixed operation set. Graphs are built eagerly: each op
// computes its value on creation, so a Graph doubles as a forward trace
// that backward() can sweep in reverse.

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace lbrgm {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

/// Thrown when an operation produces NaN/Inf; carries the op name.
struct NonFiniteError : std::runtime_error {
    explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

/// Immutable dense tensor of 64-bit reals, flat row-major storage.
/// Copies share storage; there is no mutation after construction.
class Tensor {
public:
    Tensor() = default;

    /// Validating constructor: rejects NaN/Inf entries and shape/data
    /// size mismatches. Use for anything arriving from outside the engine.
    Tensor(Shape shape, std::vector<double> data);

    /// Engine-internal constructor: checks sizes but not finiteness
    /// (computed values are checked by the graph at the op level).
    static Tensor unchecked(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape);
    static Tensor scalar(double v);
    static Tensor vector(std::vector<double> v);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_ ? data_->size() : 0; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    bool empty() const { return size() == 0; }

    double operator[](std::size_t i) const { return (*data_)[i]; }
    const double* data() const { return data_ ? data_->data() : nullptr; }
    const std::vector<double>& vec() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    /// Value of a single-element tensor.
    double scalar_value() const;

private:
    Shape shape_{};
    std::shared_ptr<const std::vector<double>> data_{};
};

class Graph;

/// Handle to a node in a Graph.
struct Value {
    Graph* g = nullptr;
    std::int32_t id = -1;

    bool valid() const { return g != nullptr && id >= 0; }
    const Tensor& tensor() const;
};

namespace detail {

enum class OpKind : std::uint8_t {
    Constant, Input,
    Add, Sub, Mul, Div,
    AddConst, Scale,
    MatVec,
    Row, Index, Concat, Reshape,
    LRelu, Sigmoid, Sqrt, Square,
    Sum, SumSquares, Dot,
    MulScalar, DivScalar,
    BlockPool,
};

const char* op_name(OpKind k);

struct Node {
    OpKind kind;
    std::array<std::int32_t, 2> in{-1, -1};
    std::vector<std::int32_t> extra_in;  // Concat only
    double c = 0.0;                      // AddConst/Scale payload, LRelu slope
    std::size_t a0 = 0, a1 = 0, a2 = 0, a3 = 0;  // Row/Index index, BlockPool h,w,c,k
    Tensor value;
    std::vector<double> grad;
    bool needs_grad = false;
};

}  // namespace detail

/// Forward trace + reverse-mode gradient accumulator. Creation order of
/// nodes is a topological order, so backward() is a single reverse sweep.
/// Every op checks its output for NaN/Inf and throws NonFiniteError
/// naming the offending operation.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf that never receives a gradient (weights, observations).
    Value constant(Tensor t);
    /// Differentiable leaf.
    Value input(Tensor t);

    const Tensor& value(Value v) const;

    /// Accumulates d(loss)/d(node) for every node reachable from `loss`
    /// (which must be a single-element tensor). Resets previous gradients,
    /// so it may be called repeatedly on one graph.
    void backward(Value loss);

    /// Gradient of the last backward() target w.r.t. `v`; zeros if the
    /// node is off the computation path.
    Tensor grad(Value v) const;

    std::size_t node_count() const { return nodes_.size(); }

private:
    friend struct Value;
    friend Value add(Value, Value);
    friend Value sub(Value, Value);
    friend Value mul(Value, Value);
    friend Value div(Value, Value);
    friend Value add_const(Value, double);
    friend Value scale(Value, double);
    friend Value matvec(Value, Value);
    friend Value row(Value, std::size_t);
    friend Value index(Value, std::size_t);
    friend Value concat(const std::vector<Value>&);
    friend Value reshape(Value, Shape);
    friend Value lrelu(Value, double);
    friend Value sigmoid(Value);
    friend Value sqrt(Value);
    friend Value square(Value);
    friend Value sum(Value);
    friend Value sum_squares(Value);
    friend Value dot(Value, Value);
    friend Value mul_scalar(Value, Value);
    friend Value div_scalar(Value, Value);
    friend Value block_pool(Value, std::size_t, std::size_t, std::size_t, std::size_t);

    Value emit(detail::Node&& n);
    const detail::Node& node(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)]; }
    detail::Node& node(std::int32_t id) { return nodes_[static_cast<std::size_t>(id)]; }
    std::vector<double>& grad_buffer(std::int32_t id);

    std::vector<detail::Node> nodes_;
};

// Elementwise binary ops require identical shapes.
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value div(Value a, Value b);

inline Value operator+(Value a, Value b) { return add(a, b); }
inline Value operator-(Value a, Value b) { return sub(a, b); }
inline Value operator*(Value a, Value b) { return mul(a, b); }

Value add_const(Value a, double c);
Value scale(Value a, double c);

/// m: {r,c} matrix, x: {c} vector -> {r} vector.
Value matvec(Value m, Value x);

/// Row i of a {r,c} matrix as a {c} vector.
Value row(Value m, std::size_t i);
/// Single element as a {1} tensor.
Value index(Value v, std::size_t i);
/// Concatenation of vectors into one vector.
Value concat(const std::vector<Value>& parts);
Value reshape(Value a, Shape s);

/// Leaky ReLU; derivative at exactly 0 is the positive-side slope (1.0).
Value lrelu(Value a, double slope);
Value sigmoid(Value a);
Value sqrt(Value a);
Value square(Value a);

// Reductions produce {1} tensors.
Value sum(Value a);
Value sum_squares(Value a);
Value dot(Value a, Value b);

/// Broadcast-scale: every element of x multiplied / divided by the
/// single-element node s.
Value mul_scalar(Value x, Value s);
Value div_scalar(Value x, Value s);

/// k x k block average over an image stored flat as h*w*c row-major
/// (channel fastest). Output is (h/k)*(w/k)*c.
Value block_pool(Value x, std::size_t h, std::size_t w, std::size_t c, std::size_t k);

// ---------------------------------------------------------------------------
// Objective contract: named parameters + a builder closure.

struct NamedTensor {
    std::string name;
    Tensor value;
};

/// An objective as a graph builder over named parameters. `build` receives
/// one Value per parameter, in the same order the parameters are passed to
/// eval_objective/gradient, and must return a single-element Value.
struct GradSpec {
    std::string objective_name;
    std::vector<std::string> differentiable;
    std::function<Value(Graph&, const std::vector<Value>&)> build;
};

double eval_objective(const GradSpec& spec, const std::vector<NamedTensor>& params);

/// Gradients for every parameter named in spec.differentiable, same shapes
/// as the parameters, zero where a parameter is off the computation path.
std::vector<NamedTensor> gradient(const GradSpec& spec, const std::vector<NamedTensor>& params);

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
};

/// Central-difference check of gradient() against eval_objective().
/// Relative error is |a-b| / max(1e-12, |a|+|b|).
FiniteDiffReport finite_diff_check(const GradSpec& spec,
                                   const std::vector<NamedTensor>& params,
                                   double step);

}  // namespace lbrgm

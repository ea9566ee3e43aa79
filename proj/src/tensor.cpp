#include "lbrgm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lbrgm {

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return s.empty() ? 0 : n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "{";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "}";
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> data) {
    if (shape_size(shape) != data.size())
        throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match data size " +
                                    std::to_string(data.size()));
    for (std::size_t d : shape)
        if (d == 0) throw std::invalid_argument("tensor extents must be positive");
    for (double v : data)
        if (!std::isfinite(v)) throw std::invalid_argument("tensor rejects non-finite entries");
    shape_ = std::move(shape);
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::unchecked(Shape shape, std::vector<double> data) {
    if (shape_size(shape) != data.size())
        throw std::invalid_argument("tensor shape " + shape_str(shape) + " does not match data size " +
                                    std::to_string(data.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<const std::vector<double>>(std::move(data));
    return t;
}

Tensor Tensor::zeros(Shape shape) {
    const std::size_t n = shape_size(shape);
    return unchecked(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::vector(std::vector<double> v) {
    Shape s{v.size()};
    return Tensor(std::move(s), std::move(v));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
}

const std::vector<double>& Tensor::vec() const {
    static const std::vector<double> kEmpty;
    return data_ ? *data_ : kEmpty;
}

bool Tensor::all_finite() const {
    if (!data_) return true;
    for (double v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::scalar_value() const {
    if (size() != 1) throw std::invalid_argument("scalar_value on tensor of size " + std::to_string(size()));
    return (*data_)[0];
}

const Tensor& Value::tensor() const { return g->value(*this); }

namespace detail {

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Constant: return "constant";
        case OpKind::Input: return "input";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Mul: return "mul";
        case OpKind::Div: return "div";
        case OpKind::AddConst: return "add_const";
        case OpKind::Scale: return "scale";
        case OpKind::MatVec: return "matvec";
        case OpKind::Row: return "row";
        case OpKind::Index: return "index";
        case OpKind::Concat: return "concat";
        case OpKind::Reshape: return "reshape";
        case OpKind::LRelu: return "lrelu";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Sqrt: return "sqrt";
        case OpKind::Square: return "square";
        case OpKind::Sum: return "sum";
        case OpKind::SumSquares: return "sum_squares";
        case OpKind::Dot: return "dot";
        case OpKind::MulScalar: return "mul_scalar";
        case OpKind::DivScalar: return "div_scalar";
        case OpKind::BlockPool: return "block_pool";
    }
    return "?";
}

}  // namespace detail

using detail::Node;
using detail::OpKind;

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void require_same_graph(Value a, Value b) {
    require(a.valid() && b.valid() && a.g == b.g, "values must belong to the same graph");
}

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

Value Graph::emit(Node&& n) {
    // Output finiteness check: the non-finite-intermediate contract.
    for (double v : n.value.vec()) {
        if (!std::isfinite(v))
            throw NonFiniteError(std::string("non-finite value produced by op '") + detail::op_name(n.kind) + "'");
    }
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Value Graph::constant(Tensor t) {
    Node n;
    n.kind = OpKind::Constant;
    n.value = std::move(t);
    n.needs_grad = false;
    nodes_.push_back(std::move(n));  // leaves are caller-validated
    return Value{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Value Graph::input(Tensor t) {
    require(t.all_finite(), "input tensors must be finite");
    Node n;
    n.kind = OpKind::Input;
    n.value = std::move(t);
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Tensor& Graph::value(Value v) const {
    require(v.valid() && v.g == this, "value does not belong to this graph");
    return node(v.id).value;
}

std::vector<double>& Graph::grad_buffer(std::int32_t id) {
    Node& n = node(id);
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

Tensor Graph::grad(Value v) const {
    require(v.valid() && v.g == this, "value does not belong to this graph");
    const Node& n = node(v.id);
    if (n.grad.size() == n.value.size()) return Tensor::unchecked(n.value.shape(), n.grad);
    return Tensor::zeros(n.value.shape());
}

namespace {

Value binary_elementwise(OpKind kind, Value a, Value b) {
    require_same_graph(a, b);
    const Tensor& ta = a.tensor();
    const Tensor& tb = b.tensor();
    require(ta.same_shape(tb), std::string(detail::op_name(kind)) + ": shape mismatch " + shape_str(ta.shape()) +
                                   " vs " + shape_str(tb.shape()));
    std::vector<double> out(ta.size());
    switch (kind) {
        case OpKind::Add:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
            break;
        case OpKind::Sub:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] - tb[i];
            break;
        case OpKind::Mul:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * tb[i];
            break;
        case OpKind::Div:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] / tb[i];
            break;
        default: throw std::logic_error("not a binary elementwise op");
    }
    Node n;
    n.kind = kind;
    n.in = {a.id, b.id};
    n.value = Tensor::unchecked(ta.shape(), std::move(out));
    n.needs_grad = a.g->node(a.id).needs_grad || a.g->node(b.id).needs_grad;
    return a.g->emit(std::move(n));
}

}  // namespace

Value add(Value a, Value b) { return binary_elementwise(OpKind::Add, a, b); }
Value sub(Value a, Value b) { return binary_elementwise(OpKind::Sub, a, b); }
Value mul(Value a, Value b) { return binary_elementwise(OpKind::Mul, a, b); }
Value div(Value a, Value b) { return binary_elementwise(OpKind::Div, a, b); }

namespace {

Value unary(OpKind kind, Value a, double c = 0.0) {
    require(a.valid(), "invalid value");
    const Tensor& ta = a.tensor();
    std::vector<double> out(ta.size());
    switch (kind) {
        case OpKind::AddConst:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + c;
            break;
        case OpKind::Scale:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * ta[i];
            break;
        case OpKind::LRelu:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] >= 0.0 ? ta[i] : c * ta[i];
            break;
        case OpKind::Sigmoid:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(ta[i]);
            break;
        case OpKind::Sqrt:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(ta[i]);
            break;
        case OpKind::Square:
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] * ta[i];
            break;
        default: throw std::logic_error("not a unary op");
    }
    Node n;
    n.kind = kind;
    n.in = {a.id, -1};
    n.c = c;
    n.value = Tensor::unchecked(ta.shape(), std::move(out));
    n.needs_grad = a.g->node(a.id).needs_grad;
    return a.g->emit(std::move(n));
}

}  // namespace

Value add_const(Value a, double c) { return unary(OpKind::AddConst, a, c); }
Value scale(Value a, double c) { return unary(OpKind::Scale, a, c); }
Value lrelu(Value a, double slope) { return unary(OpKind::LRelu, a, slope); }
Value sigmoid(Value a) { return unary(OpKind::Sigmoid, a); }
Value sqrt(Value a) { return unary(OpKind::Sqrt, a); }
Value square(Value a) { return unary(OpKind::Square, a); }

Value matvec(Value m, Value x) {
    require_same_graph(m, x);
    const Tensor& tm = m.tensor();
    const Tensor& tx = x.tensor();
    require(tm.shape().size() == 2, "matvec: left operand must be a matrix");
    require(tx.shape().size() == 1, "matvec: right operand must be a vector");
    const std::size_t r = tm.dim(0), c = tm.dim(1);
    require(c == tx.dim(0), "matvec: inner dimensions differ (" + std::to_string(c) + " vs " +
                                std::to_string(tx.dim(0)) + ")");
    std::vector<double> out(r, 0.0);
    const double* md = tm.data();
    const double* xd = tx.data();
    for (std::size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        const double* rowp = md + i * c;
        for (std::size_t j = 0; j < c; ++j) acc += rowp[j] * xd[j];
        out[i] = acc;
    }
    Node n;
    n.kind = OpKind::MatVec;
    n.in = {m.id, x.id};
    n.value = Tensor::unchecked({r}, std::move(out));
    n.needs_grad = m.g->node(m.id).needs_grad || m.g->node(x.id).needs_grad;
    return m.g->emit(std::move(n));
}

Value row(Value m, std::size_t i) {
    const Tensor& tm = m.tensor();
    require(tm.shape().size() == 2, "row: operand must be a matrix");
    require(i < tm.dim(0), "row: index " + std::to_string(i) + " out of range");
    const std::size_t c = tm.dim(1);
    std::vector<double> out(tm.data() + i * c, tm.data() + (i + 1) * c);
    Node n;
    n.kind = OpKind::Row;
    n.in = {m.id, -1};
    n.a0 = i;
    n.value = Tensor::unchecked({c}, std::move(out));
    n.needs_grad = m.g->node(m.id).needs_grad;
    return m.g->emit(std::move(n));
}

Value index(Value v, std::size_t i) {
    const Tensor& tv = v.tensor();
    require(i < tv.size(), "index: out of range");
    Node n;
    n.kind = OpKind::Index;
    n.in = {v.id, -1};
    n.a0 = i;
    n.value = Tensor::unchecked({1}, {tv[i]});
    n.needs_grad = v.g->node(v.id).needs_grad;
    return v.g->emit(std::move(n));
}

Value concat(const std::vector<Value>& parts) {
    require(!parts.empty(), "concat: no parts");
    Graph* g = parts[0].g;
    std::size_t total = 0;
    bool needs = false;
    for (Value p : parts) {
        require(p.valid() && p.g == g, "concat: parts must share a graph");
        require(p.tensor().shape().size() == 1, "concat: parts must be vectors");
        total += p.tensor().size();
        needs = needs || g->node(p.id).needs_grad;
    }
    std::vector<double> out;
    out.reserve(total);
    for (Value p : parts) {
        const Tensor& t = p.tensor();
        out.insert(out.end(), t.data(), t.data() + t.size());
    }
    Node n;
    n.kind = OpKind::Concat;
    n.in = {-1, -1};
    n.extra_in.reserve(parts.size());
    for (Value p : parts) n.extra_in.push_back(p.id);
    n.value = Tensor::unchecked({total}, std::move(out));
    n.needs_grad = needs;
    return g->emit(std::move(n));
}

Value reshape(Value a, Shape s) {
    const Tensor& ta = a.tensor();
    require(shape_size(s) == ta.size(), "reshape: element count mismatch");
    Node n;
    n.kind = OpKind::Reshape;
    n.in = {a.id, -1};
    n.value = Tensor::unchecked(std::move(s), ta.vec());
    n.needs_grad = a.g->node(a.id).needs_grad;
    return a.g->emit(std::move(n));
}

namespace {

Value reduction(OpKind kind, Value a, Value b = {}) {
    const Tensor& ta = a.tensor();
    double acc = 0.0;
    switch (kind) {
        case OpKind::Sum:
            for (std::size_t i = 0; i < ta.size(); ++i) acc += ta[i];
            break;
        case OpKind::SumSquares:
            for (std::size_t i = 0; i < ta.size(); ++i) acc += ta[i] * ta[i];
            break;
        case OpKind::Dot: {
            const Tensor& tb = b.tensor();
            require(ta.same_shape(tb), "dot: shape mismatch");
            for (std::size_t i = 0; i < ta.size(); ++i) acc += ta[i] * tb[i];
            break;
        }
        default: throw std::logic_error("not a reduction");
    }
    Node n;
    n.kind = kind;
    n.in = {a.id, b.valid() ? b.id : -1};
    n.value = Tensor::unchecked({1}, {acc});
    n.needs_grad = a.g->node(a.id).needs_grad || (b.valid() && a.g->node(b.id).needs_grad);
    return a.g->emit(std::move(n));
}

}  // namespace

Value sum(Value a) { return reduction(OpKind::Sum, a); }
Value sum_squares(Value a) { return reduction(OpKind::SumSquares, a); }
Value dot(Value a, Value b) {
    require_same_graph(a, b);
    return reduction(OpKind::Dot, a, b);
}

namespace {

Value scalar_broadcast(OpKind kind, Value x, Value s) {
    require_same_graph(x, s);
    const Tensor& tx = x.tensor();
    const Tensor& ts = s.tensor();
    require(ts.size() == 1, std::string(detail::op_name(kind)) + ": scale operand must be a single element");
    const double sv = ts[0];
    std::vector<double> out(tx.size());
    if (kind == OpKind::MulScalar)
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = tx[i] * sv;
    else
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = tx[i] / sv;
    Node n;
    n.kind = kind;
    n.in = {x.id, s.id};
    n.value = Tensor::unchecked(tx.shape(), std::move(out));
    n.needs_grad = x.g->node(x.id).needs_grad || x.g->node(s.id).needs_grad;
    return x.g->emit(std::move(n));
}

}  // namespace

Value mul_scalar(Value x, Value s) { return scalar_broadcast(OpKind::MulScalar, x, s); }
Value div_scalar(Value x, Value s) { return scalar_broadcast(OpKind::DivScalar, x, s); }

Value block_pool(Value x, std::size_t h, std::size_t w, std::size_t c, std::size_t k) {
    const Tensor& tx = x.tensor();
    require(k >= 1, "block_pool: factor must be >= 1");
    require(tx.size() == h * w * c, "block_pool: dimensions do not match data size");
    require(h % k == 0 && w % k == 0, "block_pool: factor " + std::to_string(k) + " must divide both " +
                                          std::to_string(h) + " and " + std::to_string(w));
    const std::size_t oh = h / k, ow = w / k;
    std::vector<double> out(oh * ow * c, 0.0);
    const double* xd = tx.data();
    const double inv = 1.0 / static_cast<double>(k * k);
    for (std::size_t oi = 0; oi < oh; ++oi)
        for (std::size_t oj = 0; oj < ow; ++oj)
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (std::size_t di = 0; di < k; ++di)
                    for (std::size_t dj = 0; dj < k; ++dj)
                        acc += xd[((oi * k + di) * w + (oj * k + dj)) * c + ch];
                out[(oi * ow + oj) * c + ch] = acc * inv;
            }
    Node n;
    n.kind = OpKind::BlockPool;
    n.in = {x.id, -1};
    n.a0 = h;
    n.a1 = w;
    n.a2 = c;
    n.a3 = k;
    n.value = Tensor::unchecked({oh * ow * c}, std::move(out));
    n.needs_grad = x.g->node(x.id).needs_grad;
    return x.g->emit(std::move(n));
}

void Graph::backward(Value loss) {
    require(loss.valid() && loss.g == this, "loss does not belong to this graph");
    require(node(loss.id).value.size() == 1, "backward target must be a single element");

    for (Node& n : nodes_)
        if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    grad_buffer(loss.id)[0] = 1.0;

    for (std::int32_t id = loss.id; id >= 0; --id) {
        Node& n = node(id);
        if (!n.needs_grad || n.grad.empty()) continue;
        const std::vector<double>& g = n.grad;
        auto needs = [&](std::int32_t in_id) { return in_id >= 0 && node(in_id).needs_grad; };

        switch (n.kind) {
            case OpKind::Constant:
            case OpKind::Input:
                break;
            case OpKind::Add: {
                if (needs(n.in[0])) {
                    auto& ga = grad_buffer(n.in[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (needs(n.in[1])) {
                    auto& gb = grad_buffer(n.in[1]);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                }
                break;
            }
            case OpKind::Sub: {
                if (needs(n.in[0])) {
                    auto& ga = grad_buffer(n.in[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                }
                if (needs(n.in[1])) {
                    auto& gb = grad_buffer(n.in[1]);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                }
                break;
            }
            case OpKind::Mul: {
                const Tensor& a = node(n.in[0]).value;
                const Tensor& b = node(n.in[1]).value;
                if (needs(n.in[0])) {
                    auto& ga = grad_buffer(n.in[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
                }
                if (needs(n.in[1])) {
                    auto& gb = grad_buffer(n.in[1]);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
                }
                break;
            }
            case OpKind::Div: {
                const Tensor& a = node(n.in[0]).value;
                const Tensor& b = node(n.in[1]).value;
                if (needs(n.in[0])) {
                    auto& ga = grad_buffer(n.in[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / b[i];
                }
                if (needs(n.in[1])) {
                    auto& gb = grad_buffer(n.in[1]);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i] * a[i] / (b[i] * b[i]);
                }
                break;
            }
            case OpKind::AddConst: {
                auto& ga = grad_buffer(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                break;
            }
            case OpKind::Scale: {
                auto& ga = grad_buffer(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.c * g[i];
                break;
            }
            case OpKind::MatVec: {
                const Tensor& m = node(n.in[0]).value;
                const Tensor& x = node(n.in[1]).value;
                const std::size_t r = m.dim(0), cdim = m.dim(1);
                if (needs(n.in[1])) {
                    auto& gx = grad_buffer(n.in[1]);
                    const double* md = m.data();
                    for (std::size_t i = 0; i < r; ++i) {
                        const double gi = g[i];
                        if (gi == 0.0) continue;
                        const double* rowp = md + i * cdim;
                        for (std::size_t j = 0; j < cdim; ++j) gx[j] += gi * rowp[j];
                    }
                }
                if (needs(n.in[0])) {
                    auto& gm = grad_buffer(n.in[0]);
                    for (std::size_t i = 0; i < r; ++i) {
                        const double gi = g[i];
                        if (gi == 0.0) continue;
                        for (std::size_t j = 0; j < cdim; ++j) gm[i * cdim + j] += gi * x[j];
                    }
                }
                break;
            }
            case OpKind::Row: {
                auto& gm = grad_buffer(n.in[0]);
                const std::size_t cdim = n.value.size();
                for (std::size_t j = 0; j < cdim; ++j) gm[n.a0 * cdim + j] += g[j];
                break;
            }
            case OpKind::Index: {
                grad_buffer(n.in[0])[n.a0] += g[0];
                break;
            }
            case OpKind::Concat: {
                std::size_t off = 0;
                for (std::int32_t pid : n.extra_in) {
                    const std::size_t len = node(pid).value.size();
                    if (needs(pid)) {
                        auto& gp = grad_buffer(pid);
                        for (std::size_t i = 0; i < len; ++i) gp[i] += g[off + i];
                    }
                    off += len;
                }
                break;
            }
            case OpKind::Reshape: {
                auto& ga = grad_buffer(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                break;
            }
            case OpKind::LRelu: {
                const Tensor& a = node(n.in[0]).value;
                auto& ga = grad_buffer(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (a[i] >= 0.0 ? 1.0 : n.c);
                break;
            }
            case OpKind::Sigmoid: {
                auto& ga = grad_buffer(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    const double y = n.value[i];
                    ga[i] += g[i] * y * (1.0 - y);
                }
                break;
            }
            case OpKind::Sqrt: {
                auto& ga = grad_buffer(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / n.value[i];
                break;
            }
            case OpKind::Square: {
                const Tensor& a = node(n.in[0]).value;
                auto& ga = grad_buffer(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 2.0 * a[i];
                break;
            }
            case OpKind::Sum: {
                auto& ga = grad_buffer(n.in[0]);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
                break;
            }
            case OpKind::SumSquares: {
                const Tensor& a = node(n.in[0]).value;
                auto& ga = grad_buffer(n.in[0]);
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * 2.0 * a[i];
                break;
            }
            case OpKind::Dot: {
                const Tensor& a = node(n.in[0]).value;
                const Tensor& b = node(n.in[1]).value;
                if (needs(n.in[0])) {
                    auto& ga = grad_buffer(n.in[0]);
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0] * b[i];
                }
                if (needs(n.in[1])) {
                    auto& gb = grad_buffer(n.in[1]);
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[0] * a[i];
                }
                break;
            }
            case OpKind::MulScalar: {
                const Tensor& x = node(n.in[0]).value;
                const double s = node(n.in[1]).value[0];
                if (needs(n.in[0])) {
                    auto& gx = grad_buffer(n.in[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
                }
                if (needs(n.in[1])) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
                    grad_buffer(n.in[1])[0] += acc;
                }
                break;
            }
            case OpKind::DivScalar: {
                const Tensor& x = node(n.in[0]).value;
                const double s = node(n.in[1]).value[0];
                if (needs(n.in[0])) {
                    auto& gx = grad_buffer(n.in[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / s;
                }
                if (needs(n.in[1])) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
                    grad_buffer(n.in[1])[0] -= acc / (s * s);
                }
                break;
            }
            case OpKind::BlockPool: {
                auto& gx = grad_buffer(n.in[0]);
                const std::size_t h = n.a0, w = n.a1, c = n.a2, k = n.a3;
                const std::size_t oh = h / k, ow = w / k;
                const double inv = 1.0 / static_cast<double>(k * k);
                for (std::size_t oi = 0; oi < oh; ++oi)
                    for (std::size_t oj = 0; oj < ow; ++oj)
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            const double gv = g[(oi * ow + oj) * c + ch] * inv;
                            if (gv == 0.0) continue;
                            for (std::size_t di = 0; di < k; ++di)
                                for (std::size_t dj = 0; dj < k; ++dj)
                                    gx[((oi * k + di) * w + (oj * k + dj)) * c + ch] += gv;
                        }
                break;
            }
        }
    }
}

// ---------------------------------------------------------------------------

namespace {

struct BuiltObjective {
    Graph graph;
    std::vector<Value> params;
    Value loss;
};

void build_into(BuiltObjective& built, const GradSpec& spec, const std::vector<NamedTensor>& params) {
    require(static_cast<bool>(spec.build), "GradSpec has no builder");
    built.params.reserve(params.size());
    for (const NamedTensor& p : params) built.params.push_back(built.graph.input(p.value));
    built.loss = spec.build(built.graph, built.params);
    require(built.loss.valid() && built.loss.g == &built.graph, "objective builder must return a value of its graph");
    require(built.loss.tensor().size() == 1, "objective must evaluate to a single element");
}

std::size_t param_pos(const std::vector<NamedTensor>& params, const std::string& name) {
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].name == name) return i;
    throw std::invalid_argument("differentiable parameter '" + name + "' not among the provided parameters");
}

}  // namespace

double eval_objective(const GradSpec& spec, const std::vector<NamedTensor>& params) {
    BuiltObjective built;
    build_into(built, spec, params);
    return built.loss.tensor().scalar_value();
}

std::vector<NamedTensor> gradient(const GradSpec& spec, const std::vector<NamedTensor>& params) {
    BuiltObjective built;
    build_into(built, spec, params);
    built.graph.backward(built.loss);
    std::vector<NamedTensor> grads;
    grads.reserve(spec.differentiable.size());
    for (const std::string& name : spec.differentiable) {
        const std::size_t i = param_pos(params, name);
        grads.push_back({name, built.graph.grad(built.params[i])});
    }
    return grads;
}

FiniteDiffReport finite_diff_check(const GradSpec& spec, const std::vector<NamedTensor>& params, double step) {
    require(step > 0.0, "finite_diff_check: step must be positive");
    const std::vector<NamedTensor> analytic = gradient(spec, params);

    FiniteDiffReport report;
    std::vector<NamedTensor> work = params;
    for (const NamedTensor& g : analytic) {
        const std::size_t pi = param_pos(params, g.name);
        const Tensor& base = params[pi].value;
        for (std::size_t j = 0; j < base.size(); ++j) {
            std::vector<double> plus = base.vec();
            std::vector<double> minus = base.vec();
            plus[j] += step;
            minus[j] -= step;
            work[pi].value = Tensor::unchecked(base.shape(), std::move(plus));
            const double fp = eval_objective(spec, work);
            work[pi].value = Tensor::unchecked(base.shape(), std::move(minus));
            const double fm = eval_objective(spec, work);
            work[pi].value = base;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = g.value[j];
            const double rel = std::abs(an - fd) / std::max(1e-12, std::abs(an) + std::abs(fd));
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = g.name;
                report.worst_index = j;
            }
        }
    }
    return report;
}

}  // namespace lbrgm

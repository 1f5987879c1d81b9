#include "cxrgen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cxrgen {

namespace {

thread_local Tape* g_current_tape = nullptr;
thread_local std::vector<Tape*> g_tape_stack;  // supports NoGradGuard nesting

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    // max(x, 0) + log1p(exp(-|x|)) is exact through the whole range.
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (std::int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

// ---- Tensor ---------------------------------------------------------------

struct Tensor::Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first use
    bool requires_grad = false;
};

Tensor::Tensor() : impl_(std::make_shared<Impl>()) {}

Tensor Tensor::zeros(Shape shape) {
    for (std::int64_t d : shape) {
        if (d <= 0) throw ShapeError("tensor: non-positive dimension in " + shape_str(shape));
    }
    Tensor t;
    t.impl_->shape = std::move(shape);
    t.impl_->data.assign(static_cast<std::size_t>(shape_numel(t.impl_->shape)), 0.0);
    return t;
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    Tensor t = zeros(std::move(shape));
    if (static_cast<std::int64_t>(values.size()) != t.numel()) {
        throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                         shape_str(t.shape()));
    }
    t.impl_->data = std::move(values);
    return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev) {
    Tensor t = zeros(std::move(shape));
    for (double& v : t.impl_->data) v = rng.normal(0.0, stddev);
    return t;
}

const Shape& Tensor::shape() const { return impl_->shape; }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl_->data.size()); }
std::int64_t Tensor::dim(std::size_t axis) const { return impl_->shape.at(axis); }
std::size_t Tensor::rank() const { return impl_->shape.size(); }

std::vector<double>& Tensor::data() { return impl_->data; }
const std::vector<double>& Tensor::data() const { return impl_->data; }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
    return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
}

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::vector<double>& Tensor::grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
    const_cast<Tensor*>(this)->grad();
    return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
}

bool Tensor::defined() const { return numel() > 0; }
bool Tensor::same_storage(const Tensor& other) const { return impl_ == other.impl_; }

// ---- Tape -----------------------------------------------------------------

Tape::Tape() : prev_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

NoGradGuard::NoGradGuard() {
    g_tape_stack.push_back(g_current_tape);
    g_current_tape = nullptr;
}

NoGradGuard::~NoGradGuard() {
    g_current_tape = g_tape_stack.back();
    g_tape_stack.pop_back();
}

void Tape::record(const Tensor& out, std::function<void()> node) {
    outputs_.push_back(out);
    nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) return;  // constant graph: nothing to do
    Tape* t = current();
    if (!t) throw ContractError("backward: no active tape");
    for (Tensor& o : t->outputs_) o.zero_grad();  // only leaf grads persist
    Tensor seed = loss;
    seed.grad()[0] += 1.0;
    for (auto it = t->nodes_.rbegin(); it != t->nodes_.rend(); ++it) (*it)();
}

// ---- op plumbing ----------------------------------------------------------

namespace {

bool tracing(std::initializer_list<const Tensor*> inputs) {
    if (!Tape::current()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void record(Tensor& out, std::function<void()> node) {
    out.set_requires_grad(true);
    Tape::current()->record(out, std::move(node));
}

// Broadcast layout for binary elementwise ops: operands index modulo their own
// numel, which realizes equal shapes, scalar operands, and trailing-suffix
// broadcast with one rule.
void check_binary(const char* name, const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa == sb || a.numel() == 1 || b.numel() == 1) return;
    const Shape& big = (a.numel() >= b.numel()) ? sa : sb;
    const Shape& small = (a.numel() >= b.numel()) ? sb : sa;
    if (small.size() < big.size() &&
        std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()))) {
        return;
    }
    throw ShapeError(std::string(name) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) +
                     " do not conform");
}

const Shape& binary_out_shape(const Tensor& a, const Tensor& b) {
    return (a.numel() >= b.numel()) ? a.shape() : b.shape();
}

}  // namespace

// ---- binary elementwise ---------------------------------------------------

enum class BinOp { Add, Sub, Mul, Div };

// Applies fn(out_index, a_index, b_index) over the broadcast layout without
// per-element modulo: the smaller operand's flat index repeats as the trailing
// block of the larger one's.
template <typename Fn>
static void for_broadcast(std::int64_t n, std::int64_t na, std::int64_t nb, Fn&& fn) {
    if (na == n && nb == n) {
        for (std::int64_t i = 0; i < n; ++i) fn(i, i, i);
    } else if (na == n) {
        for (std::int64_t r = 0; r < n / nb; ++r) {
            const std::int64_t off = r * nb;
            for (std::int64_t j = 0; j < nb; ++j) fn(off + j, off + j, j);
        }
    } else {
        for (std::int64_t r = 0; r < n / na; ++r) {
            const std::int64_t off = r * na;
            for (std::int64_t j = 0; j < na; ++j) fn(off + j, j, off + j);
        }
    }
}

static Tensor binary_op(const char* name, BinOp op, const Tensor& a, const Tensor& b) {
    check_binary(name, a, b);
    Tensor out = Tensor::zeros(binary_out_shape(a, b));
    const std::int64_t n = out.numel();
    const std::int64_t na = a.numel();
    const std::int64_t nb = b.numel();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    switch (op) {
        case BinOp::Add:
            for_broadcast(n, na, nb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                po[i] = pa[ia] + pb[ib];
            });
            break;
        case BinOp::Sub:
            for_broadcast(n, na, nb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                po[i] = pa[ia] - pb[ib];
            });
            break;
        case BinOp::Mul:
            for_broadcast(n, na, nb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                po[i] = pa[ia] * pb[ib];
            });
            break;
        case BinOp::Div:
            for (std::int64_t i = 0; i < nb; ++i) {
                if (pb[i] == 0.0) throw DomainError("div: division by zero");
            }
            for_broadcast(n, na, nb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                po[i] = pa[ia] / pb[ib];
            });
            break;
    }
    if (tracing({&a, &b})) {
        Tensor ta = a, tb = b, to = out;
        record(out, [ta, tb, to, op, n, na, nb]() mutable {
            if (!to.has_grad()) return;
            const double* g = to.grad().data();
            const double* pa2 = ta.data().data();
            const double* pb2 = tb.data().data();
            double* ga = ta.requires_grad() ? ta.grad().data() : nullptr;
            double* gb = tb.requires_grad() ? tb.grad().data() : nullptr;
            for_broadcast(n, na, nb, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
                const double gi = g[i];
                switch (op) {
                    case BinOp::Add:
                        if (ga) ga[ia] += gi;
                        if (gb) gb[ib] += gi;
                        break;
                    case BinOp::Sub:
                        if (ga) ga[ia] += gi;
                        if (gb) gb[ib] -= gi;
                        break;
                    case BinOp::Mul:
                        if (ga) ga[ia] += gi * pb2[ib];
                        if (gb) gb[ib] += gi * pa2[ia];
                        break;
                    case BinOp::Div: {
                        const double bv = pb2[ib];
                        if (ga) ga[ia] += gi / bv;
                        if (gb) gb[ib] -= gi * pa2[ia] / (bv * bv);
                        break;
                    }
                }
            });
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", BinOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op("div", BinOp::Div, a, b); }

// ---- matmul ---------------------------------------------------------------

namespace {

// C[m,n] += A[m,k] * B[k,n]; the j-inner loops vectorize.
void mm_acc(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = b + kk * n;
            for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// dA[m,k] += G[m,n] * B[k,n]^T  (dot of rows)
void mm_acc_gbt(const double* g, const double* b, double* da, std::int64_t m, std::int64_t k,
                std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* grow = g + i * n;
        double* darow = da + i * k;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double* brow = b + kk * n;
            double s = 0.0;
            for (std::int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
            darow[kk] += s;
        }
    }
}

// dB[k,n] += A[m,k]^T * G[m,n]
void mm_acc_atg(const double* a, const double* g, double* db, std::int64_t m, std::int64_t k,
                std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        const double* grow = g + i * n;
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            double* dbrow = db + kk * n;
            for (std::int64_t j = 0; j < n; ++j) dbrow[j] += av * grow[j];
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({m, n});
    mm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
    if (tracing({&a, &b})) {
        Tensor ta = a, tb = b, to = out;
        record(out, [ta, tb, to, m, k, n]() mutable {
            if (!to.has_grad()) return;
            const double* g = to.grad().data();
            if (ta.requires_grad()) mm_acc_gbt(g, tb.data().data(), ta.grad().data(), m, k, n);
            if (tb.requires_grad()) mm_acc_atg(ta.data().data(), g, tb.grad().data(), m, k, n);
        });
    }
    return out;
}

// ---- unary elementwise ----------------------------------------------------

enum class UnOp { Exp, Log, Sqrt, Silu, Sigmoid, Softplus, Tanh };

static Tensor unary_op(const char* name, UnOp op, const Tensor& x) {
    Tensor out = Tensor::zeros(x.shape());
    const std::int64_t n = x.numel();
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = px[i];
        switch (op) {
            case UnOp::Exp: {
                const double y = std::exp(v);
                if (!std::isfinite(y) && std::isfinite(v)) {
                    throw DomainError("exp: overflow at input " + std::to_string(v));
                }
                po[i] = y;
                break;
            }
            case UnOp::Log:
                if (v <= 0.0) throw DomainError("log: input " + std::to_string(v) + " <= 0");
                po[i] = std::log(v);
                break;
            case UnOp::Sqrt:
                if (v < 0.0) throw DomainError("sqrt: input " + std::to_string(v) + " < 0");
                po[i] = std::sqrt(v);
                break;
            case UnOp::Silu: po[i] = v * stable_sigmoid(v); break;
            case UnOp::Sigmoid: po[i] = stable_sigmoid(v); break;
            case UnOp::Softplus: po[i] = stable_softplus(v); break;
            case UnOp::Tanh: po[i] = std::tanh(v); break;
        }
    }
    (void)name;
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        record(out, [tx, to, op, n]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            const double* px2 = tx.data().data();
            const double* py = to.data().data();
            double* gx = tx.grad().data();
            for (std::int64_t i = 0; i < n; ++i) {
                double d = 0.0;
                switch (op) {
                    case UnOp::Exp: d = py[i]; break;
                    case UnOp::Log: d = 1.0 / px2[i]; break;
                    case UnOp::Sqrt: d = 0.5 / py[i]; break;
                    case UnOp::Silu: {
                        const double s = stable_sigmoid(px2[i]);
                        d = s + px2[i] * s * (1.0 - s);
                        break;
                    }
                    case UnOp::Sigmoid: d = py[i] * (1.0 - py[i]); break;
                    case UnOp::Softplus: d = stable_sigmoid(px2[i]); break;
                    case UnOp::Tanh: d = 1.0 - py[i] * py[i]; break;
                }
                gx[i] += g[i] * d;
            }
        });
    }
    return out;
}

Tensor exp(const Tensor& x) { return unary_op("exp", UnOp::Exp, x); }
Tensor log(const Tensor& x) { return unary_op("log", UnOp::Log, x); }
Tensor sqrt(const Tensor& x) { return unary_op("sqrt", UnOp::Sqrt, x); }
Tensor silu(const Tensor& x) { return unary_op("silu", UnOp::Silu, x); }
Tensor sigmoid(const Tensor& x) { return unary_op("sigmoid", UnOp::Sigmoid, x); }
Tensor softplus(const Tensor& x) { return unary_op("softplus", UnOp::Softplus, x); }
Tensor tanh(const Tensor& x) { return unary_op("tanh", UnOp::Tanh, x); }

// ---- normalization --------------------------------------------------------

Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps) {
    if (x.rank() < 1) throw ShapeError("rms_norm: rank-0 input");
    const std::int64_t n = x.shape().back();
    if (gain.rank() != 1 || gain.dim(0) != n) {
        throw ShapeError("rms_norm: gain " + shape_str(gain.shape()) + " does not match last axis " +
                         std::to_string(n));
    }
    const std::int64_t rows = x.numel() / n;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> inv_store(static_cast<std::size_t>(rows));
    const double* px = x.data().data();
    const double* pg = gain.data().data();
    double* po = out.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double* yr = po + r * n;
        double ms = 0.0;
        for (std::int64_t j = 0; j < n; ++j) ms += xr[j] * xr[j];
        ms /= static_cast<double>(n);
        const double inv = 1.0 / std::sqrt(ms + eps);
        inv_store[static_cast<std::size_t>(r)] = inv;
        for (std::int64_t j = 0; j < n; ++j) yr[j] = pg[j] * xr[j] * inv;
    }
    if (tracing({&x, &gain})) {
        Tensor tx = x, tg = gain, to = out;
        auto inv_saved = std::make_shared<std::vector<double>>(std::move(inv_store));
        record(out, [tx, tg, to, inv_saved, rows, n]() mutable {
            if (!to.has_grad()) return;
            const double* g = to.grad().data();
            const double* px2 = tx.data().data();
            const double* pg2 = tg.data().data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* xr = px2 + r * n;
                const double* gr = g + r * n;
                const double inv = (*inv_saved)[static_cast<std::size_t>(r)];
                if (tx.requires_grad()) {
                    double* gx = tx.grad().data() + r * n;
                    double t = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) t += gr[j] * pg2[j] * xr[j];
                    const double coef = inv * inv * inv * t / static_cast<double>(n);
                    for (std::int64_t j = 0; j < n; ++j) gx[j] += gr[j] * pg2[j] * inv - xr[j] * coef;
                }
                if (tg.requires_grad()) {
                    double* gg = tg.grad().data();
                    for (std::int64_t j = 0; j < n; ++j) gg[j] += gr[j] * xr[j] * inv;
                }
            }
        });
    }
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("softmax: rank-0 input");
    const std::int64_t n = x.shape().back();
    const std::int64_t rows = x.numel() / n;
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double* yr = po + r * n;
        double m = xr[0];
        for (std::int64_t j = 1; j < n; ++j) m = std::max(m, xr[j]);
        double se = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            yr[j] = std::exp(xr[j] - m);
            se += yr[j];
        }
        const double inv = 1.0 / se;
        for (std::int64_t j = 0; j < n; ++j) yr[j] *= inv;
    }
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        record(out, [tx, to, rows, n]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            const double* py = to.data().data();
            double* gx = tx.grad().data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gr = g + r * n;
                const double* yr = py + r * n;
                double dot = 0.0;
                for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                for (std::int64_t j = 0; j < n; ++j) gx[r * n + j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<std::int64_t>& targets) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [rows, classes]");
    const std::int64_t rows = logits.dim(0);
    const std::int64_t v = logits.dim(1);
    if (static_cast<std::int64_t>(targets.size()) != rows) {
        throw ContractError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                            std::to_string(rows) + " rows");
    }
    for (std::int64_t t : targets) {
        if (t < 0 || t >= v) throw ContractError("cross_entropy: target id " + std::to_string(t) +
                                                 " outside [0," + std::to_string(v) + ")");
    }
    Tensor out = Tensor::zeros({rows});
    std::vector<double> probs(static_cast<std::size_t>(rows * v));
    const double* px = logits.data().data();
    double* po = out.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * v;
        double* pr = probs.data() + r * v;
        double m = xr[0];
        for (std::int64_t j = 1; j < v; ++j) m = std::max(m, xr[j]);
        double se = 0.0;
        for (std::int64_t j = 0; j < v; ++j) {
            pr[j] = std::exp(xr[j] - m);
            se += pr[j];
        }
        const double inv = 1.0 / se;
        for (std::int64_t j = 0; j < v; ++j) pr[j] *= inv;
        po[r] = m + std::log(se) - xr[targets[static_cast<std::size_t>(r)]];
    }
    if (tracing({&logits})) {
        Tensor tx = logits, to = out;
        auto probs_saved = std::make_shared<std::vector<double>>(std::move(probs));
        auto tgt = std::make_shared<std::vector<std::int64_t>>(targets);
        record(out, [tx, to, probs_saved, tgt, rows, v]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            double* gx = tx.grad().data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double gr = g[r];
                const double* pr = probs_saved->data() + r * v;
                double* gxr = gx + r * v;
                for (std::int64_t j = 0; j < v; ++j) gxr[j] += gr * pr[j];
                gxr[(*tgt)[static_cast<std::size_t>(r)]] -= gr;
            }
        });
    }
    return out;
}

Tensor l2_normalize_rows(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("l2_normalize: rank-0 input");
    const std::int64_t n = x.shape().back();
    const std::int64_t rows = x.numel() / n;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> inv_store(static_cast<std::size_t>(rows));
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = px + r * n;
        double ss = 0.0;
        for (std::int64_t j = 0; j < n; ++j) ss += xr[j] * xr[j];
        if (ss == 0.0) throw DomainError("l2_normalize: zero-norm row " + std::to_string(r));
        const double inv = 1.0 / std::sqrt(ss);
        inv_store[static_cast<std::size_t>(r)] = inv;
        for (std::int64_t j = 0; j < n; ++j) po[r * n + j] = xr[j] * inv;
    }
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        auto inv_saved = std::make_shared<std::vector<double>>(std::move(inv_store));
        record(out, [tx, to, inv_saved, rows, n]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            const double* py = to.data().data();
            double* gx = tx.grad().data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* gr = g + r * n;
                const double* yr = py + r * n;
                const double inv = (*inv_saved)[static_cast<std::size_t>(r)];
                double dot = 0.0;
                for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                for (std::int64_t j = 0; j < n; ++j) gx[r * n + j] += (gr[j] - yr[j] * dot) * inv;
            }
        });
    }
    return out;
}

// ---- structural ops -------------------------------------------------------

namespace {

std::int64_t row_size(const Tensor& x) {
    return x.rank() <= 1 ? 1 : x.numel() / x.dim(0);
}

}  // namespace

Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t len) {
    if (x.rank() < 1) throw ShapeError("slice_rows: rank-0 input");
    const std::int64_t l = x.dim(0);
    if (start < 0 || len <= 0 || start + len > l) {
        throw ContractError("slice_rows: range [" + std::to_string(start) + "," +
                            std::to_string(start + len) + ") outside " + std::to_string(l) + " rows");
    }
    Shape os = x.shape();
    os[0] = len;
    Tensor out = Tensor::zeros(os);
    const std::int64_t rs = row_size(x);
    std::copy_n(x.data().data() + start * rs, len * rs, out.data().data());
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        record(out, [tx, to, start, len, rs]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            double* gx = tx.grad().data() + start * rs;
            for (std::int64_t i = 0; i < len * rs; ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const Tensor& first = parts.front();
    if (first.rank() < 1) throw ShapeError("concat_rows: rank-0 part");
    std::int64_t total = 0;
    const std::int64_t rs = row_size(first);
    for (const Tensor& p : parts) {
        if (p.rank() != first.rank() || row_size(p) != rs ||
            !std::equal(p.shape().begin() + 1, p.shape().end(), first.shape().begin() + 1)) {
            throw ShapeError("concat_rows: part " + shape_str(p.shape()) + " does not match " +
                             shape_str(first.shape()));
        }
        total += p.dim(0);
    }
    Shape os = first.shape();
    os[0] = total;
    Tensor out = Tensor::zeros(os);
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
        std::copy_n(p.data().data(), p.numel(), out.data().data() + off);
        off += p.numel();
    }
    bool needs = false;
    if (Tape::current()) {
        for (const Tensor& p : parts) needs = needs || p.requires_grad();
    }
    if (needs) {
        std::vector<Tensor> held = parts;
        Tensor to = out;
        record(out, [held, to]() mutable {
            if (!to.has_grad()) return;
            const double* g = to.grad().data();
            std::int64_t off2 = 0;
            for (Tensor& p : held) {
                if (p.requires_grad()) {
                    double* gp = p.grad().data();
                    for (std::int64_t i = 0; i < p.numel(); ++i) gp[i] += g[off2 + i];
                }
                off2 += p.numel();
            }
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
    Tensor out = Tensor::zeros(shape);
    if (out.numel() != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                         " changes element count");
    }
    out.data() = x.data();
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        record(out, [tx, to]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            double* gx = tx.grad().data();
            for (std::int64_t i = 0; i < tx.numel(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expects rank-2, got " + shape_str(x.shape()));
    const std::int64_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({n, m});
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) po[j * m + i] = px[i * n + j];
    }
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        record(out, [tx, to, m, n]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            double* gx = tx.grad().data();
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
            }
        });
    }
    return out;
}

static Tensor reduce_all(const Tensor& x, bool mean) {
    const std::int64_t n = x.numel();
    double s = 0.0;
    for (double v : x.data()) s += v;
    if (mean) s /= static_cast<double>(n);
    Tensor out = Tensor::scalar(s);
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        const double w = mean ? 1.0 / static_cast<double>(n) : 1.0;
        record(out, [tx, to, w]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double g = to.grad()[0] * w;
            double* gx = tx.grad().data();
            for (std::int64_t i = 0; i < tx.numel(); ++i) gx[i] += g;
        });
    }
    return out;
}

Tensor reduce_sum_all(const Tensor& x) { return reduce_all(x, false); }
Tensor reduce_mean_all(const Tensor& x) { return reduce_all(x, true); }

Tensor mean_rows(const Tensor& x) {
    if (x.rank() < 1) throw ShapeError("mean_rows: rank-0 input");
    const std::int64_t l = x.dim(0);
    const std::int64_t rs = row_size(x);
    Shape os = (x.rank() == 1) ? Shape{1} : Shape(x.shape().begin() + 1, x.shape().end());
    Tensor out = Tensor::zeros(os);
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::int64_t r = 0; r < l; ++r) {
        for (std::int64_t j = 0; j < rs; ++j) po[j] += px[r * rs + j];
    }
    const double inv = 1.0 / static_cast<double>(l);
    for (std::int64_t j = 0; j < rs; ++j) po[j] *= inv;
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        record(out, [tx, to, l, rs, inv]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            double* gx = tx.grad().data();
            for (std::int64_t r = 0; r < l; ++r) {
                for (std::int64_t j = 0; j < rs; ++j) gx[r * rs + j] += g[j] * inv;
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& index) {
    if (x.rank() < 1) throw ShapeError("gather_rows: rank-0 input");
    if (index.empty()) throw ContractError("gather_rows: empty index");
    const std::int64_t l = x.dim(0);
    for (std::int64_t i : index) {
        if (i < 0 || i >= l) {
            throw ContractError("gather_rows: index " + std::to_string(i) + " outside [0," +
                                std::to_string(l) + ")");
        }
    }
    const std::int64_t rs = row_size(x);
    Shape os = x.shape();
    os[0] = static_cast<std::int64_t>(index.size());
    Tensor out = Tensor::zeros(os);
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::size_t r = 0; r < index.size(); ++r) {
        std::copy_n(px + index[r] * rs, rs, po + static_cast<std::int64_t>(r) * rs);
    }
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        auto idx = std::make_shared<std::vector<std::int64_t>>(index);
        record(out, [tx, to, idx, rs]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            double* gx = tx.grad().data();
            for (std::size_t r = 0; r < idx->size(); ++r) {
                double* dst = gx + (*idx)[r] * rs;
                const double* src = g + static_cast<std::int64_t>(r) * rs;
                for (std::int64_t j = 0; j < rs; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& x, double c) {
    Tensor out = Tensor::zeros(x.shape());
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] * c;
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        record(out, [tx, to, c]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            double* gx = tx.grad().data();
            for (std::int64_t i = 0; i < tx.numel(); ++i) gx[i] += g[i] * c;
        });
    }
    return out;
}

Tensor expand_last(const Tensor& x, std::int64_t k) {
    if (k <= 0) throw ContractError("expand_last: k must be positive");
    Shape os = x.shape();
    os.push_back(k);
    Tensor out = Tensor::zeros(os);
    const double* px = x.data().data();
    double* po = out.data().data();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        for (std::int64_t t = 0; t < k; ++t) po[i * k + t] = px[i];
    }
    if (tracing({&x})) {
        Tensor tx = x, to = out;
        record(out, [tx, to, k]() mutable {
            if (!to.has_grad() || !tx.requires_grad()) return;
            const double* g = to.grad().data();
            double* gx = tx.grad().data();
            for (std::int64_t i = 0; i < tx.numel(); ++i) {
                double s = 0.0;
                for (std::int64_t t = 0; t < k; ++t) s += g[i * k + t];
                gx[i] += s;
            }
        });
    }
    return out;
}

Tensor batched_outer(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) {
        throw ShapeError("batched_outer: expects [L,D] and [L,S], got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const std::int64_t l = a.dim(0), d = a.dim(1), s = b.dim(1);
    Tensor out = Tensor::zeros({l, d, s});
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* po = out.data().data();
    for (std::int64_t t = 0; t < l; ++t) {
        for (std::int64_t i = 0; i < d; ++i) {
            const double av = pa[t * d + i];
            const double* brow = pb + t * s;
            double* orow = po + (t * d + i) * s;
            for (std::int64_t j = 0; j < s; ++j) orow[j] = av * brow[j];
        }
    }
    if (tracing({&a, &b})) {
        Tensor ta = a, tb = b, to = out;
        record(out, [ta, tb, to, l, d, s]() mutable {
            if (!to.has_grad()) return;
            const double* g = to.grad().data();
            const double* pa2 = ta.data().data();
            const double* pb2 = tb.data().data();
            for (std::int64_t t = 0; t < l; ++t) {
                for (std::int64_t i = 0; i < d; ++i) {
                    const double* grow = g + (t * d + i) * s;
                    if (ta.requires_grad()) {
                        double acc = 0.0;
                        const double* brow = pb2 + t * s;
                        for (std::int64_t j = 0; j < s; ++j) acc += grow[j] * brow[j];
                        ta.grad()[t * d + i] += acc;
                    }
                    if (tb.requires_grad()) {
                        const double av = pa2[t * d + i];
                        double* gb = tb.grad().data() + t * s;
                        for (std::int64_t j = 0; j < s; ++j) gb[j] += grow[j] * av;
                    }
                }
            }
        });
    }
    return out;
}

Tensor ssm_scan(const Tensor& u, const Tensor& a_bar, const Tensor& b_bar, const Tensor& c,
                const Tensor& d_skip) {
    if (u.rank() != 2) throw ShapeError("ssm_scan: u must be [L,D], got " + shape_str(u.shape()));
    const std::int64_t l = u.dim(0), d = u.dim(1);
    const Shape lds = {l, d, 0};
    if (a_bar.rank() != 3 || a_bar.dim(0) != l || a_bar.dim(1) != d) {
        throw ShapeError("ssm_scan: a_bar " + shape_str(a_bar.shape()) + " does not match u " +
                         shape_str(u.shape()));
    }
    const std::int64_t s = a_bar.dim(2);
    if (b_bar.shape() != Shape{l, d, s}) {
        throw ShapeError("ssm_scan: b_bar " + shape_str(b_bar.shape()) + " must be " +
                         shape_str({l, d, s}));
    }
    if (c.shape() != Shape{l, s}) {
        throw ShapeError("ssm_scan: c " + shape_str(c.shape()) + " must be " + shape_str({l, s}));
    }
    if (d_skip.shape() != Shape{d}) {
        throw ShapeError("ssm_scan: d_skip " + shape_str(d_skip.shape()) + " must be " +
                         shape_str({d}));
    }
    (void)lds;
    Tensor out = Tensor::zeros({l, d});
    auto h_saved = std::make_shared<std::vector<double>>(static_cast<std::size_t>(l * d * s));
    {
        const double* pu = u.data().data();
        const double* pa = a_bar.data().data();
        const double* pb = b_bar.data().data();
        const double* pc = c.data().data();
        const double* pd = d_skip.data().data();
        double* ph = h_saved->data();
        double* po = out.data().data();
        for (std::int64_t t = 0; t < l; ++t) {
            const double* crow = pc + t * s;
            for (std::int64_t i = 0; i < d; ++i) {
                const std::int64_t base = (t * d + i) * s;
                const double uv = pu[t * d + i];
                const double* brow = pb + base;
                double* hrow = ph + base;
                double y = 0.0;
                if (t == 0) {
                    for (std::int64_t j = 0; j < s; ++j) {
                        hrow[j] = brow[j] * uv;
                        y += crow[j] * hrow[j];
                    }
                } else {
                    const double* arow = pa + base;
                    const double* hprev = ph + (base - d * s);
                    for (std::int64_t j = 0; j < s; ++j) {
                        hrow[j] = arow[j] * hprev[j] + brow[j] * uv;
                        y += crow[j] * hrow[j];
                    }
                }
                po[t * d + i] = y + pd[i] * uv;
            }
        }
    }
    if (tracing({&u, &a_bar, &b_bar, &c, &d_skip})) {
        Tensor tu = u, ta = a_bar, tb = b_bar, tc = c, td = d_skip, to = out;
        record(out, [tu, ta, tb, tc, td, to, h_saved, l, d, s]() mutable {
            if (!to.has_grad()) return;
            const double* g = to.grad().data();
            const double* pu = tu.data().data();
            const double* pa = ta.data().data();
            const double* pb = tb.data().data();
            const double* pc = tc.data().data();
            const double* pd = td.data().data();
            const double* ph = h_saved->data();
            double* gu = tu.requires_grad() ? tu.grad().data() : nullptr;
            double* ga = ta.requires_grad() ? ta.grad().data() : nullptr;
            double* gb = tb.requires_grad() ? tb.grad().data() : nullptr;
            double* gc = tc.requires_grad() ? tc.grad().data() : nullptr;
            double* gd = td.requires_grad() ? td.grad().data() : nullptr;
            // carry[d,s] = a_{t+1} * s_{t+1}, built while walking t backwards
            std::vector<double> carry(static_cast<std::size_t>(d * s), 0.0);
            std::vector<double> srow(static_cast<std::size_t>(s));
            for (std::int64_t t = l - 1; t >= 0; --t) {
                const double* crow = pc + t * s;
                for (std::int64_t i = 0; i < d; ++i) {
                    const std::int64_t base = (t * d + i) * s;
                    const double gy = g[t * d + i];
                    const double uv = pu[t * d + i];
                    const double* arow = pa + base;
                    const double* brow = pb + base;
                    const double* hrow = ph + base;
                    const double* hprev = (t > 0) ? ph + (base - d * s) : nullptr;
                    double* carry_i = carry.data() + i * s;
                    double du_acc = 0.0;
                    for (std::int64_t j = 0; j < s; ++j) {
                        const double st = gy * crow[j] + carry_i[j];
                        srow[static_cast<std::size_t>(j)] = st;
                        if (ga && t > 0) ga[base + j] += st * hprev[j];
                        if (gb) gb[base + j] += st * uv;
                        du_acc += st * brow[j];
                        if (gc) gc[t * s + j] += gy * hrow[j];
                    }
                    if (gu) gu[t * d + i] += du_acc + gy * pd[i];
                    if (gd) gd[i] += gy * uv;
                    for (std::int64_t j = 0; j < s; ++j) {
                        carry_i[j] = arow[j] * srow[static_cast<std::size_t>(j)];
                    }
                }
            }
        });
    }
    return out;
}

// ---- gradient verification ------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double h) {
    Tensor x = point.detach();
    std::vector<double> analytic(static_cast<std::size_t>(x.numel()), 0.0);
    {
        Tape tape;
        x.set_requires_grad(true);
        Tensor loss = fn(x);
        if (loss.numel() != 1) throw ContractError("grad_check: fn must return a scalar");
        Tape::backward(loss);
        if (x.has_grad()) analytic = x.grad();
    }
    x.set_requires_grad(false);
    x.zero_grad();
    double worst = 0.0;
    NoGradGuard ng;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double v = x.data()[static_cast<std::size_t>(i)];
        x.data()[static_cast<std::size_t>(i)] = v + h;
        const double fp = fn(x).item();
        x.data()[static_cast<std::size_t>(i)] = v - h;
        const double fm = fn(x).item();
        x.data()[static_cast<std::size_t>(i)] = v;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw DomainError("grad_check: non-finite value near coordinate " + std::to_string(i));
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double err = std::fabs(analytic[static_cast<std::size_t>(i)] - numeric) /
                           std::max(1.0, std::fabs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

double grad_check_params(const std::function<Tensor()>& fn, const std::vector<Tensor>& params,
                         double h, std::int64_t max_coords_per_tensor, Rng* rng) {
    for (const Tensor& p : params) {
        Tensor(p).zero_grad();
    }
    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        Tensor loss = fn();
        if (loss.numel() != 1) throw ContractError("grad_check_params: fn must return a scalar");
        Tape::backward(loss);
        for (const Tensor& p : params) {
            analytic.push_back(p.has_grad() ? p.grad()
                                            : std::vector<double>(static_cast<std::size_t>(p.numel()), 0.0));
        }
    }
    for (const Tensor& p : params) {
        Tensor(p).zero_grad();
    }
    double worst = 0.0;
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        std::vector<std::int64_t> coords;
        if (max_coords_per_tensor <= 0 || p.numel() <= max_coords_per_tensor) {
            coords.resize(static_cast<std::size_t>(p.numel()));
            for (std::int64_t i = 0; i < p.numel(); ++i) coords[static_cast<std::size_t>(i)] = i;
        } else {
            if (!rng) throw ContractError("grad_check_params: sampling requested without an rng");
            for (std::int64_t k = 0; k < max_coords_per_tensor; ++k) coords.push_back(rng->below(p.numel()));
        }
        for (std::int64_t i : coords) {
            const double v = p.data()[static_cast<std::size_t>(i)];
            p.data()[static_cast<std::size_t>(i)] = v + h;
            const double fp = fn().item();
            p.data()[static_cast<std::size_t>(i)] = v - h;
            const double fm = fn().item();
            p.data()[static_cast<std::size_t>(i)] = v;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err = std::fabs(analytic[pi][static_cast<std::size_t>(i)] - numeric) /
                               std::max(1.0, std::fabs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

}  // namespace cxrgen

#include "cxrgen/ssm.hpp"

#include <cmath>

#include "cxrgen/errors.hpp"

namespace cxrgen {

std::int64_t swiglu_hidden(std::int64_t d) {
    if (d <= 0) throw ContractError("swiglu_hidden: non-positive width");
    const std::int64_t raw = (8 * d) / 3;
    return ((raw + 7) / 8) * 8;
}

Tensor swiglu(const Tensor& x, const Tensor& w_in1, const Tensor& w_in2, const Tensor& w_out) {
    return matmul(mul(silu(matmul(x, w_in1)), matmul(x, w_in2)), w_out);
}

std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& a, const Tensor& b) {
    if (delta.rank() != 2 || a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("discretize: expects delta [L,D], a [D,S], b [L,S]");
    }
    if (a.dim(0) != delta.dim(1) || b.dim(0) != delta.dim(0) || b.dim(1) != a.dim(1)) {
        throw ShapeError("discretize: shapes " + shape_str(delta.shape()) + ", " +
                         shape_str(a.shape()) + ", " + shape_str(b.shape()) + " do not agree");
    }
    const std::int64_t s = a.dim(1);
    Tensor a_bar = exp(mul(expand_last(delta, s), a));
    Tensor b_bar = batched_outer(delta, b);
    return {a_bar, b_bar};
}

namespace {

void check_scan_shapes(const char* name, const Tensor& u, const Tensor& a_bar, const Tensor& b_bar,
                       const Tensor& c, const Tensor& d_skip) {
    if (u.rank() != 2 || a_bar.rank() != 3) throw ShapeError(std::string(name) + ": bad ranks");
    const std::int64_t l = u.dim(0), d = u.dim(1), s = a_bar.dim(2);
    if (a_bar.shape() != Shape{l, d, s} || b_bar.shape() != Shape{l, d, s} ||
        c.shape() != Shape{l, s} || d_skip.shape() != Shape{d}) {
        throw ShapeError(std::string(name) + ": operand shapes do not agree: u " +
                         shape_str(u.shape()) + ", a_bar " + shape_str(a_bar.shape()) + ", b_bar " +
                         shape_str(b_bar.shape()) + ", c " + shape_str(c.shape()) + ", d_skip " +
                         shape_str(d_skip.shape()));
    }
}

}  // namespace

Tensor selective_scan_seq(const Tensor& u, const Tensor& a_bar, const Tensor& b_bar,
                          const Tensor& c, const Tensor& d_skip) {
    NoGradGuard ng;
    return ssm_scan(u, a_bar, b_bar, c, d_skip);
}

Tensor selective_scan_chunked(const Tensor& u, const Tensor& a_bar, const Tensor& b_bar,
                              const Tensor& c, const Tensor& d_skip, std::int64_t chunk_len) {
    check_scan_shapes("selective_scan_chunked", u, a_bar, b_bar, c, d_skip);
    if (chunk_len <= 0) throw ContractError("selective_scan_chunked: chunk_len must be positive");
    const std::int64_t l = u.dim(0), d = u.dim(1), s = a_bar.dim(2);
    Tensor out = Tensor::zeros({l, d});
    const double* pu = u.data().data();
    const double* pa = a_bar.data().data();
    const double* pb = b_bar.data().data();
    const double* pc = c.data().data();
    const double* pd = d_skip.data().data();
    double* po = out.data().data();

    // h for the current chunk (local recurrence), cumulative a-products, and
    // the carry state entering the chunk.
    std::vector<double> hloc(static_cast<std::size_t>(chunk_len * d * s));
    std::vector<double> prod(static_cast<std::size_t>(chunk_len * d * s));
    std::vector<double> carry(static_cast<std::size_t>(d * s), 0.0);

    for (std::int64_t t0 = 0; t0 < l; t0 += chunk_len) {
        const std::int64_t t1 = std::min(l, t0 + chunk_len);
        const std::int64_t len = t1 - t0;
        for (std::int64_t k = 0; k < len; ++k) {
            const std::int64_t t = t0 + k;
            for (std::int64_t i = 0; i < d; ++i) {
                const std::int64_t gbase = (t * d + i) * s;
                const std::int64_t lbase = (k * d + i) * s;
                const double uv = pu[t * d + i];
                // Expression shapes deliberately mirror the sequential kernel
                // so floating-point contraction makes the same choices and the
                // single-chunk case stays bitwise identical to it.
                for (std::int64_t j = 0; j < s; ++j) {
                    const double av = pa[gbase + j];
                    if (k == 0) {
                        hloc[static_cast<std::size_t>(lbase + j)] = pb[gbase + j] * uv;
                        prod[static_cast<std::size_t>(lbase + j)] = av;
                    } else {
                        const std::int64_t pbase = lbase - d * s;
                        hloc[static_cast<std::size_t>(lbase + j)] =
                            av * hloc[static_cast<std::size_t>(pbase + j)] + pb[gbase + j] * uv;
                        prod[static_cast<std::size_t>(lbase + j)] =
                            av * prod[static_cast<std::size_t>(pbase + j)];
                    }
                }
            }
        }
        // Stitch the carry through the chunk and read out y.  The first chunk
        // has a zero carry and takes the plain local values, which makes the
        // single-chunk case execute exactly the sequential recurrence.
        for (std::int64_t k = 0; k < len; ++k) {
            const std::int64_t t = t0 + k;
            const double* crow = pc + t * s;
            for (std::int64_t i = 0; i < d; ++i) {
                const std::int64_t lbase = (k * d + i) * s;
                const double uv = pu[t * d + i];
                double y = 0.0;
                for (std::int64_t j = 0; j < s; ++j) {
                    double h = hloc[static_cast<std::size_t>(lbase + j)];
                    if (t0 > 0) {
                        h += prod[static_cast<std::size_t>(lbase + j)] *
                             carry[static_cast<std::size_t>(i * s + j)];
                    }
                    if (k == len - 1) {
                        hloc[static_cast<std::size_t>(lbase + j)] = h;  // final row feeds next carry
                    }
                    y += crow[j] * h;
                }
                po[t * d + i] = y + pd[i] * uv;
            }
        }
        for (std::int64_t i = 0; i < d; ++i) {
            const std::int64_t lbase = ((len - 1) * d + i) * s;
            for (std::int64_t j = 0; j < s; ++j) {
                carry[static_cast<std::size_t>(i * s + j)] = hloc[static_cast<std::size_t>(lbase + j)];
            }
        }
    }
    return out;
}

// ---- directional traversal ------------------------------------------------

std::vector<std::int64_t> direction_order(ScanDir dir, GridShape grid) {
    const std::int64_t r = grid.rows, c = grid.cols;
    if (r <= 0 || c <= 0) throw ContractError("direction_order: grid shape not provided");
    const std::int64_t l = r * c;
    std::vector<std::int64_t> order(static_cast<std::size_t>(l));
    switch (dir) {
        case ScanDir::RowForward:
            for (std::int64_t i = 0; i < l; ++i) order[static_cast<std::size_t>(i)] = i;
            break;
        case ScanDir::RowBackward:
            for (std::int64_t i = 0; i < l; ++i) order[static_cast<std::size_t>(i)] = l - 1 - i;
            break;
        case ScanDir::ColForward: {
            std::int64_t k = 0;
            for (std::int64_t cc = 0; cc < c; ++cc) {
                for (std::int64_t rr = 0; rr < r; ++rr) order[static_cast<std::size_t>(k++)] = rr * c + cc;
            }
            break;
        }
        case ScanDir::ColBackward: {
            std::int64_t k = 0;
            for (std::int64_t cc = c - 1; cc >= 0; --cc) {
                for (std::int64_t rr = r - 1; rr >= 0; --rr) order[static_cast<std::size_t>(k++)] = rr * c + cc;
            }
            break;
        }
    }
    return order;
}

std::vector<std::int64_t> inverse_order(const std::vector<std::int64_t>& order) {
    std::vector<std::int64_t> inv(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        inv[static_cast<std::size_t>(order[i])] = static_cast<std::int64_t>(i);
    }
    return inv;
}

// ---- Mamba block ----------------------------------------------------------

MambaBlockParams MambaBlockParams::init(std::int64_t d, std::int64_t s, Rng& rng) {
    if (d <= 0 || s <= 0) throw ContractError("mamba_block: non-positive dims");
    MambaBlockParams p;
    p.d = d;
    p.s = s;
    p.hidden = swiglu_hidden(d);
    const double ws = 1.0 / std::sqrt(static_cast<double>(d));
    p.norm_gain = Tensor::full({d}, 1.0).set_requires_grad(true);
    p.w_in = Tensor::randn({d, d}, rng, ws).set_requires_grad(true);
    p.w_gate = Tensor::randn({d, d}, rng, ws).set_requires_grad(true);
    p.w_out = Tensor::randn({d, d}, rng, ws).set_requires_grad(true);
    p.w_delta = Tensor::randn({d, d}, rng, 0.02).set_requires_grad(true);
    p.delta_bias = Tensor::zeros({d});
    for (std::int64_t i = 0; i < d; ++i) {
        const double dt = rng.uniform(0.001, 0.1);
        p.delta_bias.data()[static_cast<std::size_t>(i)] = std::log(std::expm1(dt));
    }
    p.delta_bias.set_requires_grad(true);
    p.w_b = Tensor::randn({d, s}, rng, ws).set_requires_grad(true);
    p.w_c = Tensor::randn({d, s}, rng, ws).set_requires_grad(true);
    p.a_log = Tensor::zeros({d, s});
    for (std::int64_t i = 0; i < d; ++i) {
        for (std::int64_t j = 0; j < s; ++j) {
            p.a_log.data()[static_cast<std::size_t>(i * s + j)] = std::log(static_cast<double>(j + 1));
        }
    }
    p.a_log.set_requires_grad(true);
    p.d_skip = Tensor::full({d}, 1.0).set_requires_grad(true);
    p.sw_in1 = Tensor::randn({d, p.hidden}, rng, ws).set_requires_grad(true);
    p.sw_in2 = Tensor::randn({d, p.hidden}, rng, ws).set_requires_grad(true);
    // The residual branch ends in this projection; zeroing it makes the block
    // the identity at init.  It must be the LAST linear of the branch: zeroing
    // an earlier projection instead would park the SwiGLU at an input of zero,
    // where its gradient vanishes and the branch can never wake up.
    p.sw_out = Tensor::zeros({p.hidden, d}).set_requires_grad(true);
    return p;
}

void MambaBlockParams::visit(const std::string& prefix,
                             const std::function<void(const std::string&, Tensor&)>& fn) {
    fn(prefix + "norm_gain", norm_gain);
    fn(prefix + "w_in", w_in);
    fn(prefix + "w_gate", w_gate);
    fn(prefix + "w_out", w_out);
    fn(prefix + "w_delta", w_delta);
    fn(prefix + "delta_bias", delta_bias);
    fn(prefix + "w_b", w_b);
    fn(prefix + "w_c", w_c);
    fn(prefix + "a_log", a_log);
    fn(prefix + "d_skip", d_skip);
    fn(prefix + "sw_in1", sw_in1);
    fn(prefix + "sw_in2", sw_in2);
    fn(prefix + "sw_out", sw_out);
}

std::vector<Tensor> MambaBlockParams::all() {
    std::vector<Tensor> out;
    visit("", [&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
}

namespace {

struct ScanOperands {
    Tensor u, a_bar, b_bar, c;
};

ScanOperands scan_operands(const Tensor& xn, MambaBlockParams& p) {
    ScanOperands ops;
    ops.u = matmul(xn, p.w_in);
    Tensor delta = softplus(add(matmul(ops.u, p.w_delta), p.delta_bias));
    Tensor b = matmul(ops.u, p.w_b);
    ops.c = matmul(ops.u, p.w_c);
    Tensor a_eff = scale(exp(p.a_log), -1.0);
    auto bars = discretize(delta, a_eff, b);
    ops.a_bar = bars.first;
    ops.b_bar = bars.second;
    return ops;
}

Tensor finish_block(const Tensor& tokens, const Tensor& scan_out, const Tensor& xn,
                    MambaBlockParams& p) {
    Tensor gate = silu(matmul(xn, p.w_gate));
    Tensor projected = matmul(mul(scan_out, gate), p.w_out);
    return add(tokens, swiglu(projected, p.sw_in1, p.sw_in2, p.sw_out));
}

}  // namespace

Tensor mamba_block(const Tensor& tokens, MambaBlockParams& p) {
    if (tokens.rank() != 2 || tokens.dim(1) != p.d) {
        throw ShapeError("mamba_block: tokens " + shape_str(tokens.shape()) + " do not match width " +
                         std::to_string(p.d));
    }
    Tensor xn = rms_norm(tokens, p.norm_gain);
    ScanOperands ops = scan_operands(xn, p);
    Tensor y = ssm_scan(ops.u, ops.a_bar, ops.b_bar, ops.c, p.d_skip);
    return finish_block(tokens, y, xn, p);
}

Tensor mamba_block_directional(const Tensor& tokens, MambaBlockParams& p,
                               const std::vector<ScanDir>& dirs, GridShape grid) {
    if (tokens.rank() != 2 || tokens.dim(1) != p.d) {
        throw ShapeError("mamba_block_directional: tokens " + shape_str(tokens.shape()) +
                         " do not match width " + std::to_string(p.d));
    }
    if (dirs.empty()) throw ContractError("mamba_block_directional: no directions");
    if (grid.rows * grid.cols != tokens.dim(0)) {
        throw ContractError("mamba_block_directional: grid " + std::to_string(grid.rows) + "x" +
                            std::to_string(grid.cols) + " does not cover " +
                            std::to_string(tokens.dim(0)) + " tokens");
    }
    Tensor xn = rms_norm(tokens, p.norm_gain);
    ScanOperands ops = scan_operands(xn, p);
    Tensor acc;
    for (const ScanDir dir : dirs) {
        Tensor y;
        if (dir == ScanDir::RowForward) {
            y = ssm_scan(ops.u, ops.a_bar, ops.b_bar, ops.c, p.d_skip);
        } else {
            const std::vector<std::int64_t> order = direction_order(dir, grid);
            Tensor yp = ssm_scan(gather_rows(ops.u, order), gather_rows(ops.a_bar, order),
                                 gather_rows(ops.b_bar, order), gather_rows(ops.c, order), p.d_skip);
            y = gather_rows(yp, inverse_order(order));
        }
        acc = acc.defined() ? add(acc, y) : y;
    }
    Tensor avg = (dirs.size() == 1) ? acc : scale(acc, 1.0 / static_cast<double>(dirs.size()));
    return finish_block(tokens, avg, xn, p);
}

Tensor naive_attention(const Tensor& tokens) {
    if (tokens.rank() != 2) throw ShapeError("naive_attention: tokens must be [L,D]");
    NoGradGuard ng;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(tokens.dim(1)));
    Tensor scores = scale(matmul(tokens, transpose2d(tokens)), inv_sqrt_d);
    return matmul(softmax_rows(scores), tokens);
}

}  // namespace cxrgen

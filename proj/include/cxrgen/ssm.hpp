#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cxrgen/tensor.hpp"

namespace cxrgen {

// Hidden width of the gated MLP: floor(8d/3) rounded up to a multiple of 8.
std::int64_t swiglu_hidden(std::int64_t d);

// w_out( silu(x * w_in1) ⊙ (x * w_in2) ); x [L, D] -> [L, D].
Tensor swiglu(const Tensor& x, const Tensor& w_in1, const Tensor& w_in2, const Tensor& w_out);

// Zero-order-hold style per-token discretization of a diagonal state space:
//   a_bar[t,d,s] = exp(delta[t,d] * a[d,s])     (a is the effective, negative A)
//   b_bar[t,d,s] = delta[t,d] * b[t,s]
std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& a, const Tensor& b);

// Value-level scan engines (no gradient recording); same contract as ssm_scan.
Tensor selective_scan_seq(const Tensor& u, const Tensor& a_bar, const Tensor& b_bar,
                          const Tensor& c, const Tensor& d_skip);
// Identical recurrence computed per chunk with cumulative products and a
// stitched carry state; equal to the sequential result up to float
// reassociation, bitwise equal when chunk_len >= L.
Tensor selective_scan_chunked(const Tensor& u, const Tensor& a_bar, const Tensor& b_bar,
                              const Tensor& c, const Tensor& d_skip, std::int64_t chunk_len);

// ---- directional traversal ------------------------------------------------

enum class ScanDir { RowForward, RowBackward, ColForward, ColBackward };

struct GridShape {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
};

// order[i] = index of the token visited i-th under the direction.
std::vector<std::int64_t> direction_order(ScanDir dir, GridShape grid);
std::vector<std::int64_t> inverse_order(const std::vector<std::int64_t>& order);

// ---- Mamba block ----------------------------------------------------------

struct MambaBlockParams {
    std::int64_t d = 0;
    std::int64_t s = 0;
    std::int64_t hidden = 0;

    Tensor norm_gain;               // [D]
    Tensor w_in, w_gate, w_out;     // [D, D]; w_out starts at zero (residual identity)
    Tensor w_delta;                 // [D, D]
    Tensor delta_bias;              // [D]; softplus(bias) lands in [0.001, 0.1]
    Tensor w_b, w_c;                // [D, S]
    Tensor a_log;                   // [D, S]; row-wise log(1..S)
    Tensor d_skip;                  // [D]
    Tensor sw_in1, sw_in2, sw_out;  // [D, H], [D, H], [H, D]

    static MambaBlockParams init(std::int64_t d, std::int64_t s, Rng& rng);

    void visit(const std::string& prefix,
               const std::function<void(const std::string&, Tensor&)>& fn);
    std::vector<Tensor> all();
};

// Single-direction causal block:
//   out = tokens + swiglu( (scan(norm(tokens)) ⊙ silu(gate(norm(tokens)))) * w_out )
Tensor mamba_block(const Tensor& tokens, MambaBlockParams& p);

// Scan branch evaluated per direction (reorder rows, scan, restore order),
// averaged over directions before the shared gate/output/Swiglu path.
// Directions = {RowForward} reproduces mamba_block exactly.
Tensor mamba_block_directional(const Tensor& tokens, MambaBlockParams& p,
                               const std::vector<ScanDir>& dirs, GridShape grid);

// Quadratic-cost reference mixer for the scaling benchmark: single-head
// attention with Q = K = V = tokens, softmax over scores / sqrt(D).
Tensor naive_attention(const Tensor& tokens);

}  // namespace cxrgen

#pragma once

#include <utility>

#include "biomamba/tensor.hpp"

namespace biomamba {

// Zero-order-hold factors for a diagonal state matrix entry a and step delta:
// abar = exp(delta*a); bbar coefficient = (exp(delta*a) - 1)/a. Near the
// (delta*a)^{-1} singularity (|delta*a| < 1e-6) the coefficient switches to
// the series delta*(1 + delta*a/2).
double zoh_abar(double delta, double a);
double zoh_coeff_exact(double delta, double a);
double zoh_coeff_series(double delta, double a);
double zoh_coeff(double delta, double a);

// delta [.., d_inner], A [d_inner, N], B_t [.., N] ->
// (abar [.., d_inner, N], bbar [.., d_inner, N]). Diagnostic/oracle helper;
// does not participate in differentiation. Requires delta > 0.
std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& A,
                                     const Tensor& Bt);

// Selection parameters of one scan direction. W_B/W_C/dt_down are pure
// projections (no bias); dt_up's bias is the delta bias whose softplus sets
// the initial step sizes.
struct SsmParams {
  Tensor a_log;      // [d_inner, N]; A = -exp(a_log)
  Tensor w_b;        // [d_inner, N]
  Tensor w_c;        // [d_inner, N]
  Tensor dt_down;    // [d_inner, dt_rank]
  Tensor dt_up_w;    // [dt_rank, d_inner]
  Tensor dt_up_b;    // [d_inner]
  Tensor d_skip;     // [d_inner]; zeroed and frozen when disabled
  bool d_skip_enabled = true;

  int d_inner() const { return a_log.dim(0); }
  int d_state() const { return a_log.dim(1); }
  int dt_rank() const { return dt_down.dim(1); }
};

SsmParams make_ssm_params(int d_inner, int d_state, int dt_rank, Rng& rng,
                          bool d_skip_enabled = true);

// Fused recurrence h_t = abar_t*h_{t-1} + bbar_t*u_t, y_t = C_t.h_t + D*u_t
// over the middle axis of u [B, L, d_inner]; delta [B, L, d_inner],
// A [d_inner, N], Bt/Ct [B, L, N], d_skip [d_inner]. Differentiable in all
// six inputs. Requires delta > 0; throws check_error naming the step index
// if a non-finite value appears.
Tensor scan_core(const Tensor& u, const Tensor& delta, const Tensor& A,
                 const Tensor& Bt, const Tensor& Ct, const Tensor& d_skip);

// Full data-dependent path: delta/B/C derived from u, then scan_core.
Tensor selective_scan(const Tensor& u, const SsmParams& p);

// LTI mode evaluated through the structured kernel
// K = (C.bbar, C.abar.bbar, ..., C.abar^{L-1}.bbar), y = causal conv u * K.
// abar/bbar/c are [N] constants, or [L, N] histories that must be constant
// across time (contract error otherwise).
Tensor conv_kernel_apply(const Tensor& u, const Tensor& abar,
                         const Tensor& bbar, const Tensor& c);

// Depthwise causal convolution along the middle axis: x [B, L, d_inner],
// weight [d_inner, k], bias [d_inner]; output at t reads inputs t-k+1..t
// (zero padded on the left).
Tensor depthwise_causal_conv(const Tensor& x, const Tensor& weight,
                             const Tensor& bias);

struct MambaBlockParams {
  Tensor w_in1, b_in1;    // [D, d_inner], [d_inner]
  Tensor w_in2, b_in2;    // gate branch
  Tensor conv_w, conv_b;  // [d_inner, k], [d_inner]
  Tensor w_out, b_out;    // [d_inner, D], [D]
  SsmParams ssm;

  int d_model() const { return w_in1.dim(0); }
  int d_inner() const { return w_in1.dim(1); }
  int conv_kernel() const { return conv_w.dim(1); }
};

MambaBlockParams make_mamba_params(int D, int d_inner, int d_state,
                                   int conv_kernel, int dt_rank, Rng& rng,
                                   bool d_skip_enabled = true);

// Z [B, E, D] -> [B, E, D]:
//   Linear(SelectiveSSM(silu(Conv(Linear1(Z)))) . silu(Linear2(Z)))
Tensor mamba_block(const Tensor& z, const MambaBlockParams& p);

}  // namespace biomamba

#include "biomamba/ssm.hpp"

#include <cmath>
#include <memory>

namespace biomamba {

double zoh_abar(double delta, double a) { return std::exp(delta * a); }

double zoh_coeff_exact(double delta, double a) {
  return std::expm1(delta * a) / a;
}

double zoh_coeff_series(double delta, double a) {
  return delta * (1.0 + 0.5 * delta * a);
}

double zoh_coeff(double delta, double a) {
  return std::abs(delta * a) < 1e-6 ? zoh_coeff_series(delta, a)
                                    : zoh_coeff_exact(delta, a);
}

std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& A,
                                     const Tensor& Bt) {
  if (A.rank() != 2) {
    throw contract_error("discretize: A must be [d_inner, N], got " +
                         shape_str(A.shape()));
  }
  const int dm = A.dim(0), N = A.dim(1);
  if (delta.shape().back() != dm || Bt.shape().back() != N) {
    throw contract_error("discretize: delta " + shape_str(delta.shape()) +
                         " / B " + shape_str(Bt.shape()) +
                         " inconsistent with A " + shape_str(A.shape()));
  }
  const int64_t rows = delta.size() / dm;
  if (Bt.size() / N != rows) {
    throw contract_error("discretize: delta and B leading shapes differ");
  }
  for (double d : delta.values()) {
    if (d <= 0) throw contract_error("discretize: delta must be positive");
  }
  Shape out_shape(delta.shape().begin(), delta.shape().end());
  out_shape.push_back(N);
  Tensor abar = Tensor::zeros(out_shape);
  Tensor bbar = Tensor::zeros(out_shape);
  const double* dp = delta.values().data();
  const double* ap = A.values().data();
  const double* bp = Bt.values().data();
  double* abp = abar.mutable_values().data();
  double* bbp = bbar.mutable_values().data();
  for (int64_t r = 0; r < rows; ++r)
    for (int d = 0; d < dm; ++d) {
      const double dl = dp[r * dm + d];
      for (int n = 0; n < N; ++n) {
        const double a = ap[d * N + n];
        const int64_t o = (r * dm + d) * N + n;
        abp[o] = zoh_abar(dl, a);
        bbp[o] = zoh_coeff(dl, a) * bp[r * N + n];
      }
    }
  return {abar, bbar};
}

// ---------------------------------------------------------------------------
// scan_core

namespace {

struct ScanSaved {
  std::vector<double> h, abar, coef;  // [B*L*dm*N] each
};

}  // namespace

Tensor scan_core(const Tensor& u, const Tensor& delta, const Tensor& A,
                 const Tensor& Bt, const Tensor& Ct, const Tensor& d_skip) {
  if (u.rank() != 3 || delta.rank() != 3 || Bt.rank() != 3 || Ct.rank() != 3 ||
      A.rank() != 2 || d_skip.rank() != 1) {
    throw contract_error("scan_core: expected u/delta/Bt/Ct rank 3, A rank 2, d_skip rank 1");
  }
  const int B = u.dim(0), L = u.dim(1), dm = u.dim(2);
  const int N = A.dim(1);
  if (delta.shape() != u.shape() || A.dim(0) != dm || Bt.dim(0) != B ||
      Bt.dim(1) != L || Bt.dim(2) != N || Ct.shape() != Bt.shape() ||
      d_skip.dim(0) != dm) {
    throw contract_error("scan_core: inconsistent shapes u=" +
                         shape_str(u.shape()) + " delta=" + shape_str(delta.shape()) +
                         " A=" + shape_str(A.shape()) + " B=" + shape_str(Bt.shape()) +
                         " C=" + shape_str(Ct.shape()));
  }

  const bool rec = OpAccess::should_record({&u, &delta, &A, &Bt, &Ct, &d_skip});
  auto saved = rec ? std::make_shared<ScanSaved>() : nullptr;
  const size_t lane = static_cast<size_t>(B) * L * dm * N;
  if (rec) {
    saved->h.resize(lane);
    saved->abar.resize(lane);
    saved->coef.resize(lane);
  }

  Tensor y = Tensor::zeros(u.shape());
  {
    const double* up = u.values().data();
    const double* dp = delta.values().data();
    const double* ap = A.values().data();
    const double* bp = Bt.values().data();
    const double* cp = Ct.values().data();
    const double* skp = d_skip.values().data();
    double* yp = y.mutable_values().data();
    std::vector<double> h(static_cast<size_t>(dm) * N);
    for (int b = 0; b < B; ++b) {
      std::fill(h.begin(), h.end(), 0.0);
      for (int t = 0; t < L; ++t) {
        const int64_t row = static_cast<int64_t>(b) * L + t;
        const double* brow = bp + row * N;
        const double* crow = cp + row * N;
        for (int d = 0; d < dm; ++d) {
          const double dl = dp[row * dm + d];
          if (!(dl > 0)) {
            throw contract_error("scan_core: delta must be positive at step " +
                                 std::to_string(t));
          }
          const double uv = up[row * dm + d];
          double* hd = h.data() + static_cast<size_t>(d) * N;
          const double* ad = ap + static_cast<int64_t>(d) * N;
          double acc = 0;
          for (int n = 0; n < N; ++n) {
            const double a = ad[n];
            const double z = dl * a;
            const double ab = std::exp(z);
            const double cf = std::abs(z) < 1e-6 ? dl * (1.0 + 0.5 * z)
                                                 : std::expm1(z) / a;
            const double hn = ab * hd[n] + cf * brow[n] * uv;
            hd[n] = hn;
            acc += crow[n] * hn;
            if (rec) {
              const size_t o = static_cast<size_t>((row * dm + d) * N + n);
              saved->h[o] = hn;
              saved->abar[o] = ab;
              saved->coef[o] = cf;
            }
          }
          const double yv = acc + skp[d] * uv;
          if (!std::isfinite(yv)) {
            throw check_error("selective scan produced a non-finite value at step " +
                              std::to_string(t));
          }
          yp[row * dm + d] = yv;
        }
      }
    }
  }

  if (rec) {
    const bool gu = OpAccess::needs_grad(u);
    const bool gdl = OpAccess::needs_grad(delta);
    const bool gA = OpAccess::needs_grad(A);
    const bool gB = OpAccess::needs_grad(Bt);
    const bool gC = OpAccess::needs_grad(Ct);
    const bool gD = OpAccess::needs_grad(d_skip);
    Tensor tu = u, tdl = delta, tA = A, tB = Bt, tC = Ct, tD = d_skip, ty = y;
    OpAccess::record("selective_scan", {&u, &delta, &A, &Bt, &Ct, &d_skip}, y, [=]() {
      auto go = OpAccess::grad_buffer(ty);
      const double* gy = go.data();
      const double* up = tu.values().data();
      const double* dp = tdl.values().data();
      const double* ap = tA.values().data();
      const double* bp = tB.values().data();
      const double* cp = tC.values().data();
      const double* skp = tD.values().data();
      double* gup = gu ? OpAccess::grad_buffer(tu).data() : nullptr;
      double* gdp = gdl ? OpAccess::grad_buffer(tdl).data() : nullptr;
      double* gap = gA ? OpAccess::grad_buffer(tA).data() : nullptr;
      double* gbp = gB ? OpAccess::grad_buffer(tB).data() : nullptr;
      double* gcp = gC ? OpAccess::grad_buffer(tC).data() : nullptr;
      double* gskp = gD ? OpAccess::grad_buffer(tD).data() : nullptr;

      // Adjoint recurrence, newest step first. gh carries dL/dh_t; after
      // consuming step t it becomes dL/dh_{t-1} via multiplication by abar_t.
      std::vector<double> gh(static_cast<size_t>(dm) * N);
      for (int b = 0; b < B; ++b) {
        std::fill(gh.begin(), gh.end(), 0.0);
        for (int t = L - 1; t >= 0; --t) {
          const int64_t row = static_cast<int64_t>(b) * L + t;
          const double* brow = bp + row * N;
          const double* crow = cp + row * N;
          for (int d = 0; d < dm; ++d) {
            const double g = gy[row * dm + d];
            const double uv = up[row * dm + d];
            const double dl = dp[row * dm + d];
            double* ghd = gh.data() + static_cast<size_t>(d) * N;
            const double* ad = ap + static_cast<int64_t>(d) * N;
            double acc_du = 0, acc_ddl = 0;
            for (int n = 0; n < N; ++n) {
              const size_t o = static_cast<size_t>((row * dm + d) * N + n);
              // y_t = sum_n C_t[n] * h_t[d,n] + D[d] * u_t[d]
              double ghn = ghd[n] + g * crow[n];
              if (gC) gcp[row * N + n] += g * saved->h[o];
              // h_t = abar * h_{t-1} + coef * B_t[n] * u_t[d]
              const double hprev =
                  t > 0 ? saved->h[o - static_cast<size_t>(dm) * N] : 0.0;
              const double ab = saved->abar[o];
              const double cf = saved->coef[o];
              const double a = ad[n];
              const double z = dl * a;
              double dcf_ddl, dcf_da;
              if (std::abs(z) < 1e-6) {
                dcf_ddl = 1.0 + z;
                dcf_da = 0.5 * dl * dl;
              } else {
                dcf_ddl = ab;
                dcf_da = (dl * ab - cf) / a;
              }
              const double galpha = ghn * hprev;
              const double bu = brow[n] * uv;
              if (gdl || gA) {
                acc_ddl += galpha * a * ab + ghn * bu * dcf_ddl;
                if (gA) gap[static_cast<int64_t>(d) * N + n] +=
                    galpha * dl * ab + ghn * bu * dcf_da;
              }
              if (gB) gbp[row * N + n] += ghn * cf * uv;
              acc_du += ghn * cf * brow[n];
              ghd[n] = ghn * ab;
            }
            if (gu) gup[row * dm + d] += acc_du + g * skp[d];
            if (gdl) gdp[row * dm + d] += acc_ddl;
            if (gD) gskp[d] += g * uv;
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// parameter construction and the selection path

namespace {

Tensor init_weight(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return Tensor::uniform({in, out}, rng, -bound, bound, true);
}

Tensor init_bias(int fan_in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform({out}, rng, -bound, bound, true);
}

}  // namespace

SsmParams make_ssm_params(int d_inner, int d_state, int dt_rank, Rng& rng,
                          bool d_skip_enabled) {
  if (d_inner <= 0 || d_state <= 0 || dt_rank <= 0) {
    throw config_error("ssm dims must be positive: d_inner=" +
                       std::to_string(d_inner) + " N=" + std::to_string(d_state) +
                       " dt_rank=" + std::to_string(dt_rank));
  }
  SsmParams p;
  // Real S4D-style decay spectrum: row-constant ln(1..N), so A = -(1..N).
  {
    std::vector<double> al(static_cast<size_t>(d_inner) * d_state);
    for (int d = 0; d < d_inner; ++d)
      for (int n = 0; n < d_state; ++n)
        al[static_cast<size_t>(d * d_state + n)] = std::log(static_cast<double>(n + 1));
    p.a_log = Tensor::from_data({d_inner, d_state}, std::move(al), true);
  }
  p.w_b = init_weight(d_inner, d_state, rng);
  p.w_c = init_weight(d_inner, d_state, rng);
  p.dt_down = init_weight(d_inner, dt_rank, rng);
  p.dt_up_w = init_weight(dt_rank, d_inner, rng);
  // Bias chosen so the initial softplus(dt) lands log-uniformly in
  // [0.001, 0.1]: bias = softplus^{-1}(dt) = ln(expm1(dt)).
  {
    std::vector<double> bias(static_cast<size_t>(d_inner));
    const double lo = std::log(1e-3), hi = std::log(1e-1);
    for (int d = 0; d < d_inner; ++d) {
      const double dt = std::exp(rng.uniform(lo, hi));
      bias[static_cast<size_t>(d)] = std::log(std::expm1(dt));
    }
    p.dt_up_b = Tensor::from_data({d_inner}, std::move(bias), true);
  }
  p.d_skip_enabled = d_skip_enabled;
  p.d_skip = d_skip_enabled ? Tensor::full({d_inner}, 1.0, true)
                            : Tensor::zeros({d_inner}, false);
  return p;
}

Tensor selective_scan(const Tensor& u, const SsmParams& p) {
  Tensor delta = softplus(
      linear(linear(u, p.dt_down, Tensor{}), p.dt_up_w, p.dt_up_b));
  Tensor A = neg(exp_clamped(p.a_log));
  Tensor Bt = linear(u, p.w_b, Tensor{});
  Tensor Ct = linear(u, p.w_c, Tensor{});
  return scan_core(u, delta, A, Bt, Ct, p.d_skip);
}

// ---------------------------------------------------------------------------
// LTI kernel oracle

Tensor conv_kernel_apply(const Tensor& u, const Tensor& abar,
                         const Tensor& bbar, const Tensor& c) {
  if (u.rank() != 1) {
    throw contract_error("conv_kernel_apply: u must be [L], got " +
                         shape_str(u.shape()));
  }
  const int L = u.dim(0);
  auto constant_row = [L](const Tensor& t, const char* name) {
    if (t.rank() == 1) return std::vector<double>(t.values().begin(), t.values().end());
    if (t.rank() != 2 || t.dim(0) != L) {
      throw contract_error(std::string("conv_kernel_apply: ") + name +
                           " must be [N] or [L,N]");
    }
    const int N = t.dim(1);
    const auto v = t.values();
    for (int l = 1; l < L; ++l)
      for (int n = 0; n < N; ++n) {
        if (v[static_cast<size_t>(l * N + n)] != v[static_cast<size_t>(n)]) {
          throw contract_error(std::string("conv_kernel_apply: ") + name +
                               " is input-dependent (varies along time); LTI mode requires constants");
        }
      }
    return std::vector<double>(v.begin(), v.begin() + N);
  };
  const auto ab = constant_row(abar, "abar");
  const auto bb = constant_row(bbar, "bbar");
  const auto cc = constant_row(c, "c");
  if (ab.size() != bb.size() || ab.size() != cc.size()) {
    throw contract_error("conv_kernel_apply: state dimensions disagree");
  }
  const int N = static_cast<int>(ab.size());

  // K[t] = sum_n c[n] * abar[n]^t * bbar[n]
  std::vector<double> kernel(static_cast<size_t>(L), 0.0);
  std::vector<double> w = bb;
  for (int t = 0; t < L; ++t) {
    double acc = 0;
    for (int n = 0; n < N; ++n) acc += cc[static_cast<size_t>(n)] * w[static_cast<size_t>(n)];
    kernel[static_cast<size_t>(t)] = acc;
    for (int n = 0; n < N; ++n) w[static_cast<size_t>(n)] *= ab[static_cast<size_t>(n)];
  }
  Tensor y = Tensor::zeros({L});
  const double* up = u.values().data();
  double* yp = y.mutable_values().data();
  for (int t = 0; t < L; ++t) {
    double acc = 0;
    for (int s = 0; s <= t; ++s) acc += kernel[static_cast<size_t>(s)] * up[t - s];
    yp[t] = acc;
  }
  return y;
}

// ---------------------------------------------------------------------------
// depthwise causal conv

Tensor depthwise_causal_conv(const Tensor& x, const Tensor& weight,
                             const Tensor& bias) {
  if (x.rank() != 3 || weight.rank() != 2 || bias.rank() != 1 ||
      weight.dim(0) != x.dim(2) || bias.dim(0) != x.dim(2)) {
    throw contract_error("depthwise_causal_conv: x " + shape_str(x.shape()) +
                         " weight " + shape_str(weight.shape()) + " bias " +
                         shape_str(bias.shape()));
  }
  const int B = x.dim(0), L = x.dim(1), dm = x.dim(2), k = weight.dim(1);
  Tensor y = Tensor::zeros(x.shape());
  {
    const double* xp = x.values().data();
    const double* wp = weight.values().data();
    const double* bp = bias.values().data();
    double* yp = y.mutable_values().data();
    for (int b = 0; b < B; ++b)
      for (int t = 0; t < L; ++t) {
        const int64_t row = static_cast<int64_t>(b) * L + t;
        for (int d = 0; d < dm; ++d) {
          double acc = bp[d];
          const int j0 = std::max(0, k - 1 - t);
          for (int j = j0; j < k; ++j) {
            acc += wp[d * k + j] * xp[(row - (k - 1) + j) * dm + d];
          }
          yp[row * dm + d] = acc;
        }
      }
  }
  if (OpAccess::should_record({&x, &weight, &bias})) {
    const bool gx = OpAccess::needs_grad(x);
    const bool gw = OpAccess::needs_grad(weight);
    const bool gb = OpAccess::needs_grad(bias);
    Tensor tx = x, tw = weight, tb = bias, ty = y;
    OpAccess::record("causal_conv", {&x, &weight, &bias}, y, [=]() {
      auto go = OpAccess::grad_buffer(ty);
      const double* gp = go.data();
      const double* xp = tx.values().data();
      const double* wp = tw.values().data();
      double* gxp = gx ? OpAccess::grad_buffer(tx).data() : nullptr;
      double* gwp = gw ? OpAccess::grad_buffer(tw).data() : nullptr;
      double* gbp = gb ? OpAccess::grad_buffer(tb).data() : nullptr;
      for (int b = 0; b < B; ++b)
        for (int t = 0; t < L; ++t) {
          const int64_t row = static_cast<int64_t>(b) * L + t;
          for (int d = 0; d < dm; ++d) {
            const double g = gp[row * dm + d];
            if (g == 0.0) continue;
            if (gb) gbp[d] += g;
            const int j0 = std::max(0, k - 1 - t);
            for (int j = j0; j < k; ++j) {
              const int64_t src = (row - (k - 1) + j) * dm + d;
              if (gw) gwp[d * k + j] += g * xp[src];
              if (gx) gxp[src] += g * wp[d * k + j];
            }
          }
        }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Mamba inner block

MambaBlockParams make_mamba_params(int D, int d_inner, int d_state,
                                   int conv_kernel, int dt_rank, Rng& rng,
                                   bool d_skip_enabled) {
  if (D <= 0 || d_inner <= 0 || conv_kernel <= 0) {
    throw config_error("mamba block dims must be positive");
  }
  MambaBlockParams p;
  p.w_in1 = init_weight(D, d_inner, rng);
  p.b_in1 = init_bias(D, d_inner, rng);
  p.w_in2 = init_weight(D, d_inner, rng);
  p.b_in2 = init_bias(D, d_inner, rng);
  {
    const double bound = 1.0 / std::sqrt(static_cast<double>(conv_kernel));
    p.conv_w = Tensor::uniform({d_inner, conv_kernel}, rng, -bound, bound, true);
    p.conv_b = Tensor::uniform({d_inner}, rng, -bound, bound, true);
  }
  p.w_out = init_weight(d_inner, D, rng);
  p.b_out = init_bias(d_inner, D, rng);
  p.ssm = make_ssm_params(d_inner, d_state, dt_rank, rng, d_skip_enabled);
  return p;
}

Tensor mamba_block(const Tensor& z, const MambaBlockParams& p) {
  if (z.rank() != 3 || z.dim(2) != p.d_model()) {
    throw contract_error("mamba_block: input " + shape_str(z.shape()) +
                         " does not match d_model " +
                         std::to_string(p.d_model()));
  }
  Tensor u = silu(depthwise_causal_conv(linear(z, p.w_in1, p.b_in1), p.conv_w,
                                        p.conv_b));
  Tensor y = selective_scan(u, p.ssm);
  Tensor gate = silu(linear(z, p.w_in2, p.b_in2));
  return linear(mul(y, gate), p.w_out, p.b_out);
}

}  // namespace biomamba

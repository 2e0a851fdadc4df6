#include "biomamba/gradcheck.hpp"

#include <cmath>
#include <functional>

#include "biomamba/embedding.hpp"
#include "biomamba/spectral.hpp"
#include "biomamba/ssm.hpp"
#include "biomamba/training.hpp"

namespace biomamba {

namespace {

using RunFn = std::function<Tensor()>;

double dual_err(const RunFn& run, Tensor t) {
  const double small = grad_check([&](const Tensor&) { return run(); }, t, 1e-5);
  const double large = grad_check([&](const Tensor&) { return run(); }, t, 1e-3);
  return std::min(small, large);
}

double max_err(const RunFn& run, std::initializer_list<Tensor> tensors) {
  double worst = 0.0;
  for (const Tensor& t : tensors) worst = std::max(worst, dual_err(run, t));
  return worst;
}

// dt-projection biases land softplus outputs in [1e-3, 0.1] at production
// init, where finite differences drown in rounding noise; checks probe the
// same code path at a well-resolved operating point instead.
void condition_dt(SsmParams& p, double base = 0.3, double step = 0.05) {
  auto b = p.dt_up_b.mutable_values();
  for (size_t i = 0; i < b.size(); ++i)
    b[i] = std::log(std::expm1(base + step * static_cast<double>(i)));
}

}  // namespace

const GradCheckResult& GradCheckReport::worst() const {
  if (checks.empty()) throw contract_error("no gradient checks were run");
  const GradCheckResult* w = &checks.front();
  for (const auto& c : checks)
    if (c.max_rel_err > w->max_rel_err) w = &c;
  return *w;
}

bool GradCheckReport::passed(double tolerance) const {
  if (checks.empty()) return false;
  for (const auto& c : checks)
    if (!(c.max_rel_err < tolerance)) return false;
  return true;
}

ModelConfig gradcheck_config() {
  ModelConfig c;
  c.T = 32;
  c.C = 3;
  c.K = 2;
  c.D = 16;
  c.M = 2;
  c.d_state = 8;
  c.expand = 1;
  c.conv_kernel = 4;
  c.window = 16;
  c.hop = 8;
  c.ffn_sparsity = 0.5;
  c.seed = 7;
  return c;
}

GradCheckReport run_grad_checks(const std::string& filter,
                                const ModelConfig& model_cfg) {
  GradCheckReport rep;
  auto add = [&](const char* name, const std::function<double()>& fn) {
    if (!filter.empty() && std::string(name).find(filter) == std::string::npos)
      return;
    rep.checks.push_back({name, fn()});
  };

  add("tensor/linear", [] {
    Rng rng(101);
    Tensor x = Tensor::uniform({3, 4}, rng, -1.0, 1.0, true);
    Tensor w = Tensor::uniform({4, 5}, rng, -1.0, 1.0, true);
    Tensor b = Tensor::uniform({5}, rng, -1.0, 1.0, true);
    Tensor probe = Tensor::uniform({3, 5}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(linear(x, w, b), probe)); };
    return max_err(run, {x, w, b});
  });

  add("tensor/matmul", [] {
    Rng rng(102);
    Tensor a = Tensor::uniform({3, 4}, rng, -1.0, 1.0, true);
    Tensor b = Tensor::uniform({4, 2}, rng, -1.0, 1.0, true);
    Tensor probe = Tensor::uniform({3, 2}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(matmul(a, b), probe)); };
    return max_err(run, {a, b});
  });

  add("tensor/layer_norm", [] {
    Rng rng(103);
    Tensor x = Tensor::uniform({2, 5}, rng, -2.0, 2.0, true);
    Tensor gamma = Tensor::uniform({5}, rng, 0.5, 1.5, true);
    Tensor beta = Tensor::uniform({5}, rng, -0.5, 0.5, true);
    Tensor probe = Tensor::uniform({2, 5}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(layer_norm(x, gamma, beta), probe)); };
    return max_err(run, {x, gamma, beta});
  });

  add("tensor/silu", [] {
    Rng rng(104);
    Tensor x = Tensor::uniform({3, 4}, rng, -3.0, 3.0, true);
    Tensor probe = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(silu(x), probe)); };
    return max_err(run, {x});
  });

  add("tensor/softplus", [] {
    Rng rng(105);
    Tensor x = Tensor::uniform({3, 4}, rng, -3.0, 3.0, true);
    Tensor probe = Tensor::uniform({3, 4}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(softplus(x), probe)); };
    return max_err(run, {x});
  });

  add("tensor/exp", [] {
    Rng rng(106);
    Tensor x = Tensor::uniform({2, 3}, rng, -2.0, 2.0, true);
    Tensor probe = Tensor::uniform({2, 3}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(exp_clamped(x), probe)); };
    return max_err(run, {x});
  });

  add("tensor/reductions", [] {
    Rng rng(107);
    Tensor x = Tensor::uniform({2, 3, 4}, rng, -1.0, 1.0, true);
    Tensor probe = Tensor::uniform({2, 4}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(mean_axis(x, 1), probe)); };
    return max_err(run, {x});
  });

  add("tensor/reverse_concat", [] {
    Rng rng(108);
    Tensor x = Tensor::uniform({2, 3, 2}, rng, -1.0, 1.0, true);
    Tensor probe = Tensor::uniform({2, 6, 2}, rng, -1.0, 1.0);
    RunFn run = [&] {
      return sum_all(mul(concat({x, reverse_axis(x, 1)}, 1), probe));
    };
    return max_err(run, {x});
  });

  add("spectral/rfft_magnitude", [] {
    Rng rng(109);
    Tensor x = Tensor::uniform({2, 16}, rng, -1.0, 1.0, true);
    Tensor probe = Tensor::uniform({2, 9}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(rfft_magnitude(x), probe)); };
    return max_err(run, {x});
  });

  add("spectral/windowed_pipeline", [] {
    Rng rng(110);
    Tensor x = Tensor::uniform({24, 2}, rng, -1.0, 1.0, true);
    FrequencyResolution res{8, 4};
    Tensor probe = Tensor::uniform({2, 5, 5}, rng, -1.0, 1.0);
    RunFn run = [&] {
      return sum_all(mul(rfft_magnitude(segment(x, res)), probe));
    };
    return max_err(run, {x});
  });

  add("embedding/spectro_temporal", [&] {
    const ModelConfig mc = model_cfg;
    const EmbeddingConfig ec = mc.embedding();
    Rng rng(111);
    EmbeddingParams p = make_embedding_params(ec, rng);
    Tensor x = Tensor::uniform({2, mc.T, mc.C}, rng, -1.0, 1.0, true);
    Tensor first = spectro_temporal_embedding(x, p, ec).tokens;
    Tensor probe = Tensor::uniform(first.shape(), rng, -1.0, 1.0);
    RunFn run = [&] {
      return sum_all(mul(spectro_temporal_embedding(x, p, ec).tokens, probe));
    };
    std::vector<Tensor> targets = {x};
    if (mc.use_pse) {
      for (const Tensor& t : {p.w_spec, p.b_spec, p.ce, p.pe}) targets.push_back(t);
    }
    if (mc.use_tde) {
      targets.push_back(p.w_temp);
      targets.push_back(p.b_temp);
    }
    double worst = 0.0;
    for (const Tensor& t : targets) worst = std::max(worst, dual_err(run, t));
    return worst;
  });

  add("ssm/scan", [] {
    Rng rng(112);
    const int B = 2, L = 5, dm = 3, N = 4;
    Tensor u = Tensor::uniform({B, L, dm}, rng, -1.0, 1.0, true);
    Tensor delta = Tensor::uniform({B, L, dm}, rng, 0.05, 0.5, true);
    Tensor A = Tensor::uniform({dm, N}, rng, -1.5, -0.1, true);
    Tensor Bt = Tensor::uniform({B, L, N}, rng, -1.0, 1.0, true);
    Tensor Ct = Tensor::uniform({B, L, N}, rng, -1.0, 1.0, true);
    Tensor D = Tensor::uniform({dm}, rng, -1.0, 1.0, true);
    Tensor probe = Tensor::uniform({B, L, dm}, rng, -1.0, 1.0);
    RunFn run = [&] {
      return sum_all(mul(scan_core(u, delta, A, Bt, Ct, D), probe));
    };
    return max_err(run, {u, delta, A, Bt, Ct, D});
  });

  add("ssm/causal_conv", [] {
    Rng rng(113);
    Tensor x = Tensor::uniform({2, 6, 3}, rng, -1.0, 1.0, true);
    Tensor w = Tensor::uniform({3, 2}, rng, -1.0, 1.0, true);
    Tensor b = Tensor::uniform({3}, rng, -0.5, 0.5, true);
    Tensor probe = Tensor::uniform({2, 6, 3}, rng, -1.0, 1.0);
    RunFn run = [&] {
      return sum_all(mul(depthwise_causal_conv(x, w, b), probe));
    };
    return max_err(run, {x, w, b});
  });

  add("ssm/selective_scan", [] {
    Rng rng(114);
    const int dm = 4, N = 4, dtr = 2;
    SsmParams p = make_ssm_params(dm, N, dtr, rng);
    condition_dt(p);
    Tensor u = Tensor::uniform({2, 5, dm}, rng, -1.0, 1.0, true);
    Tensor probe = Tensor::uniform({2, 5, dm}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(selective_scan(u, p), probe)); };
    return max_err(run, {u, p.a_log, p.w_b, p.w_c, p.dt_down, p.dt_up_w,
                         p.dt_up_b, p.d_skip});
  });

  add("ssm/mamba_block", [] {
    Rng rng(115);
    const int D = 6;
    MambaBlockParams p = make_mamba_params(D, D, 3, 3, 1, rng);
    condition_dt(p.ssm);
    Tensor z = Tensor::uniform({2, 5, D}, rng, -1.0, 1.0, true);
    Tensor probe = Tensor::uniform({2, 5, D}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(mamba_block(z, p), probe)); };
    return max_err(run, {z, p.w_in1, p.b_in1, p.w_in2, p.b_in2, p.conv_w,
                         p.conv_b, p.w_out, p.b_out, p.ssm.a_log, p.ssm.w_b,
                         p.ssm.w_c, p.ssm.dt_down, p.ssm.dt_up_w, p.ssm.dt_up_b,
                         p.ssm.d_skip});
  });

  add("biomamba/sparse_ffn", [] {
    Rng rng(116);
    SparseLinearParams p = make_sparse_linear(6, 10, 0.5, 9001, rng);
    Tensor x = Tensor::uniform({4, 6}, rng, -1.0, 1.0, true);
    Tensor probe = Tensor::uniform({4, 10}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(sparse_linear(x, p), probe)); };
    return max_err(run, {x, p.weight, p.bias});
  });

  add("biomamba/block", [] {
    Rng rng(117);
    const int D = 6;
    BioMambaBlockParams p;
    p.bidirectional = true;
    p.fwd = make_mamba_params(D, D, 3, 2, 1, rng);
    p.bwd = make_mamba_params(D, D, 3, 2, 1, rng);
    condition_dt(p.fwd.ssm);
    condition_dt(p.bwd.ssm);
    p.ln1_gamma = Tensor::uniform({D}, rng, 0.5, 1.5, true);
    p.ln1_beta = Tensor::uniform({D}, rng, -0.5, 0.5, true);
    p.ffn1 = make_sparse_linear(D, 4 * D, 0.5, 9002, rng);
    p.ffn2 = make_sparse_linear(4 * D, D, 0.5, 9003, rng);
    p.ln2_gamma = Tensor::uniform({D}, rng, 0.5, 1.5, true);
    p.ln2_beta = Tensor::uniform({D}, rng, -0.5, 0.5, true);
    Tensor z = Tensor::uniform({2, 5, D}, rng, -1.0, 1.0, true);
    Tensor probe = Tensor::uniform({2, 5, D}, rng, -1.0, 1.0);
    RunFn run = [&] { return sum_all(mul(biomamba_block(z, p), probe)); };
    return max_err(run, {z, p.fwd.conv_w, p.fwd.ssm.a_log, p.fwd.ssm.dt_up_b,
                         p.bwd.w_out, p.bwd.ssm.w_c, p.ln1_gamma, p.ffn1.weight,
                         p.ffn2.weight, p.ffn2.bias, p.ln2_beta});
  });

  add("training/cross_entropy", [] {
    Rng rng(118);
    Tensor logits = Tensor::uniform({4, 3}, rng, -2.0, 2.0, true);
    const std::vector<int> labels = {0, 2, 1, 0};
    RunFn run = [&] { return cross_entropy(logits, labels); };
    return max_err(run, {logits});
  });

  add("model/full_loss", [&] {
    const ModelConfig mc = model_cfg;
    BioMambaModel m = build_model(mc);
    for (auto& block : m.blocks) {
      condition_dt(block.fwd.ssm);
      if (block.bidirectional) condition_dt(block.bwd.ssm);
    }
    Rng rng(119);
    Tensor x = Tensor::uniform({2, mc.T, mc.C}, rng, -1.0, 1.0, true);
    const std::vector<int> labels = {0, 1};
    RunFn run = [&] { return cross_entropy(forward(m, x), labels); };
    std::vector<Tensor> targets = {x, m.head_w, m.head_b};
    if (mc.use_pse) {
      targets.push_back(m.emb.w_spec);
      targets.push_back(m.emb.ce);
      targets.push_back(m.emb.pe);
    }
    if (mc.use_tde) targets.push_back(m.emb.w_temp);
    const BioMambaBlockParams& first = m.blocks.front();
    for (const Tensor& t :
         {first.fwd.ssm.a_log, first.fwd.ssm.dt_up_b, first.fwd.ssm.w_b,
          first.fwd.conv_w, first.fwd.w_in1, first.fwd.w_out,
          first.ffn1.weight, first.ffn2.bias, first.ln1_gamma})
      targets.push_back(t);
    if (mc.d_skip_enabled) targets.push_back(first.fwd.ssm.d_skip);
    if (first.bidirectional) targets.push_back(first.bwd.ssm.a_log);
    if (m.blocks.size() > 1) {
      const BioMambaBlockParams& last = m.blocks.back();
      targets.push_back(last.fwd.ssm.a_log);
      targets.push_back(last.ffn1.weight);
      targets.push_back(last.ln2_gamma);
    }
    double worst = 0.0;
    for (const Tensor& t : targets) worst = std::max(worst, dual_err(run, t));
    return worst;
  });

  return rep;
}

}  // namespace biomamba

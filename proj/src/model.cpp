#include "biomamba/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

namespace biomamba {

EmbeddingConfig ModelConfig::embedding() const {
  EmbeddingConfig e;
  e.T = T;
  e.C = C;
  e.D = D;
  e.res = FrequencyResolution{window, hop};
  e.use_pse = use_pse;
  e.use_tde = use_tde;
  e.use_hann = use_hann;
  return e;
}

void ModelConfig::validate() const {
  if (M < 1) throw config_error("model depth M must be >= 1, got " + std::to_string(M));
  if (K < 2) throw config_error("class count K must be >= 2, got " + std::to_string(K));
  if (D < 1 || d_state < 1 || expand < 1 || conv_kernel < 1) {
    throw config_error("model dims must be positive");
  }
  if (ffn_sparsity < 0.0 || ffn_sparsity >= 1.0) {
    throw config_error(fmt::format("ffn_sparsity must lie in [0,1), got {}", ffn_sparsity));
  }
  embedding().validate();
}

// ---------------------------------------------------------------------------
// sparse feed-forward

int64_t sparse_active_count(int in, int out, double sparsity) {
  if (sparsity < 0.0 || sparsity >= 1.0) {
    throw config_error(fmt::format("sparsity must lie in [0,1), got {}", sparsity));
  }
  const double exact = (1.0 - sparsity) * static_cast<double>(in) * out;
  return static_cast<int64_t>(std::floor(exact + 0.5));
}

std::vector<uint8_t> sparse_mask_init(int in, int out, double sparsity,
                                      uint64_t seed) {
  const int64_t n = static_cast<int64_t>(in) * out;
  const int64_t r = sparse_active_count(in, out, sparsity);
  std::vector<uint32_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0u);
  Rng rng(seed);
  std::vector<uint8_t> mask(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < r; ++i) {
    const int64_t j = i + rng.uniform_int(n - i);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    mask[idx[static_cast<size_t>(i)]] = 1;
  }
  return mask;
}

int64_t SparseLinearParams::active() const {
  int64_t n = 0;
  for (uint8_t b : *mask) n += b;
  return n;
}

SparseLinearParams make_sparse_linear(int in, int out, double sparsity,
                                      uint64_t mask_seed, Rng& rng) {
  SparseLinearParams p;
  p.sparsity = sparsity;
  p.seed = mask_seed;
  p.mask = std::make_shared<std::vector<uint8_t>>(
      sparse_mask_init(in, out, sparsity, mask_seed));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  p.weight = Tensor::uniform({in, out}, rng, -bound, bound, true);
  p.bias = Tensor::uniform({out}, rng, -bound, bound, true);
  double* w = p.weight.mutable_values().data();
  for (int64_t i = 0; i < static_cast<int64_t>(in) * out; ++i) {
    if (!(*p.mask)[static_cast<size_t>(i)]) w[i] = 0.0;
  }
  return p;
}

Tensor sparse_linear(const Tensor& x, const SparseLinearParams& p) {
  const int in = p.in(), out = p.out();
  if (!p.mask || static_cast<int64_t>(p.mask->size()) !=
                     static_cast<int64_t>(in) * out) {
    throw contract_error("sparse_linear: mask does not match weight shape " +
                         shape_str(p.weight.shape()));
  }
  if (x.rank() < 1 || x.shape().back() != in) {
    throw contract_error("sparse_linear: input " + shape_str(x.shape()) +
                         " does not end in " + std::to_string(in));
  }
  const int64_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Tensor y = Tensor::zeros(out_shape);
  {
    const double* xp = x.values().data();
    const double* wp = p.weight.values().data();
    const double* bp = p.bias.values().data();
    const uint8_t* mp = p.mask->data();
    double* yp = y.mutable_values().data();
    for (int64_t r = 0; r < rows; ++r) {
      double* yr = yp + r * out;
      std::memcpy(yr, bp, sizeof(double) * static_cast<size_t>(out));
      const double* xr = xp + r * in;
      for (int i = 0; i < in; ++i) {
        const double xv = xr[i];
        if (xv == 0.0) continue;
        const double* wr = wp + static_cast<int64_t>(i) * out;
        const uint8_t* mr = mp + static_cast<int64_t>(i) * out;
        for (int o = 0; o < out; ++o) {
          if (mr[o]) yr[o] += xv * wr[o];
        }
      }
    }
  }
  if (OpAccess::should_record({&x, &p.weight, &p.bias})) {
    const bool gx = OpAccess::needs_grad(x);
    const bool gw = OpAccess::needs_grad(p.weight);
    const bool gb = OpAccess::needs_grad(p.bias);
    Tensor tx = x, tw = p.weight, tb = p.bias, ty = y;
    auto mask = p.mask;
    OpAccess::record("sparse_linear", {&x, &p.weight, &p.bias}, y, [=]() {
      auto go = OpAccess::grad_buffer(ty);
      const double* gp = go.data();
      const double* xp = tx.values().data();
      const double* wp = tw.values().data();
      double* gxp = gx ? OpAccess::grad_buffer(tx).data() : nullptr;
      double* gwp = gw ? OpAccess::grad_buffer(tw).data() : nullptr;
      double* gbp = gb ? OpAccess::grad_buffer(tb).data() : nullptr;
      for (int64_t r = 0; r < rows; ++r) {
        const double* gr = gp + r * out;
        const double* xr = xp + r * in;
        for (int i = 0; i < in; ++i) {
          const double* wr = wp + static_cast<int64_t>(i) * out;
          const uint8_t* mr = mask->data() + static_cast<int64_t>(i) * out;
          double acc = 0;
          for (int o = 0; o < out; ++o) {
            if (!mr[o]) continue;
            acc += gr[o] * wr[o];
            if (gw) gwp[static_cast<int64_t>(i) * out + o] += gr[o] * xr[i];
          }
          if (gx) gxp[r * in + i] += acc;
        }
        if (gb) {
          for (int o = 0; o < out; ++o) gbp[o] += gr[o];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// blocks

Tensor bidirectional_mamba(const Tensor& z, const BioMambaBlockParams& p) {
  Tensor z1 = mamba_block(z, p.fwd);
  Tensor fused;
  if (p.bidirectional) {
    Tensor z2 = reverse_axis(mamba_block(reverse_axis(z, 1), p.bwd), 1);
    fused = add(add(z1, z2), z);
  } else {
    fused = add(z1, z);
  }
  return layer_norm(fused, p.ln1_gamma, p.ln1_beta);
}

Tensor biomamba_block(const Tensor& z, const BioMambaBlockParams& p) {
  Tensor h = bidirectional_mamba(z, p);
  Tensor f = sparse_linear(silu(sparse_linear(h, p.ffn1)), p.ffn2);
  return layer_norm(add(f, h), p.ln2_gamma, p.ln2_beta);
}

// ---------------------------------------------------------------------------
// model assembly

BioMambaModel build_model(const ModelConfig& cfg) {
  cfg.validate();
  BioMambaModel m;
  m.config = cfg;
  m.config.dt_rank = cfg.resolved_dt_rank();
  Rng rng(mix_seed(cfg.seed, 0xB10C0DE));
  m.emb = make_embedding_params(cfg.embedding(), rng);
  for (int i = 0; i < cfg.M; ++i) {
    BioMambaBlockParams b;
    b.bidirectional = cfg.bidirectional;
    b.fwd = make_mamba_params(cfg.D, cfg.d_inner(), cfg.d_state, cfg.conv_kernel,
                              cfg.resolved_dt_rank(), rng, cfg.d_skip_enabled);
    if (cfg.bidirectional) {
      b.bwd = make_mamba_params(cfg.D, cfg.d_inner(), cfg.d_state, cfg.conv_kernel,
                                cfg.resolved_dt_rank(), rng, cfg.d_skip_enabled);
    }
    b.ln1_gamma = Tensor::full({cfg.D}, 1.0, true);
    b.ln1_beta = Tensor::zeros({cfg.D}, true);
    b.ffn1 = make_sparse_linear(cfg.D, cfg.ffn_hidden(), cfg.ffn_sparsity,
                                mix_seed(cfg.seed, 2 * i), rng);
    b.ffn2 = make_sparse_linear(cfg.ffn_hidden(), cfg.D, cfg.ffn_sparsity,
                                mix_seed(cfg.seed, 2 * i + 1), rng);
    b.ln2_gamma = Tensor::full({cfg.D}, 1.0, true);
    b.ln2_beta = Tensor::zeros({cfg.D}, true);
    m.blocks.push_back(std::move(b));
  }
  {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.D));
    m.head_w = Tensor::uniform({cfg.D, cfg.K}, rng, -bound, bound, true);
    m.head_b = Tensor::uniform({cfg.K}, rng, -bound, bound, true);
  }
  return m;
}

Tensor forward(const BioMambaModel& m, const Tensor& x) {
  TokenSequence seq = spectro_temporal_embedding(x, m.emb, m.config.embedding());
  Tensor z = seq.tokens;
  for (const auto& b : m.blocks) z = biomamba_block(z, b);
  return linear(mean_axis(z, 1), m.head_w, m.head_b);
}

namespace {

void collect_mamba(const std::string& prefix, const MambaBlockParams& p,
                   bool d_skip_enabled, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".w_in1", p.w_in1});
  out.push_back({prefix + ".b_in1", p.b_in1});
  out.push_back({prefix + ".w_in2", p.w_in2});
  out.push_back({prefix + ".b_in2", p.b_in2});
  out.push_back({prefix + ".conv_w", p.conv_w});
  out.push_back({prefix + ".conv_b", p.conv_b});
  out.push_back({prefix + ".w_out", p.w_out});
  out.push_back({prefix + ".b_out", p.b_out});
  out.push_back({prefix + ".a_log", p.ssm.a_log});
  out.push_back({prefix + ".w_b", p.ssm.w_b});
  out.push_back({prefix + ".w_c", p.ssm.w_c});
  out.push_back({prefix + ".dt_down", p.ssm.dt_down});
  out.push_back({prefix + ".dt_up_w", p.ssm.dt_up_w});
  out.push_back({prefix + ".dt_up_b", p.ssm.dt_up_b});
  if (d_skip_enabled) out.push_back({prefix + ".d_skip", p.ssm.d_skip});
}

}  // namespace

std::vector<NamedParam> parameters(const BioMambaModel& m) {
  std::vector<NamedParam> out;
  if (m.config.use_pse) {
    out.push_back({"emb.w_spec", m.emb.w_spec});
    out.push_back({"emb.b_spec", m.emb.b_spec});
    out.push_back({"emb.ce", m.emb.ce});
    out.push_back({"emb.pe", m.emb.pe});
  }
  if (m.config.use_tde) {
    out.push_back({"emb.w_temp", m.emb.w_temp});
    out.push_back({"emb.b_temp", m.emb.b_temp});
  }
  for (size_t i = 0; i < m.blocks.size(); ++i) {
    const auto& b = m.blocks[i];
    const std::string bp = fmt::format("block{}", i);
    collect_mamba(bp + ".fwd", b.fwd, m.config.d_skip_enabled, out);
    if (b.bidirectional) collect_mamba(bp + ".bwd", b.bwd, m.config.d_skip_enabled, out);
    out.push_back({bp + ".ln1_gamma", b.ln1_gamma});
    out.push_back({bp + ".ln1_beta", b.ln1_beta});
    out.push_back({bp + ".ffn1.weight", b.ffn1.weight});
    out.push_back({bp + ".ffn1.bias", b.ffn1.bias});
    out.push_back({bp + ".ffn2.weight", b.ffn2.weight});
    out.push_back({bp + ".ffn2.bias", b.ffn2.bias});
    out.push_back({bp + ".ln2_gamma", b.ln2_gamma});
    out.push_back({bp + ".ln2_beta", b.ln2_beta});
  }
  out.push_back({"head.weight", m.head_w});
  out.push_back({"head.bias", m.head_b});
  return out;
}

uint64_t mask_hash(const BioMambaModel& m) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const std::vector<uint8_t>& bytes) {
    for (uint8_t b : bytes) {
      h ^= b;
      h *= 1099511628211ull;
    }
  };
  for (const auto& b : m.blocks) {
    mix(*b.ffn1.mask);
    mix(*b.ffn2.mask);
  }
  return h;
}

// ---------------------------------------------------------------------------
// analytic counts

ParamReport count_params(const BioMambaModel& m) {
  ParamReport rep;
  auto add_group = [&rep](const std::string& name, int64_t allocated, int64_t active) {
    rep.groups.push_back({name, allocated, active});
    rep.allocated += allocated;
    rep.active += active;
  };
  {
    int64_t n = 0;
    if (m.config.use_pse) {
      n += m.emb.w_spec.size() + m.emb.b_spec.size() + m.emb.ce.size() +
           m.emb.pe.size();
    }
    if (m.config.use_tde) n += m.emb.w_temp.size() + m.emb.b_temp.size();
    add_group("embedding", n, n);
  }
  int64_t mamba = 0, norms = 0, ffn_alloc = 0, ffn_active = 0;
  for (const auto& b : m.blocks) {
    auto dir_count = [&](const MambaBlockParams& p) {
      int64_t n = p.w_in1.size() + p.b_in1.size() + p.w_in2.size() +
                  p.b_in2.size() + p.conv_w.size() + p.conv_b.size() +
                  p.w_out.size() + p.b_out.size() + p.ssm.a_log.size() +
                  p.ssm.w_b.size() + p.ssm.w_c.size() + p.ssm.dt_down.size() +
                  p.ssm.dt_up_w.size() + p.ssm.dt_up_b.size();
      if (m.config.d_skip_enabled) n += p.ssm.d_skip.size();
      return n;
    };
    mamba += dir_count(b.fwd);
    if (b.bidirectional) mamba += dir_count(b.bwd);
    norms += b.ln1_gamma.size() + b.ln1_beta.size() + b.ln2_gamma.size() +
             b.ln2_beta.size();
    for (const SparseLinearParams* f : {&b.ffn1, &b.ffn2}) {
      ffn_alloc += static_cast<int64_t>(f->in()) * f->out() + f->out();
      ffn_active += f->active() + f->out();
    }
  }
  add_group("mamba", mamba, mamba);
  add_group("norms", norms, norms);
  add_group("ffn", ffn_alloc, ffn_active);
  add_group("head", m.head_w.size() + m.head_b.size(),
            m.head_w.size() + m.head_b.size());
  return rep;
}

FlopReport count_flops(const BioMambaModel& m, int batch) {
  const ModelConfig& c = m.config;
  const EmbeddingConfig e = c.embedding();
  const TokenLayout layout{c.C, c.use_pse ? e.n_seg() : 0, c.use_pse, c.use_tde};
  const double B = batch;
  const double E = layout.E();
  const double D = c.D;
  const double dm = c.d_inner();
  const double N = c.d_state;
  const double dtr = c.resolved_dt_rank();
  FlopReport rep;
  auto add_group = [&rep](const std::string& name, double flops) {
    rep.groups.push_back({name, flops});
    rep.total += flops;
  };
  if (c.use_pse) {
    const double a = e.padded_window();
    const double fft = B * c.C * e.n_seg() * 5.0 * a * std::log2(a);
    add_group("embedding.fft", fft);
    add_group("embedding.spectral_proj",
              B * layout.S() * static_cast<double>(e.spectral_bins()) * D);
  }
  if (c.use_tde) add_group("embedding.temporal_proj", B * c.C * c.T * D);
  {
    const double dirs = c.bidirectional ? 2.0 : 1.0;
    const double in_proj = 2.0 * B * E * D * dm;
    const double conv = B * E * dm * c.conv_kernel;
    const double selection = B * E * dm * (2.0 * N + 2.0 * dtr);
    // per (token, channel, state): discretize 2, state update 2, readout 1;
    // plus the feedthrough multiply per (token, channel)
    const double scan = B * E * dm * (5.0 * N + 1.0);
    const double out_proj = B * E * dm * D;
    add_group("blocks.mamba",
              c.M * dirs * (in_proj + conv + selection + scan + out_proj));
    double ffn = 0;
    for (const auto& b : m.blocks) {
      ffn += B * E * static_cast<double>(b.ffn1.active());
      ffn += B * E * static_cast<double>(b.ffn2.active());
    }
    add_group("blocks.ffn", ffn);
  }
  add_group("head", B * D * c.K);
  return rep;
}

// ---------------------------------------------------------------------------
// checkpoint container

namespace {

constexpr char kMagic[4] = {'B', 'M', 'V', '1'};

void write_config(std::ostream& os, const ModelConfig& c) {
  for (int v : {c.T, c.C, c.K, c.D, c.M, c.d_state, c.expand, c.conv_kernel,
                c.resolved_dt_rank(), c.window, c.hop}) {
    wire::write_u32(os, static_cast<uint32_t>(v));
  }
  for (bool f : {c.use_pse, c.use_tde, c.use_hann, c.bidirectional,
                 c.d_skip_enabled}) {
    const char byte = f ? 1 : 0;
    os.write(&byte, 1);
  }
  wire::write_f64(os, c.ffn_sparsity);
  wire::write_u64(os, c.seed);
}

ModelConfig read_config(wire::Reader& in) {
  ModelConfig c;
  c.T = static_cast<int>(in.u32("T"));
  c.C = static_cast<int>(in.u32("C"));
  c.K = static_cast<int>(in.u32("K"));
  c.D = static_cast<int>(in.u32("D"));
  c.M = static_cast<int>(in.u32("M"));
  c.d_state = static_cast<int>(in.u32("d_state"));
  c.expand = static_cast<int>(in.u32("expand"));
  c.conv_kernel = static_cast<int>(in.u32("conv_kernel"));
  c.dt_rank = static_cast<int>(in.u32("dt_rank"));
  c.window = static_cast<int>(in.u32("window"));
  c.hop = static_cast<int>(in.u32("hop"));
  auto flag = [&in](const char* name) {
    char b = 0;
    in.bytes(&b, 1, name);
    return b != 0;
  };
  c.use_pse = flag("use_pse");
  c.use_tde = flag("use_tde");
  c.use_hann = flag("use_hann");
  c.bidirectional = flag("bidirectional");
  c.d_skip_enabled = flag("d_skip_enabled");
  c.ffn_sparsity = in.f64("ffn_sparsity");
  c.seed = in.u64("seed");
  return c;
}

}  // namespace

void save_checkpoint(const BioMambaModel& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data_error("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  write_config(os, m.config);
  const auto params = parameters(m);
  wire::write_u32(os, static_cast<uint32_t>(params.size()));
  for (const auto& p : params) {
    wire::write_u64(os, static_cast<uint64_t>(p.tensor.size()));
    for (double v : p.tensor.values()) wire::write_f64(os, v);
  }
  std::vector<const std::vector<uint8_t>*> masks;
  for (const auto& b : m.blocks) {
    masks.push_back(b.ffn1.mask.get());
    masks.push_back(b.ffn2.mask.get());
  }
  wire::write_u32(os, static_cast<uint32_t>(masks.size()));
  for (const auto* mk : masks) {
    wire::write_u64(os, static_cast<uint64_t>(mk->size()));
    std::vector<char> packed((mk->size() + 7) / 8, 0);
    for (size_t i = 0; i < mk->size(); ++i) {
      if ((*mk)[i]) packed[i / 8] |= static_cast<char>(1 << (i % 8));
    }
    os.write(packed.data(), static_cast<std::streamsize>(packed.size()));
  }
  if (!os) throw data_error("write failed for checkpoint: " + path);
}

BioMambaModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("cannot open checkpoint: " + path);
  wire::Reader in(is, path);
  char magic[4];
  in.bytes(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw data_error(path + ": not a model checkpoint (bad magic)");
  }
  ModelConfig cfg = read_config(in);
  cfg.validate();
  BioMambaModel m = build_model(cfg);
  auto params = parameters(m);
  const uint32_t n_params = in.u32("parameter count");
  if (n_params != params.size()) {
    throw data_error(fmt::format("{}: checkpoint declares {} parameter tensors, model has {}",
                                 path, n_params, params.size()));
  }
  for (auto& p : params) {
    const uint64_t numel = in.u64("tensor size");
    if (numel != static_cast<uint64_t>(p.tensor.size())) {
      throw data_error(fmt::format("{}: size mismatch for {}: file {} vs model {}",
                                   path, p.name, numel, p.tensor.size()));
    }
    auto dst = p.tensor.mutable_values();
    for (auto& v : dst) v = in.f64("tensor value");
  }
  std::vector<std::vector<uint8_t>*> masks;
  for (auto& b : m.blocks) {
    masks.push_back(b.ffn1.mask.get());
    masks.push_back(b.ffn2.mask.get());
  }
  const uint32_t n_masks = in.u32("mask count");
  if (n_masks != masks.size()) {
    throw data_error(fmt::format("{}: checkpoint declares {} masks, model has {}",
                                 path, n_masks, masks.size()));
  }
  for (auto* mk : masks) {
    const uint64_t nbits = in.u64("mask size");
    if (nbits != mk->size()) {
      throw data_error(fmt::format("{}: mask size mismatch: file {} vs model {}",
                                   path, nbits, mk->size()));
    }
    std::vector<char> packed((nbits + 7) / 8);
    in.bytes(packed.data(), packed.size(), "mask bits");
    for (uint64_t i = 0; i < nbits; ++i) {
      (*mk)[i] = (packed[i / 8] >> (i % 8)) & 1;
    }
  }
  for (size_t bi = 0; bi < m.blocks.size(); ++bi) {
    for (const SparseLinearParams* f : {&m.blocks[bi].ffn1, &m.blocks[bi].ffn2}) {
      if (f->active() != sparse_active_count(f->in(), f->out(), cfg.ffn_sparsity)) {
        throw data_error(fmt::format("{}: block {} mask active count is inconsistent with sparsity {}",
                                     path, bi, cfg.ffn_sparsity));
      }
      const double* w = f->weight.values().data();
      for (int64_t i = 0; i < static_cast<int64_t>(f->in()) * f->out(); ++i) {
        if (!(*f->mask)[static_cast<size_t>(i)] && w[i] != 0.0) {
          throw data_error(path + ": block " + std::to_string(bi) +
                           " has a nonzero weight outside its sparse mask");
        }
      }
    }
  }
  return m;
}

}  // namespace biomamba

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "biomamba/embedding.hpp"
#include "biomamba/ssm.hpp"

namespace biomamba {

struct ModelConfig {
  int T = 256;
  int C = 14;
  int K = 2;
  int D = 128;
  int M = 6;
  int d_state = 16;
  int expand = 1;
  int conv_kernel = 4;
  int dt_rank = 0;  // 0 resolves to ceil(D/16)
  int window = 128;
  int hop = 100;
  bool use_pse = true;
  bool use_tde = true;
  bool use_hann = false;
  bool bidirectional = true;
  bool d_skip_enabled = true;
  double ffn_sparsity = 0.5;
  uint64_t seed = 42;

  int d_inner() const { return expand * D; }
  int ffn_hidden() const { return 4 * D; }
  int resolved_dt_rank() const { return dt_rank > 0 ? dt_rank : (D + 15) / 16; }
  EmbeddingConfig embedding() const;
  void validate() const;
};

// ---------------------------------------------------------------------------
// sparse feed-forward

int64_t sparse_active_count(int in, int out, double sparsity);

// Exactly R = Round[(1-s)*in*out] indices active, drawn uniformly without
// replacement; rounding is half-away-from-zero. Deterministic given seed.
std::vector<uint8_t> sparse_mask_init(int in, int out, double sparsity,
                                      uint64_t seed);

struct SparseLinearParams {
  Tensor weight;  // [in, out]; zero wherever the mask is inactive
  Tensor bias;    // [out]
  std::shared_ptr<std::vector<uint8_t>> mask;
  double sparsity = 0.0;
  uint64_t seed = 0;

  int in() const { return weight.dim(0); }
  int out() const { return weight.dim(1); }
  int64_t active() const;
};

SparseLinearParams make_sparse_linear(int in, int out, double sparsity,
                                      uint64_t mask_seed, Rng& rng);

// Affine map through the masked weights; inactive weights receive exactly
// zero gradient, so they stay exactly zero through any optimizer.
Tensor sparse_linear(const Tensor& x, const SparseLinearParams& p);

// ---------------------------------------------------------------------------
// blocks

struct BioMambaBlockParams {
  MambaBlockParams fwd;
  MambaBlockParams bwd;  // unset when bidirectional is off
  bool bidirectional = true;
  Tensor ln1_gamma, ln1_beta;
  SparseLinearParams ffn1;  // D -> 4D
  SparseLinearParams ffn2;  // 4D -> D
  Tensor ln2_gamma, ln2_beta;
};

// LN1((M+(Z) + Rev(M-(Rev Z))) + Z); the reverse branch and its fusion drop
// out when bidirectional is off, leaving LN1(M+(Z) + Z).
Tensor bidirectional_mamba(const Tensor& z, const BioMambaBlockParams& p);

// bidirectional_mamba followed by the per-token sparse FFN with residual
// and the second layer norm.
Tensor biomamba_block(const Tensor& z, const BioMambaBlockParams& p);

// ---------------------------------------------------------------------------
// full model

struct BioMambaModel {
  ModelConfig config;
  EmbeddingParams emb;
  std::vector<BioMambaBlockParams> blocks;
  Tensor head_w;  // [D, K]
  Tensor head_b;  // [K]
};

BioMambaModel build_model(const ModelConfig& cfg);

// tokens -> M blocks -> mean over the token axis -> affine D -> K
Tensor forward(const BioMambaModel& m, const Tensor& x);

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Trainable tensors in a pinned declaration order (optimizer state, the
// checkpoint layout, and gradient reports all index into this list).
std::vector<NamedParam> parameters(const BioMambaModel& m);

uint64_t mask_hash(const BioMambaModel& m);

struct ParamGroupCount {
  std::string name;
  int64_t allocated = 0;
  int64_t active = 0;
};

struct ParamReport {
  std::vector<ParamGroupCount> groups;
  int64_t allocated = 0;
  int64_t active = 0;
};

ParamReport count_params(const BioMambaModel& m);

struct FlopGroup {
  std::string name;
  double flops = 0;
};

// Multiply-accumulate counts of the linear maps, convolutions, scan steps and
// the FFT (5*a*log2(a) real-transform estimate per window) for one forward
// pass of a batch; elementwise activations and norms are not counted.
struct FlopReport {
  std::vector<FlopGroup> groups;
  double total = 0;
};

FlopReport count_flops(const BioMambaModel& m, int batch);

// Versioned binary container: magic "BMV1", config block, parameter tensors
// in declaration order as 64-bit little-endian floats, FFN masks as packed
// bits. Round-trips bit-exactly.
void save_checkpoint(const BioMambaModel& m, const std::string& path);
BioMambaModel load_checkpoint(const std::string& path);

}  // namespace biomamba

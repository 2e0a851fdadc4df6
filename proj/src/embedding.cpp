#include "biomamba/embedding.hpp"

#include <cmath>

namespace biomamba {

void EmbeddingConfig::validate() const {
  if (T <= 0 || C <= 0 || D <= 0) {
    throw config_error("embedding requires positive T, C, D; got T=" +
                       std::to_string(T) + " C=" + std::to_string(C) +
                       " D=" + std::to_string(D));
  }
  if (!use_pse && !use_tde) {
    throw config_error("at least one of the spectral/temporal embeddings must be enabled");
  }
  if (use_pse) {
    res.n_segments(T);  // validates window/hop against T
  }
}

namespace {
Tensor init_linear_weight(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return Tensor::uniform({in, out}, rng, -bound, bound, true);
}
Tensor init_linear_bias(int in, int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return Tensor::uniform({out}, rng, -bound, bound, true);
}
}  // namespace

EmbeddingParams make_embedding_params(const EmbeddingConfig& cfg, Rng& rng) {
  cfg.validate();
  EmbeddingParams p;
  if (cfg.use_pse) {
    const int bins = cfg.spectral_bins();
    p.w_spec = init_linear_weight(bins, cfg.D, rng);
    p.b_spec = init_linear_bias(bins, cfg.D, rng);
    p.ce = Tensor::normal({cfg.C, cfg.D}, rng, 0.0, 0.02, true);
    p.pe = Tensor::normal({cfg.n_seg(), cfg.D}, rng, 0.0, 0.02, true);
  }
  if (cfg.use_tde) {
    p.w_temp = init_linear_weight(cfg.T, cfg.D, rng);
    p.b_temp = init_linear_bias(cfg.T, cfg.D, rng);
  }
  return p;
}

TokenLayout::Info TokenLayout::info(int token) const {
  if (token < 0 || token >= E()) {
    throw contract_error("token index " + std::to_string(token) +
                         " out of range for E=" + std::to_string(E()));
  }
  if (use_pse && token < S()) {
    return {Kind::Spectral, token / n_seg, token % n_seg};
  }
  const int t = token - S();
  return {Kind::Temporal, t, -1};
}

int TokenLayout::index_of(Kind kind, int channel, int segment) const {
  if (channel < 0 || channel >= C) throw contract_error("channel out of range");
  if (kind == Kind::Spectral) {
    if (!use_pse) throw contract_error("spectral tokens disabled");
    if (segment < 0 || segment >= n_seg) throw contract_error("segment out of range");
    return channel * n_seg + segment;
  }
  if (!use_tde) throw contract_error("temporal tokens disabled");
  return S() + channel;
}

Tensor patched_spectral_embedding(const Tensor& x, const EmbeddingParams& p,
                                  const EmbeddingConfig& cfg) {
  cfg.validate();
  if (x.rank() != 3 || x.dim(1) != cfg.T || x.dim(2) != cfg.C) {
    throw config_error("spectral embedding: input " + shape_str(x.shape()) +
                       " does not match configured [B," + std::to_string(cfg.T) +
                       "," + std::to_string(cfg.C) + "]");
  }
  const int B = x.dim(0);
  const int n_seg = cfg.n_seg();
  Tensor seg = segment(x, cfg.res);  // [B, C, n_seg, a]
  if (cfg.use_hann) {
    seg = mul(seg, Tensor::from_data({cfg.res.window_len},
                                     hann_coeffs(cfg.res.window_len)));
  }
  seg = pad_last(seg, cfg.padded_window());
  Tensor mags = rfft_magnitude(seg);                     // [B, C, n_seg, bins]
  Tensor tok = linear(mags, p.w_spec, p.b_spec);         // [B, C, n_seg, D]
  tok = add(tok, reshape(p.ce, {cfg.C, 1, cfg.D}));      // broadcast over B, n_seg
  tok = add(tok, p.pe);                                  // broadcast over B, C
  return reshape(tok, {B, cfg.C * n_seg, cfg.D});
}

Tensor temporal_domain_embedding(const Tensor& x, const EmbeddingParams& p,
                                 const EmbeddingConfig& cfg) {
  cfg.validate();
  if (x.rank() != 3 || x.dim(2) != cfg.C) {
    throw config_error("temporal embedding: input " + shape_str(x.shape()) +
                       " does not match configured channel count " +
                       std::to_string(cfg.C));
  }
  if (x.dim(1) != cfg.T) {
    throw config_error("temporal embedding: series length " +
                       std::to_string(x.dim(1)) + " but W_temp expects " +
                       std::to_string(cfg.T));
  }
  Tensor xt = permute(x, {0, 2, 1});  // [B, C, T]
  return linear(xt, p.w_temp, p.b_temp);
}

TokenSequence spectro_temporal_embedding(const Tensor& x,
                                         const EmbeddingParams& p,
                                         const EmbeddingConfig& cfg) {
  cfg.validate();
  TokenSequence seq;
  seq.layout = TokenLayout{cfg.C, cfg.use_pse ? cfg.n_seg() : 0, cfg.use_pse,
                           cfg.use_tde};
  if (cfg.use_pse && cfg.use_tde) {
    seq.tokens = concat({patched_spectral_embedding(x, p, cfg),
                         temporal_domain_embedding(x, p, cfg)},
                        1);
  } else if (cfg.use_pse) {
    seq.tokens = patched_spectral_embedding(x, p, cfg);
  } else {
    seq.tokens = temporal_domain_embedding(x, p, cfg);
  }
  return seq;
}

}  // namespace biomamba

#pragma once

#include <string>

#include "biomamba/spectral.hpp"
#include "biomamba/tensor.hpp"

namespace biomamba {

struct EmbeddingConfig {
  int T = 0;
  int C = 0;
  int D = 0;
  FrequencyResolution res;
  bool use_pse = true;
  bool use_tde = true;
  bool use_hann = false;

  // Window length after zero-padding to the next power of two.
  int padded_window() const { return next_power_of_two(res.window_len); }
  int spectral_bins() const { return padded_window() / 2 + 1; }
  int n_seg() const { return res.n_segments(T); }
  void validate() const;
};

struct EmbeddingParams {
  Tensor w_spec;  // [bins, D]
  Tensor b_spec;  // [D]
  Tensor ce;      // [C, D]
  Tensor pe;      // [n_seg, D]
  Tensor w_temp;  // [T, D]
  Tensor b_temp;  // [D]
};

EmbeddingParams make_embedding_params(const EmbeddingConfig& cfg, Rng& rng);

// Maps token indices to their (kind, channel, segment) meaning. Spectral
// tokens come first, channel-major; temporal tokens follow in channel order.
struct TokenLayout {
  int C = 0;
  int n_seg = 0;
  bool use_pse = true;
  bool use_tde = true;

  enum class Kind { Spectral, Temporal };
  struct Info {
    Kind kind;
    int channel;
    int segment;  // -1 for temporal tokens
  };

  int S() const { return use_pse ? C * n_seg : 0; }
  int E() const { return S() + (use_tde ? C : 0); }
  Info info(int token) const;
  int index_of(Kind kind, int channel, int segment) const;
};

struct TokenSequence {
  Tensor tokens;  // [B, E, D]
  TokenLayout layout;
};

// Eq.–style additive composition per (channel, segment) window:
// token = W_spec·|FFT(window)| + b + CE[channel] + PE[segment].
Tensor patched_spectral_embedding(const Tensor& x, const EmbeddingParams& p,
                                  const EmbeddingConfig& cfg);

// One token per channel: token_c = W_temp · x[:, c] + b.
Tensor temporal_domain_embedding(const Tensor& x, const EmbeddingParams& p,
                                 const EmbeddingConfig& cfg);

// Concatenation along the token axis, spectral block first.
TokenSequence spectro_temporal_embedding(const Tensor& x,
                                         const EmbeddingParams& p,
                                         const EmbeddingConfig& cfg);

}  // namespace biomamba

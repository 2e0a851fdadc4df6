#pragma once

#include <span>
#include <vector>

#include "biomamba/tensor.hpp"

namespace biomamba {

// Time-axis windowing parameters: window length a, hop b.
struct FrequencyResolution {
  int window_len = 0;
  int hop = 0;

  // floor((T - a)/b) + 1. Throws config_error when the window does not fit
  // or the fields are non-positive.
  int n_segments(int T) const;
};

bool is_power_of_two(int n);
int next_power_of_two(int n);

// In-place radix-2 complex FFT, e^{-i2pi kn/N} convention. Size must be a
// power of two. Exposed for the linearity/Parseval property tests.
void fft_radix2(std::span<double> re, std::span<double> im);

std::vector<double> hann_coeffs(int a);

// x [T,C] -> [C, n_seg, a], or batched [B,T,C] -> [B, C, n_seg, a].
// Segment j of channel c reads x[j*b .. j*b+a, c]; trailing samples that do
// not fill a window are discarded.
Tensor segment(const Tensor& x, FrequencyResolution res);

// window [..., a] -> one-sided spectral magnitudes [..., a/2+1] over the
// last axis. a must be a power of two. The gradient at an exactly-zero
// magnitude bin is the subgradient 0.
Tensor rfft_magnitude(const Tensor& window);

}  // namespace biomamba

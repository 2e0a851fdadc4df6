#include "biomamba/spectral.hpp"

#include <cmath>
#include <memory>

namespace biomamba {

int FrequencyResolution::n_segments(int T) const {
  if (window_len <= 0 || hop <= 0) {
    throw config_error("frequency resolution requires positive window and hop, got a=" +
                       std::to_string(window_len) + " b=" + std::to_string(hop));
  }
  if (window_len > T) {
    throw config_error("window length " + std::to_string(window_len) +
                       " exceeds sequence length " + std::to_string(T));
  }
  return (T - window_len) / hop + 1;
}

bool is_power_of_two(int n) { return n > 0 && (n & (n - 1)) == 0; }

int next_power_of_two(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_radix2(std::span<double> re, std::span<double> im) {
  const size_t n = re.size();
  if (n != im.size() || !is_power_of_two(static_cast<int>(n))) {
    throw contract_error("fft_radix2: size must be a power of two, got " +
                         std::to_string(n));
  }
  // bit-reversal permutation
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  const double two_pi = 6.283185307179586476925286766559;
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = -two_pi / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t k = 0; k < len / 2; ++k) {
        const size_t u = i + k, v = i + k + len / 2;
        const double tr = re[v] * cr - im[v] * ci;
        const double ti = re[v] * ci + im[v] * cr;
        re[v] = re[u] - tr;
        im[v] = im[u] - ti;
        re[u] += tr;
        im[u] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

std::vector<double> hann_coeffs(int a) {
  std::vector<double> w(static_cast<size_t>(a));
  const double two_pi = 6.283185307179586476925286766559;
  for (int i = 0; i < a; ++i) {
    w[static_cast<size_t>(i)] =
        0.5 * (1.0 - std::cos(two_pi * i / (a > 1 ? a - 1 : 1)));
  }
  return w;
}

Tensor segment(const Tensor& x, FrequencyResolution res) {
  const int r = x.rank();
  if (r != 2 && r != 3) {
    throw contract_error("segment: expected [T,C] or [B,T,C], got " +
                         shape_str(x.shape()));
  }
  const int B = r == 3 ? x.dim(0) : 1;
  const int T = x.dim(r - 2);
  const int C = x.dim(r - 1);
  const int a = res.window_len, b = res.hop;
  const int n_seg = res.n_segments(T);

  Shape out_shape = r == 3 ? Shape{B, C, n_seg, a} : Shape{C, n_seg, a};
  Tensor out = Tensor::zeros(out_shape);
  {
    const double* xp = x.values().data();
    double* op = out.mutable_values().data();
    for (int bb = 0; bb < B; ++bb) {
      const double* xb = xp + static_cast<int64_t>(bb) * T * C;
      double* ob = op + static_cast<int64_t>(bb) * C * n_seg * a;
      for (int c = 0; c < C; ++c)
        for (int j = 0; j < n_seg; ++j) {
          double* dst = ob + (static_cast<int64_t>(c) * n_seg + j) * a;
          const int start = j * b;
          for (int i = 0; i < a; ++i) dst[i] = xb[static_cast<int64_t>(start + i) * C + c];
        }
    }
  }
  if (OpAccess::should_record({&x})) {
    Tensor tx = x, to = out;
    OpAccess::record("segment", {&x}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      auto gi = OpAccess::grad_buffer(tx);
      for (int bb = 0; bb < B; ++bb) {
        const double* gb = go.data() + static_cast<int64_t>(bb) * C * n_seg * a;
        double* gx = gi.data() + static_cast<int64_t>(bb) * T * C;
        for (int c = 0; c < C; ++c)
          for (int j = 0; j < n_seg; ++j) {
            const double* gs = gb + (static_cast<int64_t>(c) * n_seg + j) * a;
            const int start = j * b;
            for (int i = 0; i < a; ++i) gx[static_cast<int64_t>(start + i) * C + c] += gs[i];
          }
      }
    });
  }
  return out;
}

Tensor rfft_magnitude(const Tensor& window) {
  const int a = window.shape().back();
  if (!is_power_of_two(a)) {
    throw config_error("rfft_magnitude: window length " + std::to_string(a) +
                       " is not a power of two");
  }
  const int nbin = a / 2 + 1;
  const int64_t rows = window.size() / a;
  Shape out_shape = window.shape();
  out_shape.back() = nbin;
  Tensor out = Tensor::zeros(out_shape);

  // One-sided spectra saved for the backward pass.
  auto spec_re = std::make_shared<std::vector<double>>(static_cast<size_t>(rows * nbin));
  auto spec_im = std::make_shared<std::vector<double>>(static_cast<size_t>(rows * nbin));
  {
    const double* xp = window.values().data();
    double* op = out.mutable_values().data();
    std::vector<double> re(static_cast<size_t>(a)), im(static_cast<size_t>(a));
    for (int64_t r = 0; r < rows; ++r) {
      const double* xrow = xp + r * a;
      for (int i = 0; i < a; ++i) {
        re[static_cast<size_t>(i)] = xrow[i];
        im[static_cast<size_t>(i)] = 0.0;
      }
      fft_radix2(re, im);
      for (int k = 0; k < nbin; ++k) {
        const double rr = re[static_cast<size_t>(k)];
        const double ii = im[static_cast<size_t>(k)];
        (*spec_re)[static_cast<size_t>(r * nbin + k)] = rr;
        (*spec_im)[static_cast<size_t>(r * nbin + k)] = ii;
        op[r * nbin + k] = std::hypot(rr, ii);
      }
    }
  }
  if (OpAccess::should_record({&window})) {
    Tensor tx = window, to = out;
    OpAccess::record("rfft_magnitude", {&window}, out, [=]() {
      auto go = OpAccess::grad_buffer(to);
      auto gi = OpAccess::grad_buffer(tx);
      const auto mags = to.values();
      const double two_pi = 6.283185307179586476925286766559;
      // d|X_k|/dx_n = (Re_k cos(2pi kn/a) - Im_k sin(2pi kn/a)) / |X_k|;
      // zero-magnitude bins contribute the subgradient 0.
      for (int64_t r = 0; r < rows; ++r) {
        double* gx = gi.data() + r * a;
        for (int k = 0; k < nbin; ++k) {
          const double m = mags[static_cast<size_t>(r * nbin + k)];
          const double g = go[static_cast<size_t>(r * nbin + k)];
          if (m == 0.0 || g == 0.0) continue;
          const double rr = (*spec_re)[static_cast<size_t>(r * nbin + k)] / m;
          const double ii = (*spec_im)[static_cast<size_t>(r * nbin + k)] / m;
          const double w = two_pi * k / a;
          for (int n = 0; n < a; ++n) {
            const double th = w * n;
            gx[n] += g * (rr * std::cos(th) - ii * std::sin(th));
          }
        }
      }
    });
  }
  return out;
}

}  // namespace biomamba

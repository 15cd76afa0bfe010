#pragma once

// MFCC front end: pre-emphasis, Hann window, magnitude spectrum, triangular mel
// filterbank, floored log, orthonormal DCT-II, first n_coeffs coefficients.

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include <cmath>
#include <complex>
#include <span>
#include <vector>

#include "pmlf/core.hpp"

namespace pmlf::featurizer {

struct MfccConfig {
  int n_coeffs = 13;
  double window_s = 0.025;
  double hop_s = 0.010;
  int n_mel_filters = 26;
  double sample_rate_hz = 16000.0;
  double pre_emphasis = 0.97;
  double log_floor = 1e-10;

  int window_samples() const { return static_cast<int>(std::lround(window_s * sample_rate_hz)); }
  int hop_samples() const { return static_cast<int>(std::lround(hop_s * sample_rate_hz)); }

  void validate() const {
    if (!(sample_rate_hz > 0.0)) throw Error(Errc::InvalidConfig, "sample rate must be positive");
    if (n_coeffs < 1 || n_coeffs > n_mel_filters)
      throw Error(Errc::InvalidConfig, "n_coeffs must lie in [1, n_mel_filters]");
    if (!(hop_s > 0.0 && window_s > hop_s)) throw Error(Errc::InvalidConfig, "need window > hop > 0");
    if (hop_samples() < 1) throw Error(Errc::InvalidConfig, "hop shorter than one sample");
  }
};

struct AudioFeatureSequence {
  Eigen::MatrixXd frames;  // T_a x n_coeffs
  double hop_s = 0.010;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// n_filters x (n_fft/2 + 1) triangular filters spaced evenly on the mel scale
/// between 0 Hz and Nyquist.
inline Eigen::MatrixXd mel_filterbank(int n_filters, int n_fft, double sample_rate) {
  const int n_bins = n_fft / 2 + 1;
  const double mel_hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> centers(static_cast<std::size_t>(n_filters) + 2);
  for (int i = 0; i < n_filters + 2; ++i)
    centers[static_cast<std::size_t>(i)] = mel_to_hz(mel_hi * i / (n_filters + 1));
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(n_filters, n_bins);
  for (int m = 0; m < n_filters; ++m) {
    const double lo = centers[static_cast<std::size_t>(m)];
    const double mid = centers[static_cast<std::size_t>(m) + 1];
    const double hi = centers[static_cast<std::size_t>(m) + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = k * sample_rate / n_fft;
      if (f > lo && f < mid)
        fb(m, k) = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        fb(m, k) = (hi - f) / (hi - mid);
    }
  }
  return fb;
}

/// Orthonormal DCT-II basis, n_out x n_in.
inline Eigen::MatrixXd dct2_basis(int n_out, int n_in) {
  Eigen::MatrixXd d(n_out, n_in);
  const double pi = 3.14159265358979323846;
  for (int k = 0; k < n_out; ++k) {
    const double s = k == 0 ? std::sqrt(1.0 / n_in) : std::sqrt(2.0 / n_in);
    for (int n = 0; n < n_in; ++n) d(k, n) = s * std::cos(pi * k * (2 * n + 1) / (2.0 * n_in));
  }
  return d;
}

inline AudioFeatureSequence compute_mfcc(std::span<const double> waveform, const MfccConfig& cfg) {
  cfg.validate();
  const int w = cfg.window_samples();
  const int h = cfg.hop_samples();
  const auto len = static_cast<long>(waveform.size());
  if (len < w) throw Error(Errc::TooShort, "waveform shorter than one analysis window");
  const long n_frames = (len - w) / h + 1;

  int n_fft = 1;
  while (n_fft < w) n_fft <<= 1;

  // Pre-emphasis over the whole signal: y[n] = x[n] - a x[n-1].
  std::vector<double> emph(waveform.size());
  emph[0] = waveform[0];
  for (std::size_t i = 1; i < waveform.size(); ++i) emph[i] = waveform[i] - cfg.pre_emphasis * waveform[i - 1];

  std::vector<double> hann(static_cast<std::size_t>(w));
  const double pi = 3.14159265358979323846;
  for (int i = 0; i < w; ++i) hann[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * pi * i / (w - 1));

  const Eigen::MatrixXd fb = mel_filterbank(cfg.n_mel_filters, n_fft, cfg.sample_rate_hz);
  const Eigen::MatrixXd dct = dct2_basis(cfg.n_coeffs, cfg.n_mel_filters);

  Eigen::FFT<double> fft;
  std::vector<double> frame(static_cast<std::size_t>(n_fft), 0.0);
  std::vector<std::complex<double>> spec;
  AudioFeatureSequence out;
  out.hop_s = cfg.hop_s;
  out.frames.resize(n_frames, cfg.n_coeffs);
  Eigen::VectorXd mag(n_fft / 2 + 1);
  for (long t = 0; t < n_frames; ++t) {
    std::fill(frame.begin(), frame.end(), 0.0);
    for (int i = 0; i < w; ++i)
      frame[static_cast<std::size_t>(i)] = emph[static_cast<std::size_t>(t * h + i)] * hann[static_cast<std::size_t>(i)];
    fft.fwd(spec, frame);
    for (int k = 0; k <= n_fft / 2; ++k) mag(k) = std::abs(spec[static_cast<std::size_t>(k)]);
    Eigen::VectorXd energies = fb * mag;
    for (Eigen::Index m = 0; m < energies.size(); ++m) energies(m) = std::log(std::max(energies(m), cfg.log_floor));
    out.frames.row(t) = (dct * energies).transpose();
  }
  return out;
}

}  // namespace pmlf::featurizer

// SPDX-License-Identifier: Apache-2.0
//
// dmimo-lab: classical linear precoders (MRT/CB, RZF, RPS), total-power
// normalization and the SINR / sum-rate metrics.

#pragma once

#include <cmath>
#include <vector>

#include "dmimo/errors.hpp"
#include "dmimo/numkit.hpp"

namespace dmimo::precoders {

using numkit::CMatrix;
using numkit::cplx;
using numkit::RngStream;

struct PrecodingMatrix {
    CMatrix W;
    double total_power = 1.0;
};

struct NoiseModel {
    double sigma2 = 1.0;
};

struct RzfConfig {
    double alpha = 0.0;
};

// Scales W_raw so that ||W||_F^2 = P. The norm reduction is permutation
// stable (see numkit::fro_norm2), which keeps precoders bit-exact under
// row/column permutations of the input.
inline PrecodingMatrix normalize_power(const CMatrix& W_raw, double P) {
    if (!(P > 0.0))
        throw Error("normalize_power: total power must be positive");
    const double n2 = numkit::fro_norm2(W_raw);
    if (!(n2 > 0.0))
        throw ZeroChannel("normalize_power: zero precoding matrix");
    const double scale = std::sqrt(P / n2);
    PrecodingMatrix out{W_raw, P};
    for (auto& z : out.W.data())
        z *= scale;
    return out;
}

// Maximum ratio transmission / conjugate beamforming: W proportional to conj(H).
inline PrecodingMatrix mrt(const CMatrix& H, double P) {
    if (numkit::fro_norm2(H) <= 0.0)
        throw ZeroChannel("mrt: all-zero channel");
    return normalize_power(numkit::conj(H), P);
}

// Regularized zero-forcing with the convention
//   W = conj(H) (H^T conj(H) + alpha I_K)^{-1},
// which zero-forces the g_k^T w_l cross terms of the transpose signal model
// and reduces to MRT for K = 1.
inline PrecodingMatrix rzf(const CMatrix& H, const RzfConfig& cfg, double P) {
    if (numkit::fro_norm2(H) <= 0.0)
        throw ZeroChannel("rzf: all-zero channel");
    if (!(cfg.alpha >= 0.0) || !std::isfinite(cfg.alpha))
        throw Error("rzf: alpha must be finite and >= 0");
    const std::size_t K = H.cols();
    const CMatrix Hc = numkit::conj(H);
    CMatrix A = numkit::transpose(H) * Hc; // K x K Hermitian PSD
    for (std::size_t k = 0; k < K; ++k)
        A(k, k) += cfg.alpha;
    const CMatrix S = numkit::solve_hermitian(A, CMatrix::identity(K));
    return normalize_power(Hc * S, P);
}

// Default MMSE-flavored regularization when no alpha is configured.
inline double default_rzf_alpha(std::size_t K, double sigma2, double P) {
    return static_cast<double>(K) * sigma2 / P;
}

// Random phase sweeping: equal per-AP amplitude sqrt(P/M), i.i.d. uniform
// phases. Non-coherent baseline, M x 1.
inline PrecodingMatrix rps(std::size_t M, double P, RngStream& rng) {
    if (M < 1)
        throw Error("rps: M must be >= 1");
    CMatrix W(M, 1);
    const double amp = std::sqrt(P / static_cast<double>(M));
    for (std::size_t m = 0; m < M; ++m) {
        const double th = rng.uniform(0.0, 2.0 * M_PI);
        W(m, 0) = cplx{amp * std::cos(th), amp * std::sin(th)};
    }
    return PrecodingMatrix{std::move(W), P};
}

// SINR of user k under the transpose signal model y_k = g_k^T W s + n_k.
inline double sinr(const CMatrix& H, const CMatrix& W, const NoiseModel& noise, std::size_t k) {
    const std::size_t M = H.rows(), K = H.cols();
    if (k >= K)
        throw Error("sinr: user index out of range");
    if (W.rows() != M || W.cols() != K)
        throw Error("sinr: precoder shape does not match channel");
    if (!(noise.sigma2 > 0.0))
        throw Error("sinr: noise power must be positive");
    double signal = 0.0, interference = 0.0;
    for (std::size_t l = 0; l < K; ++l) {
        cplx c{0.0, 0.0};
        for (std::size_t m = 0; m < M; ++m)
            c += H(m, k) * W(m, l);
        const double p = c.real() * c.real() + c.imag() * c.imag();
        if (l == k)
            signal = p;
        else
            interference += p;
    }
    return signal / (interference + noise.sigma2);
}

// Sum rate in bits per channel use: sum_k log2(1 + SINR_k).
inline double sum_rate(const CMatrix& H, const CMatrix& W, const NoiseModel& noise) {
    double r = 0.0;
    for (std::size_t k = 0; k < H.cols(); ++k)
        r += std::log2(1.0 + sinr(H, W, noise, k));
    return r;
}

inline double sum_rate(const CMatrix& H, const PrecodingMatrix& W, const NoiseModel& noise) {
    return sum_rate(H, W.W, noise);
}

} // namespace dmimo::precoders

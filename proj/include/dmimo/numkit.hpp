// SPDX-License-Identifier: Apache-2.0
//
// dmimo-lab: minimal complex linear algebra, reproducible RNG streams and
// the Adam optimizer. Everything here is value-typed and reentrant.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dmimo/errors.hpp"

namespace dmimo::numkit {

using cplx = std::complex<double>;

// ---------------------------------------------------------------------------
// CMatrix: dense complex matrix, row-major.
// ---------------------------------------------------------------------------

class CMatrix {
  public:
    CMatrix() = default;
    CMatrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), a_(rows * cols, cplx{0.0, 0.0}) {}
    CMatrix(std::size_t rows, std::size_t cols, std::vector<cplx> entries)
        : rows_(rows), cols_(cols), a_(std::move(entries)) {
        if (a_.size() != rows_ * cols_)
            throw Error("CMatrix: entry count does not match dimensions");
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return a_.empty(); }

    cplx& operator()(std::size_t r, std::size_t c) { return a_[r * cols_ + c]; }
    const cplx& operator()(std::size_t r, std::size_t c) const { return a_[r * cols_ + c]; }

    std::vector<cplx>& data() { return a_; }
    const std::vector<cplx>& data() const { return a_; }

    static CMatrix identity(std::size_t n) {
        CMatrix I(n, n);
        for (std::size_t i = 0; i < n; ++i)
            I(i, i) = 1.0;
        return I;
    }

    bool all_finite() const {
        for (const auto& z : a_)
            if (!std::isfinite(z.real()) || !std::isfinite(z.imag()))
                return false;
        return true;
    }

  private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<cplx> a_;
};

inline CMatrix operator*(const CMatrix& A, const CMatrix& B) {
    if (A.cols() != B.rows())
        throw Error("CMatrix multiply: inner dimensions disagree");
    CMatrix C(A.rows(), B.cols());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t k = 0; k < A.cols(); ++k) {
            const cplx aik = A(i, k);
            for (std::size_t j = 0; j < B.cols(); ++j)
                C(i, j) += aik * B(k, j);
        }
    return C;
}

inline CMatrix conj(const CMatrix& A) {
    CMatrix C(A.rows(), A.cols());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j)
            C(i, j) = std::conj(A(i, j));
    return C;
}

inline CMatrix transpose(const CMatrix& A) {
    CMatrix C(A.cols(), A.rows());
    for (std::size_t i = 0; i < A.rows(); ++i)
        for (std::size_t j = 0; j < A.cols(); ++j)
            C(j, i) = A(i, j);
    return C;
}

inline CMatrix hermitian(const CMatrix& A) { return conj(transpose(A)); }

// Sum of values in ascending order. The result depends only on the multiset
// of addends, which makes reductions bit-stable under permutations of the
// input (plain left-to-right sums are not, at double precision).
inline double sum_sorted(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    double s = 0.0;
    for (double x : v)
        s += x;
    return s;
}

// Frobenius norm squared with a permutation-stable reduction.
inline double fro_norm2(const CMatrix& A) {
    std::vector<double> sq;
    sq.reserve(A.data().size());
    for (const auto& z : A.data())
        sq.push_back(z.real() * z.real() + z.imag() * z.imag());
    return sum_sorted(std::move(sq));
}

inline double fro_norm(const CMatrix& A) { return std::sqrt(fro_norm2(A)); }

// ---------------------------------------------------------------------------
// solve_hermitian: Cholesky solve of A X = B for Hermitian positive-definite A.
// Intended for the small K x K systems of regularized zero-forcing.
// ---------------------------------------------------------------------------

inline CMatrix solve_hermitian(const CMatrix& A, const CMatrix& B) {
    const std::size_t n = A.rows();
    if (n == 0 || A.cols() != n)
        throw Error("solve_hermitian: A must be square and nonempty");
    if (B.rows() != n)
        throw Error("solve_hermitian: B row count must match A");

    double scale = 0.0;
    for (const auto& z : A.data())
        scale = std::max(scale, std::abs(z));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (std::abs(A(i, j) - std::conj(A(j, i))) > 1e-12 * std::max(1.0, scale))
                throw Error("solve_hermitian: matrix is not Hermitian");

    // L L^H = A, L lower triangular. Pivots are checked against the matrix
    // scale so numerically rank-deficient systems are rejected too.
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        max_diag = std::max(max_diag, std::abs(A(i, i)));
    CMatrix L(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        cplx d = A(j, j);
        for (std::size_t k = 0; k < j; ++k)
            d -= L(j, k) * std::conj(L(j, k));
        const double dj = d.real();
        if (!(dj > 1e-12 * max_diag) || !std::isfinite(dj))
            throw SingularMatrix("solve_hermitian: matrix is not positive definite");
        const double lj = std::sqrt(dj);
        L(j, j) = lj;
        for (std::size_t i = j + 1; i < n; ++i) {
            cplx s = A(i, j);
            for (std::size_t k = 0; k < j; ++k)
                s -= L(i, k) * std::conj(L(j, k));
            L(i, j) = s / lj;
        }
    }

    // Forward substitution L Y = B, then back substitution L^H X = Y.
    CMatrix X = B;
    for (std::size_t c = 0; c < B.cols(); ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            cplx s = X(i, c);
            for (std::size_t k = 0; k < i; ++k)
                s -= L(i, k) * X(k, c);
            X(i, c) = s / L(i, i);
        }
        for (std::size_t ii = n; ii-- > 0;) {
            cplx s = X(ii, c);
            for (std::size_t k = ii + 1; k < n; ++k)
                s -= std::conj(L(k, ii)) * X(k, c);
            X(ii, c) = s / L(ii, ii);
        }
    }
    return X;
}

// ---------------------------------------------------------------------------
// RngStream: xoshiro256++ seeded via SplitMix64. Identical seeds produce
// identical sequences on every platform, and named substreams give
// independent streams for the channel/init/shuffle/... roles.
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

inline std::uint64_t rotl64(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

} // namespace detail

class RngStream {
  public:
    explicit RngStream(std::uint64_t seed) : root_(seed) {
        std::uint64_t x = seed;
        for (auto& si : s_)
            si = detail::splitmix64(x);
    }

    // Substreams are derived from the stream's construction seed, not from
    // its current position, so substream layout is stable no matter how many
    // draws happened in between.
    RngStream substream(std::string_view name) const {
        std::uint64_t x = root_ ^ detail::rotl64(detail::fnv1a64(name), 17);
        return RngStream(detail::splitmix64(x));
    }
    RngStream substream(std::uint64_t index) const {
        std::uint64_t x = root_ ^ detail::rotl64(index + 0x632BE59BD9B4E019ull, 31);
        return RngStream(detail::splitmix64(x));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl64(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl64(s_[3], 45);
        return result;
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
    // (0, 1]
    double uniform_pos() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }
    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // Unbiased integer in [0, n)
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t lim = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= lim);
        return v % n;
    }

    // Box-Muller; avoids std::normal_distribution whose stream is
    // implementation-defined.
    double normal() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // CN(0,1): |z|^2 ~ Exp(1), phase uniform.
    cplx complex_normal() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        const double r = std::sqrt(-std::log(u1));
        return cplx{r * std::cos(2.0 * M_PI * u2), r * std::sin(2.0 * M_PI * u2)};
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[below(i)]);
    }

    std::uint64_t root_seed() const { return root_; }

  private:
    std::uint64_t root_;
    std::array<std::uint64_t, 4> s_;
};

inline std::vector<cplx> sample_complex_gaussian(RngStream& rng, std::size_t n) {
    if (n < 1)
        throw Error("sample_complex_gaussian: n must be >= 1");
    std::vector<cplx> out(n);
    for (auto& z : out)
        z = rng.complex_normal();
    return out;
}

// ---------------------------------------------------------------------------
// Adam optimizer with bias correction.
// ---------------------------------------------------------------------------

struct AdamState {
    std::uint64_t step = 0;
    std::vector<double> m, v;
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    explicit AdamState(std::size_t dim, double lr = 1e-3)
        : m(dim, 0.0), v(dim, 0.0), learning_rate(lr) {}
};

inline void adam_step(AdamState& st, std::vector<double>& params, const std::vector<double>& grads) {
    if (params.size() != grads.size() || params.size() != st.m.size())
        throw Error("adam_step: dimension mismatch");
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grads[i];
        st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grads[i] * grads[i];
        const double mhat = st.m[i] / bc1;
        const double vhat = st.v[i] / bc2;
        params[i] -= st.learning_rate * mhat / (std::sqrt(vhat) + st.epsilon);
    }
}

} // namespace dmimo::numkit

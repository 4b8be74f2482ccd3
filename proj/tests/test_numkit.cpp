// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <complex>

#include "dmimo/numkit.hpp"

using namespace dmimo;
using numkit::CMatrix;
using numkit::cplx;
using numkit::RngStream;

namespace {

CMatrix random_spd(std::size_t n, RngStream& rng) {
    // A = B B^H + n I is Hermitian positive definite.
    CMatrix B(n, n);
    for (auto& z : B.data())
        z = rng.complex_normal();
    CMatrix A = B * numkit::hermitian(B);
    for (std::size_t i = 0; i < n; ++i)
        A(i, i) += static_cast<double>(n);
    return A;
}

} // namespace

TEST_CASE("solve_hermitian identity and scaling", "[numkit]") {
    CMatrix I2 = CMatrix::identity(2);
    CMatrix B(2, 1, {cplx{1, 0}, cplx{0, 2}});
    CMatrix X = numkit::solve_hermitian(I2, B);
    CHECK(std::abs(X(0, 0) - cplx{1, 0}) < 1e-15);
    CHECK(std::abs(X(1, 0) - cplx{0, 2}) < 1e-15);

    CMatrix A2 = CMatrix::identity(2);
    for (auto& z : A2.data())
        z *= 2.0;
    CMatrix B2(2, 1, {cplx{4, 0}, cplx{0, 0}});
    CMatrix X2 = numkit::solve_hermitian(A2, B2);
    CHECK(std::abs(X2(0, 0) - cplx{2, 0}) < 1e-15);
    CHECK(std::abs(X2(1, 0)) < 1e-15);
}

TEST_CASE("solve_hermitian residual oracle on random SPD systems", "[numkit]") {
    RngStream rng(42);
    for (std::size_t n = 1; n <= 8; ++n) {
        CMatrix A = random_spd(n, rng);
        CMatrix B(n, 3);
        for (auto& z : B.data())
            z = rng.complex_normal();
        CMatrix X = numkit::solve_hermitian(A, B);
        // The residual bound is its own oracle.
        CMatrix R = A * X;
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < R.data().size(); ++i) {
            num += std::norm(R.data()[i] - B.data()[i]);
            den += std::norm(B.data()[i]);
        }
        CHECK(std::sqrt(num / den) <= 1e-10);
    }
}

TEST_CASE("solve_hermitian rejects singular and non-Hermitian input", "[numkit]") {
    CMatrix Z(2, 2); // all zeros: singular
    CHECK_THROWS_AS(numkit::solve_hermitian(Z, CMatrix::identity(2)), SingularMatrix);

    CMatrix N(2, 2, {cplx{1, 0}, cplx{2, 0}, cplx{0, 0}, cplx{1, 0}});
    CHECK_THROWS_AS(numkit::solve_hermitian(N, CMatrix::identity(2)), Error);

    // Negative definite.
    CMatrix D = CMatrix::identity(2);
    D(0, 0) = -1.0;
    CHECK_THROWS_AS(numkit::solve_hermitian(D, CMatrix::identity(2)), SingularMatrix);
}

TEST_CASE("RngStream determinism and substreams", "[numkit]") {
    RngStream a(123), b(123);
    for (int i = 0; i < 100; ++i)
        REQUIRE(a.next_u64() == b.next_u64());

    // Named substreams are independent of draw position and of each other.
    RngStream c(123);
    c.next_u64();
    RngStream s1 = RngStream(123).substream("channel");
    RngStream s2 = c.substream("channel");
    CHECK(s1.next_u64() == s2.next_u64());
    CHECK(RngStream(123).substream("channel").next_u64() !=
          RngStream(123).substream("init").next_u64());
    CHECK(RngStream(123).substream(0).next_u64() != RngStream(123).substream(1).next_u64());
}

TEST_CASE("sample_complex_gaussian is deterministic", "[numkit]") {
    RngStream a(7), b(7);
    auto va = numkit::sample_complex_gaussian(a, 10);
    auto vb = numkit::sample_complex_gaussian(b, 10);
    REQUIRE(va.size() == 10);
    for (std::size_t i = 0; i < va.size(); ++i)
        CHECK(va[i] == vb[i]);
}

TEST_CASE("sample_complex_gaussian Monte-Carlo statistics", "[numkit]") {
    RngStream rng(2024);
    const std::size_t n = 100000;
    auto v = numkit::sample_complex_gaussian(rng, n);

    cplx mean{0, 0};
    for (const auto& z : v)
        mean += z;
    mean /= static_cast<double>(n);
    CHECK(std::abs(mean) <= 0.02);

    // |z|^2 ~ Exp(1): unit mean and unit variance.
    double m2 = 0.0;
    for (const auto& z : v)
        m2 += std::norm(z);
    m2 /= static_cast<double>(n);
    CHECK(m2 >= 0.98);
    CHECK(m2 <= 1.02);
    double var = 0.0;
    for (const auto& z : v)
        var += (std::norm(z) - m2) * (std::norm(z) - m2);
    var /= static_cast<double>(n - 1);
    CHECK(var >= 0.98);
    CHECK(var <= 1.02);

    // Real/imaginary parts uncorrelated.
    double mr = 0.0, mi = 0.0;
    for (const auto& z : v) {
        mr += z.real();
        mi += z.imag();
    }
    mr /= n;
    mi /= n;
    double crr = 0.0, cii = 0.0, cri = 0.0;
    for (const auto& z : v) {
        crr += (z.real() - mr) * (z.real() - mr);
        cii += (z.imag() - mi) * (z.imag() - mi);
        cri += (z.real() - mr) * (z.imag() - mi);
    }
    CHECK(std::abs(cri / std::sqrt(crr * cii)) <= 0.02);
}

TEST_CASE("adam first step equals lr in magnitude", "[numkit]") {
    numkit::AdamState st(1, 1e-4);
    std::vector<double> p{0.0}, g{1.0};
    numkit::adam_step(st, p, g);
    CHECK(std::abs(std::abs(p[0]) - 1e-4) < 1e-9);
    CHECK(p[0] < 0.0);
    CHECK(st.step == 1);
}

TEST_CASE("adam zero gradient is a no-op", "[numkit]") {
    numkit::AdamState st(3, 1e-2);
    std::vector<double> p{1.0, -2.0, 0.5}, g{0.0, 0.0, 0.0};
    const auto p0 = p;
    for (int i = 0; i < 10; ++i)
        numkit::adam_step(st, p, g);
    for (std::size_t i = 0; i < p.size(); ++i)
        CHECK(std::abs(p[i] - p0[i]) <= 1e-12);
}

TEST_CASE("adam converges on a convex quadratic", "[numkit]") {
    // f(x) = x^2, f'(x) = 2x, from x = 1 with lr 1e-2.
    numkit::AdamState st(1, 1e-2);
    std::vector<double> x{1.0};
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> g{2.0 * x[0]};
        numkit::adam_step(st, x, g);
    }
    CHECK(std::abs(x[0]) <= 0.05);
}

TEST_CASE("adam step magnitude bounded by lr and dims checked", "[numkit]") {
    numkit::AdamState st(2, 3e-3);
    std::vector<double> p{0.0, 0.0}, g{100.0, -0.3};
    numkit::adam_step(st, p, g);
    for (double v : p)
        CHECK(std::abs(v) <= 3e-3 * (1.0 + 1e-9));

    std::vector<double> bad{1.0};
    CHECK_THROWS_AS(numkit::adam_step(st, p, bad), Error);
}

TEST_CASE("sum_sorted is permutation invariant", "[numkit]") {
    RngStream rng(5);
    std::vector<double> v(64);
    for (auto& x : v)
        x = rng.normal() * std::pow(10.0, rng.uniform(-6, 6));
    std::vector<double> w = v;
    rng.shuffle(w);
    CHECK(numkit::sum_sorted(v) == numkit::sum_sorted(w));
}

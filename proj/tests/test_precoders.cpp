// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dmimo/precoders.hpp"

using namespace dmimo;
using numkit::CMatrix;
using numkit::cplx;
using numkit::RngStream;
using precoders::NoiseModel;
using precoders::PrecodingMatrix;

namespace {

CMatrix random_channel(std::size_t M, std::size_t K, RngStream& rng) {
    CMatrix H(M, K);
    for (auto& z : H.data())
        z = rng.complex_normal();
    return H;
}

// Independent brute-force rewrite of the SINR/sum-rate definitions, kept
// loop-by-loop so it cannot share a code path with the implementation.
double brute_force_sum_rate(const CMatrix& H, const CMatrix& W, double sigma2) {
    double total = 0.0;
    for (std::size_t k = 0; k < H.cols(); ++k) {
        double sig_re = 0.0, sig_im = 0.0;
        for (std::size_t m = 0; m < H.rows(); ++m) {
            sig_re += H(m, k).real() * W(m, k).real() - H(m, k).imag() * W(m, k).imag();
            sig_im += H(m, k).real() * W(m, k).imag() + H(m, k).imag() * W(m, k).real();
        }
        double interference = 0.0;
        for (std::size_t l = 0; l < W.cols(); ++l) {
            if (l == k)
                continue;
            double re = 0.0, im = 0.0;
            for (std::size_t m = 0; m < H.rows(); ++m) {
                re += H(m, k).real() * W(m, l).real() - H(m, k).imag() * W(m, l).imag();
                im += H(m, k).real() * W(m, l).imag() + H(m, k).imag() * W(m, l).real();
            }
            interference += re * re + im * im;
        }
        const double sinr = (sig_re * sig_re + sig_im * sig_im) / (interference + sigma2);
        total += std::log2(1.0 + sinr);
    }
    return total;
}

double column_angle(const CMatrix& A, const CMatrix& B, std::size_t k) {
    cplx ip{0, 0};
    double na = 0, nb = 0;
    for (std::size_t m = 0; m < A.rows(); ++m) {
        ip += std::conj(A(m, k)) * B(m, k);
        na += std::norm(A(m, k));
        nb += std::norm(B(m, k));
    }
    const double c = std::min(1.0, std::abs(ip) / std::sqrt(na * nb));
    return std::acos(c);
}

} // namespace

TEST_CASE("mrt conjugates and normalizes", "[precoders]") {
    CMatrix H(2, 1, {cplx{1, 0}, cplx{0, 1}});
    auto W = precoders::mrt(H, 1.0);
    CHECK(std::abs(W.W(0, 0) - cplx{1.0 / std::sqrt(2.0), 0}) < 1e-15);
    CHECK(std::abs(W.W(1, 0) - cplx{0, -1.0 / std::sqrt(2.0)}) < 1e-15);

    // Real positive H: conjugation is the identity.
    CMatrix Hr(3, 2);
    RngStream rng(1);
    for (auto& z : Hr.data())
        z = cplx{rng.uniform(0.1, 2.0), 0.0};
    auto Wr = precoders::mrt(Hr, 2.5);
    const double scale = std::sqrt(2.5 / numkit::fro_norm2(Hr));
    for (std::size_t i = 0; i < Hr.data().size(); ++i)
        CHECK(std::abs(Wr.W.data()[i] - Hr.data()[i] * scale) < 1e-14);

    // angle(W) = -angle(H) for every entry.
    CMatrix Hc = random_channel(4, 3, rng);
    auto Wc = precoders::mrt(Hc, 1.0);
    for (std::size_t i = 0; i < Hc.data().size(); ++i) {
        const double sum = std::arg(Hc.data()[i]) + std::arg(Wc.W.data()[i]);
        CHECK(std::abs(std::remainder(sum, 2.0 * M_PI)) < 1e-12);
    }

    CMatrix Z(2, 2);
    CHECK_THROWS_AS(precoders::mrt(Z, 1.0), ZeroChannel);
}

TEST_CASE("normalize_power contract", "[precoders]") {
    RngStream rng(2);
    CMatrix W = random_channel(5, 2, rng);

    SECTION("unit norm input with unit power is unchanged") {
        const double n = numkit::fro_norm(W);
        CMatrix Wu = W;
        for (auto& z : Wu.data())
            z /= n;
        auto out = precoders::normalize_power(Wu, 1.0);
        for (std::size_t i = 0; i < Wu.data().size(); ++i)
            CHECK(std::abs(out.W.data()[i] - Wu.data()[i]) < 1e-14);
    }

    SECTION("defining property and scale invariance") {
        auto out = precoders::normalize_power(W, 3.7);
        CHECK(numkit::fro_norm2(out.W) == Catch::Approx(3.7).margin(1e-10));
        CMatrix W7 = W;
        for (auto& z : W7.data())
            z *= 7.0;
        auto out7 = precoders::normalize_power(W7, 3.7);
        for (std::size_t i = 0; i < W.data().size(); ++i)
            CHECK(std::abs(out7.W.data()[i] - out.W.data()[i]) < 1e-12);
    }

    SECTION("zero input throws") {
        CMatrix Z(3, 1);
        CHECK_THROWS_AS(precoders::normalize_power(Z, 1.0), ZeroChannel);
    }
}

TEST_CASE("rzf reduces to MRT for K=1 and large alpha", "[precoders]") {
    RngStream rng(3);
    CMatrix H1 = random_channel(6, 1, rng);
    auto Wm = precoders::mrt(H1, 1.0);
    auto Wr = precoders::rzf(H1, precoders::RzfConfig{0.3}, 1.0);
    CHECK(column_angle(Wm.W, Wr.W, 0) < 1e-12);

    CMatrix H = random_channel(8, 3, rng);
    const double alpha = 1e6 * numkit::fro_norm2(H);
    auto Wbig = precoders::rzf(H, precoders::RzfConfig{alpha}, 1.0);
    auto Wmrt = precoders::mrt(H, 1.0);
    for (std::size_t k = 0; k < 3; ++k)
        CHECK(column_angle(Wmrt.W, Wbig.W, k) < 1e-4);
}

TEST_CASE("rzf with alpha=0 zero-forces the cross terms", "[precoders]") {
    RngStream rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        CMatrix H = random_channel(8, 4, rng);
        auto W = precoders::rzf(H, precoders::RzfConfig{0.0}, 1.0);
        CMatrix G = numkit::transpose(H) * W.W;
        double offdiag = 0.0, mindiag = 1e300;
        for (std::size_t k = 0; k < 4; ++k)
            for (std::size_t l = 0; l < 4; ++l) {
                if (k == l)
                    mindiag = std::min(mindiag, std::abs(G(k, l)));
                else
                    offdiag = std::max(offdiag, std::abs(G(k, l)));
            }
        CHECK(offdiag / mindiag <= 1e-9);
    }

    // Rank-deficient system: K > M makes H^T conj(H) singular.
    CMatrix Hbad = random_channel(1, 2, rng);
    CHECK_THROWS_AS(precoders::rzf(Hbad, precoders::RzfConfig{0.0}, 1.0), SingularMatrix);
}

TEST_CASE("rzf direction approaches MRT monotonically in alpha", "[precoders]") {
    RngStream rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        CMatrix H = random_channel(8, 3, rng);
        auto Wm = precoders::mrt(H, 1.0);
        const double h2 = numkit::fro_norm2(H);
        double prev = 1e300;
        for (double mult : {1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3}) {
            auto Wr = precoders::rzf(H, precoders::RzfConfig{mult * h2}, 1.0);
            double ang = 0.0;
            for (std::size_t k = 0; k < 3; ++k)
                ang += column_angle(Wm.W, Wr.W, k);
            CHECK(ang <= prev + 1e-9);
            prev = ang;
        }
    }
}

TEST_CASE("sinr matches hand-computed cases", "[precoders]") {
    SECTION("unit scalar case") {
        CMatrix H(1, 1, {cplx{1, 0}});
        CMatrix W(1, 1, {cplx{1, 0}});
        CHECK(precoders::sinr(H, W, NoiseModel{1.0}, 0) == Catch::Approx(1.0).margin(1e-15));
        CHECK(precoders::sum_rate(H, W, NoiseModel{1.0}) == Catch::Approx(1.0).margin(1e-15));
    }

    SECTION("orthogonal two-user case") {
        CMatrix H(2, 2, {cplx{1, 0}, cplx{0, 0}, cplx{0, 0}, cplx{1, 0}});
        CMatrix W = CMatrix::identity(2);
        CHECK(precoders::sinr(H, W, NoiseModel{1.0}, 0) == Catch::Approx(1.0).margin(1e-15));
        CHECK(precoders::sinr(H, W, NoiseModel{1.0}, 1) == Catch::Approx(1.0).margin(1e-15));
        CHECK(precoders::sum_rate(H, W, NoiseModel{1.0}) == Catch::Approx(2.0).margin(1e-15));
    }

    SECTION("M=2 single user MRT") {
        CMatrix H(2, 1, {cplx{1, 0}, cplx{1, 0}});
        auto W = precoders::mrt(H, 1.0);
        CHECK(precoders::sinr(H, W.W, NoiseModel{1.0}, 0) == Catch::Approx(2.0).margin(1e-12));
        CHECK(precoders::sum_rate(H, W, NoiseModel{1.0}) ==
              Catch::Approx(std::log2(3.0)).margin(1e-12));
    }

    SECTION("index out of range") {
        CMatrix H(1, 1, {cplx{1, 0}});
        CHECK_THROWS_AS(precoders::sinr(H, H, NoiseModel{1.0}, 1), Error);
    }
}

TEST_CASE("sum_rate matches the brute-force oracle", "[precoders]") {
    RngStream rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t M = 1 + rng.below(8);
        const std::size_t K = 1 + rng.below(4);
        CMatrix H = random_channel(M, K, rng);
        CMatrix W = random_channel(M, K, rng);
        const double sigma2 = std::pow(10.0, rng.uniform(-4, 1));
        const double ours = precoders::sum_rate(H, W, NoiseModel{sigma2});
        const double oracle = brute_force_sum_rate(H, W, sigma2);
        CHECK(std::abs(ours - oracle) <= 1e-12 * std::max(1.0, std::abs(oracle)));
    }
}

TEST_CASE("sum_rate is invariant to per-column phase rotations", "[precoders]") {
    RngStream rng(7);
    CMatrix H = random_channel(6, 3, rng);
    CMatrix W = random_channel(6, 3, rng);
    CMatrix W2 = W;
    for (std::size_t k = 0; k < 3; ++k) {
        const double th = rng.uniform(0, 2 * M_PI);
        const cplx rot{std::cos(th), std::sin(th)};
        for (std::size_t m = 0; m < 6; ++m)
            W2(m, k) *= rot;
    }
    const double r1 = precoders::sum_rate(H, W, NoiseModel{0.1});
    const double r2 = precoders::sum_rate(H, W2, NoiseModel{0.1});
    CHECK(r1 == Catch::Approx(r2).epsilon(1e-12));
}

TEST_CASE("rps draws equal-amplitude random phases", "[precoders]") {
    RngStream rng(8);
    auto W = precoders::rps(15, 2.0, rng);
    for (const auto& z : W.W.data())
        CHECK(std::abs(z) == Catch::Approx(std::sqrt(2.0 / 15.0)).epsilon(1e-12));

    // M=1: received power through any channel is phase invariant.
    CMatrix h(1, 1, {cplx{0.3, -0.4}});
    double p0 = -1.0;
    for (int i = 0; i < 10; ++i) {
        auto W1 = precoders::rps(1, 1.0, rng);
        cplx y = h(0, 0) * W1.W(0, 0);
        if (p0 < 0)
            p0 = std::norm(y);
        CHECK(std::norm(y) == Catch::Approx(p0).epsilon(1e-12));
    }
}

TEST_CASE("rps non-coherent combining gain", "[precoders]") {
    // Unit flat channel, per-AP power 1/M of total M: mean received power
    // approaches M times the per-AP power.
    RngStream rng(9);
    const std::size_t M = 15;
    CMatrix h(M, 1);
    for (auto& z : h.data())
        z = cplx{1.0, 0.0};
    const std::size_t draws = 100000;
    double acc = 0.0;
    for (std::size_t i = 0; i < draws; ++i) {
        auto W = precoders::rps(M, static_cast<double>(M), rng); // per-AP power 1
        cplx y{0, 0};
        for (std::size_t m = 0; m < M; ++m)
            y += h(m, 0) * W.W(m, 0);
        acc += std::norm(y);
    }
    const double mean_power = acc / static_cast<double>(draws);
    CHECK(mean_power >= 15.0 * 0.97);
    CHECK(mean_power <= 15.0 * 1.03);
    CHECK(10.0 * std::log10(mean_power) == Catch::Approx(11.76).margin(0.15));
}

TEST_CASE("coherent combining law with equal per-AP power", "[precoders]") {
    // K=1, unit-magnitude equal-gain channel, MRT phases, per-AP power p0:
    // received power is M^2 p0, i.e. 20 log10(M) over the M=1 case.
    RngStream rng(10);
    const double p0 = 1.0;
    auto power_at = [&](std::size_t M) {
        CMatrix h(M, 1);
        for (auto& z : h.data()) {
            const double th = rng.uniform(0, 2 * M_PI);
            z = cplx{std::cos(th), std::sin(th)};
        }
        auto W = precoders::mrt(h, static_cast<double>(M) * p0); // sqrt(p0) per AP
        cplx y{0, 0};
        for (std::size_t m = 0; m < M; ++m)
            y += h(m, 0) * W.W(m, 0);
        return std::norm(y);
    };
    const double p1 = power_at(1);
    for (std::size_t M : {5, 10, 15}) {
        const double gain_db = 10.0 * std::log10(power_at(M) / p1);
        CHECK(gain_db == Catch::Approx(20.0 * std::log10(static_cast<double>(M))).margin(1e-9));
    }
    CHECK(20.0 * std::log10(15.0) == Catch::Approx(23.52).margin(5e-3));
}

TEST_CASE("mrt direction is scale invariant", "[precoders]") {
    RngStream rng(11);
    CMatrix H = random_channel(5, 2, rng);
    const cplx c{1.7, -0.9};
    CMatrix Hc = H;
    for (auto& z : Hc.data())
        z *= c;
    auto W1 = precoders::mrt(H, 1.0);
    auto W2 = precoders::mrt(Hc, 1.0);
    // W2 = W1 rotated by the phase of conj(c).
    const cplx rot = std::conj(c) / std::abs(c);
    for (std::size_t i = 0; i < H.data().size(); ++i)
        CHECK(std::abs(W2.W.data()[i] - W1.W.data()[i] * rot) < 1e-12);
}

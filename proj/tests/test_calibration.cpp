// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dmimo/calibration.hpp"

using namespace dmimo;
using calibration::HardwarePhaseModel;
using calibration::PhaseLedger;
using numkit::RngStream;

namespace {

HardwarePhaseModel single_ap(double tx, double rx, double cable, double ch, double ref = 0.0,
                             double pilot = 0.0) {
    HardwarePhaseModel hw;
    hw.phi_tx = {tx};
    hw.phi_rx = {rx};
    hw.phi_cable = {cable};
    hw.phi_ch = {ch};
    hw.amp = {1.0};
    hw.phi_ref = ref;
    hw.phi_tx_ue = pilot;
    return hw;
}

} // namespace

TEST_CASE("measurement definitions", "[calibration]") {
    SECTION("reference") {
        auto hw = single_ap(0.0, 0.1, 0.2, 0.0);
        CHECK(calibration::measure_reference(hw, 0) == Catch::Approx(0.1).margin(1e-15));
        auto zero = single_ap(0, 0, 0, 0);
        CHECK(calibration::measure_reference(zero, 0) == Catch::Approx(0.0).margin(1e-15));
        // Adding 2*pi to phi_rx leaves the wrapped result unchanged.
        auto wrapped = single_ap(0.0, 0.1 + 2.0 * M_PI, 0.2, 0.0);
        CHECK(calibration::measure_reference(wrapped, 0) ==
              Catch::Approx(0.1).margin(1e-12));
    }

    SECTION("pilot") {
        auto hw = single_ap(0.0, 0.1, 0.0, 0.5);
        CHECK(calibration::measure_pilot(hw, 0) == Catch::Approx(0.4).margin(1e-15));
        auto zero = single_ap(0, 0, 0, 0);
        CHECK(calibration::measure_pilot(zero, 0) == Catch::Approx(0.0).margin(1e-15));
        // Two APs with equal rx and channel phases measure the same pilot.
        HardwarePhaseModel two;
        two.phi_tx = {0.3, 0.9};
        two.phi_rx = {0.1, 0.1};
        two.phi_cable = {0.4, 0.7};
        two.phi_ch = {0.5, 0.5};
        two.amp = {1.0, 1.0};
        CHECK(calibration::measure_pilot(two, 0) == calibration::measure_pilot(two, 1));
    }

    SECTION("loopback isolates the TX-RX chain difference") {
        auto hw = single_ap(0.3, 0.1, 0.2, 0.5);
        CHECK(calibration::measure_loopback(hw, 0) == Catch::Approx(0.2).margin(1e-15));
        auto matched = single_ap(0.7, 0.7, 0.4, 0.9);
        CHECK(calibration::measure_loopback(matched, 0) == Catch::Approx(0.0).margin(1e-15));
        // Independent of cable and channel.
        auto hw2 = single_ap(0.3, 0.1, 1.9, 2.5);
        CHECK(calibration::measure_loopback(hw2, 0) ==
              calibration::measure_loopback(hw, 0));
    }
}

TEST_CASE("align_csi recovers the channel phase", "[calibration]") {
    auto hw = single_ap(0.0, 0.1, 0.2, 0.5);
    auto led = calibration::measure_all(hw);
    CHECK(calibration::align_csi(led, 0) == Catch::Approx(0.5).margin(1e-12));

    auto zero = single_ap(0, 0, 0, 0);
    CHECK(calibration::align_csi(calibration::measure_all(zero), 0) ==
          Catch::Approx(0.0).margin(1e-15));

    // RX-chain cancellation: two APs differing only in phi_rx agree.
    HardwarePhaseModel two;
    two.phi_tx = {0.3, 0.3};
    two.phi_rx = {0.1, 1.7};
    two.phi_cable = {0.4, 0.4};
    two.phi_ch = {0.5, 0.5};
    two.amp = {1.0, 1.0};
    auto led2 = calibration::measure_all(two);
    CHECK(calibration::align_csi(led2, 0) ==
          Catch::Approx(calibration::align_csi(led2, 1)).margin(1e-12));

    PhaseLedger empty;
    empty.phi_cable = {0.0};
    empty.phi_ref_meas.resize(1);
    empty.phi_pilot_meas.resize(1);
    empty.phi_loop_meas.resize(1);
    CHECK_THROWS_AS(calibration::align_csi(empty, 0), IncompleteLedger);
}

TEST_CASE("compensate_downlink cancels the TX chain", "[calibration]") {
    auto zero = single_ap(0, 0, 0, 0);
    CHECK(calibration::compensate_downlink(calibration::measure_all(zero), 0.7, 0) ==
          Catch::Approx(0.7).margin(1e-15));

    auto hw = single_ap(0.3, 0.1, 0.2, 0.5);
    auto led = calibration::measure_all(hw);
    CHECK(calibration::compensate_downlink(led, 0.0, 0) == Catch::Approx(-0.3).margin(1e-12));

    // Independent of the channel phase.
    auto hw2 = single_ap(0.3, 0.1, 0.2, 2.9);
    CHECK(calibration::compensate_downlink(calibration::measure_all(hw2), 0.0, 0) ==
          Catch::Approx(-0.3).margin(1e-12));
}

TEST_CASE("simulate_downlink single transmitter", "[calibration]") {
    RngStream rng(1);
    for (int i = 0; i < 5; ++i) {
        auto hw = calibration::random_hardware(rng, 1, 0.7, 0.7);
        const double p =
            calibration::received_power(calibration::simulate_downlink(hw, {rng.uniform(0, 6)}));
        CHECK(p == Catch::Approx(0.49).epsilon(1e-12));
    }
}

TEST_CASE("full calibration chain coheres", "[calibration]") {
    RngStream rng(2);
    for (std::size_t M : {2, 5, 15, 33}) {
        for (int trial = 0; trial < 10; ++trial) {
            auto hw = calibration::random_hardware(rng, M, 0.5, 2.0);
            double asum = 0.0;
            for (double a : hw.amp)
                asum += a;
            const double p = calibration::calibrated_mrt_power(hw);
            CHECK(std::abs(p - asum * asum) <= 1e-9 * asum * asum);
        }
    }
}

TEST_CASE("coherent gain follows 20log10(M)", "[calibration]") {
    RngStream rng(3);
    auto hw1 = calibration::random_hardware(rng, 1);
    const double p1 = calibration::calibrated_mrt_power(hw1);
    for (std::size_t M : {5, 10, 15}) {
        auto hw = calibration::random_hardware(rng, M);
        const double gain_db = 10.0 * std::log10(calibration::calibrated_mrt_power(hw) / p1);
        CHECK(gain_db == Catch::Approx(20.0 * std::log10(double(M))).margin(1e-6));
    }
    CHECK(20.0 * std::log10(15.0) == Catch::Approx(23.52).margin(5e-3));
}

TEST_CASE("paper-literal mode fails to cohere under heterogeneous RX phases", "[calibration]") {
    RngStream rng(4);
    int fails = 0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
        auto hw = calibration::random_hardware(rng, 8);
        double asum = 0.0;
        for (double a : hw.amp)
            asum += a;
        const double p = calibration::calibrated_mrt_power(hw, /*paper_literal=*/true);
        if (std::abs(p - asum * asum) > 1e-9 * asum * asum)
            ++fails;
    }
    CHECK(fails >= 95);
}

TEST_CASE("aligned CSI differs from the channel phase by an AP-independent constant",
          "[calibration]") {
    RngStream rng(5);
    auto hw = calibration::random_hardware(rng, 33);
    auto led = calibration::measure_all(hw);
    const double c0 = calibration::wrap_phase(calibration::align_csi(led, 0) - hw.phi_ch[0]);
    for (std::size_t i = 1; i < 33; ++i) {
        const double ci = calibration::wrap_phase(calibration::align_csi(led, i) - hw.phi_ch[i]);
        CHECK(std::abs(calibration::wrap_phase(ci - c0)) < 1e-12);
    }
}

TEST_CASE("uncalibrated transmission stays at the non-coherent level", "[calibration]") {
    // Skipping compensation with random hardware behaves like random phases:
    // E[power] = sum a_i^2.
    RngStream rng(6);
    const std::size_t M = 8;
    const int draws = 20000;
    double acc = 0.0;
    for (int t = 0; t < draws; ++t) {
        auto hw = calibration::random_hardware(rng, M);
        auto led = calibration::measure_all(hw);
        std::vector<double> theta(M);
        for (std::size_t i = 0; i < M; ++i)
            theta[i] = -calibration::align_csi(led, i); // theta_bf applied uncompensated
        acc += calibration::received_power(calibration::simulate_downlink(hw, theta));
    }
    const double mean = acc / draws;
    CHECK(mean >= 8.0 * 0.95);
    CHECK(mean <= 8.0 * 1.05);
}

TEST_CASE("phases wrap to (-pi, pi]", "[calibration]") {
    CHECK(calibration::wrap_phase(M_PI) == Catch::Approx(M_PI));
    CHECK(calibration::wrap_phase(-M_PI) == Catch::Approx(M_PI));
    CHECK(calibration::wrap_phase(3.0 * M_PI) == Catch::Approx(M_PI));
    CHECK(calibration::wrap_phase(7.5) == Catch::Approx(7.5 - 2.0 * M_PI).margin(1e-12));
    RngStream rng(7);
    for (int i = 0; i < 1000; ++i) {
        const double w = calibration::wrap_phase(rng.uniform(-50, 50));
        CHECK(w > -M_PI - 1e-15);
        CHECK(w <= M_PI + 1e-15);
    }
}

TEST_CASE("measurement noise is optional and seeded", "[calibration]") {
    RngStream rng(8);
    auto hw = calibration::random_hardware(rng, 4);
    RngStream n1(9), n2(9);
    const double a = calibration::measure_pilot(hw, 0, 0.1, n1);
    const double b = calibration::measure_pilot(hw, 0, 0.1, n2);
    CHECK(a == b);
    CHECK(a != calibration::measure_pilot(hw, 0));
    RngStream n3(10);
    CHECK(calibration::measure_pilot(hw, 0, 0.0, n3) == calibration::measure_pilot(hw, 0));
}

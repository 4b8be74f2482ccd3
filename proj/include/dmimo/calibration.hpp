// SPDX-License-Identifier: Apache-2.0
//
// dmimo-lab: simulated hardware phase model and the three-measurement
// reciprocity calibration chain (reference, pilot, loopback), uplink CSI
// alignment and downlink phase compensation.
//
// Measurement model per AP i:
//   reference:  phi_ref - phi_rx[i] + phi_cable[i]
//   pilot:      phi_pilot - phi_rx[i] + phi_ch[i]     (phi_pilot = UE TX chain)
//   loopback:   phi_tx[i] - phi_rx[i]
//
// The default alignment/compensation first references pilot and loopback
// against the reference-tone measurement, which cancels the per-AP RX chain;
// a "paper-literal" variant without that anchoring is provided for contrast
// and does not cohere under heterogeneous RX phases.

#pragma once

#include <cmath>
#include <complex>
#include <optional>
#include <vector>

#include "dmimo/errors.hpp"
#include "dmimo/numkit.hpp"

namespace dmimo::calibration {

using numkit::cplx;
using numkit::RngStream;

// Wraps to (-pi, pi].
inline double wrap_phase(double phi) {
    const double two_pi = 2.0 * M_PI;
    double w = std::fmod(phi, two_pi);
    if (w <= -M_PI)
        w += two_pi;
    else if (w > M_PI)
        w -= two_pi;
    return w;
}

struct HardwarePhaseModel {
    // Per-AP transceiver chains and calibration cable delays (radians).
    std::vector<double> phi_tx, phi_rx, phi_cable;
    // UE chains and the distributed reference tone phase.
    double phi_tx_ue = 0.0;
    double phi_rx_ue = 0.0;
    double phi_ref = 0.0;
    // Per-link (AP -> the UE) channel phase and amplitude.
    std::vector<double> phi_ch;
    std::vector<double> amp;

    std::size_t n_aps() const { return phi_tx.size(); }

    void validate() const {
        const std::size_t M = phi_tx.size();
        if (M == 0 || phi_rx.size() != M || phi_cable.size() != M || phi_ch.size() != M ||
            amp.size() != M)
            throw Error("HardwarePhaseModel: per-AP vectors must share one length >= 1");
        for (double a : amp)
            if (!(a > 0.0))
                throw Error("HardwarePhaseModel: amplitudes must be positive");
    }
};

// One observed calibration triple per AP plus the known cable phases.
struct PhaseLedger {
    std::vector<std::optional<double>> phi_ref_meas, phi_pilot_meas, phi_loop_meas;
    std::vector<double> phi_cable;

    std::size_t n_aps() const { return phi_cable.size(); }

    void require(const std::vector<std::optional<double>>& v, std::size_t i, const char* what) const {
        if (i >= v.size() || !v[i])
            throw IncompleteLedger(std::string("PhaseLedger: missing ") + what +
                                   " measurement for AP " + std::to_string(i));
    }
};

struct BeamPhases {
    std::vector<double> theta_bf;
    std::vector<double> theta_tx;
};

// ---------------------------------------------------------------------------
// The three measurements
// ---------------------------------------------------------------------------

inline double measure_reference(const HardwarePhaseModel& hw, std::size_t i) {
    return wrap_phase(hw.phi_ref - hw.phi_rx[i] + hw.phi_cable[i]);
}

inline double measure_pilot(const HardwarePhaseModel& hw, std::size_t i) {
    return wrap_phase(hw.phi_tx_ue - hw.phi_rx[i] + hw.phi_ch[i]);
}

inline double measure_loopback(const HardwarePhaseModel& hw, std::size_t i) {
    return wrap_phase(hw.phi_tx[i] - hw.phi_rx[i]);
}

// Noisy variants for robustness studies; sigma_phi = 0 reduces to the exact
// measurements.
inline double measure_reference(const HardwarePhaseModel& hw, std::size_t i, double sigma_phi,
                                RngStream& rng) {
    return wrap_phase(measure_reference(hw, i) + sigma_phi * rng.normal());
}
inline double measure_pilot(const HardwarePhaseModel& hw, std::size_t i, double sigma_phi,
                            RngStream& rng) {
    return wrap_phase(measure_pilot(hw, i) + sigma_phi * rng.normal());
}
inline double measure_loopback(const HardwarePhaseModel& hw, std::size_t i, double sigma_phi,
                               RngStream& rng) {
    return wrap_phase(measure_loopback(hw, i) + sigma_phi * rng.normal());
}

inline PhaseLedger measure_all(const HardwarePhaseModel& hw) {
    hw.validate();
    const std::size_t M = hw.n_aps();
    PhaseLedger led;
    led.phi_ref_meas.resize(M);
    led.phi_pilot_meas.resize(M);
    led.phi_loop_meas.resize(M);
    led.phi_cable = hw.phi_cable;
    for (std::size_t i = 0; i < M; ++i) {
        led.phi_ref_meas[i] = measure_reference(hw, i);
        led.phi_pilot_meas[i] = measure_pilot(hw, i);
        led.phi_loop_meas[i] = measure_loopback(hw, i);
    }
    return led;
}

// ---------------------------------------------------------------------------
// Uplink alignment and downlink compensation
// ---------------------------------------------------------------------------

// Reference-anchored CSI phase: (pilot - reference) + cable. The RX chain and
// cable terms cancel, leaving phi_ch[i] plus an AP-independent constant.
inline double align_csi(const PhaseLedger& led, std::size_t i) {
    led.require(led.phi_pilot_meas, i, "pilot");
    led.require(led.phi_ref_meas, i, "reference");
    return wrap_phase(*led.phi_pilot_meas[i] - *led.phi_ref_meas[i] + led.phi_cable[i]);
}

// Literal reading without reference anchoring: pilot + cable. Keeps the per-AP
// RX phase in the estimate and therefore fails to cohere in general.
inline double align_csi_paper_literal(const PhaseLedger& led, std::size_t i) {
    led.require(led.phi_pilot_meas, i, "pilot");
    return wrap_phase(*led.phi_pilot_meas[i] + led.phi_cable[i]);
}

// Reference-anchored transmit phase: theta_bf - (loopback - reference) - cable.
// Cancels the per-AP TX chain up to the common reference constant.
inline double compensate_downlink(const PhaseLedger& led, double theta_bf, std::size_t i) {
    led.require(led.phi_loop_meas, i, "loopback");
    led.require(led.phi_ref_meas, i, "reference");
    return wrap_phase(theta_bf - (*led.phi_loop_meas[i] - *led.phi_ref_meas[i]) -
                      led.phi_cable[i]);
}

inline double compensate_downlink_paper_literal(const PhaseLedger& led, double theta_bf,
                                                std::size_t i) {
    led.require(led.phi_loop_meas, i, "loopback");
    return wrap_phase(theta_bf - *led.phi_loop_meas[i] - led.phi_cable[i]);
}

// ---------------------------------------------------------------------------
// Downlink simulation
// ---------------------------------------------------------------------------

// Received complex sum at the UE for per-AP transmit phases theta_tx and
// transmit amplitudes t (defaults to 1): sum_i t_i a_i exp(j(theta_tx_i +
// phi_tx_i + phi_ch_i)), rotated by the common UE RX chain.
inline cplx simulate_downlink(const HardwarePhaseModel& hw, const std::vector<double>& theta_tx,
                              const std::vector<double>& tx_amplitude = {}) {
    hw.validate();
    const std::size_t M = hw.n_aps();
    if (theta_tx.size() != M)
        throw Error("simulate_downlink: theta_tx must have one entry per AP");
    if (!tx_amplitude.empty() && tx_amplitude.size() != M)
        throw Error("simulate_downlink: tx_amplitude must have one entry per AP");
    cplx sum{0.0, 0.0};
    for (std::size_t i = 0; i < M; ++i) {
        const double t = tx_amplitude.empty() ? 1.0 : tx_amplitude[i];
        const double phase = theta_tx[i] + hw.phi_tx[i] + hw.phi_ch[i];
        sum += t * hw.amp[i] * cplx{std::cos(phase), std::sin(phase)};
    }
    const cplx ue_rx{std::cos(hw.phi_rx_ue), std::sin(hw.phi_rx_ue)};
    return sum * ue_rx;
}

inline double received_power(const cplx& y) { return y.real() * y.real() + y.imag() * y.imag(); }

// Random hardware draw: all chain/cable/channel phases uniform on [0, 2*pi),
// unit link amplitudes unless amp_lo/amp_hi given.
inline HardwarePhaseModel random_hardware(RngStream& rng, std::size_t M, double amp_lo = 1.0,
                                          double amp_hi = 1.0) {
    HardwarePhaseModel hw;
    hw.phi_tx.resize(M);
    hw.phi_rx.resize(M);
    hw.phi_cable.resize(M);
    hw.phi_ch.resize(M);
    hw.amp.resize(M);
    for (std::size_t i = 0; i < M; ++i) {
        hw.phi_tx[i] = rng.uniform(0.0, 2.0 * M_PI);
        hw.phi_rx[i] = rng.uniform(0.0, 2.0 * M_PI);
        hw.phi_cable[i] = rng.uniform(0.0, 2.0 * M_PI);
        hw.phi_ch[i] = rng.uniform(0.0, 2.0 * M_PI);
        hw.amp[i] = (amp_lo == amp_hi) ? amp_lo : rng.uniform(amp_lo, amp_hi);
    }
    hw.phi_tx_ue = rng.uniform(0.0, 2.0 * M_PI);
    hw.phi_rx_ue = rng.uniform(0.0, 2.0 * M_PI);
    hw.phi_ref = rng.uniform(0.0, 2.0 * M_PI);
    return hw;
}

// Full chain for one hardware draw with MRT beam phases: measure, align,
// compensate, transmit. Returns received power.
inline double calibrated_mrt_power(const HardwarePhaseModel& hw, bool paper_literal = false) {
    const PhaseLedger led = measure_all(hw);
    const std::size_t M = hw.n_aps();
    std::vector<double> theta_tx(M);
    for (std::size_t i = 0; i < M; ++i) {
        const double phi_csi =
            paper_literal ? align_csi_paper_literal(led, i) : align_csi(led, i);
        const double theta_bf = -phi_csi;
        theta_tx[i] = paper_literal ? compensate_downlink_paper_literal(led, theta_bf, i)
                                    : compensate_downlink(led, theta_bf, i);
    }
    return received_power(simulate_downlink(hw, theta_tx));
}

} // namespace dmimo::calibration

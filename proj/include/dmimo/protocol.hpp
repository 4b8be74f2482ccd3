// SPDX-License-Identifier: Apache-2.0
//
// dmimo-lab: simulated distributed TDD round. AP nodes, UE nodes and one CPU
// node exchange typed messages through a transport; the round reproduces the
// monolithic pipeline (measure -> align -> precode -> compensate -> transmit)
// exactly. Logical stages: I (loopback calibration), II (pilot + CSI
// aggregation, one slot per UE), III (precoder broadcast and downlink).
//
// APs transmit with equal per-stream amplitude (phase-only application of the
// precoder), matching the equal-power testbed convention; the full complex
// precoding matrix is still returned for equivalence checks. The event log is
// canonically ordered, so it is identical for every scheduling interleaving.

#pragma once

#include <algorithm>
#include <cstring>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "dmimo/calibration.hpp"
#include "dmimo/errors.hpp"
#include "dmimo/gnn.hpp"
#include "dmimo/numkit.hpp"
#include "dmimo/precoders.hpp"

namespace dmimo::protocol {

using calibration::HardwarePhaseModel;
using calibration::PhaseLedger;
using numkit::CMatrix;
using numkit::cplx;
using numkit::RngStream;

// ---------------------------------------------------------------------------
// Message model
// ---------------------------------------------------------------------------

enum class Role { AP, UE, CPU };
enum class Stage { I = 1, II = 2, III = 3 };
enum class MsgKind { LoopbackReport, PilotReport, CsiAggregate, PrecoderAssignment, DownlinkFrame };

struct NodeId {
    Role role = Role::CPU;
    int index = 0;
};

inline const char* to_string(Role r) {
    switch (r) {
    case Role::AP: return "AP";
    case Role::UE: return "UE";
    default: return "CPU";
    }
}
inline const char* to_string(Stage s) {
    switch (s) {
    case Stage::I: return "I";
    case Stage::II: return "II";
    default: return "III";
    }
}
inline const char* to_string(MsgKind k) {
    switch (k) {
    case MsgKind::LoopbackReport: return "LoopbackReport";
    case MsgKind::PilotReport: return "PilotReport";
    case MsgKind::CsiAggregate: return "CsiAggregate";
    case MsgKind::PrecoderAssignment: return "PrecoderAssignment";
    default: return "DownlinkFrame";
    }
}

struct ProtocolMessage {
    MsgKind kind = MsgKind::LoopbackReport;
    NodeId from, to;
    Stage stage = Stage::I;
    int tick = 0;
    nlohmann::json payload;
};

// Wire format: length-prefixed JSON (the prefix is added by the transport).
inline std::string to_wire(const ProtocolMessage& m) {
    nlohmann::json j;
    j["kind"] = to_string(m.kind);
    j["from"] = nlohmann::json::array({to_string(m.from.role), m.from.index});
    j["to"] = nlohmann::json::array({to_string(m.to.role), m.to.index});
    j["stage"] = to_string(m.stage);
    j["payload"] = m.payload;
    return j.dump();
}

namespace detail {

inline Role parse_role(const std::string& s) {
    if (s == "AP")
        return Role::AP;
    if (s == "UE")
        return Role::UE;
    if (s == "CPU")
        return Role::CPU;
    throw ProtocolViolation("protocol: unknown role '" + s + "'");
}

inline Stage parse_stage(const std::string& s) {
    if (s == "I")
        return Stage::I;
    if (s == "II")
        return Stage::II;
    if (s == "III")
        return Stage::III;
    throw ProtocolViolation("protocol: unknown stage '" + s + "'");
}

inline MsgKind parse_kind(const std::string& s) {
    if (s == "LoopbackReport")
        return MsgKind::LoopbackReport;
    if (s == "PilotReport")
        return MsgKind::PilotReport;
    if (s == "CsiAggregate")
        return MsgKind::CsiAggregate;
    if (s == "PrecoderAssignment")
        return MsgKind::PrecoderAssignment;
    if (s == "DownlinkFrame")
        return MsgKind::DownlinkFrame;
    throw ProtocolViolation("protocol: unknown message kind '" + s + "'");
}

} // namespace detail

inline ProtocolMessage from_wire(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded())
        throw ProtocolViolation("protocol: malformed wire message");
    for (const char* key : {"kind", "from", "to", "stage", "payload"})
        if (!j.contains(key))
            throw ProtocolViolation(std::string("protocol: wire message missing '") + key + "'");
    ProtocolMessage m;
    m.kind = detail::parse_kind(j["kind"].get<std::string>());
    const auto& jf = j["from"];
    const auto& jt = j["to"];
    if (!jf.is_array() || jf.size() != 2 || !jt.is_array() || jt.size() != 2)
        throw ProtocolViolation("protocol: from/to must be [role, index]");
    m.from = NodeId{detail::parse_role(jf[0].get<std::string>()), jf[1].get<int>()};
    m.to = NodeId{detail::parse_role(jt[0].get<std::string>()), jt[1].get<int>()};
    m.stage = detail::parse_stage(j["stage"].get<std::string>());
    m.payload = j["payload"];
    return m;
}

// ---------------------------------------------------------------------------
// Transports
// ---------------------------------------------------------------------------

struct MessageChannel {
    virtual ~MessageChannel() = default;
    virtual ProtocolMessage transfer(const ProtocolMessage& m) = 0;
};

struct InProcChannel final : MessageChannel {
    ProtocolMessage transfer(const ProtocolMessage& m) override { return m; }
};

// Sends every message through a real loopback TCP connection with a 4-byte
// big-endian length prefix, exercising the wire format end to end.
class TcpLoopbackChannel final : public MessageChannel {
  public:
    TcpLoopbackChannel() {
        const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listener < 0)
            throw Error("tcp transport: socket() failed");
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        addr.sin_port = 0;
        if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
            ::listen(listener, 1) != 0) {
            ::close(listener);
            throw Error("tcp transport: bind/listen failed");
        }
        socklen_t len = sizeof(addr);
        if (::getsockname(listener, reinterpret_cast<sockaddr*>(&addr), &len) != 0) {
            ::close(listener);
            throw Error("tcp transport: getsockname failed");
        }
        tx_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (tx_ < 0 || ::connect(tx_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            ::close(listener);
            throw Error("tcp transport: connect failed");
        }
        rx_ = ::accept(listener, nullptr, nullptr);
        ::close(listener);
        if (rx_ < 0)
            throw Error("tcp transport: accept failed");
    }

    ~TcpLoopbackChannel() override {
        if (tx_ >= 0)
            ::close(tx_);
        if (rx_ >= 0)
            ::close(rx_);
    }

    TcpLoopbackChannel(const TcpLoopbackChannel&) = delete;
    TcpLoopbackChannel& operator=(const TcpLoopbackChannel&) = delete;

    ProtocolMessage transfer(const ProtocolMessage& m) override {
        const std::string body = to_wire(m);
        if (body.size() > 0x00FFFFFF)
            throw ProtocolViolation("tcp transport: message too large");
        unsigned char hdr[4] = {static_cast<unsigned char>((body.size() >> 24) & 0xFF),
                                static_cast<unsigned char>((body.size() >> 16) & 0xFF),
                                static_cast<unsigned char>((body.size() >> 8) & 0xFF),
                                static_cast<unsigned char>(body.size() & 0xFF)};
        write_all(reinterpret_cast<const char*>(hdr), 4);
        write_all(body.data(), body.size());

        unsigned char rhdr[4];
        read_all(reinterpret_cast<char*>(rhdr), 4);
        const std::size_t n = (std::size_t(rhdr[0]) << 24) | (std::size_t(rhdr[1]) << 16) |
                              (std::size_t(rhdr[2]) << 8) | std::size_t(rhdr[3]);
        std::string rbody(n, '\0');
        read_all(rbody.data(), n);
        ProtocolMessage out = from_wire(rbody);
        out.tick = m.tick;
        return out;
    }

  private:
    void write_all(const char* p, std::size_t n) {
        while (n > 0) {
            const ssize_t w = ::write(tx_, p, n);
            if (w <= 0)
                throw Error("tcp transport: write failed");
            p += w;
            n -= static_cast<std::size_t>(w);
        }
    }
    void read_all(char* p, std::size_t n) {
        while (n > 0) {
            const ssize_t r = ::read(rx_, p, n);
            if (r <= 0)
                throw Error("tcp transport: read failed");
            p += r;
            n -= static_cast<std::size_t>(r);
        }
    }

    int tx_ = -1, rx_ = -1;
};

// ---------------------------------------------------------------------------
// TDD round
// ---------------------------------------------------------------------------

struct PilotReport {
    int ap = 0;
    int ue_slot = 0;
    double amplitude = 0.0;
    double phi_csi = 0.0;
};

struct TddSchedule {
    // Logical message budget per stage; a stage must complete within it.
    std::size_t deadline_I = 0, deadline_II = 0, deadline_III = 0;

    static TddSchedule for_dimensions(std::size_t M, std::size_t K) {
        TddSchedule s;
        s.deadline_I = M + K;
        s.deadline_II = M * K + 1;
        s.deadline_III = M + M * K;
        return s;
    }
};

enum class PrecoderKind { Mrt, Rzf, Gnn };

struct RoundOptions {
    PrecoderKind precoder = PrecoderKind::Mrt;
    const gnn::GnnModel* model = nullptr; // required for Gnn
    double total_power = 1.0;
    double sigma2 = 1e-3;
    std::optional<double> rzf_alpha; // default K*sigma2/P
    int drop_pilot_from = -1;        // fault injection: AP index that loses its report
    bool paper_literal = false;      // skip reference anchoring (for contrast)
    bool reverse_ap_order = false;   // alternative interleaving; results must not change
    double meas_noise_sigma = 0.0;
};

struct RoundResult {
    CMatrix W;                          // precoder broadcast by the CPU
    CMatrix H_est;                      // aggregated CSI estimate
    std::vector<double> received_power; // per UE, own-stream power
    std::vector<ProtocolMessage> log;   // canonically ordered
};

// Assembles the M x K estimate from per-AP reports. Reports may arrive in any
// order; duplicates or missing (slot, AP) pairs are protocol violations.
inline CMatrix cpu_aggregate(const std::vector<PilotReport>& reports, std::size_t M,
                             std::size_t K) {
    CMatrix H(M, K);
    std::vector<int> seen(M * K, 0);
    for (const auto& r : reports) {
        if (r.ap < 0 || static_cast<std::size_t>(r.ap) >= M || r.ue_slot < 0 ||
            static_cast<std::size_t>(r.ue_slot) >= K)
            throw ProtocolViolation("cpu_aggregate: report indices out of range (AP " +
                                    std::to_string(r.ap) + ")");
        const std::size_t at = static_cast<std::size_t>(r.ap) * K +
                               static_cast<std::size_t>(r.ue_slot);
        if (seen[at]++)
            throw ProtocolViolation("cpu_aggregate: duplicate report for AP " +
                                    std::to_string(r.ap) + ", slot " +
                                    std::to_string(r.ue_slot));
        H(static_cast<std::size_t>(r.ap), static_cast<std::size_t>(r.ue_slot)) =
            r.amplitude * cplx{std::cos(r.phi_csi), std::sin(r.phi_csi)};
    }
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t k = 0; k < K; ++k)
            if (!seen[m * K + k])
                throw ProtocolViolation("cpu_aggregate: missing report for AP " +
                                        std::to_string(m) + ", slot " + std::to_string(k));
    return H;
}

// K link models sharing the same AP chains (one set of radios serving K UEs).
inline std::vector<HardwarePhaseModel> make_shared_chain_links(RngStream& rng, std::size_t M,
                                                               std::size_t K, double amp_lo = 1.0,
                                                               double amp_hi = 1.0) {
    std::vector<HardwarePhaseModel> links;
    links.reserve(K);
    HardwarePhaseModel base = calibration::random_hardware(rng, M, amp_lo, amp_hi);
    links.push_back(base);
    for (std::size_t k = 1; k < K; ++k) {
        HardwarePhaseModel lk = base;
        for (std::size_t m = 0; m < M; ++m) {
            lk.phi_ch[m] = rng.uniform(0.0, 2.0 * M_PI);
            lk.amp[m] = (amp_lo == amp_hi) ? amp_lo : rng.uniform(amp_lo, amp_hi);
        }
        lk.phi_tx_ue = rng.uniform(0.0, 2.0 * M_PI);
        lk.phi_rx_ue = rng.uniform(0.0, 2.0 * M_PI);
        links.push_back(lk);
    }
    return links;
}

namespace detail {

inline void check_shared_chains(const std::vector<HardwarePhaseModel>& links) {
    if (links.empty())
        throw Error("protocol: need at least one UE link model");
    const auto& base = links.front();
    base.validate();
    for (const auto& lk : links) {
        lk.validate();
        if (lk.n_aps() != base.n_aps() || lk.phi_tx != base.phi_tx || lk.phi_rx != base.phi_rx ||
            lk.phi_cable != base.phi_cable || lk.phi_ref != base.phi_ref)
            throw Error("protocol: all UE links must share the same AP chains");
    }
}

struct LogEntry {
    ProtocolMessage msg;
    std::uint64_t canon = 0;
};

inline int kind_rank(MsgKind k) { return static_cast<int>(k); }

inline void push(std::vector<LogEntry>& log, MessageChannel& bus, ProtocolMessage m,
                 std::uint64_t canon) {
    LogEntry e;
    e.msg = bus.transfer(m);
    e.canon = canon;
    log.push_back(std::move(e));
}

inline std::vector<ProtocolMessage> finalize_log(std::vector<LogEntry> log) {
    std::stable_sort(log.begin(), log.end(), [](const LogEntry& a, const LogEntry& b) {
        if (a.msg.stage != b.msg.stage)
            return a.msg.stage < b.msg.stage;
        if (kind_rank(a.msg.kind) != kind_rank(b.msg.kind))
            return kind_rank(a.msg.kind) < kind_rank(b.msg.kind);
        return a.canon < b.canon;
    });
    std::vector<ProtocolMessage> out;
    out.reserve(log.size());
    int tick = 0;
    for (auto& e : log) {
        e.msg.tick = tick++;
        out.push_back(std::move(e.msg));
    }
    return out;
}

struct Measurements {
    // Per AP: loopback/reference; per (AP, UE slot): pilot-derived CSI.
    std::vector<PhaseLedger> ledgers; // one per AP (single-AP ledgers)
    std::vector<std::vector<PilotReport>> reports; // per slot
};

inline Measurements take_measurements(const std::vector<HardwarePhaseModel>& links,
                                      const RoundOptions& opt, RngStream& rng) {
    const std::size_t M = links.front().n_aps();
    const std::size_t K = links.size();
    Measurements out;
    out.ledgers.resize(M);
    out.reports.resize(K);
    RngStream noise = rng.substream("meas-noise");
    for (std::size_t m = 0; m < M; ++m) {
        auto& led = out.ledgers[m];
        led.phi_ref_meas.resize(1);
        led.phi_pilot_meas.resize(1);
        led.phi_loop_meas.resize(1);
        led.phi_cable = {links.front().phi_cable[m]};
        led.phi_loop_meas[0] = opt.meas_noise_sigma > 0.0
                                   ? calibration::measure_loopback(links.front(), m,
                                                                   opt.meas_noise_sigma, noise)
                                   : calibration::measure_loopback(links.front(), m);
        led.phi_ref_meas[0] = opt.meas_noise_sigma > 0.0
                                  ? calibration::measure_reference(links.front(), m,
                                                                   opt.meas_noise_sigma, noise)
                                  : calibration::measure_reference(links.front(), m);
    }
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t m = 0; m < M; ++m) {
            PhaseLedger slot_led = out.ledgers[m];
            slot_led.phi_pilot_meas[0] =
                opt.meas_noise_sigma > 0.0
                    ? calibration::measure_pilot(links[k], m, opt.meas_noise_sigma, noise)
                    : calibration::measure_pilot(links[k], m);
            PilotReport r;
            r.ap = static_cast<int>(m);
            r.ue_slot = static_cast<int>(k);
            r.amplitude = links[k].amp[m];
            r.phi_csi = opt.paper_literal ? calibration::align_csi_paper_literal(slot_led, 0)
                                          : calibration::align_csi(slot_led, 0);
            out.reports[k].push_back(r);
        }
    }
    return out;
}

inline CMatrix run_precoder(const RoundOptions& opt, const CMatrix& H_est) {
    switch (opt.precoder) {
    case PrecoderKind::Mrt:
        return precoders::mrt(H_est, opt.total_power).W;
    case PrecoderKind::Rzf: {
        const double alpha = opt.rzf_alpha
                                 ? *opt.rzf_alpha
                                 : precoders::default_rzf_alpha(H_est.cols(), opt.sigma2,
                                                                opt.total_power);
        return precoders::rzf(H_est, precoders::RzfConfig{alpha}, opt.total_power).W;
    }
    default:
        if (!opt.model)
            throw Error("protocol: GNN precoder selected but no model provided");
        return gnn::forward(*opt.model, H_est, opt.total_power).W;
    }
}

} // namespace detail

// Monolithic oracle: the same estimate -> precoder -> compensate -> transmit
// pipeline as the distributed round, computed with direct calls.
inline RoundResult monolithic_round(const std::vector<HardwarePhaseModel>& links,
                                    const RoundOptions& opt, RngStream rng) {
    detail::check_shared_chains(links);
    const std::size_t M = links.front().n_aps();
    const std::size_t K = links.size();

    detail::Measurements meas = detail::take_measurements(links, opt, rng);
    std::vector<PilotReport> all;
    for (const auto& slot : meas.reports)
        for (const auto& r : slot)
            all.push_back(r);
    RoundResult res;
    res.H_est = cpu_aggregate(all, M, K);
    res.W = detail::run_precoder(opt, res.H_est);

    res.received_power.assign(K, 0.0);
    for (std::size_t k = 0; k < K; ++k) {
        cplx y{0.0, 0.0};
        for (std::size_t m = 0; m < M; ++m) {
            const double theta_bf = std::arg(res.W(m, k));
            const double theta_tx =
                opt.paper_literal
                    ? calibration::compensate_downlink_paper_literal(meas.ledgers[m], theta_bf, 0)
                    : calibration::compensate_downlink(meas.ledgers[m], theta_bf, 0);
            const double phase = theta_tx + links[k].phi_tx[m] + links[k].phi_ch[m];
            y += links[k].amp[m] * cplx{std::cos(phase), std::sin(phase)};
        }
        y *= cplx{std::cos(links[k].phi_rx_ue), std::sin(links[k].phi_rx_ue)};
        res.received_power[k] = calibration::received_power(y);
    }
    return res;
}

// Distributed round over a message transport. Produces the same W and powers
// as monolithic_round plus the canonically ordered event log.
inline RoundResult run_tdd_round(const std::vector<HardwarePhaseModel>& links,
                                 const RoundOptions& opt, RngStream rng,
                                 MessageChannel* bus = nullptr) {
    detail::check_shared_chains(links);
    const std::size_t M = links.front().n_aps();
    const std::size_t K = links.size();
    InProcChannel inproc;
    MessageChannel& chan = bus ? *bus : inproc;

    std::vector<std::size_t> ap_order(M);
    for (std::size_t m = 0; m < M; ++m)
        ap_order[m] = opt.reverse_ap_order ? M - 1 - m : m;

    // All measurements are taken against the same RNG layout as the
    // monolithic pipeline so both executions see identical observations.
    detail::Measurements meas = detail::take_measurements(links, opt, rng);

    std::vector<detail::LogEntry> log;
    const NodeId cpu{Role::CPU, 0};

    // Stage I: UE and AP loopback calibration.
    for (std::size_t k = 0; k < K; ++k) {
        ProtocolMessage m;
        m.kind = MsgKind::LoopbackReport;
        m.stage = Stage::I;
        m.from = NodeId{Role::UE, static_cast<int>(k)};
        m.to = cpu;
        m.payload = {{"phi_loop", calibration::wrap_phase(links[k].phi_tx_ue - links[k].phi_rx_ue)}};
        detail::push(log, chan, m, k);
    }
    for (std::size_t mi : ap_order) {
        ProtocolMessage m;
        m.kind = MsgKind::LoopbackReport;
        m.stage = Stage::I;
        m.from = NodeId{Role::AP, static_cast<int>(mi)};
        m.to = cpu;
        m.payload = {{"phi_loop", *meas.ledgers[mi].phi_loop_meas[0]}};
        detail::push(log, chan, m, K + mi);
    }

    // Stage II: one pilot slot per UE; APs report aligned CSI to the CPU.
    std::vector<PilotReport> collected;
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t mi : ap_order) {
            if (static_cast<int>(mi) == opt.drop_pilot_from && k == 0)
                continue; // fault injection: report lost in the fronthaul
            const PilotReport& r = meas.reports[k][mi];
            ProtocolMessage m;
            m.kind = MsgKind::PilotReport;
            m.stage = Stage::II;
            m.from = NodeId{Role::AP, static_cast<int>(mi)};
            m.to = cpu;
            m.payload = {{"ap", r.ap},
                         {"ue_slot", r.ue_slot},
                         {"amplitude", r.amplitude},
                         {"phi_csi", r.phi_csi}};
            detail::push(log, chan, m, k * M + mi);
        }
    }
    // Stage II deadline: the CPU must hold one report per (slot, AP).
    std::vector<PilotReport> reports;
    for (const auto& e : log)
        if (e.msg.kind == MsgKind::PilotReport) {
            PilotReport r;
            r.ap = e.msg.payload.at("ap").get<int>();
            r.ue_slot = e.msg.payload.at("ue_slot").get<int>();
            r.amplitude = e.msg.payload.at("amplitude").get<double>();
            r.phi_csi = e.msg.payload.at("phi_csi").get<double>();
            reports.push_back(r);
        }
    {
        std::vector<int> seen(M * K, 0);
        for (const auto& r : reports)
            if (r.ap >= 0 && static_cast<std::size_t>(r.ap) < M && r.ue_slot >= 0 &&
                static_cast<std::size_t>(r.ue_slot) < K)
                seen[static_cast<std::size_t>(r.ap) * K + static_cast<std::size_t>(r.ue_slot)] = 1;
        for (std::size_t m = 0; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k)
                if (!seen[m * K + k])
                    throw StageTimeout("run_tdd_round: stage II deadline passed without pilot "
                                       "report from AP " +
                                       std::to_string(m) + " (slot " + std::to_string(k) + ")");
    }

    RoundResult res;
    res.H_est = cpu_aggregate(reports, M, K);

    {
        ProtocolMessage m;
        m.kind = MsgKind::CsiAggregate;
        m.stage = Stage::II;
        m.from = cpu;
        m.to = cpu;
        nlohmann::json h = nlohmann::json::array();
        for (std::size_t r = 0; r < M; ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (std::size_t c = 0; c < K; ++c)
                row.push_back(nlohmann::json::array(
                    {res.H_est(r, c).real(), res.H_est(r, c).imag()}));
            h.push_back(row);
        }
        m.payload = {{"H", h}};
        detail::push(log, chan, m, 0);
    }

    // Stage III: precoder broadcast, per-AP compensation, downlink frames.
    res.W = detail::run_precoder(opt, res.H_est);
    std::vector<std::vector<double>> theta_tx(M, std::vector<double>(K, 0.0));
    for (std::size_t mi : ap_order) {
        ProtocolMessage m;
        m.kind = MsgKind::PrecoderAssignment;
        m.stage = Stage::III;
        m.from = cpu;
        m.to = NodeId{Role::AP, static_cast<int>(mi)};
        nlohmann::json w = nlohmann::json::array();
        for (std::size_t k = 0; k < K; ++k)
            w.push_back(nlohmann::json::array({res.W(mi, k).real(), res.W(mi, k).imag()}));
        m.payload = {{"ap", static_cast<int>(mi)}, {"w", w}};
        ProtocolMessage delivered = chan.transfer(m);
        log.push_back(detail::LogEntry{delivered, mi});

        // The AP applies downlink compensation to the received assignment.
        const auto& wj = delivered.payload.at("w");
        for (std::size_t k = 0; k < K; ++k) {
            const cplx wk{wj[k][0].get<double>(), wj[k][1].get<double>()};
            const double theta_bf = std::arg(wk);
            theta_tx[mi][k] =
                opt.paper_literal
                    ? calibration::compensate_downlink_paper_literal(meas.ledgers[mi], theta_bf, 0)
                    : calibration::compensate_downlink(meas.ledgers[mi], theta_bf, 0);
        }
    }

    res.received_power.assign(K, 0.0);
    std::vector<std::vector<cplx>> contrib(K, std::vector<cplx>(M, cplx{0.0, 0.0}));
    for (std::size_t mi : ap_order) {
        for (std::size_t k = 0; k < K; ++k) {
            const double phase = theta_tx[mi][k] + links[k].phi_tx[mi] + links[k].phi_ch[mi];
            const cplx c = links[k].amp[mi] * cplx{std::cos(phase), std::sin(phase)};
            ProtocolMessage m;
            m.kind = MsgKind::DownlinkFrame;
            m.stage = Stage::III;
            m.from = NodeId{Role::AP, static_cast<int>(mi)};
            m.to = NodeId{Role::UE, static_cast<int>(k)};
            m.payload = {{"s", nlohmann::json::array({1.0, 0.0})},
                         {"contrib", nlohmann::json::array({c.real(), c.imag()})}};
            ProtocolMessage delivered = chan.transfer(m);
            log.push_back(detail::LogEntry{delivered, k * M + mi});
            contrib[k][mi] = cplx{delivered.payload.at("contrib")[0].get<double>(),
                                  delivered.payload.at("contrib")[1].get<double>()};
        }
    }
    for (std::size_t k = 0; k < K; ++k) {
        cplx y{0.0, 0.0};
        for (std::size_t m = 0; m < M; ++m)
            y += contrib[k][m]; // UE sums in AP index order
        y *= cplx{std::cos(links[k].phi_rx_ue), std::sin(links[k].phi_rx_ue)};
        res.received_power[k] = calibration::received_power(y);
    }

    res.log = detail::finalize_log(std::move(log));
    return res;
}

// Stage-safety check on a finalized log: stages must be non-decreasing and
// each of I, II, III present.
inline bool log_respects_schedule(const std::vector<ProtocolMessage>& log) {
    Stage prev = Stage::I;
    bool seen[4] = {false, false, false, false};
    for (const auto& m : log) {
        if (m.stage < prev)
            return false;
        prev = m.stage;
        seen[static_cast<int>(m.stage)] = true;
    }
    return seen[1] && seen[2] && seen[3];
}

// RPS baseline: per slot, fresh uniform phases without any CSI or
// calibration; returns the per-slot received powers.
inline std::vector<double> run_rps_round(const HardwarePhaseModel& hw, std::size_t slots,
                                         RngStream& rng) {
    if (slots < 1)
        throw Error("run_rps_round: slots must be >= 1");
    hw.validate();
    const std::size_t M = hw.n_aps();
    std::vector<double> powers(slots);
    std::vector<double> theta(M);
    for (std::size_t s = 0; s < slots; ++s) {
        for (std::size_t m = 0; m < M; ++m)
            theta[m] = rng.uniform(0.0, 2.0 * M_PI);
        powers[s] = calibration::received_power(calibration::simulate_downlink(hw, theta));
    }
    return powers;
}

} // namespace dmimo::protocol

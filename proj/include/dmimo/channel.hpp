// SPDX-License-Identifier: Apache-2.0
//
// dmimo-lab: synthetic and domain-shifted channel generation, spatial
// dataset handling and the JSON-lines CSI file format.

#pragma once

#include <array>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmimo/errors.hpp"
#include "dmimo/numkit.hpp"

namespace dmimo::channel {

using numkit::CMatrix;
using numkit::cplx;
using numkit::RngStream;

inline constexpr double kSpeedOfLight = 2.99792458e8; // m/s

using Vec3 = std::array<double, 3>;

inline double distance(const Vec3& a, const Vec3& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
}

struct Box {
    Vec3 lo{0, 0, 0};
    Vec3 hi{0, 0, 0};

    bool contains(const Vec3& p) const {
        for (int i = 0; i < 3; ++i)
            if (p[i] < lo[i] || p[i] > hi[i])
                return false;
        return true;
    }
};

struct Topology {
    std::vector<Vec3> ap_positions;
    std::vector<Vec3> ue_positions;
    double fc_ghz = 0.92;
    Box area;

    std::size_t n_aps() const { return ap_positions.size(); }
    std::size_t n_ues() const { return ue_positions.size(); }

    void validate(bool require_m_gt_k = false) const {
        if (ap_positions.empty())
            throw ConfigError("topology: at least one AP required");
        if (ue_positions.empty())
            throw ConfigError("topology: at least one UE required");
        if (!(fc_ghz > 0.0))
            throw ConfigError("topology: carrier frequency must be positive");
        if (require_m_gt_k && ap_positions.size() <= ue_positions.size())
            throw ConfigError("topology: multi-user experiments require M > K");
        for (const auto& p : ap_positions)
            if (!area.contains(p))
                throw ConfigError("topology: AP position outside area bounds");
        for (const auto& p : ue_positions)
            if (!area.contains(p))
                throw ConfigError("topology: UE position outside area bounds");
    }
};

// Parameters of a propagation domain. The defaults are the 3GPP InH NLOS
// large-scale model; the shifted "measured" domain changes the distance
// coefficient and adds shadowing and an optional Ricean component.
struct DomainConfig {
    double pathloss_offset_db = 0.0;
    double pathloss_exponent_coeff = 31.9;
    double shadowing_sigma_db = 0.0;
    std::optional<double> rice_factor_db; // empty => Rayleigh small-scale fading
    bool los_phase_enabled = false;

    void validate() const {
        if (!std::isfinite(pathloss_offset_db) || !std::isfinite(pathloss_exponent_coeff))
            throw ConfigError("domain: pathloss parameters must be finite");
        if (!(shadowing_sigma_db >= 0.0))
            throw ConfigError("domain: shadowing_sigma_db must be >= 0");
        if (rice_factor_db && !std::isfinite(*rice_factor_db))
            throw ConfigError("domain: rice_factor_db must be finite");
    }
};

// H[m,k] = sqrt(beta[m,k]) * h_small[m,k], beta in linear scale.
struct ChannelMatrix {
    CMatrix H;
    std::vector<double> beta; // MxK row-major
    CMatrix h_small;

    std::size_t n_aps() const { return H.rows(); }
    std::size_t n_ues() const { return H.cols(); }
};

enum class Region { Interp, Extrap };
enum class Split { Train, Val, Test };

inline const char* to_string(Region r) { return r == Region::Interp ? "interp" : "extrap"; }
inline const char* to_string(Split s) {
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
    }
}

struct Sample {
    std::uint64_t id = 0;
    ChannelMatrix ch;
    std::vector<Vec3> ue_pos;
    Region region = Region::Interp;
    Split split = Split::Train;
};

struct ChannelDataset {
    std::size_t n_aps = 0;
    std::size_t n_ues = 0;
    double fc_ghz = 0.92;
    std::vector<Sample> samples;

    std::vector<const Sample*> split_view(Split s) const {
        std::vector<const Sample*> v;
        for (const auto& smp : samples)
            if (smp.split == s)
                v.push_back(&smp);
        return v;
    }
    std::vector<const Sample*> region_view(Region r, Split s) const {
        std::vector<const Sample*> v;
        for (const auto& smp : samples)
            if (smp.region == r && smp.split == s)
                v.push_back(&smp);
        return v;
    }
};

// ---------------------------------------------------------------------------
// Large-scale fading
// ---------------------------------------------------------------------------

// 3GPP InH NLOS pathloss: 32.4 + 31.9 log10(d) + 20 log10(fc), d in m, fc in GHz.
inline double pathloss_db(double d_m, double fc_ghz) {
    if (!(d_m > 0.0))
        throw DegenerateGeometry("pathloss_db: distance must be positive");
    if (!(fc_ghz > 0.0))
        throw DegenerateGeometry("pathloss_db: carrier frequency must be positive");
    return 32.4 + 31.9 * std::log10(d_m) + 20.0 * std::log10(fc_ghz);
}

inline double pathloss_db(double d_m, double fc_ghz, const DomainConfig& dom) {
    if (!(d_m > 0.0))
        throw DegenerateGeometry("pathloss_db: distance must be positive");
    if (!(fc_ghz > 0.0))
        throw DegenerateGeometry("pathloss_db: carrier frequency must be positive");
    return 32.4 + dom.pathloss_offset_db + dom.pathloss_exponent_coeff * std::log10(d_m) +
           20.0 * std::log10(fc_ghz);
}

inline double wavelength_m(double fc_ghz) { return kSpeedOfLight / (fc_ghz * 1e9); }

// ---------------------------------------------------------------------------
// Channel synthesis
// ---------------------------------------------------------------------------

// Draws one M x K realization. Entries are generated in row-major order so a
// fixed seed reproduces the matrix bit-exactly.
inline ChannelMatrix synth_channel(const Topology& topo, const DomainConfig& dom, RngStream& rng) {
    topo.validate();
    dom.validate();
    const std::size_t M = topo.n_aps(), K = topo.n_ues();
    ChannelMatrix out;
    out.H = CMatrix(M, K);
    out.h_small = CMatrix(M, K);
    out.beta.assign(M * K, 0.0);

    const double lambda = wavelength_m(topo.fc_ghz);
    double rice_lin = 0.0;
    if (dom.rice_factor_db)
        rice_lin = std::pow(10.0, *dom.rice_factor_db / 10.0);

    for (std::size_t m = 0; m < M; ++m) {
        for (std::size_t k = 0; k < K; ++k) {
            const double d = distance(topo.ap_positions[m], topo.ue_positions[k]);
            if (d <= 0.0)
                throw DegenerateGeometry("synth_channel: coincident AP and UE positions");
            double pl = pathloss_db(d, topo.fc_ghz, dom);
            if (dom.shadowing_sigma_db > 0.0)
                pl += dom.shadowing_sigma_db * rng.normal();
            const double beta = std::pow(10.0, -pl / 10.0);

            cplx h = rng.complex_normal();
            if (dom.rice_factor_db) {
                const double los_phase =
                    dom.los_phase_enabled ? -2.0 * M_PI * d / lambda : 0.0;
                const cplx los{std::cos(los_phase), std::sin(los_phase)};
                h = std::sqrt(rice_lin / (rice_lin + 1.0)) * los +
                    std::sqrt(1.0 / (rice_lin + 1.0)) * h;
            }
            out.beta[m * K + k] = beta;
            out.h_small(m, k) = h;
            out.H(m, k) = std::sqrt(beta) * h;
        }
    }
    return out;
}

// Deterministic line-of-sight channel to one target point: per-AP amplitude
// sqrt(beta(d)) and phase -2*pi*d/lambda. Used for spatial power maps.
inline ChannelMatrix los_channel(const Topology& topo, const Vec3& target) {
    if (topo.ap_positions.empty())
        throw ConfigError("los_channel: topology has no APs");
    if (!topo.area.contains(target))
        throw DegenerateGeometry("los_channel: target outside area bounds");
    const std::size_t M = topo.n_aps();
    const double lambda = wavelength_m(topo.fc_ghz);
    ChannelMatrix out;
    out.H = CMatrix(M, 1);
    out.h_small = CMatrix(M, 1);
    out.beta.assign(M, 0.0);
    for (std::size_t m = 0; m < M; ++m) {
        const double d = distance(topo.ap_positions[m], target);
        if (d <= 0.0)
            throw DegenerateGeometry("los_channel: target coincides with an AP");
        const double beta = std::pow(10.0, -pathloss_db(d, topo.fc_ghz) / 10.0);
        const double phase = -2.0 * M_PI * d / lambda;
        const cplx h{std::cos(phase), std::sin(phase)};
        out.beta[m] = beta;
        out.h_small(m, 0) = h;
        out.H(m, 0) = std::sqrt(beta) * h;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset generation and spatial splitting
// ---------------------------------------------------------------------------

// UE positions are drawn on the floor plane z = area.lo.z, uniform over the
// x/y extent of the area. For K > 1 each sample pairs K distinct positions.
inline ChannelDataset generate_dataset(const Topology& tmpl, const DomainConfig& dom,
                                       std::size_t n_samples, std::size_t K, RngStream& rng) {
    if (n_samples < 1)
        throw ConfigError("generate_dataset: n_samples must be >= 1");
    if (K < 1)
        throw ConfigError("generate_dataset: K must be >= 1");
    if (tmpl.ap_positions.size() <= K && K > 1)
        throw ConfigError("generate_dataset: M > K required for multi-user datasets");
    dom.validate();

    ChannelDataset ds;
    ds.n_aps = tmpl.ap_positions.size();
    ds.n_ues = K;
    ds.fc_ghz = tmpl.fc_ghz;
    ds.samples.reserve(n_samples);

    RngStream pos_rng = rng.substream("positions");
    RngStream fade_rng = rng.substream("fading");

    const double z = tmpl.area.lo[2];
    for (std::size_t i = 0; i < n_samples; ++i) {
        Sample smp;
        smp.id = i;
        Topology topo = tmpl;
        topo.ue_positions.clear();
        for (std::size_t k = 0; k < K; ++k) {
            Vec3 p;
            bool distinct = false;
            while (!distinct) {
                p = Vec3{pos_rng.uniform(tmpl.area.lo[0], tmpl.area.hi[0]),
                         pos_rng.uniform(tmpl.area.lo[1], tmpl.area.hi[1]), z};
                distinct = true;
                for (const auto& q : topo.ue_positions)
                    if (p == q)
                        distinct = false;
            }
            topo.ue_positions.push_back(p);
        }
        RngStream srng = fade_rng.substream(i);
        smp.ch = synth_channel(topo, dom, srng);
        smp.ue_pos = topo.ue_positions;
        ds.samples.push_back(std::move(smp));
    }
    return ds;
}

namespace detail {

// Deterministic per-sample fraction in [0,1) derived from the sample id, so
// split assignment is independent of container order and needs no RNG.
inline double id_fraction(std::uint64_t id, std::uint64_t salt) {
    std::uint64_t x = id ^ (salt * 0x9E3779B97F4A7C15ull);
    const std::uint64_t h = numkit::detail::splitmix64(x);
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

} // namespace detail

// Tags samples whose position falls in `mask` as extrapolation (test-only)
// and splits the remainder into train/val/test. A multi-user sample is
// extrapolation if any of its positions is masked.
inline void spatial_split(ChannelDataset& ds, const Box& mask, double val_fraction,
                          double test_fraction = -1.0) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw ConfigError("spatial_split: val_fraction must be in (0,1)");
    if (test_fraction < 0.0)
        test_fraction = val_fraction;
    if (val_fraction + test_fraction >= 1.0)
        throw ConfigError("spatial_split: val + test fractions must be < 1");

    std::size_t n_interp = 0;
    for (auto& smp : ds.samples) {
        bool masked = false;
        for (const auto& p : smp.ue_pos)
            if (mask.contains(p))
                masked = true;
        if (masked) {
            smp.region = Region::Extrap;
            smp.split = Split::Test;
        } else {
            smp.region = Region::Interp;
            const double f = detail::id_fraction(smp.id, 0xD5EEDull);
            if (f < val_fraction)
                smp.split = Split::Val;
            else if (f < val_fraction + test_fraction)
                smp.split = Split::Test;
            else
                smp.split = Split::Train;
            ++n_interp;
        }
    }
    if (n_interp == 0)
        throw ConfigError("spatial_split: mask swallows every sample");
}

// ---------------------------------------------------------------------------
// CSI file format (JSON lines, one record per line, versioned header)
// ---------------------------------------------------------------------------

namespace detail {

// %.17g guarantees exact double round-trips through text.
inline void append_double(std::string& out, double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out += buf;
}

inline void append_matrix_part(std::string& out, const CMatrix& H, bool imag) {
    out += '[';
    for (std::size_t m = 0; m < H.rows(); ++m) {
        if (m)
            out += ',';
        out += '[';
        for (std::size_t k = 0; k < H.cols(); ++k) {
            if (k)
                out += ',';
            append_double(out, imag ? H(m, k).imag() : H(m, k).real());
        }
        out += ']';
    }
    out += ']';
}

inline void require_keys(const nlohmann::json& j, const std::vector<std::string>& keys,
                         const std::string& where) {
    for (const auto& k : keys)
        if (!j.contains(k))
            throw ParseError(where + ": missing key '" + k + "'");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const auto& k : keys)
            if (it.key() == k)
                known = true;
        if (!known)
            throw ParseError(where + ": unknown key '" + it.key() + "'");
    }
}

} // namespace detail

inline void export_csi(const ChannelDataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f)
        throw Error("export_csi: cannot open '" + path + "' for writing");
    std::string line;
    line.reserve(256);
    {
        char hdr[160];
        std::snprintf(hdr, sizeof(hdr), "{\"format\":\"dmimo-csi\",\"version\":1,\"M\":%zu,\"K\":%zu,\"fc_ghz\":",
                      ds.n_aps, ds.n_ues);
        line = hdr;
        detail::append_double(line, ds.fc_ghz);
        line += "}\n";
        f << line;
    }
    for (const auto& smp : ds.samples) {
        line.clear();
        line += "{\"id\":";
        line += std::to_string(smp.id);
        line += ",\"ue_pos\":[";
        for (std::size_t k = 0; k < smp.ue_pos.size(); ++k) {
            if (k)
                line += ',';
            line += '[';
            detail::append_double(line, smp.ue_pos[k][0]);
            line += ',';
            detail::append_double(line, smp.ue_pos[k][1]);
            line += ',';
            detail::append_double(line, smp.ue_pos[k][2]);
            line += ']';
        }
        line += "],\"H_re\":";
        detail::append_matrix_part(line, smp.ch.H, false);
        line += ",\"H_im\":";
        detail::append_matrix_part(line, smp.ch.H, true);
        line += ",\"region\":\"";
        line += to_string(smp.region);
        line += "\",\"split\":\"";
        line += to_string(smp.split);
        line += "\"}\n";
        f << line;
    }
    if (!f)
        throw Error("export_csi: write to '" + path + "' failed");
}

inline ChannelDataset import_csi(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw Error("import_csi: cannot open '" + path + "'");
    std::string line;
    std::size_t lineno = 0;

    auto parse_line = [&](const std::string& text) {
        nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
        if (j.is_discarded())
            throw ParseError("import_csi: line " + std::to_string(lineno) + ": malformed JSON");
        return j;
    };

    if (!std::getline(f, line))
        throw ParseError("import_csi: empty file");
    ++lineno;
    nlohmann::json hdr = parse_line(line);
    detail::require_keys(hdr, {"format", "version", "M", "K", "fc_ghz"}, "import_csi: header");
    if (hdr["format"] != "dmimo-csi")
        throw ParseError("import_csi: not a dmimo-csi file");
    if (hdr["version"] != 1)
        throw ParseError("import_csi: unsupported version");

    ChannelDataset ds;
    ds.n_aps = hdr["M"].get<std::size_t>();
    ds.n_ues = hdr["K"].get<std::size_t>();
    ds.fc_ghz = hdr["fc_ghz"].get<double>();
    if (ds.n_aps < 1 || ds.n_ues < 1 || !(ds.fc_ghz > 0.0))
        throw ParseError("import_csi: invalid header dimensions");

    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty())
            continue;
        nlohmann::json j = parse_line(line);
        const std::string where = "import_csi: record at line " + std::to_string(lineno);
        detail::require_keys(j, {"id", "ue_pos", "H_re", "H_im", "region", "split"}, where);

        Sample smp;
        smp.id = j["id"].get<std::uint64_t>();
        for (const auto& p : j["ue_pos"]) {
            if (!p.is_array() || p.size() != 3)
                throw ParseError(where + ": ue_pos entries must be [x,y,z]");
            smp.ue_pos.push_back(Vec3{p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
        }
        if (smp.ue_pos.size() != ds.n_ues)
            throw ParseError(where + ": ue_pos count does not match header K");

        const auto& re = j["H_re"];
        const auto& im = j["H_im"];
        if (re.size() != ds.n_aps || im.size() != ds.n_aps)
            throw ParseError(where + ": matrix row count does not match header M");
        smp.ch.H = CMatrix(ds.n_aps, ds.n_ues);
        for (std::size_t m = 0; m < ds.n_aps; ++m) {
            if (re[m].size() != ds.n_ues || im[m].size() != ds.n_ues)
                throw ParseError(where + ": matrix column count does not match header K");
            for (std::size_t k = 0; k < ds.n_ues; ++k) {
                const double vr = re[m][k].get<double>();
                const double vi = im[m][k].get<double>();
                if (!std::isfinite(vr) || !std::isfinite(vi))
                    throw ParseError(where + ": non-finite channel entry");
                smp.ch.H(m, k) = cplx{vr, vi};
            }
        }
        // The file stores H only; the composition convention after import is
        // beta = 1, h_small = H.
        smp.ch.h_small = smp.ch.H;
        smp.ch.beta.assign(ds.n_aps * ds.n_ues, 1.0);

        const std::string region = j["region"].get<std::string>();
        const std::string split = j["split"].get<std::string>();
        if (region == "interp")
            smp.region = Region::Interp;
        else if (region == "extrap")
            smp.region = Region::Extrap;
        else
            throw ParseError(where + ": unknown region tag '" + region + "'");
        if (split == "train")
            smp.split = Split::Train;
        else if (split == "val")
            smp.split = Split::Val;
        else if (split == "test")
            smp.split = Split::Test;
        else
            throw ParseError(where + ": unknown split tag '" + split + "'");
        ds.samples.push_back(std::move(smp));
    }
    return ds;
}

// Regular AP grid on the ceiling plane, rows x cols chosen near-square to
// cover the area extent.
inline std::vector<Vec3> grid_ap_layout(std::size_t m_aps, const Box& area, double height) {
    std::vector<Vec3> aps;
    const double w = area.hi[0] - area.lo[0];
    const double h = area.hi[1] - area.lo[1];
    std::size_t cols = static_cast<std::size_t>(std::round(std::sqrt(static_cast<double>(m_aps) * h / std::max(w, 1e-9))));
    cols = std::min(std::max<std::size_t>(cols, 1), m_aps);
    const std::size_t rows = (m_aps + cols - 1) / cols;
    std::size_t placed = 0;
    for (std::size_t c = 0; c < cols && placed < m_aps; ++c) {
        for (std::size_t r = 0; r < rows && placed < m_aps; ++r) {
            const double x = area.lo[0] + (r + 0.5) * w / static_cast<double>(rows);
            const double y = area.lo[1] + (c + 0.5) * h / static_cast<double>(cols);
            aps.push_back(Vec3{x, y, height});
            ++placed;
        }
    }
    return aps;
}

} // namespace dmimo::channel

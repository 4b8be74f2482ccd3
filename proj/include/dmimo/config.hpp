// SPDX-License-Identifier: Apache-2.0
//
// dmimo-lab: experiment configuration. One JSON document drives every CLI
// command; unknown keys are rejected, presets provide complete defaults and
// a user config overrides them key by key.

#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmimo/channel.hpp"
#include "dmimo/errors.hpp"

namespace dmimo::harness {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

// Desk-scale preset: small enough to run acceptance on one core.
inline const char* kDeskPreset = R"JSON({
  "seed": 1,
  "out_dir": "out",
  "topology": {
    "m_aps": 8,
    "area": [4.0, 8.0],
    "ceiling_height": 2.4,
    "ue_plane_z": 0.0,
    "fc_ghz": 0.92,
    "ap_positions": null
  },
  "source_domain": {
    "pathloss_offset_db": 0.0,
    "pathloss_exponent_coeff": 31.9,
    "shadowing_sigma_db": 0.0,
    "rice_factor_db": null,
    "los_phase_enabled": false
  },
  "target_domain": {
    "pathloss_offset_db": 0.0,
    "pathloss_exponent_coeff": 25.0,
    "shadowing_sigma_db": 4.0,
    "rice_factor_db": 5.0,
    "los_phase_enabled": true
  },
  "dataset": {
    "n_samples": 6500,
    "k_users": 2,
    "val_fraction": 0.1,
    "test_fraction": 0.1,
    "extrap_mask": [2.4, 5.2, 4.0, 8.0],
    "target_n_samples": 1500
  },
  "power": {
    "total_power": 1.0,
    "target_snr_db": 10.0,
    "sigma2": null
  },
  "train": {
    "epochs": 30,
    "batch_size": 64,
    "learning_rate": 1e-3,
    "hidden_dim": 64,
    "n_layers": 8,
    "leaky_slope": 0.01
  },
  "finetune": {
    "epochs": 60,
    "batch_size": 32,
    "learning_rate": 5e-4,
    "freeze_layers": 6,
    "n_train": 500,
    "also_scratch": true
  },
  "evaluate": {
    "k_list": [1, 2, 4],
    "rzf_alpha": null,
    "n_eval_pairs": 500
  },
  "pointwise": {
    "grid_step": 0.4,
    "scheme": "gnn"
  },
  "sweep": {
    "n_train_list": [50, 100, 200, 500],
    "seeds": [1, 2, 3, 4, 5],
    "steps": 300
  },
  "heatmap": {
    "schemes": ["mrt", "gnn", "rps"],
    "m_list": [1, 5, 10, 15],
    "target": [3.4, 1.95],
    "grid_step": 0.05,
    "rps_draws": 10000,
    "equal_gain": false,
    "per_ap_power": 1.0,
    "model": "finetuned"
  },
  "protocol": {
    "precoder": "mrt",
    "k_users": 1,
    "m_aps": 8,
    "transport": "inproc",
    "drop_pilot_from": -1,
    "paper_literal": false,
    "rounds": 5,
    "model": "pretrained"
  },
  "files": {
    "source_csi": "source.csi.jsonl",
    "target_csi": "target.csi.jsonl",
    "pretrained": "gnn_pretrained.json",
    "finetuned": "gnn_finetuned.json",
    "scratch": "gnn_scratch.json",
    "train_log": "train_log.csv",
    "finetune_log": "finetune_log.csv"
  }
})JSON";

// Paper-scale preset mirroring the published setup (M = 33, 100k training
// samples, 150 epochs, batch 256). Valid but not exercised by CI.
inline const char* kPaperPresetOverlay = R"JSON({
  "topology": { "m_aps": 33 },
  "dataset": { "n_samples": 110000, "k_users": 2, "target_n_samples": 1500 },
  "train": { "epochs": 150, "batch_size": 256, "learning_rate": 1e-4 },
  "evaluate": { "k_list": [2, 4] },
  "heatmap": { "m_list": [1, 5, 10, 15] },
  "protocol": { "m_aps": 33 }
})JSON";

// ---------------------------------------------------------------------------
// Schema validation and merging
// ---------------------------------------------------------------------------

namespace detail {

inline void merge_overlay(json& base, const json& overlay, const std::string& path) {
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        const std::string where = path.empty() ? it.key() : path + "." + it.key();
        if (!base.contains(it.key()))
            throw ConfigError("config: unknown key '" + where + "'");
        if (base[it.key()].is_object() && it.value().is_object())
            merge_overlay(base[it.key()], it.value(), where);
        else
            base[it.key()] = it.value();
    }
}

inline std::uint64_t fnv1a64_str(const std::string& s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ull;
    }
    return h;
}

} // namespace detail

// Resolved configuration: the merged JSON plus typed accessors used by the
// commands. Keeping the raw document makes hashing and reporting trivial.
struct Config {
    json doc;
    std::uint64_t hash = 0;

    static Config from_preset(const std::string& preset) {
        Config c;
        c.doc = json::parse(kDeskPreset);
        if (preset == "paper")
            detail::merge_overlay(c.doc, json::parse(kPaperPresetOverlay), "");
        else if (preset != "desk")
            throw ConfigError("config: unknown preset '" + preset + "' (expected desk or paper)");
        return c;
    }

    static Config load(const std::string& path, const std::string& preset = "desk") {
        Config c = from_preset(preset);
        if (!path.empty()) {
            std::ifstream f(path);
            if (!f)
                throw ConfigError("config: cannot open '" + path + "'");
            json user = json::parse(f, nullptr, false);
            if (user.is_discarded())
                throw ConfigError("config: malformed JSON in '" + path + "'");
            detail::merge_overlay(c.doc, user, "");
        }
        c.finalize();
        return c;
    }

    void finalize() {
        validate();
        hash = detail::fnv1a64_str(doc.dump());
    }

    std::string hash_hex() const {
        char buf[20];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
        return buf;
    }

    // --- typed accessors -------------------------------------------------

    std::uint64_t seed() const { return doc["seed"].get<std::uint64_t>(); }
    void set_seed(std::uint64_t s) { doc["seed"] = s; }
    std::string out_dir() const { return doc["out_dir"].get<std::string>(); }
    void set_out_dir(const std::string& d) { doc["out_dir"] = d; }

    channel::Topology topology(std::size_t m_override = 0) const {
        const auto& t = doc["topology"];
        channel::Topology topo;
        topo.fc_ghz = t["fc_ghz"].get<double>();
        const double w = t["area"][0].get<double>();
        const double h = t["area"][1].get<double>();
        const double ceil_z = t["ceiling_height"].get<double>();
        const double ue_z = t["ue_plane_z"].get<double>();
        topo.area.lo = {0.0, 0.0, std::min(ue_z, 0.0)};
        topo.area.hi = {w, h, ceil_z};
        const std::size_t m = m_override ? m_override : t["m_aps"].get<std::size_t>();
        if (!t["ap_positions"].is_null() && !m_override) {
            for (const auto& p : t["ap_positions"])
                topo.ap_positions.push_back(
                    {p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
        } else {
            topo.ap_positions = channel::grid_ap_layout(m, topo.area, ceil_z);
        }
        return topo;
    }

    double ue_plane_z() const { return doc["topology"]["ue_plane_z"].get<double>(); }

    channel::DomainConfig domain(const char* which) const {
        const auto& d = doc[which];
        channel::DomainConfig dom;
        dom.pathloss_offset_db = d["pathloss_offset_db"].get<double>();
        dom.pathloss_exponent_coeff = d["pathloss_exponent_coeff"].get<double>();
        dom.shadowing_sigma_db = d["shadowing_sigma_db"].get<double>();
        if (!d["rice_factor_db"].is_null())
            dom.rice_factor_db = d["rice_factor_db"].get<double>();
        dom.los_phase_enabled = d["los_phase_enabled"].get<bool>();
        return dom;
    }

    std::optional<channel::Box> extrap_mask() const {
        const auto& m = doc["dataset"]["extrap_mask"];
        if (m.is_null())
            return std::nullopt;
        channel::Box b;
        b.lo = {m[0].get<double>(), m[1].get<double>(), -1e9};
        b.hi = {m[2].get<double>(), m[3].get<double>(), 1e9};
        return b;
    }

    std::string file_path(const char* key) const {
        return out_dir() + "/" + doc["files"][key].get<std::string>();
    }

  private:
    static void expect_number(const json& j, const char* what) {
        if (!j.is_number())
            throw ConfigError(std::string("config: '") + what + "' must be a number");
    }

    void validate() const {
        // Structural validation beyond key names; fail fast with the key path.
        if (!doc["seed"].is_number_unsigned())
            throw ConfigError("config: 'seed' must be a non-negative integer");
        const auto& t = doc["topology"];
        if (t["m_aps"].get<int>() < 1)
            throw ConfigError("config: 'topology.m_aps' must be >= 1");
        if (!t["area"].is_array() || t["area"].size() != 2)
            throw ConfigError("config: 'topology.area' must be [width, height]");
        if (!(t["fc_ghz"].get<double>() > 0.0))
            throw ConfigError("config: 'topology.fc_ghz' must be positive");
        const auto& ds = doc["dataset"];
        if (ds["n_samples"].get<int>() < 1 || ds["target_n_samples"].get<int>() < 1)
            throw ConfigError("config: dataset sample counts must be >= 1");
        if (ds["k_users"].get<int>() < 1)
            throw ConfigError("config: 'dataset.k_users' must be >= 1");
        if (!ds["extrap_mask"].is_null() &&
            (!ds["extrap_mask"].is_array() || ds["extrap_mask"].size() != 4))
            throw ConfigError("config: 'dataset.extrap_mask' must be [x0,y0,x1,y1] or null");
        const auto& tr = doc["train"];
        if (tr["epochs"].get<int>() < 1 || tr["batch_size"].get<int>() < 1)
            throw ConfigError("config: train epochs and batch_size must be >= 1");
        expect_number(tr["learning_rate"], "train.learning_rate");
        const auto& hm = doc["heatmap"];
        if (!(hm["grid_step"].get<double>() > 0.0))
            throw ConfigError("config: 'heatmap.grid_step' must be positive");
        if (!hm["target"].is_array() || hm["target"].size() != 2)
            throw ConfigError("config: 'heatmap.target' must be [x, y]");
        for (const auto& s : hm["schemes"])
            if (s != "mrt" && s != "gnn" && s != "rps")
                throw ConfigError("config: heatmap scheme must be mrt, gnn or rps");
        const auto& pr = doc["protocol"];
        const std::string prec = pr["precoder"].get<std::string>();
        if (prec != "mrt" && prec != "rzf" && prec != "gnn")
            throw ConfigError("config: protocol.precoder must be mrt, rzf or gnn");
        const std::string tp = pr["transport"].get<std::string>();
        if (tp != "inproc" && tp != "tcp")
            throw ConfigError("config: protocol.transport must be inproc or tcp");
        const auto& sw = doc["sweep"];
        if (sw["n_train_list"].empty() || sw["seeds"].empty())
            throw ConfigError("config: sweep lists must be nonempty");
        const auto& ev = doc["evaluate"];
        if (ev["k_list"].empty())
            throw ConfigError("config: evaluate.k_list must be nonempty");
        const double gs = doc["pointwise"]["grid_step"].get<double>();
        if (!(gs > 0.0))
            throw ConfigError("config: 'pointwise.grid_step' must be positive");
    }
};

} // namespace dmimo::harness

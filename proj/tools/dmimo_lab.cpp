// SPDX-License-Identifier: Apache-2.0
//
// dmimo-lab CLI: config-driven experiment runner.
//
//   dmimo-lab <generate|train|finetune|evaluate|pointwise|sweep|heatmap|protocol>
//             [--config <path>] [--seed N] [--out DIR] [--preset desk|paper]
//             [--error-json]
//
// Exit codes: 0 success, 2 config error, 3 runtime error, 4 protocol fault.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "dmimo/config.hpp"
#include "dmimo/harness.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string preset = "desk";
    std::string out_dir;
    long long seed = -1;
    bool error_json = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file (overrides the preset)");
    cmd->add_option("--preset", args.preset, "Base preset: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--seed", args.seed, "Override the config seed");
    cmd->add_option("--out", args.out_dir, "Override the output directory");
    cmd->add_flag("--error-json", args.error_json, "Emit errors as JSON on stderr");
}

int run_command(const std::string& name, const CommonArgs& args) {
    dmimo::harness::Config cfg = dmimo::harness::Config::load(args.config_path, args.preset);
    if (args.seed >= 0)
        cfg.set_seed(static_cast<std::uint64_t>(args.seed));
    if (!args.out_dir.empty())
        cfg.set_out_dir(args.out_dir);
    cfg.finalize();

    if (name == "generate")
        return dmimo::harness::cmd_generate(cfg);
    if (name == "train")
        return dmimo::harness::cmd_train(cfg);
    if (name == "finetune")
        return dmimo::harness::cmd_finetune(cfg);
    if (name == "evaluate")
        return dmimo::harness::cmd_evaluate(cfg);
    if (name == "pointwise")
        return dmimo::harness::cmd_pointwise(cfg);
    if (name == "sweep")
        return dmimo::harness::cmd_sweep(cfg);
    if (name == "heatmap")
        return dmimo::harness::cmd_heatmap(cfg);
    if (name == "protocol")
        return dmimo::harness::cmd_protocol(cfg);
    throw dmimo::ConfigError("unknown command '" + name + "'");
}

void report_error(const CommonArgs& args, const char* kind, const std::string& what) {
    if (args.error_json) {
        nlohmann::json j;
        j["error"] = what;
        j["kind"] = kind;
        std::fprintf(stderr, "%s\n", j.dump().c_str());
    } else {
        std::fprintf(stderr, "dmimo-lab: %s: %s\n", kind, what.c_str());
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dmimo-lab: distributed-MIMO downlink precoding laboratory"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string selected;
    for (const char* name : {"generate", "train", "finetune", "evaluate", "pointwise", "sweep",
                             "heatmap", "protocol"}) {
        CLI::App* cmd = app.add_subcommand(name);
        add_common(cmd, args);
        cmd->callback([&selected, name]() { selected = name; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    }

    try {
        return run_command(selected, args);
    } catch (const dmimo::ConfigError& e) {
        report_error(args, "config error", e.what());
        return 2;
    } catch (const dmimo::ParseError& e) {
        report_error(args, "parse error", e.what());
        return 3;
    } catch (const dmimo::StageTimeout& e) {
        report_error(args, "protocol fault", e.what());
        return 4;
    } catch (const dmimo::ProtocolViolation& e) {
        report_error(args, "protocol fault", e.what());
        return 4;
    } catch (const std::exception& e) {
        report_error(args, "runtime error", e.what());
        return 3;
    }
}

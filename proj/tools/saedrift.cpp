// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// saedrift command-line driver.
//
//   saedrift run      --config cfg.json [--set key=value ...] [--force]
//   saedrift track|svd|probe|annotate|report --config cfg.json
//   saedrift synth    --out DIR [--seed N]
//   saedrift validate --config cfg.json | --bundle DIR | --sae DIR
//
// Exit codes: 0 success, 2 config error, 3 data error, 4 network error,
// 5 internal error. Failures print a JSON error report on stderr.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "saedrift/pipeline.hpp"
#include "saedrift/quickstart.hpp"

namespace {

using saedrift::Error;
using saedrift::ErrorKind;
using saedrift::json;
namespace fs = std::filesystem;

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::size_t threads = 0;
    bool force = false;
};

// Applies "a.b.c=value"; value is parsed as JSON, falling back to a string.
void apply_override(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw Error(ErrorKind::config, "--set expects key=value, got '" + assignment + "'");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &cfg;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw Error(ErrorKind::config, "--set: empty path component in '" + key + "'");
        if (!node->is_object()) throw Error(ErrorKind::config, "--set: '" + key + "' descends into a non-object");
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        node = &(*node)[part];
        if (node->is_null()) *node = json::object();
        start = dot + 1;
    }
}

saedrift::RunConfig load_config(const Common& c) {
    if (c.config.empty()) throw Error(ErrorKind::config, "--config is required");
    std::ifstream in(c.config);
    if (!in) throw Error(ErrorKind::config, "cannot open config " + c.config);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::config, c.config + ": not valid JSON (" + e.what() + ")");
    }
    for (const auto& s : c.sets) apply_override(j, s);
    if (c.threads) j["threads"] = c.threads;
    const fs::path base = fs::path(c.config).parent_path();
    return saedrift::parse_run_config(j, base.empty() ? fs::path(".") : base);
}

void add_common(CLI::App* cmd, Common& c, bool with_force) {
    cmd->add_option("-c,--config", c.config, "run-config JSON file")->required();
    cmd->add_option("--set", c.sets, "override a config key, e.g. --set probe.tokens=200");
    cmd->add_option("-j,--threads", c.threads, "worker threads (0: all cores)");
    if (with_force) cmd->add_flag("--force", c.force, "ignore stage markers and recompute");
}

void write_error_file(const std::optional<saedrift::RunConfig>& cfg, const json& report) {
    if (!cfg) return;
    std::error_code ec;
    fs::create_directories(cfg->work_dir / "stages", ec);
    std::ofstream(cfg->work_dir / "stages" / "error.json") << report.dump(2) << '\n';
}

void clear_error_file(const saedrift::RunConfig& cfg) {
    std::error_code ec;
    fs::remove(cfg.work_dir / "stages" / "error.json", ec);
}

int validate_config(const saedrift::RunConfig& cfg) {
    std::size_t bundles = 0;
    for (const auto& t : cfg.tasks) {
        for (int l : cfg.layers) {
            const auto base = saedrift::read_activation_bundle(cfg.bundle_dir(t.base, l));
            ++bundles;
            for (const auto& [step, dir] : t.steps) {
                const auto tuned = saedrift::read_activation_bundle(cfg.bundle_dir(dir, l));
                saedrift::check_aligned(base, tuned);
                ++bundles;
            }
        }
    }
    for (const auto& s : cfg.saes) {
        const auto w = saedrift::read_sae_header(s.path);
        if (w.layer != s.layer) {
            throw Error(ErrorKind::schema, s.path.string() + ": SAE layer " + std::to_string(w.layer) +
                                               " but config says " + std::to_string(s.layer));
        }
    }
    std::cout << json{{"status", "ok"}, {"bundles", bundles}, {"saes", cfg.saes.size()}}.dump() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"saedrift: SAE feature drift analysis for fine-tuned models"};
    app.require_subcommand(1);

    Common common;
    auto* run = app.add_subcommand("run", "run every stage, skipping those already complete");
    add_common(run, common, true);

    std::vector<std::pair<CLI::App*, saedrift::Stage>> stage_cmds;
    const std::pair<const char*, const char*> descriptions[] = {
        {"track", "activation and SAE latent similarity per snapshot"},
        {"svd", "decompose the drift matrix at the final snapshot"},
        {"probe", "perturb along drift directions and count feature flips"},
        {"annotate", "fetch explanations and classify flipped features"},
        {"report", "write tables, markdown and plot series"},
    };
    for (std::size_t i = 0; i < saedrift::kStages.size(); ++i) {
        auto* cmd = app.add_subcommand(descriptions[i].first, descriptions[i].second);
        add_common(cmd, common, true);
        stage_cmds.emplace_back(cmd, saedrift::kStages[i]);
    }

    std::string synth_out;
    saedrift::synth::QuickstartOptions qs;
    auto* synth = app.add_subcommand("synth", "generate a synthetic quickstart workspace");
    synth->add_option("-o,--out", synth_out, "output directory")->required();
    synth->add_option("--seed", qs.seed, "generator seed");
    synth->add_option("--d-model", qs.d_model, "activation width");
    synth->add_option("--widths", qs.widths, "SAE widths");
    synth->add_option("--records", qs.records, "records per bundle");

    Common vcommon;
    std::string v_bundle, v_sae;
    auto* validate = app.add_subcommand("validate", "check a config and its inputs, or a single bundle");
    validate->add_option("-c,--config", vcommon.config, "run-config JSON file");
    validate->add_option("--set", vcommon.sets, "override a config key");
    validate->add_option("--bundle", v_bundle, "activation bundle directory");
    validate->add_option("--sae", v_sae, "SAE bundle directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    std::optional<saedrift::RunConfig> cfg;
    std::optional<saedrift::Stage> stage;
    try {
        if (*synth) {
            saedrift::synth::write_quickstart(synth_out, qs);
            std::cout << json{{"status", "ok"}, {"config", (fs::path(synth_out) / "config.json").string()}}.dump()
                      << '\n';
            return 0;
        }
        if (*validate) {
            if (!v_bundle.empty()) {
                const auto b = saedrift::read_activation_bundle(v_bundle);
                std::cout << json{{"status", "ok"}, {"records", b.records.size()}, {"tokens", b.total_tokens()}}.dump()
                          << '\n';
                return 0;
            }
            if (!v_sae.empty()) {
                const auto w = saedrift::read_sae_weights(v_sae);
                std::cout << json{{"status", "ok"}, {"sae_id", w.sae_id}, {"d_sae", w.d_sae}}.dump() << '\n';
                return 0;
            }
            cfg = load_config(vcommon);
            return validate_config(*cfg);
        }
        cfg = load_config(common);
        saedrift::Pipeline pipeline(*cfg);
        if (*run) {
            pipeline.run_all(common.force);
        } else {
            for (const auto& [cmd, s] : stage_cmds) {
                if (*cmd) {
                    stage = s;
                    pipeline.run_stage(s, common.force);
                }
            }
        }
        clear_error_file(*cfg);
        return 0;
    } catch (const saedrift::StageError& e) {
        const json report = saedrift::error_report(e, e.stage());
        std::cerr << report.dump() << '\n';
        write_error_file(cfg, report);
        return saedrift::exit_code(e.kind());
    } catch (const Error& e) {
        const json report = saedrift::error_report(e, stage);
        std::cerr << report.dump() << '\n';
        write_error_file(cfg, report);
        return saedrift::exit_code(e.kind());
    } catch (const std::exception& e) {
        const json report = saedrift::error_report(Error(ErrorKind::internal, e.what()), stage);
        std::cerr << report.dump() << '\n';
        write_error_file(cfg, report);
        return 5;
    }
}

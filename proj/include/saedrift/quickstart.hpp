// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic workspace: SAEs, base and snapshot bundles with planted drift
// that grows linearly with the step, and a run-config that ties them together.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "saedrift/bundle_io.hpp"
#include "saedrift/synth.hpp"

namespace saedrift::synth {

struct QuickstartOptions {
    std::size_t d_model = 32;
    std::vector<std::size_t> widths = {128, 512};
    std::vector<int> layers = {7, 13, 22};
    std::vector<std::string> tasks = {"SynthA", "SynthB"};
    std::vector<std::int64_t> steps = {400, 800, 1200, 1600, 2000};
    std::size_t records = 40;
    std::size_t min_tokens = 8;
    std::size_t max_tokens = 24;
    double scale = 0.3;
    double strength = 0.5;  // coefficient std of the leading planted direction at the final step
    double noise = 0.02;
    std::uint64_t seed = 42;
};

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
    SplitMix64 rng(seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL) ^ (c * 0x165667B19E3779F9ULL));
    return rng.next_u64();
}

/// Writes the workspace under `dir` and returns the run-config (also written
/// to dir/config.json). Paths in the config are relative to `dir`.
inline json write_quickstart(const fs::path& dir, const QuickstartOptions& o = {}) {
    if (o.layers.empty() || o.tasks.empty() || o.steps.empty() || o.widths.empty()) {
        throw Error(ErrorKind::config, "quickstart: layers, tasks, steps and widths must be non-empty");
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());

    json saes = json::array();
    for (std::size_t li = 0; li < o.layers.size(); ++li) {
        for (std::size_t wi = 0; wi < o.widths.size(); ++wi) {
            const int layer = o.layers[li];
            const std::string name = "L" + std::to_string(layer) + "_w" + std::to_string(o.widths[wi]);
            write_sae_weights(make_sae(o.d_model, o.widths[wi], derive_seed(o.seed, 1, li, wi), layer),
                              dir / "saes" / name);
            saes.push_back({{"name", name}, {"layer", layer}, {"path", "saes/" + name}});
        }
    }

    const std::int64_t final_step = o.steps.back();
    json tasks = json::array();
    for (std::size_t ti = 0; ti < o.tasks.size(); ++ti) {
        const std::string& task = o.tasks[ti];
        const fs::path root = fs::path("data") / task;
        json steps = json::object();
        for (auto s : o.steps) steps[std::to_string(s)] = (root / ("step_" + std::to_string(s))).string();
        tasks.push_back({{"name", task}, {"base", (root / "base").string()}, {"steps", steps}});

        for (std::size_t li = 0; li < o.layers.size(); ++li) {
            const int layer = o.layers[li];
            BundleShape shape{o.d_model, o.records, o.min_tokens, o.max_tokens, o.scale,
                              "synthetic-base", "synthetic-eval-" + task, layer};
            const auto base = make_activation_bundle(shape, derive_seed(o.seed, 2, ti, li));
            const std::string sub = "layer_" + std::to_string(layer);
            write_activation_bundle(base, dir / root / "base" / sub);

            // Odd tasks mirror the layer profile: concentrated drift deep
            // instead of shallow.
            const std::size_t rank = 1 + (ti % 2 == 0 ? li : o.layers.size() - 1 - li);
            std::vector<PlantedDirection> planted;
            double s = o.strength * (ti % 2 == 0 ? 1.0 : 0.6);
            for (std::size_t r = 0; r < rank; ++r, s *= 0.7) {
                planted.push_back({random_unit(o.d_model, derive_seed(o.seed, 3, ti * 64 + li, r)), s});
            }
            const std::uint64_t drift_seed = derive_seed(o.seed, 4, ti, li);
            for (auto step : o.steps) {
                const double f = static_cast<double>(step) / static_cast<double>(final_step);
                auto scaled = planted;
                for (auto& p : scaled) p.strength *= f;
                auto tuned = make_planted_drift(base, scaled, o.noise * f, drift_seed, step);
                write_activation_bundle(tuned, dir / root / ("step_" + std::to_string(step)) / sub);
            }
        }
    }

    json cfg = {{"work_dir", "work"},
                {"layers", o.layers},
                {"bundle_layout", "layer_{layer}"},
                {"tasks", tasks},
                {"saes", saes},
                {"svd", {{"max_rows", 2000}, {"seed", 42}, {"variance_threshold", 0.9}, {"k_max", 50}}},
                {"probe", {{"tokens", 500}, {"z_threshold", 1.5}, {"top_n", 10}, {"seed", 42}}},
                {"annotate", {{"mode", "cache-only"}}}};
    detail::write_json_file(dir / "config.json", cfg);
    return cfg;
}

}  // namespace saedrift::synth

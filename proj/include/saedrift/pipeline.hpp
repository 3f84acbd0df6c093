// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// End-to-end orchestration from a JSON run-config:
//
//   track -> svd -> probe -> annotate -> report
//
// Every stage writes its outputs under work_dir and a marker
// work_dir/stages/<stage>.json holding a key derived from the config subset
// the stage reads, the manifests of its inputs, and the keys of the stages
// it depends on. A rerun whose key matches the marker skips the stage.

#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "saedrift/bundle_io.hpp"
#include "saedrift/drift_metrics.hpp"
#include "saedrift/drift_svd.hpp"
#include "saedrift/error.hpp"
#include "saedrift/flip_probe.hpp"
#include "saedrift/sae.hpp"
#include "saedrift/sha256.hpp"
#include "saedrift/annotator.hpp"
#include "saedrift/reporter.hpp"

namespace saedrift {

inline constexpr const char* kPipelineVersion = "1";

struct TaskConfig {
    std::string name;
    fs::path base;
    std::map<std::int64_t, fs::path> steps;  // all listed snapshots
    std::int64_t snapshot_stride = 400;

    /// Snapshots tracked: multiples of the stride plus the final step.
    std::vector<std::int64_t> tracked_steps() const {
        std::vector<std::int64_t> out;
        for (const auto& [s, dir] : steps) {
            if (snapshot_stride <= 0 || s % snapshot_stride == 0 || s == final_step()) out.push_back(s);
        }
        return out;
    }

    std::int64_t final_step() const { return steps.rbegin()->first; }
};

struct SaeConfig {
    std::string name;
    int layer = 0;
    fs::path path;
    std::string api_id;  // identifier used by the explanation API
};

struct ProbeOptions {
    std::size_t tokens = 500;
    double z_threshold = 1.5;
    std::size_t fallback_top = 5;
    std::size_t top_n = 10;
    double epsilon_scale = 1.0;
    double cosine_cut = 0.5;
    std::uint64_t seed = 42;
};

enum class AnnotateMode { online, cache_only, skip };

inline std::string_view to_string(AnnotateMode m) {
    switch (m) {
        case AnnotateMode::online: return "online";
        case AnnotateMode::cache_only: return "cache-only";
        case AnnotateMode::skip: return "skip";
    }
    return "online";
}

struct AnnotateOptions {
    AnnotateMode mode = AnnotateMode::online;
    fs::path cache;  // default work_dir/annotations.jsonl
    std::size_t max_in_flight = 4;
    int max_reasks = 3;
    int retry_attempts = 3;
    std::int64_t backoff_ms = 1000;
};

struct ReportOptions {
    std::optional<int> shallow_layer;
    std::optional<int> deep_layer;
    std::vector<std::string> primary_saes;  // default: widest SAE per layer
};

struct RunConfig {
    fs::path work_dir;
    fs::path report_dir;
    std::vector<int> layers;
    std::string bundle_layout = "layer_{layer}";
    std::vector<TaskConfig> tasks;
    std::vector<SaeConfig> saes;
    DriftOptions svd;
    ProbeOptions probe;
    AnnotateOptions annotate;
    ReportOptions report;
    std::size_t threads = 0;  // 0: hardware concurrency

    /// Layers that have at least one SAE, ascending. Drift and probing run there.
    std::vector<int> analysis_layers() const {
        std::set<int> s;
        for (const auto& c : saes) s.insert(c.layer);
        return {s.begin(), s.end()};
    }

    std::vector<const SaeConfig*> saes_at(int layer) const {
        std::vector<const SaeConfig*> out;
        for (const auto& c : saes) {
            if (c.layer == layer) out.push_back(&c);
        }
        return out;
    }

    fs::path bundle_dir(const fs::path& snapshot, int layer) const {
        std::string sub = bundle_layout;
        const std::string token = "{layer}";
        for (auto pos = sub.find(token); pos != std::string::npos; pos = sub.find(token)) {
            sub.replace(pos, token.size(), std::to_string(layer));
        }
        return sub.empty() ? snapshot : snapshot / sub;
    }

    std::size_t thread_count() const { return threads ? threads : default_threads(); }
};

// ---------------------------------------------------------------- config

namespace config_detail {

[[noreturn]] inline void fail(const std::string& path, const std::string& msg) {
    throw Error(ErrorKind::config, "config field '" + path + "': " + msg);
}

inline std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

inline void check_object(const json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) fail(path.empty() ? "<root>" : path, "must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
            fail(join(path, key), "unknown field");
        }
    }
}

inline const json* find(const json& j, const std::string& key) {
    const auto it = j.find(key);
    return it == j.end() ? nullptr : &*it;
}

inline const json& need(const json& j, const std::string& key, const std::string& path) {
    const json* v = find(j, key);
    if (!v) fail(join(path, key), "is required");
    return *v;
}

inline std::string as_string(const json& v, const std::string& path) {
    if (!v.is_string()) fail(path, "must be a string");
    return v.get<std::string>();
}

inline std::int64_t as_int(const json& v, const std::string& path) {
    if (!v.is_number_integer()) fail(path, "must be an integer");
    return v.get<std::int64_t>();
}

inline std::size_t as_count(const json& v, const std::string& path, bool allow_zero = false) {
    const auto i = as_int(v, path);
    if (i < 0 || (!allow_zero && i == 0)) fail(path, allow_zero ? "must be >= 0" : "must be > 0");
    return static_cast<std::size_t>(i);
}

inline double as_double(const json& v, const std::string& path) {
    if (!v.is_number()) fail(path, "must be a number");
    return v.get<double>();
}

inline bool as_bool(const json& v, const std::string& path) {
    if (!v.is_boolean()) fail(path, "must be a boolean");
    return v.get<bool>();
}

inline fs::path as_path(const json& v, const std::string& path, const fs::path& base) {
    const fs::path p = as_string(v, path);
    if (p.empty()) fail(path, "must not be empty");
    return p.is_absolute() ? p : (base / p).lexically_normal();
}

template <typename T, typename F>
void optional_field(const json& j, const std::string& key, const std::string& path, T& out, F convert) {
    if (const json* v = find(j, key)) out = convert(*v, join(path, key));
}

}  // namespace config_detail

/// Parses and validates a run-config. Relative paths resolve against `base_dir`.
inline RunConfig parse_run_config(const json& j, const fs::path& base_dir = ".") {
    using namespace config_detail;
    check_object(j, "", {"work_dir", "report_dir", "layers", "bundle_layout", "tasks", "saes", "svd", "probe",
                         "annotate", "report", "threads"});
    RunConfig c;
    c.work_dir = as_path(need(j, "work_dir", ""), "work_dir", base_dir);
    c.report_dir = c.work_dir / "report";
    optional_field(j, "report_dir", "", c.report_dir,
                   [&](const json& v, const std::string& p) { return as_path(v, p, base_dir); });
    optional_field(j, "bundle_layout", "", c.bundle_layout, as_string);
    optional_field(j, "threads", "", c.threads,
                   [](const json& v, const std::string& p) { return as_count(v, p, true); });

    const json& layers = need(j, "layers", "");
    if (!layers.is_array() || layers.empty()) fail("layers", "must be a non-empty array of integers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const int l = static_cast<int>(as_int(layers[i], "layers[" + std::to_string(i) + "]"));
        if (std::find(c.layers.begin(), c.layers.end(), l) != c.layers.end()) fail("layers", "duplicate layer");
        c.layers.push_back(l);
    }
    std::sort(c.layers.begin(), c.layers.end());

    const json& tasks = need(j, "tasks", "");
    if (!tasks.is_array() || tasks.empty()) fail("tasks", "must be a non-empty array");
    std::set<std::string> task_names;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const std::string p = "tasks[" + std::to_string(i) + "]";
        const json& t = tasks[i];
        check_object(t, p, {"name", "base", "steps", "snapshot_stride"});
        TaskConfig tc;
        tc.name = as_string(need(t, "name", p), p + ".name");
        if (!detail::valid_record_id(tc.name)) fail(p + ".name", "must match [A-Za-z0-9._-]+");
        if (!task_names.insert(tc.name).second) fail(p + ".name", "duplicate task name");
        tc.base = as_path(need(t, "base", p), p + ".base", base_dir);
        optional_field(t, "snapshot_stride", p, tc.snapshot_stride, as_int);
        const json& steps = need(t, "steps", p);
        if (!steps.is_object() || steps.empty()) fail(p + ".steps", "must be a non-empty object {step: path}");
        for (const auto& [key, value] : steps.items()) {
            const std::string sp = p + ".steps." + key;
            std::int64_t step = 0;
            const auto res = std::from_chars(key.data(), key.data() + key.size(), step);
            if (res.ec != std::errc{} || res.ptr != key.data() + key.size() || step <= 0) {
                fail(sp, "step keys must be positive integers");
            }
            tc.steps[step] = as_path(value, sp, base_dir);
        }
        c.tasks.push_back(std::move(tc));
    }

    const json& saes = need(j, "saes", "");
    if (!saes.is_array()) fail("saes", "must be an array");
    std::set<std::string> sae_names;
    for (std::size_t i = 0; i < saes.size(); ++i) {
        const std::string p = "saes[" + std::to_string(i) + "]";
        const json& s = saes[i];
        check_object(s, p, {"name", "layer", "path", "api_id"});
        SaeConfig sc;
        sc.name = as_string(need(s, "name", p), p + ".name");
        if (!detail::valid_record_id(sc.name)) fail(p + ".name", "must match [A-Za-z0-9._-]+");
        if (!sae_names.insert(sc.name).second) fail(p + ".name", "duplicate SAE name");
        sc.layer = static_cast<int>(as_int(need(s, "layer", p), p + ".layer"));
        if (std::find(c.layers.begin(), c.layers.end(), sc.layer) == c.layers.end()) {
            fail(p + ".layer", "layer " + std::to_string(sc.layer) + " is not listed in 'layers'");
        }
        sc.path = as_path(need(s, "path", p), p + ".path", base_dir);
        sc.api_id = sc.name;
        optional_field(s, "api_id", p, sc.api_id, as_string);
        c.saes.push_back(std::move(sc));
    }

    if (const json* svd = find(j, "svd")) {
        check_object(*svd, "svd",
                     {"max_rows", "seed", "subsample", "max_components", "variance_threshold", "k_max"});
        optional_field(*svd, "max_rows", "svd", c.svd.max_rows,
                       [](const json& v, const std::string& p) { return as_count(v, p); });
        optional_field(*svd, "seed", "svd", c.svd.seed,
                       [](const json& v, const std::string& p) { return static_cast<std::uint64_t>(as_count(v, p, true)); });
        optional_field(*svd, "subsample", "svd", c.svd.strategy, [](const json& v, const std::string& p) {
            const auto s = as_string(v, p);
            if (s != "random" && s != "strided") fail(p, "must be \"random\" or \"strided\"");
            return parse_subsample_strategy(s);
        });
        optional_field(*svd, "max_components", "svd", c.svd.max_components,
                       [](const json& v, const std::string& p) { return as_count(v, p); });
        optional_field(*svd, "variance_threshold", "svd", c.svd.variance_threshold,
                       [](const json& v, const std::string& p) {
                           const double t = as_double(v, p);
                           if (!(t > 0.0 && t <= 1.0)) fail(p, "must be in (0, 1]");
                           return t;
                       });
        optional_field(*svd, "k_max", "svd", c.svd.k_max,
                       [](const json& v, const std::string& p) { return as_count(v, p); });
    }

    if (const json* probe = find(j, "probe")) {
        check_object(*probe, "probe",
                     {"tokens", "z_threshold", "fallback_top", "top_n", "epsilon_scale", "cosine_cut", "seed"});
        optional_field(*probe, "tokens", "probe", c.probe.tokens,
                       [](const json& v, const std::string& p) { return as_count(v, p); });
        optional_field(*probe, "z_threshold", "probe", c.probe.z_threshold, as_double);
        optional_field(*probe, "fallback_top", "probe", c.probe.fallback_top,
                       [](const json& v, const std::string& p) { return as_count(v, p); });
        optional_field(*probe, "top_n", "probe", c.probe.top_n,
                       [](const json& v, const std::string& p) { return as_count(v, p); });
        optional_field(*probe, "epsilon_scale", "probe", c.probe.epsilon_scale,
                       [](const json& v, const std::string& p) {
                           const double s = as_double(v, p);
                           if (!(s > 0.0)) fail(p, "must be > 0");
                           return s;
                       });
        optional_field(*probe, "cosine_cut", "probe", c.probe.cosine_cut, as_double);
        optional_field(*probe, "seed", "probe", c.probe.seed,
                       [](const json& v, const std::string& p) { return static_cast<std::uint64_t>(as_count(v, p, true)); });
    }

    c.annotate.cache = c.work_dir / "annotations.jsonl";
    if (const json* ann = find(j, "annotate")) {
        check_object(*ann, "annotate",
                     {"mode", "cache", "max_in_flight", "max_reasks", "retry_attempts", "backoff_ms"});
        optional_field(*ann, "mode", "annotate", c.annotate.mode, [](const json& v, const std::string& p) {
            const auto s = as_string(v, p);
            if (s == "online") return AnnotateMode::online;
            if (s == "cache-only") return AnnotateMode::cache_only;
            if (s == "skip") return AnnotateMode::skip;
            fail(p, "must be \"online\", \"cache-only\" or \"skip\"");
        });
        optional_field(*ann, "cache", "annotate", c.annotate.cache,
                       [&](const json& v, const std::string& p) { return as_path(v, p, base_dir); });
        optional_field(*ann, "max_in_flight", "annotate", c.annotate.max_in_flight,
                       [](const json& v, const std::string& p) { return as_count(v, p); });
        optional_field(*ann, "max_reasks", "annotate", c.annotate.max_reasks,
                       [](const json& v, const std::string& p) { return static_cast<int>(as_count(v, p, true)); });
        optional_field(*ann, "retry_attempts", "annotate", c.annotate.retry_attempts,
                       [](const json& v, const std::string& p) { return static_cast<int>(as_count(v, p)); });
        optional_field(*ann, "backoff_ms", "annotate", c.annotate.backoff_ms,
                       [](const json& v, const std::string& p) { return static_cast<std::int64_t>(as_count(v, p, true)); });
    }

    if (const json* rep = find(j, "report")) {
        check_object(*rep, "report", {"shallow_layer", "deep_layer", "primary_saes"});
        optional_field(*rep, "shallow_layer", "report", c.report.shallow_layer,
                       [](const json& v, const std::string& p) { return static_cast<int>(as_int(v, p)); });
        optional_field(*rep, "deep_layer", "report", c.report.deep_layer,
                       [](const json& v, const std::string& p) { return static_cast<int>(as_int(v, p)); });
        if (const json* ps = find(*rep, "primary_saes")) {
            if (!ps->is_array()) fail("report.primary_saes", "must be an array of SAE names");
            for (std::size_t i = 0; i < ps->size(); ++i) {
                const std::string p = "report.primary_saes[" + std::to_string(i) + "]";
                const auto name = as_string((*ps)[i], p);
                if (!sae_names.count(name)) fail(p, "unknown SAE '" + name + "'");
                c.report.primary_saes.push_back(name);
            }
        }
    }
    return c;
}

inline RunConfig load_run_config(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw Error(ErrorKind::config, "cannot open config " + file.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::config, file.string() + ": not valid JSON (" + e.what() + ")");
    }
    return parse_run_config(j, file.parent_path().empty() ? fs::path(".") : file.parent_path());
}

// ---------------------------------------------------------------- stages

enum class Stage { track, svd, probe, annotate, report };

inline constexpr std::array<Stage, 5> kStages = {Stage::track, Stage::svd, Stage::probe, Stage::annotate,
                                                 Stage::report};

inline std::string_view to_string(Stage s) {
    switch (s) {
        case Stage::track: return "track";
        case Stage::svd: return "svd";
        case Stage::probe: return "probe";
        case Stage::annotate: return "annotate";
        case Stage::report: return "report";
    }
    return "track";
}

/// Error raised inside a stage, tagged with the stage name.
class StageError : public Error {
public:
    StageError(Stage stage, const Error& cause) : Error(cause.kind(), cause.what()), stage_(stage) {}
    Stage stage() const noexcept { return stage_; }

private:
    Stage stage_;
};

inline json to_json(const SimilarityPoint& p) {
    json j = {{"layer", p.layer},
              {"step", p.step},
              {"value", p.value},
              {"tokens_skipped", p.tokens_skipped},
              {"total_tokens", p.total_tokens}};
    if (p.width) j["width"] = *p.width;
    return j;
}

inline SimilarityPoint similarity_point_from_json(const json& j) {
    SimilarityPoint p;
    p.layer = j.at("layer").get<int>();
    p.step = j.at("step").get<std::int64_t>();
    p.value = j.at("value").get<double>();
    p.tokens_skipped = j.at("tokens_skipped").get<std::size_t>();
    p.total_tokens = j.at("total_tokens").get<std::size_t>();
    if (j.contains("width")) p.width = j.at("width").get<std::size_t>();
    return p;
}

inline json merged(json a, const json& b) {
    a.update(b);
    return a;
}

class Pipeline {
public:
    using Logger = std::function<void(const std::string&)>;

    explicit Pipeline(RunConfig config, Logger log = {}) : c_(std::move(config)), log_(std::move(log)) {
        if (!log_) log_ = [](const std::string& m) { std::clog << "[saedrift] " << m << '\n'; };
    }

    const RunConfig& config() const noexcept { return c_; }

    /// Stages served from the marker cache during this object's lifetime.
    const std::vector<Stage>& cache_hits() const noexcept { return hits_; }
    const std::vector<Stage>& executed() const noexcept { return ran_; }

    void run_all(bool force = false) {
        for (Stage s : kStages) run_stage(s, force);
    }

    void run_stage(Stage s, bool force = false) {
        try {
            const std::string key = stage_key(s);
            if (!force && marker_matches(s, key)) {
                log_("cache hit: " + std::string(to_string(s)) + " (key " + key.substr(0, 12) + ")");
                hits_.push_back(s);
                return;
            }
            log_("running: " + std::string(to_string(s)));
            remove_marker(s);
            switch (s) {
                case Stage::track: run_track(); break;
                case Stage::svd: run_svd(); break;
                case Stage::probe: run_probe(); break;
                case Stage::annotate: run_annotate(); break;
                case Stage::report: run_report(); break;
            }
            write_marker(s, key);
            ran_.push_back(s);
        } catch (const StageError&) {
            throw;
        } catch (const Error& e) {
            throw StageError(s, e);
        } catch (const std::exception& e) {
            throw StageError(s, Error(ErrorKind::internal, e.what()));
        }
    }

    /// Key for a stage: hash of the config subset it reads, its input
    /// manifests, and the keys of upstream stages.
    std::string stage_key(Stage s) {
        if (const auto it = keys_.find(s); it != keys_.end()) return it->second;
        json k = {{"stage", to_string(s)}, {"version", kPipelineVersion}};
        switch (s) {
            case Stage::track: {
                json tasks = json::array();
                for (const auto& t : c_.tasks) {
                    json layers = json::object();
                    for (int l : c_.layers) {
                        json steps = json::object();
                        steps["base"] = bundle_fingerprint(c_.bundle_dir(t.base, l));
                        for (auto step : t.tracked_steps()) {
                            steps[std::to_string(step)] = bundle_fingerprint(c_.bundle_dir(t.steps.at(step), l));
                        }
                        layers[std::to_string(l)] = std::move(steps);
                    }
                    tasks.push_back({{"name", t.name}, {"layers", std::move(layers)}});
                }
                k["tasks"] = std::move(tasks);
                k["saes"] = sae_fingerprints();
                break;
            }
            case Stage::svd: {
                k["options"] = {{"max_rows", c_.svd.max_rows},
                                {"seed", c_.svd.seed},
                                {"subsample", to_string(c_.svd.strategy)},
                                {"max_components", c_.svd.max_components},
                                {"variance_threshold", c_.svd.variance_threshold},
                                {"k_max", c_.svd.k_max}};
                json tasks = json::array();
                for (const auto& t : c_.tasks) {
                    json layers = json::object();
                    for (int l : c_.analysis_layers()) {
                        layers[std::to_string(l)] = {
                            bundle_fingerprint(c_.bundle_dir(t.base, l)),
                            bundle_fingerprint(c_.bundle_dir(t.steps.at(t.final_step()), l))};
                    }
                    tasks.push_back({{"name", t.name}, {"final_step", t.final_step()}, {"layers", layers}});
                }
                k["tasks"] = std::move(tasks);
                break;
            }
            case Stage::probe: {
                k["upstream"] = stage_key(Stage::svd);
                k["options"] = {{"tokens", c_.probe.tokens},          {"z_threshold", c_.probe.z_threshold},
                                {"fallback_top", c_.probe.fallback_top}, {"top_n", c_.probe.top_n},
                                {"epsilon_scale", c_.probe.epsilon_scale}, {"cosine_cut", c_.probe.cosine_cut},
                                {"seed", c_.probe.seed}};
                k["saes"] = sae_fingerprints();
                break;
            }
            case Stage::annotate: {
                k["upstream"] = stage_key(Stage::probe);
                k["mode"] = to_string(c_.annotate.mode);
                k["judge_model"] = env_or_empty("JUDGE_MODEL");
                k["prompt_sha256"] = prompt_sha256();
                // cache-only results depend on what the cache holds
                if (c_.annotate.mode == AnnotateMode::cache_only) {
                    std::error_code ec;
                    k["cache"] = fs::is_regular_file(c_.annotate.cache, ec) ? sha256_file(c_.annotate.cache.string())
                                                                            : std::string("absent");
                }
                break;
            }
            case Stage::report: {
                k["upstream"] = {stage_key(Stage::track), stage_key(Stage::svd), stage_key(Stage::probe),
                                 stage_key(Stage::annotate)};
                k["options"] = {{"shallow", shallow_layer()},
                                {"deep", deep_layer()},
                                {"primary", primary_saes()},
                                {"report_dir", c_.report_dir.string()}};
                break;
            }
        }
        return keys_[s] = sha256_hex(k.dump());
    }

    int shallow_layer() const {
        const auto ls = c_.analysis_layers();
        if (c_.report.shallow_layer) return *c_.report.shallow_layer;
        return ls.empty() ? c_.layers.front() : ls.front();
    }

    int deep_layer() const {
        const auto ls = c_.analysis_layers();
        if (c_.report.deep_layer) return *c_.report.deep_layer;
        return ls.empty() ? c_.layers.back() : ls.back();
    }

    /// SAE configs feeding the per-layer cluster, alignment and ratio tables.
    std::vector<std::string> primary_saes() {
        if (!c_.report.primary_saes.empty()) return c_.report.primary_saes;
        std::vector<std::string> out;
        for (int l : c_.analysis_layers()) {
            const SaeConfig* best = nullptr;
            std::size_t best_width = 0;
            for (const auto* s : c_.saes_at(l)) {
                const std::size_t w = read_sae_header(s->path).d_sae;
                if (w > best_width) {
                    best = s;
                    best_width = w;
                }
            }
            if (best) out.push_back(best->name);
        }
        return out;
    }

    fs::path stage_dir(Stage s) const { return c_.work_dir / std::string(to_string(s)); }
    fs::path marker_path(Stage s) const { return c_.work_dir / "stages" / (std::string(to_string(s)) + ".json"); }

private:
    static std::string env_or_empty(const char* name) {
        const char* v = std::getenv(name);
        return v ? v : "";
    }

    static std::string bundle_fingerprint(const fs::path& dir) {
        const fs::path m = dir / "manifest.json";
        std::error_code ec;
        if (!fs::is_regular_file(m, ec)) throw Error(ErrorKind::missing_file, "missing bundle manifest " + m.string());
        return sha256_file(m.string());
    }

    json sae_fingerprints() const {
        json out = json::array();
        for (const auto& s : c_.saes) {
            const fs::path m = s.path / "sae_manifest.json";
            std::error_code ec;
            if (!fs::is_regular_file(m, ec)) throw Error(ErrorKind::missing_file, "missing SAE manifest " + m.string());
            out.push_back({{"name", s.name}, {"layer", s.layer}, {"api_id", s.api_id}, {"sha256", sha256_file(m.string())}});
        }
        return out;
    }

    bool marker_matches(Stage s, const std::string& key) const {
        std::error_code ec;
        if (!fs::is_regular_file(marker_path(s), ec)) return false;
        try {
            const json m = detail::read_json_file(marker_path(s));
            return m.value("key", std::string{}) == key;
        } catch (const Error&) {
            return false;
        }
    }

    void remove_marker(Stage s) const {
        std::error_code ec;
        fs::remove(marker_path(s), ec);
    }

    void write_marker(Stage s, const std::string& key) const {
        std::error_code ec;
        fs::create_directories(marker_path(s).parent_path(), ec);
        detail::write_json_file(marker_path(s), {{"stage", to_string(s)}, {"key", key}});
    }

    static void fresh_dir(const fs::path& dir) {
        std::error_code ec;
        fs::remove_all(dir, ec);
        fs::create_directories(dir, ec);
        if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
    }

    ActivationBundle load_bundle(const fs::path& snapshot, int layer) const {
        auto b = read_activation_bundle(c_.bundle_dir(snapshot, layer));
        if (b.layer != layer) {
            throw Error(ErrorKind::schema, c_.bundle_dir(snapshot, layer).string() + ": bundle layer " +
                                               std::to_string(b.layer) + " but config expects " +
                                               std::to_string(layer));
        }
        return b;
    }

    SaeWeights load_sae(const SaeConfig& s) const {
        auto w = read_sae_weights(s.path);
        if (w.layer != s.layer) {
            throw Error(ErrorKind::schema, s.path.string() + ": SAE layer " + std::to_string(w.layer) +
                                               " but config says " + std::to_string(s.layer));
        }
        return w;
    }

    // ---- track

    void run_track() {
        const fs::path dir = stage_dir(Stage::track);
        fresh_dir(dir);
        json activation = json::array();
        json latent = json::array();
        for (const auto& t : c_.tasks) {
            for (int l : c_.layers) {
                const auto base = load_bundle(t.base, l);
                std::vector<std::pair<const SaeConfig*, SaeWeights>> saes;
                std::vector<std::vector<SparseLatents>> base_codes;
                for (const auto* s : c_.saes_at(l)) {
                    saes.emplace_back(s, load_sae(*s));
                    base_codes.push_back(encode_bundle(base, saes.back().second, c_.thread_count()));
                }
                std::vector<std::string> ids;
                for (const auto& r : base.records) ids.push_back(r.id);
                for (auto step : t.tracked_steps()) {
                    const auto tuned = load_bundle(t.steps.at(step), l);
                    auto p = activation_cossim(base, tuned);
                    p.step = step;
                    activation.push_back(merged({{"task", t.name}}, to_json(p)));
                    for (std::size_t i = 0; i < saes.size(); ++i) {
                        const auto codes = encode_bundle(tuned, saes[i].second, c_.thread_count());
                        auto q = latent_cossim(base_codes[i], codes, ids);
                        q.layer = l;
                        q.step = step;
                        q.width = saes[i].second.d_sae;
                        latent.push_back(merged({{"task", t.name}, {"sae", saes[i].first->name}}, to_json(q)));
                    }
                    log_("track " + t.name + " layer " + std::to_string(l) + " step " + std::to_string(step) +
                         ": activation cos " + format_fixed(p.value, 4));
                }
            }
        }
        detail::write_json_file(dir / "points.json", {{"activation", activation}, {"latent", latent}});
    }

    // ---- svd

    fs::path svd_dir(const TaskConfig& t, int layer) const {
        return stage_dir(Stage::svd) / t.name / ("layer_" + std::to_string(layer));
    }

    void run_svd() {
        fresh_dir(stage_dir(Stage::svd));
        for (const auto& t : c_.tasks) {
            for (int l : c_.analysis_layers()) {
                const auto base = load_bundle(t.base, l);
                const auto tuned = load_bundle(t.steps.at(t.final_step()), l);
                const auto dec = analyze_drift(base, tuned, c_.svd);
                write_decomposition(dec, svd_dir(t, l),
                                    {{"task", t.name}, {"tuned_step", t.final_step()},
                                     {"subsample", to_string(c_.svd.strategy)}, {"seed", c_.svd.seed}});
                log_("svd " + t.name + " layer " + std::to_string(l) + ": k = " + std::to_string(dec.k_selected) +
                     ", top variance " + format_fixed(100.0 * dec.variance_fraction.front(), 2) + "%" +
                     (dec.k_threshold_reached ? "" : " (threshold not reached)"));
            }
        }
    }

    // ---- probe

    fs::path probe_file(const TaskConfig& t, const SaeConfig& s) const {
        return stage_dir(Stage::probe) / t.name / (s.name + ".json");
    }

    void run_probe() {
        fresh_dir(stage_dir(Stage::probe));
        for (const auto& t : c_.tasks) {
            fs::create_directories(stage_dir(Stage::probe) / t.name);
            for (int l : c_.analysis_layers()) {
                const auto dec = read_decomposition(svd_dir(t, l));
                const std::size_t k = dec.k_selected;
                // Directions are stored at binary32; renormalize before probing.
                MatrixD dirs(k, dec.d_model);
                for (std::size_t i = 0; i < k; ++i) {
                    double sq = 0.0;
                    for (double x : dec.directions.row(i)) sq += x * x;
                    const double inv = 1.0 / std::sqrt(sq);
                    for (std::size_t c = 0; c < dec.d_model; ++c) dirs(i, c) = dec.directions(i, c) * inv;
                }
                const auto eps = direction_epsilons(dec, k, c_.probe.epsilon_scale);
                const auto base = load_bundle(t.base, l);
                const MatrixF tokens = select_probe_tokens(base, c_.probe.tokens, c_.probe.seed);
                for (const auto* s : c_.saes_at(l)) {
                    const auto sae = load_sae(*s);
                    auto reports = probe_directions(tokens, dirs, eps, sae, c_.thread_count());
                    std::vector<double> rates;
                    for (const auto& r : reports) rates.push_back(r.flip_rate);
                    const auto sel = find_outliers(rates, c_.probe.z_threshold, c_.probe.fallback_top);
                    apply_outliers(reports, sel);
                    json aligned = json::array();
                    json strong = json::array();
                    for (std::size_t d : sel.directions) {
                        const auto res = align_features(dirs.row(d), sae, reports[d], c_.probe.top_n, c_.probe.cosine_cut);
                        for (const auto& a : res.features) aligned.push_back(to_json(a));
                        for (const auto& a : res.strong) strong.push_back(to_json(a));
                    }
                    json reps = json::array();
                    for (const auto& r : reports) reps.push_back(to_json(r));
                    detail::write_json_file(
                        probe_file(t, *s),
                        {{"task", t.name},
                         {"sae", s->name},
                         {"sae_id", sae.sae_id},
                         {"layer", l},
                         {"d_sae", sae.d_sae},
                         {"probed_tokens", tokens.rows()},
                         {"reports", std::move(reps)},
                         {"outliers", {{"directions", sel.directions}, {"z_scores", sel.z_scores}, {"fallback", sel.fallback}}},
                         {"aligned", std::move(aligned)},
                         {"strong", std::move(strong)}});
                    log_("probe " + t.name + " " + s->name + ": " + std::to_string(sel.directions.size()) +
                         " outlier direction(s)" + (sel.fallback ? " (fallback)" : ""));
                }
            }
        }
    }

    // ---- annotate

    fs::path annotate_file(const TaskConfig& t, const SaeConfig& s) const {
        return stage_dir(Stage::annotate) / t.name / (s.name + ".json");
    }

    void run_annotate() {
        fresh_dir(stage_dir(Stage::annotate));
        std::optional<AnnotationStore> store;
        std::optional<Annotator> annotator;
        if (c_.annotate.mode != AnnotateMode::skip) {
            std::error_code ec;
            fs::create_directories(c_.annotate.cache.parent_path(), ec);
            store.emplace(c_.annotate.cache);
        }
        if (c_.annotate.mode == AnnotateMode::online) {
            auto ac = AnnotatorConfig::from_env();
            ac.max_in_flight = c_.annotate.max_in_flight;
            ac.max_reasks = c_.annotate.max_reasks;
            ac.retry.attempts = c_.annotate.retry_attempts;
            ac.retry.initial_backoff = std::chrono::milliseconds(c_.annotate.backoff_ms);
            if (!ac.feature_api) throw Error(ErrorKind::config, "annotate mode online needs FEATURE_API_BASE");
            if (!ac.judge_api) throw Error(ErrorKind::config, "annotate mode online needs JUDGE_API_BASE");
            if (ac.judge_model.empty()) throw Error(ErrorKind::config, "annotate mode online needs JUDGE_MODEL");
            annotator.emplace(std::move(ac), *store, log_);
        }
        const std::string judge_model = env_or_empty("JUDGE_MODEL");
        std::vector<FeatureFailure> all_failures;
        for (const auto& t : c_.tasks) {
            fs::create_directories(stage_dir(Stage::annotate) / t.name);
            for (const auto& s : c_.saes) {
                const json probe = detail::read_json_file(probe_file(t, s));
                std::vector<AlignedFeature> aligned;
                for (const auto& a : probe.at("aligned")) aligned.push_back(aligned_feature_from_json(a));
                AnnotationBatch batch;
                if (annotator) {
                    batch = annotator->annotate_report(aligned, s.api_id);
                } else {
                    batch = offline_annotations(aligned, s.api_id, judge_model, store ? &*store : nullptr);
                }
                json anns = json::array();
                for (const auto& a : batch.annotations) anns.push_back(to_json(a));
                json fails = json::array();
                for (const auto& f : batch.failures) {
                    fails.push_back({{"feature", f.feature}, {"kind", to_string(f.kind)}, {"message", f.message}});
                    all_failures.push_back(f);
                }
                detail::write_json_file(annotate_file(t, s),
                                        {{"task", t.name}, {"sae", s.name}, {"api_id", s.api_id},
                                         {"annotations", std::move(anns)}, {"failures", std::move(fails)}});
            }
        }
        if (!all_failures.empty()) {
            // Completed annotations are cached; a rerun only retries the failures.
            const auto& f = all_failures.front();
            ErrorKind kind = f.kind;
            if (kind == ErrorKind::retry_exhausted) kind = ErrorKind::network;
            throw Error(kind, std::to_string(all_failures.size()) + " feature(s) failed to annotate; first: feature " +
                                  std::to_string(f.feature) + ": " + f.message);
        }
    }

    // Annotations without network access: cached entries when a store is
    // given, otherwise every feature is unexplained.
    AnnotationBatch offline_annotations(std::span<const AlignedFeature> aligned, const std::string& api_id,
                                        const std::string& judge_model, const AnnotationStore* store) const {
        AnnotationBatch batch;
        std::map<std::uint32_t, std::set<std::string>> sources;
        std::vector<std::uint32_t> order;
        for (const auto& f : aligned) {
            if (!sources.count(f.feature)) order.push_back(f.feature);
            if (f.by_cosine) sources[f.feature].insert("by_cosine");
            if (f.by_flip_freq) sources[f.feature].insert("by_flip_freq");
        }
        for (auto feature : order) {
            std::optional<FeatureAnnotation> hit;
            if (store) hit = store->annotation(api_id, feature, judge_model);
            FeatureAnnotation a;
            if (hit) {
                a = *hit;
            } else {
                a.sae_id = api_id;
                a.feature = feature;
                a.judge_model = judge_model;
                a.status = AnnotationStatus::unexplained;
                a.note = store ? "not in annotation cache" : "annotation skipped";
            }
            a.sources.assign(sources[feature].begin(), sources[feature].end());
            batch.annotations.push_back(std::move(a));
        }
        return batch;
    }

    // ---- report

    void run_report() {
        std::vector<Table> tables;
        std::vector<Series> series;

        const json points = detail::read_json_file(stage_dir(Stage::track) / "points.json");
        std::vector<TrajectoryPoint> act, lat;
        for (const auto& p : points.at("activation")) act.push_back({p.at("task"), similarity_point_from_json(p)});
        for (const auto& p : points.at("latent")) lat.push_back({p.at("task"), similarity_point_from_json(p)});
        tables.push_back(trajectory_table(act, "activation_cossim", "Activation cosine similarity, base vs fine-tuned"));
        for (auto& t : latent_trajectory_tables(lat)) tables.push_back(std::move(t));
        for (auto& s : trajectory_series(act, "activation")) series.push_back(std::move(s));
        for (auto& s : trajectory_series(lat, "latent")) series.push_back(std::move(s));

        Table spectrum{"drift_spectrum",
                       "Drift spectrum per task and layer",
                       {"task", "layer", "n_rows_used", "k_computed", "k_selected", "threshold_reached", "top_variance_pct"},
                       {},
                       {}};
        std::map<std::pair<std::string, int>, DriftDecomposition> decs;
        for (const auto& t : c_.tasks) {
            for (int l : c_.analysis_layers()) {
                auto dec = read_decomposition(svd_dir(t, l));
                spectrum.rows.push_back({t.name, std::to_string(l), std::to_string(dec.n_rows_used),
                                         std::to_string(dec.k_computed()), std::to_string(dec.k_selected),
                                         dec.k_threshold_reached ? "yes" : "no",
                                         format_fixed(100.0 * dec.variance_fraction.front(), 2)});
                decs.emplace(std::make_pair(t.name, l), std::move(dec));
            }
        }
        tables.push_back(std::move(spectrum));

        std::vector<OutlierSummary> outliers;
        std::vector<AnnotatedFeature> all_features;
        std::vector<WidthSweepCounts> sweep;
        const auto primary = primary_saes();
        std::vector<AnnotatedFeature> primary_features;
        for (const auto& t : c_.tasks) {
            for (const auto& s : c_.saes) {
                const json probe = detail::read_json_file(probe_file(t, s));
                const auto& dec = decs.at({t.name, s.layer});
                OutlierSummary o{t.name, s.layer, s.name, 0, 0.0, probe.at("outliers").at("fallback").get<bool>()};
                for (const auto& d : probe.at("outliers").at("directions")) {
                    ++o.n_directions;
                    o.max_variance_fraction = std::max(o.max_variance_fraction, dec.variance_fraction.at(d.get<std::size_t>()));
                }
                outliers.push_back(o);

                const json ann = detail::read_json_file(annotate_file(t, s));
                std::map<std::uint32_t, std::optional<Cluster>> cluster_of;
                for (const auto& a : ann.at("annotations")) {
                    const auto fa = annotation_from_json(a);
                    cluster_of[fa.feature] =
                        fa.status == AnnotationStatus::unexplained ? std::nullopt : std::optional<Cluster>(fa.cluster);
                }
                WidthSweepCounts w{t.name, s.name, 0, 0};
                const bool is_primary = std::find(primary.begin(), primary.end(), s.name) != primary.end();
                for (const auto& a : probe.at("aligned")) {
                    const auto af = aligned_feature_from_json(a);
                    const auto it = cluster_of.find(af.feature);
                    AnnotatedFeature f{t.name,       s.layer,         s.name,
                                       af.direction, af.feature,      af.cosine,
                                       af.by_cosine, af.by_flip_freq, it == cluster_of.end() ? std::nullopt : it->second};
                    if (f.by_flip_freq) {
                        ++w.total_flipped;
                        w.collateral += f.cluster == Cluster::Collateral;
                    }
                    if (is_primary) primary_features.push_back(f);
                    all_features.push_back(std::move(f));
                }
                sweep.push_back(w);
            }
        }
        tables.push_back(outlier_table(outliers));
        tables.push_back(cluster_distribution(primary_features));
        tables.push_back(alignment_cluster_table(primary_features, c_.probe.cosine_cut));
        std::vector<LayerFlipCounts> ratios;
        for (const auto& t : c_.tasks) {
            ratios.push_back({t.name, count_flipped(primary_features, t.name, shallow_layer()),
                              count_flipped(primary_features, t.name, deep_layer())});
        }
        tables.push_back(layer_ratio_table(ratios, shallow_layer(), deep_layer()));
        tables.push_back(width_sweep_table(sweep));
        write_report(c_.report_dir, tables, series);
        log_("report written to " + c_.report_dir.string());
    }

    RunConfig c_;
    Logger log_;
    std::map<Stage, std::string> keys_;
    std::vector<Stage> hits_;
    std::vector<Stage> ran_;
};

/// Machine-readable description of a failure.
inline json error_report(const Error& e, std::optional<Stage> stage = std::nullopt) {
    json j = {{"status", "error"}, {"kind", to_string(e.kind())}, {"exit_code", exit_code(e.kind())}, {"message", e.what()}};
    j["stage"] = stage ? json(to_string(*stage)) : json(nullptr);
    return j;
}

}  // namespace saedrift

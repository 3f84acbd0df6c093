// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// Feature annotation: fetch natural-language explanations from a
// Neuronpedia-style API, classify them into the seven-cluster taxonomy with
// an LLM judge, and cache both in an append-only JSON-lines store.
//
// Explanation endpoint:  GET  {FEATURE_API_BASE}/api/feature/{sae_id}/{feature}
//                        header x-api-key; explanations[0].description
// Judge endpoint:        POST {JUDGE_API_BASE}/chat/completions
//                        OpenAI-style chat body; the last choice's message
//                        content must be the strict-JSON verdict.

#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <variant>
#include <algorithm>
#include <span>
#include <vector>

#include "json.hpp"
#include "saedrift/error.hpp"
#include "saedrift/flip_probe.hpp"
#include "saedrift/judge_prompt.hpp"
#include "saedrift/sha256.hpp"

// After Eigen: <resolv.h> defines a macro that collides with Eigen parameter names.
#include "httplib.h"

namespace saedrift {

enum class Cluster { Persona, Structure, Code, Reasoning, Safety, Multilingual, Collateral };

inline constexpr std::array<Cluster, 7> kTaxonomy = {Cluster::Persona,   Cluster::Structure,    Cluster::Code,
                                                     Cluster::Reasoning, Cluster::Safety,       Cluster::Multilingual,
                                                     Cluster::Collateral};

inline std::string_view to_string(Cluster c) {
    switch (c) {
        case Cluster::Persona: return "Persona";
        case Cluster::Structure: return "Structure";
        case Cluster::Code: return "Code";
        case Cluster::Reasoning: return "Reasoning";
        case Cluster::Safety: return "Safety";
        case Cluster::Multilingual: return "Multilingual";
        case Cluster::Collateral: return "Collateral";
    }
    return "Collateral";
}

inline std::optional<Cluster> parse_cluster(std::string_view s) {
    for (Cluster c : kTaxonomy) {
        if (to_string(c) == s) return c;
    }
    return std::nullopt;
}

enum class AnnotationStatus { ok, defaulted, unexplained };

inline std::string_view to_string(AnnotationStatus s) {
    switch (s) {
        case AnnotationStatus::ok: return "ok";
        case AnnotationStatus::defaulted: return "defaulted";
        case AnnotationStatus::unexplained: return "unexplained";
    }
    return "ok";
}

inline AnnotationStatus parse_status(std::string_view s) {
    if (s == "defaulted") return AnnotationStatus::defaulted;
    if (s == "unexplained") return AnnotationStatus::unexplained;
    if (s == "ok") return AnnotationStatus::ok;
    throw Error(ErrorKind::schema, "unknown annotation status '" + std::string(s) + "'");
}

struct FeatureAnnotation {
    std::string sae_id;
    std::uint32_t feature = 0;
    std::optional<std::string> explanation;
    Cluster cluster = Cluster::Collateral;
    double confidence = 0.0;
    std::string reasoning;
    std::string judge_model;
    std::string prompt_sha256;
    std::string retrieved_at;
    AnnotationStatus status = AnnotationStatus::ok;
    std::string note;  // why the annotation was defaulted, if it was
    std::vector<std::string> sources;

    friend bool operator==(const FeatureAnnotation&, const FeatureAnnotation&) = default;
};

inline json to_json(const FeatureAnnotation& a) {
    return {
        {"sae_id", a.sae_id},
        {"feature", a.feature},
        {"explanation", a.explanation ? json(*a.explanation) : json(nullptr)},
        {"cluster", to_string(a.cluster)},
        {"confidence", a.confidence},
        {"reasoning", a.reasoning},
        {"judge_model", a.judge_model},
        {"prompt_sha256", a.prompt_sha256},
        {"retrieved_at", a.retrieved_at},
        {"status", to_string(a.status)},
        {"note", a.note},
        {"sources", a.sources},
    };
}

inline FeatureAnnotation annotation_from_json(const json& j) {
    FeatureAnnotation a;
    a.sae_id = j.at("sae_id").get<std::string>();
    a.feature = j.at("feature").get<std::uint32_t>();
    if (!j.at("explanation").is_null()) a.explanation = j.at("explanation").get<std::string>();
    const auto cluster = parse_cluster(j.at("cluster").get<std::string>());
    if (!cluster) throw Error(ErrorKind::schema, "annotation carries unknown cluster");
    a.cluster = *cluster;
    a.confidence = j.at("confidence").get<double>();
    a.reasoning = j.at("reasoning").get<std::string>();
    a.judge_model = j.at("judge_model").get<std::string>();
    a.prompt_sha256 = j.at("prompt_sha256").get<std::string>();
    a.retrieved_at = j.at("retrieved_at").get<std::string>();
    a.status = parse_status(j.at("status").get<std::string>());
    a.note = j.value("note", std::string{});
    a.sources = j.value("sources", std::vector<std::string>{});
    return a;
}

inline std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Network failure after the retry budget was spent.
class RetryExhausted : public Error {
public:
    RetryExhausted(const std::string& what, int attempts, const std::string& last_error)
        : Error(ErrorKind::retry_exhausted,
                what + ": failed after " + std::to_string(attempts) + " attempts (" + last_error + ")"),
          attempts_(attempts) {}

    int attempts() const noexcept { return attempts_; }

private:
    int attempts_;
};

struct Endpoint {
    std::string origin;  // scheme://host[:port]
    std::string prefix;  // path prefix without trailing slash
    std::string api_key;

    static Endpoint parse(const std::string& base_url, std::string api_key = {}) {
        const auto scheme = base_url.find("://");
        if (scheme == std::string::npos || base_url.empty()) {
            throw Error(ErrorKind::config, "endpoint URL '" + base_url + "' must look like scheme://host[:port][/path]");
        }
        const auto path = base_url.find('/', scheme + 3);
        Endpoint e;
        e.origin = base_url.substr(0, path);
        e.prefix = path == std::string::npos ? "" : base_url.substr(path);
        while (!e.prefix.empty() && e.prefix.back() == '/') e.prefix.pop_back();
        e.api_key = std::move(api_key);
        return e;
    }
};

struct RetryPolicy {
    int attempts = 3;
    std::chrono::milliseconds initial_backoff{1000};
    double multiplier = 2.0;
    std::chrono::seconds timeout{60};
};

struct HttpReply {
    int status = 0;
    std::string body;
};

/// Runs `send` until it yields a response that is neither a transport error,
/// a 5xx, nor a 429, sleeping with exponential backoff between attempts.
template <typename Send>
HttpReply send_with_retries(const RetryPolicy& policy, const std::string& what, Send&& send) {
    std::string last_error = "no attempt made";
    auto backoff = policy.initial_backoff;
    for (int attempt = 1; attempt <= policy.attempts; ++attempt) {
        httplib::Result res = send();
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
        } else if (res->status >= 500 || res->status == 429) {
            last_error = "HTTP " + std::to_string(res->status);
        } else {
            return {res->status, res->body};
        }
        if (attempt < policy.attempts) {
            std::this_thread::sleep_for(backoff);
            backoff = std::chrono::milliseconds(static_cast<std::int64_t>(backoff.count() * policy.multiplier));
        }
    }
    throw RetryExhausted(what, policy.attempts, last_error);
}

inline httplib::Client make_client(const Endpoint& e, const RetryPolicy& policy) {
    httplib::Client cli(e.origin);
    cli.set_connection_timeout(policy.timeout);
    cli.set_read_timeout(policy.timeout);
    cli.set_write_timeout(policy.timeout);
    return cli;
}

/// Append-only JSON-lines cache. Lines are explanation or annotation records;
/// on load the last record for a key wins. Writes are serialized.
class AnnotationStore {
public:
    struct CachedExplanation {
        std::optional<std::string> text;
        std::string retrieved_at;
    };

    AnnotationStore() = default;
    explicit AnnotationStore(fs::path path) : path_(std::move(path)) { load(); }

    const fs::path& path() const noexcept { return path_; }

    std::optional<CachedExplanation> explanation(const std::string& sae_id, std::uint32_t feature) const {
        std::lock_guard lock(mutex_);
        const auto it = explanations_.find({sae_id, feature});
        if (it == explanations_.end()) return std::nullopt;
        return it->second;
    }

    std::optional<FeatureAnnotation> annotation(const std::string& sae_id, std::uint32_t feature,
                                                const std::string& judge_model) const {
        std::lock_guard lock(mutex_);
        const auto it = annotations_.find({sae_id, feature, judge_model});
        if (it == annotations_.end()) return std::nullopt;
        return it->second;
    }

    void put_explanation(const std::string& sae_id, std::uint32_t feature, const CachedExplanation& e) {
        json line = {{"kind", "explanation"},
                     {"sae_id", sae_id},
                     {"feature", feature},
                     {"explanation", e.text ? json(*e.text) : json(nullptr)},
                     {"retrieved_at", e.retrieved_at}};
        std::lock_guard lock(mutex_);
        explanations_[{sae_id, feature}] = e;
        append(line);
    }

    void put_annotation(const FeatureAnnotation& a) {
        json line = to_json(a);
        line["kind"] = "annotation";
        std::lock_guard lock(mutex_);
        annotations_[{a.sae_id, a.feature, a.judge_model}] = a;
        append(line);
    }

private:
    void load() {
        std::ifstream in(path_);
        if (!in) return;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (line.empty()) continue;
            try {
                const json j = json::parse(line);
                const std::string kind = j.at("kind").get<std::string>();
                if (kind == "explanation") {
                    CachedExplanation e;
                    if (!j.at("explanation").is_null()) e.text = j.at("explanation").get<std::string>();
                    e.retrieved_at = j.value("retrieved_at", std::string{});
                    explanations_[{j.at("sae_id").get<std::string>(), j.at("feature").get<std::uint32_t>()}] = e;
                } else if (kind == "annotation") {
                    auto a = annotation_from_json(j);
                    annotations_[{a.sae_id, a.feature, a.judge_model}] = std::move(a);
                }
            } catch (const std::exception& e) {
                // A torn final line from an interrupted write is ignored; the entry is refetched.
                std::clog << "[annotator] skipping unreadable cache line " << lineno << " in " << path_.string()
                          << ": " << e.what() << '\n';
            }
        }
    }

    void append(const json& line) {
        if (path_.empty()) return;
        std::ofstream out(path_, std::ios::app);
        if (!out) throw Error(ErrorKind::io, "cannot append to " + path_.string());
        out << line.dump() << '\n';
        out.flush();
        if (!out) throw Error(ErrorKind::io, "write failed for " + path_.string());
    }

    fs::path path_;
    mutable std::mutex mutex_;
    std::map<std::pair<std::string, std::uint32_t>, CachedExplanation> explanations_;
    std::map<std::tuple<std::string, std::uint32_t, std::string>, FeatureAnnotation> annotations_;
};

struct AnnotatorConfig {
    std::optional<Endpoint> feature_api;
    std::optional<Endpoint> judge_api;
    std::string judge_model;
    RetryPolicy retry;
    int max_reasks = 3;
    std::size_t max_in_flight = 4;

    /// Reads FEATURE_API_BASE, FEATURE_API_KEY, JUDGE_API_BASE, JUDGE_API_KEY, JUDGE_MODEL.
    static AnnotatorConfig from_env() {
        auto env = [](const char* name) -> std::string {
            const char* v = std::getenv(name);
            return v ? std::string(v) : std::string{};
        };
        AnnotatorConfig c;
        if (const auto base = env("FEATURE_API_BASE"); !base.empty()) {
            c.feature_api = Endpoint::parse(base, env("FEATURE_API_KEY"));
        }
        if (const auto base = env("JUDGE_API_BASE"); !base.empty()) {
            c.judge_api = Endpoint::parse(base, env("JUDGE_API_KEY"));
        }
        c.judge_model = env("JUDGE_MODEL");
        return c;
    }
};

struct FeatureFailure {
    std::uint32_t feature = 0;
    ErrorKind kind = ErrorKind::network;
    std::string message;
};

struct AnnotationBatch {
    std::vector<FeatureAnnotation> annotations;  // one per distinct feature, in first-seen order
    std::vector<FeatureFailure> failures;
};

inline std::string prompt_sha256() { return sha256_hex(kJudgeSystemPrompt); }

/// Builds the chat request body for one judge call. `history` holds prior
/// (assistant reply, correction) pairs when re-asking.
inline json judge_request_body(const std::string& model, const std::string& explanation,
                               const std::vector<std::pair<std::string, std::string>>& history = {}) {
    json messages = json::array();
    messages.push_back({{"role", "system"}, {"content", std::string(kJudgeSystemPrompt)}});
    messages.push_back({{"role", "user"}, {"content", "Feature description: " + explanation}});
    for (const auto& [reply, correction] : history) {
        messages.push_back({{"role", "assistant"}, {"content", reply}});
        messages.push_back({{"role", "user"}, {"content", correction}});
    }
    return {{"model", model}, {"temperature", 0}, {"messages", std::move(messages)}};
}

struct JudgeVerdict {
    Cluster cluster = Cluster::Collateral;
    double confidence = 0.0;
    std::string reasoning;
};

/// Parses the judge's final message content. Returns the verdict or a reason
/// it was rejected.
inline std::variant<JudgeVerdict, std::string> parse_verdict(const std::string& content) {
    json j;
    try {
        j = json::parse(content);
    } catch (const json::exception&) {
        return std::string("reply is not strict JSON");
    }
    if (!j.is_object()) return std::string("reply is not a JSON object");
    if (!j.contains("predicted_cluster") || !j["predicted_cluster"].is_string()) {
        return std::string("missing string field predicted_cluster");
    }
    if (!j.contains("confidence_score") || !j["confidence_score"].is_number()) {
        return std::string("missing numeric field confidence_score");
    }
    if (!j.contains("reasoning") || !j["reasoning"].is_string()) return std::string("missing string field reasoning");
    const auto name = j["predicted_cluster"].get<std::string>();
    const auto cluster = parse_cluster(name);
    if (!cluster) return "predicted_cluster '" + name + "' is not one of the seven taxonomy clusters";
    const double conf = j["confidence_score"].get<double>();
    if (!(conf >= 0.0 && conf <= 1.0)) return std::string("confidence_score outside [0, 1]");
    return JudgeVerdict{*cluster, conf, j["reasoning"].get<std::string>()};
}

class Annotator {
public:
    using Logger = std::function<void(const std::string&)>;

    Annotator(AnnotatorConfig config, AnnotationStore& store, Logger log = {})
        : config_(std::move(config)), store_(store), log_(std::move(log)) {
        if (!log_) log_ = [](const std::string& m) { std::clog << "[annotator] " << m << '\n'; };
    }

    const AnnotatorConfig& config() const noexcept { return config_; }

    /// Cached explanation lookup; a 404 or an empty explanation list is
    /// cached as absent.
    std::optional<std::string> fetch_explanation(const std::string& sae_id, std::uint32_t feature) {
        if (auto hit = store_.explanation(sae_id, feature)) return hit->text;
        if (!config_.feature_api) {
            throw Error(ErrorKind::config, "FEATURE_API_BASE is not set and feature is not cached");
        }
        const Endpoint& ep = *config_.feature_api;
        const std::string path = ep.prefix + "/api/feature/" + sae_id + "/" + std::to_string(feature);
        httplib::Headers headers;
        if (!ep.api_key.empty()) headers.emplace("x-api-key", ep.api_key);
        auto cli = make_client(ep, config_.retry);
        const HttpReply reply = send_with_retries(config_.retry, "GET " + path, [&] { return cli.Get(path, headers); });
        AnnotationStore::CachedExplanation entry;
        entry.retrieved_at = utc_timestamp();
        if (reply.status == 404) {
            store_.put_explanation(sae_id, feature, entry);
            return std::nullopt;
        }
        if (reply.status != 200) {
            throw Error(ErrorKind::network, "GET " + path + ": HTTP " + std::to_string(reply.status));
        }
        try {
            const json j = json::parse(reply.body);
            if (j.contains("explanations") && j["explanations"].is_array()) {
                for (const auto& e : j["explanations"]) {
                    if (e.contains("description") && e["description"].is_string()) {
                        entry.text = e["description"].get<std::string>();
                        break;
                    }
                }
            }
        } catch (const json::exception& e) {
            throw Error(ErrorKind::network, "GET " + path + ": malformed response body (" + e.what() + ")");
        }
        store_.put_explanation(sae_id, feature, entry);
        return entry.text;
    }

    /// Classifies one explanation. Malformed verdicts are re-asked up to
    /// max_reasks times, then defaulted to Collateral with confidence 0.
    FeatureAnnotation classify_feature(const std::string& explanation) {
        if (!config_.judge_api) throw Error(ErrorKind::config, "JUDGE_API_BASE is not set");
        if (config_.judge_model.empty()) throw Error(ErrorKind::config, "JUDGE_MODEL is not set");
        const Endpoint& ep = *config_.judge_api;
        const std::string path = ep.prefix + "/chat/completions";
        httplib::Headers headers;
        if (!ep.api_key.empty()) headers.emplace("Authorization", "Bearer " + ep.api_key);
        auto cli = make_client(ep, config_.retry);

        FeatureAnnotation a;
        a.explanation = explanation;
        a.judge_model = config_.judge_model;
        a.prompt_sha256 = prompt_sha256();
        a.retrieved_at = utc_timestamp();

        std::vector<std::pair<std::string, std::string>> history;
        std::string reason;
        for (int ask = 0; ask <= config_.max_reasks; ++ask) {
            const std::string body = judge_request_body(config_.judge_model, explanation, history).dump();
            const HttpReply reply = send_with_retries(config_.retry, "POST " + path, [&] {
                return cli.Post(path, headers, body, "application/json");
            });
            if (reply.status != 200) {
                throw Error(ErrorKind::network, "POST " + path + ": HTTP " + std::to_string(reply.status));
            }
            std::string content;
            try {
                const json j = json::parse(reply.body);
                const auto& choices = j.at("choices");
                if (!choices.is_array() || choices.empty()) throw std::runtime_error("no choices");
                content = choices.back().at("message").at("content").get<std::string>();
            } catch (const std::exception&) {
                throw Error(ErrorKind::network, "POST " + path + ": response is not a chat completion");
            }
            auto verdict = parse_verdict(content);
            if (auto* v = std::get_if<JudgeVerdict>(&verdict)) {
                a.cluster = v->cluster;
                a.confidence = v->confidence;
                a.reasoning = v->reasoning;
                a.status = AnnotationStatus::ok;
                return a;
            }
            reason = std::get<std::string>(verdict);
            history.emplace_back(content, "Your previous reply was rejected: " + reason +
                                              ". Reply again with only the JSON object from the Output Schema.");
        }
        a.cluster = Cluster::Collateral;
        a.confidence = 0.0;
        a.status = AnnotationStatus::defaulted;
        a.note = "judge output invalid after " + std::to_string(config_.max_reasks) + " re-asks: " + reason;
        log_("defaulting to Collateral: " + a.note);
        return a;
    }

    /// Annotates every distinct feature in `aligned`. Cached (sae_id, feature,
    /// judge_model) entries are reused; failures are collected per feature.
    AnnotationBatch annotate_report(std::span<const AlignedFeature> aligned, const std::string& sae_id) {
        std::vector<std::uint32_t> order;
        std::map<std::uint32_t, std::set<std::string>> sources;
        for (const auto& f : aligned) {
            if (!sources.count(f.feature)) order.push_back(f.feature);
            auto& s = sources[f.feature];
            if (f.by_cosine) s.insert("by_cosine");
            if (f.by_flip_freq) s.insert("by_flip_freq");
        }
        std::vector<std::optional<FeatureAnnotation>> results(order.size());
        std::vector<std::optional<FeatureFailure>> failures(order.size());
        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            for (std::size_t i = next++; i < order.size(); i = next++) {
                const std::uint32_t feature = order[i];
                try {
                    results[i] = annotate_one(sae_id, feature);
                    results[i]->sources.assign(sources[feature].begin(), sources[feature].end());
                } catch (const Error& e) {
                    failures[i] = FeatureFailure{feature, e.kind(), e.what()};
                } catch (const std::exception& e) {
                    failures[i] = FeatureFailure{feature, ErrorKind::internal, e.what()};
                }
            }
        };
        const std::size_t n_workers = std::clamp<std::size_t>(config_.max_in_flight, 1, std::max<std::size_t>(1, order.size()));
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();

        AnnotationBatch batch;
        for (std::size_t i = 0; i < order.size(); ++i) {
            if (results[i]) batch.annotations.push_back(std::move(*results[i]));
            if (failures[i]) batch.failures.push_back(std::move(*failures[i]));
        }
        return batch;
    }

private:
    FeatureAnnotation annotate_one(const std::string& sae_id, std::uint32_t feature) {
        if (auto hit = store_.annotation(sae_id, feature, config_.judge_model)) return *hit;
        const auto explanation = fetch_explanation(sae_id, feature);
        FeatureAnnotation a;
        if (!explanation) {
            a.judge_model = config_.judge_model;
            a.prompt_sha256 = prompt_sha256();
            a.retrieved_at = utc_timestamp();
            a.status = AnnotationStatus::unexplained;
            a.cluster = Cluster::Collateral;
            a.note = "no explanation available; classification skipped";
        } else {
            a = classify_feature(*explanation);
        }
        a.sae_id = sae_id;
        a.feature = feature;
        store_.put_annotation(a);
        return a;
    }

    AnnotatorConfig config_;
    AnnotationStore& store_;
    Logger log_;
};

}  // namespace saedrift

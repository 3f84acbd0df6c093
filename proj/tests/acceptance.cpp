// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Tolerances and time budgets are fixed below.

#include <sys/resource.h>

#include <atomic>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include "oracles.hpp"
#include "saedrift/annotator.hpp"
#include "saedrift/drift_metrics.hpp"
#include "saedrift/drift_svd.hpp"
#include "saedrift/flip_probe.hpp"
#include "saedrift/pipeline.hpp"
#include "saedrift/quickstart.hpp"
#include "saedrift/reporter.hpp"
#include "saedrift/synth.hpp"

using namespace saedrift;
namespace fs = std::filesystem;

namespace {

constexpr double kOracleBudgetS = 10.0;
constexpr double kPlantedBudgetS = 30.0;
constexpr double kPlantedCosine = 0.99;
constexpr double kPlantedVariance = 0.9;
constexpr double kSvdRelTol = 1e-5;
constexpr double kFractionSumTol = 1e-6;
constexpr double kScaleInvarianceTol = 1e-6;
constexpr double kLatentOracleTol = 1e-6;
constexpr double kZTol = 1e-9;
constexpr double kScaleBudgetS = 120.0;
constexpr double kScaleRssBytes = 4.0 * 1024 * 1024 * 1024;

struct Outcome {
    bool ok = true;
    std::ostringstream detail;

    void require(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            detail << (detail.tellp() > 0 ? "; " : "") << what;
        }
    }
};

int failures = 0;

void check(const std::string& name, const std::function<void(Outcome&)>& body) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body(o);
    } catch (const std::exception& e) {
        o.ok = false;
        o.detail << "threw: " << e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.ok) ++failures;
    std::printf("%s %s (%.2f s)%s%s\n", o.ok ? "PASS" : "FAIL", name.c_str(), secs, o.detail.tellp() > 0 ? ": " : "",
                o.detail.str().c_str());
    std::fflush(stdout);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

ActivationBundle gaussian_bundle(std::size_t d, std::size_t records, std::size_t lo, std::size_t hi, double scale,
                                 std::uint64_t seed) {
    synth::BundleShape s;
    s.d_model = d;
    s.records = records;
    s.min_tokens = lo;
    s.max_tokens = hi;
    s.scale = scale;
    return synth::make_activation_bundle(s, seed);
}

double abs_dot(std::span<const double> a, std::span<const double> b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return std::abs(s);
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = oracle::read_file(e.path());
    }
    return out;
}

void oracle_equivalence(Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    SplitMix64 rng(2026);
    int mismatches = 0;
    for (int inst = 0; inst < 200; ++inst) {
        const std::size_t d = 2 + rng.bounded(15);              // <= 16
        const std::size_t ds = d + 1 + rng.bounded(64 - d);     // <= 64
        const std::size_t m = 1 + rng.bounded(32);              // <= 32
        const auto sae = synth::make_sae(d, ds, rng.next_u64());
        MatrixF tokens(m, d);
        for (auto& x : tokens.storage()) x = static_cast<float>(0.4 * rng.normal());
        const auto v = synth::random_unit(d, rng.next_u64());
        const double eps = rng.uniform(0.01, 0.6);
        const auto got = perturb_and_flip(tokens, v, eps, sae);
        const auto ref = synth::brute_force_flips(tokens, v, eps, sae);
        bool same = got.total_flips == ref.total_flips && got.flip_rate == ref.flip_rate;
        std::size_t nonzero = 0;
        for (const auto& [f, c] : got.feature_flips) {
            same &= c == ref.counts[f];
            ++nonzero;
        }
        for (auto c : ref.counts) nonzero -= c > 0;
        same &= nonzero == 0;
        mismatches += !same;
    }
    const double secs = seconds_since(t0);
    o.require(mismatches == 0, std::to_string(mismatches) + " of 200 instances differ from brute force");
    o.require(secs < kOracleBudgetS, "took " + std::to_string(secs) + " s");
}

void planted_drift(Outcome& o) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t d = 64;
    const auto base = gaussian_bundle(d, 100, 20, 40, 0.3, 1);

    // Rank 1: coefficient std 1.0 against per-coordinate noise 0.01
    // (noise energy 64e-4, SNR about 156).
    const auto v = synth::random_unit(d, 11);
    const std::vector<synth::PlantedDirection> one{{v, 1.0}};
    const auto dec1 = analyze_drift(base, synth::make_planted_drift(base, one, 0.01, 2));
    const double cos1 = abs_dot(dec1.directions.row(0), v);
    o.require(cos1 > kPlantedCosine, "rank-1 |v1.v*| = " + std::to_string(cos1));
    o.require(dec1.variance_fraction[0] > kPlantedVariance,
              "rank-1 variance fraction " + std::to_string(dec1.variance_fraction[0]));

    // Rank 3 with variance shares 4:2:1.
    std::vector<synth::PlantedDirection> three;
    const double amp[3] = {2.0, std::sqrt(2.0), 1.0};
    for (int r = 0; r < 3; ++r) three.push_back({synth::random_unit(d, 20 + r), amp[r]});
    const auto dec3 = analyze_drift(base, synth::make_planted_drift(base, three, 0.02, 3));
    o.require(dec3.k_selected == 3, "rank-3 select_k returned " + std::to_string(dec3.k_selected));
    const double secs = seconds_since(t0);
    o.require(secs < kPlantedBudgetS, "took " + std::to_string(secs) + " s");
}

void svd_correctness(Outcome& o) {
    SplitMix64 rng(64);
    MatrixD m(2000, 64);
    for (auto& x : m.storage()) x = rng.normal();
    const auto dec = decompose(m, 64);
    const auto ref = oracle::gram_singular_values(m.storage(), 2000, 64);
    double worst = 0, sum = 0;
    for (std::size_t i = 0; i < 64; ++i) {
        worst = std::max(worst, std::abs(dec.singular_values[i] - ref[i]) / ref[i]);
        sum += dec.variance_fraction[i];
    }
    o.require(dec.k_computed() == 64, "computed " + std::to_string(dec.k_computed()) + " components");
    o.require(worst < kSvdRelTol, "max relative singular value error " + std::to_string(worst));
    o.require(std::abs(sum - 1.0) < kFractionSumTol, "variance fractions sum to " + std::to_string(sum));
}

void similarity_identities(Outcome& o) {
    const auto b = gaussian_bundle(32, 20, 4, 16, 1.0, 5);
    o.require(activation_cossim(b, b).value == 1.0, "activation_cossim(b, b) != 1.0");

    const auto tuned = synth::make_planted_drift(b, std::vector<synth::PlantedDirection>{{synth::random_unit(32, 9), 0.7}}, 0.1, 6);
    auto scaled = tuned;
    for (auto& r : scaled.records)
        for (auto& x : r.data.storage()) x *= 3.7f;
    const double delta = std::abs(activation_cossim(b, tuned).value - activation_cossim(b, scaled).value);
    o.require(delta < kScaleInvarianceTol, "scaling by 3.7 moved the value by " + std::to_string(delta));

    const auto sae = synth::make_sae(32, 256, 7);
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto base = gaussian_bundle(32, 6, 3, 10, 0.5, 100 + seed);
        const auto moved = synth::make_planted_drift(
            base, std::vector<synth::PlantedDirection>{{synth::random_unit(32, 200 + seed), 0.4}}, 0.05, 300 + seed);
        const auto za = encode_bundle(base, sae);
        const auto zb = encode_bundle(moved, sae);
        double total = 0;
        for (std::size_t r = 0; r < base.records.size(); ++r) {
            double s = 0;
            for (std::size_t p = 0; p < base.records[r].num_tokens(); ++p) {
                const auto x = base.records[r].data.row(p);
                const auto y = moved.records[r].data.row(p);
                s += oracle::cosine(oracle::encode({x.begin(), x.end()}, sae), oracle::encode({y.begin(), y.end()}, sae));
            }
            total += s / static_cast<double>(base.records[r].num_tokens());
        }
        const double want = total / static_cast<double>(base.records.size());
        worst = std::max(worst, std::abs(latent_cossim(za, zb).value - want));
    }
    o.require(worst < kLatentOracleTol, "latent_cossim deviates from dense oracle by " + std::to_string(worst));
}

void z_fixture(Outcome& o) {
    const std::vector<double> f{1, 1, 1, 1, 10};
    const auto sel = find_outliers(f, 1.5);
    o.require(sel.directions == std::vector<std::size_t>{4} && !sel.fallback, "outlier set is not {4}");
    o.require(std::abs(sel.z_scores[4] - 2.0) < kZTol, "z_4 = " + std::to_string(sel.z_scores[4]));
    const std::vector<double> flat(8, 2.5);
    const auto fb = find_outliers(flat, 1.5, 5);
    o.require(fb.fallback && fb.directions.size() == 5, "all-equal rates did not trigger the top-5 fallback");
}

void k_fixtures(Outcome& o) {
    const std::vector<double> a{1.0};
    const std::vector<double> b{0.5, 0.3, 0.15, 0.05};
    const std::vector<double> c(60, 1.0 / 60.0);
    o.require(select_k(a, 0.9, 50).k == 1, "[1.0] did not give 1");
    o.require(select_k(b, 0.9, 50).k == 3, "[0.5,0.3,0.15,0.05] did not give 3");
    o.require(select_k(c, 0.9, 50).k == 50, "60 equal fractions did not give 50");
}

void table_arithmetic(Outcome& o) {
    const auto ratios = render_csv(layer_ratio_table({{"GSM8K", 10, 50}, {"WildJailbreak", 30, 10}}, 7, 22));
    o.require(ratios.find("WildJailbreak,30,10,3.00\n") != std::string::npos, "30/10 != 3.00");
    o.require(ratios.find("GSM8K,10,50,0.20\n") != std::string::npos, "10/50 != 0.20");
    const auto sweep = render_csv(width_sweep_table({{"WildJailbreak", "L7_16k", 40, 17}, {"GSM8K", "L7_65k", 30, 8}}));
    o.require(sweep.find("L7_16k,40,17,42.50\n") != std::string::npos, "17/40 != 42.50");
    o.require(sweep.find("L7_65k,30,8,26.67\n") != std::string::npos, "8/30 != 26.67");

    std::vector<TrajectoryPoint> act, lat;
    const std::int64_t steps[5] = {400, 800, 1200, 1600, 2000};
    const double a[5][3] = {{0.997, 0.993, 0.971}, {0.997, 0.993, 0.966}, {0.996, 0.992, 0.963},
                            {0.996, 0.991, 0.962}, {0.996, 0.992, 0.960}};
    const double l[5][3] = {{0.909, 0.924, 0.740}, {0.900, 0.896, 0.678}, {0.893, 0.872, 0.637},
                            {0.883, 0.837, 0.602}, {0.874, 0.830, 0.557}};
    const int layers[3] = {7, 13, 22};
    for (int s = 0; s < 5; ++s) {
        for (int k = 0; k < 3; ++k) {
            SimilarityPoint p;
            p.layer = layers[k];
            p.step = steps[s];
            p.value = a[s][k];
            act.push_back({"MultiNLI", p});
            p.value = l[s][k];
            p.width = 16384;
            lat.push_back({"MultiNLI", p});
        }
    }
    const std::string t1 = render_csv(trajectory_table(act, "activation_cossim", "Activation"));
    const std::string t2 = render_csv(latent_trajectory_tables(lat).at(0));
    const std::string want1 =
        "task,step,layer7,layer13,layer22\nMultiNLI,400,0.997,0.993,0.971\nMultiNLI,800,0.997,0.993,0.966\n"
        "MultiNLI,1200,0.996,0.992,0.963\nMultiNLI,1600,0.996,0.991,0.962\nMultiNLI,2000,0.996,0.992,0.960\n";
    const std::string want2 =
        "task,step,layer7,layer13,layer22\nMultiNLI,400,0.909,0.924,0.740\nMultiNLI,800,0.900,0.896,0.678\n"
        "MultiNLI,1200,0.893,0.872,0.637\nMultiNLI,1600,0.883,0.837,0.602\nMultiNLI,2000,0.874,0.830,0.557\n";
    o.require(t1 == want1, "activation table differs:\n" + t1);
    o.require(t2 == want2, "latent table differs:\n" + t2);
}

void determinism(Outcome& o) {
    oracle::TempDir a("accept-a");
    oracle::TempDir b("accept-b");
    synth::write_quickstart(a.path());
    synth::write_quickstart(b.path());
    auto quiet = [](const std::string&) {};
    Pipeline(load_run_config(a / "config.json"), quiet).run_all();
    Pipeline(load_run_config(b / "config.json"), quiet).run_all();
    const auto sa = snapshot(a / "work/report");
    const auto sb = snapshot(b / "work/report");
    o.require(!sa.empty(), "empty report");
    o.require(sa == sb, "report directories differ");

    const auto golden = oracle::read_lines(fs::path(SAEDRIFT_GOLDEN_DIR) / "subsample_n5000_k2000_seed42.txt");
    const auto idx = sample_without_replacement(5000, 2000, 42);
    bool same = golden.size() == idx.size();
    for (std::size_t i = 0; same && i < idx.size(); ++i) same = std::stoull(golden[i]) == idx[i];
    o.require(same, "subsample indices differ from the golden file");
}

void annotator_contract(Outcome& o) {
    std::atomic<int> feature_calls{0}, judge_calls{0};
    std::string system_prompt;
    httplib::Server server;
    server.Get(R"(/api/feature/([^/]+)/(\d+))", [&](const httplib::Request&, httplib::Response& res) {
        ++feature_calls;
        res.set_content(R"({"explanations":[{"description":"markdown bullet lists"}]})", "application/json");
    });
    server.Post("/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
        ++judge_calls;
        system_prompt = json::parse(req.body)["messages"][0]["content"].get<std::string>();
        const json reply = {{"predicted_cluster", "Formatting"}, {"confidence_score", 0.8}, {"reasoning", "lists"}};
        res.set_content(json{{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", reply.dump()}}}}})}}.dump(),
                        "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread th([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    AnnotatorConfig cfg;
    cfg.feature_api = Endpoint::parse("http://127.0.0.1:" + std::to_string(port));
    cfg.judge_api = cfg.feature_api;
    cfg.judge_model = "acceptance-judge";
    cfg.retry.initial_backoff = std::chrono::milliseconds(5);
    AnnotationStore store;
    Annotator ann(cfg, store, [](const std::string&) {});

    AlignedFeature f;
    f.feature = 3;
    f.by_cosine = true;
    const std::vector<AlignedFeature> list{f};
    const auto first = ann.annotate_report(list, "sae");
    o.require(first.failures.empty() && first.annotations.size() == 1, "annotation failed");
    if (!first.annotations.empty()) {
        const auto& a = first.annotations[0];
        o.require(a.cluster == Cluster::Collateral && a.confidence == 0.0 && a.status == AnnotationStatus::defaulted,
                  "invalid cluster was not defaulted to Collateral/0.0");
    }
    o.require(judge_calls == 4, "judge called " + std::to_string(judge_calls.load()) + " times, expected 1 + 3 re-asks");
    const int before = feature_calls + judge_calls;
    ann.annotate_report(list, "sae");
    o.require(feature_calls + judge_calls == before, "cached feature hit the network");
    server.stop();
    th.join();

    const std::string vendored = oracle::read_file(fs::path(SAEDRIFT_DATA_DIR) / "judge_system_prompt.txt");
    o.require(sha256_hex(system_prompt) == sha256_hex(vendored), "sent system prompt does not hash-match the vendored copy");
}

void scale_check(Outcome& o) {
    const std::size_t d_model = 1152, d_sae = 262144, tokens = 2000;
    const auto sae = synth::make_sae(d_model, d_sae, 99);
    // Small activations keep the code sparse, as a trained SAE's would be.
    SplitMix64 rng(5);
    MatrixF h(tokens, d_model);
    for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t k = 0; k < d_model; ++k) h(t, k) = sae.b_dec[k] + static_cast<float>(0.02 * rng.normal());
    const auto t0 = std::chrono::steady_clock::now();
    const auto z = encode_rows(h.data(), tokens, sae, std::thread::hardware_concurrency());
    const double secs = seconds_since(t0);
    rusage ru{};
    getrusage(RUSAGE_SELF, &ru);
    const double rss = static_cast<double>(ru.ru_maxrss) * 1024.0;
    o.require(z.rows() == tokens, "wrong row count");
    o.require(secs < kScaleBudgetS, "encoding took " + std::to_string(secs) + " s");
    o.require(rss < kScaleRssBytes, "peak RSS " + std::to_string(rss / (1 << 20)) + " MiB");
    o.detail << (o.ok ? "" : "; ") << "encode " << secs << " s, peak RSS " << static_cast<long>(rss / (1 << 20))
             << " MiB, nnz " << z.nnz();
}

}  // namespace

int main() {
    std::clog.setstate(std::ios::failbit);  // stage chatter from the pipeline
    check("oracle_equivalence", oracle_equivalence);
    check("planted_drift_recovery", planted_drift);
    check("svd_correctness", svd_correctness);
    check("similarity_identities", similarity_identities);
    check("z_score_outlier_fixture", z_fixture);
    check("k_selection_fixtures", k_fixtures);
    check("table_arithmetic", table_arithmetic);
    check("determinism", determinism);
    check("annotator_contract", annotator_contract);
    check("scale_check", scale_check);
    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}

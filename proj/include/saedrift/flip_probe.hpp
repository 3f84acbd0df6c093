// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// Perturbation probing along drift directions. Each probed token h is shifted
// to h + eps * v and a feature "flips" when its JumpReLU gate opens or closes.
//
// Pre-activations are linear in h, so the perturbed pre-activation is
// a(h) + eps * (v W_enc); the base pre-activations are computed once per
// feature block and shared by every direction.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "saedrift/bundle_io.hpp"
#include "saedrift/drift_svd.hpp"
#include "saedrift/error.hpp"
#include "saedrift/parallel.hpp"
#include "saedrift/rng.hpp"
#include "saedrift/sae.hpp"

namespace saedrift {

struct FlipReport {
    std::size_t direction = 0;
    double epsilon = 0.0;
    std::size_t probed_tokens = 0;  // M
    std::uint64_t total_flips = 0;  // sum over tokens and features
    double flip_rate = 0.0;         // total_flips / M
    // (feature, number of probed tokens on which it flipped), ascending feature.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> feature_flips;
    double z_score = 0.0;
    bool is_outlier = false;

    double frequency(std::size_t count) const noexcept {
        return static_cast<double>(count) / static_cast<double>(probed_tokens);
    }
};

struct OutlierSelection {
    std::vector<std::size_t> directions;  // ascending
    std::vector<double> z_scores;         // one per probed direction
    bool fallback = false;
};

struct AlignedFeature {
    std::size_t direction = 0;
    std::uint32_t feature = 0;
    double cosine = 0.0;     // signed, against the L2-normalized decoder row
    double flip_freq = 0.0;  // phi for this direction
    bool by_cosine = false;
    bool by_flip_freq = false;
};

struct AlignmentResult {
    std::vector<AlignedFeature> features;  // top-n by |cosine|, then extra top-n by phi
    std::vector<AlignedFeature> strong;    // subset of `features` with |cosine| > cosine_cut
};

inline void check_unit(std::span<const double> v, std::size_t direction) {
    double sq = 0.0;
    for (double x : v) sq += x * x;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) {
        throw Error(ErrorKind::invariant, "direction " + std::to_string(direction) + " is not unit length (norm " +
                                              std::to_string(std::sqrt(sq)) + ")");
    }
}

/// Probes several directions against the same token set. `directions` is
/// [k x d_model] and `epsilons` has k entries.
inline std::vector<FlipReport> probe_directions(const MatrixF& tokens, const MatrixD& directions,
                                                std::span<const double> epsilons, const SaeWeights& sae,
                                                std::size_t threads = 1) {
    const std::size_t m = tokens.rows();
    const std::size_t k = directions.rows();
    const std::size_t ds = sae.d_sae;
    if (m == 0) throw Error(ErrorKind::invariant, "probe: no tokens to perturb");
    check_input_width(tokens.cols(), sae);
    if (directions.cols() != sae.d_model) {
        throw Error(ErrorKind::shape, "probe: direction width does not match d_model");
    }
    if (epsilons.size() != k) throw Error(ErrorKind::shape, "probe: one epsilon per direction required");
    for (std::size_t i = 0; i < k; ++i) {
        check_unit(directions.row(i), i);
        if (!(epsilons[i] >= 0.0) || !std::isfinite(epsilons[i])) {
            throw Error(ErrorKind::invariant, "probe: epsilon must be finite and nonnegative");
        }
    }

    const auto x = kernel::center_rows(tokens.data(), m, sae);
    const std::size_t blocks = (ds + kernel::kFeatureBlock - 1) / kernel::kFeatureBlock;
    // counts[i][f]: tokens on which feature f flipped for direction i.
    std::vector<std::vector<std::uint32_t>> counts(k, std::vector<std::uint32_t>(ds, 0));
    parallel_for_chunks(blocks, threads, [&](std::size_t b0, std::size_t b1) {
        std::vector<double> base_pre;
        std::vector<double> dir_pre;
        for (std::size_t b = b0; b < b1; ++b) {
            const std::size_t f0 = b * kernel::kFeatureBlock;
            const std::size_t f1 = std::min(ds, f0 + kernel::kFeatureBlock);
            const std::size_t w = f1 - f0;
            base_pre.assign(m * w, 0.0);
            dir_pre.assign(k * w, 0.0);
            kernel::preactivations(x, m, sae, f0, f1, true, base_pre);
            kernel::preactivations(directions.data(), k, sae, f0, f1, false, dir_pre);
            for (std::size_t i = 0; i < k; ++i) {
                const double eps = epsilons[i];
                const double* u = dir_pre.data() + i * w;
                auto& cnt = counts[i];
                for (std::size_t j = 0; j < m; ++j) {
                    const double* a = base_pre.data() + j * w;
                    for (std::size_t f = 0; f < w; ++f) {
                        const double tau = sae.threshold[f0 + f];
                        const bool before = a[f] > tau;
                        const bool after = a[f] + eps * u[f] > tau;
                        cnt[f0 + f] += before != after;
                    }
                }
            }
        }
    });

    std::vector<FlipReport> reports(k);
    for (std::size_t i = 0; i < k; ++i) {
        FlipReport& r = reports[i];
        r.direction = i;
        r.epsilon = epsilons[i];
        r.probed_tokens = m;
        for (std::size_t f = 0; f < ds; ++f) {
            if (counts[i][f] == 0) continue;
            r.feature_flips.emplace_back(static_cast<std::uint32_t>(f), counts[i][f]);
            r.total_flips += counts[i][f];
        }
        r.flip_rate = static_cast<double>(r.total_flips) / static_cast<double>(m);
    }
    return reports;
}

/// Flip statistics of one direction over `tokens` [M x d_model].
inline FlipReport perturb_and_flip(const MatrixF& tokens, std::span<const double> direction, double epsilon,
                                   const SaeWeights& sae) {
    if (direction.size() != sae.d_model) throw Error(ErrorKind::shape, "probe: direction width does not match d_model");
    MatrixD dirs(1, direction.size(), std::vector<double>(direction.begin(), direction.end()));
    const double eps[] = {epsilon};
    return probe_directions(tokens, dirs, eps, sae).front();
}

/// Epsilon for direction i: scale * sigma_i / sqrt(N), with N the number of
/// rows of the matrix that was decomposed (one standard deviation at scale 1).
inline std::vector<double> direction_epsilons(const DriftDecomposition& dec, std::size_t count, double scale = 1.0) {
    std::vector<double> eps(count);
    const double root_n = std::sqrt(static_cast<double>(dec.n_rows_used));
    for (std::size_t i = 0; i < count; ++i) eps[i] = scale * dec.singular_values.at(i) / root_n;
    return eps;
}

/// Flags directions whose flip rate z-score exceeds `z_threshold` (population
/// std). With no such direction, falls back to the `fallback_top` directions
/// with the highest flip rate (ties by lower index).
///
/// The denominator is max(std, 1e-8): it guards a zero spread without biasing
/// z-scores when the spread is nonzero.
inline OutlierSelection find_outliers(std::span<const double> flip_rates, double z_threshold = 1.5,
                                      std::size_t fallback_top = 5) {
    OutlierSelection out;
    const std::size_t n = flip_rates.size();
    if (n == 0) throw Error(ErrorKind::invariant, "find_outliers: no directions probed");
    double mean = 0.0;
    for (double f : flip_rates) mean += f;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double f : flip_rates) var += (f - mean) * (f - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    const double denom = std::max(sd, 1e-8);
    for (std::size_t i = 0; i < n; ++i) {
        out.z_scores.push_back((flip_rates[i] - mean) / denom);
        if (out.z_scores.back() > z_threshold) out.directions.push_back(i);
    }
    if (out.directions.empty()) {
        out.fallback = true;
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return flip_rates[a] > flip_rates[b]; });
        order.resize(std::min(fallback_top, n));
        std::sort(order.begin(), order.end());
        out.directions = std::move(order);
    }
    return out;
}

inline void apply_outliers(std::vector<FlipReport>& reports, const OutlierSelection& sel) {
    for (std::size_t i = 0; i < reports.size(); ++i) {
        reports[i].z_score = sel.z_scores.at(i);
        reports[i].is_outlier = std::binary_search(sel.directions.begin(), sel.directions.end(), i);
    }
}

/// Cosine of every decoder row (L2-normalized) with v.
inline std::vector<double> decoder_cosines(std::span<const double> v, const SaeWeights& sae) {
    if (v.size() != sae.d_model) throw Error(ErrorKind::shape, "align: direction width does not match d_model");
    double vv = 0.0;
    for (double x : v) vv += x * x;
    const double vn = std::sqrt(vv);
    std::vector<double> cos(sae.d_sae);
    for (std::size_t f = 0; f < sae.d_sae; ++f) {
        const auto row = sae.W_dec.row(f);
        double dot = 0.0, ww = 0.0;
        for (std::size_t k = 0; k < row.size(); ++k) {
            dot += static_cast<double>(row[k]) * v[k];
            ww += static_cast<double>(row[k]) * row[k];
        }
        cos[f] = std::clamp(dot / (std::sqrt(ww) * vn), -1.0, 1.0);
    }
    return cos;
}

/// Top `top_n` features by |cosine| with the direction plus top `top_n` by
/// flip frequency, merged on feature index. Only features that flipped at
/// least once qualify for the frequency ranking. Ties break toward the lower
/// feature index.
inline AlignmentResult align_features(std::span<const double> v, const SaeWeights& sae, const FlipReport& report,
                                      std::size_t top_n = 10, double cosine_cut = 0.5) {
    const auto cos = decoder_cosines(v, sae);
    std::vector<std::uint32_t> by_cos(sae.d_sae);
    std::iota(by_cos.begin(), by_cos.end(), 0u);
    const std::size_t n_cos = std::min(top_n, by_cos.size());
    std::partial_sort(by_cos.begin(), by_cos.begin() + static_cast<std::ptrdiff_t>(n_cos), by_cos.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                          const double ca = std::abs(cos[a]);
                          const double cb = std::abs(cos[b]);
                          return ca != cb ? ca > cb : a < b;
                      });
    by_cos.resize(n_cos);

    auto flips = report.feature_flips;
    std::stable_sort(flips.begin(), flips.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    if (flips.size() > top_n) flips.resize(top_n);

    std::map<std::uint32_t, std::uint32_t> flip_count(report.feature_flips.begin(), report.feature_flips.end());
    auto freq_of = [&](std::uint32_t f) {
        const auto it = flip_count.find(f);
        return it == flip_count.end() ? 0.0 : report.frequency(it->second);
    };

    AlignmentResult out;
    std::map<std::uint32_t, std::size_t> position;
    for (std::uint32_t f : by_cos) {
        position[f] = out.features.size();
        out.features.push_back({report.direction, f, cos[f], freq_of(f), true, false});
    }
    for (const auto& [f, count] : flips) {
        const auto it = position.find(f);
        if (it != position.end()) {
            out.features[it->second].by_flip_freq = true;
            continue;
        }
        position[f] = out.features.size();
        out.features.push_back({report.direction, f, cos[f], report.frequency(count), false, true});
    }
    for (const auto& a : out.features) {
        if (a.cosine > cosine_cut || a.cosine < -cosine_cut) out.strong.push_back(a);
    }
    return out;
}

/// Draws the probe token set: up to m rows of the bundle's concatenated tokens.
inline MatrixF select_probe_tokens(const ActivationBundle& bundle, std::size_t m, std::uint64_t seed = 42) {
    const auto picks = sample_without_replacement(bundle.total_tokens(), m, seed);
    MatrixF out(picks.size(), bundle.d_model);
    std::size_t rec = 0;
    std::size_t offset = 0;  // global index of the first row of records[rec]
    for (std::size_t i = 0; i < picks.size(); ++i) {
        while (picks[i] >= offset + bundle.records[rec].num_tokens()) {
            offset += bundle.records[rec].num_tokens();
            ++rec;
        }
        const auto src = bundle.records[rec].data.row(picks[i] - offset);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

inline json to_json(const FlipReport& r) {
    json phi = json::array();
    for (const auto& [f, c] : r.feature_flips) phi.push_back(json::array({f, r.frequency(c)}));
    json counts = json::array();
    for (const auto& [f, c] : r.feature_flips) counts.push_back(json::array({f, c}));
    return {
        {"direction", r.direction},
        {"epsilon", r.epsilon},
        {"probed_tokens", r.probed_tokens},
        {"total_flips", r.total_flips},
        {"flip_rate", r.flip_rate},
        {"z_score", r.z_score},
        {"is_outlier", r.is_outlier},
        {"per_feature_freq", std::move(phi)},
        {"per_feature_count", std::move(counts)},
    };
}

inline FlipReport flip_report_from_json(const json& j) {
    FlipReport r;
    r.direction = j.at("direction").get<std::size_t>();
    r.epsilon = j.at("epsilon").get<double>();
    r.probed_tokens = j.at("probed_tokens").get<std::size_t>();
    r.total_flips = j.at("total_flips").get<std::uint64_t>();
    r.flip_rate = j.at("flip_rate").get<double>();
    r.z_score = j.at("z_score").get<double>();
    r.is_outlier = j.at("is_outlier").get<bool>();
    for (const auto& p : j.at("per_feature_count")) {
        r.feature_flips.emplace_back(p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>());
    }
    return r;
}

inline json to_json(const AlignedFeature& a) {
    json sources = json::array();
    if (a.by_cosine) sources.push_back("by_cosine");
    if (a.by_flip_freq) sources.push_back("by_flip_freq");
    return {{"direction", a.direction}, {"feature", a.feature},  {"cosine", a.cosine},
            {"flip_freq", a.flip_freq}, {"source", std::move(sources)}};
}

inline AlignedFeature aligned_feature_from_json(const json& j) {
    AlignedFeature a;
    a.direction = j.at("direction").get<std::size_t>();
    a.feature = j.at("feature").get<std::uint32_t>();
    a.cosine = j.at("cosine").get<double>();
    a.flip_freq = j.at("flip_freq").get<double>();
    for (const auto& s : j.at("source")) {
        if (s == "by_cosine") a.by_cosine = true;
        if (s == "by_flip_freq") a.by_flip_freq = true;
    }
    return a;
}

}  // namespace saedrift

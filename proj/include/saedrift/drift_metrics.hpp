// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// Cosine-similarity trajectories between a base snapshot and a fine-tuned one,
// for raw activations and for SAE latents. Per-token cosines are averaged
// within each record, then record means are averaged with equal weight.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "saedrift/bundle_io.hpp"
#include "saedrift/error.hpp"
#include "saedrift/sae.hpp"

namespace saedrift {

/// Tag recorded next to every similarity value. Results are only comparable
/// across runs that share it.
inline constexpr const char* kZeroVectorPolicy = "one-zero:0,both-zero:1,eps:1e-12";
inline constexpr double kZeroNorm = 1e-12;

struct SimilarityPoint {
    int layer = 0;
    std::int64_t step = 0;
    std::optional<std::size_t> width;  // d_sae; empty for raw activations
    double value = 0.0;
    std::size_t tokens_skipped = 0;
    std::size_t total_tokens = 0;
};

namespace detail {

// Cosine from a dot product and two squared norms, under the zero-vector policy.
// dot / sqrt(na2 * nb2) is exactly 1 when both vectors are identical.
inline double policy_cosine(double dot, double na2, double nb2) {
    const bool za = std::sqrt(na2) < kZeroNorm;
    const bool zb = std::sqrt(nb2) < kZeroNorm;
    if (za && zb) return 1.0;
    if (za || zb) return 0.0;
    return std::clamp(dot / std::sqrt(na2 * nb2), -1.0, 1.0);
}

struct RecordMean {
    double sum = 0.0;
    std::size_t counted = 0;
    std::size_t skipped = 0;
};

inline void accumulate(RecordMean& m, double cosine) {
    if (std::isfinite(cosine)) {
        m.sum += cosine;
        ++m.counted;
    } else {
        ++m.skipped;
    }
}

// Mean of record means, reduced in ascending record-id order.
inline SimilarityPoint reduce_records(std::span<const RecordMean> means, std::span<const std::string> ids) {
    std::vector<std::size_t> order(means.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (ids.size() == means.size()) {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
    }
    SimilarityPoint p;
    double total = 0.0;
    std::size_t records = 0;
    for (std::size_t i : order) {
        p.tokens_skipped += means[i].skipped;
        p.total_tokens += means[i].counted + means[i].skipped;
        if (means[i].counted == 0) continue;
        total += means[i].sum / static_cast<double>(means[i].counted);
        ++records;
    }
    if (records == 0) throw Error(ErrorKind::degenerate, "similarity: no tokens to compare");
    p.value = total / static_cast<double>(records);
    return p;
}

}  // namespace detail

inline double token_cosine(std::span<const float> a, std::span<const float> b) {
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double x = a[k];
        const double y = b[k];
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    return detail::policy_cosine(dot, na2, nb2);
}

/// Sparse cosine over ascending index lists.
inline double sparse_cosine(std::span<const std::uint32_t> ia, std::span<const float> va,
                            std::span<const std::uint32_t> ib, std::span<const float> vb) {
    double dot = 0.0, na2 = 0.0, nb2 = 0.0;
    for (float v : va) na2 += static_cast<double>(v) * v;
    for (float v : vb) nb2 += static_cast<double>(v) * v;
    std::size_t i = 0, j = 0;
    while (i < ia.size() && j < ib.size()) {
        if (ia[i] < ib[j]) {
            ++i;
        } else if (ib[j] < ia[i]) {
            ++j;
        } else {
            dot += static_cast<double>(va[i]) * vb[j];
            ++i;
            ++j;
        }
    }
    return detail::policy_cosine(dot, na2, nb2);
}

inline SimilarityPoint activation_cossim(const ActivationBundle& base, const ActivationBundle& tuned) {
    if (base.eval_set_id != tuned.eval_set_id) {
        throw Error(ErrorKind::misaligned,
                    "eval sets differ: '" + base.eval_set_id + "' vs '" + tuned.eval_set_id + "'");
    }
    if (base.layer != tuned.layer) {
        throw Error(ErrorKind::misaligned, "layers differ: " + std::to_string(base.layer) + " vs " +
                                               std::to_string(tuned.layer));
    }
    if (base.d_model != tuned.d_model) throw Error(ErrorKind::shape, "d_model differs between bundles");
    check_aligned(base, tuned);
    std::vector<detail::RecordMean> means(base.records.size());
    std::vector<std::string> ids;
    for (std::size_t r = 0; r < base.records.size(); ++r) {
        const auto& a = base.records[r].data;
        const auto& b = tuned.records[r].data;
        for (std::size_t p = 0; p < a.rows(); ++p) detail::accumulate(means[r], token_cosine(a.row(p), b.row(p)));
        ids.push_back(base.records[r].id);
    }
    SimilarityPoint out = detail::reduce_records(means, ids);
    out.layer = tuned.layer;
    out.step = tuned.step;
    return out;
}

/// Latent similarity between two per-record latent sets. `record_ids`, when
/// given, fixes the reduction order; otherwise records reduce in list order.
inline SimilarityPoint latent_cossim(std::span<const SparseLatents> base, std::span<const SparseLatents> tuned,
                                     std::span<const std::string> record_ids = {}) {
    if (base.size() != tuned.size()) {
        throw Error(ErrorKind::misaligned, "latent sets have " + std::to_string(base.size()) + " and " +
                                               std::to_string(tuned.size()) + " records");
    }
    std::vector<detail::RecordMean> means(base.size());
    std::optional<std::size_t> width;
    for (std::size_t r = 0; r < base.size(); ++r) {
        const auto& a = base[r];
        const auto& b = tuned[r];
        if (a.d_sae() != b.d_sae()) throw Error(ErrorKind::shape, "latent widths differ");
        if (a.rows() != b.rows()) {
            throw Error(ErrorKind::misaligned, "record " + std::to_string(r) + " token counts differ: " +
                                                   std::to_string(a.rows()) + " vs " + std::to_string(b.rows()));
        }
        width = a.d_sae();
        for (std::size_t p = 0; p < a.rows(); ++p) {
            detail::accumulate(means[r], sparse_cosine(a.indices(p), a.values(p), b.indices(p), b.values(p)));
        }
    }
    SimilarityPoint out = detail::reduce_records(means, record_ids);
    out.width = width;
    return out;
}

}  // namespace saedrift

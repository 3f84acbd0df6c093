// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// Principal directions of representational drift: build the token-wise
// difference matrix, center it, optionally subsample rows, and take a
// truncated SVD with exact variance accounting.

#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "saedrift/bundle_io.hpp"
#include "saedrift/error.hpp"
#include "saedrift/matrix.hpp"
#include "saedrift/rng.hpp"

namespace saedrift {

enum class SubsampleStrategy { random, strided };

inline std::string_view to_string(SubsampleStrategy s) { return s == SubsampleStrategy::random ? "random" : "strided"; }

inline SubsampleStrategy parse_subsample_strategy(std::string_view s) {
    if (s == "random") return SubsampleStrategy::random;
    if (s == "strided") return SubsampleStrategy::strided;
    throw Error(ErrorKind::config, "unknown subsample strategy '" + std::string(s) + "' (expected random|strided)");
}

struct DriftDecomposition {
    int layer = 0;
    std::size_t n_rows_used = 0;
    std::size_t d_model = 0;
    std::vector<double> singular_values;  // nonincreasing
    MatrixD directions;                   // [k_computed x d_model], orthonormal rows
    std::vector<double> variance_fraction;
    double total_sq_frobenius = 0.0;
    std::size_t k_selected = 0;
    bool k_threshold_reached = true;

    std::size_t k_computed() const noexcept { return singular_values.size(); }
};

struct CenteredDrift {
    MatrixD rows;                       // centered, possibly subsampled
    std::vector<std::size_t> row_index;  // source row of each output row
    std::size_t n_total = 0;
};

struct KSelection {
    std::size_t k = 0;
    bool threshold_reached = true;
};

/// Token-wise differences tuned - base, records concatenated in order.
inline MatrixD build_drift(const ActivationBundle& base, const ActivationBundle& tuned) {
    if (base.d_model != tuned.d_model) throw Error(ErrorKind::shape, "drift: d_model differs between bundles");
    check_aligned(base, tuned);
    const std::size_t d = base.d_model;
    MatrixD delta(base.total_tokens(), d);
    std::size_t row = 0;
    for (std::size_t r = 0; r < base.records.size(); ++r) {
        const auto& a = base.records[r].data;
        const auto& b = tuned.records[r].data;
        for (std::size_t p = 0; p < a.rows(); ++p, ++row) {
            for (std::size_t k = 0; k < d; ++k) {
                delta(row, k) = static_cast<double>(b(p, k)) - static_cast<double>(a(p, k));
            }
        }
    }
    return delta;
}

/// Subtracts the column mean taken over all rows, then keeps at most
/// max_rows of them (ascending source order).
inline CenteredDrift center_and_subsample(const MatrixD& delta, std::size_t max_rows = 2000,
                                          std::uint64_t seed = 42,
                                          SubsampleStrategy strategy = SubsampleStrategy::random) {
    const std::size_t n = delta.rows();
    const std::size_t d = delta.cols();
    if (n == 0 || d == 0) throw Error(ErrorKind::shape, "drift matrix is empty");
    if (max_rows == 0) throw Error(ErrorKind::config, "max_rows must be positive");
    std::vector<double> mean(d, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t k = 0; k < d; ++k) mean[k] += delta(r, k);
    }
    for (double& m : mean) m /= static_cast<double>(n);

    CenteredDrift out;
    out.n_total = n;
    out.row_index = strategy == SubsampleStrategy::random ? sample_without_replacement(n, max_rows, seed)
                                                          : sample_strided(n, max_rows);
    out.rows = MatrixD(out.row_index.size(), d);
    for (std::size_t i = 0; i < out.row_index.size(); ++i) {
        const auto src = delta.row(out.row_index[i]);
        for (std::size_t k = 0; k < d; ++k) out.rows(i, k) = src[k] - mean[k];
    }
    return out;
}

/// Smallest k whose cumulative fraction reaches `threshold`, capped at k_max.
/// A relative slack of 1e-12 absorbs summation rounding at exact boundaries.
/// When no prefix reaches the threshold, returns min(k_max, #fractions) and
/// clears threshold_reached.
inline KSelection select_k(std::span<const double> variance_fraction, double threshold = 0.90,
                           std::size_t k_max = 50) {
    double cumulative = 0.0;
    for (std::size_t i = 0; i < variance_fraction.size(); ++i) {
        cumulative += variance_fraction[i];
        if (cumulative >= threshold - 1e-12) return {std::min(k_max, i + 1), true};
    }
    return {std::min(k_max, variance_fraction.size()), false};
}

/// Truncated SVD of a centered drift matrix. Computes min(max_components, N, d)
/// triplets; variance fractions use the exact squared Frobenius norm as
/// denominator. Each direction is signed so its largest-magnitude coordinate
/// (first on ties) is positive.
inline DriftDecomposition decompose(const MatrixD& centered, std::size_t max_components = 64) {
    const std::size_t n = centered.rows();
    const std::size_t d = centered.cols();
    if (n == 0 || d == 0) throw Error(ErrorKind::shape, "decompose: empty matrix");
    double sq = 0.0;
    for (double x : centered.data()) sq += x * x;
    if (!(sq > 0.0)) throw Error(ErrorKind::degenerate, "degenerate drift: zero Frobenius norm");
    if (!std::isfinite(sq)) throw Error(ErrorKind::non_finite, "decompose: non-finite entries");

    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMajor> a(centered.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    Eigen::BDCSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) {
        throw Error(ErrorKind::non_convergence, "decompose: SVD of " + std::to_string(n) + "x" + std::to_string(d) +
                                                    " drift matrix did not converge (Eigen info=" +
                                                    std::to_string(static_cast<int>(svd.info())) + ")");
    }
    const std::size_t k = std::min({max_components, n, d});
    DriftDecomposition out;
    out.n_rows_used = n;
    out.d_model = d;
    out.total_sq_frobenius = sq;
    out.directions = MatrixD(k, d);
    const auto& sv = svd.singularValues();
    const auto& V = svd.matrixV();
    for (std::size_t i = 0; i < k; ++i) {
        const double s = sv(static_cast<Eigen::Index>(i));
        out.singular_values.push_back(s);
        out.variance_fraction.push_back(s * s / sq);
        std::size_t argmax = 0;
        for (std::size_t c = 1; c < d; ++c) {
            if (std::abs(V(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i))) >
                std::abs(V(static_cast<Eigen::Index>(argmax), static_cast<Eigen::Index>(i)))) {
                argmax = c;
            }
        }
        const double sign = V(static_cast<Eigen::Index>(argmax), static_cast<Eigen::Index>(i)) < 0.0 ? -1.0 : 1.0;
        for (std::size_t c = 0; c < d; ++c) {
            out.directions(i, c) = sign * V(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(i));
        }
    }
    return out;
}

/// Full drift analysis for one layer: build, center/subsample, decompose, select k.
struct DriftOptions {
    std::size_t max_rows = 2000;
    std::uint64_t seed = 42;
    SubsampleStrategy strategy = SubsampleStrategy::random;
    std::size_t max_components = 64;
    double variance_threshold = 0.90;
    std::size_t k_max = 50;
};

inline DriftDecomposition analyze_drift(const ActivationBundle& base, const ActivationBundle& tuned,
                                        const DriftOptions& opt = {}) {
    const auto centered = center_and_subsample(build_drift(base, tuned), opt.max_rows, opt.seed, opt.strategy);
    DriftDecomposition dec = decompose(centered.rows, opt.max_components);
    dec.layer = tuned.layer;
    const auto sel = select_k(dec.variance_fraction, opt.variance_threshold, opt.k_max);
    dec.k_selected = sel.k;
    dec.k_threshold_reached = sel.threshold_reached;
    return dec;
}

inline void write_decomposition(const DriftDecomposition& dec, const fs::path& dir, json extra = json::object()) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
    std::vector<float> dirs(dec.directions.data().begin(), dec.directions.data().end());
    std::vector<float> sv(dec.singular_values.begin(), dec.singular_values.end());
    const std::string dirs_sha = detail::write_f32_file(dir / "directions.f32", dirs);
    const std::string sv_sha = detail::write_f32_file(dir / "singular_values.f32", sv);
    json m = {
        {"format_version", kBundleFormatVersion},
        {"layer", dec.layer},
        {"n_rows_used", dec.n_rows_used},
        {"d_model", dec.d_model},
        {"k_computed", dec.k_computed()},
        {"k_selected", dec.k_selected},
        {"k_threshold_reached", dec.k_threshold_reached},
        {"total_sq_frobenius", dec.total_sq_frobenius},
        {"variance_fraction", dec.variance_fraction},
        {"files",
         {{"directions", {{"file", "directions.f32"}, {"sha256", dirs_sha}}},
          {"singular_values", {{"file", "singular_values.f32"}, {"sha256", sv_sha}}}}},
    };
    for (auto& [key, value] : extra.items()) m[key] = value;
    detail::write_json_file(dir / "svd_manifest.json", m);
}

/// Reads a serialized decomposition; directions and singular values come back
/// at binary32 precision.
inline DriftDecomposition read_decomposition(const fs::path& dir) {
    const auto where = (dir / "svd_manifest.json").string();
    const json m = detail::read_json_file(dir / "svd_manifest.json");
    DriftDecomposition dec;
    dec.layer = detail::manifest_field<int>(m, "layer", where);
    dec.n_rows_used = detail::positive_size(m, "n_rows_used", where);
    dec.d_model = detail::positive_size(m, "d_model", where);
    const std::size_t k = detail::positive_size(m, "k_computed", where);
    dec.k_selected = detail::manifest_field<std::size_t>(m, "k_selected", where);
    dec.k_threshold_reached = detail::manifest_field<bool>(m, "k_threshold_reached", where);
    dec.total_sq_frobenius = detail::manifest_field<double>(m, "total_sq_frobenius", where);
    dec.variance_fraction = detail::manifest_field<std::vector<double>>(m, "variance_fraction", where);
    if (dec.variance_fraction.size() != k || dec.k_selected > k) {
        throw Error(ErrorKind::schema, where + ": inconsistent component counts");
    }
    auto load = [&](const char* name, std::size_t count) {
        const fs::path file = dir / (std::string(name) + ".f32");
        if (detail::existing_file_size(file) != count * 4) {
            throw Error(ErrorKind::shape, file.string() + ": unexpected length");
        }
        std::vector<float> v(count);
        const std::string digest = detail::read_f32_into(file, v);
        const std::string want = m["files"][name].value("sha256", std::string{});
        if (!want.empty() && want != digest) throw Error(ErrorKind::hash_mismatch, file.string() + ": sha256 mismatch");
        return v;
    };
    const auto dirs = load("directions", k * dec.d_model);
    const auto sv = load("singular_values", k);
    dec.directions = MatrixD(k, dec.d_model, std::vector<double>(dirs.begin(), dirs.end()));
    dec.singular_values.assign(sv.begin(), sv.end());
    return dec;
}

}  // namespace saedrift

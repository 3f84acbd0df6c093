// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic ground truth: small random SAEs, activation bundles, planted
// drift, and a dense brute-force flip oracle. Everything is a pure function
// of its seed.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "saedrift/bundle_io.hpp"
#include "saedrift/error.hpp"
#include "saedrift/matrix.hpp"
#include "saedrift/rng.hpp"
#include "saedrift/sae.hpp"

namespace saedrift::synth {

/// Random JumpReLU SAE with unit-norm decoder rows, a tied encoder
/// (W_enc = W_dec^T), zero b_enc, small gaussian b_dec and thresholds drawn
/// uniformly from [0.05, 0.5].
inline SaeWeights make_sae(std::size_t d_model, std::size_t d_sae, std::uint64_t seed, int layer = 0) {
    if (d_model == 0 || d_sae <= d_model) {
        throw Error(ErrorKind::invariant, "make_sae: need 0 < d_model < d_sae (got " + std::to_string(d_model) +
                                              ", " + std::to_string(d_sae) + ")");
    }
    SplitMix64 rng(seed);
    SaeWeights w;
    w.sae_id = "synth-" + std::to_string(d_model) + "x" + std::to_string(d_sae) + "-s" + std::to_string(seed);
    w.layer = layer;
    w.d_model = d_model;
    w.d_sae = d_sae;
    w.tap = "synthetic";
    w.W_dec = MatrixF(d_sae, d_model);
    std::vector<double> row(d_model);
    for (std::size_t f = 0; f < d_sae; ++f) {
        double sq = 0.0;
        for (auto& x : row) {
            x = rng.normal();
            sq += x * x;
        }
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t k = 0; k < d_model; ++k) w.W_dec(f, k) = static_cast<float>(row[k] * inv);
    }
    w.W_enc = MatrixF(d_model, d_sae);
    for (std::size_t f = 0; f < d_sae; ++f) {
        for (std::size_t k = 0; k < d_model; ++k) w.W_enc(k, f) = w.W_dec(f, k);
    }
    w.b_enc.assign(d_sae, 0.0f);
    w.b_dec.resize(d_model);
    for (auto& b : w.b_dec) b = static_cast<float>(0.05 * rng.normal());
    w.threshold.resize(d_sae);
    for (auto& t : w.threshold) t = static_cast<float>(rng.uniform(0.05, 0.5));
    return w;
}

struct BundleShape {
    std::size_t d_model = 8;
    std::size_t records = 4;
    std::size_t min_tokens = 3;
    std::size_t max_tokens = 6;
    double scale = 1.0;  // per-coordinate standard deviation
    std::string model_id = "synthetic-base";
    std::string eval_set_id = "synthetic-eval";
    int layer = 0;
};

/// Gaussian activations; record j is named "r<j>" with a seed-determined
/// token count in [min_tokens, max_tokens].
inline ActivationBundle make_activation_bundle(const BundleShape& shape, std::uint64_t seed) {
    if (shape.d_model == 0 || shape.min_tokens == 0 || shape.max_tokens < shape.min_tokens) {
        throw Error(ErrorKind::invariant, "make_activation_bundle: invalid shape");
    }
    SplitMix64 rng(seed);
    ActivationBundle b;
    b.model_id = shape.model_id;
    b.layer = shape.layer;
    b.step = 0;
    b.eval_set_id = shape.eval_set_id;
    b.tap = "synthetic";
    b.d_model = shape.d_model;
    for (std::size_t j = 0; j < shape.records; ++j) {
        const std::size_t t =
            shape.min_tokens + static_cast<std::size_t>(rng.bounded(shape.max_tokens - shape.min_tokens + 1));
        ActivationRecord rec{"r" + std::to_string(j), MatrixF(t, shape.d_model)};
        for (float& x : rec.data.storage()) x = static_cast<float>(shape.scale * rng.normal());
        b.records.push_back(std::move(rec));
    }
    return b;
}

struct PlantedDirection {
    std::vector<double> direction;  // normalized internally
    double strength = 1.0;          // standard deviation of the per-token coefficient
};

/// tuned = base + sum_r a_r(j,p) * s_r * v_r + noise, with a_r and the noise
/// drawn from N(0,1) (noise scaled by noise_sigma) in token order.
inline ActivationBundle make_planted_drift(const ActivationBundle& base, std::span<const PlantedDirection> planted,
                                           double noise_sigma, std::uint64_t seed, std::int64_t step = 1) {
    const std::size_t d = base.d_model;
    std::vector<std::vector<double>> dirs;
    for (const auto& p : planted) {
        if (p.direction.size() != d) throw Error(ErrorKind::shape, "planted direction width does not match d_model");
        double sq = 0.0;
        for (double x : p.direction) sq += x * x;
        if (!(sq > 0.0)) throw Error(ErrorKind::invariant, "planted direction has zero norm");
        std::vector<double> v(p.direction);
        for (double& x : v) x /= std::sqrt(sq);
        dirs.push_back(std::move(v));
    }
    SplitMix64 rng(seed);
    ActivationBundle tuned = base;
    tuned.model_id = base.model_id + "-tuned";
    tuned.step = step;
    std::vector<double> row(d);
    for (auto& rec : tuned.records) {
        for (std::size_t p = 0; p < rec.num_tokens(); ++p) {
            auto out = rec.data.row(p);
            for (std::size_t k = 0; k < d; ++k) row[k] = out[k];
            for (std::size_t r = 0; r < dirs.size(); ++r) {
                if (planted[r].strength == 0.0) continue;
                const double a = rng.normal() * planted[r].strength;
                for (std::size_t k = 0; k < d; ++k) row[k] += a * dirs[r][k];
            }
            if (noise_sigma > 0.0) {
                for (std::size_t k = 0; k < d; ++k) row[k] += noise_sigma * rng.normal();
            }
            for (std::size_t k = 0; k < d; ++k) out[k] = static_cast<float>(row[k]);
        }
    }
    return tuned;
}

/// Random unit vector.
inline std::vector<double> random_unit(std::size_t d, std::uint64_t seed) {
    SplitMix64 rng(seed);
    std::vector<double> v(d);
    double sq = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        sq += x * x;
    }
    for (auto& x : v) x /= std::sqrt(sq);
    return v;
}

struct BruteForceFlips {
    double flip_rate = 0.0;
    std::uint64_t total_flips = 0;
    std::vector<std::uint32_t> counts;  // per feature
};

// Dense JumpReLU gate state of one activation given in double precision.
inline std::vector<bool> dense_gates(std::span<const double> h, const SaeWeights& sae) {
    std::vector<bool> on(sae.d_sae);
    for (std::size_t f = 0; f < sae.d_sae; ++f) {
        double a = 0.0;
        for (std::size_t k = 0; k < sae.d_model; ++k) {
            a += (h[k] - static_cast<double>(sae.b_dec[k])) * static_cast<double>(sae.W_enc(k, f));
        }
        a += static_cast<double>(sae.b_enc[f]);
        on[f] = a > static_cast<double>(sae.threshold[f]);
    }
    return on;
}

/// Reference flip statistics: re-encodes every h and h + eps * v densely and
/// compares gate masks.
inline BruteForceFlips brute_force_flips(const MatrixF& tokens, std::span<const double> v, double eps,
                                         const SaeWeights& sae) {
    BruteForceFlips out;
    out.counts.assign(sae.d_sae, 0);
    std::vector<double> h(sae.d_model), moved(sae.d_model);
    for (std::size_t j = 0; j < tokens.rows(); ++j) {
        for (std::size_t k = 0; k < sae.d_model; ++k) {
            h[k] = tokens(j, k);
            moved[k] = h[k] + eps * v[k];
        }
        const auto before = dense_gates(h, sae);
        const auto after = dense_gates(moved, sae);
        for (std::size_t f = 0; f < sae.d_sae; ++f) {
            if (before[f] != after[f]) {
                ++out.counts[f];
                ++out.total_flips;
            }
        }
    }
    out.flip_rate = static_cast<double>(out.total_flips) / static_cast<double>(tokens.rows());
    return out;
}

}  // namespace saedrift::synth

// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <vector>

namespace saedrift {

/// Seeded 64-bit generator shared by subsampling, probe-token selection and
/// synthetic data. The exact bit sequence is part of the on-disk contract:
/// tests/golden/gen_rng_golden.py is a reference implementation and the
/// golden vectors it produces must match in every language.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next_u64() noexcept {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform on [0, 1) with 53 bits of resolution.
    double uniform() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Multiply-shift reduction onto [0, n). n must be nonzero.
    std::uint64_t bounded(std::uint64_t n) noexcept {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    /// Standard normal via Box-Muller; consumes two draws, keeps the cosine branch.
    double normal() noexcept {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::uint64_t state_;
};

/// Selects min(k, n) distinct indices from [0, n) by a partial Fisher-Yates
/// shuffle and returns them in ascending order. With k >= n every index is
/// returned and the generator is not consumed.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k,
                                                           std::uint64_t seed) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (k >= n) return perm;
    SplitMix64 rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.bounded(n - i));
        std::swap(perm[i], perm[j]);
    }
    perm.resize(k);
    std::sort(perm.begin(), perm.end());
    return perm;
}

/// Evenly spaced selection: index floor(i * n / k) for i in [0, k).
inline std::vector<std::size_t> sample_strided(std::size_t n, std::size_t k) {
    std::vector<std::size_t> out;
    if (k >= n) {
        out.resize(n);
        std::iota(out.begin(), out.end(), std::size_t{0});
        return out;
    }
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back(static_cast<std::size_t>(
            (static_cast<unsigned __int128>(i) * n) / k));
    }
    return out;
}

}  // namespace saedrift

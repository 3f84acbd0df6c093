// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// Frozen JumpReLU sparse-autoencoder inference.
//
//   a = (h - b_dec) W_enc + b_enc,   z_f = a_f if a_f > tau_f else 0
//   h_hat = z W_dec + b_dec
//
// All sums accumulate in double over float weights. Scalar and batched
// encoding share one kernel, so they agree bit for bit.

#pragma once

#include <algorithm>
#include <array>
#include <cstring>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "saedrift/bundle_io.hpp"
#include "saedrift/error.hpp"
#include "saedrift/matrix.hpp"
#include "saedrift/parallel.hpp"

namespace saedrift {

struct LatentVector {
    std::vector<float> values;          // [d_sae], entries >= 0
    std::vector<std::uint32_t> active;  // sorted {f : values[f] > 0}
};

/// Per-token sparse latent codes in CSR layout. Column indices within a row are ascending.
class SparseLatents {
public:
    SparseLatents() = default;
    explicit SparseLatents(std::size_t d_sae) : d_sae_(d_sae), row_ptr_{0} {}

    std::size_t d_sae() const noexcept { return d_sae_; }
    std::size_t rows() const noexcept { return row_ptr_.empty() ? 0 : row_ptr_.size() - 1; }
    std::size_t nnz() const noexcept { return index_.size(); }

    std::span<const std::uint32_t> indices(std::size_t r) const noexcept {
        return {index_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
    }
    std::span<const float> values(std::size_t r) const noexcept {
        return {value_.data() + row_ptr_[r], row_ptr_[r + 1] - row_ptr_[r]};
    }

    void push(std::uint32_t f, float v) {
        index_.push_back(f);
        value_.push_back(v);
    }
    void end_row() { row_ptr_.push_back(index_.size()); }

    /// Appends all rows of `other` (same width).
    void append(const SparseLatents& other) {
        const std::size_t base = index_.size();
        index_.insert(index_.end(), other.index_.begin(), other.index_.end());
        value_.insert(value_.end(), other.value_.begin(), other.value_.end());
        for (std::size_t r = 1; r < other.row_ptr_.size(); ++r) row_ptr_.push_back(base + other.row_ptr_[r]);
    }

    friend bool operator==(const SparseLatents&, const SparseLatents&) = default;

private:
    std::size_t d_sae_ = 0;
    std::vector<std::size_t> row_ptr_;
    std::vector<std::uint32_t> index_;
    std::vector<float> value_;
};

namespace kernel {

inline constexpr std::size_t kTokenTile = 4;
inline constexpr std::size_t kFeatureTile = 32;
// Feature blocks always start at multiples of this, so the code path that
// produces a given feature's pre-activation depends only on its index.
inline constexpr std::size_t kFeatureBlock = 2048;
static_assert(kFeatureBlock % kFeatureTile == 0);

// 8 doubles; lowered to whatever vector width the target offers.
using Vec8d = double __attribute__((vector_size(64)));
inline constexpr std::size_t kLanes = 8;
inline constexpr std::size_t kVecPerTile = kFeatureTile / kLanes;

inline Vec8d load8(const double* p) {
    Vec8d v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

// Accumulates one [TB x kFeatureTile] output tile: out[t][j] = sum_k x[t][k] * panel[k][j],
// summed sequentially in k. `panel` is a packed [d x kFeatureTile] slice of W_enc.
template <std::size_t TB>
inline void tile(const double* x, std::size_t d, const double* panel, double* out, std::size_t ld_out) {
    Vec8d acc[TB][kVecPerTile] = {};
    for (std::size_t k = 0; k < d; ++k) {
        const double* wk = panel + k * kFeatureTile;
        Vec8d w[kVecPerTile];
        for (std::size_t v = 0; v < kVecPerTile; ++v) w[v] = load8(wk + v * kLanes);
        for (std::size_t t = 0; t < TB; ++t) {
            const Vec8d xv = Vec8d{} + x[t * d + k];
            for (std::size_t v = 0; v < kVecPerTile; ++v) acc[t][v] += xv * w[v];
        }
    }
    for (std::size_t t = 0; t < TB; ++t) {
        for (std::size_t v = 0; v < kVecPerTile; ++v) {
            std::memcpy(out + t * ld_out + v * kLanes, &acc[t][v], sizeof(Vec8d));
        }
    }
}

/// Pre-activations for features [f_begin, f_end) of n rows of centered input x
/// ([n x d_model] double). `out` is [n x (f_end - f_begin)]. Columns past the
/// last full feature tile are computed from a zero-padded panel, so every
/// feature goes through the same arithmetic.
inline void preactivations(std::span<const double> x, std::size_t n, const SaeWeights& sae, std::size_t f_begin,
                           std::size_t f_end, bool with_bias, std::span<double> out) {
    constexpr std::size_t FB = kFeatureTile;
    const std::size_t d = sae.d_model;
    const std::size_t width = f_end - f_begin;
    const std::size_t ldw = sae.d_sae;
    const float* W = sae.W_enc.data().data();
    std::vector<double> panel(d * FB);
    std::array<double, kTokenTile * FB> scratch{};
    for (std::size_t f = f_begin; f < f_end; f += FB) {
        const std::size_t fb = std::min(FB, f_end - f);
        for (std::size_t k = 0; k < d; ++k) {
            const float* src = W + k * ldw + f;
            double* dst = panel.data() + k * FB;
            for (std::size_t j = 0; j < fb; ++j) dst[j] = static_cast<double>(src[j]);
            for (std::size_t j = fb; j < FB; ++j) dst[j] = 0.0;
        }
        for (std::size_t t = 0; t < n;) {
            const std::size_t tb = n - t >= kTokenTile ? kTokenTile : 1;
            double* dst = out.data() + t * width + (f - f_begin);
            const bool direct = fb == FB;
            double* target = direct ? dst : scratch.data();
            const std::size_t ld = direct ? width : FB;
            if (tb == kTokenTile) {
                tile<kTokenTile>(x.data() + t * d, d, panel.data(), target, ld);
            } else {
                tile<1>(x.data() + t * d, d, panel.data(), target, ld);
            }
            if (!direct) {
                for (std::size_t r = 0; r < tb; ++r) {
                    for (std::size_t j = 0; j < fb; ++j) dst[r * width + j] = scratch[r * FB + j];
                }
            }
            t += tb;
        }
    }
    if (with_bias) {
        for (std::size_t t = 0; t < n; ++t) {
            for (std::size_t j = 0; j < width; ++j) {
                out[t * width + j] += static_cast<double>(sae.b_enc[f_begin + j]);
            }
        }
    }
}

/// x[t][k] = h[t][k] - b_dec[k] in double.
inline std::vector<double> center_rows(std::span<const float> h, std::size_t n, const SaeWeights& sae) {
    const std::size_t d = sae.d_model;
    std::vector<double> x(n * d);
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t k = 0; k < d; ++k) {
            x[t * d + k] = static_cast<double>(h[t * d + k]) - static_cast<double>(sae.b_dec[k]);
        }
    }
    return x;
}

inline constexpr std::size_t kTokenChunk = 256;

/// JumpReLU-encodes n centered rows into `out`, appending one sparse row each.
inline void encode_centered(std::span<const double> x, std::size_t n, const SaeWeights& sae, SparseLatents& out) {
    const std::size_t ds = sae.d_sae;
    std::vector<SparseLatents> per_row(n, SparseLatents(ds));
    std::vector<double> pre;
    for (std::size_t f0 = 0; f0 < ds; f0 += kFeatureBlock) {
        const std::size_t f1 = std::min(ds, f0 + kFeatureBlock);
        const std::size_t width = f1 - f0;
        pre.assign(n * width, 0.0);
        preactivations(x, n, sae, f0, f1, true, pre);
        for (std::size_t t = 0; t < n; ++t) {
            const double* a = pre.data() + t * width;
            for (std::size_t j = 0; j < width; ++j) {
                if (a[j] > static_cast<double>(sae.threshold[f0 + j])) {
                    per_row[t].push(static_cast<std::uint32_t>(f0 + j), static_cast<float>(a[j]));
                }
            }
        }
    }
    for (auto& r : per_row) {
        r.end_row();
        out.append(r);
    }
}

}  // namespace kernel

inline void check_input_width(std::size_t got, const SaeWeights& sae) {
    if (got != sae.d_model) {
        throw Error(ErrorKind::shape, "input has " + std::to_string(got) + " columns, SAE '" + sae.sae_id +
                                          "' expects d_model=" + std::to_string(sae.d_model));
    }
}

/// Encodes activation rows [n x d_model] (row-major) into sparse latents.
/// Rows are processed in chunks that may run in parallel; every row's result
/// is independent of the schedule.
inline SparseLatents encode_rows(std::span<const float> rows, std::size_t n, const SaeWeights& sae,
                                 std::size_t threads = 1) {
    if (rows.size() != n * sae.d_model) {
        throw Error(ErrorKind::shape, "encode_rows: buffer size does not match n x d_model");
    }
    const std::size_t chunks = (n + kernel::kTokenChunk - 1) / kernel::kTokenChunk;
    std::vector<SparseLatents> parts(chunks, SparseLatents(sae.d_sae));
    parallel_for_chunks(chunks, threads, [&](std::size_t c0, std::size_t c1) {
        for (std::size_t c = c0; c < c1; ++c) {
            const std::size_t t0 = c * kernel::kTokenChunk;
            const std::size_t m = std::min(kernel::kTokenChunk, n - t0);
            const auto x = kernel::center_rows(rows.subspan(t0 * sae.d_model, m * sae.d_model), m, sae);
            kernel::encode_centered(x, m, sae, parts[c]);
        }
    });
    SparseLatents out(sae.d_sae);
    for (const auto& p : parts) out.append(p);
    return out;
}

inline LatentVector encode(std::span<const float> h, const SaeWeights& sae) {
    check_input_width(h.size(), sae);
    const SparseLatents s = encode_rows(h, 1, sae);
    LatentVector z;
    z.values.assign(sae.d_sae, 0.0f);
    const auto idx = s.indices(0);
    const auto val = s.values(0);
    z.active.assign(idx.begin(), idx.end());
    for (std::size_t i = 0; i < idx.size(); ++i) z.values[idx[i]] = val[i];
    return z;
}

/// z W_dec + b_dec over the active set only.
inline std::vector<float> decode_sparse(std::span<const std::uint32_t> active, std::span<const float> values,
                                        const SaeWeights& sae) {
    const std::size_t d = sae.d_model;
    std::vector<double> acc(sae.b_dec.begin(), sae.b_dec.end());
    for (std::size_t i = 0; i < active.size(); ++i) {
        const auto f = active[i];
        if (f >= sae.d_sae) throw Error(ErrorKind::shape, "decode: feature index out of range");
        const double v = values[i];
        const auto row = sae.W_dec.row(f);
        for (std::size_t k = 0; k < d; ++k) acc[k] += v * static_cast<double>(row[k]);
    }
    return {acc.begin(), acc.end()};
}

inline std::vector<float> decode(const LatentVector& z, const SaeWeights& sae) {
    if (z.values.size() != sae.d_sae) {
        throw Error(ErrorKind::shape, "decode: latent has " + std::to_string(z.values.size()) +
                                          " entries, SAE expects d_sae=" + std::to_string(sae.d_sae));
    }
    std::vector<float> active_values;
    active_values.reserve(z.active.size());
    for (auto f : z.active) active_values.push_back(z.values.at(f));
    return decode_sparse(z.active, active_values, sae);
}

/// One SparseLatents per record, rows aligned with the record's tokens.
inline std::vector<SparseLatents> encode_bundle(const ActivationBundle& bundle, const SaeWeights& sae,
                                                std::size_t threads = 1) {
    if (bundle.d_model != sae.d_model) {
        throw Error(ErrorKind::shape, "bundle d_model=" + std::to_string(bundle.d_model) + " but SAE '" +
                                          sae.sae_id + "' has d_model=" + std::to_string(sae.d_model));
    }
    std::vector<SparseLatents> out;
    out.reserve(bundle.records.size());
    for (const auto& rec : bundle.records) {
        out.push_back(encode_rows(rec.data.data(), rec.num_tokens(), sae, threads));
    }
    return out;
}

}  // namespace saedrift

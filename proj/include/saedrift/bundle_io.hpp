// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

// On-disk formats for activation bundles and frozen SAE weights.
//
// Activation bundle directory:
//   manifest.json        format_version, model_id, layer, step, eval_set_id,
//                        tap, d_model, records[{id, num_tokens, file, sha256}]
//   records/<id>.f32     [num_tokens x d_model] row-major little-endian binary32
//
// SAE bundle directory:
//   sae_manifest.json    format_version, sae_id, layer, d_model, d_sae, tap,
//                        files{<tensor>: {file, sha256}} (sha256 optional on read)
//   W_enc.f32 [d_model x d_sae], b_enc.f32 [d_sae], W_dec.f32 [d_sae x d_model],
//   b_dec.f32 [d_model], threshold.f32 [d_sae]

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "saedrift/error.hpp"
#include "saedrift/matrix.hpp"
#include "saedrift/sha256.hpp"

namespace saedrift {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kBundleFormatVersion = 1;

struct ActivationRecord {
    std::string id;
    MatrixF data;  // [num_tokens x d_model]

    std::size_t num_tokens() const noexcept { return data.rows(); }
};

struct ActivationBundle {
    std::string model_id;
    int layer = 0;
    std::int64_t step = 0;  // training samples seen; 0 is the base snapshot
    std::string eval_set_id;
    std::string tap;  // free-text description of the capture point
    std::size_t d_model = 0;
    std::vector<ActivationRecord> records;

    std::size_t total_tokens() const noexcept {
        std::size_t n = 0;
        for (const auto& r : records) n += r.num_tokens();
        return n;
    }
};

struct SaeWeights {
    std::string sae_id;
    int layer = 0;
    std::size_t d_model = 0;
    std::size_t d_sae = 0;
    std::string tap;
    MatrixF W_enc;  // [d_model x d_sae]
    std::vector<float> b_enc;
    MatrixF W_dec;  // [d_sae x d_model]
    std::vector<float> b_dec;
    std::vector<float> threshold;
};

namespace detail {

inline void require(bool ok, ErrorKind kind, const std::string& msg) {
    if (!ok) throw Error(kind, msg);
}

inline bool all_finite(std::span<const float> v) {
    for (float x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

inline bool valid_record_id(const std::string& id) {
    if (id.empty() || id == "." || id == "..") return false;
    for (char c : id) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
                        c == '_' || c == '-' || c == '.';
        if (!ok) return false;
    }
    return true;
}

inline std::uint32_t to_little_endian(std::uint32_t v) {
    if constexpr (std::endian::native == std::endian::big) {
        v = ((v & 0xFF) << 24) | ((v & 0xFF00) << 8) | ((v >> 8) & 0xFF00) | (v >> 24);
    }
    return v;
}

// Writes the tensor as little-endian binary32 and returns the sha256 of the
// bytes written.
inline std::string write_f32_file(const fs::path& path, std::span<const float> values) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot create " + path.string());
    Sha256 hash;
    constexpr std::size_t kChunk = std::size_t{1} << 20;
    std::vector<std::uint32_t> buf;
    for (std::size_t off = 0; off < values.size(); off += kChunk) {
        const std::size_t n = std::min(kChunk, values.size() - off);
        buf.resize(n);
        for (std::size_t i = 0; i < n; ++i) buf[i] = to_little_endian(std::bit_cast<std::uint32_t>(values[off + i]));
        const auto bytes = std::as_bytes(std::span(buf));
        hash.update(bytes);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    out.close();
    if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
    return hash.hex_digest();
}

// Streams a raw tensor file straight into `out`, returning the sha256 of the
// bytes read. The caller has already checked the file length.
inline std::string read_f32_into(const fs::path& path, std::span<float> out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::missing_file, "cannot open " + path.string());
    Sha256 hash;
    auto* dst = reinterpret_cast<char*>(out.data());
    const std::size_t total = out.size() * 4;
    constexpr std::size_t kChunk = std::size_t{1} << 22;
    for (std::size_t off = 0; off < total; off += kChunk) {
        const std::size_t n = std::min(kChunk, total - off);
        in.read(dst + off, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n) {
            throw Error(ErrorKind::io, "short read on " + path.string());
        }
        hash.update(std::as_bytes(std::span(dst + off, n)));
    }
    if constexpr (std::endian::native == std::endian::big) {
        for (float& x : out) x = std::bit_cast<float>(to_little_endian(std::bit_cast<std::uint32_t>(x)));
    }
    return hash.hex_digest();
}

inline std::uintmax_t existing_file_size(const fs::path& path) {
    std::error_code ec;
    if (!fs::is_regular_file(path, ec)) {
        throw Error(ErrorKind::missing_file, "missing file " + path.string());
    }
    return fs::file_size(path);
}

inline void write_json_file(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot create " + path.string());
    out << j.dump(2) << '\n';
    out.close();
    if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

inline json read_json_file(const fs::path& path) {
    std::error_code ec;
    if (!fs::is_regular_file(path, ec)) {
        throw Error(ErrorKind::missing_file, "missing file " + path.string());
    }
    std::ifstream in(path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::schema, path.string() + ": " + e.what());
    }
}

template <typename T>
T manifest_field(const json& j, const char* key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) {
        throw Error(ErrorKind::schema, where + ": missing field '" + key + "'");
    }
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorKind::schema, where + ": field '" + key + "' has the wrong type");
    }
}

inline std::size_t positive_size(const json& j, const char* key, const std::string& where) {
    const auto& v = j.contains(key) ? j.at(key) : json();
    if (!v.is_number_integer() || v.get<std::int64_t>() <= 0) {
        throw Error(ErrorKind::schema, where + ": field '" + std::string(key) + "' must be a positive integer");
    }
    return v.get<std::size_t>();
}

}  // namespace detail

/// Checks every bundle invariant that does not involve a second bundle.
inline void validate_bundle(const ActivationBundle& bundle) {
    using detail::require;
    require(bundle.d_model > 0, ErrorKind::invariant, "bundle d_model must be positive");
    require(bundle.layer >= 0, ErrorKind::invariant, "bundle layer must be nonnegative");
    std::set<std::string> seen;
    for (const auto& rec : bundle.records) {
        require(detail::valid_record_id(rec.id), ErrorKind::invariant,
                "record id '" + rec.id + "' must be nonempty and use only [A-Za-z0-9._-]");
        require(seen.insert(rec.id).second, ErrorKind::invariant, "duplicate record id '" + rec.id + "'");
        require(rec.num_tokens() >= 1, ErrorKind::invariant, "record '" + rec.id + "' has no tokens");
        require(rec.data.cols() == bundle.d_model, ErrorKind::shape,
                "record '" + rec.id + "' has " + std::to_string(rec.data.cols()) + " columns, expected d_model=" +
                    std::to_string(bundle.d_model));
        require(detail::all_finite(rec.data.data()), ErrorKind::non_finite,
                "record '" + rec.id + "' contains NaN or Inf");
    }
}

/// True iff both bundles have the same record-id sequence and per-record token counts.
inline bool aligned(const ActivationBundle& a, const ActivationBundle& b) noexcept {
    if (a.records.size() != b.records.size()) return false;
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        if (a.records[i].id != b.records[i].id) return false;
        if (a.records[i].num_tokens() != b.records[i].num_tokens()) return false;
    }
    return true;
}

inline void check_aligned(const ActivationBundle& a, const ActivationBundle& b) {
    if (a.records.size() != b.records.size()) {
        throw Error(ErrorKind::misaligned, "bundles have " + std::to_string(a.records.size()) + " and " +
                                               std::to_string(b.records.size()) + " records");
    }
    for (std::size_t i = 0; i < a.records.size(); ++i) {
        const auto& ra = a.records[i];
        const auto& rb = b.records[i];
        if (ra.id != rb.id) {
            throw Error(ErrorKind::misaligned,
                        "record " + std::to_string(i) + " id differs: '" + ra.id + "' vs '" + rb.id + "'");
        }
        if (ra.num_tokens() != rb.num_tokens()) {
            throw Error(ErrorKind::misaligned, "record '" + ra.id + "' token count differs: " +
                                                   std::to_string(ra.num_tokens()) + " vs " +
                                                   std::to_string(rb.num_tokens()));
        }
    }
}

inline void write_activation_bundle(const ActivationBundle& bundle, const fs::path& dir) {
    validate_bundle(bundle);
    std::error_code ec;
    fs::create_directories(dir / "records", ec);
    if (ec) throw Error(ErrorKind::io, "cannot create " + (dir / "records").string() + ": " + ec.message());

    json records = json::array();
    for (const auto& rec : bundle.records) {
        const std::string file = "records/" + rec.id + ".f32";
        const std::string digest = detail::write_f32_file(dir / file, rec.data.data());
        records.push_back({{"id", rec.id}, {"num_tokens", rec.num_tokens()}, {"file", file}, {"sha256", digest}});
    }
    // Manifest goes last: a directory without one is never a valid bundle.
    json manifest = {
        {"format_version", kBundleFormatVersion},
        {"model_id", bundle.model_id},
        {"layer", bundle.layer},
        {"step", bundle.step},
        {"eval_set_id", bundle.eval_set_id},
        {"tap", bundle.tap},
        {"d_model", bundle.d_model},
        {"records", std::move(records)},
    };
    detail::write_json_file(dir / "manifest.json", manifest);
}

/// Manifest-level view of a bundle; records are loaded one at a time.
class BundleReader {
public:
    struct Entry {
        std::string id;
        std::size_t num_tokens = 0;
        std::string file;
        std::string sha256;
    };

    explicit BundleReader(fs::path dir) : dir_(std::move(dir)) {
        const auto where = (dir_ / "manifest.json").string();
        const json m = detail::read_json_file(dir_ / "manifest.json");
        const int version = detail::manifest_field<int>(m, "format_version", where);
        if (version != kBundleFormatVersion) {
            throw Error(ErrorKind::schema, where + ": unsupported format_version " + std::to_string(version));
        }
        header_.model_id = detail::manifest_field<std::string>(m, "model_id", where);
        header_.layer = detail::manifest_field<int>(m, "layer", where);
        header_.step = detail::manifest_field<std::int64_t>(m, "step", where);
        header_.eval_set_id = detail::manifest_field<std::string>(m, "eval_set_id", where);
        header_.tap = m.value("tap", std::string{});
        header_.d_model = detail::positive_size(m, "d_model", where);
        const auto recs = detail::manifest_field<json>(m, "records", where);
        if (!recs.is_array()) throw Error(ErrorKind::schema, where + ": 'records' must be an array");
        std::set<std::string> seen;
        for (const auto& r : recs) {
            Entry e;
            e.id = detail::manifest_field<std::string>(r, "id", where);
            e.num_tokens = detail::positive_size(r, "num_tokens", where);
            e.file = detail::manifest_field<std::string>(r, "file", where);
            e.sha256 = detail::manifest_field<std::string>(r, "sha256", where);
            if (!seen.insert(e.id).second) {
                throw Error(ErrorKind::invariant, where + ": duplicate record id '" + e.id + "'");
            }
            entries_.push_back(std::move(e));
        }
    }

    const fs::path& dir() const noexcept { return dir_; }
    /// Bundle metadata with an empty record list.
    const ActivationBundle& header() const noexcept { return header_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }

    ActivationRecord read_record(std::size_t index) const {
        const Entry& e = entries_.at(index);
        const auto size = detail::existing_file_size(dir_ / e.file);
        const std::size_t d = header_.d_model;
        const std::size_t expected = e.num_tokens * d * 4;
        if (size != expected) {
            std::ostringstream msg;
            msg << "record '" << e.id << "': file has " << size << " bytes, expected " << expected
                << " for [" << e.num_tokens << " x " << d << "]";
            if (size % (4 * e.num_tokens) == 0) {
                msg << " (length implies " << size / (4 * e.num_tokens) << " columns)";
            }
            throw Error(ErrorKind::shape, msg.str());
        }
        ActivationRecord rec{e.id, MatrixF(e.num_tokens, d)};
        if (detail::read_f32_into(dir_ / e.file, rec.data.data()) != e.sha256) {
            throw Error(ErrorKind::hash_mismatch, "record '" + e.id + "': sha256 mismatch");
        }
        if (!detail::all_finite(rec.data.data())) {
            throw Error(ErrorKind::non_finite, "record '" + e.id + "' contains NaN or Inf");
        }
        return rec;
    }

private:
    fs::path dir_;
    ActivationBundle header_;
    std::vector<Entry> entries_;
};

inline ActivationBundle read_activation_bundle(const fs::path& dir) {
    BundleReader reader(dir);
    ActivationBundle bundle = reader.header();
    bundle.records.reserve(reader.entries().size());
    for (std::size_t i = 0; i < reader.entries().size(); ++i) bundle.records.push_back(reader.read_record(i));
    return bundle;
}

inline void validate_sae(const SaeWeights& w) {
    using detail::require;
    const std::size_t dm = w.d_model;
    const std::size_t ds = w.d_sae;
    require(dm > 0 && ds > 0, ErrorKind::invariant, "SAE dimensions must be positive");
    require(ds > dm, ErrorKind::invariant,
            "SAE must be overcomplete: d_sae=" + std::to_string(ds) + " <= d_model=" + std::to_string(dm));
    require(w.W_enc.rows() == dm && w.W_enc.cols() == ds, ErrorKind::shape, "W_enc must be [d_model x d_sae]");
    require(w.W_dec.rows() == ds && w.W_dec.cols() == dm, ErrorKind::shape, "W_dec must be [d_sae x d_model]");
    require(w.b_enc.size() == ds, ErrorKind::shape, "b_enc must have d_sae entries");
    require(w.b_dec.size() == dm, ErrorKind::shape, "b_dec must have d_model entries");
    require(w.threshold.size() == ds, ErrorKind::shape, "threshold must have d_sae entries");
    require(detail::all_finite(w.W_enc.data()) && detail::all_finite(w.W_dec.data()) &&
                detail::all_finite(w.b_enc) && detail::all_finite(w.b_dec) && detail::all_finite(w.threshold),
            ErrorKind::non_finite, "SAE weights contain NaN or Inf");
    for (std::size_t f = 0; f < ds; ++f) {
        require(w.threshold[f] >= 0.0f, ErrorKind::invariant,
                "threshold[" + std::to_string(f) + "] = " + std::to_string(w.threshold[f]) + " is negative");
    }
    for (std::size_t f = 0; f < ds; ++f) {
        double sq = 0.0;
        for (float x : w.W_dec.row(f)) sq += static_cast<double>(x) * x;
        require(sq > 0.0, ErrorKind::invariant, "decoder row " + std::to_string(f) + " has zero norm");
    }
}

inline void write_sae_weights(const SaeWeights& w, const fs::path& dir) {
    validate_sae(w);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
    json files = json::object();
    auto put = [&](const char* name, std::span<const float> values) {
        const std::string file = std::string(name) + ".f32";
        files[name] = {{"file", file}, {"sha256", detail::write_f32_file(dir / file, values)}};
    };
    put("W_enc", w.W_enc.data());
    put("b_enc", w.b_enc);
    put("W_dec", w.W_dec.data());
    put("b_dec", w.b_dec);
    put("threshold", w.threshold);
    json manifest = {
        {"format_version", kBundleFormatVersion},
        {"sae_id", w.sae_id},
        {"layer", w.layer},
        {"d_model", w.d_model},
        {"d_sae", w.d_sae},
        {"tap", w.tap},
        {"files", std::move(files)},
    };
    detail::write_json_file(dir / "sae_manifest.json", manifest);
}

/// Reads the SAE manifest only (cheap; used for cache keys and width lookups).
inline SaeWeights read_sae_header(const fs::path& dir) {
    const auto where = (dir / "sae_manifest.json").string();
    const json m = detail::read_json_file(dir / "sae_manifest.json");
    const int version = detail::manifest_field<int>(m, "format_version", where);
    if (version != kBundleFormatVersion) {
        throw Error(ErrorKind::schema, where + ": unsupported format_version " + std::to_string(version));
    }
    SaeWeights w;
    w.sae_id = detail::manifest_field<std::string>(m, "sae_id", where);
    w.layer = detail::manifest_field<int>(m, "layer", where);
    w.d_model = detail::positive_size(m, "d_model", where);
    w.d_sae = detail::positive_size(m, "d_sae", where);
    w.tap = m.value("tap", std::string{});
    return w;
}

inline SaeWeights read_sae_weights(const fs::path& dir) {
    SaeWeights w = read_sae_header(dir);
    const json m = detail::read_json_file(dir / "sae_manifest.json");
    const json files = m.value("files", json::object());
    auto load = [&](const char* name, std::size_t count, std::span<float> out) {
        std::string file = std::string(name) + ".f32";
        std::string digest;
        if (files.contains(name)) {
            file = files[name].value("file", file);
            digest = files[name].value("sha256", std::string{});
        }
        const auto size = detail::existing_file_size(dir / file);
        if (size != count * 4) {
            throw Error(ErrorKind::shape, std::string(name) + ": file has " + std::to_string(size) +
                                              " bytes, expected " + std::to_string(count * 4));
        }
        if (detail::read_f32_into(dir / file, out) != digest && !digest.empty()) {
            throw Error(ErrorKind::hash_mismatch, std::string(name) + ": sha256 mismatch");
        }
    };
    const std::size_t dm = w.d_model;
    const std::size_t ds = w.d_sae;
    w.W_enc = MatrixF(dm, ds);
    w.b_enc.resize(ds);
    w.W_dec = MatrixF(ds, dm);
    w.b_dec.resize(dm);
    w.threshold.resize(ds);
    load("W_enc", dm * ds, w.W_enc.data());
    load("b_enc", ds, w.b_enc);
    load("W_dec", ds * dm, w.W_dec.data());
    load("b_dec", dm, w.b_dec);
    load("threshold", ds, w.threshold);
    validate_sae(w);
    return w;
}

}  // namespace saedrift

// Copyright 2026 The saedrift Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <functional>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "saedrift/bundle_io.hpp"
#include "saedrift/error.hpp"
#include "saedrift/rng.hpp"
#include "saedrift/sae.hpp"
#include "saedrift/sha256.hpp"
#include "saedrift/synth.hpp"

using namespace saedrift;
namespace fs = std::filesystem;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorKind::internal;
}

std::string message_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    return {};
}

ActivationBundle random_bundle(std::size_t d, std::size_t records, std::uint64_t seed) {
    synth::BundleShape s;
    s.d_model = d;
    s.records = records;
    s.min_tokens = 1;
    s.max_tokens = 9;
    return synth::make_activation_bundle(s, seed);
}

void flip_bit(const fs::path& p, std::size_t byte, int bit) {
    std::fstream f(p, std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(static_cast<std::streamoff>(byte));
    char c;
    f.read(&c, 1);
    c = static_cast<char>(c ^ (1 << bit));
    f.seekp(static_cast<std::streamoff>(byte));
    f.write(&c, 1);
}

}  // namespace

// ------------------------------------------------------------------ rng

TEST(Rng, MatchesReferenceVectors) {
    SplitMix64 rng(42);
    std::size_t checked = 0;
    for (const auto& line : oracle::read_lines(fs::path(SAEDRIFT_GOLDEN_DIR) / "splitmix64_seed42.txt")) {
        std::istringstream ss(line);
        std::string kind;
        ss >> kind;
        if (kind == "u64") {
            std::uint64_t want;
            ss >> want;
            EXPECT_EQ(rng.next_u64(), want);
        } else if (kind == "uniform") {
            double want;
            ss >> want;
            EXPECT_EQ(rng.uniform(), want);
        } else if (kind == "normal") {
            double want;
            ss >> want;
            EXPECT_NEAR(rng.normal(), want, 1e-12);
        } else if (kind == "bounded") {
            std::uint64_t n, want;
            ss >> n >> want;
            EXPECT_EQ(rng.bounded(n), want);
        }
        ++checked;
    }
    EXPECT_EQ(checked, 20u);
}

TEST(Rng, SubsampleGolden) {
    const auto lines = oracle::read_lines(fs::path(SAEDRIFT_GOLDEN_DIR) / "subsample_n5000_k2000_seed42.txt");
    const auto idx = sample_without_replacement(5000, 2000, 42);
    ASSERT_EQ(idx.size(), lines.size());
    for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(idx[i], std::stoull(lines[i]));
}

TEST(Rng, SubsampleProperties) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto idx = sample_without_replacement(300, 77, seed);
        ASSERT_EQ(idx.size(), 77u);
        EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
        EXPECT_EQ(std::adjacent_find(idx.begin(), idx.end()), idx.end());
        EXPECT_LT(idx.back(), 300u);
    }
    EXPECT_EQ(sample_without_replacement(5, 10, 1), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
    EXPECT_EQ(sample_strided(10, 4), (std::vector<std::size_t>{0, 2, 5, 7}));
}

TEST(Sha256, KnownDigests) {
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

// ------------------------------------------------------------------ bundle-io

TEST(BundleIo, TwoByThreeRecordIs24Bytes) {
    oracle::TempDir tmp("bundle");
    ActivationBundle b;
    b.model_id = "m";
    b.layer = 7;
    b.eval_set_id = "e";
    b.d_model = 3;
    b.records.push_back({"r0", MatrixF(2, 3, {1, 2, 3, 4, 5, 6})});
    write_activation_bundle(b, tmp.path());
    EXPECT_EQ(fs::file_size(tmp / "records/r0.f32"), 24u);
    const json m = json::parse(oracle::read_file(tmp / "manifest.json"));
    EXPECT_EQ(m["format_version"], 1);
    EXPECT_EQ(m["records"][0]["num_tokens"], 2);
    EXPECT_EQ(m["records"][0]["file"], "records/r0.f32");
    EXPECT_EQ(m["records"][0]["sha256"], sha256_file((tmp / "records/r0.f32").string()));
    // little-endian row-major binary32
    const std::string bytes = oracle::read_file(tmp / "records/r0.f32");
    float first;
    std::memcpy(&first, bytes.data(), 4);
    EXPECT_EQ(first, 1.0f);
    EXPECT_EQ(static_cast<unsigned char>(bytes[3]), 0x3f);
}

TEST(BundleIo, EmptyRecordList) {
    oracle::TempDir tmp("bundle");
    ActivationBundle b;
    b.model_id = "m";
    b.eval_set_id = "e";
    b.d_model = 4;
    write_activation_bundle(b, tmp.path());
    const auto r = read_activation_bundle(tmp.path());
    EXPECT_TRUE(r.records.empty());
    EXPECT_EQ(r.d_model, 4u);
}

TEST(BundleIo, RoundTripIsBitExact) {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        oracle::TempDir tmp("bundle");
        auto b = random_bundle(3 + seed * 7, seed + 1, seed);
        b.step = static_cast<std::int64_t>(seed * 400);
        write_activation_bundle(b, tmp.path());
        const auto r = read_activation_bundle(tmp.path());
        ASSERT_EQ(r.records.size(), b.records.size());
        EXPECT_EQ(r.step, b.step);
        EXPECT_EQ(r.model_id, b.model_id);
        for (std::size_t i = 0; i < b.records.size(); ++i) {
            EXPECT_EQ(r.records[i].id, b.records[i].id);
            const auto& x = r.records[i].data.storage();
            const auto& y = b.records[i].data.storage();
            ASSERT_EQ(x.size(), y.size());
            EXPECT_EQ(std::memcmp(x.data(), y.data(), x.size() * 4), 0);
        }
    }
}

TEST(BundleIo, LargeShapeRoundTrip) {
    oracle::TempDir tmp("bundle");
    ActivationBundle b;
    b.model_id = "m";
    b.eval_set_id = "e";
    b.d_model = 1152;
    MatrixF data(512, 1152);
    SplitMix64 rng(3);
    for (auto& x : data.storage()) x = static_cast<float>(rng.normal());
    b.records.push_back({"big", data});
    write_activation_bundle(b, tmp.path());
    EXPECT_EQ(read_activation_bundle(tmp.path()).records[0].data, data);
}

TEST(BundleIo, TamperedByteNamesRecord) {
    oracle::TempDir tmp("bundle");
    write_activation_bundle(random_bundle(5, 3, 9), tmp.path());
    flip_bit(tmp / "records/r1.f32", 5, 2);
    const auto msg = message_of([&] { read_activation_bundle(tmp.path()); });
    EXPECT_NE(msg.find("'r1'"), std::string::npos) << msg;
    EXPECT_EQ(kind_of([&] { read_activation_bundle(tmp.path()); }), ErrorKind::hash_mismatch);
}

TEST(BundleIo, EverySingleBitFlipDetected) {
    oracle::TempDir tmp("bundle");
    ActivationBundle b;
    b.model_id = "m";
    b.eval_set_id = "e";
    b.d_model = 2;
    b.records.push_back({"r", MatrixF(1, 2, {0.25f, -3.0f})});
    write_activation_bundle(b, tmp.path());
    for (std::size_t byte = 0; byte < 8; ++byte) {
        for (int bit = 0; bit < 8; ++bit) {
            flip_bit(tmp / "records/r.f32", byte, bit);
            EXPECT_EQ(kind_of([&] { read_activation_bundle(tmp.path()); }), ErrorKind::hash_mismatch);
            flip_bit(tmp / "records/r.f32", byte, bit);
        }
    }
    EXPECT_NO_THROW(read_activation_bundle(tmp.path()));
}

TEST(BundleIo, LengthImpliesWrongColumnCount) {
    oracle::TempDir tmp("bundle");
    ActivationBundle b;
    b.model_id = "m";
    b.eval_set_id = "e";
    b.d_model = 1153;
    b.records.push_back({"r0", MatrixF(2, 1153)});
    write_activation_bundle(b, tmp.path());
    json m = json::parse(oracle::read_file(tmp / "manifest.json"));
    m["d_model"] = 1152;
    std::ofstream(tmp / "manifest.json") << m.dump();
    const auto msg = message_of([&] { read_activation_bundle(tmp.path()); });
    EXPECT_NE(msg.find("length implies 1153 columns"), std::string::npos) << msg;
    EXPECT_EQ(kind_of([&] { read_activation_bundle(tmp.path()); }), ErrorKind::shape);
}

TEST(BundleIo, DistinctErrorKinds) {
    oracle::TempDir tmp("bundle");
    EXPECT_EQ(kind_of([&] { read_activation_bundle(tmp / "nothing"); }), ErrorKind::missing_file);

    write_activation_bundle(random_bundle(4, 2, 1), tmp / "a");
    fs::remove(tmp / "a/records/r0.f32");
    EXPECT_EQ(kind_of([&] { read_activation_bundle(tmp / "a"); }), ErrorKind::missing_file);

    // NaN written directly with a matching hash
    ActivationBundle b;
    b.model_id = "m";
    b.eval_set_id = "e";
    b.d_model = 2;
    b.records.push_back({"r0", MatrixF(1, 2, {1.0f, 2.0f})});
    write_activation_bundle(b, tmp / "n");
    const float nan_row[2] = {std::numeric_limits<float>::quiet_NaN(), 1.0f};
    const std::string digest = detail::write_f32_file(tmp / "n/records/r0.f32", nan_row);
    json m = json::parse(oracle::read_file(tmp / "n/manifest.json"));
    m["records"][0]["sha256"] = digest;
    std::ofstream(tmp / "n/manifest.json") << m.dump();
    EXPECT_EQ(kind_of([&] { read_activation_bundle(tmp / "n"); }), ErrorKind::non_finite);

    std::ofstream(tmp / "n/manifest.json") << "{ not json";
    EXPECT_EQ(kind_of([&] { read_activation_bundle(tmp / "n"); }), ErrorKind::schema);
}

TEST(BundleIo, InvalidBundleRejectedBeforeWriting) {
    oracle::TempDir tmp("bundle");
    ActivationBundle b;
    b.model_id = "m";
    b.eval_set_id = "e";
    b.d_model = 2;
    b.records.push_back({"r0", MatrixF(1, 2, {1, 2})});
    b.records.push_back({"r0", MatrixF(1, 2, {1, 2})});
    EXPECT_EQ(kind_of([&] { write_activation_bundle(b, tmp / "dup"); }), ErrorKind::invariant);
    EXPECT_FALSE(fs::exists(tmp / "dup"));
    b.records.pop_back();
    b.records[0].data(0, 1) = std::numeric_limits<float>::infinity();
    EXPECT_EQ(kind_of([&] { write_activation_bundle(b, tmp / "inf"); }), ErrorKind::non_finite);
    EXPECT_FALSE(fs::exists(tmp / "inf"));
}

TEST(BundleIo, AlignmentCheck) {
    const auto a = random_bundle(4, 3, 5);
    auto b = a;
    EXPECT_TRUE(aligned(a, b));
    EXPECT_NO_THROW(check_aligned(a, b));
    b.records[1].data = MatrixF(b.records[1].num_tokens() + 1, 4);
    EXPECT_FALSE(aligned(a, b));
    EXPECT_EQ(kind_of([&] { check_aligned(a, b); }), ErrorKind::misaligned);
    auto c = a;
    c.records[2].id = "other";
    EXPECT_FALSE(aligned(a, c));
    auto d = a;
    d.records.pop_back();
    EXPECT_FALSE(aligned(a, d));
}

TEST(SaeIo, FileSizesAndRoundTrip) {
    oracle::TempDir tmp("sae");
    SaeWeights w;
    w.sae_id = "tiny";
    w.d_model = 2;
    w.d_sae = 3;
    w.W_enc = MatrixF(2, 3, {1, -1, 0.5f, 0, 0, 0});
    w.b_enc = {0, 0, 0};
    w.W_dec = MatrixF(3, 2, {1, 0, 0, 1, 1, 1});
    w.b_dec = {0, 0};
    w.threshold = {0.6f, 0.6f, 0.6f};
    write_sae_weights(w, tmp.path());
    EXPECT_EQ(fs::file_size(tmp / "W_enc.f32"), 24u);
    EXPECT_EQ(fs::file_size(tmp / "threshold.f32"), 12u);
    const auto r = read_sae_weights(tmp.path());
    EXPECT_EQ(r.W_enc, w.W_enc);
    EXPECT_EQ(r.W_dec, w.W_dec);
    EXPECT_EQ(r.threshold, w.threshold);
    EXPECT_EQ(r.sae_id, "tiny");

    const auto big = synth::make_sae(16, 64, 3, 13);
    write_sae_weights(big, tmp / "big");
    const auto rb = read_sae_weights(tmp / "big");
    EXPECT_EQ(rb.W_enc, big.W_enc);
    EXPECT_EQ(rb.b_dec, big.b_dec);
    EXPECT_EQ(rb.layer, 13);
}

TEST(SaeIo, Validation) {
    auto w = synth::make_sae(2, 3, 1);
    w.threshold[1] = -0.5f;
    EXPECT_EQ(kind_of([&] { validate_sae(w); }), ErrorKind::invariant);
    w = synth::make_sae(2, 3, 1);
    w.W_dec(2, 0) = 0.0f;
    w.W_dec(2, 1) = 0.0f;
    EXPECT_EQ(kind_of([&] { validate_sae(w); }), ErrorKind::invariant);
    w = synth::make_sae(2, 3, 1);
    w.b_enc.pop_back();
    EXPECT_EQ(kind_of([&] { validate_sae(w); }), ErrorKind::shape);

    oracle::TempDir tmp("sae");
    write_sae_weights(synth::make_sae(2, 3, 1), tmp.path());
    // A negative threshold on disk is caught on read as well.
    const float bad[3] = {0.1f, -0.5f, 0.2f};
    const auto digest = detail::write_f32_file(tmp / "threshold.f32", bad);
    json m = json::parse(oracle::read_file(tmp / "sae_manifest.json"));
    m["files"]["threshold"]["sha256"] = digest;
    std::ofstream(tmp / "sae_manifest.json") << m.dump();
    EXPECT_EQ(kind_of([&] { read_sae_weights(tmp.path()); }), ErrorKind::invariant);
}

// ------------------------------------------------------------------ sae-core

namespace {

SaeWeights tiny_sae() {
    SaeWeights w;
    w.sae_id = "tiny";
    w.d_model = 2;
    w.d_sae = 3;
    w.W_enc = MatrixF(2, 3, {1, -1, 0.5f, 0, 0, 0});
    w.b_enc = {0, 0, 0};
    w.W_dec = MatrixF(3, 2, {1, 0, 0, 1, 1, 1});
    w.b_dec = {0, 0};
    w.threshold = {0.6f, 0.6f, 0.6f};
    return w;
}

}  // namespace

TEST(SaeCore, HandEvaluatedExample) {
    const float h[2] = {1, 0};
    const auto z = encode(h, tiny_sae());
    EXPECT_EQ(z.values, (std::vector<float>{1, 0, 0}));
    EXPECT_EQ(z.active, (std::vector<std::uint32_t>{0}));
}

TEST(SaeCore, InputAtDecoderBiasIsSilent) {
    auto w = synth::make_sae(6, 20, 4);
    std::fill(w.b_enc.begin(), w.b_enc.end(), 0.0f);
    std::fill(w.threshold.begin(), w.threshold.end(), 0.1f);
    const auto z = encode(w.b_dec, w);
    EXPECT_TRUE(z.active.empty());
    for (float v : z.values) EXPECT_EQ(v, 0.0f);
}

TEST(SaeCore, ThresholdIsStrict) {
    auto w = tiny_sae();
    w.threshold = {1.0f, 0.6f, 0.6f};
    const float h[2] = {1, 0};
    EXPECT_TRUE(encode(h, w).active.empty());  // a_0 == tau_0
}

TEST(SaeCore, DominatingThresholdGivesZeros) {
    auto w = synth::make_sae(8, 40, 2);
    auto b = random_bundle(8, 4, 3);
    std::fill(w.threshold.begin(), w.threshold.end(), 1e6f);
    for (const auto& codes : encode_bundle(b, w)) EXPECT_EQ(codes.nnz(), 0u);
}

TEST(SaeCore, EncodeMatchesDenseOracle) {
    const auto w = synth::make_sae(12, 300, 5);
    SplitMix64 rng(11);
    for (int t = 0; t < 50; ++t) {
        std::vector<float> h(12);
        for (auto& x : h) x = static_cast<float>(0.4 * rng.normal());
        const auto z = encode(h, w);
        const auto ref = oracle::encode(std::vector<double>(h.begin(), h.end()), w);
        for (std::size_t f = 0; f < w.d_sae; ++f) {
            EXPECT_EQ(z.values[f] > 0, ref[f] > 0) << f;
            EXPECT_NEAR(z.values[f], ref[f], 1e-6);
        }
        for (auto f : z.active) EXPECT_GT(z.values[f], 0.0f);
    }
}

TEST(SaeCore, DecodeLinearity) {
    const auto w = synth::make_sae(5, 11, 6);
    LatentVector zero{std::vector<float>(11, 0.0f), {}};
    EXPECT_EQ(decode(zero, w), w.b_dec);
    LatentVector one{std::vector<float>(11, 0.0f), {4}};
    one.values[4] = 2.5f;
    const auto h = decode(one, w);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_FLOAT_EQ(h[k], 2.5f * w.W_dec(4, k) + w.b_dec[k]);
}

TEST(SaeCore, SparseDecodeMatchesDense) {
    const auto w = synth::make_sae(16, 4096, 8);
    SplitMix64 rng(2);
    for (int t = 0; t < 5; ++t) {
        LatentVector z{std::vector<float>(4096, 0.0f), {}};
        std::vector<double> dense(4096, 0.0);
        for (auto f : sample_without_replacement(4096, 60, rng.next_u64())) {
            z.active.push_back(static_cast<std::uint32_t>(f));
            z.values[f] = static_cast<float>(rng.uniform(0.1, 2.0));
            dense[f] = z.values[f];
        }
        const auto got = decode(z, w);
        const auto ref = oracle::decode(dense, w);
        for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(got[k], ref[k], 1e-5 * std::max(1.0, std::abs(ref[k])));
    }
}

TEST(SaeCore, DimensionMismatch) {
    const auto w = synth::make_sae(4, 9, 1);
    const float h[3] = {1, 2, 3};
    EXPECT_EQ(kind_of([&] { encode(h, w); }), ErrorKind::shape);
    LatentVector z{std::vector<float>(8, 0.0f), {}};
    EXPECT_EQ(kind_of([&] { decode(z, w); }), ErrorKind::shape);
    EXPECT_EQ(kind_of([&] { encode_bundle(random_bundle(5, 1, 1), w); }), ErrorKind::shape);
}

TEST(SaeCore, BundleEncodingMatchesScalarRowByRow) {
    const auto w = synth::make_sae(10, 700, 12);
    synth::BundleShape s;
    s.d_model = 10;
    s.records = 3;
    s.min_tokens = 200;
    s.max_tokens = 400;  // spans several token chunks
    s.scale = 0.3;
    const auto b = synth::make_activation_bundle(s, 4);
    const auto serial = encode_bundle(b, w, 1);
    const auto threaded = encode_bundle(b, w, 4);
    ASSERT_EQ(serial.size(), 3u);
    for (std::size_t r = 0; r < 3; ++r) {
        EXPECT_EQ(serial[r], threaded[r]);
        ASSERT_EQ(serial[r].rows(), b.records[r].num_tokens());
        for (std::size_t p = 0; p < b.records[r].num_tokens(); p += 37) {
            const auto z = encode(b.records[r].data.row(p), w);
            const auto idx = serial[r].indices(p);
            const auto val = serial[r].values(p);
            ASSERT_EQ(std::vector<std::uint32_t>(idx.begin(), idx.end()), z.active);
            for (std::size_t i = 0; i < idx.size(); ++i) EXPECT_EQ(val[i], z.values[idx[i]]);
        }
    }
}

TEST(SaeCore, BiasRowsEncodeToZero) {
    auto w = synth::make_sae(6, 30, 9);
    std::fill(w.b_enc.begin(), w.b_enc.end(), 0.0f);
    ActivationBundle b;
    b.d_model = 6;
    b.records.push_back({"r", MatrixF(3, 6)});
    for (std::size_t p = 0; p < 3; ++p)
        for (std::size_t k = 0; k < 6; ++k) b.records[0].data(p, k) = w.b_dec[k];
    EXPECT_EQ(encode_bundle(b, w)[0].nnz(), 0u);
}

TEST(SaeCore, WideSaeSingleToken) {
    auto w = synth::make_sae(4, 262144, 1);
    const float h[4] = {0.3f, -0.2f, 0.1f, 0.5f};
    const auto z = encode(h, w);
    EXPECT_EQ(z.values.size(), 262144u);
}

TEST(SaeCore, DeterministicAndMonotoneInThreshold) {
    const auto w = synth::make_sae(8, 200, 21);
    auto raised = w;
    SplitMix64 rng(5);
    for (auto& t : raised.threshold) t += static_cast<float>(rng.uniform(0.0, 0.3));
    for (int t = 0; t < 30; ++t) {
        std::vector<float> h(8);
        for (auto& x : h) x = static_cast<float>(0.5 * rng.normal());
        const auto a = encode(h, w);
        const auto b = encode(h, w);
        EXPECT_EQ(a.values, b.values);
        const auto c = encode(h, raised);
        EXPECT_TRUE(std::includes(a.active.begin(), a.active.end(), c.active.begin(), c.active.end()));
    }
}

// ------------------------------------------------------------------ synth

TEST(Synth, SaeDeterministicAndValid) {
    const auto a = synth::make_sae(8, 32, 1);
    const auto b = synth::make_sae(8, 32, 1);
    EXPECT_EQ(a.W_enc, b.W_enc);
    EXPECT_EQ(a.threshold, b.threshold);
    EXPECT_NO_THROW(validate_sae(a));
    for (float t : a.threshold) {
        EXPECT_GE(t, 0.05f);
        EXPECT_LE(t, 0.5f);
    }
    for (std::size_t f = 0; f < 32; ++f) {
        double sq = 0;
        for (float x : a.W_dec.row(f)) sq += double(x) * x;
        EXPECT_NEAR(sq, 1.0, 1e-6);
    }
    EXPECT_EQ(kind_of([] { synth::make_sae(8, 8, 1); }), ErrorKind::invariant);
    EXPECT_EQ(kind_of([] { synth::make_sae(8, 4, 1); }), ErrorKind::invariant);
}

TEST(Synth, SaeSelfGoldenHash) {
    // Frozen at first generation of make_sae(8, 32, seed 7).
    oracle::TempDir tmp("golden");
    write_sae_weights(synth::make_sae(8, 32, 7), tmp.path());
    Sha256 h;
    for (const char* name : {"W_enc", "b_enc", "W_dec", "b_dec", "threshold"}) {
        h.update(oracle::read_file(tmp / (std::string(name) + ".f32")));
    }
    EXPECT_EQ(h.hex_digest(), "c4f4f7f8a5eb2274c630e33b416d60039457609a376a4b81711f85ac084b8400");
}

TEST(Synth, PlantedDriftConstruction) {
    const auto base = random_bundle(6, 4, 2);
    const auto same = synth::make_planted_drift(base, std::vector<synth::PlantedDirection>{{synth::random_unit(6, 1), 0.0}}, 0.0, 3);
    for (std::size_t r = 0; r < base.records.size(); ++r) EXPECT_EQ(same.records[r].data, base.records[r].data);

    const auto v = synth::random_unit(6, 9);
    const std::vector<synth::PlantedDirection> one{{v, 2.0}};
    const auto tuned = synth::make_planted_drift(base, one, 0.0, 3);
    EXPECT_TRUE(aligned(base, tuned));
    // every drift row is parallel to v
    for (std::size_t r = 0; r < base.records.size(); ++r) {
        for (std::size_t p = 0; p < base.records[r].num_tokens(); ++p) {
            std::vector<double> d(6);
            for (std::size_t k = 0; k < 6; ++k) d[k] = double(tuned.records[r].data(p, k)) - base.records[r].data(p, k);
            double dot = 0, nn = 0;
            for (std::size_t k = 0; k < 6; ++k) {
                dot += d[k] * v[k];
                nn += d[k] * d[k];
            }
            if (nn > 1e-8) EXPECT_NEAR(std::abs(dot) / std::sqrt(nn), 1.0, 1e-5);
        }
    }
    const auto again = synth::make_planted_drift(base, one, 0.1, 3);
    const auto again2 = synth::make_planted_drift(base, one, 0.1, 3);
    EXPECT_EQ(again.records[0].data, again2.records[0].data);
}

TEST(Synth, BruteForceEdgeCases) {
    const auto w = synth::make_sae(4, 16, 3);
    MatrixF tokens(5, 4);
    SplitMix64 rng(1);
    for (auto& x : tokens.storage()) x = static_cast<float>(0.3 * rng.normal());
    const auto v = synth::random_unit(4, 2);
    const auto zero = synth::brute_force_flips(tokens, v, 0.0, w);
    EXPECT_EQ(zero.total_flips, 0u);
    EXPECT_EQ(zero.flip_rate, 0.0);

    // One token, one feature straddling its threshold.
    SaeWeights s;
    s.sae_id = "straddle";
    s.d_model = 1;
    s.d_sae = 2;
    s.W_enc = MatrixF(1, 2, {1.0f, 1.0f});
    s.W_dec = MatrixF(2, 1, {1.0f, 1.0f});
    s.b_enc = {0, 0};
    s.b_dec = {0};
    s.threshold = {0.5f, 10.0f};
    MatrixF one(1, 1, {0.4f});
    const std::vector<double> up{1.0};
    const auto bf = synth::brute_force_flips(one, up, 0.2, s);
    EXPECT_EQ(bf.total_flips, 1u);
    EXPECT_EQ(bf.counts, (std::vector<std::uint32_t>{1, 0}));
    EXPECT_EQ(bf.flip_rate, 1.0);
}

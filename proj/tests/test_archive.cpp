// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <unistd.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "samkit/archive.hpp"
#include "samkit/rng.hpp"

namespace {

namespace fs = std::filesystem;
using samkit::Tensor;
using samkit::TensorMap;

class ArchiveTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("samkit-archive-" + std::to_string(::getpid()));
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    std::string path(const std::string& name) const { return (dir_ / name).string(); }

    /// Builds archive bytes by hand, independent of ArchiveWriter.
    std::string write_raw(const std::string& name, const std::string& header,
                          const std::vector<unsigned char>& payload) {
        std::string p = path(name);
        std::ofstream out(p, std::ios::binary);
        uint64_t n = header.size();
        for (int i = 0; i < 8; ++i) out.put(static_cast<char>((n >> (8 * i)) & 0xff));
        out.write(header.data(), static_cast<std::streamsize>(header.size()));
        out.write(reinterpret_cast<const char*>(payload.data()),
                  static_cast<std::streamsize>(payload.size()));
        return p;
    }

    static std::vector<unsigned char> f32_bytes(const std::vector<float>& v) {
        std::vector<unsigned char> out(v.size() * 4);
        std::memcpy(out.data(), v.data(), out.size());
        return out;
    }

    static std::vector<unsigned char> u16_bytes(const std::vector<uint16_t>& v) {
        std::vector<unsigned char> out(v.size() * 2);
        std::memcpy(out.data(), v.data(), out.size());
        return out;
    }

    static std::string file_bytes(const std::string& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    }

    fs::path dir_;
};

TEST_F(ArchiveTest, DecodesHandWrittenSingleTensor) {
    std::string p = write_raw(
        "one.safetensors",
        R"({"w":{"data_offsets":[0,16],"dtype":"F32","shape":[2,2]}})",
        f32_bytes({1, 2, 3, 4}));
    TensorMap m = samkit::load_tensor_archive(p);
    ASSERT_TRUE(m.contains("w"));
    EXPECT_EQ(m.at("w").shape, (std::vector<int64_t>{2, 2}));
    EXPECT_EQ(m.at("w").data, (std::vector<float>{1, 2, 3, 4}));
    EXPECT_TRUE(m.metadata.empty());
}

TEST_F(ArchiveTest, RoundTripIsBitExact) {
    samkit::SplitMix64 rng(314);
    TensorMap m;
    m.metadata["origin"] = "unit";
    for (const char* name : {"a.weight", "a.bias", "z"}) {
        Tensor t;
        t.shape = {3, 5};
        t.data.resize(15);
        for (float& v : t.data) v = static_cast<float>(rng.next_double() * 4 - 2);
        m.insert(name, std::move(t));
    }
    std::string p = path("rt.safetensors");
    samkit::save_tensor_archive(m, p);
    TensorMap back = samkit::load_tensor_archive(p);
    EXPECT_TRUE(back == m);
}

TEST_F(ArchiveTest, DoubleSaveIsByteIdentical) {
    TensorMap m;
    Tensor t;
    t.shape = {4};
    t.data = {0.25f, -1.5f, 3.0f, 0.0f};
    m.insert("only", std::move(t));
    std::string p1 = path("s1.safetensors"), p2 = path("s2.safetensors");
    samkit::save_tensor_archive(m, p1);
    samkit::save_tensor_archive(m, p2);
    EXPECT_EQ(file_bytes(p1), file_bytes(p2));
    EXPECT_FALSE(file_bytes(p1).empty());
}

TEST_F(ArchiveTest, EmptyMapProducesValidArchive) {
    TensorMap empty;
    std::string p = path("empty.safetensors");
    samkit::save_tensor_archive(empty, p);
    TensorMap back = samkit::load_tensor_archive(p);
    EXPECT_TRUE(back.entries.empty());
}

TEST_F(ArchiveTest, HeaderOrderIsLexicographic) {
    TensorMap m;
    for (const char* name : {"zeta", "alpha", "mid"}) {
        Tensor t;
        t.shape = {1};
        t.data = {1.0f};
        m.insert(name, std::move(t));
    }
    std::string p = path("lex.safetensors");
    samkit::save_tensor_archive(m, p);
    std::string bytes = file_bytes(p);
    const size_t a = bytes.find("\"alpha\"");
    const size_t mid = bytes.find("\"mid\"");
    const size_t z = bytes.find("\"zeta\"");
    ASSERT_NE(a, std::string::npos);
    EXPECT_LT(a, mid);
    EXPECT_LT(mid, z);

    samkit::ArchiveReader reader(p);
    EXPECT_EQ(reader.names(), (std::vector<std::string>{"alpha", "mid", "zeta"}));
}

TEST_F(ArchiveTest, MetadataSurvivesRoundTrip) {
    TensorMap m;
    Tensor t;
    t.shape = {1};
    t.data = {2.0f};
    m.insert("w", std::move(t));
    m.metadata["merge_method"] = "ties";
    m.metadata["note"] = "hello";
    std::string p = path("meta.safetensors");
    samkit::save_tensor_archive(m, p);
    TensorMap back = samkit::load_tensor_archive(p);
    EXPECT_EQ(back.metadata.at("merge_method"), "ties");
    EXPECT_EQ(back.metadata.at("note"), "hello");
}

TEST_F(ArchiveTest, F16UpConvertsWithWarning) {
    // 0x3c00 = 1.0, 0x4000 = 2.0, 0xbe00 = -1.5 in IEEE binary16
    std::string p = write_raw(
        "half.safetensors",
        R"({"h":{"data_offsets":[0,6],"dtype":"F16","shape":[3]}})",
        u16_bytes({0x3c00, 0x4000, 0xbe00}));
    std::vector<std::string> warnings;
    TensorMap m = samkit::load_tensor_archive(p, &warnings);
    EXPECT_EQ(m.at("h").data, (std::vector<float>{1.0f, 2.0f, -1.5f}));
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_NE(warnings[0].find("F16"), std::string::npos);
}

TEST_F(ArchiveTest, Bf16UpConvertsWithWarning) {
    // 0x3f80 = 1.0, 0xc000 = -2.0 in bfloat16
    std::string p = write_raw(
        "bf.safetensors",
        R"({"b":{"data_offsets":[0,4],"dtype":"BF16","shape":[2]}})",
        u16_bytes({0x3f80, 0xc000}));
    std::vector<std::string> warnings;
    TensorMap m = samkit::load_tensor_archive(p, &warnings);
    EXPECT_EQ(m.at("b").data, (std::vector<float>{1.0f, -2.0f}));
    EXPECT_EQ(warnings.size(), 1u);
}

TEST_F(ArchiveTest, UnsupportedDtypeRejected) {
    std::string p = write_raw(
        "i8.safetensors",
        R"({"q":{"data_offsets":[0,4],"dtype":"I8","shape":[4]}})",
        {1, 2, 3, 4});
    EXPECT_THROW(samkit::load_tensor_archive(p), samkit::UnsupportedDtype);
}

TEST_F(ArchiveTest, MalformedInputsRejected) {
    // Truncated: fewer than 8 bytes.
    {
        std::string p = path("tiny.safetensors");
        std::ofstream(p, std::ios::binary) << "abc";
        EXPECT_THROW(samkit::load_tensor_archive(p), samkit::FormatError);
    }
    // Header length exceeding the file.
    {
        std::string p = path("hdrlen.safetensors");
        std::ofstream out(p, std::ios::binary);
        for (int i = 0; i < 8; ++i) out.put(static_cast<char>(0xff));
        out << "{}";
        out.close();
        EXPECT_THROW(samkit::load_tensor_archive(p), samkit::FormatError);
    }
    // Invalid JSON header.
    EXPECT_THROW(samkit::load_tensor_archive(write_raw("badjson.safetensors", "{not json", {})),
                 samkit::FormatError);
    // Byte range inconsistent with shape.
    EXPECT_THROW(samkit::load_tensor_archive(write_raw(
                     "short.safetensors",
                     R"({"w":{"data_offsets":[0,8],"dtype":"F32","shape":[2,2]}})",
                     f32_bytes({1, 2}))),
                 samkit::FormatError);
    // Offsets outside the data region.
    EXPECT_THROW(samkit::load_tensor_archive(write_raw(
                     "oob.safetensors",
                     R"({"w":{"data_offsets":[0,16],"dtype":"F32","shape":[2,2]}})",
                     f32_bytes({1, 2}))),
                 samkit::FormatError);
    // Overlapping tensor buffers.
    EXPECT_THROW(samkit::load_tensor_archive(write_raw(
                     "overlap.safetensors",
                     R"({"a":{"data_offsets":[0,8],"dtype":"F32","shape":[2]},)"
                     R"("b":{"data_offsets":[4,12],"dtype":"F32","shape":[2]}})",
                     f32_bytes({1, 2, 3}))),
                 samkit::FormatError);
    // Non-positive dimension.
    EXPECT_THROW(samkit::load_tensor_archive(write_raw(
                     "dim.safetensors",
                     R"({"w":{"data_offsets":[0,0],"dtype":"F32","shape":[0]}})", {})),
                 samkit::FormatError);
    // Missing file.
    EXPECT_THROW(samkit::load_tensor_archive(path("missing.safetensors")), samkit::IoError);
}

TEST_F(ArchiveTest, NaNPayloadRejectedOnLoad) {
    std::vector<float> v = {1.0f, std::numeric_limits<float>::quiet_NaN()};
    std::string p = write_raw(
        "nan.safetensors",
        R"({"w":{"data_offsets":[0,8],"dtype":"F32","shape":[2]}})", f32_bytes(v));
    EXPECT_THROW(samkit::load_tensor_archive(p), samkit::InvalidValue);
}

TEST_F(ArchiveTest, SaveRejectsNaN) {
    TensorMap m;
    Tensor t;
    t.shape = {1};
    t.data = {std::numeric_limits<float>::quiet_NaN()};
    m.entries.emplace("w", std::move(t));  // bypass insert validation on purpose
    EXPECT_THROW(samkit::save_tensor_archive(m, path("nan-out.safetensors")),
                 samkit::InvalidValue);
}

TEST_F(ArchiveTest, StreamingWriterEnforcesOrderAndCompleteness) {
    std::map<std::string, std::vector<int64_t>> shapes{{"a", {2}}, {"b", {1}}};
    samkit::ArchiveWriter w(path("stream.safetensors"), shapes);
    Tensor b;
    b.shape = {1};
    b.data = {9.0f};
    EXPECT_THROW(w.write_next("b", b), samkit::InvalidValue);  // out of order
    Tensor a;
    a.shape = {2};
    a.data = {1.0f, 2.0f};
    w.write_next("a", a);
    EXPECT_THROW(w.finalize(), samkit::IoError);  // incomplete
    w.write_next("b", b);
    w.finalize();
    TensorMap back = samkit::load_tensor_archive(path("stream.safetensors"));
    EXPECT_EQ(back.at("a").data, (std::vector<float>{1.0f, 2.0f}));
    EXPECT_EQ(back.at("b").data, (std::vector<float>{9.0f}));
}

}  // namespace

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "samkit/errors.hpp"
#include "samkit/tensor.hpp"

namespace samkit {

// Archive layout: 8-byte little-endian header length N, N bytes of UTF-8 JSON
// mapping tensor name -> {dtype, shape, data_offsets} plus an optional
// "__metadata__" string map, then the raw little-endian tensor buffers.
// Offsets are relative to the end of the header. This is the safetensors
// layout, so real adapter checkpoints load directly.

static_assert(std::endian::native == std::endian::little,
              "archive codec assumes a little-endian host");

namespace detail {

inline float f16_to_f32(uint16_t h) {
    const uint32_t sign = (h >> 15) & 1u;
    const uint32_t exp = (h >> 10) & 0x1fu;
    const uint32_t mant = h & 0x3ffu;
    uint32_t bits;
    if (exp == 0) {
        if (mant == 0) {
            bits = sign << 31;
        } else {
            // subnormal: renormalize
            int e = -1;
            uint32_t m = mant;
            do {
                ++e;
                m <<= 1;
            } while ((m & 0x400u) == 0);
            bits = (sign << 31) | ((127 - 15 - e) << 23) | ((m & 0x3ffu) << 13);
        }
    } else if (exp == 0x1f) {
        bits = (sign << 31) | (0xffu << 23) | (mant << 13);
    } else {
        bits = (sign << 31) | ((exp - 15 + 127) << 23) | (mant << 13);
    }
    float out;
    std::memcpy(&out, &bits, sizeof(out));
    return out;
}

inline float bf16_to_f32(uint16_t h) {
    uint32_t bits = static_cast<uint32_t>(h) << 16;
    float out;
    std::memcpy(&out, &bits, sizeof(out));
    return out;
}

inline size_t dtype_size(const std::string& dtype) {
    if (dtype == "F32") return 4;
    if (dtype == "F16" || dtype == "BF16") return 2;
    throw UnsupportedDtype("unsupported tensor dtype '" + dtype + "' (supported: F32, F16, BF16)");
}

struct EntryInfo {
    std::string dtype;
    std::vector<int64_t> shape;
    uint64_t begin = 0;
    uint64_t end = 0;
};

}  // namespace detail

/// Read-side handle on an archive. Parses and validates the header on open;
/// tensors are decoded on demand so a merge over many experts never holds
/// more than one tensor per archive in memory.
class ArchiveReader {
public:
    explicit ArchiveReader(const std::string& path, std::vector<std::string>* warnings = nullptr)
        : path_(path), warnings_(warnings), file_(path, std::ios::binary) {
        if (!file_) throw IoError("cannot open archive '" + path + "'");

        file_.seekg(0, std::ios::end);
        const uint64_t file_size = static_cast<uint64_t>(file_.tellg());
        file_.seekg(0);
        if (file_size < 8) throw FormatError("archive '" + path + "' is too short for a header");

        unsigned char len_bytes[8];
        file_.read(reinterpret_cast<char*>(len_bytes), 8);
        uint64_t header_len = 0;
        for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | len_bytes[i];
        if (header_len > file_size - 8)
            throw FormatError("archive '" + path + "' declares a header larger than the file");

        std::string header(header_len, '\0');
        file_.read(header.data(), static_cast<std::streamsize>(header_len));
        if (!file_) throw IoError("failed reading archive header from '" + path + "'");
        data_begin_ = 8 + header_len;
        data_size_ = file_size - data_begin_;

        nlohmann::json doc = nlohmann::json::parse(header, nullptr, false);
        if (doc.is_discarded() || !doc.is_object())
            throw FormatError("archive '" + path + "' has a malformed JSON header");

        for (const auto& [key, value] : doc.items()) {
            if (key == "__metadata__") {
                if (!value.is_object())
                    throw FormatError("archive metadata must be a string map");
                for (const auto& [mk, mv] : value.items()) {
                    if (!mv.is_string())
                        throw FormatError("archive metadata value for '" + mk + "' is not a string");
                    metadata_[mk] = mv.get<std::string>();
                }
                continue;
            }
            if (!value.is_object())
                throw FormatError("tensor entry '" + key + "' is not an object");
            detail::EntryInfo info;
            if (!value.contains("dtype") || !value["dtype"].is_string())
                throw FormatError("tensor entry '" + key + "' lacks a dtype");
            info.dtype = value["dtype"].get<std::string>();
            detail::dtype_size(info.dtype);  // rejects unknown dtypes early
            if (!value.contains("shape") || !value["shape"].is_array())
                throw FormatError("tensor entry '" + key + "' lacks a shape");
            for (const auto& d : value["shape"]) {
                if (!d.is_number_integer() || d.get<int64_t>() <= 0)
                    throw FormatError("tensor entry '" + key + "' has a non-positive dimension");
                info.shape.push_back(d.get<int64_t>());
            }
            if (info.shape.empty())
                throw FormatError("tensor entry '" + key + "' has an empty shape");
            if (!value.contains("data_offsets") || !value["data_offsets"].is_array() ||
                value["data_offsets"].size() != 2)
                throw FormatError("tensor entry '" + key + "' lacks data_offsets");
            info.begin = value["data_offsets"][0].get<uint64_t>();
            info.end = value["data_offsets"][1].get<uint64_t>();

            uint64_t numel = 1;
            for (int64_t d : info.shape) numel *= static_cast<uint64_t>(d);
            const uint64_t expect = numel * detail::dtype_size(info.dtype);
            if (info.end < info.begin || info.end > data_size_)
                throw FormatError("tensor entry '" + key + "' has offsets outside the data region");
            if (info.end - info.begin != expect)
                throw FormatError("tensor entry '" + key + "' byte length does not match its shape");
            entries_[key] = std::move(info);
        }

        // Reject overlapping buffers.
        std::vector<const detail::EntryInfo*> by_begin;
        by_begin.reserve(entries_.size());
        for (const auto& [name, info] : entries_) by_begin.push_back(&info);
        std::sort(by_begin.begin(), by_begin.end(),
                  [](const auto* a, const auto* b) { return a->begin < b->begin; });
        for (size_t i = 1; i < by_begin.size(); ++i)
            if (by_begin[i]->begin < by_begin[i - 1]->end)
                throw FormatError("archive '" + path + "' declares overlapping tensor offsets");

        for (const auto& [name, info] : entries_) names_.push_back(name);
    }

    /// Tensor names in lexicographic order.
    const std::vector<std::string>& names() const { return names_; }
    const std::map<std::string, std::string>& metadata() const { return metadata_; }

    bool contains(const std::string& name) const { return entries_.count(name) > 0; }

    const std::vector<int64_t>& shape(const std::string& name) const {
        return info(name).shape;
    }

    Tensor read(const std::string& name) {
        const detail::EntryInfo& e = info(name);
        const size_t nbytes = static_cast<size_t>(e.end - e.begin);
        std::vector<unsigned char> raw(nbytes);
        file_.clear();
        file_.seekg(static_cast<std::streamoff>(data_begin_ + e.begin));
        file_.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(nbytes));
        if (!file_) throw IoError("failed reading tensor '" + name + "' from '" + path_ + "'");

        Tensor t;
        t.shape = e.shape;
        t.data.resize(t.numel());
        if (e.dtype == "F32") {
            std::memcpy(t.data.data(), raw.data(), nbytes);
        } else {
            const uint16_t* halves = reinterpret_cast<const uint16_t*>(raw.data());
            for (size_t i = 0; i < t.data.size(); ++i)
                t.data[i] = e.dtype == "F16" ? detail::f16_to_f32(halves[i])
                                             : detail::bf16_to_f32(halves[i]);
            if (warnings_)
                warnings_->push_back("tensor '" + name + "' up-converted from " + e.dtype +
                                     " to F32");
        }
        for (float v : t.data)
            if (std::isnan(v)) throw InvalidValue("tensor '" + name + "' in '" + path_ + "' contains NaN");
        return t;
    }

private:
    const detail::EntryInfo& info(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end())
            throw InvalidValue("archive '" + path_ + "' has no tensor named '" + name + "'");
        return it->second;
    }

    std::string path_;
    std::vector<std::string>* warnings_;
    std::ifstream file_;
    uint64_t data_begin_ = 0;
    uint64_t data_size_ = 0;
    std::map<std::string, detail::EntryInfo> entries_;
    std::map<std::string, std::string> metadata_;
    std::vector<std::string> names_;
};

/// Write-side handle. Shapes are declared up front so the header (with
/// lexicographically ordered entries and offsets) is emitted before any
/// buffer; tensors are then streamed one at a time in name order.
class ArchiveWriter {
public:
    ArchiveWriter(const std::string& path,
                  const std::map<std::string, std::vector<int64_t>>& shapes,
                  const std::map<std::string, std::string>& metadata = {})
        : path_(path), file_(path, std::ios::binary | std::ios::trunc) {
        if (!file_) throw IoError("cannot open '" + path + "' for writing");

        nlohmann::json header = nlohmann::json::object();
        uint64_t offset = 0;
        for (const auto& [name, shape] : shapes) {
            if (name.empty()) throw InvalidValue("tensor name must be non-empty");
            uint64_t numel = 1;
            for (int64_t d : shape) {
                if (d <= 0) throw InvalidValue("tensor '" + name + "' has a non-positive dimension");
                numel *= static_cast<uint64_t>(d);
            }
            if (shape.empty()) throw InvalidValue("tensor '" + name + "' has an empty shape");
            const uint64_t nbytes = numel * 4;
            header[name] = {{"dtype", "F32"},
                            {"shape", shape},
                            {"data_offsets", {offset, offset + nbytes}}};
            pending_.emplace_back(name, numel);
            offset += nbytes;
        }
        if (!metadata.empty()) header["__metadata__"] = metadata;

        const std::string text = header.dump();
        unsigned char len_bytes[8];
        for (int i = 0; i < 8; ++i)
            len_bytes[i] = static_cast<unsigned char>((text.size() >> (8 * i)) & 0xff);
        file_.write(reinterpret_cast<const char*>(len_bytes), 8);
        file_.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!file_) throw IoError("failed writing archive header to '" + path + "'");
    }

    /// Writes the next tensor; calls must follow lexicographic name order.
    void write_next(const std::string& name, const Tensor& tensor) {
        if (next_ >= pending_.size())
            throw InvalidValue("archive writer for '" + path_ + "' has no pending tensors");
        const auto& [expected, numel] = pending_[next_];
        if (name != expected)
            throw InvalidValue("archive writer expected tensor '" + expected + "', got '" + name + "'");
        tensor.validate(name);
        if (tensor.numel() != numel)
            throw ShapeMismatch("tensor '" + name + "' does not match its declared shape");
        file_.write(reinterpret_cast<const char*>(tensor.data.data()),
                    static_cast<std::streamsize>(tensor.data.size() * 4));
        if (!file_) throw IoError("failed writing tensor '" + name + "' to '" + path_ + "'");
        ++next_;
    }

    void finalize() {
        if (next_ != pending_.size())
            throw IoError("archive '" + path_ + "' finalized before all tensors were written");
        file_.flush();
        if (!file_) throw IoError("failed flushing archive '" + path_ + "'");
        file_.close();
    }

private:
    std::string path_;
    std::ofstream file_;
    std::vector<std::pair<std::string, uint64_t>> pending_;
    size_t next_ = 0;
};

inline void save_tensor_archive(const TensorMap& map, const std::string& path) {
    map.validate();
    std::map<std::string, std::vector<int64_t>> shapes;
    for (const auto& [name, tensor] : map.entries) shapes[name] = tensor.shape;
    ArchiveWriter writer(path, shapes, map.metadata);
    for (const auto& [name, tensor] : map.entries) writer.write_next(name, tensor);
    writer.finalize();
}

inline TensorMap load_tensor_archive(const std::string& path,
                                     std::vector<std::string>* warnings = nullptr) {
    ArchiveReader reader(path, warnings);
    TensorMap map;
    map.metadata = reader.metadata();
    for (const std::string& name : reader.names()) map.insert(name, reader.read(name));
    return map;
}

}  // namespace samkit

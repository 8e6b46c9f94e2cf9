// Copyright (c) 2026, The aligndesk Authors
// SPDX-License-Identifier: Apache-2.0
//
// Binary tensor container:
//   "HSTE" | u32 version | u32 header_len | JSON header | float32 payload
// All integers and floats little-endian. The header lists every tensor as
// {name, shape, offset (bytes into the payload), kind} in ascending,
// contiguous offset order, plus a free-form "meta" object. Files are written
// to a temporary sibling and renamed into place, so a reader never sees a
// partially written file under the final name.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "aligndesk/errors.hpp"
#include "aligndesk/ndgrad/array.hpp"

namespace aligndesk {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'H', 'S', 'T', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    std::string kind;  // param | moment1 | moment2 | rng | meta
    Array value;
};

struct CheckpointData {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<TensorRecord> tensors;

    const TensorRecord* find(const std::string& name, const std::string& kind) const {
        for (const auto& t : tensors) {
            if (t.name == name && t.kind == kind) return &t;
        }
        return nullptr;
    }

    const Array& at(const std::string& name, const std::string& kind) const {
        const TensorRecord* t = find(name, kind);
        if (!t) throw FormatError("checkpoint: missing " + kind + " tensor " + name);
        return t->value;
    }
};

inline bool valid_tensor_kind(const std::string& k) {
    return k == "param" || k == "moment1" || k == "moment2" || k == "rng" || k == "meta";
}

/// Encodes a 64-bit integer exactly as four 16-bit chunks in float32.
inline void put_u64(std::vector<float>& out, std::uint64_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<float>((v >> (16 * i)) & 0xFFFFu));
}

inline std::uint64_t get_u64(const Array& a, std::size_t at) {
    if (at + 4 > a.size()) throw FormatError("checkpoint: u64 field out of range");
    std::uint64_t v = 0;
    for (int i = 0; i < 4; ++i) {
        const float f = a[at + static_cast<std::size_t>(i)];
        if (!(f >= 0.0f && f <= 65535.0f) || f != static_cast<float>(static_cast<std::uint32_t>(f))) {
            throw FormatError("checkpoint: malformed u64 chunk");
        }
        v |= static_cast<std::uint64_t>(f) << (16 * i);
    }
    return v;
}

inline std::string encode_checkpoint(const CheckpointData& data) {
    nlohmann::json header;
    header["meta"] = data.meta;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : data.tensors) {
        if (!valid_tensor_kind(t.kind)) throw ContractError("checkpoint: invalid tensor kind " + t.kind);
        header["tensors"].push_back({{"name", t.name}, {"shape", t.value.shape()}, {"offset", offset}, {"kind", t.kind}});
        offset += t.value.size() * sizeof(float);
    }
    const std::string h = header.dump();
    std::string out(kCheckpointMagic, 4);
    auto put32 = [&out](std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
    put32(kCheckpointVersion);
    put32(static_cast<std::uint32_t>(h.size()));
    out += h;
    for (const auto& t : data.tensors) {
        out.append(reinterpret_cast<const char*>(t.value.data()), t.value.size() * sizeof(float));
    }
    return out;
}

inline CheckpointData decode_checkpoint(const std::string& bytes) {
    if (bytes.size() < 12 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw FormatError("checkpoint: bad magic");
    }
    std::uint32_t version = 0, hlen = 0;
    std::memcpy(&version, bytes.data() + 4, 4);
    std::memcpy(&hlen, bytes.data() + 8, 4);
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    if (bytes.size() < 12ull + hlen) throw FormatError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what());
    }
    const std::size_t base = 12ull + hlen;
    const std::size_t payload = bytes.size() - base;
    CheckpointData data;
    try {
        data.meta = header.at("meta");
        std::uint64_t expect = 0;
        for (const auto& e : header.at("tensors")) {
            TensorRecord t;
            t.name = e.at("name").get<std::string>();
            t.kind = e.at("kind").get<std::string>();
            if (!valid_tensor_kind(t.kind)) throw FormatError("checkpoint: invalid tensor kind " + t.kind);
            const Shape shape = e.at("shape").get<Shape>();
            const auto off = e.at("offset").get<std::uint64_t>();
            if (off != expect) throw FormatError("checkpoint: tensor offsets not contiguous at " + t.name);
            const std::size_t n = numel(shape);
            if (off + n * sizeof(float) > payload) throw FormatError("checkpoint: truncated payload at " + t.name);
            t.value = Array(shape);
            std::memcpy(t.value.data(), bytes.data() + base + off, n * sizeof(float));
            expect = off + n * sizeof(float);
            data.tensors.push_back(std::move(t));
        }
        if (expect != payload) throw FormatError("checkpoint: payload length does not match header");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed header: ") + e.what());
    }
    return data;
}

/// Atomic write: temporary sibling, flush, rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IOError("cannot open " + tmp.string() + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        f.flush();
        if (!f) {
            f.close();
            fs::remove(tmp, ec);
            throw IOError("write failed for " + tmp.string());
        }
    }
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw IOError("cannot move checkpoint into place at " + path.string());
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IOError("cannot open " + path.string());
    return std::string(std::istreambuf_iterator<char>(f), {});
}

inline void save_checkpoint_file(const std::filesystem::path& path, const CheckpointData& data) {
    write_file_atomic(path, encode_checkpoint(data));
}

inline CheckpointData load_checkpoint_file(const std::filesystem::path& path) {
    return decode_checkpoint(read_file(path));
}

}  // namespace aligndesk

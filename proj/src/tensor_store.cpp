// Copyright 2026 The Linex Authors
// SPDX-License-Identifier: Apache-2.0

#include "linex/tensor_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace linex {

namespace {

constexpr std::uint8_t kMagic[4] = {0x4C, 0x4E, 0x58, 0x54};  // "LNXT"
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kAlignment = 64;

std::uint64_t align_up(std::uint64_t v) { return (v + kAlignment - 1) / kAlignment * kAlignment; }

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct ByteCursor {
    const std::uint8_t* data;
    std::size_t size;
    std::size_t pos = 0;
    std::string context;

    void need(std::size_t n) const {
        if (pos + n > size)
            throw FormatError("truncated checkpoint file: " + context);
    }
    std::uint8_t u8() {
        need(1);
        return data[pos++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data[pos + i]) << (8 * i);
        pos += 8;
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data + pos), n);
        pos += n;
        return s;
    }
};

std::uint64_t checked_numel(const std::vector<std::uint64_t>& dims) {
    std::uint64_t n = 1;
    for (std::uint64_t d : dims) n *= d;
    return n;
}

std::uint64_t table_entry_size(const TensorMeta& m) {
    return 4 + m.name.size() + 1 + 1 + 8 * m.dims.size() + 8 + 8;
}

void encode_payload(const TensorData& t, std::string& out) {
    switch (t.dtype) {
        case DType::F32:
            for (double v : t.values) {
                const float f = static_cast<float>(v);
                std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
                put_u32(out, bits);
            }
            break;
        case DType::F64:
            for (double v : t.values) put_u64(out, std::bit_cast<std::uint64_t>(v));
            break;
        case DType::BF16:
            for (double v : t.values) {
                const std::uint16_t h = f32_to_bf16(static_cast<float>(v));
                out.push_back(static_cast<char>(h & 0xFF));
                out.push_back(static_cast<char>((h >> 8) & 0xFF));
            }
            break;
    }
}

std::vector<double> decode_payload(DType dtype, const std::uint8_t* bytes, std::uint64_t count) {
    std::vector<double> values(count);
    switch (dtype) {
        case DType::F32:
            for (std::uint64_t i = 0; i < count; ++i) {
                std::uint32_t bits = 0;
                std::memcpy(&bits, bytes + 4 * i, 4);
                values[i] = static_cast<double>(std::bit_cast<float>(bits));
            }
            break;
        case DType::F64:
            for (std::uint64_t i = 0; i < count; ++i) {
                std::uint64_t bits = 0;
                std::memcpy(&bits, bytes + 8 * i, 8);
                values[i] = std::bit_cast<double>(bits);
            }
            break;
        case DType::BF16:
            for (std::uint64_t i = 0; i < count; ++i) {
                const std::uint16_t h =
                    static_cast<std::uint16_t>(bytes[2 * i] | (bytes[2 * i + 1] << 8));
                values[i] = static_cast<double>(bf16_to_f32(h));
            }
            break;
    }
    return values;
}

}  // namespace

std::size_t element_size(DType dtype) {
    switch (dtype) {
        case DType::F32: return 4;
        case DType::F64: return 8;
        case DType::BF16: return 2;
    }
    throw FormatError("unknown dtype code");
}

const char* dtype_name(DType dtype) {
    switch (dtype) {
        case DType::F32: return "f32";
        case DType::F64: return "f64";
        case DType::BF16: return "bf16";
    }
    return "?";
}

DType dtype_from_name(std::string_view name) {
    if (name == "f32") return DType::F32;
    if (name == "f64") return DType::F64;
    if (name == "bf16") return DType::BF16;
    throw ConfigError("unknown dtype name: " + std::string(name));
}

std::uint16_t f32_to_bf16(float v) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
    if (std::isnan(v)) return static_cast<std::uint16_t>((bits >> 16) | 0x0040);
    const std::uint32_t rounding_bias = 0x7FFF + ((bits >> 16) & 1);
    return static_cast<std::uint16_t>((bits + rounding_bias) >> 16);
}

float bf16_to_f32(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint64_t TensorMeta::numel() const { return checked_numel(dims); }
std::uint64_t TensorData::numel() const { return checked_numel(dims); }

const TensorData* Checkpoint::find(std::string_view name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::vector<const TensorData*> order;
    order.reserve(ckpt.tensors.size());
    for (const auto& t : ckpt.tensors) order.push_back(&t);
    std::sort(order.begin(), order.end(),
              [](const TensorData* a, const TensorData* b) { return a->name < b->name; });

    std::set<std::string_view> seen;
    for (const TensorData* t : order) {
        if (!seen.insert(t->name).second)
            throw ConfigError("duplicate tensor name: " + t->name);
        if (t->values.size() != t->numel())
            throw ConfigError("tensor " + t->name + ": value count " +
                              std::to_string(t->values.size()) + " does not match dims product " +
                              std::to_string(t->numel()));
        for (std::size_t i = 0; i < t->values.size(); ++i)
            if (!std::isfinite(t->values[i]))
                throw NumericError("tensor " + t->name + ": non-finite value at index " +
                                   std::to_string(i));
    }

    std::uint64_t table_size = 24;
    for (const TensorData* t : order) {
        TensorMeta m{t->name, t->dtype, t->dims, 0, 0};
        table_size += table_entry_size(m);
    }

    // Payload offsets: each 64-byte aligned, in table order.
    std::vector<std::uint64_t> offsets(order.size());
    std::vector<std::uint64_t> lengths(order.size());
    std::uint64_t cursor = align_up(table_size);
    for (std::size_t i = 0; i < order.size(); ++i) {
        offsets[i] = cursor;
        lengths[i] = element_size(order[i]->dtype) * order[i]->numel();
        cursor = align_up(offsets[i] + lengths[i]);
    }

    std::string buf;
    buf.reserve(cursor);
    buf.append(reinterpret_cast<const char*>(kMagic), 4);
    put_u32(buf, kVersion);
    put_u64(buf, ckpt.step);
    put_u64(buf, static_cast<std::uint64_t>(order.size()));
    for (std::size_t i = 0; i < order.size(); ++i) {
        const TensorData* t = order[i];
        put_u32(buf, static_cast<std::uint32_t>(t->name.size()));
        buf.append(t->name);
        buf.push_back(static_cast<char>(t->dtype));
        buf.push_back(static_cast<char>(t->dims.size()));
        for (std::uint64_t d : t->dims) put_u64(buf, d);
        put_u64(buf, offsets[i]);
        put_u64(buf, lengths[i]);
    }
    for (std::size_t i = 0; i < order.size(); ++i) {
        buf.resize(offsets[i], '\0');
        encode_payload(*order[i], buf);
    }
    const std::uint64_t last = order.empty() ? align_up(table_size) : cursor;
    buf.resize(last, '\0');

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failure: " + path.string());
}

CheckpointReader::CheckpointReader(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());

    std::uint8_t head[24];
    in.read(reinterpret_cast<char*>(head), sizeof(head));
    if (in.gcount() != sizeof(head))
        throw FormatError("truncated checkpoint file: " + path.string());
    ByteCursor hc{head, sizeof(head), 0, path.string()};
    for (int i = 0; i < 4; ++i)
        if (hc.u8() != kMagic[i]) throw FormatError("bad magic bytes: " + path.string());
    const std::uint32_t version = hc.u32();
    if (version != kVersion)
        throw FormatError("unsupported version " + std::to_string(version) + ": " + path.string());
    step_ = hc.u64();
    const std::uint64_t count = hc.u64();

    std::string table;
    {
        // The table size is not stored; read entry by entry.
        metas_.reserve(count);
        for (std::uint64_t i = 0; i < count; ++i) {
            auto read_exact = [&](void* dst, std::size_t n) {
                in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
                if (in.gcount() != static_cast<std::streamsize>(n))
                    throw FormatError("truncated tensor table: " + path.string());
            };
            std::uint8_t lenbuf[4];
            read_exact(lenbuf, 4);
            std::uint32_t name_len = 0;
            for (int b = 0; b < 4; ++b) name_len |= static_cast<std::uint32_t>(lenbuf[b]) << (8 * b);
            if (name_len > (1u << 20))
                throw FormatError("implausible tensor name length: " + path.string());
            TensorMeta m;
            m.name.resize(name_len);
            read_exact(m.name.data(), name_len);
            std::uint8_t dtype_code = 0, rank = 0;
            read_exact(&dtype_code, 1);
            if (dtype_code > 2) throw FormatError("unknown dtype code in " + path.string());
            m.dtype = static_cast<DType>(dtype_code);
            read_exact(&rank, 1);
            std::vector<std::uint8_t> rest(8 * static_cast<std::size_t>(rank) + 16);
            read_exact(rest.data(), rest.size());
            ByteCursor rc{rest.data(), rest.size(), 0, path.string()};
            m.dims.resize(rank);
            for (int d = 0; d < rank; ++d) m.dims[static_cast<std::size_t>(d)] = rc.u64();
            m.data_offset = rc.u64();
            m.data_len = rc.u64();
            if (m.data_len != element_size(m.dtype) * m.numel())
                throw FormatError("tensor " + m.name + ": data length " +
                                  std::to_string(m.data_len) + " inconsistent with dims in " +
                                  path.string());
            metas_.push_back(std::move(m));
        }
    }

    const std::uint64_t file_size = std::filesystem::file_size(path);
    for (const auto& m : metas_)
        if (m.data_offset + m.data_len > file_size)
            throw FormatError("tensor " + m.name + " extends past end of file: " + path.string());
}

const TensorMeta* CheckpointReader::find(std::string_view name) const {
    for (const auto& m : metas_)
        if (m.name == name) return &m;
    return nullptr;
}

std::vector<double> CheckpointReader::read_values(std::string_view name) const {
    const TensorMeta* m = find(name);
    if (!m) {
        std::string available;
        for (const auto& t : metas_) {
            if (!available.empty()) available += ", ";
            available += t.name;
        }
        throw ConfigError("tensor '" + std::string(name) + "' not found in " + path_.string() +
                          "; available: [" + available + "]");
    }
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path_.string());
    in.seekg(static_cast<std::streamoff>(m->data_offset));
    std::vector<std::uint8_t> bytes(m->data_len);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
        throw FormatError("truncated payload for tensor " + m->name + ": " + path_.string());
    return decode_payload(m->dtype, bytes.data(), m->numel());
}

Checkpoint CheckpointReader::read_all() const {
    Checkpoint ckpt;
    ckpt.step = step_;
    ckpt.tensors.reserve(metas_.size());
    for (const auto& m : metas_) {
        TensorData t;
        t.name = m.name;
        t.dtype = m.dtype;
        t.dims = m.dims;
        t.values = read_values(m.name);
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

std::filesystem::path Trajectory::checkpoint_path(std::size_t i) const {
    return base_dir / entries.at(i).file;
}

const TrajectoryEntry* Trajectory::find_step(std::uint64_t step) const {
    for (const auto& e : entries)
        if (e.step == step) return &e;
    return nullptr;
}

std::optional<std::string> Trajectory::metadata_value(const std::string& key) const {
    auto it = metadata.find(key);
    if (it == metadata.end()) return std::nullopt;
    return it->second;
}

Trajectory load_trajectory(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open manifest: " + manifest_path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest parse error in " + manifest_path.string() + ": " + e.what());
    }

    Trajectory traj;
    traj.base_dir = manifest_path.parent_path();
    try {
        traj.run_id = j.at("run_id").get<std::string>();
        for (const auto& e : j.at("entries")) {
            TrajectoryEntry entry;
            entry.step = e.at("step").get<std::uint64_t>();
            entry.file = e.at("file").get<std::string>();
            traj.entries.push_back(std::move(entry));
        }
        if (j.contains("metadata"))
            for (const auto& [k, v] : j.at("metadata").items())
                traj.metadata[k] = v.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest schema error in " + manifest_path.string() + ": " + e.what());
    }

    for (std::size_t i = 1; i < traj.entries.size(); ++i)
        if (traj.entries[i].step <= traj.entries[i - 1].step)
            throw FormatError("manifest steps not strictly increasing at entry " +
                              std::to_string(i) + " (step " +
                              std::to_string(traj.entries[i].step) + " after " +
                              std::to_string(traj.entries[i - 1].step) + ") in " +
                              manifest_path.string());

    // Schema check across all checkpoints: header reads only.
    std::vector<TensorMeta> reference;
    std::string reference_file;
    for (std::size_t i = 0; i < traj.entries.size(); ++i) {
        const auto path = traj.checkpoint_path(i);
        if (!std::filesystem::exists(path))
            throw ConfigError("manifest references missing checkpoint: " + path.string());
        CheckpointReader reader(path);
        if (i == 0) {
            reference = reader.tensors();
            reference_file = traj.entries[i].file;
            continue;
        }
        const auto& metas = reader.tensors();
        for (const auto& ref : reference)
            if (!reader.find(ref.name))
                throw FormatError("schema mismatch: tensor '" + ref.name + "' present in " +
                                  reference_file + " but missing from " + traj.entries[i].file);
        for (const auto& m : metas) {
            const TensorMeta* ref = nullptr;
            for (const auto& r : reference)
                if (r.name == m.name) ref = &r;
            if (!ref)
                throw FormatError("schema mismatch: tensor '" + m.name + "' present in " +
                                  traj.entries[i].file + " but missing from " + reference_file);
            if (ref->dims != m.dims || ref->dtype != m.dtype)
                throw FormatError("schema mismatch: tensor '" + m.name +
                                  "' differs in shape or dtype between " + reference_file +
                                  " and " + traj.entries[i].file);
        }
    }
    return traj;
}

void save_trajectory(const Trajectory& traj, const std::filesystem::path& manifest_path) {
    nlohmann::ordered_json j;
    j["run_id"] = traj.run_id;
    j["entries"] = nlohmann::ordered_json::array();
    for (const auto& e : traj.entries)
        j["entries"].push_back({{"step", e.step}, {"file", e.file}});
    j["metadata"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : traj.metadata) j["metadata"][k] = v;

    std::ofstream out(manifest_path);
    if (!out) throw IoError("cannot open manifest for writing: " + manifest_path.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failure: " + manifest_path.string());
}

}  // namespace linex

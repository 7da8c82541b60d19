// EVCK checkpoint format: magic "EVCK", version u32 LE, then one record per
// tensor: name length u32 + UTF-8 name, rank u32 + dims u32 each, frozen
// flag u8, f32 LE values. Records run to end of file. Optimizer state uses
// the same record scheme in a sibling ".opt" file.
#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "evgen/common.hpp"
#include "evgen/nn.hpp"

namespace evgen::nn {

struct CheckpointRecord {
    std::string name;
    Shape shape;
    bool frozen = false;
    std::vector<float> values;

    static CheckpointRecord from_tensor(std::string name, const Tensor& t, bool frozen = false) {
        CheckpointRecord r;
        r.name = std::move(name);
        r.shape = t.shape;
        r.frozen = frozen;
        r.values.reserve(t.numel());
        for (double v : t.v) r.values.push_back(float(v));
        return r;
    }

    static CheckpointRecord scalar(std::string name, double v) {
        CheckpointRecord r;
        r.name = std::move(name);
        r.shape = {1};
        r.values.push_back(float(v));
        return r;
    }

    Tensor to_tensor() const {
        Tensor t(shape);
        for (std::size_t i = 0; i < values.size(); ++i) t.v[i] = double(values[i]);
        return t;
    }
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::string& path, const std::vector<CheckpointRecord>& records) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    detail::write_magic(f, "EVCK");
    detail::write_le<std::uint32_t>(f, kCheckpointVersion);
    for (const CheckpointRecord& r : records) {
        detail::write_le<std::uint32_t>(f, std::uint32_t(r.name.size()));
        detail::put_bytes(f, r.name.data(), r.name.size());
        detail::write_le<std::uint32_t>(f, std::uint32_t(r.shape.size()));
        for (std::size_t d : r.shape) detail::write_le<std::uint32_t>(f, std::uint32_t(d));
        detail::write_le<std::uint8_t>(f, r.frozen ? 1 : 0);
        if (r.values.size() != shape_numel(r.shape))
            throw ValidationError("checkpoint record " + r.name + " has wrong value count");
        for (float v : r.values) detail::write_f32le(f, v);
    }
    if (!f) throw IoError("write failed: " + path);
}

inline std::map<std::string, CheckpointRecord> read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    detail::expect_magic(f, "EVCK", "checkpoint");
    const std::uint32_t version = detail::read_le<std::uint32_t>(f);
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    std::map<std::string, CheckpointRecord> out;
    while (f.peek() != std::char_traits<char>::eof()) {
        CheckpointRecord r;
        const std::uint32_t name_len = detail::read_le<std::uint32_t>(f);
        r.name.resize(name_len);
        detail::get_bytes(f, r.name.data(), name_len);
        const std::uint32_t rank = detail::read_le<std::uint32_t>(f);
        if (rank > 16) throw FormatError("checkpoint record " + r.name + " has absurd rank");
        r.shape.resize(rank);
        for (std::uint32_t i = 0; i < rank; ++i) r.shape[i] = detail::read_le<std::uint32_t>(f);
        r.frozen = detail::read_le<std::uint8_t>(f) != 0;
        r.values.resize(shape_numel(r.shape));
        for (float& v : r.values) v = detail::read_f32le(f);
        out[r.name] = std::move(r);
    }
    return out;
}

// Store every parameter plus extras (metadata tensors with reserved names).
inline void save_params(const std::string& path, const std::vector<Parameter*>& params,
                        const std::vector<CheckpointRecord>& extras = {}) {
    std::vector<CheckpointRecord> records;
    records.reserve(params.size() + extras.size());
    for (const Parameter* p : params)
        records.push_back(CheckpointRecord::from_tensor(p->name, p->value, p->frozen));
    for (const CheckpointRecord& r : extras) records.push_back(r);
    write_checkpoint(path, records);
}

// Fill parameters by name from a record map; throws on missing names or
// shape mismatches. Returns names that were consumed.
inline void load_params(const std::map<std::string, CheckpointRecord>& records,
                        const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
        auto it = records.find(p->name);
        if (it == records.end()) throw FormatError("checkpoint is missing parameter " + p->name);
        if (it->second.shape != p->value.shape)
            throw FormatError("checkpoint parameter " + p->name + " has shape " +
                              shape_str(it->second.shape) + ", model expects " +
                              shape_str(p->value.shape));
        p->value = it->second.to_tensor();
        p->frozen = it->second.frozen;
        p->grad = Tensor(p->value.shape);
    }
}

inline void save_optimizer(const std::string& path, const AdamW& opt) {
    std::vector<CheckpointRecord> records;
    records.push_back(CheckpointRecord::scalar("adamw.steps", double(opt.steps_taken())));
    for (const auto& [name, st] : opt.named_states()) {
        records.push_back(CheckpointRecord::from_tensor("adamw.m." + name, st->m));
        records.push_back(CheckpointRecord::from_tensor("adamw.v." + name, st->vv));
    }
    write_checkpoint(path, records);
}

inline void load_optimizer(const std::string& path, AdamW& opt) {
    auto records = read_checkpoint(path);
    auto it = records.find("adamw.steps");
    if (it == records.end()) throw FormatError("optimizer checkpoint missing step count");
    opt.set_steps_taken(std::int64_t(it->second.values.at(0)));
    for (const auto& [name, r] : records) {
        if (name.rfind("adamw.m.", 0) == 0) {
            const std::string pname = name.substr(8);
            auto vit = records.find("adamw.v." + pname);
            if (vit == records.end()) throw FormatError("optimizer checkpoint missing v for " + pname);
            opt.restore_state(pname, r.to_tensor(), vit->second.to_tensor());
        }
    }
}

}  // namespace evgen::nn

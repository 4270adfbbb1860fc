#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "dskd/distill.hpp"
#include "dskd/inference.hpp"

namespace dskd {

// ---------------------------------------------------------------------------
// safetensors container: 8-byte little-endian header length, JSON header
// mapping names to {dtype, shape, data_offsets}, then raw tensor bytes.
// Keys are written sorted, so serialization is deterministic.
// ---------------------------------------------------------------------------

struct TensorFile {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    void save(const std::string& path) const {
        nlohmann::json header;
        size_t offset = 0;
        for (const auto& [name, t] : tensors) {
            const size_t bytes = t.size() * sizeof(float);
            header[name] = {{"dtype", "F32"},
                            {"shape", {t.n, t.c, t.h, t.w}},
                            {"data_offsets", {offset, offset + bytes}}};
            offset += bytes;
        }
        if (!metadata.empty()) header["__metadata__"] = metadata;
        const std::string hs = header.dump();

        std::ofstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open " + path + " for writing");
        const uint64_t len = hs.size();
        f.write(reinterpret_cast<const char*>(&len), 8);
        f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
        for (const auto& [name, t] : tensors)
            f.write(reinterpret_cast<const char*>(t.ptr()),
                    static_cast<std::streamsize>(t.size() * sizeof(float)));
        if (!f) throw IoError("failed writing " + path);
    }

    static TensorFile load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IoError("cannot open checkpoint file " + path);
        uint64_t len = 0;
        f.read(reinterpret_cast<char*>(&len), 8);
        if (!f || len == 0 || len > (1ull << 30))
            throw IoError("corrupt checkpoint header in " + path);
        std::string hs(len, '\0');
        f.read(hs.data(), static_cast<std::streamsize>(len));
        if (!f) throw IoError("corrupt checkpoint header in " + path);
        nlohmann::json header;
        try {
            header = nlohmann::json::parse(hs);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("corrupt checkpoint header in " + path + ": " + e.what());
        }

        TensorFile out;
        const std::streampos data_start = f.tellg();
        for (auto it = header.begin(); it != header.end(); ++it) {
            if (it.key() == "__metadata__") {
                for (auto m = it->begin(); m != it->end(); ++m)
                    out.metadata[m.key()] = m->get<std::string>();
                continue;
            }
            const auto& desc = *it;
            if (desc.at("dtype").get<std::string>() != "F32")
                throw IoError("unsupported dtype for tensor " + it.key() + " in " + path);
            auto shape = desc.at("shape").get<std::vector<int64_t>>();
            if (shape.size() > 4) throw IoError("tensor rank > 4 in " + path);
            int dims[4] = {1, 1, 1, 1};
            for (size_t i = 0; i < shape.size(); ++i)
                dims[4 - shape.size() + i] = static_cast<int>(shape[i]);
            Tensor t(dims[0], dims[1], dims[2], dims[3]);
            const auto offsets = desc.at("data_offsets").get<std::vector<uint64_t>>();
            if (offsets.size() != 2 || offsets[1] - offsets[0] != t.size() * sizeof(float))
                throw IoError("tensor byte range mismatch for " + it.key() + " in " + path);
            f.seekg(data_start + static_cast<std::streamoff>(offsets[0]));
            f.read(reinterpret_cast<char*>(t.ptr()),
                   static_cast<std::streamsize>(t.size() * sizeof(float)));
            if (!f) throw IoError("truncated tensor data for " + it.key() + " in " + path);
            out.tensors.emplace(it.key(), std::move(t));
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Model checkpointing
// ---------------------------------------------------------------------------

struct RunMeta {
    Variant variant = Variant::DS;
    bool dfe_enabled = true;
    int input_size = 256;
    float lambda = 0.1f;
    float sigma = 4.0f;
    uint64_t seed = 0;
    std::string teacher_source;  // "seeded:<seed>" or a weights-file path
    uint64_t teacher_hash = 0;
    uint64_t encoder_seed = 0;
    std::string map_selection = "M1,M2,M3";
};

namespace detail {

template <typename Net>
inline void store_group(TensorFile& file, const std::string& prefix, Net& net) {
    for (auto& [name, t] : named_state(net, prefix)) file.tensors[name] = *t;
}

template <typename Net>
inline void load_group(const TensorFile& file, const std::string& prefix, Net& net,
                       const std::string& path) {
    for (auto& [name, t] : named_state(net, prefix)) {
        auto it = file.tensors.find(name);
        if (it == file.tensors.end())
            throw IoError("checkpoint " + path + " is missing tensor " + name);
        check_same_shape(it->second, *t, "load_checkpoint");
        t->data = it->second.data;
    }
}

inline std::string hash_hex(uint64_t h) {
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

inline uint64_t parse_u64(const std::map<std::string, std::string>& meta,
                          const std::string& key, int base = 10) {
    auto it = meta.find(key);
    if (it == meta.end()) throw IoError("checkpoint metadata missing key " + key);
    return std::stoull(it->second, nullptr, base);
}

inline std::string meta_get(const std::map<std::string, std::string>& meta,
                            const std::string& key) {
    auto it = meta.find(key);
    if (it == meta.end()) throw IoError("checkpoint metadata missing key " + key);
    return it->second;
}

}  // namespace detail

// Loads ImageNet-style backbone weights (conv1.*, bn1.*, layerN.M.*) into the
// teacher and freezes it.
inline void load_teacher(Teacher& teacher, const std::string& path) {
    TensorFile file = TensorFile::load(path);
    detail::load_group(file, "", teacher.net, path);
    teacher.net.set_trainable(false);
    teacher.weight_hash = teacher.hash_weights();
}

inline void save_checkpoint(const std::string& path, DskdModel& model,
                            const ScoreCalibration& calib, const RunMeta& meta) {
    TensorFile file;
    if (model.trains_encoder()) detail::store_group(file, "encoder", model.encoder);
    if (model.has_dfe()) detail::store_group(file, "dfe", model.dfe);
    if (model.has_decoder()) detail::store_group(file, "decoder", model.decoder);
    file.tensors["calib.min_score"] = Tensor::scalar(calib.min_score);
    file.tensors["calib.max_score"] = Tensor::scalar(calib.max_score);

    file.metadata["format"] = "dskd-checkpoint-v1";
    file.metadata["variant"] = to_string(model.variant);
    file.metadata["dfe_enabled"] = model.dfe_enabled ? "1" : "0";
    file.metadata["input_size"] = std::to_string(meta.input_size);
    file.metadata["lambda"] = std::to_string(meta.lambda);
    file.metadata["sigma"] = std::to_string(meta.sigma);
    file.metadata["seed"] = std::to_string(meta.seed);
    file.metadata["teacher_source"] = meta.teacher_source;
    file.metadata["teacher_hash"] = detail::hash_hex(meta.teacher_hash);
    file.metadata["encoder_seed"] = std::to_string(meta.encoder_seed);
    file.metadata["map_selection"] = meta.map_selection;
    file.save(path);
}

struct LoadedCheckpoint {
    DskdModel model;
    ScoreCalibration calib;
    RunMeta meta;
};

// Rebuilds the model from a checkpoint. The teacher is reconstructed from its
// recorded source (seed or weights file) and verified against the stored
// content hash; the E-D reference encoder is regenerated from its init seed.
inline LoadedCheckpoint load_checkpoint(const std::string& path,
                                        const std::string& teacher_file_override = {}) {
    TensorFile file = TensorFile::load(path);
    if (file.metadata.empty() || detail::meta_get(file.metadata, "format") != "dskd-checkpoint-v1")
        throw IoError("not a dskd checkpoint: " + path);

    LoadedCheckpoint out;
    RunMeta& meta = out.meta;
    meta.variant = variant_from_string(detail::meta_get(file.metadata, "variant"));
    meta.dfe_enabled = detail::meta_get(file.metadata, "dfe_enabled") == "1";
    meta.input_size = static_cast<int>(detail::parse_u64(file.metadata, "input_size"));
    meta.lambda = std::stof(detail::meta_get(file.metadata, "lambda"));
    meta.sigma = std::stof(detail::meta_get(file.metadata, "sigma"));
    meta.seed = detail::parse_u64(file.metadata, "seed");
    meta.teacher_source = detail::meta_get(file.metadata, "teacher_source");
    meta.teacher_hash = detail::parse_u64(file.metadata, "teacher_hash", 16);
    meta.encoder_seed = detail::parse_u64(file.metadata, "encoder_seed");
    meta.map_selection = detail::meta_get(file.metadata, "map_selection");

    DskdModel& model = out.model;
    model.variant = meta.variant;
    model.dfe_enabled = meta.dfe_enabled;
    model.encoder_seed = meta.encoder_seed;

    if (model.uses_teacher()) {
        if (meta.teacher_source.rfind("seeded:", 0) == 0) {
            model.teacher.init_seeded(std::stoull(meta.teacher_source.substr(7)));
        } else {
            const std::string tpath =
                teacher_file_override.empty() ? meta.teacher_source : teacher_file_override;
            load_teacher(model.teacher, tpath);
        }
        if (model.teacher.weight_hash != meta.teacher_hash)
            throw ConfigError("teacher weights hash mismatch: checkpoint expects " +
                              detail::hash_hex(meta.teacher_hash) + ", got " +
                              detail::hash_hex(model.teacher.weight_hash));
    }

    if (model.trains_encoder()) {
        detail::load_group(file, "encoder", model.encoder, path);
    } else if (model.has_encoder()) {
        model.encoder.init(meta.encoder_seed);  // E-D frozen reference
        model.encoder.set_trainable(false);
    }
    if (model.has_dfe()) detail::load_group(file, "dfe", model.dfe, path);
    if (model.has_decoder()) detail::load_group(file, "decoder", model.decoder, path);

    auto need = [&](const char* key) {
        auto it = file.tensors.find(key);
        if (it == file.tensors.end())
            throw IoError("checkpoint " + path + " is missing tensor " + key);
        return it->second.data[0];
    };
    out.calib.min_score = need("calib.min_score");
    out.calib.max_score = need("calib.max_score");
    return out;
}

}  // namespace dskd

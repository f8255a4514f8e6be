#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cal/errors.hpp"
#include "cal/tensor.hpp"

namespace cal {

using json = nlohmann::json;

// Write-then-rename so readers never observe a half-written file.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ArtifactError("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw ArtifactError("short write: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot open: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline json read_json(const std::filesystem::path& path) {
    json j = json::parse(read_file(path), nullptr, false);
    if (j.is_discarded()) throw ArtifactError("malformed JSON: " + path.string());
    return j;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
    atomic_write(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// TensorBundle: named tensors in one little-endian f64 blob plus a JSON
// manifest describing names, shapes, and offsets. Round-trips are bit-exact
// because values are copied as raw 8-byte words. An arbitrary "meta" object
// rides along for model and map configuration.
// ---------------------------------------------------------------------------

struct TensorBundle {
    std::vector<std::pair<std::string, Tensor>> tensors;
    json meta = json::object();

    void add(const std::string& name, const Tensor& t) { tensors.emplace_back(name, t); }

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return t;
        throw ArtifactError("bundle has no tensor named " + name);
    }

    bool has(const std::string& name) const {
        for (const auto& [n, t] : tensors)
            if (n == name) return true;
        return false;
    }
};

// base path "ckpt" produces "ckpt.json" and "ckpt.bin".
inline void save_bundle(const std::filesystem::path& base, const TensorBundle& bundle) {
    std::string blob;
    json manifest;
    manifest["dtype"] = "f64";
    manifest["byte_order"] = "little";
    manifest["blob"] = base.filename().string() + ".bin";
    manifest["meta"] = bundle.meta;
    json list = json::array();
    for (const auto& [name, t] : bundle.tensors) {
        json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["offset"] = blob.size();
        const std::size_t bytes = t.numel() * sizeof(double);
        const std::size_t at = blob.size();
        blob.resize(at + bytes);
        std::memcpy(blob.data() + at, t.data(), bytes);
        list.push_back(entry);
    }
    manifest["tensors"] = list;

    std::filesystem::path json_path = base;
    json_path += ".json";
    std::filesystem::path bin_path = base;
    bin_path += ".bin";
    atomic_write(bin_path, blob);
    write_json(json_path, manifest);
}

inline TensorBundle load_bundle(const std::filesystem::path& base) {
    std::filesystem::path json_path = base;
    json_path += ".json";
    json manifest = read_json(json_path);
    if (manifest.value("dtype", "") != "f64")
        throw ArtifactError("bundle dtype must be f64: " + json_path.string());

    std::filesystem::path bin_path = base.parent_path() / manifest.at("blob").get<std::string>();
    std::string blob = read_file(bin_path);

    TensorBundle bundle;
    bundle.meta = manifest.value("meta", json::object());
    for (const auto& entry : manifest.at("tensors")) {
        std::vector<std::size_t> shape = entry.at("shape").get<std::vector<std::size_t>>();
        const std::size_t offset = entry.at("offset").get<std::size_t>();
        const std::size_t n = Tensor::count(shape);
        if (offset + n * sizeof(double) > blob.size())
            throw ArtifactError("bundle blob truncated: " + bin_path.string());
        std::vector<double> value(n);
        std::memcpy(value.data(), blob.data() + offset, n * sizeof(double));
        bundle.add(entry.at("name").get<std::string>(),
                   Tensor::from(std::move(shape), std::move(value)));
    }
    return bundle;
}

}  // namespace cal

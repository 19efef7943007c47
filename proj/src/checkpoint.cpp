#include "splatgen/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace splatgen {

namespace {

constexpr char kMagic[4] = {'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& f, const T& v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& f) {
    T v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(T));
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const nn::ParamStore<float>& params, uint64_t spec_hash) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) fail(ErrorCode::io, "save_checkpoint: cannot open " + tmp);
        f.write(kMagic, 4);
        write_pod(f, kVersion);
        write_pod(f, spec_hash);
        write_pod(f, static_cast<uint64_t>(params.names.size()));
        for (const auto& name : params.names) {
            const Tensor<float>& t = params.at(name);
            write_pod(f, static_cast<uint32_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_pod(f, static_cast<uint32_t>(t.shape.size()));
            for (int64_t d : t.shape) write_pod(f, d);
            f.write(reinterpret_cast<const char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        }
        if (!f) fail(ErrorCode::io, "save_checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorCode::checkpoint, "load_checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        fail(ErrorCode::checkpoint, "load_checkpoint: bad magic in " + path);
    if (read_pod<uint32_t>(f) != kVersion)
        fail(ErrorCode::checkpoint, "load_checkpoint: unsupported version in " + path);
    LoadedCheckpoint out;
    out.spec_hash = read_pod<uint64_t>(f);
    const uint64_t count = read_pod<uint64_t>(f);
    for (uint64_t i = 0; i < count; ++i) {
        const uint32_t name_len = read_pod<uint32_t>(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const uint32_t ndim = read_pod<uint32_t>(f);
        std::vector<int64_t> shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = read_pod<int64_t>(f);
        Tensor<float> t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!f) fail(ErrorCode::checkpoint, "load_checkpoint: truncated file " + path);
        out.params.add(name, std::move(t));
    }
    return out;
}

LoadedCheckpoint load_checkpoint_checked(const std::string& path, uint64_t expected_spec_hash) {
    LoadedCheckpoint ck = load_checkpoint(path);
    if (ck.spec_hash != expected_spec_hash)
        fail(ErrorCode::checkpoint,
             "load_checkpoint: spec hash mismatch for " + path + " (stale or incompatible checkpoint)");
    return ck;
}

}  // namespace splatgen

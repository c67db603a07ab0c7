#pragma once

#include "llava_slt/core/tensor.hpp"
#include "llava_slt/synth/dataset.hpp"
#include "llava_slt/train/optim.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>

namespace slt::train {

namespace fs = std::filesystem;

/// Raised when a checkpoint does not fit the model it is loaded into.
class CheckpointMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// 64-bit FNV-1a, used to fingerprint configuration text.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

/// One tensor blob: u32 name length, name, u32 rank, u32 dims[rank],
/// float32 little-endian payload (row-major).
template <class T>
void write_blob(const fs::path& path, const std::string& name, const Matrix<T>& m) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    synth::detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    synth::detail::put_u32(os, 2);
    synth::detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
    synth::detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
    for (Index i = 0; i < m.size(); ++i) synth::detail::put_f32(os, static_cast<float>(m.data()[i]));
}

template <class T>
std::pair<std::string, Matrix<T>> read_blob(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    const auto len = synth::detail::get_u32(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw std::runtime_error(path.string() + ": truncated name");
    const auto rank = synth::detail::get_u32(is);
    if (rank < 1 || rank > 2) throw std::runtime_error(path.string() + ": unsupported rank");
    std::uint32_t rows = 1, cols = synth::detail::get_u32(is);
    if (rank == 2) {
        rows = cols;
        cols = synth::detail::get_u32(is);
    }
    Matrix<T> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(synth::detail::get_f32(is));
    return {name, std::move(m)};
}

inline std::string blob_file(const std::string& name) {
    std::string f = name;
    for (char& c : f)
        if (c == '/' || c == '\\') c = '_';
    return f + ".bin";
}

/// Key/value metadata stored next to the blobs.
struct CheckpointMeta {
    std::string stage;
    long step = 0;
    std::string config_hash;
    std::string rng_state;
    std::map<std::string, std::string> extra;

    void save(const fs::path& path) const {
        std::ofstream os(path, std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + path.string());
        os << "stage=" << stage << '\n' << "step=" << step << '\n' << "config_hash=" << config_hash << '\n';
        os << "rng_state=" << rng_state << '\n';
        for (const auto& [k, v] : extra) os << k << '=' << v << '\n';
    }

    static CheckpointMeta load(const fs::path& path) {
        std::ifstream is(path);
        if (!is) throw std::runtime_error("cannot open " + path.string());
        CheckpointMeta m;
        std::string line;
        while (std::getline(is, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const auto key = line.substr(0, eq);
            const auto val = line.substr(eq + 1);
            if (key == "stage") m.stage = val;
            else if (key == "step") m.step = std::stol(val);
            else if (key == "config_hash") m.config_hash = val;
            else if (key == "rng_state") m.rng_state = val;
            else m.extra[key] = val;
        }
        return m;
    }
};

/// Writes every parameter of `store` as `<dir>/<name>.bin`.
template <class T>
void save_params(const fs::path& dir, const ParamStore<T>& store) {
    fs::create_directories(dir);
    for (const auto& [name, p] : store) write_blob(dir / blob_file(name), name, p.value);
}

/// Loads blobs from `dir` into `store`. Every parameter of `store` must be
/// present with the same shape.
template <class T>
void load_params(const fs::path& dir, ParamStore<T>& store) {
    std::map<std::string, Matrix<T>> blobs;
    if (!fs::is_directory(dir)) throw CheckpointMismatch("missing checkpoint directory " + dir.string());
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".bin") continue;
        auto [name, m] = read_blob<T>(e.path());
        blobs.emplace(std::move(name), std::move(m));
    }
    for (auto& [name, p] : store) {
        auto it = blobs.find(name);
        if (it == blobs.end()) throw CheckpointMismatch(dir.string() + ": missing tensor " + name);
        if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols())
            throw CheckpointMismatch(dir.string() + ": shape mismatch for " + name);
        p.value = std::move(it->second);
    }
}

/// Reads every blob in `dir` into a fresh store.
template <class T>
ParamStore<T> read_params(const fs::path& dir) {
    ParamStore<T> store;
    if (!fs::is_directory(dir)) throw CheckpointMismatch("missing checkpoint directory " + dir.string());
    std::map<std::string, Matrix<T>> blobs;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".bin") continue;
        auto [name, m] = read_blob<T>(e.path());
        blobs.emplace(std::move(name), std::move(m));
    }
    for (auto& [name, m] : blobs) store.add(name, std::move(m));
    return store;
}

template <class T>
void save_optimizer(const fs::path& dir, const AdamW<T>& opt) {
    fs::create_directories(dir);
    for (const auto& [name, st] : opt.state()) {
        write_blob(dir / blob_file("m." + name), "m." + name, st.m);
        write_blob(dir / blob_file("v." + name), "v." + name, st.v);
    }
    std::ofstream(dir / "steps.txt", std::ios::trunc) << opt.steps() << '\n';
}

template <class T>
void load_optimizer(const fs::path& dir, AdamW<T>& opt) {
    opt.state().clear();
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.path().extension() != ".bin") continue;
        auto [name, m] = read_blob<T>(e.path());
        auto& st = opt.state()[name.substr(2)];
        (name[0] == 'm' ? st.m : st.v) = std::move(m);
    }
    long steps = 0;
    std::ifstream(dir / "steps.txt") >> steps;
    opt.set_steps(steps);
}

}  // namespace slt::train

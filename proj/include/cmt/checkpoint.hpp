#pragma once

#include <filesystem>
#include <fstream>
#include <set>

#include "cmt/model.hpp"
#include "cmt/optim.hpp"

namespace cmt {

/// Checkpoint directory layout:
///   manifest.txt  - "CMTCKPT v1", optimizer step, then one line per array:
///                   "<file> <dtype> <kind> <name> <dim0> <dim1> ..."
///   NNNN.bin      - raw little-endian scalar data, row-major
/// Kinds: param, adam_m, adam_v. Everything needed to resume bit-exactly.
namespace ckpt {

inline constexpr const char* kMagic = "CMTCKPT v1";

template <class T>
const char* dtype_name() {
    if constexpr (sizeof(T) == 4) return "f32";
    else return "f64";
}

template <class T>
void write_array(const std::filesystem::path& file, const std::vector<T>& values) {
    std::ofstream out(file, std::ios::binary);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + file.string());
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(T)));
    if (!out) throw std::runtime_error("checkpoint: short write to " + file.string());
}

template <class T>
std::vector<T> read_array(const std::filesystem::path& file, size_t count) {
    std::ifstream in(file, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("checkpoint: cannot read " + file.string());
    if (static_cast<size_t>(in.tellg()) != count * sizeof(T))
        throw std::runtime_error("checkpoint: size mismatch in " + file.string());
    in.seekg(0);
    std::vector<T> values(count);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(count * sizeof(T)));
    if (!in) throw std::runtime_error("checkpoint: short read from " + file.string());
    return values;
}

}  // namespace ckpt

template <class T>
void save_checkpoint(const std::filesystem::path& dir, CmtModel<T>& model,
                     AdamW<T>* opt = nullptr) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ostringstream manifest;
    manifest << ckpt::kMagic << "\n";
    manifest << "step " << (opt ? opt->step_count() : 0) << "\n";
    int idx = 0;
    auto emit = [&](const std::string& kind, const std::string& name, const Shape& shape,
                    const std::vector<T>& values) {
        char file[16];
        std::snprintf(file, sizeof(file), "%04d.bin", idx++);
        ckpt::write_array(dir / file, values);
        manifest << file << " " << ckpt::dtype_name<T>() << " " << kind << " " << name;
        for (int d : shape) manifest << " " << d;
        manifest << "\n";
    };
    for (const auto& [name, p] : model.params().params) emit("param", name, p.shape(), p.data());
    if (opt) {
        for (const auto& [name, m] : opt->moments_m())
            emit("adam_m", name, {static_cast<int>(m.size())}, m);
        for (const auto& [name, v] : opt->moments_v())
            emit("adam_v", name, {static_cast<int>(v.size())}, v);
    }
    std::ofstream out(dir / "manifest.txt", std::ios::binary);
    out << manifest.str();
    if (!out) throw std::runtime_error("checkpoint: cannot write manifest in " + dir.string());
}

template <class T>
void load_checkpoint(const std::filesystem::path& dir, CmtModel<T>& model,
                     AdamW<T>* opt = nullptr) {
    std::ifstream in(dir / "manifest.txt");
    if (!in) throw std::runtime_error("checkpoint: missing manifest in " + dir.string());
    std::string magic;
    std::getline(in, magic);
    if (magic != ckpt::kMagic)
        throw std::runtime_error("checkpoint: incompatible version: '" + magic + "'");
    std::string key;
    std::int64_t step = 0;
    in >> key >> step;
    if (key != "step") throw std::runtime_error("checkpoint: malformed manifest (step)");

    std::set<std::string> seen;
    std::string file, dtype, kind, name;
    while (in >> file >> dtype >> kind >> name) {
        if (dtype != ckpt::dtype_name<T>())
            throw std::runtime_error("checkpoint: dtype mismatch, found " + dtype);
        std::string rest;
        std::getline(in, rest);
        Shape shape;
        std::istringstream dims(rest);
        for (int d; dims >> d;) shape.push_back(d);
        std::int64_t count = 1;
        for (int d : shape) count *= d;
        std::vector<T> values = ckpt::read_array<T>(dir / file, static_cast<size_t>(count));
        if (kind == "param") {
            auto it = model.params().params.find(name);
            if (it == model.params().params.end())
                throw std::runtime_error("checkpoint: unknown parameter " + name);
            if (it->second.shape() != shape)
                throw std::runtime_error("checkpoint: shape mismatch for " + name);
            it->second.data() = std::move(values);
            seen.insert(name);
        } else if (kind == "adam_m" || kind == "adam_v") {
            if (opt) {
                auto& slot = kind == "adam_m" ? opt->moments_m()[name] : opt->moments_v()[name];
                slot = std::move(values);
            }
        } else {
            throw std::runtime_error("checkpoint: unknown array kind " + kind);
        }
    }
    for (const auto& [name, p] : model.params().params)
        if (!seen.count(name))
            throw std::runtime_error("checkpoint: parameter missing from manifest: " + name);
    if (opt) opt->set_step_count(step);
}

}  // namespace cmt

#pragma once

// Binary checkpoints: versioned header plus named f64 blobs.
//
// Layout (host byte order):
//   "DPDCKPT1"  u32 version  u64 config_hash  u64 seed  u64 step
//   u64 main_steps u64 main_skipped u64 dpd_steps u64 dpd_skipped
//   u64 len + bytes   rng state text
//   u64 blob count, then per blob:
//     u32 len + bytes name, u32 rank, u64 dims[rank], f64 values[prod(dims)]

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dpd/error.hpp"
#include "dpd/training.hpp"

namespace dpd {

inline constexpr char kCheckpointMagic[8] = {'D', 'P', 'D', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::uint64_t main_steps = 0, main_skipped = 0, dpd_steps = 0, dpd_skipped = 0;
    std::string rng_state;
    std::map<std::string, Tensor> blobs;
};

namespace detail {

template <class T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& path) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("checkpoint " + path + ": truncated file");
    return v;
}

inline std::string get_string(std::istream& is, std::uint64_t len, const std::string& path) {
    if (len > (1ull << 30)) throw IoError("checkpoint " + path + ": implausible string length");
    std::string s(len, '\0');
    if (len && !is.read(s.data(), static_cast<std::streamsize>(len)))
        throw IoError("checkpoint " + path + ": truncated file");
    return s;
}

}  // namespace detail

/// Writes to `path` via a temporary file and a rename.
inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    using detail::put;
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot open " + tmp + " for writing");
        os.write(kCheckpointMagic, 8);
        put(os, kCheckpointVersion);
        put(os, ck.config_hash);
        put(os, ck.seed);
        put(os, ck.step);
        put(os, ck.main_steps);
        put(os, ck.main_skipped);
        put(os, ck.dpd_steps);
        put(os, ck.dpd_skipped);
        put(os, static_cast<std::uint64_t>(ck.rng_state.size()));
        os.write(ck.rng_state.data(), static_cast<std::streamsize>(ck.rng_state.size()));
        put(os, static_cast<std::uint64_t>(ck.blobs.size()));
        for (const auto& [name, t] : ck.blobs) {
            put(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            put(os, static_cast<std::uint32_t>(t.rank()));
            for (std::size_t d : t.shape()) put(os, static_cast<std::uint64_t>(d));
            const auto data = t.data();
            os.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
        }
        if (!os) throw IoError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    using detail::get;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    char magic[8];
    if (!is.read(magic, 8) || !std::equal(magic, magic + 8, kCheckpointMagic))
        throw IoError("checkpoint " + path + ": bad magic");
    const auto version = get<std::uint32_t>(is, path);
    if (version != kCheckpointVersion)
        throw IoError("checkpoint " + path + ": unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.config_hash = get<std::uint64_t>(is, path);
    ck.seed = get<std::uint64_t>(is, path);
    ck.step = get<std::uint64_t>(is, path);
    ck.main_steps = get<std::uint64_t>(is, path);
    ck.main_skipped = get<std::uint64_t>(is, path);
    ck.dpd_steps = get<std::uint64_t>(is, path);
    ck.dpd_skipped = get<std::uint64_t>(is, path);
    ck.rng_state = detail::get_string(is, get<std::uint64_t>(is, path), path);
    const auto n = get<std::uint64_t>(is, path);
    for (std::uint64_t b = 0; b < n; ++b) {
        std::string name = detail::get_string(is, get<std::uint32_t>(is, path), path);
        const auto rank = get<std::uint32_t>(is, path);
        if (rank > 8) throw IoError("checkpoint " + path + ": implausible rank for " + name);
        Shape shape;
        for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<std::size_t>(get<std::uint64_t>(is, path)));
        Tensor t(shape);
        auto data = t.data();
        if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size_bytes())))
            throw IoError("checkpoint " + path + ": truncated blob " + name);
        ck.blobs.emplace(std::move(name), std::move(t));
    }
    return ck;
}

/// Parameters and both optimizers' moments and counters.
inline void capture_state(TrainState& s, Checkpoint& ck) {
    for (auto* p : s.params.all()) ck.blobs[p->name] = p->value;
    auto moments = [&](Adam& opt, const std::string& tag) {
        const auto& ps = opt.params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            ck.blobs["adam." + tag + ".m." + ps[i]->name] = opt.first_moments()[i];
            ck.blobs["adam." + tag + ".v." + ps[i]->name] = opt.second_moments()[i];
        }
    };
    moments(s.main_opt, "main");
    moments(s.dpd_opt, "dpd");
    ck.main_steps = s.main_opt.steps();
    ck.main_skipped = s.main_opt.skipped();
    ck.dpd_steps = s.dpd_opt.steps();
    ck.dpd_skipped = s.dpd_opt.skipped();
}

inline void restore_state(TrainState& s, const Checkpoint& ck) {
    auto take = [&](const std::string& name, Tensor& dst) {
        auto it = ck.blobs.find(name);
        if (it == ck.blobs.end()) throw ResumeError("checkpoint lacks blob " + name);
        if (it->second.shape() != dst.shape())
            throw ResumeError("checkpoint blob " + name + " has shape " + shape_string(it->second.shape()) +
                              ", expected " + shape_string(dst.shape()));
        dst = it->second;
    };
    for (auto* p : s.params.all()) take(p->name, p->value);
    auto moments = [&](Adam& opt, const std::string& tag) {
        const auto& ps = opt.params();
        for (std::size_t i = 0; i < ps.size(); ++i) {
            take("adam." + tag + ".m." + ps[i]->name, opt.first_moments()[i]);
            take("adam." + tag + ".v." + ps[i]->name, opt.second_moments()[i]);
        }
    };
    moments(s.main_opt, "main");
    moments(s.dpd_opt, "dpd");
    s.main_opt.set_counters(ck.main_steps, ck.main_skipped);
    s.dpd_opt.set_counters(ck.dpd_steps, ck.dpd_skipped);
}

inline std::string rng_state(const std::mt19937_64& rng) {
    std::ostringstream os;
    os << rng;
    return os.str();
}

inline void set_rng_state(std::mt19937_64& rng, const std::string& state) {
    std::istringstream is(state);
    is >> rng;
    if (!is) throw ResumeError("checkpoint holds a malformed rng state");
}

}  // namespace dpd

#pragma once

// Named parameter sets, SGD/Adam updates (value-semantics: a step returns new
// params), and a little-endian binary checkpoint format:
//   "PBPARAM1" | u32 count | per tensor: u32 name_len, name, u32 rank, u32 dims[], f32 data[]

#include <bit>
#include <cstring>
#include <fstream>

#include "tensor.hpp"

namespace pulse {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian");

struct ParamEntry {
    std::string name;
    Tensor value;
    bool trainable = true;
};

struct ModelParams {
    std::vector<ParamEntry> entries;

    void add(const std::string& name, Tensor value, bool trainable = true) {
        if (index_of(name) >= 0) detail::fail("params: duplicate name '" + name + "'");
        entries.push_back({name, std::move(value), trainable});
    }

    int index_of(const std::string& name) const {
        for (size_t i = 0; i < entries.size(); ++i)
            if (entries[i].name == name) return static_cast<int>(i);
        return -1;
    }

    bool has(const std::string& name) const { return index_of(name) >= 0; }

    const Tensor& at(const std::string& name) const { return entry(name).value; }
    Tensor& at(const std::string& name) { return entry(name).value; }

    ParamEntry& entry(const std::string& name) {
        const int i = index_of(name);
        if (i < 0) detail::fail("params: no parameter named '" + name + "'");
        return entries[static_cast<size_t>(i)];
    }

    const ParamEntry& entry(const std::string& name) const {
        const int i = index_of(name);
        if (i < 0) detail::fail("params: no parameter named '" + name + "'");
        return entries[static_cast<size_t>(i)];
    }

    void set_trainable(const std::string& name, bool trainable) { entry(name).trainable = trainable; }
};

struct OptimizerState {
    enum class Kind { Sgd, Adam };
    Kind kind = Kind::Sgd;
    float lr = 0.0f;
    float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
    int64_t step = 0;
    std::map<std::string, Tensor> m, v;

    static OptimizerState sgd(float lr) {
        if (lr < 0.0f) detail::fail("sgd: learning rate must be >= 0");
        OptimizerState s;
        s.kind = Kind::Sgd;
        s.lr = lr;
        return s;
    }

    static OptimizerState adam(float lr) {
        if (lr < 0.0f) detail::fail("adam: learning rate must be >= 0");
        OptimizerState s;
        s.kind = Kind::Adam;
        s.lr = lr;
        return s;
    }
};

// One update over all trainable entries; non-trainable entries pass through
// bitwise. Every trainable entry must have a matching gradient.
inline ModelParams optimizer_step(const ModelParams& params, const std::map<std::string, Tensor>& grads,
                                  OptimizerState& state) {
    ModelParams out = params;
    if (state.kind == OptimizerState::Kind::Adam) ++state.step;
    for (auto& e : out.entries) {
        if (!e.trainable) continue;
        const auto it = grads.find(e.name);
        if (it == grads.end()) detail::fail("optimizer_step: missing gradient for '" + e.name + "'");
        const Tensor& g = it->second;
        if (!g.same_shape(e.value))
            detail::fail("optimizer_step: gradient shape " + detail::shape_str(g.shape) +
                         " does not match '" + e.name + "' " + detail::shape_str(e.value.shape));
        if (state.kind == OptimizerState::Kind::Sgd) {
            for (size_t i = 0; i < e.value.data.size(); ++i) e.value.data[i] -= state.lr * g.data[i];
        } else {
            Tensor& m = state.m.try_emplace(e.name, Tensor(e.value.shape)).first->second;
            Tensor& v = state.v.try_emplace(e.name, Tensor(e.value.shape)).first->second;
            if (!m.same_shape(e.value) || !v.same_shape(e.value))
                detail::fail("optimizer_step: stale adam moments for '" + e.name + "'");
            const float b1 = state.beta1, b2 = state.beta2;
            const float c1 = 1.0f - static_cast<float>(std::pow(b1, static_cast<double>(state.step)));
            const float c2 = 1.0f - static_cast<float>(std::pow(b2, static_cast<double>(state.step)));
            for (size_t i = 0; i < e.value.data.size(); ++i) {
                m.data[i] = b1 * m.data[i] + (1.0f - b1) * g.data[i];
                v.data[i] = b2 * v.data[i] + (1.0f - b2) * g.data[i] * g.data[i];
                const float mhat = m.data[i] / c1;
                const float vhat = v.data[i] / c2;
                e.value.data[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
            }
        }
    }
    return out;
}

namespace detail {

template <typename T>
void write_raw(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is, const std::string& path) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint '" + path + "': truncated file");
    return v;
}

}  // namespace detail

inline void save_params(const ModelParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint '" + path + "': cannot open for writing");
    os.write("PBPARAM1", 8);
    detail::write_raw(os, static_cast<uint32_t>(params.entries.size()));
    for (const auto& e : params.entries) {
        detail::write_raw(os, static_cast<uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        detail::write_raw(os, static_cast<uint32_t>(e.value.rank()));
        for (int d : e.value.shape) detail::write_raw(os, static_cast<uint32_t>(d));
        os.write(reinterpret_cast<const char*>(e.value.data.data()),
                 static_cast<std::streamsize>(e.value.data.size() * sizeof(float)));
    }
    if (!os) throw std::runtime_error("checkpoint '" + path + "': write failed");
}

inline ModelParams load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint '" + path + "': cannot open");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "PBPARAM1", 8) != 0)
        throw std::runtime_error("checkpoint '" + path + "': bad magic");
    const auto count = detail::read_raw<uint32_t>(is, path);
    ModelParams out;
    for (uint32_t i = 0; i < count; ++i) {
        const auto name_len = detail::read_raw<uint32_t>(is, path);
        if (name_len > 4096) throw std::runtime_error("checkpoint '" + path + "': implausible name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw std::runtime_error("checkpoint '" + path + "': truncated file");
        const auto rank = detail::read_raw<uint32_t>(is, path);
        if (rank > 8) throw std::runtime_error("checkpoint '" + path + "': implausible rank");
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::read_raw<uint32_t>(is, path));
        Tensor t(shape);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!is) throw std::runtime_error("checkpoint '" + path + "': truncated tensor '" + name + "'");
        out.add(name, std::move(t));
    }
    return out;
}

}  // namespace pulse

#pragma once

// Dense row-major float32 tensors. Deliberately minimal: fixed shapes,
// no views, no broadcasting beyond what graph.hpp implements explicitly.

#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pulse {

namespace detail {

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::invalid_argument(msg);
}

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// SplitMix64: used to derive independent RNG streams from (seed, indices).
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_stream(uint64_t a) { return splitmix64(a); }

template <typename... Rest>
inline uint64_t mix_stream(uint64_t a, uint64_t b, Rest... rest) {
    return mix_stream(splitmix64(a) ^ (b + 0x9e3779b97f4a7c15ULL), rest...);
}

}  // namespace detail

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;

    explicit Tensor(std::vector<int> s, float fill = 0.0f) : shape(std::move(s)) {
        validate_shape();
        data.assign(static_cast<size_t>(shape_numel(shape)), fill);
    }

    static Tensor from(std::vector<int> s, std::vector<float> d) {
        Tensor t;
        t.shape = std::move(s);
        t.validate_shape();
        if (static_cast<int64_t>(d.size()) != shape_numel(t.shape))
            detail::fail("Tensor::from: data size " + std::to_string(d.size()) +
                         " does not match shape " + detail::shape_str(t.shape));
        t.data = std::move(d);
        return t;
    }

    static Tensor scalar(float v) { return from({1}, {v}); }

    void validate_shape() const {
        for (int d : shape)
            if (d < 1) detail::fail("Tensor: shape entries must be >= 1, got " + detail::shape_str(shape));
    }

    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    float& operator()(int i) { return data[static_cast<size_t>(i)]; }
    float operator()(int i) const { return data[static_cast<size_t>(i)]; }
    float& operator()(int i, int j) { return data[static_cast<size_t>(i) * dim(1) + j]; }
    float operator()(int i, int j) const { return data[static_cast<size_t>(i) * dim(1) + j]; }
    float& operator()(int n, int c, int y, int x) {
        return data[((static_cast<size_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
    }
    float operator()(int n, int c, int y, int x) const {
        return data[((static_cast<size_t>(n) * dim(1) + c) * dim(2) + y) * dim(3) + x];
    }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }
};

// Uniform init in [-limit, limit]; draw order is fixed by the flat index.
inline Tensor uniform_tensor(const std::vector<int>& shape, float limit, std::mt19937& rng) {
    Tensor t(shape);
    std::uniform_real_distribution<float> dist(-limit, limit);
    for (auto& v : t.data) v = dist(rng);
    return t;
}

// Glorot-style bound from fan counts.
inline float glorot_limit(int fan_in, int fan_out) {
    return std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
}

}  // namespace pulse

#pragma once

// Shared carrier types: uint8 RGB video stacks, scalar pulse traces and
// per-channel RGB traces, plus their on-disk forms:
//   video: "PBVID1" | f32 fps | u32 frames | u32 H | u32 W | u8 RGB interleaved
//   gold trace: CSV "frame_index,value"

#include <cstdio>
#include <cstring>
#include <fstream>

#include "tensor.hpp"

namespace pulse {

struct FrameSequence {
    int height = 0, width = 0;
    double fps = 0.0;
    std::vector<uint8_t> data;  // [t][y][x][rgb]

    FrameSequence() = default;
    FrameSequence(int frames, int h, int w, double fps_)
        : height(h), width(w), fps(fps_), data(static_cast<size_t>(frames) * h * w * 3, 0) {
        if (frames < 1 || h < 1 || w < 1 || fps_ <= 0.0)
            detail::fail("FrameSequence: frames/height/width must be >= 1 and fps > 0");
    }

    int frame_count() const {
        return height * width > 0 ? static_cast<int>(data.size() / (static_cast<size_t>(height) * width * 3))
                                  : 0;
    }

    uint8_t& at(int t, int y, int x, int c) {
        return data[((static_cast<size_t>(t) * height + y) * width + x) * 3 + c];
    }
    uint8_t at(int t, int y, int x, int c) const {
        return data[((static_cast<size_t>(t) * height + y) * width + x) * 3 + c];
    }
    const uint8_t* frame(int t) const {
        return data.data() + static_cast<size_t>(t) * height * width * 3;
    }
};

struct PulseTrace {
    std::vector<double> samples;
    double fps = 0.0;
};

struct RgbTrace {
    std::vector<double> r, g, b;
    double fps = 0.0;

    size_t length() const { return r.size(); }

    void validate() const {
        if (r.size() != g.size() || g.size() != b.size())
            detail::fail("RgbTrace: channel lengths differ");
        if (r.size() < 2) detail::fail("RgbTrace: needs at least 2 samples");
        if (fps <= 0.0) detail::fail("RgbTrace: fps must be positive");
    }
};

inline void save_video(const FrameSequence& v, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("video '" + path + "': cannot open for writing");
    os.write("PBVID1", 6);
    const float fps = static_cast<float>(v.fps);
    const uint32_t t = static_cast<uint32_t>(v.frame_count()), h = static_cast<uint32_t>(v.height),
                   w = static_cast<uint32_t>(v.width);
    os.write(reinterpret_cast<const char*>(&fps), 4);
    os.write(reinterpret_cast<const char*>(&t), 4);
    os.write(reinterpret_cast<const char*>(&h), 4);
    os.write(reinterpret_cast<const char*>(&w), 4);
    os.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size()));
    if (!os) throw std::runtime_error("video '" + path + "': write failed");
}

inline FrameSequence load_video(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("video '" + path + "': cannot open");
    char magic[6];
    is.read(magic, 6);
    if (!is || std::memcmp(magic, "PBVID1", 6) != 0)
        throw std::runtime_error("video '" + path + "': bad magic");
    float fps;
    uint32_t t, h, w;
    is.read(reinterpret_cast<char*>(&fps), 4);
    is.read(reinterpret_cast<char*>(&t), 4);
    is.read(reinterpret_cast<char*>(&h), 4);
    is.read(reinterpret_cast<char*>(&w), 4);
    if (!is) throw std::runtime_error("video '" + path + "': truncated header");
    if (t == 0 || h == 0 || w == 0 || h > 4096 || w > 4096 || !(fps > 0.0f))
        throw std::runtime_error("video '" + path + "': implausible header");
    FrameSequence v(static_cast<int>(t), static_cast<int>(h), static_cast<int>(w), fps);
    is.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(v.data.size()));
    if (!is) throw std::runtime_error("video '" + path + "': truncated frames");
    return v;
}

inline void save_gold_csv(const PulseTrace& t, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("gold '" + path + "': cannot open for writing");
    os << "frame_index,value\n";
    char buf[40];
    for (size_t i = 0; i < t.samples.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", t.samples[i]);
        os << i << ',' << buf << '\n';
    }
    if (!os) throw std::runtime_error("gold '" + path + "': write failed");
}

inline PulseTrace load_gold_csv(const std::string& path, double fps) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("gold '" + path + "': cannot open");
    PulseTrace t;
    t.fps = fps;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        if (lineno == 1 && line.rfind("frame_index", 0) == 0) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw std::runtime_error("gold '" + path + "': line " + std::to_string(lineno) +
                                     " is not 'index,value'");
        try {
            t.samples.push_back(std::stod(line.substr(comma + 1)));
        } catch (const std::exception&) {
            throw std::runtime_error("gold '" + path + "': line " + std::to_string(lineno) +
                                     " has a non-numeric value");
        }
    }
    if (t.samples.empty()) throw std::runtime_error("gold '" + path + "': no samples");
    return t;
}

}  // namespace pulse

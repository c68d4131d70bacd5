#pragma once

// Two-branch pulse network: an appearance branch computes attention masks that
// gate a motion branch built from temporally shifted convolutions; the head
// emits one pulse-derivative scalar per frame.

#include <algorithm>
#include <array>
#include <cmath>
#include <string_view>
#include <utility>

#include "graph.hpp"
#include "params.hpp"
#include "trace.hpp"

namespace pulse {

struct TsCanConfig {
    int window_frames = 20;     // frames per clip
    int input_resolution = 36;  // H = W after area resampling
    int stage1_channels = 16;
    int stage2_channels = 32;
    int hidden_units = 128;
    float shift_fraction = 0.25f;  // channel fraction shifted each direction
    float dropout = 0.25f;

    void validate() const {
        if (window_frames < 2) detail::fail("config: window_frames must be >= 2");
        if (input_resolution < 4 || input_resolution % 4 != 0)
            detail::fail("config: input_resolution must be divisible by the two 2x poolings");
        if (stage1_channels < 1 || stage2_channels < 1 || hidden_units < 1)
            detail::fail("config: channel/hidden counts must be >= 1");
        if (!(shift_fraction > 0.0f && shift_fraction <= 0.5f))
            detail::fail("config: shift_fraction must be in (0, 1/2]");
        if (!(dropout >= 0.0f && dropout < 1.0f)) detail::fail("config: dropout must be in [0, 1)");
    }
};

struct ClipInput {
    Tensor motion;      // [window, 3, R, R] normalized difference frames
    Tensor appearance;  // [window, 3, R, R] standardized raw frames
    int start_frame = 0;
};

namespace detail {

// per-axis fractional box-filter coverage: out cell i averages src cells
// weighted by overlap with [i*src/dst, (i+1)*src/dst)
inline std::vector<std::vector<std::pair<int, double>>> area_weights(int src, int dst) {
    std::vector<std::vector<std::pair<int, double>>> w(static_cast<size_t>(dst));
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
        const double lo = i * scale, hi = (i + 1) * scale;
        for (int s = static_cast<int>(lo); s < src && s < hi; ++s) {
            const double cover = std::min(hi, static_cast<double>(s) + 1.0) - std::max(lo, static_cast<double>(s));
            if (cover > 1e-12) w[static_cast<size_t>(i)].push_back({s, cover / scale});
        }
    }
    return w;
}

}  // namespace detail

// area-averaged [3,R,R] double planes for one frame, values in [0,1]
inline std::vector<double> resample_frame(const FrameSequence& v, int t, int res) {
    const auto wy = detail::area_weights(v.height, res), wx = detail::area_weights(v.width, res);
    std::vector<double> out(static_cast<size_t>(3) * res * res, 0.0);
    std::vector<double> row(static_cast<size_t>(3) * v.width);
    for (int oy = 0; oy < res; ++oy) {
        std::fill(row.begin(), row.end(), 0.0);
        for (const auto& [sy, cy] : wy[static_cast<size_t>(oy)])
            for (int x = 0; x < v.width; ++x)
                for (int c = 0; c < 3; ++c)
                    row[static_cast<size_t>(c) * v.width + x] += cy * v.at(t, sy, x, c) / 255.0;
        for (int ox = 0; ox < res; ++ox)
            for (const auto& [sx, cx] : wx[static_cast<size_t>(ox)])
                for (int c = 0; c < 3; ++c)
                    out[(static_cast<size_t>(c) * res + oy) * res + ox] +=
                        cx * row[static_cast<size_t>(c) * v.width + sx];
    }
    return out;
}

// Non-overlapping clips of normalized difference frames plus standardized raw
// frames; clip k covers frames [k*window, k*window + window] so motion index t
// pairs with the frame t -> t+1 transition.
inline std::vector<ClipInput> preprocess(const FrameSequence& v, const TsCanConfig& cfg) {
    cfg.validate();
    const int N = v.frame_count(), W = cfg.window_frames, R = cfg.input_resolution;
    const int clips = (N - 1) / W;
    if (clips < 1)
        detail::fail("preprocess: needs at least " + std::to_string(W + 1) + " frames, got " +
                     std::to_string(N));
    const size_t plane = static_cast<size_t>(3) * R * R;

    std::vector<std::vector<double>> small(static_cast<size_t>(clips * W + 1));
    for (int t = 0; t <= clips * W; ++t) small[static_cast<size_t>(t)] = resample_frame(v, t, R);

    auto standardized = [&](std::vector<double> x) {
        double m = 0.0;
        for (double e : x) m += e;
        m /= static_cast<double>(x.size());
        double var = 0.0;
        for (double e : x) var += (e - m) * (e - m);
        const double sd = std::sqrt(var / static_cast<double>(x.size()));
        Tensor out({static_cast<int>(x.size()) / static_cast<int>(plane), 3, R, R});
        for (size_t i = 0; i < x.size(); ++i)
            out.data[i] = static_cast<float>(sd < 1e-12 ? x[i] - m : (x[i] - m) / sd);
        return out;
    };

    std::vector<ClipInput> out;
    for (int k = 0; k < clips; ++k) {
        std::vector<double> mot(static_cast<size_t>(W) * plane), app(static_cast<size_t>(W) * plane);
        for (int t = 0; t < W; ++t) {
            const auto& c0 = small[static_cast<size_t>(k * W + t)];
            const auto& c1 = small[static_cast<size_t>(k * W + t) + 1];
            for (size_t i = 0; i < plane; ++i) {
                mot[static_cast<size_t>(t) * plane + i] = (c1[i] - c0[i]) / (c1[i] + c0[i] + 1e-7);
                app[static_cast<size_t>(t) * plane + i] = c0[i];
            }
        }
        ClipInput clip;
        clip.motion = standardized(std::move(mot));
        clip.appearance = standardized(std::move(app));
        clip.start_frame = k * W;
        out.push_back(std::move(clip));
    }
    return out;
}

inline const std::array<const char*, 16>& param_names() {
    static const std::array<const char*, 16> names = {
        "appearance.conv1.w", "appearance.conv1.b", "appearance.conv2.w", "appearance.conv2.b",
        "motion.conv1.w",     "motion.conv1.b",     "motion.conv2.w",     "motion.conv2.b",
        "attention1.w",       "attention1.b",       "attention2.w",       "attention2.b",
        "head.fc1.w",         "head.fc1.b",         "head.fc2.w",         "head.fc2.b"};
    return names;
}

inline ModelParams init_params(const TsCanConfig& cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937 rng(static_cast<uint32_t>(detail::mix_stream(seed, 0x75)));
    const int C1 = cfg.stage1_channels, C2 = cfg.stage2_channels;
    const int flat = C2 * (cfg.input_resolution / 4) * (cfg.input_resolution / 4);
    ModelParams p;
    auto conv = [&](const std::string& base, int cout, int cin, int k) {
        p.add(base + ".w", uniform_tensor({cout, cin, k, k}, glorot_limit(cin * k * k, cout * k * k), rng));
        p.add(base + ".b", Tensor({cout}));
    };
    conv("appearance.conv1", C1, 3, 3);
    conv("appearance.conv2", C2, C1, 3);
    conv("motion.conv1", C1, 3, 3);
    conv("motion.conv2", C2, C1, 3);
    conv("attention1", 1, C1, 1);
    conv("attention2", 1, C2, 1);
    p.add("head.fc1.w", uniform_tensor({flat, cfg.hidden_units}, glorot_limit(flat, cfg.hidden_units), rng));
    p.add("head.fc1.b", Tensor({cfg.hidden_units}));
    p.add("head.fc2.w", uniform_tensor({cfg.hidden_units, 1}, glorot_limit(cfg.hidden_units, 1), rng));
    p.add("head.fc2.b", Tensor({1}));
    return p;
}

struct TsCanNodes {
    int motion = -1, appearance = -1;
    int mask1 = -1, mask2 = -1;
    int output = -1;   // [window] pulse-derivative scalars
    int label = -1, loss = -1;
};

// Builds the network into `g`. The loss (when requested) is the MSE between
// the per-clip standardized prediction and the per-clip standardized label.
inline TsCanNodes attach_tscan(Graph& g, const TsCanConfig& cfg, const ModelParams& params,
                               bool with_loss) {
    cfg.validate();
    for (const char* name : param_names())
        if (!params.has(name)) detail::fail(std::string("params: missing tensor '") + name + "'");
    const int W = cfg.window_frames, R = cfg.input_resolution;
    TsCanNodes n;
    n.motion = g.input("motion", Tensor({W, 3, R, R}));
    n.appearance = g.input("appearance", Tensor({W, 3, R, R}));
    auto P = [&](const char* name) {
        const ParamEntry& e = params.entry(name);
        return g.param(e.name, e.value, e.trainable);
    };

    const int a1 = g.tanh_node(g.conv2d(n.appearance, P("appearance.conv1.w"), P("appearance.conv1.b"), 1, 1));
    n.mask1 = g.frame_mean_norm(g.sigmoid(g.conv2d(a1, P("attention1.w"), P("attention1.b"), 1, 0)));
    const int m1 = g.tanh_node(
        g.conv2d(g.temporal_shift(n.motion, cfg.shift_fraction), P("motion.conv1.w"), P("motion.conv1.b"), 1, 1));
    const int mp1 = g.dropout(g.avg_pool2d(g.mul_mask(m1, n.mask1), 2), cfg.dropout);

    const int a2 = g.tanh_node(
        g.conv2d(g.avg_pool2d(a1, 2), P("appearance.conv2.w"), P("appearance.conv2.b"), 1, 1));
    n.mask2 = g.frame_mean_norm(g.sigmoid(g.conv2d(a2, P("attention2.w"), P("attention2.b"), 1, 0)));
    const int m2 = g.tanh_node(
        g.conv2d(g.temporal_shift(mp1, cfg.shift_fraction), P("motion.conv2.w"), P("motion.conv2.b"), 1, 1));
    const int mp2 = g.dropout(g.avg_pool2d(g.mul_mask(m2, n.mask2), 2), cfg.dropout);

    const int flat = g.reshape(mp2, {W, cfg.stage2_channels * (R / 4) * (R / 4)});
    const int hidden = g.dropout(g.tanh_node(g.dense(flat, P("head.fc1.w"), P("head.fc1.b"))), cfg.dropout);
    n.output = g.reshape(g.dense(hidden, P("head.fc2.w"), P("head.fc2.b")), {W});

    if (with_loss) {
        n.label = g.input("label", Tensor({W}));
        n.loss = g.mse_loss(g.standardize(n.output), g.standardize(n.label));
    }
    return n;
}

struct TsCanModel {
    Graph g;
    TsCanNodes nodes;
};

inline TsCanModel build_model(const TsCanConfig& cfg, const ModelParams& params, bool with_loss,
                              bool train_mode = false, uint64_t dropout_seed = 0) {
    TsCanModel m;
    m.g.train_mode = train_mode;
    m.g.dropout_seed = dropout_seed;
    m.nodes = attach_tscan(m.g, cfg, params, with_loss);
    return m;
}

// One eval-mode forward over a single clip.
inline std::vector<double> forward_clip(const ModelParams& params, const ClipInput& clip,
                                        const TsCanConfig& cfg) {
    TsCanModel m = build_model(cfg, params, false);
    m.g.forward({{"motion", clip.motion}, {"appearance", clip.appearance}});
    const Tensor& out = m.g.value(m.nodes.output);
    return {out.data.begin(), out.data.end()};
}

// Eval-mode derivative predictions over all full clips of a video, aligned to
// frame transitions [0, clips*window).
inline PulseTrace predict_derivatives(const ModelParams& params, const FrameSequence& v,
                                      const TsCanConfig& cfg) {
    const std::vector<ClipInput> clips = preprocess(v, cfg);
    TsCanModel m = build_model(cfg, params, false);
    PulseTrace out;
    out.fps = v.fps;
    for (const ClipInput& clip : clips) {
        m.g.forward({{"motion", clip.motion}, {"appearance", clip.appearance}});
        const Tensor& y = m.g.value(m.nodes.output);
        out.samples.insert(out.samples.end(), y.data.begin(), y.data.end());
    }
    return out;
}

// Marks the motion pathway (shifted convs and the head fed by them)
// non-trainable; appearance and attention weights stay adaptable.
inline ModelParams freeze_motion_branch(ModelParams params) {
    for (const char* name : param_names())
        if (std::string_view(name).substr(0, 7) == "motion." || std::string_view(name).substr(0, 5) == "head.")
            params.set_trainable(name, false);
    return params;
}

}  // namespace pulse

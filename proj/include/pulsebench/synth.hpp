#pragma once

// Synthetic skin-reflection video generator: a two-harmonic pulse waveform
// modulates an elliptical skin patch along a fixed chrominance direction, on
// top of per-pixel texture, slow specular wander, global illumination drift,
// translation jitter, sensor noise, 8-bit quantization, and an optional
// chromatic "lamp" disc in the background whose brightness oscillates inside
// the heart-rate band (a monitor or light source visible behind the subject).

#include "dataset.hpp"
#include "sigproc.hpp"

namespace pulse {

enum class SkinClass { II, III, IV, V_VI };

inline const char* skin_class_name(SkinClass c) {
    switch (c) {
        case SkinClass::II: return "II";
        case SkinClass::III: return "III";
        case SkinClass::IV: return "IV";
        case SkinClass::V_VI: return "V+VI";
    }
    return "?";
}

inline SkinClass skin_class_from(const std::string& s) {
    if (s == "II") return SkinClass::II;
    if (s == "III") return SkinClass::III;
    if (s == "IV") return SkinClass::IV;
    if (s == "V+VI") return SkinClass::V_VI;
    detail::fail("unknown skin class '" + s + "' (expected II|III|IV|V+VI)");
}

// darkening factor applied to both the diffuse tone and the effective pulse
// amplitude; higher melanin absorbs more light in and out of the skin
inline double melanin_factor(SkinClass c) {
    switch (c) {
        case SkinClass::II: return 1.0;
        case SkinClass::III: return 0.85;
        case SkinClass::IV: return 0.7;
        case SkinClass::V_VI: return 0.4;
    }
    return 1.0;
}

struct SubjectProfile {
    std::string id;
    double skin_tone[3] = {0.62, 0.46, 0.38};  // diffuse RGB in (0,1]
    SkinClass melanin_level = SkinClass::II;
    double hr_bpm = 72.0;
    double hr_drift_bpm = 0.0;    // depth of the slow sinusoidal HR modulation
    double hr_drift_period_s = 30.0;
    double pulse_strength = 0.06;  // relative chrominance amplitude
    double noise_sigma = 0.0;      // per-pixel Gaussian std
    double flicker_amp = 0.0;      // global intensity modulation amplitude
    double motion_amp = 0.0;       // translation jitter std in pixels
    double ellipse_aspect = 1.0;   // x-stretch of the skin ellipse; area preserved
    double lamp_amp = 0.0;         // background lamp brightness amplitude (0 = absent)
    double lamp_x = 0.12, lamp_y = 0.12;  // lamp center as a fraction of the frame
    double lamp_radius = 0.085;    // lamp radius as a fraction of the frame width
    double lamp_hz = 1.3;          // lamp base oscillation frequency
    double lamp_ramp_s = 0.0;      // warm-up: seconds until full amplitude (0 = instant)
    uint64_t stream = 0;           // base of the per-subject random streams

    void validate() const {
        for (double c : skin_tone)
            if (!(c > 0.0 && c <= 1.0)) detail::fail("profile '" + id + "': skin tone outside (0,1]");
        if (hr_drift_bpm < 0.0 || pulse_strength < 0.0 || noise_sigma < 0.0 || flicker_amp < 0.0 ||
            motion_amp < 0.0 || lamp_amp < 0.0 || lamp_radius < 0.0 || lamp_hz < 0.0 ||
            lamp_ramp_s < 0.0)
            detail::fail("profile '" + id + "': amplitudes must be >= 0");
        if (!(ellipse_aspect > 0.5 && ellipse_aspect < 2.0))
            detail::fail("profile '" + id + "': ellipse aspect must stay in (0.5, 2)");
        if (lamp_x < 0.0 || lamp_x > 1.0 || lamp_y < 0.0 || lamp_y > 1.0)
            detail::fail("profile '" + id + "': lamp center must lie inside the frame");
        if (hr_drift_bpm > 0.0 && hr_drift_period_s <= 0.0)
            detail::fail("profile '" + id + "': drift period must be positive");
        if (hr_bpm - hr_drift_bpm < 45.0 || hr_bpm + hr_drift_bpm > 150.0)
            detail::fail("profile '" + id + "': hr range " + std::to_string(hr_bpm - hr_drift_bpm) + ".." +
                         std::to_string(hr_bpm + hr_drift_bpm) + " leaves the 45..150 BPM analysis band");
    }
};

inline nlohmann::json profile_to_json(const SubjectProfile& p) {
    nlohmann::json j;
    j["id"] = p.id;
    j["skin_tone"] = {p.skin_tone[0], p.skin_tone[1], p.skin_tone[2]};
    j["melanin_level"] = skin_class_name(p.melanin_level);
    j["hr_bpm"] = p.hr_bpm;
    j["hr_drift_bpm"] = p.hr_drift_bpm;
    j["hr_drift_period_s"] = p.hr_drift_period_s;
    j["pulse_strength"] = p.pulse_strength;
    j["noise_sigma"] = p.noise_sigma;
    j["flicker_amp"] = p.flicker_amp;
    j["motion_amp"] = p.motion_amp;
    j["ellipse_aspect"] = p.ellipse_aspect;
    j["lamp_amp"] = p.lamp_amp;
    j["lamp_x"] = p.lamp_x;
    j["lamp_y"] = p.lamp_y;
    j["lamp_radius"] = p.lamp_radius;
    j["lamp_hz"] = p.lamp_hz;
    j["lamp_ramp_s"] = p.lamp_ramp_s;
    j["stream"] = p.stream;
    return j;
}

// two-harmonic waveform with a slowly frequency-modulated phase, standardized
// to mean 0 / std 1
inline PulseTrace generate_pulse(const SubjectProfile& p, double duration_s, double fps) {
    p.validate();
    if (fps <= 0.0) detail::fail("generate_pulse: fps must be positive");
    const auto n = static_cast<size_t>(std::lround(duration_s * fps));
    if (n < 2) detail::fail("generate_pulse: duration x fps must be at least 2 samples");
    PulseTrace out;
    out.fps = fps;
    out.samples.resize(n);
    double phi = 0.0;
    const double dt = 1.0 / fps;
    for (size_t i = 0; i < n; ++i) {
        out.samples[i] = std::sin(phi) + 0.3 * std::sin(2.0 * phi + kPi / 4.0);
        double hz = p.hr_bpm / 60.0;
        if (p.hr_drift_bpm > 0.0)
            hz += p.hr_drift_bpm / 60.0 * std::sin(2.0 * kPi * (static_cast<double>(i) * dt) / p.hr_drift_period_s);
        phi += 2.0 * kPi * hz * dt;
    }
    double m = 0.0;
    for (double v : out.samples) m += v;
    m /= static_cast<double>(n);
    double var = 0.0;
    for (double v : out.samples) var += (v - m) * (v - m);
    const double sd = std::sqrt(var / static_cast<double>(n));
    for (auto& v : out.samples) v = (v - m) / sd;
    return out;
}

struct SynthSample {
    FrameSequence frames;
    PulseTrace gold;
    std::vector<uint8_t> skin_mask;  // base ellipse, H*W, 1 = skin
    SubjectProfile profile;
};

namespace detail {

// stream tags for the per-subject substreams
enum : uint64_t {
    kTexStream = 1,
    kNoiseStream = 2,
    kMotionStream = 3,
    kSpecStream = 4,
    kFlickStream = 5,
    kLampStream = 6,
};

constexpr double kChromGain[3] = {0.33, 0.77, 0.53};
constexpr double kSpecularAmp = 0.015;
// greenish glow (status LED / screen reflection): lives inside the pulse's
// own chrominance subspace, so projection-based demixers pass it through
// instead of cancelling it the way they cancel intensity flicker
constexpr double kLampColor[3] = {0.22, 1.0, 0.55};

}  // namespace detail

inline SynthSample render_video(const SubjectProfile& p, const PulseTrace& pulse, int height = 64,
                                int width = 64) {
    p.validate();
    if (pulse.samples.size() < 2 || pulse.fps <= 0.0) detail::fail("render_video: invalid pulse trace");
    const int T = static_cast<int>(pulse.samples.size()), H = height, W = width;
    SynthSample s;
    s.profile = p;
    s.gold = pulse;
    s.frames = FrameSequence(T, H, W, pulse.fps);

    // base ellipse covering ~40% of the frame; per-subject aspect stretch
    // keeps the area fixed while varying the silhouette
    const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
    const double ax = 0.405 * W * p.ellipse_aspect, by = 0.315 * H / p.ellipse_aspect;
    s.skin_mask.assign(static_cast<size_t>(H) * W, 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double ex = (x - cx) / ax, ey = (y - cy) / by;
            if (ex * ex + ey * ey <= 1.0) s.skin_mask[static_cast<size_t>(y) * W + x] = 1;
        }

    // static texture: background color per pixel plus a scalar brightness
    // dither on skin (the dither also decorrelates 8-bit rounding across
    // pixels, keeping the spatial mean smooth)
    std::mt19937_64 tex_rng(detail::mix_stream(p.stream, detail::kTexStream));
    std::uniform_real_distribution<double> u11(-1.0, 1.0);
    std::vector<double> bg(static_cast<size_t>(H) * W * 3);
    std::vector<double> dither(static_cast<size_t>(H) * W);
    for (size_t i = 0; i < bg.size(); ++i) bg[i] = std::clamp(0.35 + 0.10 * u11(tex_rng), 0.02, 0.98);
    for (size_t i = 0; i < dither.size(); ++i) dither[i] = 0.05 * u11(tex_rng);

    std::mt19937_64 spec_rng(detail::mix_stream(p.stream, detail::kSpecStream));
    const double spec_hz = 0.08 + 0.03 * (u11(spec_rng) + 1.0);  // 0.08..0.14
    const double spec_phase = kPi * (u11(spec_rng) + 1.0);

    // static lamp disc in the background (skin occludes it when they overlap)
    std::vector<uint8_t> lamp_mask(static_cast<size_t>(H) * W, 0);
    double lamp_ph = 0.0, lamp_fm_ph = 0.0;
    if (p.lamp_amp > 0.0) {
        const double lx = p.lamp_x * (W - 1), ly = p.lamp_y * (H - 1), lr = p.lamp_radius * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if ((x - lx) * (x - lx) + (y - ly) * (y - ly) <= lr * lr)
                    lamp_mask[static_cast<size_t>(y) * W + x] = 1;
        std::mt19937_64 lamp_rng(detail::mix_stream(p.stream, detail::kLampStream));
        lamp_ph = kPi * (u11(lamp_rng) + 1.0);
        lamp_fm_ph = kPi * (u11(lamp_rng) + 1.0);
    }

    std::mt19937_64 flick_rng(detail::mix_stream(p.stream, detail::kFlickStream));
    const double flick_ph1 = kPi * (u11(flick_rng) + 1.0);
    const double flick_ph2 = kPi * (u11(flick_rng) + 1.0);

    // translation jitter: AR(1) walk per axis with stationary std = motion_amp
    std::vector<int> off_x(static_cast<size_t>(T), 0), off_y(static_cast<size_t>(T), 0);
    if (p.motion_amp > 0.0) {
        std::mt19937_64 mot_rng(detail::mix_stream(p.stream, detail::kMotionStream));
        std::normal_distribution<double> g01(0.0, 1.0);
        const double keep = 0.9, step = p.motion_amp * std::sqrt(1.0 - keep * keep);
        double vx = 0.0, vy = 0.0;
        for (int t = 0; t < T; ++t) {
            vx = keep * vx + step * g01(mot_rng);
            vy = keep * vy + step * g01(mot_rng);
            off_x[static_cast<size_t>(t)] = static_cast<int>(std::lround(vx));
            off_y[static_cast<size_t>(t)] = static_cast<int>(std::lround(vy));
        }
    }

    std::mt19937_64 noise_rng(detail::mix_stream(p.stream, detail::kNoiseStream));
    std::normal_distribution<double> noise(0.0, p.noise_sigma > 0.0 ? p.noise_sigma : 1.0);

    const double factor = melanin_factor(p.melanin_level);
    const double tone[3] = {factor * p.skin_tone[0], factor * p.skin_tone[1], factor * p.skin_tone[2]};
    const double se[3] = {factor * p.pulse_strength * detail::kChromGain[0],
                          factor * p.pulse_strength * detail::kChromGain[1],
                          factor * p.pulse_strength * detail::kChromGain[2]};

    for (int t = 0; t < T; ++t) {
        const double tt = t / pulse.fps;
        const double pv = pulse.samples[static_cast<size_t>(t)];
        // illumination drift sits far below the pulse band; the windowed
        // demixers tolerate slow drift but leak fast common-mode modulation
        const double flick =
            1.0 + p.flicker_amp * (0.7 * std::sin(2.0 * kPi * 0.015 * tt + flick_ph1) +
                                   0.3 * std::sin(2.0 * kPi * 0.035 * tt + flick_ph2));
        const double spec =
            detail::kSpecularAmp * 0.5 * (1.0 + std::sin(2.0 * kPi * spec_hz * tt + spec_phase));
        // lamp brightness: in-band oscillation with a slow frequency wobble
        // (~±0.05 Hz) so the interference is not a perfectly stable line, and
        // an optional warm-up ramp from 30% toward full amplitude
        double lamp_v[3] = {0.0, 0.0, 0.0};
        if (p.lamp_amp > 0.0) {
            const double wave = std::sin(2.0 * kPi * p.lamp_hz * tt + lamp_ph +
                                         1.2 * std::sin(2.0 * kPi * 0.04 * tt + lamp_fm_ph));
            const double warm =
                p.lamp_ramp_s > 0.0 ? 0.3 + 0.7 * std::min(1.0, tt / p.lamp_ramp_s) : 1.0;
            for (int c = 0; c < 3; ++c) lamp_v[c] = p.lamp_amp * warm * detail::kLampColor[c] * wave;
        }
        const int dx = off_x[static_cast<size_t>(t)], dy = off_y[static_cast<size_t>(t)];
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                // skin test and texture lookup in the shifted patch frame
                const int sx = std::clamp(x - dx, 0, W - 1), sy = std::clamp(y - dy, 0, H - 1);
                const double ex = (x - cx - dx) / ax, ey = (y - cy - dy) / by;
                const bool skin = ex * ex + ey * ey <= 1.0;
                for (int c = 0; c < 3; ++c) {
                    double v;
                    if (skin) {
                        const double tex = 1.0 + dither[static_cast<size_t>(sy) * W + sx];
                        v = flick * (tone[c] * tex * (1.0 + se[c] * pv) + spec);
                    } else {
                        v = flick * bg[(static_cast<size_t>(y) * W + x) * 3 + c];
                        if (lamp_mask[static_cast<size_t>(y) * W + x]) v += flick * lamp_v[c];
                    }
                    if (p.noise_sigma > 0.0) v += noise(noise_rng);
                    s.frames.at(t, y, x, c) =
                        static_cast<uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
                }
            }
    }
    return s;
}

// knob ranges defining a generated domain; scalar knobs are sampled uniformly
// per subject, classes round-robin so every listed class appears
struct DomainKnobs {
    std::string name;
    std::string id_prefix;
    std::vector<SkinClass> classes;
    double tone_jitter = 0.05;
    double strength_lo = 0.05, strength_hi = 0.09;
    double noise_lo = 0.0, noise_hi = 0.0;
    double flicker_lo = 0.0, flicker_hi = 0.0;
    double motion_lo = 0.0, motion_hi = 0.0;
    double hr_lo = 55.0, hr_hi = 95.0;
    double drift_lo = 0.0, drift_hi = 4.0;
    double period_lo = 20.0, period_hi = 40.0;
    double aspect_jitter = 0.0;  // log-range of the per-subject ellipse aspect
    double lamp_lo = 0.0, lamp_hi = 0.0;
    // lamp placement: 0 = frame corners, well away from the skin; > 0 = beside
    // the skin ellipse at gap..gap_hi lamp radii from its edge (1 = tangent,
    // < 1 = partly occluded by the skin), which entangles the lamp with the
    // subject's silhouette
    double lamp_gap_lo = 0.0, lamp_gap_hi = 0.0;
    double ramp_lo = 0.0, ramp_hi = 0.0;  // lamp warm-up duration range
    double fps = 30.0;
    int height = 64, width = 64;
};

// bright skin, strong pulse, little interference: the pretrain/meta-train
// side; mild lamps appear so training can discover that background regions
// need excluding, and silhouettes differ so the exclusion must be per subject
inline DomainKnobs domain_a() {
    DomainKnobs k;
    k.name = "domain_a";
    k.id_prefix = "a";
    k.classes = {SkinClass::II, SkinClass::III};
    k.strength_lo = 0.05;
    k.strength_hi = 0.09;
    k.noise_lo = 0.03;
    k.noise_hi = 0.06;
    k.flicker_lo = 0.0;
    k.flicker_hi = 0.02;
    k.motion_lo = 0.3;
    k.motion_hi = 1.5;
    k.hr_lo = 55.0;
    k.hr_hi = 95.0;
    k.aspect_jitter = 0.10;
    k.lamp_lo = 0.0;
    k.lamp_hi = 0.04;
    return k;
}

// darker skin, weaker pulse, more noise/flicker/motion, and a strong in-band
// lamp: spatially uniform demixers ingest the lamp with the skin, while a
// spatially selective model can keep measuring the pulse
inline DomainKnobs domain_b() {
    DomainKnobs k;
    k.name = "domain_b";
    k.id_prefix = "b";
    k.classes = {SkinClass::III, SkinClass::IV, SkinClass::V_VI};
    k.strength_lo = 0.03;
    k.strength_hi = 0.055;
    k.noise_lo = 0.02;
    k.noise_hi = 0.04;
    k.flicker_lo = 0.03;
    k.flicker_hi = 0.08;
    k.motion_lo = 1.0;
    k.motion_hi = 2.5;
    k.hr_lo = 60.0;
    k.hr_hi = 110.0;
    k.aspect_jitter = 0.12;
    k.lamp_lo = 0.08;
    k.lamp_hi = 0.16;
    k.lamp_gap_lo = 0.4;
    k.lamp_gap_hi = 1.0;
    k.ramp_lo = 20.0;
    k.ramp_hi = 32.0;
    return k;
}

inline SubjectProfile sample_profile(uint64_t seed, int index, const DomainKnobs& k) {
    std::mt19937_64 rng(detail::mix_stream(seed, 101, static_cast<uint64_t>(index)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto in = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
    SubjectProfile p;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%02d", k.id_prefix.c_str(), index);
    p.id = buf;
    const double base[3] = {0.62, 0.46, 0.38};
    for (int c = 0; c < 3; ++c)
        p.skin_tone[c] = std::clamp(base[c] + k.tone_jitter * (2.0 * u01(rng) - 1.0), 0.05, 0.98);
    p.melanin_level = k.classes.at(static_cast<size_t>(index) % k.classes.size());
    p.hr_bpm = in(k.hr_lo, k.hr_hi);
    p.hr_drift_bpm = std::min({in(k.drift_lo, k.drift_hi), p.hr_bpm - 45.0, 150.0 - p.hr_bpm});
    p.hr_drift_period_s = in(k.period_lo, k.period_hi);
    p.pulse_strength = in(k.strength_lo, k.strength_hi);
    p.noise_sigma = in(k.noise_lo, k.noise_hi);
    p.flicker_amp = in(k.flicker_lo, k.flicker_hi);
    p.motion_amp = in(k.motion_lo, k.motion_hi);
    p.ellipse_aspect = std::exp(k.aspect_jitter * (2.0 * u01(rng) - 1.0));
    p.lamp_amp = in(k.lamp_lo, k.lamp_hi);
    p.lamp_radius = in(0.065, 0.095);
    p.lamp_hz = in(0.9, 2.1);
    p.lamp_ramp_s = in(k.ramp_lo, k.ramp_hi);
    if (k.lamp_gap_hi > 0.0) {
        // beside the ellipse: walk out from the boundary point at a random
        // angle by gap lamp radii (gap < 1 tucks the disc under the skin edge)
        const double th = 2.0 * kPi * u01(rng);
        const double gap = in(k.lamp_gap_lo, k.lamp_gap_hi);
        const double bx = 0.5 + 0.405 * p.ellipse_aspect * std::cos(th);
        const double by = 0.5 + 0.315 / p.ellipse_aspect * std::sin(th);
        const double nn = std::hypot(bx - 0.5, by - 0.5);
        p.lamp_x = std::clamp(bx + (bx - 0.5) / nn * gap * p.lamp_radius, 0.05, 0.95);
        p.lamp_y = std::clamp(by + (by - 0.5) / nn * gap * p.lamp_radius, 0.05, 0.95);
    } else {
        // one of the frame corners, clear of the skin ellipse
        const int corner = std::min(3, static_cast<int>(u01(rng) * 4.0));
        p.lamp_x = ((corner & 1) ? 0.88 : 0.12) + 0.03 * (2.0 * u01(rng) - 1.0);
        p.lamp_y = ((corner & 2) ? 0.88 : 0.12) + 0.03 * (2.0 * u01(rng) - 1.0);
    }
    p.stream = detail::mix_stream(seed, 202, static_cast<uint64_t>(index));
    return p;
}

// generates, writes to out_dir in the manifest format, and returns the dataset
inline Dataset generate_dataset(uint64_t seed, int n_subjects, double duration_s, const DomainKnobs& k,
                                const std::string& out_dir) {
    if (n_subjects < 1) detail::fail("generate_dataset: need at least one subject");
    Dataset d;
    d.name = k.name;
    d.fps = k.fps;
    d.height = k.height;
    d.width = k.width;
    for (int i = 0; i < n_subjects; ++i) {
        const SubjectProfile p = sample_profile(seed, i, k);
        SynthSample sample = render_video(p, generate_pulse(p, duration_s, k.fps), k.height, k.width);
        SubjectRecord rec;
        rec.id = p.id;
        rec.frames = std::move(sample.frames);
        rec.gold = std::move(sample.gold);
        rec.skin_class = skin_class_name(p.melanin_level);
        rec.profile = profile_to_json(p);
        d.subjects.push_back(std::move(rec));
    }
    save_dataset(d, out_dir);
    return d;
}

}  // namespace pulse

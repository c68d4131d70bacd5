#include <catch2/catch_amalgamated.hpp>

#include "pulsebench/demix.hpp"

namespace {

using pulse::FrameSequence;
using pulse::PulseTrace;
using pulse::RgbTrace;
using pulse::kPi;

double rms(const std::vector<double>& x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s / static_cast<double>(x.size()));
}

double rms_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(a.size()));
}

// two-harmonic pulse waveform shared by the recovery tests
double pulse_wave(double hz, double t) {
    const double phi = 2.0 * kPi * hz * t;
    return std::sin(phi) + 0.3 * std::sin(2.0 * phi + kPi / 4.0);
}

constexpr double kBase[3] = {0.60, 0.45, 0.38};
constexpr double kGain[3] = {0.33, 0.77, 0.53};

// trace whose channels carry `p(t)` along the fixed chrominance direction
RgbTrace chrominance_trace(double fs, int n, double hz, double strength, double noise_sigma,
                           uint32_t noise_seed = 42) {
    RgbTrace t;
    t.fps = fs;
    std::mt19937 rng(noise_seed);
    std::normal_distribution<double> nz(0.0, noise_sigma > 0.0 ? noise_sigma : 1.0);
    for (int i = 0; i < n; ++i) {
        const double p = pulse_wave(hz, i / fs);
        for (int c = 0; c < 3; ++c) {
            double v = kBase[c] * (1.0 + strength * kGain[c] * p);
            if (noise_sigma > 0.0) v += nz(rng);
            (c == 0 ? t.r : c == 1 ? t.g : t.b).push_back(v);
        }
    }
    return t;
}

std::vector<double> band_passed_pulse(double fs, int n, double hz) {
    std::vector<double> p(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = pulse_wave(hz, i / fs);
    return pulse::bandpass(p, fs);
}

// small video whose every skin pixel carries the chrominance pulse; a static
// per-pixel brightness offset dithers the 8-bit quantization so the spatial
// mean is smooth
FrameSequence pulse_video(double fs, int n, double hz, double strength) {
    const int H = 8, W = 8;
    FrameSequence v(n, H, W, fs);
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> dith(-0.02, 0.02);
    std::vector<double> offset(static_cast<size_t>(H) * W);
    for (auto& o : offset) o = dith(rng);
    for (int t = 0; t < n; ++t) {
        const double p = pulse_wave(hz, t / fs);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < 3; ++c) {
                    const double val =
                        kBase[c] * (1.0 + strength * kGain[c] * p) + offset[static_cast<size_t>(y) * W + x];
                    v.at(t, y, x, c) =
                        static_cast<uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
                }
    }
    return v;
}

}  // namespace

TEST_CASE("spatial average of a uniform video returns the constant pixel value") {
    FrameSequence v(5, 4, 4, 30.0);
    std::fill(v.data.begin(), v.data.end(), static_cast<uint8_t>(128));
    const RgbTrace t = pulse::spatial_average(v);
    REQUIRE(t.length() == 5);
    REQUIRE(t.fps == 30.0);
    for (size_t i = 0; i < t.length(); ++i) {
        REQUIRE(t.r[i] == 128.0 / 255.0);
        REQUIRE(t.g[i] == 128.0 / 255.0);
        REQUIRE(t.b[i] == 128.0 / 255.0);
    }
}

TEST_CASE("spatial average with a one-pixel mask tracks that pixel") {
    FrameSequence v(6, 3, 3, 30.0);
    for (int t = 0; t < 6; ++t)
        for (int c = 0; c < 3; ++c) v.at(t, 1, 2, c) = static_cast<uint8_t>(40 * t + 10 * c);
    std::vector<uint8_t> mask(9, 0);
    mask[1 * 3 + 2] = 1;
    const RgbTrace got = pulse::spatial_average(v, &mask);
    for (int t = 0; t < 6; ++t) {
        REQUIRE(got.r[static_cast<size_t>(t)] == (40.0 * t) / 255.0);
        REQUIRE(got.g[static_cast<size_t>(t)] == (40.0 * t + 10.0) / 255.0);
        REQUIRE(got.b[static_cast<size_t>(t)] == (40.0 * t + 20.0) / 255.0);
    }
}

TEST_CASE("spatial average rejects bad masks and empty input") {
    FrameSequence v(2, 2, 2, 30.0);
    std::vector<uint8_t> empty(4, 0);
    REQUIRE_THROWS_WITH(pulse::spatial_average(v, &empty),
                        Catch::Matchers::ContainsSubstring("no pixels"));
    std::vector<uint8_t> wrong(3, 1);
    REQUIRE_THROWS_WITH(pulse::spatial_average(v, &wrong),
                        Catch::Matchers::ContainsSubstring("mask size"));
    FrameSequence none;
    REQUIRE_THROWS_WITH(pulse::spatial_average(none),
                        Catch::Matchers::ContainsSubstring("empty"));
}

TEST_CASE("pos and chrom annihilate channel-identical signals") {
    // identical channels normalize to identical series, so both projection
    // planes vanish before the final filter ever runs
    RgbTrace t;
    t.fps = 30.0;
    for (int i = 0; i < 300; ++i) {
        const double v = 0.5 + 0.2 * std::sin(2.0 * kPi * 1.3 * i / 30.0) + 0.01 * (i % 7);
        t.r.push_back(v);
        t.g.push_back(v);
        t.b.push_back(v);
    }
    REQUIRE(rms(pulse::pos(t).samples) < 1e-6);
    REQUIRE(rms(pulse::chrom(t).samples) < 1e-6);
}

TEST_CASE("pos and chrom annihilate global flicker on a colored baseline") {
    // multiplicative flicker divides out in the per-window mean normalization
    // even when the flicker sits inside the pulse band
    RgbTrace t;
    t.fps = 30.0;
    for (int i = 0; i < 300; ++i) {
        const double f = 1.0 + 0.1 * std::sin(2.0 * kPi * 1.3 * i / 30.0);
        t.r.push_back(0.61 * f);
        t.g.push_back(0.44 * f);
        t.b.push_back(0.37 * f);
    }
    REQUIRE(rms(pulse::pos(t).samples) < 1e-6);
    REQUIRE(rms(pulse::chrom(t).samples) < 1e-6);
}

TEST_CASE("constant scaling of all channels leaves pos and chrom unchanged") {
    const RgbTrace t = chrominance_trace(30.0, 600, 1.2, 0.05, 0.0);
    RgbTrace scaled = t;
    for (size_t i = 0; i < scaled.length(); ++i) {
        scaled.r[i] *= 1.7;
        scaled.g[i] *= 1.7;
        scaled.b[i] *= 1.7;
    }
    REQUIRE(rms_diff(pulse::pos(t).samples, pulse::pos(scaled).samples) < 1e-9);
    REQUIRE(rms_diff(pulse::chrom(t).samples, pulse::chrom(scaled).samples) < 1e-9);
}

TEST_CASE("slow five percent drift barely perturbs the recovered pulse") {
    // drift below ~0.05 Hz is near-constant within each 1.6 s window; the
    // residual couples through the per-window std ratio and grows with the
    // drift slope, which is why fast in-band flicker is excluded here
    const double fs = 30.0;
    const int n = 900;
    RgbTrace clean = chrominance_trace(fs, n, 1.1, 0.05, 0.0);
    RgbTrace drift = clean;
    for (int i = 0; i < n; ++i) {
        const double tt = i / fs;
        const double f = 1.0 + 0.05 * (0.7 * std::sin(2.0 * kPi * 0.02 * tt + 0.4) +
                                       0.3 * std::sin(2.0 * kPi * 0.045 * tt + 1.9));
        drift.r[static_cast<size_t>(i)] *= f;
        drift.g[static_cast<size_t>(i)] *= f;
        drift.b[static_cast<size_t>(i)] *= f;
    }
    const auto p0 = pulse::pos(clean).samples, p1 = pulse::pos(drift).samples;
    const auto c0 = pulse::chrom(clean).samples, c1 = pulse::chrom(drift).samples;
    REQUIRE(rms_diff(p0, p1) / rms(p0) < 2e-3);
    REQUIRE(rms_diff(c0, c1) / rms(c0) < 1e-2);
}

TEST_CASE("pos recovers a chrominance pulse with positive orientation") {
    const double fs = 30.0;
    const int n = 900;
    const RgbTrace t = chrominance_trace(fs, n, 1.1, 0.05, 0.0);
    const PulseTrace out = pulse::pos(t);
    const auto gold = band_passed_pulse(fs, n, 1.1);
    const auto rho = pulse::pearson(out.samples, gold);
    REQUIRE(rho.has_value());
    REQUIRE(*rho >= 0.995);
    REQUIRE_THAT(pulse::estimate_hr(out.samples, fs), Catch::Matchers::WithinAbs(66.0, 0.5));
}

TEST_CASE("chrom recovers the same pulse with matching orientation") {
    const double fs = 30.0;
    const int n = 900;
    const RgbTrace t = chrominance_trace(fs, n, 1.1, 0.05, 0.0);
    const PulseTrace out = pulse::chrom(t);
    const auto rho = pulse::pearson(out.samples, band_passed_pulse(fs, n, 1.1));
    REQUIRE(rho.has_value());
    REQUIRE(*rho >= 0.995);
    REQUIRE_THAT(pulse::estimate_hr(out.samples, fs), Catch::Matchers::WithinAbs(66.0, 0.5));
}

TEST_CASE("pos finds a single chrominance tone within one spectral bin") {
    const double fs = 30.0;
    const int n = 900;
    RgbTrace t;
    t.fps = fs;
    for (int i = 0; i < n; ++i) {
        const double p = std::sin(2.0 * kPi * 1.4 * i / fs);
        t.r.push_back(0.55 * (1.0 + 0.04 * kGain[0] * p));
        t.g.push_back(0.42 * (1.0 + 0.04 * kGain[1] * p));
        t.b.push_back(0.35 * (1.0 + 0.04 * kGain[2] * p));
    }
    const PulseTrace out = pulse::pos(t);
    const pulse::Spectrum sp = pulse::power_spectrum(out.samples, fs);
    REQUIRE_THAT(pulse::estimate_hr(out.samples, fs), Catch::Matchers::WithinAbs(84.0, sp.bin_hz * 60.0));
}

TEST_CASE("windowed demixers reject traces shorter than one window") {
    RgbTrace t;
    t.fps = 30.0;  // window = 48 samples
    for (int i = 0; i < 40; ++i) {
        t.r.push_back(0.5);
        t.g.push_back(0.4);
        t.b.push_back(0.3);
    }
    REQUIRE_THROWS_WITH(pulse::pos(t), Catch::Matchers::ContainsSubstring("shorter"));
    REQUIRE_THROWS_WITH(pulse::chrom(t), Catch::Matchers::ContainsSubstring("shorter"));
}

TEST_CASE("ica keeps already-separated channel sinusoids apart") {
    const double fs = 30.0;
    const int n = 900;
    RgbTrace t;
    t.fps = fs;
    for (int i = 0; i < n; ++i) {
        const double tt = i / fs;
        t.r.push_back(0.5 + 0.1 * std::sin(2.0 * kPi * 0.31 * tt));
        t.g.push_back(0.5 + 0.1 * std::sin(2.0 * kPi * 1.3 * tt + 0.7));
        t.b.push_back(0.5 + 0.1 * std::sin(2.0 * kPi * 3.7 * tt + 1.9));
    }
    const PulseTrace out = pulse::ica(t);
    REQUIRE_THAT(pulse::estimate_hr(out.samples, fs), Catch::Matchers::WithinAbs(78.0, 0.5));
    // the selected component is dominated by in-band power, not the 0.31 or
    // 3.7 Hz distractors
    const pulse::Spectrum sp = pulse::power_spectrum(out.samples, fs);
    double in_band = 0.0, total = 0.0;
    for (size_t k = 0; k < sp.power.size(); ++k) {
        const double f = static_cast<double>(k) * sp.bin_hz;
        total += sp.power[k];
        if (f >= 0.75 && f <= 2.5) in_band += sp.power[k];
    }
    REQUIRE(in_band / total > 0.99);
}

TEST_CASE("ica recovers the in-band source from an invertible mixture") {
    const double fs = 30.0;
    const int n = 900;
    const double A[3][3] = {{0.20, 0.35, 0.10}, {0.40, 0.15, 0.20}, {0.15, 0.25, 0.30}};
    RgbTrace t;
    t.fps = fs;
    std::vector<double> src(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double tt = i / fs;
        const double s[3] = {std::sin(2.0 * kPi * 1.3 * tt + 0.7), std::sin(2.0 * kPi * 0.31 * tt),
                             std::sin(2.0 * kPi * 3.7 * tt + 1.9)};
        src[static_cast<size_t>(i)] = s[0];
        t.r.push_back(0.5 + 0.08 * (A[0][0] * s[0] + A[0][1] * s[1] + A[0][2] * s[2]));
        t.g.push_back(0.5 + 0.08 * (A[1][0] * s[0] + A[1][1] * s[1] + A[1][2] * s[2]));
        t.b.push_back(0.5 + 0.08 * (A[2][0] * s[0] + A[2][1] * s[1] + A[2][2] * s[2]));
    }
    const PulseTrace out = pulse::ica(t);
    REQUIRE_THAT(pulse::estimate_hr(out.samples, fs), Catch::Matchers::WithinAbs(78.0, 0.5));
    const auto rho = pulse::pearson(out.samples, pulse::bandpass(src, fs));
    REQUIRE(rho.has_value());
    REQUIRE(std::abs(*rho) >= 0.99);
}

TEST_CASE("ica resolves its sign against the negated green channel") {
    // green rises with the pulse in this trace, so the negated-green reference
    // anti-correlates with it and the returned component does too; heart-rate
    // readout is unaffected
    const double fs = 30.0;
    const int n = 900;
    const RgbTrace t = chrominance_trace(fs, n, 1.1, 0.05, 5e-4);
    const PulseTrace out = pulse::ica(t);
    const auto rho = pulse::pearson(out.samples, band_passed_pulse(fs, n, 1.1));
    REQUIRE(rho.has_value());
    REQUIRE(*rho <= -0.99);
    REQUIRE_THAT(pulse::estimate_hr(out.samples, fs), Catch::Matchers::WithinAbs(66.0, 1.0));
}

TEST_CASE("ica rejects degenerate input") {
    const double fs = 30.0;
    SECTION("duplicated channel makes the covariance rank-deficient") {
        RgbTrace t = chrominance_trace(fs, 300, 1.2, 0.05, 1e-3);
        t.b = t.g;
        REQUIRE_THROWS_WITH(pulse::ica(t), Catch::Matchers::ContainsSubstring("rank-deficient"));
    }
    SECTION("constant channel") {
        RgbTrace t = chrominance_trace(fs, 300, 1.2, 0.05, 1e-3);
        std::fill(t.r.begin(), t.r.end(), 0.5);
        REQUIRE_THROWS_WITH(pulse::ica(t), Catch::Matchers::ContainsSubstring("constant"));
    }
    SECTION("trace shorter than three seconds") {
        const RgbTrace t = chrominance_trace(fs, 80, 1.2, 0.05, 1e-3);
        REQUIRE_THROWS_WITH(pulse::ica(t), Catch::Matchers::ContainsSubstring("3 s"));
    }
}

TEST_CASE("ica output is deterministic across calls") {
    RgbTrace t;
    t.fps = 30.0;
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> u(0.3, 0.7);
    for (int i = 0; i < 200; ++i) {
        t.r.push_back(u(rng));
        t.g.push_back(u(rng));
        t.b.push_back(u(rng));
    }
    const PulseTrace a = pulse::ica(t), b = pulse::ica(t);
    REQUIRE(a.samples == b.samples);
}

TEST_CASE("pseudo labels are standardized frame-to-frame derivatives") {
    const double fs = 30.0;
    const int n = 450;
    const FrameSequence v = pulse_video(fs, n, 1.2, 0.05);
    const pulse::PseudoLabel label = pulse::make_pseudo_labels(v);
    REQUIRE(label.source == "pos");
    REQUIRE(label.deriv.samples.size() == static_cast<size_t>(n - 1));
    REQUIRE(label.deriv.fps == fs);
    double m = 0.0, var = 0.0;
    for (double x : label.deriv.samples) m += x;
    m /= static_cast<double>(label.deriv.samples.size());
    for (double x : label.deriv.samples) var += (x - m) * (x - m);
    REQUIRE_THAT(m, Catch::Matchers::WithinAbs(0.0, 1e-9));
    REQUIRE_THAT(std::sqrt(var / static_cast<double>(label.deriv.samples.size())),
                 Catch::Matchers::WithinAbs(1.0, 1e-9));
}

TEST_CASE("pos pseudo labels track the reference derivative label") {
    const double fs = 30.0;
    const int n = 450;
    const FrameSequence v = pulse_video(fs, n, 1.2, 0.05);
    PulseTrace gold;
    gold.fps = fs;
    for (int i = 0; i < n; ++i) gold.samples.push_back(pulse_wave(1.2, i / fs));
    const auto est = pulse::make_pseudo_labels(v, pulse::DemixMethod::Pos);
    const auto ref = pulse::make_pseudo_labels(v, pulse::DemixMethod::Gold, &gold);
    const auto rho = pulse::pearson(est.deriv.samples, ref.deriv.samples);
    REQUIRE(rho.has_value());
    REQUIRE(*rho >= 0.9);
}

TEST_CASE("constant video is rejected as a flat label") {
    FrameSequence v(200, 4, 4, 30.0);
    std::fill(v.data.begin(), v.data.end(), static_cast<uint8_t>(128));
    REQUIRE_THROWS_WITH(pulse::make_pseudo_labels(v), Catch::Matchers::ContainsSubstring("flat"));
}

TEST_CASE("gold labels pass through differencing and standardization exactly") {
    const int n = 10;
    FrameSequence v(n, 2, 2, 30.0);
    std::fill(v.data.begin(), v.data.end(), static_cast<uint8_t>(100));
    PulseTrace gold;
    gold.fps = 30.0;
    for (int i = 0; i < n; ++i) gold.samples.push_back(std::sin(0.9 * i) + 0.2 * i);
    const auto label = pulse::make_pseudo_labels(v, pulse::DemixMethod::Gold, &gold);
    std::vector<double> d(static_cast<size_t>(n - 1));
    double m = 0.0;
    for (int i = 0; i + 1 < n; ++i) {
        d[static_cast<size_t>(i)] = gold.samples[static_cast<size_t>(i) + 1] - gold.samples[static_cast<size_t>(i)];
        m += d[static_cast<size_t>(i)];
    }
    m /= static_cast<double>(n - 1);
    double var = 0.0;
    for (double x : d) var += (x - m) * (x - m);
    const double sd = std::sqrt(var / static_cast<double>(n - 1));
    for (size_t i = 0; i < d.size(); ++i)
        REQUIRE_THAT(label.deriv.samples[i], Catch::Matchers::WithinAbs((d[i] - m) / sd, 1e-12));
}

TEST_CASE("gold pseudo labels validate their reference trace") {
    FrameSequence v(10, 2, 2, 30.0);
    std::fill(v.data.begin(), v.data.end(), static_cast<uint8_t>(100));
    REQUIRE_THROWS_WITH(pulse::make_pseudo_labels(v, pulse::DemixMethod::Gold, nullptr),
                        Catch::Matchers::ContainsSubstring("reference trace"));
    PulseTrace wrong;
    wrong.fps = 30.0;
    wrong.samples.assign(7, 0.5);
    REQUIRE_THROWS_WITH(pulse::make_pseudo_labels(v, pulse::DemixMethod::Gold, &wrong),
                        Catch::Matchers::ContainsSubstring("does not match"));
}

TEST_CASE("demix method names round-trip") {
    using pulse::DemixMethod;
    for (DemixMethod m : {DemixMethod::Pos, DemixMethod::Chrom, DemixMethod::Ica, DemixMethod::Gold})
        REQUIRE(pulse::demix_method_from(pulse::demix_method_name(m)) == m);
    REQUIRE_THROWS_WITH(pulse::demix_method_from("pca"), Catch::Matchers::ContainsSubstring("unknown"));
    RgbTrace t = chrominance_trace(30.0, 300, 1.2, 0.05, 0.0);
    REQUIRE_THROWS_AS(pulse::run_demixer(t, DemixMethod::Gold), std::invalid_argument);
}

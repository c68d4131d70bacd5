#pragma once

// Double-precision signal path: zero-phase Butterworth band-pass, spectral
// heart-rate estimation, SNR, error metrics, and windowing utilities.

#include <algorithm>
#include <array>
#include <complex>
#include <map>
#include <optional>

#include "trace.hpp"

namespace pulse {

inline constexpr double kPi = 3.141592653589793238462643383279502884;

struct BandpassCoeffs {
    std::array<double, 5> b{}, a{};  // a[0] == 1
};

namespace detail {

inline std::vector<std::complex<double>> poly_from_roots(const std::vector<std::complex<double>>& roots) {
    std::vector<std::complex<double>> c{1.0};
    for (const auto& r : roots) {
        c.push_back(0.0);
        for (size_t i = c.size() - 1; i >= 1; --i) c[i] -= r * c[i - 1];
    }
    return c;
}

// Dense linear solve with partial pivoting (tiny systems only).
inline std::vector<double> solve_linear(std::vector<std::vector<double>> A, std::vector<double> y) {
    const size_t n = y.size();
    for (size_t col = 0; col < n; ++col) {
        size_t piv = col;
        for (size_t r = col + 1; r < n; ++r)
            if (std::abs(A[r][col]) > std::abs(A[piv][col])) piv = r;
        if (std::abs(A[piv][col]) < 1e-300) fail("solve_linear: singular system");
        std::swap(A[piv], A[col]);
        std::swap(y[piv], y[col]);
        for (size_t r = col + 1; r < n; ++r) {
            const double f = A[r][col] / A[col][col];
            for (size_t c2 = col; c2 < n; ++c2) A[r][c2] -= f * A[col][c2];
            y[r] -= f * y[col];
        }
    }
    std::vector<double> x(n);
    for (size_t i = n; i-- > 0;) {
        double acc = y[i];
        for (size_t j = i + 1; j < n; ++j) acc -= A[i][j] * x[j];
        x[i] = acc / A[i][i];
    }
    return x;
}

}  // namespace detail

// 2nd-order Butterworth band-pass designed via the analog prototype:
// prewarp both edges, low-pass->band-pass transform in pole/zero form,
// bilinear transform, then expand to transfer-function coefficients.
inline BandpassCoeffs butter_bandpass(double lo_hz, double hi_hz, double fs) {
    if (!(lo_hz > 0.0) || !(hi_hz > lo_hz)) detail::fail("butter_bandpass: need 0 < lo < hi");
    if (!(fs > 2.0 * hi_hz))
        detail::fail("butter_bandpass: sample rate " + std::to_string(fs) +
                     " Hz too low for high cutoff " + std::to_string(hi_hz) + " Hz");
    using cd = std::complex<double>;
    // order-2 prototype poles on the unit circle
    const std::vector<cd> proto{{std::cos(3.0 * kPi / 4.0), std::sin(3.0 * kPi / 4.0)},
                                {std::cos(5.0 * kPi / 4.0), std::sin(5.0 * kPi / 4.0)}};
    const double warp_lo = 4.0 * std::tan(kPi * (lo_hz / (fs / 2.0)) / 2.0);
    const double warp_hi = 4.0 * std::tan(kPi * (hi_hz / (fs / 2.0)) / 2.0);
    const double bw = warp_hi - warp_lo;
    const double wo = std::sqrt(warp_lo * warp_hi);

    std::vector<cd> poles;
    for (const auto& p : proto) {
        const cd ps = p * (bw / 2.0);
        const cd root = std::sqrt(ps * ps - wo * wo);
        poles.push_back(ps + root);
        poles.push_back(ps - root);
    }
    std::vector<cd> zeros(2, cd(0.0, 0.0));  // degree-many zeros at the origin
    double gain = bw * bw;

    // bilinear transform at the normalized internal rate (fs = 2)
    const double fs2 = 4.0;
    cd num(1.0, 0.0), den(1.0, 0.0);
    for (const auto& z : zeros) num *= (fs2 - z);
    for (const auto& p : poles) den *= (fs2 - p);
    std::vector<cd> zd, pd;
    for (const auto& z : zeros) zd.push_back((fs2 + z) / (fs2 - z));
    for (const auto& p : poles) pd.push_back((fs2 + p) / (fs2 - p));
    zd.push_back(cd(-1.0, 0.0));
    zd.push_back(cd(-1.0, 0.0));
    gain *= (num / den).real();

    const auto bpoly = detail::poly_from_roots(zd);
    const auto apoly = detail::poly_from_roots(pd);
    BandpassCoeffs c;
    for (int i = 0; i < 5; ++i) {
        c.b[static_cast<size_t>(i)] = gain * bpoly[static_cast<size_t>(i)].real();
        c.a[static_cast<size_t>(i)] = apoly[static_cast<size_t>(i)].real();
    }
    return c;
}

// Direct-form II transposed with explicit initial conditions.
inline std::vector<double> lfilter(const BandpassCoeffs& c, const std::vector<double>& x,
                                   std::array<double, 4> z = {}) {
    std::vector<double> y(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double xi = x[i];
        const double yi = c.b[0] * xi + z[0];
        z[0] = c.b[1] * xi - c.a[1] * yi + z[1];
        z[1] = c.b[2] * xi - c.a[2] * yi + z[2];
        z[2] = c.b[3] * xi - c.a[3] * yi + z[3];
        z[3] = c.b[4] * xi - c.a[4] * yi;
        y[i] = yi;
    }
    return y;
}

// Steady-state initial conditions for a unit-step input: solve
// (I - companion(a)^T) zi = b[1:] - a[1:] b[0].
inline std::array<double, 4> lfilter_zi(const BandpassCoeffs& c) {
    std::vector<std::vector<double>> M(4, std::vector<double>(4, 0.0));
    for (int i = 0; i < 4; ++i) {
        M[static_cast<size_t>(i)][0] += c.a[static_cast<size_t>(i) + 1];
        M[static_cast<size_t>(i)][static_cast<size_t>(i)] += 1.0;
        if (i + 1 < 4) M[static_cast<size_t>(i)][static_cast<size_t>(i) + 1] -= 1.0;
    }
    std::vector<double> rhs(4);
    for (int i = 0; i < 4; ++i)
        rhs[static_cast<size_t>(i)] = c.b[static_cast<size_t>(i) + 1] - c.a[static_cast<size_t>(i) + 1] * c.b[0];
    const auto zi = detail::solve_linear(std::move(M), std::move(rhs));
    return {zi[0], zi[1], zi[2], zi[3]};
}

// Forward-backward filtering with odd-symmetric edge extension (15 samples
// each side) and steady-state initial conditions, so a pure in-band tone
// comes back with zero phase shift.
inline std::vector<double> filtfilt(const BandpassCoeffs& c, const std::vector<double>& x) {
    constexpr int pad = 15;
    const int n = static_cast<int>(x.size());
    if (n <= pad + 3) detail::fail("filtfilt: needs more than 18 samples, got " + std::to_string(n));
    std::vector<double> ext;
    ext.reserve(x.size() + 2 * pad);
    for (int i = pad; i >= 1; --i) ext.push_back(2.0 * x[0] - x[static_cast<size_t>(i)]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (int i = 1; i <= pad; ++i)
        ext.push_back(2.0 * x[static_cast<size_t>(n - 1)] - x[static_cast<size_t>(n - 1 - i)]);

    const auto zi = lfilter_zi(c);
    auto scaled = [&](double v) {
        std::array<double, 4> z = zi;
        for (auto& zv : z) zv *= v;
        return z;
    };
    std::vector<double> fwd = lfilter(c, ext, scaled(ext.front()));
    std::reverse(fwd.begin(), fwd.end());
    std::vector<double> bwd = lfilter(c, fwd, scaled(fwd.front()));
    std::reverse(bwd.begin(), bwd.end());
    return {bwd.begin() + pad, bwd.begin() + pad + n};
}

inline std::vector<double> bandpass(const std::vector<double>& x, double fs, double lo = 0.75,
                                    double hi = 2.5) {
    return filtfilt(butter_bandpass(lo, hi, fs), x);
}

inline PulseTrace bandpass(const PulseTrace& t, double lo = 0.75, double hi = 2.5) {
    return {bandpass(t.samples, t.fps, lo, hi), t.fps};
}

inline void fft_inplace(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) detail::fail("fft: length must be a power of two");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                const auto u = a[i + k];
                const auto v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

struct Spectrum {
    std::vector<double> power;  // one-sided |X_k|^2, k = 0..nfft/2
    double bin_hz = 0.0;

    double bin_bpm(size_t k) const { return static_cast<double>(k) * bin_hz * 60.0; }
};

// Mean-subtract, Hann-window, zero-pad so bins are <= 0.5 BPM apart.
inline Spectrum power_spectrum(const std::vector<double>& x, double fs) {
    const size_t n = x.size();
    if (n < 2) detail::fail("power_spectrum: needs at least 2 samples");
    size_t nfft = 1;
    const auto want = static_cast<size_t>(std::ceil(120.0 * fs));
    while (nfft < std::max(n, want)) nfft <<= 1;

    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);

    std::vector<std::complex<double>> buf(nfft, 0.0);
    for (size_t i = 0; i < n; ++i) {
        const double w = 0.5 * (1.0 - std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(n - 1)));
        buf[i] = (x[i] - mean) * w;
    }
    fft_inplace(buf);
    Spectrum s;
    s.bin_hz = fs / static_cast<double>(nfft);
    s.power.resize(nfft / 2 + 1);
    for (size_t k = 0; k < s.power.size(); ++k) s.power[k] = std::norm(buf[k]);
    return s;
}

// Frequency (in BPM) of the strongest spectral bin inside [lo, hi] BPM;
// ties resolve toward the lower frequency.
inline double estimate_hr(const std::vector<double>& x, double fs, double lo_bpm = 45.0,
                          double hi_bpm = 150.0) {
    if (static_cast<double>(x.size()) < 2.0 * fs)
        detail::fail("estimate_hr: needs at least 2 s of samples, got " + std::to_string(x.size()));
    const double nyq_bpm = fs / 2.0 * 60.0;
    const double hi_eff = std::min(hi_bpm, nyq_bpm);
    if (lo_bpm > hi_eff) detail::fail("estimate_hr: search band is empty after Nyquist clipping");
    const Spectrum s = power_spectrum(x, fs);
    double best = -1.0, best_bpm = 0.0;
    for (size_t k = 0; k < s.power.size(); ++k) {
        const double f = s.bin_bpm(k);
        if (f < lo_bpm || f > hi_eff) continue;
        if (s.power[k] > best) {
            best = s.power[k];
            best_bpm = f;
        }
    }
    if (best < 0.0) detail::fail("estimate_hr: no spectral bins inside the search band");
    return best_bpm;
}

inline double estimate_hr(const PulseTrace& t, double lo_bpm = 45.0, double hi_bpm = 150.0) {
    return estimate_hr(t.samples, t.fps, lo_bpm, hi_bpm);
}

// Ratio of spectral power inside the heart-rate template (fundamental +- 6 BPM,
// first harmonic +- 12 BPM) to the rest of [30, 240] BPM, in dB. A zero
// complement is capped at +60 dB; a trace with no band power returns -60 dB.
inline double snr_db(const std::vector<double>& x, double fs, double gold_hr_bpm) {
    if (!(gold_hr_bpm >= 30.0 && gold_hr_bpm <= 240.0))
        detail::fail("snr: gold HR " + std::to_string(gold_hr_bpm) + " outside [30, 240] BPM");
    const Spectrum s = power_spectrum(x, fs);
    double sig = 0.0, noise = 0.0;
    for (size_t k = 0; k < s.power.size(); ++k) {
        const double f = s.bin_bpm(k);
        if (f < 30.0 || f > 240.0) continue;
        const bool in_template =
            std::abs(f - gold_hr_bpm) <= 6.0 || std::abs(f - 2.0 * gold_hr_bpm) <= 12.0;
        (in_template ? sig : noise) += s.power[k];
    }
    if (sig <= 0.0) return -60.0;
    if (noise <= 0.0) return 60.0;
    return 10.0 * std::log10(sig / noise);
}

inline double snr_db(const PulseTrace& t, double gold_hr_bpm) {
    return snr_db(t.samples, t.fps, gold_hr_bpm);
}

inline void require_pair(const std::vector<double>& a, const std::vector<double>& b, const char* who) {
    if (a.empty() || a.size() != b.size())
        detail::fail(std::string(who) + ": needs equal nonempty lengths, got " + std::to_string(a.size()) +
                     " and " + std::to_string(b.size()));
}

inline double mae(const std::vector<double>& gold, const std::vector<double>& est) {
    require_pair(gold, est, "mae");
    double acc = 0.0;
    for (size_t i = 0; i < gold.size(); ++i) acc += std::abs(est[i] - gold[i]);
    return acc / static_cast<double>(gold.size());
}

inline double rmse(const std::vector<double>& gold, const std::vector<double>& est) {
    require_pair(gold, est, "rmse");
    double acc = 0.0;
    for (size_t i = 0; i < gold.size(); ++i) {
        const double d = est[i] - gold[i];
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(gold.size()));
}

// Undefined (nullopt) when either side has zero variance.
inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
    require_pair(a, b, "pearson");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa == 0.0 || sbb == 0.0) return std::nullopt;
    return sab / std::sqrt(saa * sbb);
}

// Non-overlapping [start, end) segments; the tail remainder is dropped.
inline std::vector<std::pair<int, int>> split_windows(int n, int window = 360) {
    if (window < 1) detail::fail("split_windows: window must be >= 1");
    if (n < window)
        detail::fail("split_windows: input length " + std::to_string(n) + " shorter than one window of " +
                     std::to_string(window));
    std::vector<std::pair<int, int>> out;
    for (int s = 0; s + window <= n; s += window) out.emplace_back(s, s + window);
    return out;
}

// Integrate a per-frame derivative back to a waveform: cumulative sum,
// remove the slow trend with a centered 1 s moving average, band-pass.
inline std::vector<double> derivative_to_pulse(const std::vector<double>& deriv, double fs) {
    if (deriv.empty()) detail::fail("derivative_to_pulse: empty input");
    const int n = static_cast<int>(deriv.size());
    std::vector<double> cum(deriv.size());
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        acc += deriv[static_cast<size_t>(i)];
        cum[static_cast<size_t>(i)] = acc;
    }
    const int L = std::max(1, static_cast<int>(std::lround(fs)));
    const int left = (L - 1) / 2, right = L / 2;
    std::vector<double> prefix(deriv.size() + 1, 0.0);
    for (int i = 0; i < n; ++i) prefix[static_cast<size_t>(i) + 1] = prefix[static_cast<size_t>(i)] + cum[static_cast<size_t>(i)];
    std::vector<double> detr(deriv.size());
    for (int i = 0; i < n; ++i) {
        const int a = std::max(0, i - left), b = std::min(n - 1, i + right);
        const double m = (prefix[static_cast<size_t>(b) + 1] - prefix[static_cast<size_t>(a)]) /
                         static_cast<double>(b - a + 1);
        detr[static_cast<size_t>(i)] = cum[static_cast<size_t>(i)] - m;
    }
    return bandpass(detr, fs);
}

inline PulseTrace derivative_to_pulse(const PulseTrace& d) {
    return {derivative_to_pulse(d.samples, d.fps), d.fps};
}

// Per-window heart-rate record and aggregate metrics.
struct HrWindow {
    int index = 0;
    double est_hr = 0.0, gold_hr = 0.0, snr = 0.0;
    int start = 0, end = 0;
    std::string subject, group;  // evaluation bookkeeping (skin-type class)
};

struct GroupMetrics {
    int windows = 0;
    double mae = 0.0, rmse = 0.0, mean_snr = 0.0;
    std::optional<double> pearson;
};

struct MetricsReport {
    std::vector<HrWindow> windows;
    GroupMetrics overall;
    std::map<std::string, GroupMetrics> by_group;
};

inline GroupMetrics aggregate_windows(const std::vector<HrWindow>& ws) {
    if (ws.empty()) detail::fail("aggregate_windows: no windows");
    std::vector<double> gold, est;
    GroupMetrics m;
    for (const auto& w : ws) {
        gold.push_back(w.gold_hr);
        est.push_back(w.est_hr);
        m.mean_snr += w.snr;
    }
    m.windows = static_cast<int>(ws.size());
    m.mean_snr /= static_cast<double>(ws.size());
    m.mae = mae(gold, est);
    m.rmse = rmse(gold, est);
    m.pearson = pearson(gold, est);
    return m;
}

inline MetricsReport compute_metrics(std::vector<HrWindow> windows) {
    MetricsReport r;
    r.overall = aggregate_windows(windows);
    std::map<std::string, std::vector<HrWindow>> groups;
    for (const auto& w : windows) groups[w.group].push_back(w);
    if (groups.size() > 1 || (groups.size() == 1 && !groups.begin()->first.empty()))
        for (const auto& [name, ws] : groups) r.by_group[name] = aggregate_windows(ws);
    r.windows = std::move(windows);
    return r;
}

}  // namespace pulse

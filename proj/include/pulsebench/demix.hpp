#pragma once

// Classical pulse demixing from spatially averaged RGB traces, plus the
// pseudo-label generator built on top of it.

#include "sigproc.hpp"

namespace pulse {

enum class DemixMethod { Pos, Chrom, Ica, Gold };

inline const char* demix_method_name(DemixMethod m) {
    switch (m) {
        case DemixMethod::Pos: return "pos";
        case DemixMethod::Chrom: return "chrom";
        case DemixMethod::Ica: return "ica";
        case DemixMethod::Gold: return "gold";
    }
    return "?";
}

inline DemixMethod demix_method_from(const std::string& s) {
    if (s == "pos") return DemixMethod::Pos;
    if (s == "chrom") return DemixMethod::Chrom;
    if (s == "ica") return DemixMethod::Ica;
    if (s == "gold") return DemixMethod::Gold;
    detail::fail("unknown demix method '" + s + "' (expected pos|chrom|ica|gold)");
}

// Per-frame channel means over the whole frame or an optional 0/1 mask.
inline RgbTrace spatial_average(const FrameSequence& v, const std::vector<uint8_t>* mask = nullptr) {
    const int T = v.frame_count(), plane = v.height * v.width;
    if (T < 1) detail::fail("spatial_average: empty frame sequence");
    int active = plane;
    if (mask) {
        if (static_cast<int>(mask->size()) != plane)
            detail::fail("spatial_average: mask size " + std::to_string(mask->size()) +
                         " does not match frame area " + std::to_string(plane));
        active = 0;
        for (uint8_t m : *mask)
            if (m) ++active;
        if (active == 0) detail::fail("spatial_average: mask selects no pixels");
    }
    RgbTrace t;
    t.fps = v.fps;
    t.r.resize(static_cast<size_t>(T));
    t.g.resize(static_cast<size_t>(T));
    t.b.resize(static_cast<size_t>(T));
    for (int f = 0; f < T; ++f) {
        const uint8_t* px = v.frame(f);
        double acc[3] = {0.0, 0.0, 0.0};
        for (int p = 0; p < plane; ++p) {
            if (mask && !(*mask)[static_cast<size_t>(p)]) continue;
            acc[0] += px[p * 3 + 0];
            acc[1] += px[p * 3 + 1];
            acc[2] += px[p * 3 + 2];
        }
        const double den = 255.0 * active;
        t.r[static_cast<size_t>(f)] = acc[0] / den;
        t.g[static_cast<size_t>(f)] = acc[1] / den;
        t.b[static_cast<size_t>(f)] = acc[2] / den;
    }
    return t;
}

namespace detail {

inline double window_std(const std::vector<double>& x, size_t from, size_t len) {
    double m = 0.0;
    for (size_t i = 0; i < len; ++i) m += x[from + i];
    m /= static_cast<double>(len);
    double v = 0.0;
    for (size_t i = 0; i < len; ++i) {
        const double d = x[from + i] - m;
        v += d * d;
    }
    return std::sqrt(v / static_cast<double>(len));
}

// Shared sliding-window chrominance demixer: per window, mean-normalize each
// channel, project onto two chrominance axes, alpha-combine by their stds,
// zero-mean the combination and overlap-add. `axes` maps (Rn, Gn, Bn) to the
// two projections; `combine` forms the window signal from (s1, s2, alpha).
template <typename Project, typename Combine>
std::vector<double> windowed_demix(const RgbTrace& t, const Project& project, const Combine& combine) {
    t.validate();
    const size_t n = t.length();
    const size_t l = static_cast<size_t>(std::lround(1.6 * t.fps));
    if (n < l)
        fail("demix: trace of " + std::to_string(n) + " samples is shorter than one " +
             std::to_string(l) + "-sample window");
    std::vector<double> out(n, 0.0);
    std::vector<int> cover(n, 0);
    std::vector<double> s1(l), s2(l);
    for (size_t w = 0; w + l <= n; ++w) {
        double mr = 0.0, mg = 0.0, mb = 0.0;
        for (size_t i = 0; i < l; ++i) {
            mr += t.r[w + i];
            mg += t.g[w + i];
            mb += t.b[w + i];
        }
        mr = std::max(mr / static_cast<double>(l), 1e-12);
        mg = std::max(mg / static_cast<double>(l), 1e-12);
        mb = std::max(mb / static_cast<double>(l), 1e-12);
        for (size_t i = 0; i < l; ++i) {
            const double rn = t.r[w + i] / mr, gn = t.g[w + i] / mg, bn = t.b[w + i] / mb;
            const auto [p1, p2] = project(rn, gn, bn);
            s1[i] = p1;
            s2[i] = p2;
        }
        const double sd1 = window_std(s1, 0, l);
        const double sd2 = std::max(window_std(s2, 0, l), 1e-9);
        const double alpha = sd1 / sd2;
        double mean_h = 0.0;
        for (size_t i = 0; i < l; ++i) {
            s1[i] = combine(s1[i], s2[i], alpha);
            mean_h += s1[i];
        }
        mean_h /= static_cast<double>(l);
        for (size_t i = 0; i < l; ++i) {
            out[w + i] += s1[i] - mean_h;
            ++cover[w + i];
        }
    }
    // normalize by window coverage so the first/last 1.6 s are not
    // amplitude-tapered relative to the interior
    for (size_t i = 0; i < n; ++i) out[i] /= static_cast<double>(cover[i]);
    return out;
}

}  // namespace detail

// Plane-orthogonal-to-skin projection: s1 = Gn - Bn, s2 = -2Rn + Gn + Bn,
// h = s1 + (sd1/sd2) s2, stitched by overlap-add and band-passed.
inline PulseTrace pos(const RgbTrace& t) {
    auto raw = detail::windowed_demix(
        t, [](double r, double g, double b) { return std::pair<double, double>(g - b, -2.0 * r + g + b); },
        [](double a, double b, double alpha) { return a + alpha * b; });
    return {bandpass(raw, t.fps), t.fps};
}

// Chrominance-ratio projection: Xs = 3Rn - 2Gn, Ys = 1.5Rn + Gn - 1.5Bn,
// S = Xs - (sdX/sdY) Ys. The raw projection comes out pulse-inverted for
// blood-volume chrominance (green rises while X falls), so the stitched
// signal is negated to share the waveform orientation of pos() and the
// reference traces.
inline PulseTrace chrom(const RgbTrace& t) {
    auto raw = detail::windowed_demix(
        t,
        [](double r, double g, double b) {
            return std::pair<double, double>(3.0 * r - 2.0 * g, 1.5 * r + g - 1.5 * b);
        },
        [](double a, double b, double alpha) { return a - alpha * b; });
    for (auto& v : raw) v = -v;
    return {bandpass(raw, t.fps), t.fps};
}

namespace detail {

// Jacobi eigen-decomposition of a symmetric 3x3; returns eigenvalues and
// matching unit eigenvectors (as columns).
inline void eig_sym3(const std::array<std::array<double, 3>, 3>& A0, std::array<double, 3>& eval,
                     std::array<std::array<double, 3>, 3>& evec) {
    auto A = A0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) evec[static_cast<size_t>(i)][static_cast<size_t>(j)] = (i == j) ? 1.0 : 0.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = std::abs(A[0][1]) + std::abs(A[0][2]) + std::abs(A[1][2]);
        if (off < 1e-15) break;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                const auto pp = static_cast<size_t>(p), qq = static_cast<size_t>(q);
                if (std::abs(A[pp][qq]) < 1e-300) continue;
                const double theta = (A[qq][qq] - A[pp][pp]) / (2.0 * A[pp][qq]);
                const double tt = (theta >= 0.0 ? 1.0 : -1.0) /
                                  (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(tt * tt + 1.0), s = tt * c;
                for (int k = 0; k < 3; ++k) {
                    const auto kk = static_cast<size_t>(k);
                    const double akp = A[kk][pp], akq = A[kk][qq];
                    A[kk][pp] = c * akp - s * akq;
                    A[kk][qq] = s * akp + c * akq;
                }
                for (int k = 0; k < 3; ++k) {
                    const auto kk = static_cast<size_t>(k);
                    const double apk = A[pp][kk], aqk = A[qq][kk];
                    A[pp][kk] = c * apk - s * aqk;
                    A[qq][kk] = s * apk + c * aqk;
                }
                for (int k = 0; k < 3; ++k) {
                    const auto kk = static_cast<size_t>(k);
                    const double vkp = evec[kk][pp], vkq = evec[kk][qq];
                    evec[kk][pp] = c * vkp - s * vkq;
                    evec[kk][qq] = s * vkp + c * vkq;
                }
            }
    }
    for (int i = 0; i < 3; ++i) eval[static_cast<size_t>(i)] = A[static_cast<size_t>(i)][static_cast<size_t>(i)];
}

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 mat_mul(const Mat3& A, const Mat3& B) {
    Mat3 C{};
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k)
            for (int j = 0; j < 3; ++j)
                C[static_cast<size_t>(i)][static_cast<size_t>(j)] +=
                    A[static_cast<size_t>(i)][static_cast<size_t>(k)] * B[static_cast<size_t>(k)][static_cast<size_t>(j)];
    return C;
}

// B <- (B B^T)^(-1/2) B, making the rows orthonormal.
inline Mat3 sym_decorrelate(const Mat3& B) {
    Mat3 M{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k)
                M[static_cast<size_t>(i)][static_cast<size_t>(j)] +=
                    B[static_cast<size_t>(i)][static_cast<size_t>(k)] * B[static_cast<size_t>(j)][static_cast<size_t>(k)];
    std::array<double, 3> ev;
    Mat3 E;
    eig_sym3(M, ev, E);
    Mat3 invsqrt{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k)
                invsqrt[static_cast<size_t>(i)][static_cast<size_t>(j)] +=
                    E[static_cast<size_t>(i)][static_cast<size_t>(k)] / std::sqrt(std::max(ev[static_cast<size_t>(k)], 1e-300)) *
                    E[static_cast<size_t>(j)][static_cast<size_t>(k)];
    return mat_mul(invsqrt, B);
}

}  // namespace detail

// FastICA with a tanh contrast over the z-scored, eigen-whitened channels.
// The component with the largest share of its power inside 0.75-2.5 Hz is
// selected and sign-fixed against the band-passed, negated green channel.
inline PulseTrace ica(const RgbTrace& t) {
    t.validate();
    const size_t n = t.length();
    if (static_cast<double>(n) < 3.0 * t.fps)
        detail::fail("ica: needs at least 3 s of samples, got " + std::to_string(n));

    std::array<std::vector<double>, 3> X = {t.r, t.g, t.b};
    for (auto& ch : X) {
        double m = 0.0;
        for (double v : ch) m += v;
        m /= static_cast<double>(n);
        double var = 0.0;
        for (double v : ch) var += (v - m) * (v - m);
        const double sd = std::sqrt(var / static_cast<double>(n));
        if (sd < 1e-12) detail::fail("ica: a channel is constant (degenerate input)");
        for (auto& v : ch) v = (v - m) / sd;
    }

    detail::Mat3 cov{};
    for (int i = 0; i < 3; ++i)
        for (int j = i; j < 3; ++j) {
            double acc = 0.0;
            for (size_t k = 0; k < n; ++k) acc += X[static_cast<size_t>(i)][k] * X[static_cast<size_t>(j)][k];
            cov[static_cast<size_t>(i)][static_cast<size_t>(j)] = cov[static_cast<size_t>(j)][static_cast<size_t>(i)] =
                acc / static_cast<double>(n);
        }
    std::array<double, 3> ev;
    detail::Mat3 E;
    detail::eig_sym3(cov, ev, E);
    const double ev_max = std::max({ev[0], ev[1], ev[2]});
    if (std::min({ev[0], ev[1], ev[2]}) < 1e-12 * ev_max)
        detail::fail("ica: rank-deficient covariance (degenerate input)");

    // whiten: Z = D^(-1/2) E^T X
    std::array<std::vector<double>, 3> Z;
    for (int i = 0; i < 3; ++i) {
        Z[static_cast<size_t>(i)].resize(n);
        const double s = 1.0 / std::sqrt(ev[static_cast<size_t>(i)]);
        for (size_t k = 0; k < n; ++k)
            Z[static_cast<size_t>(i)][k] = s * (E[0][static_cast<size_t>(i)] * X[0][k] +
                                                E[1][static_cast<size_t>(i)] * X[1][k] +
                                                E[2][static_cast<size_t>(i)] * X[2][k]);
    }

    // fixed-point iterations from a fixed seeded start (determinism contract)
    std::mt19937 rng(0x1ca5eedu);
    std::normal_distribution<double> g01(0.0, 1.0);
    detail::Mat3 B;
    for (auto& row : B)
        for (auto& v : row) v = g01(rng);
    B = detail::sym_decorrelate(B);
    for (int iter = 0; iter < 200; ++iter) {
        detail::Mat3 Bn{};
        for (int c = 0; c < 3; ++c) {
            const auto cc = static_cast<size_t>(c);
            double ew[3] = {0.0, 0.0, 0.0}, edg = 0.0;
            for (size_t k = 0; k < n; ++k) {
                const double u = B[cc][0] * Z[0][k] + B[cc][1] * Z[1][k] + B[cc][2] * Z[2][k];
                const double gu = std::tanh(u);
                ew[0] += Z[0][k] * gu;
                ew[1] += Z[1][k] * gu;
                ew[2] += Z[2][k] * gu;
                edg += 1.0 - gu * gu;
            }
            for (int j = 0; j < 3; ++j)
                Bn[cc][static_cast<size_t>(j)] =
                    ew[j] / static_cast<double>(n) - edg / static_cast<double>(n) * B[cc][static_cast<size_t>(j)];
        }
        Bn = detail::sym_decorrelate(Bn);
        double delta = 0.0;
        for (int c = 0; c < 3; ++c) {
            double dot = 0.0;
            for (int j = 0; j < 3; ++j)
                dot += Bn[static_cast<size_t>(c)][static_cast<size_t>(j)] * B[static_cast<size_t>(c)][static_cast<size_t>(j)];
            delta = std::max(delta, std::abs(1.0 - std::abs(dot)));
        }
        B = Bn;
        if (delta < 1e-6) break;
    }

    // pick the component with the highest in-band power share
    double best_ratio = -1.0;
    std::vector<double> best;
    for (int c = 0; c < 3; ++c) {
        const auto cc = static_cast<size_t>(c);
        std::vector<double> s(n);
        for (size_t k = 0; k < n; ++k)
            s[k] = B[cc][0] * Z[0][k] + B[cc][1] * Z[1][k] + B[cc][2] * Z[2][k];
        const Spectrum sp = power_spectrum(s, t.fps);
        double in_band = 0.0, total = 0.0;
        for (size_t k = 0; k < sp.power.size(); ++k) {
            const double f = static_cast<double>(k) * sp.bin_hz;
            total += sp.power[k];
            if (f >= 0.75 && f <= 2.5) in_band += sp.power[k];
        }
        const double ratio = total > 0.0 ? in_band / total : 0.0;
        if (ratio > best_ratio) {
            best_ratio = ratio;
            best = std::move(s);
        }
    }

    std::vector<double> out = bandpass(best, t.fps);
    std::vector<double> gref = bandpass(X[1], t.fps);
    for (auto& v : gref) v = -v;
    const auto rho = pearson(out, gref);
    if (rho && *rho < 0.0)
        for (auto& v : out) v = -v;
    return {std::move(out), t.fps};
}

inline PulseTrace run_demixer(const RgbTrace& t, DemixMethod m) {
    switch (m) {
        case DemixMethod::Pos: return pos(t);
        case DemixMethod::Chrom: return chrom(t);
        case DemixMethod::Ica: return ica(t);
        case DemixMethod::Gold: break;
    }
    detail::fail("run_demixer: gold is not a demixer; pass the reference trace to make_pseudo_labels");
}

struct PseudoLabel {
    PulseTrace deriv;    // length = frames - 1; deriv[t] pairs with motion input t
    std::string source;  // pos | chrom | ica | gold
};

// Waveform -> per-frame derivative label: band-limited demixer output (or the
// reference trace), first-differenced and standardized. Flat outputs are an
// error: an all-zero label would make the training loss meaningless.
inline PseudoLabel make_pseudo_labels(const FrameSequence& frames, DemixMethod method = DemixMethod::Pos,
                                      const PulseTrace* gold = nullptr) {
    PulseTrace wave;
    if (method == DemixMethod::Gold) {
        if (!gold) detail::fail("make_pseudo_labels: gold method needs a reference trace");
        if (static_cast<int>(gold->samples.size()) != frames.frame_count())
            detail::fail("make_pseudo_labels: reference trace length " +
                         std::to_string(gold->samples.size()) + " does not match frame count " +
                         std::to_string(frames.frame_count()));
        wave = *gold;
    } else {
        wave = run_demixer(spatial_average(frames), method);
    }
    if (wave.samples.size() < 2) detail::fail("make_pseudo_labels: needs at least 2 frames");
    PseudoLabel out;
    out.source = demix_method_name(method);
    out.deriv.fps = wave.fps;
    out.deriv.samples.resize(wave.samples.size() - 1);
    for (size_t i = 0; i + 1 < wave.samples.size(); ++i)
        out.deriv.samples[i] = wave.samples[i + 1] - wave.samples[i];

    double m = 0.0;
    for (double v : out.deriv.samples) m += v;
    m /= static_cast<double>(out.deriv.samples.size());
    double var = 0.0;
    for (double v : out.deriv.samples) var += (v - m) * (v - m);
    const double sd = std::sqrt(var / static_cast<double>(out.deriv.samples.size()));
    if (sd < 1e-9)
        detail::fail("make_pseudo_labels: demixer output is flat (std < 1e-9); degenerate input video");
    for (auto& v : out.deriv.samples) v = (v - m) / sd;
    return out;
}

}  // namespace pulse

#include "rsed/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>
#include <stdexcept>

namespace rsed {

namespace {

constexpr double kPi = std::numbers::pi;

std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

// Minimal RAII wrapper around an r2c plan with owned buffers.
class RealFft {
public:
    explicit RealFft(int n) : n_(n) {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        in_ = fftw_alloc_real(static_cast<std::size_t>(n));
        out_ = fftw_alloc_complex(static_cast<std::size_t>(n) / 2 + 1);
        plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
        if (!plan_) throw std::runtime_error("fftw plan creation failed");
    }
    ~RealFft() {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        fftw_destroy_plan(plan_);
        fftw_free(in_);
        fftw_free(out_);
    }
    RealFft(const RealFft&) = delete;
    RealFft& operator=(const RealFft&) = delete;

    double* in() { return in_; }
    const fftw_complex* run() {
        fftw_execute(plan_);
        return out_;
    }
    int bins() const { return n_ / 2 + 1; }

private:
    int n_;
    double* in_;
    fftw_complex* out_;
    fftw_plan plan_;
};

std::vector<double> hann_window(int n) {
    std::vector<double> w(n);
    for (int i = 0; i < n; ++i)
        w[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / (n - 1)));
    return w;
}

// Power spectrogram: frames x bins, centered framing with zero padding.
std::vector<double> stft_power(const std::vector<double>& x, const FeatureConfig& cfg,
                               int n_frames) {
    const int bins = cfg.n_fft / 2 + 1;
    const auto window = hann_window(cfg.win_len);
    RealFft fft(cfg.n_fft);
    std::vector<double> power(static_cast<std::size_t>(n_frames) * bins);
    const int half = cfg.win_len / 2;
    for (int f = 0; f < n_frames; ++f) {
        const long center = static_cast<long>(f) * cfg.hop_len;
        double* in = fft.in();
        std::fill(in, in + cfg.n_fft, 0.0);
        for (int i = 0; i < cfg.win_len; ++i) {
            const long src = center - half + i;
            if (src >= 0 && src < static_cast<long>(x.size()))
                in[i] = x[static_cast<std::size_t>(src)] * window[i];
        }
        const fftw_complex* out = fft.run();
        double* row = power.data() + static_cast<std::size_t>(f) * bins;
        for (int k = 0; k < bins; ++k)
            row[k] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    }
    return power;
}

double erb_of_hz(double f) { return 21.4 * std::log10(1.0 + 0.00437 * f); }
double hz_of_erb(double e) { return (std::pow(10.0, e / 21.4) - 1.0) / 0.00437; }

// Triangular mel filterbank, rows (n_bands) over FFT bins.
std::vector<double> mel_filterbank(const FeatureConfig& cfg) {
    const int bins = cfg.n_fft / 2 + 1;
    std::vector<double> fb(static_cast<std::size_t>(cfg.n_bands) * bins, 0.0);
    std::vector<double> pts(static_cast<std::size_t>(cfg.n_bands) + 2);
    const double m_lo = mel_of_hz(cfg.f_min), m_hi = mel_of_hz(cfg.f_max);
    for (std::size_t i = 0; i < pts.size(); ++i)
        pts[i] = hz_of_mel(m_lo + (m_hi - m_lo) * static_cast<double>(i) / (pts.size() - 1));
    const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.n_fft;
    for (int b = 0; b < cfg.n_bands; ++b) {
        const double lo = pts[b], mid = pts[b + 1], hi = pts[b + 2];
        for (int k = 0; k < bins; ++k) {
            const double f = k * bin_hz;
            double w = 0.0;
            if (f > lo && f < mid)
                w = (f - lo) / (mid - lo);
            else if (f >= mid && f < hi)
                w = (hi - f) / (hi - mid);
            fb[static_cast<std::size_t>(b) * bins + k] = w;
        }
    }
    return fb;
}

// Fourth-order gammatone power response evaluated on FFT bins, ERB-spaced centers.
std::vector<double> gammatone_filterbank(const FeatureConfig& cfg) {
    const int bins = cfg.n_fft / 2 + 1;
    std::vector<double> fb(static_cast<std::size_t>(cfg.n_bands) * bins, 0.0);
    const double e_lo = erb_of_hz(cfg.f_min), e_hi = erb_of_hz(cfg.f_max);
    const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.n_fft;
    for (int b = 0; b < cfg.n_bands; ++b) {
        const double fc = hz_of_erb(e_lo + (e_hi - e_lo) * b / std::max(1, cfg.n_bands - 1));
        const double bw = 1.019 * 24.7 * (4.37 * fc / 1000.0 + 1.0);
        for (int k = 0; k < bins; ++k) {
            const double u = (k * bin_hz - fc) / bw;
            const double mag = std::pow(1.0 + u * u, -2.0); // |H| for order 4
            fb[static_cast<std::size_t>(b) * bins + k] = mag * mag;
        }
    }
    return fb;
}

// Direct constant-Q transform on its native frame grid (power values).
std::vector<double> cqt_power(const std::vector<double>& x, const FeatureConfig& cfg,
                              int* out_frames, int* out_hop) {
    const double octaves = std::log2(cfg.f_max / cfg.f_min);
    const double bpo = (cfg.n_bands - 1) / octaves;
    const double q = 1.0 / (std::pow(2.0, 1.0 / bpo) - 1.0);
    const int hop = cfg.hop_len * cfg.cqt_hop_factor;
    const int n_frames = 1 + static_cast<int>(x.size() / static_cast<std::size_t>(hop));
    *out_frames = n_frames;
    *out_hop = hop;

    std::vector<double> power(static_cast<std::size_t>(cfg.n_bands) * n_frames, 0.0);
    for (int b = 0; b < cfg.n_bands; ++b) {
        const double fk = cfg.f_min * std::pow(2.0, b / bpo);
        int nk = static_cast<int>(std::lround(q * cfg.sample_rate / fk));
        nk = std::max(4, nk);
        const auto window = hann_window(nk);
        double wsum = 0.0;
        for (double w : window) wsum += w;
        const double omega = 2.0 * kPi * fk / cfg.sample_rate;
        for (int f = 0; f < n_frames; ++f) {
            const long center = static_cast<long>(f) * hop;
            double re = 0.0, im = 0.0;
            for (int i = 0; i < nk; ++i) {
                const long src = center - nk / 2 + i;
                if (src < 0 || src >= static_cast<long>(x.size())) continue;
                const double v = x[static_cast<std::size_t>(src)] * window[i];
                const double phase = omega * (i - nk / 2);
                re += v * std::cos(phase);
                im -= v * std::sin(phase);
            }
            re /= wsum;
            im /= wsum;
            power[static_cast<std::size_t>(b) * n_frames + f] = re * re + im * im;
        }
    }
    return power;
}

} // namespace

void FeatureConfig::validate() const {
    if (!(hop_len <= win_len && win_len <= n_fft))
        throw std::invalid_argument("feature config: need hop_len <= win_len <= n_fft");
    if (!(f_min < f_max && f_max <= sample_rate / 2.0))
        throw std::invalid_argument("feature config: need f_min < f_max <= sample_rate/2");
    if (n_bands <= 0) throw std::invalid_argument("feature config: n_bands must be positive");
    if (hop_len <= 0) throw std::invalid_argument("feature config: hop_len must be positive");
    if ((n_fft & (n_fft - 1)) != 0)
        throw std::invalid_argument("feature config: n_fft must be a power of two");
    if (channels.empty()) throw std::invalid_argument("feature config: no channels");
}

std::uint64_t FeatureConfig::hash() const {
    // FNV-1a over the canonical field serialization.
    std::string s = std::to_string(sample_rate) + "|" + std::to_string(n_fft) + "|" +
                    std::to_string(win_len) + "|" + std::to_string(hop_len) + "|" +
                    std::to_string(f_min) + "|" + std::to_string(f_max) + "|" +
                    std::to_string(n_bands) + "|" + std::to_string(log_floor) + "|" +
                    std::to_string(norm_eps) + "|" + std::to_string(cqt_hop_factor) + "|";
    for (auto c : channels) s += std::to_string(static_cast<int>(c)) + ",";
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

double mel_of_hz(double f) {
    if (f < 0.0) throw std::domain_error("mel_of_hz: negative frequency");
    return 2595.0 * std::log10(1.0 + f / 700.0);
}

double hz_of_mel(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

SpectrogramStack compute_stack(const AudioClip& clip, const FeatureConfig& cfg) {
    cfg.validate();
    if (clip.sample_rate != cfg.sample_rate)
        throw std::invalid_argument("compute_stack: clip sample rate does not match config");
    if (static_cast<int>(clip.samples.size()) < cfg.win_len)
        throw std::invalid_argument("compute_stack: clip shorter than one analysis window");

    const int n_frames = frame_count(clip.samples.size(), cfg.hop_len);
    const int bins = cfg.n_fft / 2 + 1;

    SpectrogramStack stack;
    stack.channels = static_cast<int>(cfg.channels.size());
    stack.n_bands = cfg.n_bands;
    stack.frames = n_frames;
    stack.source_duration_s = clip.duration_s;
    stack.values.assign(static_cast<std::size_t>(stack.channels) * cfg.n_bands * n_frames, 0.0);
    stack.frame_times.resize(n_frames);
    for (int f = 0; f < n_frames; ++f)
        stack.frame_times[f] = static_cast<double>(f) * cfg.hop_len / cfg.sample_rate;

    const bool needs_fft =
        std::any_of(cfg.channels.begin(), cfg.channels.end(),
                    [](SpecChannel c) { return c != SpecChannel::Cqt; });
    std::vector<double> power;
    if (needs_fft) power = stft_power(clip.samples, cfg, n_frames);

    std::vector<double> cqt;
    int cqt_frames = 0, cqt_hop = 0;
    if (std::any_of(cfg.channels.begin(), cfg.channels.end(),
                    [](SpecChannel c) { return c == SpecChannel::Cqt; }))
        cqt = cqt_power(clip.samples, cfg, &cqt_frames, &cqt_hop);

    const auto apply_bank = [&](int ch, const std::vector<double>& fb) {
        for (int b = 0; b < cfg.n_bands; ++b) {
            const double* w = fb.data() + static_cast<std::size_t>(b) * bins;
            for (int f = 0; f < n_frames; ++f) {
                const double* p = power.data() + static_cast<std::size_t>(f) * bins;
                double s = 0.0;
                for (int k = 0; k < bins; ++k) s += w[k] * p[k];
                stack.at(ch, b, f) = std::log(s + cfg.log_floor);
            }
        }
    };

    for (int ch = 0; ch < stack.channels; ++ch) {
        switch (cfg.channels[static_cast<std::size_t>(ch)]) {
        case SpecChannel::Mel:
            apply_bank(ch, mel_filterbank(cfg));
            break;
        case SpecChannel::Gamma:
            apply_bank(ch, gammatone_filterbank(cfg));
            break;
        case SpecChannel::Cqt: {
            // Interpolate native-hop CQT frames onto the STFT frame grid.
            for (int b = 0; b < cfg.n_bands; ++b) {
                const double* row = cqt.data() + static_cast<std::size_t>(b) * cqt_frames;
                for (int f = 0; f < n_frames; ++f) {
                    const double t = static_cast<double>(f) * cfg.hop_len / cqt_hop;
                    const int i0 = std::min(static_cast<int>(t), cqt_frames - 1);
                    const int i1 = std::min(i0 + 1, cqt_frames - 1);
                    const double frac = std::clamp(t - i0, 0.0, 1.0);
                    const double p = row[i0] + frac * (row[i1] - row[i0]);
                    stack.at(ch, b, f) = std::log(p + cfg.log_floor);
                }
            }
            break;
        }
        }
    }
    return stack;
}

SpectrogramStack row_normalize(const SpectrogramStack& stack, double eps) {
    SpectrogramStack out = stack;
    for (int c = 0; c < stack.channels; ++c)
        for (int b = 0; b < stack.n_bands; ++b) {
            double mean = 0.0;
            for (int f = 0; f < stack.frames; ++f) mean += stack.at(c, b, f);
            mean /= stack.frames;
            double var = 0.0;
            for (int f = 0; f < stack.frames; ++f) {
                const double d = stack.at(c, b, f) - mean;
                var += d * d;
            }
            var /= stack.frames;
            // epsilon guards the denominator: rows at or below it are treated
            // as constant and zeroed, keeping the transform idempotent
            if (var <= eps) {
                for (int f = 0; f < stack.frames; ++f) out.at(c, b, f) = 0.0;
                continue;
            }
            const double inv = 1.0 / std::sqrt(var);
            for (int f = 0; f < stack.frames; ++f)
                out.at(c, b, f) = (stack.at(c, b, f) - mean) * inv;
        }
    return out;
}

AudioClip augment_noise(const AudioClip& clip, double snr_db, std::mt19937_64& rng) {
    AudioClip out = clip;
    double rms = 0.0;
    for (double v : clip.samples) rms += v * v;
    rms = std::sqrt(rms / std::max<std::size_t>(1, clip.samples.size()));
    if (rms <= 0.0) return out;
    const double noise_std = rms / std::pow(10.0, snr_db / 20.0);
    std::normal_distribution<double> dist(0.0, noise_std);
    for (double& v : out.samples) v += dist(rng);
    return out;
}

AudioClip augment_time_stretch(const AudioClip& clip, double factor) {
    if (factor <= 0.0) throw std::invalid_argument("time_stretch: factor must be positive");
    AudioClip out;
    out.sample_rate = clip.sample_rate;
    out.meta = clip.meta;
    const std::size_t n_out = static_cast<std::size_t>(
        std::llround(static_cast<double>(clip.samples.size()) * factor));
    out.samples.resize(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double pos = static_cast<double>(i) / factor;
        const std::size_t i0 = std::min(static_cast<std::size_t>(pos), clip.samples.size() - 1);
        const std::size_t i1 = std::min(i0 + 1, clip.samples.size() - 1);
        const double frac = pos - static_cast<double>(i0);
        out.samples[i] = clip.samples[i0] + frac * (clip.samples[i1] - clip.samples[i0]);
    }
    out.duration_s = static_cast<double>(n_out) / out.sample_rate;
    for (const auto& ev : clip.events) {
        EventRecord e = ev;
        e.onset_s = ev.onset_s * factor;
        e.offset_s = std::min(ev.offset_s * factor, out.duration_s);
        if (e.offset_s > e.onset_s) out.events.push_back(e);
    }
    return out;
}

AudioClip augment_vtlp(const AudioClip& clip, double warp) {
    if (warp <= 0.0) throw std::invalid_argument("vtlp: warp factor must be positive");
    const int n_fft = 1024;
    const int hop = n_fft / 4;
    const auto window = hann_window(n_fft);
    const int bins = n_fft / 2 + 1;
    const std::size_t n = clip.samples.size();
    const int n_frames = 1 + static_cast<int>(n / static_cast<std::size_t>(hop));

    // Piecewise-linear warp: slope `warp` below the knee, then mapped back so
    // Nyquist stays fixed.
    const double nyq = static_cast<double>(bins - 1);
    const double knee = 0.8 * nyq / std::max(1.0, warp);
    const auto warp_bin = [&](double k) {
        if (k <= knee) return k * warp;
        const double y0 = knee * warp;
        return y0 + (nyq - y0) * (k - knee) / (nyq - knee);
    };

    RealFft fft(n_fft);
    std::vector<double> acc(n, 0.0), wacc(n, 0.0);
    std::vector<double> re(bins), im(bins), wre(bins), wim(bins);
    std::vector<double> full(2 * n_fft);

    // Inverse transform by direct evaluation of the real IDFT from half spectrum.
    std::vector<double> frame(n_fft);
    fftw_complex* spec_buf = fftw_alloc_complex(static_cast<std::size_t>(bins));
    fftw_plan c2r;
    {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        c2r = fftw_plan_dft_c2r_1d(n_fft, spec_buf, frame.data(), FFTW_ESTIMATE);
    }

    for (int f = 0; f < n_frames; ++f) {
        const long center = static_cast<long>(f) * hop;
        double* in = fft.in();
        std::fill(in, in + n_fft, 0.0);
        for (int i = 0; i < n_fft; ++i) {
            const long src = center - n_fft / 2 + i;
            if (src >= 0 && src < static_cast<long>(n))
                in[i] = clip.samples[static_cast<std::size_t>(src)] * window[i];
        }
        const fftw_complex* out = fft.run();
        for (int k = 0; k < bins; ++k) {
            re[k] = out[k][0];
            im[k] = out[k][1];
        }
        // Resample the spectrum: new bin k reads source position inverse-warped.
        for (int k = 0; k < bins; ++k) {
            // invert the monotone warp by bisection on [0, nyq]
            double lo = 0.0, hi = nyq;
            for (int it = 0; it < 40; ++it) {
                const double mid = 0.5 * (lo + hi);
                if (warp_bin(mid) < k)
                    lo = mid;
                else
                    hi = mid;
            }
            const double srcp = 0.5 * (lo + hi);
            const int i0 = std::min(static_cast<int>(srcp), bins - 1);
            const int i1 = std::min(i0 + 1, bins - 1);
            const double frac = std::clamp(srcp - i0, 0.0, 1.0);
            wre[k] = re[i0] + frac * (re[i1] - re[i0]);
            wim[k] = im[i0] + frac * (im[i1] - im[i0]);
        }
        for (int k = 0; k < bins; ++k) {
            spec_buf[k][0] = wre[k] / n_fft;
            spec_buf[k][1] = wim[k] / n_fft;
        }
        fftw_execute(c2r);
        for (int i = 0; i < n_fft; ++i) {
            const long dst = center - n_fft / 2 + i;
            if (dst >= 0 && dst < static_cast<long>(n)) {
                acc[static_cast<std::size_t>(dst)] += frame[i] * window[i];
                wacc[static_cast<std::size_t>(dst)] += window[i] * window[i];
            }
        }
    }
    {
        std::lock_guard<std::mutex> lock(fftw_planner_mutex());
        fftw_destroy_plan(c2r);
        fftw_free(spec_buf);
    }

    AudioClip out = clip;
    for (std::size_t i = 0; i < n; ++i)
        out.samples[i] = acc[i] / std::max(wacc[i], 1e-8);
    return out;
}

AudioClip augment_time_shift(const AudioClip& clip, double shift_s, double min_fragment_s) {
    const double dur = clip.duration_s;
    if (std::abs(shift_s) > dur)
        throw std::invalid_argument("time_shift: shift exceeds clip duration");
    AudioClip out = clip;
    out.events.clear();

    const std::size_t n = clip.samples.size();
    const long shift = static_cast<long>(std::llround(shift_s * clip.sample_rate));
    for (std::size_t i = 0; i < n; ++i) {
        long dst = (static_cast<long>(i) + shift) % static_cast<long>(n);
        if (dst < 0) dst += static_cast<long>(n);
        out.samples[static_cast<std::size_t>(dst)] = clip.samples[i];
    }

    for (const auto& ev : clip.events) {
        double onset = std::fmod(ev.onset_s + shift_s, dur);
        if (onset < 0.0) onset += dur;
        const double len = ev.offset_s - ev.onset_s;
        const double offset = onset + len;
        const auto emit = [&](double a, double b) {
            if (b - a >= min_fragment_s) {
                EventRecord e = ev;
                e.onset_s = a;
                e.offset_s = b;
                out.events.push_back(e);
            }
        };
        if (offset <= dur + 1e-12) {
            emit(onset, std::min(offset, dur));
        } else {
            emit(onset, dur);
            emit(0.0, offset - dur);
        }
    }
    std::sort(out.events.begin(), out.events.end(),
              [](const EventRecord& a, const EventRecord& b) { return a.onset_s < b.onset_s; });
    return out;
}

SpectrogramStack mask_spectrogram_at(const SpectrogramStack& stack, MaskAxis axis, int width,
                                     const std::vector<int>& starts) {
    const int extent = axis == MaskAxis::Time ? stack.frames : stack.n_bands;
    if (width >= extent)
        throw std::invalid_argument("mask_spectrogram: width must be below the axis extent");
    SpectrogramStack out = stack;
    for (int c = 0; c < stack.channels; ++c)
        for (int b = 0; b < stack.n_bands; ++b) {
            double mean = 0.0;
            for (int f = 0; f < stack.frames; ++f) mean += stack.at(c, b, f);
            mean /= stack.frames;
            for (int s : starts) {
                if (axis == MaskAxis::Time) {
                    for (int f = s; f < std::min(s + width, stack.frames); ++f)
                        out.at(c, b, f) = mean;
                } else if (b >= s && b < s + width) {
                    for (int f = 0; f < stack.frames; ++f) out.at(c, b, f) = mean;
                }
            }
        }
    return out;
}

SpectrogramStack mask_spectrogram(const SpectrogramStack& stack, MaskAxis axis, int width,
                                  int count, std::mt19937_64& rng) {
    if (count <= 0) return stack;
    const int extent = axis == MaskAxis::Time ? stack.frames : stack.n_bands;
    if (width >= extent)
        throw std::invalid_argument("mask_spectrogram: width must be below the axis extent");
    std::uniform_int_distribution<int> dist(0, extent - width);
    std::vector<int> starts;
    for (int i = 0; i < count; ++i) starts.push_back(dist(rng));
    return mask_spectrogram_at(stack, axis, width, starts);
}

void save_feature_cache(const std::filesystem::path& path, const SpectrogramStack& stack,
                        std::uint64_t config_hash) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write feature cache: " + path.string());
    out.write("RSEDFT01", 8);
    out.write(reinterpret_cast<const char*>(&config_hash), 8);
    const std::int32_t dims[3] = {stack.channels, stack.n_bands, stack.frames};
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    out.write(reinterpret_cast<const char*>(&stack.source_duration_s), 8);
    out.write(reinterpret_cast<const char*>(stack.frame_times.data()),
              static_cast<std::streamsize>(stack.frame_times.size() * 8));
    out.write(reinterpret_cast<const char*>(stack.values.data()),
              static_cast<std::streamsize>(stack.values.size() * 8));
}

std::optional<SpectrogramStack> load_feature_cache(const std::filesystem::path& path,
                                                   std::uint64_t config_hash) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return std::nullopt;
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "RSEDFT01", 8) != 0) return std::nullopt;
    std::uint64_t hash = 0;
    in.read(reinterpret_cast<char*>(&hash), 8);
    if (hash != config_hash) return std::nullopt;
    std::int32_t dims[3];
    in.read(reinterpret_cast<char*>(dims), sizeof(dims));
    SpectrogramStack stack;
    stack.channels = dims[0];
    stack.n_bands = dims[1];
    stack.frames = dims[2];
    in.read(reinterpret_cast<char*>(&stack.source_duration_s), 8);
    stack.frame_times.resize(static_cast<std::size_t>(stack.frames));
    in.read(reinterpret_cast<char*>(stack.frame_times.data()),
            static_cast<std::streamsize>(stack.frame_times.size() * 8));
    stack.values.resize(static_cast<std::size_t>(stack.channels) * stack.n_bands * stack.frames);
    in.read(reinterpret_cast<char*>(stack.values.data()),
            static_cast<std::streamsize>(stack.values.size() * 8));
    if (!in) return std::nullopt;
    return stack;
}

} // namespace rsed

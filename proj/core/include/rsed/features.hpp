#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rsed/audio.hpp"

namespace rsed {

/// Spectrogram front-end configuration. Channel order is configurable; each
/// entry selects one filterbank family.
enum class SpecChannel { Mel, Gamma, Cqt };

struct FeatureConfig {
    int sample_rate = 8000;
    int n_fft = 1024;
    int win_len = 1000;
    int hop_len = 128;
    double f_min = 32.7;
    double f_max = 4000.0;
    int n_bands = 84;
    std::vector<SpecChannel> channels{SpecChannel::Mel, SpecChannel::Gamma, SpecChannel::Cqt};
    double log_floor = 1e-10;
    double norm_eps = 1e-8;
    int cqt_hop_factor = 4; // CQT native hop = hop_len * factor, then time-interpolated

    void validate() const;
    std::uint64_t hash() const;
};

/// Multi-channel log-power spectrogram, all channels on one frame grid.
struct SpectrogramStack {
    int channels = 0;
    int n_bands = 0;
    int frames = 0;
    std::vector<double> values;      // (channels, n_bands, frames) row-major
    std::vector<double> frame_times; // frame center, seconds
    double source_duration_s = 0.0;

    double& at(int c, int b, int f) {
        return values[(static_cast<std::size_t>(c) * n_bands + b) * frames + f];
    }
    double at(int c, int b, int f) const {
        return values[(static_cast<std::size_t>(c) * n_bands + b) * frames + f];
    }
};

/// Mel scale conversion; throws std::domain_error on negative input.
double mel_of_hz(double f);
double hz_of_mel(double m);

/// Frame count under the centered framing contract.
inline int frame_count(std::size_t samples, int hop_len) {
    return 1 + static_cast<int>(samples / static_cast<std::size_t>(hop_len));
}

/// Full three-channel extraction. Requires at least one analysis window of audio.
SpectrogramStack compute_stack(const AudioClip& clip, const FeatureConfig& cfg);

/// Per-(channel, band) z-score with epsilon guard; constant rows map to zeros.
SpectrogramStack row_normalize(const SpectrogramStack& stack, double eps = 1e-8);

// ---- waveform augmentation ----

/// Adds white Gaussian noise at the given SNR (dB); events unchanged.
AudioClip augment_noise(const AudioClip& clip, double snr_db, std::mt19937_64& rng);

/// Linear time stretch by `factor` (> 0); event times are rescaled.
AudioClip augment_time_stretch(const AudioClip& clip, double factor);

/// Vocal tract length perturbation via STFT-domain frequency warping;
/// events unchanged.
AudioClip augment_vtlp(const AudioClip& clip, double warp);

/// Circular time shift. Events are shifted modulo the duration; an event
/// crossing the clip boundary splits into two fragments. Fragments shorter
/// than min_fragment_s are dropped.
AudioClip augment_time_shift(const AudioClip& clip, double shift_s,
                             double min_fragment_s = 0.05);

// ---- spectrogram augmentation ----

enum class MaskAxis { Time, Frequency };

/// Masks `count` random stripes of `width` along the axis, filling masked
/// cells with that row's mean value.
SpectrogramStack mask_spectrogram(const SpectrogramStack& stack, MaskAxis axis, int width,
                                  int count, std::mt19937_64& rng);

/// Deterministic variant with explicit stripe start positions.
SpectrogramStack mask_spectrogram_at(const SpectrogramStack& stack, MaskAxis axis, int width,
                                     const std::vector<int>& starts);

// ---- feature cache ----

/// Binary feature container keyed by a config hash; load returns nothing on
/// missing file or stale hash.
void save_feature_cache(const std::filesystem::path& path, const SpectrogramStack& stack,
                        std::uint64_t config_hash);
std::optional<SpectrogramStack> load_feature_cache(const std::filesystem::path& path,
                                                   std::uint64_t config_hash);

} // namespace rsed

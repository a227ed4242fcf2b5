#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "rsed/event.hpp"

namespace rsed {

/// Optional per-clip recording metadata used for one-hot side inputs.
struct ClipMeta {
    std::string position; // auscultation position token, may be empty
    std::string gender;   // gender token, may be empty
};

/// A mono waveform with its event annotations.
struct AudioClip {
    std::vector<double> samples; // in [-1, 1]
    int sample_rate = 0;
    double duration_s = 0.0;
    std::vector<EventRecord> events;
    ClipMeta meta;

    /// Checks sample count vs duration and event bounds; throws on violation.
    void validate() const;
};

/// Reads a mono WAV file (PCM16 or IEEE float32). Resamples to target_rate
/// when given (> 0) and the file rate differs.
AudioClip read_wav(const std::filesystem::path& path, int target_rate = 0);

/// Writes mono PCM16 WAV.
void write_wav(const std::filesystem::path& path, const std::vector<double>& samples,
               int sample_rate);

/// Linear-interpolation resampler; preserves duration.
std::vector<double> resample_linear(const std::vector<double>& x, int from_rate, int to_rate);

} // namespace rsed

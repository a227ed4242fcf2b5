#pragma once

#include <random>
#include <string>
#include <vector>

#include "rsed/audio.hpp"

namespace rsed::testing {

/// Two distinguishable burst families for synthetic detection clips:
/// class 0 = narrowband tone burst, class 1 = broadband high-band noise burst.
struct SyntheticEventSpec {
    double onset_s = 0.0;
    double offset_s = 0.0;
    int cls = 0;
};

/// A clip of background noise with band-limited bursts injected at the given
/// event positions. Labels use the provided vocabulary names.
AudioClip make_burst_clip(double duration_s, int sample_rate,
                          const std::vector<SyntheticEventSpec>& events,
                          const std::vector<std::string>& class_names, std::uint64_t seed);

/// A plain noise clip.
AudioClip make_noise_clip(double duration_s, int sample_rate, std::uint64_t seed,
                          double amplitude = 0.05);

} // namespace rsed::testing

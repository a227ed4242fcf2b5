#include "synthetic.hpp"

#include <cmath>
#include <numbers>

namespace rsed::testing {

AudioClip make_noise_clip(double duration_s, int sample_rate, std::uint64_t seed,
                          double amplitude) {
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.duration_s = duration_s;
    const std::size_t n = static_cast<std::size_t>(std::llround(duration_s * sample_rate));
    clip.samples.resize(n);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, amplitude);
    for (double& s : clip.samples) s = noise(rng);
    return clip;
}

AudioClip make_burst_clip(double duration_s, int sample_rate,
                          const std::vector<SyntheticEventSpec>& events,
                          const std::vector<std::string>& class_names, std::uint64_t seed) {
    AudioClip clip = make_noise_clip(duration_s, sample_rate, seed, 0.01);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::normal_distribution<double> wide(0.0, 1.0);

    for (const auto& ev : events) {
        const std::size_t a = static_cast<std::size_t>(ev.onset_s * sample_rate);
        const std::size_t b = std::min(clip.samples.size(),
                                       static_cast<std::size_t>(ev.offset_s * sample_rate));
        const double len = static_cast<double>(b - a);
        for (std::size_t i = a; i < b; ++i) {
            const double t = static_cast<double>(i) / sample_rate;
            // half-sine envelope keeps burst edges smooth
            const double env = std::sin(std::numbers::pi * static_cast<double>(i - a) / len);
            double v = 0.0;
            if (ev.cls == 0) {
                v = 0.5 * std::sin(2.0 * std::numbers::pi * 400.0 * t) +
                    0.2 * std::sin(2.0 * std::numbers::pi * 800.0 * t);
            } else {
                // high-band noise: differenced white noise emphasizes high freq
                const double w0 = wide(rng), w1 = wide(rng);
                v = 0.35 * (w1 - w0);
            }
            clip.samples[i] += env * v;
        }
        EventRecord e;
        e.onset_s = ev.onset_s;
        e.offset_s = ev.offset_s;
        e.label = class_names.at(static_cast<std::size_t>(ev.cls));
        clip.events.push_back(e);
    }
    return clip;
}

} // namespace rsed::testing

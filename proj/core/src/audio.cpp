#include "rsed/audio.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace rsed {

namespace {

struct RiffHeader {
    std::uint16_t format = 0;
    std::uint16_t channels = 0;
    std::uint32_t sample_rate = 0;
    std::uint16_t bits = 0;
};

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t read_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

void write_u16(std::ostream& out, std::uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    out.write(b, 2);
}

} // namespace

void AudioClip::validate() const {
    const double expected = duration_s * sample_rate;
    if (std::abs(expected - static_cast<double>(samples.size())) > 1.5)
        throw std::runtime_error("audio clip: duration does not match sample count");
    for (const auto& ev : events) {
        if (!(ev.onset_s >= 0.0 && ev.onset_s < ev.offset_s && ev.offset_s <= duration_s + 1e-9))
            throw std::runtime_error("audio clip: event outside [0, duration]: " + ev.label);
    }
}

AudioClip read_wav(const std::filesystem::path& path, int target_rate) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open wav file: " + path.string());

    char tag[4];
    in.read(tag, 4);
    if (std::memcmp(tag, "RIFF", 4) != 0)
        throw std::runtime_error("not a RIFF file: " + path.string());
    read_u32(in); // riff size
    in.read(tag, 4);
    if (std::memcmp(tag, "WAVE", 4) != 0)
        throw std::runtime_error("not a WAVE file: " + path.string());

    RiffHeader hdr;
    std::vector<char> payload;
    bool have_fmt = false, have_data = false;
    while (in && !(have_fmt && have_data)) {
        in.read(tag, 4);
        if (!in) break;
        const std::uint32_t size = read_u32(in);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            hdr.format = read_u16(in);
            hdr.channels = read_u16(in);
            hdr.sample_rate = read_u32(in);
            read_u32(in); // byte rate
            read_u16(in); // block align
            hdr.bits = read_u16(in);
            if (size > 16) in.seekg(size - 16, std::ios::cur);
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            payload.resize(size);
            in.read(payload.data(), size);
            have_data = true;
        } else {
            in.seekg(size + (size & 1u), std::ios::cur);
        }
    }
    if (!have_fmt || !have_data)
        throw std::runtime_error("missing fmt/data chunk: " + path.string());
    if (hdr.channels != 1)
        throw std::runtime_error("expected mono audio: " + path.string());

    std::vector<double> samples;
    if (hdr.format == 1 && hdr.bits == 16) {
        const std::size_t n = payload.size() / 2;
        samples.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::int16_t s;
            std::memcpy(&s, payload.data() + i * 2, 2);
            samples[i] = static_cast<double>(s) / 32768.0;
        }
    } else if (hdr.format == 3 && hdr.bits == 32) {
        const std::size_t n = payload.size() / 4;
        samples.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            float s;
            std::memcpy(&s, payload.data() + i * 4, 4);
            samples[i] = static_cast<double>(s);
        }
    } else {
        throw std::runtime_error("unsupported wav encoding (want PCM16 or float32): " +
                                 path.string());
    }

    AudioClip clip;
    clip.sample_rate = static_cast<int>(hdr.sample_rate);
    clip.samples = std::move(samples);
    if (target_rate > 0 && target_rate != clip.sample_rate) {
        clip.samples = resample_linear(clip.samples, clip.sample_rate, target_rate);
        clip.sample_rate = target_rate;
    }
    clip.duration_s = static_cast<double>(clip.samples.size()) / clip.sample_rate;
    return clip;
}

void write_wav(const std::filesystem::path& path, const std::vector<double>& samples,
               int sample_rate) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write wav file: " + path.string());
    const std::uint32_t data_size = static_cast<std::uint32_t>(samples.size() * 2);
    out.write("RIFF", 4);
    write_u32(out, 36 + data_size);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    write_u32(out, 16);
    write_u16(out, 1); // PCM
    write_u16(out, 1); // mono
    write_u32(out, static_cast<std::uint32_t>(sample_rate));
    write_u32(out, static_cast<std::uint32_t>(sample_rate * 2));
    write_u16(out, 2);
    write_u16(out, 16);
    out.write("data", 4);
    write_u32(out, data_size);
    for (double v : samples) {
        const long scaled = std::lround(std::clamp(v, -1.0, 1.0) * 32768.0);
        const std::int16_t s = static_cast<std::int16_t>(std::clamp(scaled, -32768l, 32767l));
        char b[2] = {static_cast<char>(s & 0xff), static_cast<char>((s >> 8) & 0xff)};
        out.write(b, 2);
    }
}

std::vector<double> resample_linear(const std::vector<double>& x, int from_rate, int to_rate) {
    if (from_rate <= 0 || to_rate <= 0)
        throw std::invalid_argument("resample: rates must be positive");
    if (from_rate == to_rate || x.empty()) return x;
    const double ratio = static_cast<double>(from_rate) / to_rate;
    const std::size_t n_out = static_cast<std::size_t>(
        std::llround(static_cast<double>(x.size()) * to_rate / from_rate));
    std::vector<double> y(n_out);
    for (std::size_t i = 0; i < n_out; ++i) {
        const double pos = static_cast<double>(i) * ratio;
        const std::size_t i0 = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(i0);
        const double a = i0 < x.size() ? x[i0] : x.back();
        const double b = i0 + 1 < x.size() ? x[i0 + 1] : x.back();
        y[i] = a + frac * (b - a);
    }
    return y;
}

} // namespace rsed

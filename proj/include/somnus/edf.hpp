#pragma once

// Minimal EDF: continuous single-channel extraction and a writer for
// fixtures. No EDF+ annotations or discontinuous records.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include "somnus/errors.hpp"

namespace somnus::edf {

struct Signal {
    std::string label;
    double sample_rate = 0.0;
    std::vector<double> samples;  // physical units
    double physical_min = -500.0, physical_max = 500.0;
};

namespace detail {

inline std::string field(const std::string& header, std::size_t offset, std::size_t width) {
    std::string s = header.substr(offset, width);
    const auto end = s.find_last_not_of(' ');
    return end == std::string::npos ? std::string() : s.substr(0, end + 1);
}

inline double number(const std::string& text, const std::string& what, const std::filesystem::path& path) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw DataError(path.string() + ": malformed EDF header field " + what + " '" + text + "'");
    }
}

inline std::string padded(std::string s, std::size_t width) {
    s.resize(width, ' ');
    return s;
}

inline std::string number_field(double v, std::size_t width) {
    char buf[400];
    std::snprintf(buf, sizeof buf, "%.*g", static_cast<int>(width) - 1, v);
    std::string s(buf);
    while (s.size() > width) {
        // drop precision until it fits
        const int digits = static_cast<int>(s.size()) - static_cast<int>(width);
        std::snprintf(buf, sizeof buf, "%.*g", std::max(1, static_cast<int>(width) - 1 - digits), v);
        s = buf;
    }
    return padded(s, width);
}

}  // namespace detail

/// Labels of every signal in the file.
struct Header {
    std::size_t header_bytes = 0;
    std::size_t records = 0;
    double record_duration = 0.0;
    std::vector<std::string> labels;
    std::vector<std::size_t> samples_per_record;
    std::vector<double> physical_min, physical_max, digital_min, digital_max;
};

inline Header read_header(std::istream& is, const std::filesystem::path& path) {
    std::string fixed(256, '\0');
    if (!is.read(fixed.data(), 256)) throw DataError(path.string() + ": truncated EDF header");
    Header h;
    if (detail::field(fixed, 0, 8) != "0") throw DataError(path.string() + ": not an EDF file (bad version field)");
    h.header_bytes = static_cast<std::size_t>(detail::number(detail::field(fixed, 184, 8), "header bytes", path));
    const double records = detail::number(detail::field(fixed, 236, 8), "record count", path);
    if (records < 0) throw DataError(path.string() + ": EDF record count unknown (-1) is not supported");
    h.records = static_cast<std::size_t>(records);
    h.record_duration = detail::number(detail::field(fixed, 244, 8), "record duration", path);
    const auto ns = static_cast<std::size_t>(detail::number(detail::field(fixed, 252, 4), "signal count", path));
    if (ns == 0 || h.header_bytes != 256 * (ns + 1) || h.record_duration <= 0.0) {
        throw DataError(path.string() + ": inconsistent EDF header");
    }
    std::string sig(256 * ns, '\0');
    if (!is.read(sig.data(), static_cast<std::streamsize>(sig.size()))) {
        throw DataError(path.string() + ": truncated EDF signal header");
    }
    auto column = [&](std::size_t base, std::size_t width, std::size_t i) {
        return detail::field(sig, base * ns + width * i, width);
    };
    // Offsets (per signal block, in units of ns): label 0, transducer 16,
    // dimension 96, phys min 104, phys max 112, dig min 120, dig max 128,
    // prefilter 136, samples 216, reserved 224.
    for (std::size_t i = 0; i < ns; ++i) {
        h.labels.push_back(column(0, 16, i));
        h.physical_min.push_back(detail::number(column(104, 8, i), "physical minimum", path));
        h.physical_max.push_back(detail::number(column(112, 8, i), "physical maximum", path));
        h.digital_min.push_back(detail::number(column(120, 8, i), "digital minimum", path));
        h.digital_max.push_back(detail::number(column(128, 8, i), "digital maximum", path));
        h.samples_per_record.push_back(
            static_cast<std::size_t>(detail::number(column(216, 8, i), "samples per record", path)));
        if (h.digital_max[i] <= h.digital_min[i]) throw DataError(path.string() + ": bad digital range for " + h.labels[i]);
    }
    return h;
}

/// Reads one channel by exact (space-trimmed) label.
inline Signal read_channel(const std::filesystem::path& path, const std::string& label) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open EDF file " + path.string());
    const Header h = read_header(is, path);
    const auto it = std::find(h.labels.begin(), h.labels.end(), label);
    if (it == h.labels.end()) {
        std::string available;
        for (const auto& l : h.labels) available += (available.empty() ? "" : ", ") + l;
        throw DataError(path.string() + ": channel '" + label + "' not found (available: " + available + ")");
    }
    const auto ch = static_cast<std::size_t>(it - h.labels.begin());
    const std::size_t record_samples = std::accumulate(h.samples_per_record.begin(), h.samples_per_record.end(), std::size_t{0});
    std::size_t skip = 0;
    for (std::size_t i = 0; i < ch; ++i) skip += h.samples_per_record[i];

    const double gain = (h.physical_max[ch] - h.physical_min[ch]) / (h.digital_max[ch] - h.digital_min[ch]);
    const double offset = h.physical_min[ch] - gain * h.digital_min[ch];

    Signal s;
    s.label = label;
    s.sample_rate = static_cast<double>(h.samples_per_record[ch]) / h.record_duration;
    s.physical_min = h.physical_min[ch];
    s.physical_max = h.physical_max[ch];
    s.samples.reserve(h.records * h.samples_per_record[ch]);
    std::vector<unsigned char> record(record_samples * 2);
    for (std::size_t r = 0; r < h.records; ++r) {
        if (!is.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(record.size()))) {
            throw DataError(path.string() + ": truncated EDF data record " + std::to_string(r));
        }
        for (std::size_t k = 0; k < h.samples_per_record[ch]; ++k) {
            const std::size_t at = 2 * (skip + k);
            const auto digital = static_cast<std::int16_t>(record[at] | (record[at + 1] << 8));
            s.samples.push_back(offset + gain * digital);
        }
    }
    return s;
}

/// Writes signals as 16-bit EDF with 1-second records. Sample rates must be
/// integral and every signal must cover the same whole number of seconds.
inline void write(const std::filesystem::path& path, const std::vector<Signal>& signals, const std::string& patient = "X",
                  const std::string& recording = "somnus") {
    if (signals.empty()) throw UsageError("edf::write needs at least one signal");
    std::size_t records = 0;
    for (const auto& s : signals) {
        const auto rate = static_cast<std::size_t>(std::llround(s.sample_rate));
        if (rate == 0 || std::abs(s.sample_rate - static_cast<double>(rate)) > 1e-9) {
            throw UsageError("edf::write needs integral sample rates");
        }
        const std::size_t r = s.samples.size() / rate;
        if (r * rate != s.samples.size()) throw UsageError("edf::write needs whole seconds of samples");
        if (records != 0 && r != records) throw UsageError("edf::write signals differ in duration");
        records = r;
    }
    const std::size_t ns = signals.size();
    std::string header;
    header += detail::padded("0", 8);
    header += detail::padded(patient, 80);
    header += detail::padded(recording, 80);
    header += "01.01.00";
    header += "00.00.00";
    header += detail::padded(std::to_string(256 * (ns + 1)), 8);
    header += detail::padded("", 44);
    header += detail::padded(std::to_string(records), 8);
    header += detail::padded("1", 8);
    header += detail::padded(std::to_string(ns), 4);
    auto each = [&](auto&& f, std::size_t width) {
        for (const auto& s : signals) header += detail::padded(f(s), width);
    };
    each([](const Signal& s) { return s.label; }, 16);
    each([](const Signal&) { return std::string(); }, 80);
    each([](const Signal&) { return std::string("uV"); }, 8);
    each([](const Signal& s) { return detail::number_field(s.physical_min, 8); }, 8);
    each([](const Signal& s) { return detail::number_field(s.physical_max, 8); }, 8);
    each([](const Signal&) { return std::string("-32768"); }, 8);
    each([](const Signal&) { return std::string("32767"); }, 8);
    each([](const Signal&) { return std::string(); }, 80);
    each([](const Signal& s) { return std::to_string(std::llround(s.sample_rate)); }, 8);
    each([](const Signal&) { return std::string(); }, 32);

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write EDF file " + path.string());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    std::vector<char> buf;
    for (std::size_t r = 0; r < records; ++r) {
        for (const auto& s : signals) {
            const auto rate = static_cast<std::size_t>(std::llround(s.sample_rate));
            // Read-back uses the header fields, so quantize against the
            // same rounded physical range that was written.
            const double pmin = std::stod(detail::number_field(s.physical_min, 8));
            const double pmax = std::stod(detail::number_field(s.physical_max, 8));
            const double gain = (pmax - pmin) / 65535.0;
            buf.resize(rate * 2);
            for (std::size_t k = 0; k < rate; ++k) {
                const double v = s.samples[r * rate + k];
                const double d = std::clamp(std::round((v - pmin) / gain - 32768.0), -32768.0, 32767.0);
                const auto q = static_cast<std::uint16_t>(static_cast<std::int16_t>(d));
                buf[2 * k] = static_cast<char>(q & 0xff);
                buf[2 * k + 1] = static_cast<char>(q >> 8);
            }
            os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        }
    }
    if (!os) throw DataError("failed writing EDF file " + path.string());
}

}  // namespace somnus::edf

namespace somnus {

/// Polyphase rational resampling with a Hamming-windowed sinc low-pass.
/// Rates must be positive integers; output length is ceil(n * to / from).
inline std::vector<double> resample(std::span<const double> x, std::size_t from_rate, std::size_t to_rate,
                                    std::size_t half_width_zero_crossings = 16) {
    if (from_rate == 0 || to_rate == 0) throw ConfigError("sample rates must be positive");
    if (from_rate == to_rate) return {x.begin(), x.end()};
    const std::size_t g = std::gcd(from_rate, to_rate);
    const std::size_t up = to_rate / g, down = from_rate / g;
    const std::size_t factor = std::max(up, down);
    const double cutoff = 0.5 / static_cast<double>(factor);  // cycles per upsampled sample
    const std::size_t half = half_width_zero_crossings * factor;
    std::vector<double> h(2 * half + 1);
    for (std::size_t n = 0; n < h.size(); ++n) {
        const double t = static_cast<double>(n) - static_cast<double>(half);
        const double sinc = t == 0.0 ? 1.0 : std::sin(2.0 * std::numbers::pi * cutoff * t) / (std::numbers::pi * t);
        const double w = 0.54 + 0.46 * std::cos(std::numbers::pi * t / static_cast<double>(half));
        h[n] = (t == 0.0 ? 2.0 * cutoff : sinc) * w * static_cast<double>(up);
    }
    const std::size_t n_out = (x.size() * up + down - 1) / down;
    std::vector<double> y(n_out, 0.0);
    const auto n_in = static_cast<std::ptrdiff_t>(x.size());
    for (std::size_t m = 0; m < n_out; ++m) {
        // y[m] = sum_k x[k] h[m*down - k*up + half]
        const auto pos = static_cast<std::ptrdiff_t>(m * down + half);
        const auto up_s = static_cast<std::ptrdiff_t>(up);
        std::ptrdiff_t k_lo = (pos - static_cast<std::ptrdiff_t>(2 * half) + up_s - 1) / up_s;
        if (pos - static_cast<std::ptrdiff_t>(2 * half) < 0) k_lo = 0;
        const std::ptrdiff_t k_hi = std::min(pos / up_s, n_in - 1);
        double acc = 0.0;
        for (std::ptrdiff_t k = std::max<std::ptrdiff_t>(k_lo, 0); k <= k_hi; ++k) {
            acc += x[static_cast<std::size_t>(k)] * h[static_cast<std::size_t>(pos - k * up_s)];
        }
        y[m] = acc;
    }
    return y;
}

/// Reads a channel and brings it to 100 Hz.
inline std::vector<double> read_channel_100hz(const std::filesystem::path& path, const std::string& label,
                                              std::size_t target_rate = 100) {
    auto s = edf::read_channel(path, label);
    const auto rate = static_cast<std::size_t>(std::llround(s.sample_rate));
    if (rate == 0 || std::abs(s.sample_rate - static_cast<double>(rate)) > 1e-6) {
        throw DataError(path.string() + ": non-integral sample rate " + std::to_string(s.sample_rate) + " Hz");
    }
    return resample(s.samples, rate, target_rate);
}

}  // namespace somnus

#include "samba/data.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <numeric>
#include <sstream>

namespace samba {

namespace {

constexpr uint32_t kDatasetVersion = 1;
constexpr double kTwoPi = 6.283185307179586;

// Hard floors under which a structure can come out empty or broken by
// pixelation: rings thinner than ~1.5 px can develop angular gaps, and the
// RV segment needs enough arc to land pixels next to the ring.
constexpr float kMinLvRadius = 2.0f;
constexpr float kMinRingThickness = 2.0f;
constexpr float kMinRvSpan = 0.8f;

void append_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

uint32_t load_u32(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 |
           static_cast<uint32_t>(p[2]) << 16 | static_cast<uint32_t>(p[3]) << 24;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path + " for reading");
    std::ostringstream buf;
    buf << in.rdbuf();
    if (!in.good() && !in.eof()) throw IoError("read failure on " + path);
    return std::move(buf).str();
}

void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out.good()) {
        out.close();
        std::remove(path.c_str());
        throw IoError("write failure on " + path + " (partial file removed)");
    }
}

}  // namespace

void PhantomSpec::validate() const {
    if (height <= 0 || width <= 0) throw ConfigError("phantom extent must be positive");
    const auto range_ok = [](float lo, float hi) { return lo <= hi; };
    if (!range_ok(lv_radius_min, lv_radius_max) || !range_ok(myo_thickness_min, myo_thickness_max) ||
        !range_ok(rv_thickness_min, rv_thickness_max) || !range_ok(rv_span_min, rv_span_max)) {
        throw ConfigError("phantom ranges must satisfy min <= max");
    }
    if (center_jitter < 0.0f || noise_sigma < 0.0f) {
        throw ConfigError("phantom jitter and noise sigma must be non-negative");
    }
    if (lv_radius_min < kMinLvRadius || myo_thickness_min < kMinRingThickness ||
        rv_thickness_min < kMinRingThickness || rv_span_min < kMinRvSpan) {
        throw ConfigError("phantom structures too thin to survive pixelation");
    }
    if (rv_span_max > 5.0f) throw ConfigError("RV span must stay below a full circle");
    for (const float m : {bg_mean, rv_mean, myo_mean, lv_mean}) {
        if (m < 0.0f || m > 1.0f) throw ConfigError("intensity means must lie in [0, 1]");
    }
    const float reach = center_jitter + lv_radius_max + myo_thickness_max + rv_thickness_max;
    const float half = 0.5f * static_cast<float>(std::min(height, width));
    if (reach + 1.0f > half) {
        throw ConfigError("phantom geometry cannot fit: reach " + std::to_string(reach) +
                          " px exceeds usable half-extent " + std::to_string(half - 1.0f));
    }
}

PhantomPreset preset_from_name(const std::string& name) {
    if (name == "normal") return PhantomPreset::Normal;
    if (name == "dcm") return PhantomPreset::Dcm;
    if (name == "hcm") return PhantomPreset::Hcm;
    if (name == "minf") return PhantomPreset::Minf;
    if (name == "rv") return PhantomPreset::Rv;
    throw ConfigError("unknown phantom preset '" + name + "' (expected normal|dcm|hcm|minf|rv)");
}

std::string preset_name(PhantomPreset preset) {
    switch (preset) {
        case PhantomPreset::Normal: return "normal";
        case PhantomPreset::Dcm: return "dcm";
        case PhantomPreset::Hcm: return "hcm";
        case PhantomPreset::Minf: return "minf";
        case PhantomPreset::Rv: return "rv";
    }
    throw ConfigError("invalid phantom preset value");
}

PhantomSpec preset_spec(PhantomPreset preset, int64_t extent, uint64_t seed) {
    PhantomSpec s;
    s.height = extent;
    s.width = extent;
    s.seed = seed;
    // Baseline ranges are tuned for 64 px; scale them for other extents.
    const float k = static_cast<float>(extent) / 64.0f;
    s.center_jitter *= k;
    s.lv_radius_min *= k;
    s.lv_radius_max *= k;
    s.myo_thickness_min *= k;
    s.myo_thickness_max *= k;
    s.rv_thickness_min *= k;
    s.rv_thickness_max *= k;
    switch (preset) {
        case PhantomPreset::Normal:
            break;
        case PhantomPreset::Dcm:  // enlarged cavity
            s.lv_radius_min = 10.0f * k;
            s.lv_radius_max = 13.0f * k;
            s.myo_thickness_min = 2.5f * k;
            s.myo_thickness_max = 3.5f * k;
            break;
        case PhantomPreset::Hcm:  // thickened ring
            s.myo_thickness_min = 6.0f * k;
            s.myo_thickness_max = 8.0f * k;
            s.lv_radius_min = 5.0f * k;
            s.lv_radius_max = 7.0f * k;
            break;
        case PhantomPreset::Minf:  // scarred ring: intensity contrast collapses
            s.myo_mean = 0.55f;
            s.noise_sigma = 0.05f;
            break;
        case PhantomPreset::Rv:  // bulging RV segment
            s.rv_thickness_min = 6.0f * k;
            s.rv_thickness_max = 8.0f * k;
            s.rv_span_min = 2.4f;
            s.rv_span_max = 3.6f;
            s.lv_radius_min = 6.0f * k;
            s.lv_radius_max = 8.0f * k;
            break;
    }
    s.validate();
    return s;
}

SegSample generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);
    const float cy = 0.5f * static_cast<float>(spec.height) +
                     rng.uniform(-spec.center_jitter, spec.center_jitter);
    const float cx = 0.5f * static_cast<float>(spec.width) +
                     rng.uniform(-spec.center_jitter, spec.center_jitter);
    const float r_lv = rng.uniform(spec.lv_radius_min, spec.lv_radius_max);
    const float r_myo = r_lv + rng.uniform(spec.myo_thickness_min, spec.myo_thickness_max);
    const float r_rv = r_myo + rng.uniform(spec.rv_thickness_min, spec.rv_thickness_max);
    const float span = rng.uniform(spec.rv_span_min, spec.rv_span_max);
    const float rv_angle = rng.uniform(0.0f, static_cast<float>(kTwoPi));

    SegSample out;
    out.mask = LabelMask(spec.height, spec.width);
    out.image.resize(static_cast<size_t>(spec.height * spec.width));
    const float means[4] = {spec.bg_mean, spec.rv_mean, spec.myo_mean, spec.lv_mean};
    for (int64_t r = 0; r < spec.height; ++r) {
        for (int64_t c = 0; c < spec.width; ++c) {
            const float dy = static_cast<float>(r) + 0.5f - cy;
            const float dx = static_cast<float>(c) + 0.5f - cx;
            const float d = std::sqrt(dy * dy + dx * dx);
            uint8_t cls = kBackground;
            if (d <= r_lv) {
                cls = kLeftVentricle;
            } else if (d <= r_myo) {
                cls = kMyocardium;
            } else if (d <= r_rv) {
                const float ang = std::atan2(dy, dx);
                float diff = ang - rv_angle;
                while (diff > static_cast<float>(kTwoPi) / 2.0f) diff -= static_cast<float>(kTwoPi);
                while (diff < -static_cast<float>(kTwoPi) / 2.0f) diff += static_cast<float>(kTwoPi);
                if (std::fabs(diff) <= 0.5f * span) cls = kRightVentricle;
            }
            out.mask.at(r, c) = cls;
        }
    }
    for (int64_t i = 0; i < spec.height * spec.width; ++i) {
        const float v = means[out.mask.labels[static_cast<size_t>(i)]] +
                        spec.noise_sigma * rng.normal();
        out.image[static_cast<size_t>(i)] = std::clamp(v, 0.0f, 1.0f);
    }
    return out;
}

std::vector<SegSample> generate_dataset(const PhantomSpec& base, int64_t count,
                                        uint64_t master_seed) {
    if (count <= 0) throw ConfigError("dataset sample count must be positive");
    std::vector<SegSample> out;
    out.reserve(static_cast<size_t>(count));
    for (int64_t i = 0; i < count; ++i) {
        PhantomSpec s = base;
        s.seed = splitmix64(master_seed ^ static_cast<uint64_t>(i));
        out.push_back(generate_phantom(s));
    }
    return out;
}

TopologyReport check_topology(const LabelMask& mask) {
    TopologyReport rep;
    int64_t counts[4] = {0, 0, 0, 0};
    for (const uint8_t v : mask.labels) {
        if (v < 4) ++counts[v];
    }
    rep.lv_nonempty = counts[kLeftVentricle] > 0;
    rep.myo_nonempty = counts[kMyocardium] > 0;
    rep.rv_nonempty = counts[kRightVentricle] > 0;

    // Flood from the cavity through everything that is not ring; reaching
    // the border means the ring does not enclose it.
    if (rep.lv_nonempty) {
        std::vector<uint8_t> seen(static_cast<size_t>(mask.numel()), 0);
        std::deque<int64_t> queue;
        for (int64_t i = 0; i < mask.numel(); ++i) {
            if (mask.labels[static_cast<size_t>(i)] == kLeftVentricle) {
                seen[static_cast<size_t>(i)] = 1;
                queue.push_back(i);
            }
        }
        bool escaped = false;
        while (!queue.empty() && !escaped) {
            const int64_t i = queue.front();
            queue.pop_front();
            const int64_t r = i / mask.width;
            const int64_t c = i % mask.width;
            if (r == 0 || r == mask.height - 1 || c == 0 || c == mask.width - 1) {
                escaped = true;
                break;
            }
            const int64_t nbrs[4] = {i - mask.width, i + mask.width, i - 1, i + 1};
            for (const int64_t n : nbrs) {
                if (!seen[static_cast<size_t>(n)] && mask.labels[static_cast<size_t>(n)] != kMyocardium) {
                    seen[static_cast<size_t>(n)] = 1;
                    queue.push_back(n);
                }
            }
        }
        rep.lv_enclosed_by_myo = !escaped;
    }

    bool rv_next_to_lv = false;
    bool rv_next_to_myo = false;
    for (int64_t r = 0; r < mask.height; ++r) {
        for (int64_t c = 0; c < mask.width; ++c) {
            if (mask.at(r, c) != kRightVentricle) continue;
            const auto probe = [&](int64_t rr, int64_t cc) {
                if (rr < 0 || rr >= mask.height || cc < 0 || cc >= mask.width) return;
                const uint8_t v = mask.at(rr, cc);
                rv_next_to_lv = rv_next_to_lv || v == kLeftVentricle;
                rv_next_to_myo = rv_next_to_myo || v == kMyocardium;
            };
            probe(r - 1, c);
            probe(r + 1, c);
            probe(r, c - 1);
            probe(r, c + 1);
        }
    }
    rep.rv_away_from_lv = !rv_next_to_lv;
    rep.rv_touches_myo = rv_next_to_myo;
    return rep;
}

void write_dataset(const std::vector<SegSample>& samples, const std::string& path) {
    if (samples.empty()) throw ContractError("refusing to write an empty dataset");
    const int64_t h = samples.front().mask.height;
    const int64_t w = samples.front().mask.width;
    if (h <= 0 || w <= 0) throw ContractError("dataset samples need positive extents");
    for (const SegSample& s : samples) {
        if (s.mask.height != h || s.mask.width != w ||
            static_cast<int64_t>(s.image.size()) != h * w) {
            throw ContractError("dataset samples must share one extent");
        }
        for (const uint8_t v : s.mask.labels) {
            if (v > 3) throw ContractError("mask labels must lie in {0..3}");
        }
    }
    std::string bytes;
    bytes.reserve(20 + samples.size() * static_cast<size_t>(5 * h * w));
    bytes += "SMBD";
    append_u32(bytes, kDatasetVersion);
    append_u32(bytes, static_cast<uint32_t>(samples.size()));
    append_u32(bytes, static_cast<uint32_t>(h));
    append_u32(bytes, static_cast<uint32_t>(w));
    for (const SegSample& s : samples) {
        for (const float v : s.image) append_u32(bytes, std::bit_cast<uint32_t>(v));
        bytes.append(reinterpret_cast<const char*>(s.mask.labels.data()), s.mask.labels.size());
    }
    write_file(path, bytes);
}

std::vector<SegSample> read_dataset(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 20) {
        throw FormatError("dataset header truncated: expected at least 20 bytes, got " +
                          std::to_string(bytes.size()));
    }
    const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.compare(0, 4, "SMBD") != 0) throw FormatError("bad dataset magic (want SMBD)");
    const uint32_t version = load_u32(p + 4);
    if (version != kDatasetVersion) {
        throw FormatError("unsupported dataset version " + std::to_string(version));
    }
    const uint64_t count = load_u32(p + 8);
    const uint64_t h = load_u32(p + 12);
    const uint64_t w = load_u32(p + 16);
    if (count == 0 || h == 0 || w == 0) throw FormatError("dataset header declares no data");
    if (h > 65536 || w > 65536 || count > (1u << 24)) {
        throw FormatError("dataset header exceeds sane limits");
    }
    const uint64_t expect = 20 + count * 5 * h * w;
    if (bytes.size() != expect) {
        throw FormatError("dataset length mismatch: expected " + std::to_string(expect) +
                          " bytes, got " + std::to_string(bytes.size()));
    }
    std::vector<SegSample> out(count);
    size_t off = 20;
    for (uint64_t i = 0; i < count; ++i) {
        SegSample& s = out[i];
        s.image.resize(h * w);
        for (uint64_t j = 0; j < h * w; ++j, off += 4) {
            s.image[j] = std::bit_cast<float>(load_u32(p + off));
        }
        s.mask = LabelMask(static_cast<int64_t>(h), static_cast<int64_t>(w));
        for (uint64_t j = 0; j < h * w; ++j, ++off) {
            const uint8_t v = static_cast<uint8_t>(p[off]);
            if (v > 3) {
                throw FormatError("mask label " + std::to_string(int(v)) + " at byte offset " +
                                  std::to_string(off) + " outside {0..3}");
            }
            s.mask.labels[j] = v;
        }
    }
    return out;
}

std::pair<std::vector<SegSample>, std::vector<SegSample>> split(
    const std::vector<SegSample>& samples, double train_fraction, uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw ConfigError("train fraction must lie strictly between 0 and 1");
    }
    const int64_t n = static_cast<int64_t>(samples.size());
    const int64_t n_train = static_cast<int64_t>(train_fraction * static_cast<double>(n));
    if (n_train == 0 || n_train == n) {
        throw ConfigError("split would leave an empty side: " + std::to_string(n_train) + "/" +
                          std::to_string(n - n_train) + " of " + std::to_string(n));
    }
    std::vector<size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(seed);
    for (size_t i = idx.size() - 1; i > 0; --i) {
        const size_t j = rng.below(i + 1);
        std::swap(idx[i], idx[j]);
    }
    std::pair<std::vector<SegSample>, std::vector<SegSample>> out;
    for (int64_t i = 0; i < n; ++i) {
        (i < n_train ? out.first : out.second).push_back(samples[idx[static_cast<size_t>(i)]]);
    }
    return out;
}

void write_image_pgm(const std::vector<float>& image, int64_t height, int64_t width,
                     const std::string& path) {
    if (static_cast<int64_t>(image.size()) != height * width || height <= 0 || width <= 0) {
        throw ContractError("image extent disagrees with pixel count");
    }
    std::string bytes = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (const float v : image) {
        const float c = std::clamp(v, 0.0f, 1.0f);
        bytes.push_back(static_cast<char>(std::lround(c * 255.0f)));
    }
    write_file(path, bytes);
}

namespace {

// Minimal P5 header parser: magic, then three integers, tolerating
// whitespace and # comments, then a single byte before the raster.
struct PgmRaster {
    int64_t height = 0;
    int64_t width = 0;
    const unsigned char* data = nullptr;
    std::string bytes;
};

PgmRaster parse_pgm(const std::string& path) {
    PgmRaster out;
    out.bytes = read_file(path);
    const std::string& s = out.bytes;
    if (s.size() < 2 || s[0] != 'P' || s[1] != '5') throw FormatError("bad PGM magic (want P5)");
    size_t pos = 2;
    const auto next_int = [&]() -> int64_t {
        while (pos < s.size()) {
            if (s[pos] == '#') {
                while (pos < s.size() && s[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(s[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        if (pos >= s.size() || !std::isdigit(static_cast<unsigned char>(s[pos]))) {
            throw FormatError("PGM header ended before its three integers");
        }
        int64_t v = 0;
        while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
            v = v * 10 + (s[pos] - '0');
            ++pos;
        }
        return v;
    };
    out.width = next_int();
    out.height = next_int();
    const int64_t maxval = next_int();
    if (out.width <= 0 || out.height <= 0) throw FormatError("PGM declares empty extent");
    if (maxval != 255) throw FormatError("PGM maxval must be 255, got " + std::to_string(maxval));
    ++pos;  // single whitespace byte after maxval
    if (s.size() - pos != static_cast<size_t>(out.height * out.width)) {
        throw FormatError("PGM raster length mismatch: expected " +
                          std::to_string(out.height * out.width) + " bytes, got " +
                          std::to_string(s.size() - pos));
    }
    out.data = reinterpret_cast<const unsigned char*>(s.data()) + pos;
    return out;
}

}  // namespace

std::vector<float> read_image_pgm(const std::string& path, int64_t& height, int64_t& width) {
    const PgmRaster r = parse_pgm(path);
    height = r.height;
    width = r.width;
    std::vector<float> out(static_cast<size_t>(r.height * r.width));
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(r.data[i]) / 255.0f;
    }
    return out;
}

void write_label_pgm(const LabelMask& mask, const std::string& path) {
    std::string bytes =
        "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
    for (const uint8_t v : mask.labels) {
        if (v > 3) throw ContractError("mask labels must lie in {0..3}");
        bytes.push_back(static_cast<char>(v * 85));
    }
    write_file(path, bytes);
}

LabelMask read_label_pgm(const std::string& path) {
    const PgmRaster r = parse_pgm(path);
    LabelMask mask(r.height, r.width);
    for (int64_t i = 0; i < mask.numel(); ++i) {
        const unsigned char v = r.data[i];
        if (v % 85 != 0) {
            throw FormatError("label PGM byte " + std::to_string(int(v)) +
                              " is not a multiple of 85");
        }
        mask.labels[static_cast<size_t>(i)] = static_cast<uint8_t>(v / 85);
    }
    return mask;
}

}  // namespace samba

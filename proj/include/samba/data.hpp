#pragma once

// Synthetic cardiac phantoms and dataset plumbing.  Each phantom is a
// short-axis-style slice built from three structures on the ACDC label
// convention (0 background, 1 RV, 2 MYO, 3 LV): a circular LV cavity, a
// concentric MYO ring around it, and an RV segment hugging the outside of
// the ring over a limited angular span.  Pathology presets shift the
// geometry and intensity ranges (enlarged LV, thickened ring, brighter
// ring, wider RV); they are parameter presets, not clinical claims.
//
// Datasets travel in a fixed little-endian binary container so golden
// tests are bit-exact across platforms, with a PGM converter for eyeball
// inspection.

#include "samba/error.hpp"
#include "samba/metrics.hpp"
#include "samba/rng.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace samba {

// Class ids of the label masks.
enum : uint8_t { kBackground = 0, kRightVentricle = 1, kMyocardium = 2, kLeftVentricle = 3 };

struct SegSample {
    std::vector<float> image;  // H*W row-major, values in [0, 1]
    LabelMask mask;
};

// Geometry and intensity ranges for one phantom draw.  All lengths are in
// pixels; angles in radians.  Ranges are inclusive at the low end.
struct PhantomSpec {
    int64_t height = 64;
    int64_t width = 64;

    float center_jitter = 3.0f;   // heart center wobble around image center
    float lv_radius_min = 7.0f;   // LV cavity disk
    float lv_radius_max = 10.0f;
    float myo_thickness_min = 3.0f;  // ring width around the cavity
    float myo_thickness_max = 5.0f;
    float rv_thickness_min = 4.0f;  // radial depth of the RV segment
    float rv_thickness_max = 6.0f;
    float rv_span_min = 1.6f;  // angular width of the RV segment
    float rv_span_max = 2.6f;

    float bg_mean = 0.15f;  // per-structure intensity plateaus
    float rv_mean = 0.75f;
    float myo_mean = 0.4f;
    float lv_mean = 0.9f;
    float noise_sigma = 0.03f;  // additive Gaussian, clamped to [0, 1]

    uint64_t seed = 1;

    // Rejects geometry that cannot stay inside the image or that could
    // produce an empty / disconnected structure.
    void validate() const;
};

enum class PhantomPreset { Normal, Dcm, Hcm, Minf, Rv };

// Preset name as accepted by the CLI: normal, dcm, hcm, minf, rv.
PhantomPreset preset_from_name(const std::string& name);
std::string preset_name(PhantomPreset preset);

// Parameter ranges realizing the preset at the given square extent.
PhantomSpec preset_spec(PhantomPreset preset, int64_t extent, uint64_t seed);

// Draws one phantom; same spec (including seed) gives bit-identical bytes.
SegSample generate_phantom(const PhantomSpec& spec);

// count phantoms with per-sample seeds splitmix64(master_seed ^ index), so
// any sample can be regenerated independently.
std::vector<SegSample> generate_dataset(const PhantomSpec& base, int64_t count,
                                        uint64_t master_seed);

// Structural invariants every phantom must satisfy.
struct TopologyReport {
    bool lv_nonempty = false;
    bool myo_nonempty = false;
    bool rv_nonempty = false;
    bool lv_enclosed_by_myo = false;  // no path from LV to the border avoiding MYO
    bool rv_away_from_lv = false;     // no RV pixel 4-adjacent to an LV pixel
    bool rv_touches_myo = false;      // some RV pixel 4-adjacent to a MYO pixel

    bool ok() const {
        return lv_nonempty && myo_nonempty && rv_nonempty && lv_enclosed_by_myo &&
               rv_away_from_lv && rv_touches_myo;
    }
};

TopologyReport check_topology(const LabelMask& mask);

// Binary dataset container: 20-byte header (magic "SMBD", u32 version, u32
// count, u32 height, u32 width, all little-endian) followed by count
// samples, each the float32 image then the u8 mask.
void write_dataset(const std::vector<SegSample>& samples, const std::string& path);
std::vector<SegSample> read_dataset(const std::string& path);

// Deterministic shuffled split into (train, val); disjoint and exhaustive.
// Throws ConfigError unless 0 < train_fraction < 1 and both sides end up
// non-empty.
std::pair<std::vector<SegSample>, std::vector<SegSample>> split(
    const std::vector<SegSample>& samples, double train_fraction, uint64_t seed);

// Binary PGM (P5, maxval 255) converters for inspection.  Images quantize
// to the nearest 1/255 step; label masks scale class ids by 85 so the four
// classes are visually distinct, and reads reject rasters that are not
// exact multiples of 85.
void write_image_pgm(const std::vector<float>& image, int64_t height, int64_t width,
                     const std::string& path);
std::vector<float> read_image_pgm(const std::string& path, int64_t& height, int64_t& width);
void write_label_pgm(const LabelMask& mask, const std::string& path);
LabelMask read_label_pgm(const std::string& path);

}  // namespace samba

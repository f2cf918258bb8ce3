#pragma once

// HSI cube and mask containers, their binary on-disk formats, synthetic
// dataset generation, overlapping patch-pair sampling, and the cube
// scheduler (synchronous, or asynchronous with two buffers).
//
// Cube layout is band-sequential: all of band 0, then band 1, ..., row-major
// within a band. Patches are pixel-major (each pixel's spectrum contiguous)
// because the encoder convolves along the spectrum per pixel.

#include <algorithm>
#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <utility>

#include "dgc/common.hpp"

namespace dgc {

// ---------------------------------------------------------------------------
// Containers
// ---------------------------------------------------------------------------

struct HsiCube {
    u32 height = 0;
    u32 width = 0;
    u32 bands = 0;
    f64 wavelength_start_nm = 0.0;
    f64 wavelength_step_nm = 0.0;
    std::vector<f32> data;  // band-sequential, row-major per band

    size_t plane() const { return static_cast<size_t>(height) * width; }
    size_t size() const { return plane() * bands; }

    f32& at(u32 band, u32 y, u32 x) { return data[static_cast<size_t>(band) * plane() + static_cast<size_t>(y) * width + x]; }
    f32 at(u32 band, u32 y, u32 x) const { return data[static_cast<size_t>(band) * plane() + static_cast<size_t>(y) * width + x]; }

    f64 wavelength_nm(u32 band) const { return wavelength_start_nm + static_cast<f64>(band) * wavelength_step_nm; }

    u32 nearest_band(f64 target_nm) const {
        u32 best = 0;
        f64 best_dist = std::numeric_limits<f64>::max();
        for (u32 b = 0; b < bands; ++b) {
            const f64 d = std::abs(wavelength_nm(b) - target_nm);
            if (d < best_dist) {
                best_dist = d;
                best = b;
            }
        }
        return best;
    }

    bool shape_valid() const {
        return height > 0 && width > 0 && bands > 0 && data.size() == size();
    }
};

// Band count implied by an inclusive wavelength range.
inline u32 bands_for_range(f64 start_nm, f64 end_nm, f64 step_nm) {
    return 1 + static_cast<u32>(std::llround((end_nm - start_nm) / step_nm));
}

struct GroundTruthMask {
    u32 height = 0;
    u32 width = 0;
    std::vector<u8> labels;  // row-major

    u8& at(u32 y, u32 x) { return labels[static_cast<size_t>(y) * width + x]; }
    u8 at(u32 y, u32 x) const { return labels[static_cast<size_t>(y) * width + x]; }
    size_t size() const { return static_cast<size_t>(height) * width; }
};

// ---------------------------------------------------------------------------
// Binary formats
//
// Cube (.hsic):  "HSIC" | u32 version=1 | u32 height | u32 width | u32 bands
//                | f64 wavelength_start_nm | f64 wavelength_step_nm
//                | height*width*bands little-endian f32, band-sequential
// Mask (.hsim):  "HSIM" | u32 version=1 | u32 height | u32 width
//                | height*width u8 labels, row-major
// ---------------------------------------------------------------------------

inline constexpr u32 kFormatVersion = 1;
inline constexpr size_t kCubeHeaderBytes = 4 + 4 + 4 + 4 + 4 + 8 + 8;

namespace detail {

inline std::ifstream open_input(const std::string& path) {
    if (!std::filesystem::exists(path))
        throw IoError(IoErrorKind::missing_file, "no such file: " + path);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrorKind::open_failed, "cannot open: " + path);
    return in;
}

inline void check_magic(std::istream& in, const char expect[4], const std::string& path) {
    char magic[4] = {};
    if (!in.read(magic, 4) || std::memcmp(magic, expect, 4) != 0)
        throw IoError(IoErrorKind::bad_magic, "bad magic in " + path);
    u32 version = 0;
    if (!read_le<u32>(in, version))
        throw IoError(IoErrorKind::truncated, "truncated header in " + path);
    if (version != kFormatVersion)
        throw IoError(IoErrorKind::bad_version, "unsupported version in " + path);
}

}  // namespace detail

inline void save_cube(const HsiCube& cube, const std::string& path) {
    if (!cube.shape_valid()) throw ConfigError("save_cube: inconsistent cube shape");
    if (!all_finite(cube.data)) throw ConfigError("save_cube: non-finite reflectance value");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::write_failed, "cannot write: " + path);
    out.write("HSIC", 4);
    write_le<u32>(out, kFormatVersion);
    write_le<u32>(out, cube.height);
    write_le<u32>(out, cube.width);
    write_le<u32>(out, cube.bands);
    write_f64_le(out, cube.wavelength_start_nm);
    write_f64_le(out, cube.wavelength_step_nm);
    write_f32_block_le(out, cube.data.data(), cube.data.size());
    if (!out) throw IoError(IoErrorKind::write_failed, "write failed: " + path);
}

inline HsiCube load_cube(const std::string& path) {
    std::ifstream in = detail::open_input(path);
    detail::check_magic(in, "HSIC", path);
    HsiCube cube;
    if (!read_le<u32>(in, cube.height) || !read_le<u32>(in, cube.width) ||
        !read_le<u32>(in, cube.bands) || !read_f64_le(in, cube.wavelength_start_nm) ||
        !read_f64_le(in, cube.wavelength_step_nm))
        throw IoError(IoErrorKind::truncated, "truncated header in " + path);
    if (cube.height == 0 || cube.width == 0 || cube.bands == 0)
        throw IoError(IoErrorKind::corrupt, "zero dimension in " + path);
    cube.data.resize(cube.size());
    if (!read_f32_block_le(in, cube.data.data(), cube.data.size()))
        throw IoError(IoErrorKind::truncated, "truncated payload in " + path);
    if (!all_finite(cube.data))
        throw IoError(IoErrorKind::corrupt, "non-finite reflectance in " + path);
    return cube;
}

inline void save_mask(const GroundTruthMask& mask, const std::string& path) {
    if (mask.labels.size() != mask.size()) throw ConfigError("save_mask: inconsistent shape");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrorKind::write_failed, "cannot write: " + path);
    out.write("HSIM", 4);
    write_le<u32>(out, kFormatVersion);
    write_le<u32>(out, mask.height);
    write_le<u32>(out, mask.width);
    out.write(reinterpret_cast<const char*>(mask.labels.data()),
              static_cast<std::streamsize>(mask.labels.size()));
    if (!out) throw IoError(IoErrorKind::write_failed, "write failed: " + path);
}

inline GroundTruthMask load_mask(const std::string& path) {
    std::ifstream in = detail::open_input(path);
    detail::check_magic(in, "HSIM", path);
    GroundTruthMask mask;
    if (!read_le<u32>(in, mask.height) || !read_le<u32>(in, mask.width))
        throw IoError(IoErrorKind::truncated, "truncated header in " + path);
    mask.labels.resize(mask.size());
    if (!in.read(reinterpret_cast<char*>(mask.labels.data()),
                 static_cast<std::streamsize>(mask.labels.size())))
        throw IoError(IoErrorKind::truncated, "truncated payload in " + path);
    return mask;
}

// ---------------------------------------------------------------------------
// Synthetic labeled datasets. Each cube is per-class base spectrum x per-cube
// illumination gain + iid Gaussian noise; entities are disk blobs on a
// class-0 background, with smaller interior blobs for class >= 2 so rare
// classes occupy a controlled fraction of entity pixels.
// ---------------------------------------------------------------------------

struct SynthSpec {
    u32 cubes = 8;
    u32 height = 128;
    u32 width = 128;
    u32 bands = 64;
    std::vector<std::vector<f32>> class_spectra;  // [class][band]; class 0 = background
    u32 blobs_min = 3;
    u32 blobs_max = 6;
    f64 radius_min_frac = 0.10;
    f64 radius_max_frac = 0.22;
    f64 interior_radius_frac = 0.28;  // interior blob radius, relative to parent
    f64 gain_min = 0.8;
    f64 gain_max = 1.2;
    f64 noise_std = 0.01;
    u64 seed = 0;
    f64 wavelength_start_nm = 400.0;
    f64 wavelength_step_nm = 2.0;

    u32 classes() const { return static_cast<u32>(class_spectra.size()); }

    void validate() const {
        if (cubes == 0) throw ConfigError("synth: cube count must be positive");
        if (height == 0 || width == 0 || bands == 0) throw ConfigError("synth: zero dimension");
        if (classes() < 2) throw ConfigError("synth: need at least 2 entity classes");
        if (!(gain_min > 0.0 && gain_max >= gain_min)) throw ConfigError("synth: gain range must be positive");
        if (noise_std < 0.0) throw ConfigError("synth: noise std must be >= 0");
        if (blobs_max == 0) throw ConfigError("synth: zero blobs with >1 class requested");
        if (blobs_min > blobs_max) throw ConfigError("synth: blob count range inverted");
        for (const auto& s : class_spectra)
            if (s.size() != bands) throw ConfigError("synth: class spectrum length != bands");
    }
};

inline f64 spectral_angle(const std::vector<f64>& a, const std::vector<f64>& b) {
    f64 dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const f64 denom = std::sqrt(na) * std::sqrt(nb);
    if (denom == 0.0) return 0.0;
    return std::acos(std::clamp(dot / denom, -1.0, 1.0));
}

// Smooth random base spectra (sums of Gaussian bumps), redrawn until every
// pair is separated by at least min_angle_rad.
inline std::vector<std::vector<f32>> make_smooth_spectra(u32 classes, u32 bands, u64 seed,
                                                         f64 min_angle_rad = 0.26) {
    Rng rng(child_seed(seed, "spectra"));
    std::vector<std::vector<f64>> accepted;
    while (accepted.size() < classes) {
        std::vector<f64> s(bands, 0.0);
        const int bumps = static_cast<int>(rng.uniform_int(3, 5));
        for (int j = 0; j < bumps; ++j) {
            const f64 center = rng.uniform(0.0, static_cast<f64>(bands - 1));
            const f64 sigma = rng.uniform(0.05, 0.25) * bands;
            const f64 amp = rng.uniform(0.2, 1.0);
            for (u32 b = 0; b < bands; ++b) {
                const f64 d = (static_cast<f64>(b) - center) / sigma;
                s[b] += amp * std::exp(-0.5 * d * d);
            }
        }
        f64 lo = s[0], hi = s[0];
        for (f64 v : s) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const f64 span = hi - lo;
        for (f64& v : s) v = span > 0.0 ? 0.1 + 0.8 * (v - lo) / span : 0.5;
        bool distinct = true;
        for (const auto& prev : accepted)
            if (spectral_angle(prev, s) < min_angle_rad) distinct = false;
        if (distinct) accepted.push_back(std::move(s));
    }
    std::vector<std::vector<f32>> out(classes);
    for (u32 c = 0; c < classes; ++c) {
        out[c].resize(bands);
        for (u32 b = 0; b < bands; ++b) out[c][b] = static_cast<f32>(accepted[c][b]);
    }
    return out;
}

inline std::pair<HsiCube, GroundTruthMask> generate_synthetic_cube(const SynthSpec& spec, Rng& rng) {
    GroundTruthMask mask;
    mask.height = spec.height;
    mask.width = spec.width;
    mask.labels.assign(mask.size(), 0);

    struct Blob {
        f64 cy, cx, r;
        u8 label;
    };
    std::vector<Blob> blobs;
    const u32 blob_count = static_cast<u32>(rng.uniform_int(spec.blobs_min, spec.blobs_max));
    const f64 dim = static_cast<f64>(std::min(spec.height, spec.width));
    for (u32 i = 0; i < blob_count; ++i) {
        Blob b;
        b.r = rng.uniform(spec.radius_min_frac, spec.radius_max_frac) * dim;
        b.cy = rng.uniform(b.r, static_cast<f64>(spec.height) - b.r);
        b.cx = rng.uniform(b.r, static_cast<f64>(spec.width) - b.r);
        b.label = 1;
        blobs.push_back(b);
        if (spec.classes() > 2) {
            Blob inner;
            inner.r = spec.interior_radius_frac * b.r;
            inner.cy = b.cy + rng.uniform(-0.3, 0.3) * b.r;
            inner.cx = b.cx + rng.uniform(-0.3, 0.3) * b.r;
            inner.label = static_cast<u8>(2 + i % (spec.classes() - 2));
            blobs.push_back(inner);
        }
    }
    for (const Blob& b : blobs) {
        const i64 y0 = std::max<i64>(0, static_cast<i64>(std::floor(b.cy - b.r)));
        const i64 y1 = std::min<i64>(spec.height - 1, static_cast<i64>(std::ceil(b.cy + b.r)));
        const i64 x0 = std::max<i64>(0, static_cast<i64>(std::floor(b.cx - b.r)));
        const i64 x1 = std::min<i64>(spec.width - 1, static_cast<i64>(std::ceil(b.cx + b.r)));
        for (i64 y = y0; y <= y1; ++y)
            for (i64 x = x0; x <= x1; ++x) {
                const f64 dy = static_cast<f64>(y) - b.cy;
                const f64 dx = static_cast<f64>(x) - b.cx;
                if (dy * dy + dx * dx <= b.r * b.r)
                    mask.at(static_cast<u32>(y), static_cast<u32>(x)) = b.label;
            }
    }

    HsiCube cube;
    cube.height = spec.height;
    cube.width = spec.width;
    cube.bands = spec.bands;
    cube.wavelength_start_nm = spec.wavelength_start_nm;
    cube.wavelength_step_nm = spec.wavelength_step_nm;
    cube.data.resize(cube.size());
    const f32 gain = static_cast<f32>(rng.uniform(spec.gain_min, spec.gain_max));
    for (u32 y = 0; y < spec.height; ++y)
        for (u32 x = 0; x < spec.width; ++x) {
            const auto& base = spec.class_spectra[mask.at(y, x)];
            for (u32 b = 0; b < spec.bands; ++b) {
                f32 v = base[b] * gain;
                if (spec.noise_std > 0.0) v += static_cast<f32>(spec.noise_std * rng.gaussian());
                cube.at(b, y, x) = v;
            }
        }
    return {std::move(cube), std::move(mask)};
}

inline std::vector<std::pair<HsiCube, GroundTruthMask>> generate_synthetic(const SynthSpec& spec) {
    spec.validate();
    Rng rng(child_seed(spec.seed, "synth"));
    std::vector<std::pair<HsiCube, GroundTruthMask>> out;
    out.reserve(spec.cubes);
    for (u32 i = 0; i < spec.cubes; ++i) out.push_back(generate_synthetic_cube(spec, rng));
    return out;
}

// ---------------------------------------------------------------------------
// Patches and overlapping patch pairs
// ---------------------------------------------------------------------------

template <class T>
struct Patch {
    u32 size = 0;   // P
    u32 bands = 0;  // C
    std::vector<T> data;  // pixel-major: [(y*P + x)*C + c]

    T& at(u32 y, u32 x, u32 c) { return data[(static_cast<size_t>(y) * size + x) * bands + c]; }
    T at(u32 y, u32 x, u32 c) const { return data[(static_cast<size_t>(y) * size + x) * bands + c]; }
};

template <class T>
inline Patch<T> extract_patch(const HsiCube& cube, u32 row0, u32 col0, u32 patch_size) {
    if (row0 + patch_size > cube.height || col0 + patch_size > cube.width)
        throw ConfigError("extract_patch: window out of bounds");
    Patch<T> patch;
    patch.size = patch_size;
    patch.bands = cube.bands;
    patch.data.resize(static_cast<size_t>(patch_size) * patch_size * cube.bands);
    for (u32 b = 0; b < cube.bands; ++b) {
        const f32* plane = cube.data.data() + static_cast<size_t>(b) * cube.plane();
        for (u32 y = 0; y < patch_size; ++y) {
            const f32* src = plane + static_cast<size_t>(row0 + y) * cube.width + col0;
            for (u32 x = 0; x < patch_size; ++x)
                patch.at(y, x, b) = static_cast<T>(src[x]);
        }
    }
    return patch;
}

template <class T>
struct PatchPair {
    Patch<T> grid1;
    Patch<T> grid2;
    std::pair<u32, u32> origin1{0, 0};  // (row, col)
    std::pair<u32, u32> origin2{0, 0};
    std::vector<u32> overlap1;  // flat pixel indices into grid1
    std::vector<u32> overlap2;  // same source pixels, indices into grid2

    f64 overlap_fraction() const {
        return static_cast<f64>(overlap1.size()) /
               (static_cast<f64>(grid1.size) * grid1.size);
    }
};

// Deterministic constructor from explicit origins (also the test hook for
// forced offsets). Computes the exact overlap index maps.
template <class T>
inline PatchPair<T> make_patch_pair(const HsiCube& cube, u32 patch_size,
                                    std::pair<u32, u32> origin1, std::pair<u32, u32> origin2) {
    PatchPair<T> pair;
    pair.grid1 = extract_patch<T>(cube, origin1.first, origin1.second, patch_size);
    pair.grid2 = extract_patch<T>(cube, origin2.first, origin2.second, patch_size);
    pair.origin1 = origin1;
    pair.origin2 = origin2;
    const u32 r_lo = std::max(origin1.first, origin2.first);
    const u32 r_hi = std::min(origin1.first + patch_size, origin2.first + patch_size);
    const u32 c_lo = std::max(origin1.second, origin2.second);
    const u32 c_hi = std::min(origin1.second + patch_size, origin2.second + patch_size);
    for (u32 r = r_lo; r < r_hi; ++r)
        for (u32 c = c_lo; c < c_hi; ++c) {
            pair.overlap1.push_back((r - origin1.first) * patch_size + (c - origin1.second));
            pair.overlap2.push_back((r - origin2.first) * patch_size + (c - origin2.second));
        }
    return pair;
}

// Any overlap fraction in [fmin, fmax] reachable on this cube for this P?
inline bool overlap_range_feasible(const HsiCube& cube, u32 patch_size, f64 fmin, f64 fmax) {
    const u32 max_dr = std::min(patch_size - 1, cube.height - patch_size);
    const u32 max_dc = std::min(patch_size - 1, cube.width - patch_size);
    const f64 area = static_cast<f64>(patch_size) * patch_size;
    for (u32 dr = 0; dr <= max_dr; ++dr)
        for (u32 dc = 0; dc <= max_dc; ++dc) {
            if (dr == 0 && dc == 0) continue;  // identical windows: fraction 1, outside fmax < 1
            const f64 frac = static_cast<f64>(patch_size - dr) * (patch_size - dc) / area;
            if (frac >= fmin && frac <= fmax) return true;
        }
    return false;
}

template <class T>
inline PatchPair<T> sample_patch_pair(const HsiCube& cube, u32 patch_size, f64 fmin, f64 fmax,
                                      Rng& rng) {
    if (patch_size == 0 || patch_size > cube.height || patch_size > cube.width)
        throw ConfigError("sample_patch_pair: cube smaller than patch size");
    if (!(fmin > 0.0 && fmin <= fmax && fmax < 1.0))
        throw ConfigError("sample_patch_pair: overlap range must satisfy 0 < fmin <= fmax < 1");
    if (!overlap_range_feasible(cube, patch_size, fmin, fmax))
        throw ConfigError("sample_patch_pair: overlap range infeasible for this patch size");

    const i64 max_r = static_cast<i64>(cube.height) - patch_size;
    const i64 max_c = static_cast<i64>(cube.width) - patch_size;
    const f64 area = static_cast<f64>(patch_size) * patch_size;
    const i64 span = static_cast<i64>(patch_size) - 1;
    for (int attempt = 0; attempt < 100000; ++attempt) {
        const i64 r1 = rng.uniform_int(0, max_r);
        const i64 c1 = rng.uniform_int(0, max_c);
        const i64 dr = rng.uniform_int(-span, span);
        const i64 dc = rng.uniform_int(-span, span);
        const i64 r2 = r1 + dr;
        const i64 c2 = c1 + dc;
        if (r2 < 0 || r2 > max_r || c2 < 0 || c2 > max_c) continue;
        const f64 frac = static_cast<f64>(patch_size - std::abs(dr)) *
                         static_cast<f64>(patch_size - std::abs(dc)) / area;
        if (frac < fmin || frac > fmax) continue;
        return make_patch_pair<T>(cube, patch_size,
                                  {static_cast<u32>(r1), static_cast<u32>(c1)},
                                  {static_cast<u32>(r2), static_cast<u32>(c2)});
    }
    throw ConfigError("sample_patch_pair: rejection sampling failed to find a valid pair");
}

// ---------------------------------------------------------------------------
// Cube scheduler. Visit order is a seeded permutation, re-shuffled per epoch.
// Budget R counts patch-pair draws per resident cube. Sync mode keeps one
// cube resident and blocks on loads; async mode keeps at most two (one in
// use, one prefetching on a loader thread). Corrupt cubes are skipped with a
// warning.
// ---------------------------------------------------------------------------

enum class ScheduleMode { sync, async };

class CubeScheduler {
  public:
    struct Snapshot {
        std::string rng_state;
        std::vector<u32> permutation;
        u32 cursor = 0;          // next unconsumed slot in the visit stream
        u64 epoch = 0;
        u64 draws_used = 0;      // draws consumed on the current cube
        u32 current_index = kNone;   // paths_ index of the resident cube
        u32 prefetch_index = kNone;  // paths_ index of an in-flight prefetch
    };

    static constexpr u32 kNone = 0xffffffffu;

    CubeScheduler(std::vector<std::string> paths, ScheduleMode mode, u64 reuse_budget, u64 seed)
        : paths_(std::move(paths)),
          mode_(mode),
          reuse_budget_(std::max<u64>(1, reuse_budget)),
          rng_(seed) {
        if (paths_.empty()) throw ConfigError("scheduler: dataset is empty");
        reshuffle();
        if (mode_ == ScheduleMode::async) loader_ = std::thread([this] { loader_main(); });
    }

    ~CubeScheduler() {
        if (mode_ == ScheduleMode::async) {
            {
                std::lock_guard<std::mutex> lock(mu_);
                stop_ = true;
            }
            cv_.notify_all();
            loader_.join();
        }
    }

    CubeScheduler(const CubeScheduler&) = delete;
    CubeScheduler& operator=(const CubeScheduler&) = delete;

    // Returns the cube to draw the next `draws` patch pairs from. Advances to
    // the next cube in the visit stream once the current budget is exhausted.
    std::shared_ptr<const HsiCube> next(u64 draws = 1) {
        if (!current_ || draws_used_ >= reuse_budget_) advance();
        draws_used_ += draws;
        return current_;
    }

    u64 reuse_budget() const { return reuse_budget_; }
    u64 epoch() const { return epoch_; }

    Snapshot snapshot() const {
        Snapshot s;
        s.rng_state = rng_.serialize();
        s.permutation = permutation_;
        s.cursor = cursor_;
        s.epoch = epoch_;
        s.draws_used = draws_used_;
        s.current_index = current_index_;
        s.prefetch_index = prefetch_index_;
        return s;
    }

    // Restores the visit stream and budget; resident cubes are reloaded from
    // disk (the snapshot holds no pixel data).
    void restore(const Snapshot& s) {
        rng_.deserialize(s.rng_state);
        permutation_ = s.permutation;
        cursor_ = s.cursor;
        epoch_ = s.epoch;
        draws_used_ = s.draws_used;
        current_index_ = s.current_index;
        prefetch_index_ = s.prefetch_index;
        current_.reset();
        if (current_index_ != kNone && draws_used_ < reuse_budget_) {
            current_ = load_tracked(paths_[current_index_]);
            if (!current_) current_index_ = kNone;  // vanished; next draw advances
        }
        if (mode_ == ScheduleMode::async && prefetch_index_ != kNone)
            request_prefetch(prefetch_index_);
    }

  private:
    struct TrackedCube {
        HsiCube cube;
        ~TrackedCube() { MemoryTracker::instance().sub_cube(cube.data.size() * sizeof(f32)); }
    };

    static std::shared_ptr<const HsiCube> wrap_tracked(HsiCube&& cube) {
        MemoryTracker::instance().add_cube(cube.data.size() * sizeof(f32));
        auto holder = std::make_shared<TrackedCube>();
        holder->cube = std::move(cube);
        return std::shared_ptr<const HsiCube>(holder, &holder->cube);
    }

    static std::shared_ptr<const HsiCube> load_tracked(const std::string& path) {
        try {
            HsiCube cube = load_cube(path);
            return wrap_tracked(std::move(cube));
        } catch (const IoError& e) {
            log_warn("skipping cube " + path + ": " + e.what());
            return nullptr;
        }
    }

    void reshuffle() {
        permutation_.resize(paths_.size());
        for (u32 i = 0; i < permutation_.size(); ++i) permutation_[i] = i;
        rng_.shuffle(permutation_);
        cursor_ = 0;
    }

    // Next cube index in the visit stream: a seeded permutation per epoch,
    // re-shuffled at each epoch boundary.
    u32 take_next_index() {
        if (cursor_ >= permutation_.size()) {
            ++epoch_;
            reshuffle();
        }
        return permutation_[cursor_++];
    }

    void advance() {
        const size_t max_tries = 2 * paths_.size() + 2;
        if (mode_ == ScheduleMode::sync) {
            current_.reset();  // keep at most one cube resident
            current_index_ = kNone;
            for (size_t tries = 0; tries < max_tries; ++tries) {
                const u32 idx = take_next_index();
                current_ = load_tracked(paths_[idx]);
                if (current_) {
                    current_index_ = idx;
                    break;
                }
            }
            if (!current_) throw IoError(IoErrorKind::open_failed, "scheduler: no loadable cube in dataset");
            draws_used_ = 0;
            return;
        }
        // async: consume the in-flight prefetch (waiting for it to finish),
        // then immediately start prefetching the following cube.
        for (size_t tries = 0; tries < max_tries; ++tries) {
            if (prefetch_index_ == kNone) request_prefetch(take_next_index());
            const u32 fetched_index = prefetch_index_;
            std::shared_ptr<const HsiCube> fetched = wait_prefetch();
            prefetch_index_ = kNone;
            if (fetched) {
                current_ = std::move(fetched);  // previous cube released here
                current_index_ = fetched_index;
                draws_used_ = 0;
                request_prefetch(take_next_index());
                return;
            }
        }
        throw IoError(IoErrorKind::open_failed, "scheduler: no loadable cube in dataset");
    }

    void request_prefetch(u32 idx) {
        prefetch_index_ = idx;
        std::lock_guard<std::mutex> lock(mu_);
        ++request_gen_;
        request_ = paths_[idx];
        request_ready_ = true;
        cv_.notify_all();
    }

    std::shared_ptr<const HsiCube> wait_prefetch() {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [this] { return fetched_gen_ == request_gen_; });
        auto out = std::move(fetched_);
        fetched_.reset();
        return out;
    }

    void loader_main() {
        for (;;) {
            std::string path;
            u64 gen = 0;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [this] { return stop_ || request_ready_; });
                if (stop_) return;
                path = request_;
                gen = request_gen_;
                request_ready_ = false;
            }
            std::shared_ptr<const HsiCube> cube = load_tracked(path);
            {
                std::lock_guard<std::mutex> lock(mu_);
                fetched_ = std::move(cube);
                fetched_gen_ = gen;
            }
            cv_.notify_all();
        }
    }

    std::vector<std::string> paths_;
    ScheduleMode mode_;
    u64 reuse_budget_;
    Rng rng_;
    std::vector<u32> permutation_;
    u32 cursor_ = 0;
    u64 epoch_ = 0;
    u64 draws_used_ = 0;
    u32 current_index_ = kNone;
    u32 prefetch_index_ = kNone;
    std::shared_ptr<const HsiCube> current_;

    // async machinery
    std::thread loader_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::string request_;
    u64 request_gen_ = 0;
    u64 fetched_gen_ = 0;
    bool request_ready_ = false;
    bool stop_ = false;
    std::shared_ptr<const HsiCube> fetched_;
};

}  // namespace dgc

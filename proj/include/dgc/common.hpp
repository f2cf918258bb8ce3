#pragma once

// Shared plumbing: scalar aliases, error types, seeded RNG, little-endian
// stream helpers, logging, and the allocation tracker used by the
// constant-memory checks.

#include <array>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dgc {

using u8 = std::uint8_t;
using u16 = std::uint16_t;
using u32 = std::uint32_t;
using u64 = std::uint64_t;
using i32 = std::int32_t;
using i64 = std::int64_t;
using f32 = float;
using f64 = double;

// ---------------------------------------------------------------------------
// Errors. The CLI maps each family to a distinct exit code.
// ---------------------------------------------------------------------------

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class IoErrorKind {
    missing_file,
    open_failed,
    bad_magic,
    bad_version,
    truncated,
    corrupt,
    write_failed,
};

struct IoError : std::runtime_error {
    IoErrorKind kind;
    IoError(IoErrorKind k, const std::string& msg) : std::runtime_error(msg), kind(k) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Logging, gated by the DGC_LOG env var: 0 silent, 1 warn (default), 2 info,
// 3 debug.
// ---------------------------------------------------------------------------

inline int log_level() {
    static const int level = [] {
        const char* v = std::getenv("DGC_LOG");
        if (!v || !*v) return 1;
        return std::atoi(v);
    }();
    return level;
}

inline void log_warn(const std::string& msg) {
    if (log_level() >= 1) std::cerr << "[dgc] warning: " << msg << "\n";
}

inline void log_info(const std::string& msg) {
    if (log_level() >= 2) std::cerr << "[dgc] " << msg << "\n";
}

inline void log_debug(const std::string& msg) {
    if (log_level() >= 3) std::cerr << "[dgc] debug: " << msg << "\n";
}

// ---------------------------------------------------------------------------
// Little-endian binary stream helpers. Integers and IEEE floats are written
// byte-exact regardless of host endianness.
// ---------------------------------------------------------------------------

template <class T>
inline void write_le(std::ostream& out, T value) {
    static_assert(std::is_integral_v<T>);
    std::make_unsigned_t<T> v = static_cast<std::make_unsigned_t<T>>(value);
    u8 bytes[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<u8>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
inline bool read_le(std::istream& in, T& value) {
    static_assert(std::is_integral_v<T>);
    u8 bytes[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) return false;
    std::make_unsigned_t<T> v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::make_unsigned_t<T>>(bytes[i]) << (8 * i);
    value = static_cast<T>(v);
    return true;
}

inline void write_f32_le(std::ostream& out, f32 value) {
    write_le<u32>(out, std::bit_cast<u32>(value));
}

inline bool read_f32_le(std::istream& in, f32& value) {
    u32 bits = 0;
    if (!read_le<u32>(in, bits)) return false;
    value = std::bit_cast<f32>(bits);
    return true;
}

inline void write_f64_le(std::ostream& out, f64 value) {
    write_le<u64>(out, std::bit_cast<u64>(value));
}

inline bool read_f64_le(std::istream& in, f64& value) {
    u64 bits = 0;
    if (!read_le<u64>(in, bits)) return false;
    value = std::bit_cast<f64>(bits);
    return true;
}

// Bulk f32 payload I/O. On little-endian hosts this is a straight memcpy.
inline void write_f32_block_le(std::ostream& out, const f32* data, size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * 4));
    } else {
        for (size_t i = 0; i < count; ++i) write_f32_le(out, data[i]);
    }
}

inline bool read_f32_block_le(std::istream& in, f32* data, size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        return static_cast<bool>(in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * 4)));
    } else {
        for (size_t i = 0; i < count; ++i)
            if (!read_f32_le(in, data[i])) return false;
        return true;
    }
}

// ---------------------------------------------------------------------------
// Hashing: FNV-1a, plus a 256-bit digest built from four salted lanes. Used
// for checkpoint/config compatibility checks, not security.
// ---------------------------------------------------------------------------

inline u64 fnv1a64(std::string_view data, u64 basis = 0xcbf29ce484222325ull) {
    u64 h = basis;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x00000100000001b3ull;
    }
    return h;
}

inline std::array<u8, 32> digest256(std::string_view data) {
    static constexpr u64 salts[4] = {
        0xcbf29ce484222325ull, 0x84222325cbf29ce4ull,
        0x9e3779b97f4a7c15ull, 0xc2b2ae3d27d4eb4full};
    std::array<u8, 32> out{};
    for (int lane = 0; lane < 4; ++lane) {
        u64 h = fnv1a64(data, salts[lane]);
        // extra avalanche so lanes decorrelate
        h ^= h >> 33;
        h *= 0xff51afd7ed558ccdull;
        h ^= h >> 33;
        for (int i = 0; i < 8; ++i) out[static_cast<size_t>(lane * 8 + i)] = static_cast<u8>(h >> (8 * i));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Seeded RNG. Engine is std::mt19937_64; all distributions are explicit so
// the stream is reproducible and the full state round-trips through text.
// ---------------------------------------------------------------------------

inline u64 splitmix64(u64 x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Label-derived child seed, so every consumer of the master seed gets an
// independent stream.
inline u64 child_seed(u64 master, std::string_view label) {
    return splitmix64(master ^ fnv1a64(label));
}

class Rng {
  public:
    Rng() : engine_(0x853c49e6748fea9bull) {}
    explicit Rng(u64 seed) : engine_(seed) {}

    u64 next_u64() { return engine_(); }

    // unbiased integer in [0, n)
    u64 below(u64 n) {
        if (n == 0) throw std::invalid_argument("Rng::below(0)");
        const u64 limit = std::numeric_limits<u64>::max() - std::numeric_limits<u64>::max() % n;
        u64 x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // integer in [lo, hi] inclusive
    i64 uniform_int(i64 lo, i64 hi) {
        if (lo > hi) throw std::invalid_argument("Rng::uniform_int: lo > hi");
        return lo + static_cast<i64>(below(static_cast<u64>(hi - lo) + 1));
    }

    // double in [0, 1)
    f64 uniform() { return static_cast<f64>(engine_() >> 11) * 0x1.0p-53; }

    f64 uniform(f64 lo, f64 hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller; two draws per call, no cached state
    f64 gaussian() {
        f64 u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const f64 u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& items) {
        for (size_t i = items.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    std::string serialize() const {
        std::ostringstream out;
        out << engine_;
        return out.str();
    }

    void deserialize(const std::string& text) {
        std::istringstream in(text);
        in >> engine_;
        if (!in) throw IoError(IoErrorKind::corrupt, "invalid rng state blob");
    }

  private:
    std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Allocation tracker for the constant-memory contract. Cube buffers and the
// trainer's working sets register here; peaks are what tests assert on.
// ---------------------------------------------------------------------------

class MemoryTracker {
  public:
    static MemoryTracker& instance() {
        static MemoryTracker tracker;
        return tracker;
    }

    void add_bytes(u64 n) {
        const u64 now = current_bytes_.fetch_add(n) + n;
        update_peak(peak_bytes_, now);
    }

    void sub_bytes(u64 n) { current_bytes_.fetch_sub(n); }

    void add_cube(u64 bytes) {
        const u64 now = current_cubes_.fetch_add(1) + 1;
        update_peak(peak_cubes_, now);
        add_bytes(bytes);
    }

    void sub_cube(u64 bytes) {
        current_cubes_.fetch_sub(1);
        sub_bytes(bytes);
    }

    u64 current_bytes() const { return current_bytes_.load(); }
    u64 peak_bytes() const { return peak_bytes_.load(); }
    u64 current_cubes() const { return current_cubes_.load(); }
    u64 peak_cubes() const { return peak_cubes_.load(); }

    void reset() {
        current_bytes_ = 0;
        peak_bytes_ = 0;
        current_cubes_ = 0;
        peak_cubes_ = 0;
    }

  private:
    static void update_peak(std::atomic<u64>& peak, u64 now) {
        u64 prev = peak.load();
        while (prev < now && !peak.compare_exchange_weak(prev, now)) {
        }
    }

    std::atomic<u64> current_bytes_{0};
    std::atomic<u64> peak_bytes_{0};
    std::atomic<u64> current_cubes_{0};
    std::atomic<u64> peak_cubes_{0};
};

// Peak resident set of this process in KiB (Linux VmHWM); 0 if unavailable.
inline u64 read_peak_rss_kb() {
    std::ifstream status("/proc/self/status");
    std::string line;
    while (std::getline(status, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            std::istringstream fields(line.substr(6));
            u64 kb = 0;
            fields >> kb;
            return kb;
        }
    }
    return 0;
}

template <class T>
inline bool all_finite(const std::vector<T>& values) {
    for (T v : values)
        if (!std::isfinite(static_cast<f64>(v))) return false;
    return true;
}

}  // namespace dgc

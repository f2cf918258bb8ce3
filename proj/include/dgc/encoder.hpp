#pragma once

// Pixel-spectrum encoder: three spectral 1D convolutions (valid padding,
// configurable strides) followed by a global average pool over the remaining
// spectral positions, then two spatial 2D convolutions (same padding,
// stride 1). ReLU after every convolution; the final per-pixel vector is
// L2-normalized (all-zero vectors fall back to the first basis vector).
//
// Every pixel's embedding therefore depends on its own spectrum plus the
// spatial neighborhood reachable by the two stacked spatial kernels.
// Backward passes are exact reverse-mode gradients, accumulated in a fixed
// serial order so training is bit-reproducible.

#include <span>

#include "dgc/data_io.hpp"

namespace dgc {

struct EncoderConfig {
    u32 bands = 301;
    u32 channels = 32;  // embedding dimension, maintained through all layers
    u32 spectral_kernel = 9;
    std::array<u32, 3> spectral_strides = {4, 4, 2};
    u32 spatial_kernel = 3;

    // conv output length for valid padding
    static u32 conv_len(u32 in_len, u32 kernel, u32 stride) {
        if (in_len < kernel) return 0;
        return (in_len - kernel) / stride + 1;
    }

    u32 len1() const { return conv_len(bands, spectral_kernel, spectral_strides[0]); }
    u32 len2() const { return conv_len(len1(), spectral_kernel, spectral_strides[1]); }
    u32 len3() const { return conv_len(len2(), spectral_kernel, spectral_strides[2]); }

    void validate() const {
        if (channels == 0) throw ConfigError("encoder: channels must be positive");
        if (spectral_kernel == 0 || spatial_kernel == 0 || spatial_kernel % 2 == 0)
            throw ConfigError("encoder: kernels must be positive (spatial kernel odd)");
        for (u32 s : spectral_strides)
            if (s == 0) throw ConfigError("encoder: strides must be positive");
        if (len1() == 0 || len2() == 0 || len3() == 0)
            throw ConfigError("encoder: band count too small for the spectral stride plan");
    }

    // flat parameter layout: w1 b1 w2 b2 w3 b3 v1 vb1 v2 vb2
    size_t w1_size() const { return static_cast<size_t>(spectral_kernel) * channels; }
    size_t w23_size() const { return static_cast<size_t>(spectral_kernel) * channels * channels; }
    size_t v_size() const { return static_cast<size_t>(spatial_kernel) * spatial_kernel * channels * channels; }

    size_t param_count() const {
        return w1_size() + channels + 2 * (w23_size() + channels) + 2 * (v_size() + channels);
    }

    size_t offset(int tensor) const {
        size_t off = 0;
        const size_t sizes[10] = {w1_size(),  channels, w23_size(), channels, w23_size(),
                                  channels, v_size(), channels, v_size(),  channels};
        for (int i = 0; i < tensor; ++i) off += sizes[i];
        return off;
    }

    bool operator==(const EncoderConfig&) const = default;
};

template <class T>
struct EncoderParams {
    EncoderConfig config;
    std::vector<T> flat;

    // tensor views; weight layouts put the output channel innermost
    std::span<T> w1() { return {flat.data() + config.offset(0), config.w1_size()}; }      // [q][oc]
    std::span<T> b1() { return {flat.data() + config.offset(1), config.channels}; }
    std::span<T> w2() { return {flat.data() + config.offset(2), config.w23_size()}; }     // [q][ic][oc]
    std::span<T> b2() { return {flat.data() + config.offset(3), config.channels}; }
    std::span<T> w3() { return {flat.data() + config.offset(4), config.w23_size()}; }
    std::span<T> b3() { return {flat.data() + config.offset(5), config.channels}; }
    std::span<T> v1() { return {flat.data() + config.offset(6), config.v_size()}; }       // [dy][dx][ic][oc]
    std::span<T> vb1() { return {flat.data() + config.offset(7), config.channels}; }
    std::span<T> v2() { return {flat.data() + config.offset(8), config.v_size()}; }
    std::span<T> vb2() { return {flat.data() + config.offset(9), config.channels}; }

    std::span<const T> w1() const { return {flat.data() + config.offset(0), config.w1_size()}; }
    std::span<const T> b1() const { return {flat.data() + config.offset(1), config.channels}; }
    std::span<const T> w2() const { return {flat.data() + config.offset(2), config.w23_size()}; }
    std::span<const T> b2() const { return {flat.data() + config.offset(3), config.channels}; }
    std::span<const T> w3() const { return {flat.data() + config.offset(4), config.w23_size()}; }
    std::span<const T> b3() const { return {flat.data() + config.offset(5), config.channels}; }
    std::span<const T> v1() const { return {flat.data() + config.offset(6), config.v_size()}; }
    std::span<const T> vb1() const { return {flat.data() + config.offset(7), config.channels}; }
    std::span<const T> v2() const { return {flat.data() + config.offset(8), config.v_size()}; }
    std::span<const T> vb2() const { return {flat.data() + config.offset(9), config.channels}; }

    template <class U>
    EncoderParams<U> cast() const {
        EncoderParams<U> out;
        out.config = config;
        out.flat.resize(flat.size());
        for (size_t i = 0; i < flat.size(); ++i) out.flat[i] = static_cast<U>(flat[i]);
        return out;
    }
};

template <class T>
inline EncoderParams<T> init_params(const EncoderConfig& config, u64 seed) {
    config.validate();
    EncoderParams<T> params;
    params.config = config;
    params.flat.assign(config.param_count(), T(0));
    Rng rng(child_seed(seed, "encoder-init"));
    auto fill_uniform = [&](std::span<T> w, u32 fan_in) {
        const f64 bound = std::sqrt(3.0 / static_cast<f64>(fan_in));
        for (T& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
    };
    const u32 k = config.spectral_kernel;
    const u32 ch = config.channels;
    const u32 sk2 = config.spatial_kernel * config.spatial_kernel;
    fill_uniform(params.w1(), k);
    fill_uniform(params.w2(), k * ch);
    fill_uniform(params.w3(), k * ch);
    fill_uniform(params.v1(), sk2 * ch);
    fill_uniform(params.v2(), sk2 * ch);
    // biases stay zero
    return params;
}

// ---------------------------------------------------------------------------
// Batched square patches and embedding grids
// ---------------------------------------------------------------------------

template <class T>
struct PatchBatch {
    u32 count = 0;  // B
    u32 size = 0;   // P
    u32 bands = 0;  // C
    std::vector<T> data;  // [((b*P + y)*P + x)*C + c]

    void reserve_patches(u32 n, u32 patch_size, u32 band_count) {
        count = 0;
        size = patch_size;
        bands = band_count;
        data.reserve(static_cast<size_t>(n) * patch_size * patch_size * band_count);
    }

    void append(const Patch<T>& patch) {
        if (count == 0 && data.empty()) {
            size = patch.size;
            bands = patch.bands;
        }
        if (patch.size != size || patch.bands != bands)
            throw ConfigError("PatchBatch: inconsistent patch shape");
        data.insert(data.end(), patch.data.begin(), patch.data.end());
        ++count;
    }

    size_t pixels() const { return static_cast<size_t>(count) * size * size; }
    const T* spectrum(size_t pixel) const { return data.data() + pixel * bands; }
};

template <class T>
struct EmbeddingGrid {
    u32 batch = 0;
    u32 height = 0;
    u32 width = 0;
    u32 dim = 0;
    std::vector<T> values;  // [(((b*h + y)*w + x))*dim + d]
    bool normalized = false;

    size_t pixels() const { return static_cast<size_t>(batch) * height * width; }
    T* pixel(size_t row) { return values.data() + row * dim; }
    const T* pixel(size_t row) const { return values.data() + row * dim; }
};

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

template <class T>
struct EncoderTape {
    // post-ReLU activations of every stage, pixel-major with channels innermost
    std::vector<T> a1, a2, a3;  // [px][pos][ch]
    std::vector<T> gap;         // [px][ch]
    std::vector<T> s1;          // [px][ch] after first spatial conv
    std::vector<T> v;           // [px][ch] after second spatial conv (pre-normalization)
    std::vector<T> v_norm;      // [px]
    // distance of the closest pre-activation to the ReLU kink; gradient
    // checks reject instances where a finite-difference step could cross it
    T min_abs_preact = std::numeric_limits<T>::max();
};

namespace detail {

// One spectral conv layer over all pixels. in: [px][in_len][ic], w: [q][ic][oc].
template <class T>
void conv1d_forward(const T* in, size_t px_count, u32 in_len, u32 in_ch, const T* w, const T* bias,
                    u32 kernel, u32 stride, u32 out_len, u32 out_ch, T* out, T* min_abs_preact) {
    T kink = std::numeric_limits<T>::max();
    for (size_t px = 0; px < px_count; ++px) {
        const T* x = in + px * in_len * in_ch;
        T* y = out + px * out_len * out_ch;
        for (u32 t = 0; t < out_len; ++t) {
            T* yt = y + static_cast<size_t>(t) * out_ch;
            for (u32 oc = 0; oc < out_ch; ++oc) yt[oc] = bias[oc];
            const T* xt = x + static_cast<size_t>(t) * stride * in_ch;
            for (u32 q = 0; q < kernel; ++q) {
                const T* xq = xt + static_cast<size_t>(q) * in_ch;
                const T* wq = w + static_cast<size_t>(q) * in_ch * out_ch;
                for (u32 ic = 0; ic < in_ch; ++ic) {
                    const T xv = xq[ic];
                    const T* wqc = wq + static_cast<size_t>(ic) * out_ch;
                    for (u32 oc = 0; oc < out_ch; ++oc) yt[oc] += wqc[oc] * xv;
                }
            }
            for (u32 oc = 0; oc < out_ch; ++oc) {
                kink = std::min(kink, std::abs(yt[oc]));
                yt[oc] = yt[oc] > T(0) ? yt[oc] : T(0);
            }
        }
    }
    if (min_abs_preact) *min_abs_preact = std::min(*min_abs_preact, kink);
}

// One spatial conv layer (same padding, stride 1) over one patch.
// in/out: [y][x][ch], w: [dy][dx][ic][oc].
template <class T>
void conv2d_forward(const T* in, u32 size, u32 ch, const T* w, const T* bias, u32 kernel, T* out,
                    T* min_abs_preact) {
    const i64 pad = kernel / 2;
    T kink = std::numeric_limits<T>::max();
    for (u32 y = 0; y < size; ++y)
        for (u32 x = 0; x < size; ++x) {
            T* o = out + (static_cast<size_t>(y) * size + x) * ch;
            for (u32 oc = 0; oc < ch; ++oc) o[oc] = bias[oc];
            for (u32 dy = 0; dy < kernel; ++dy) {
                const i64 yy = static_cast<i64>(y) + dy - pad;
                if (yy < 0 || yy >= size) continue;
                for (u32 dx = 0; dx < kernel; ++dx) {
                    const i64 xx = static_cast<i64>(x) + dx - pad;
                    if (xx < 0 || xx >= size) continue;
                    const T* src = in + (static_cast<size_t>(yy) * size + xx) * ch;
                    const T* wk = w + (static_cast<size_t>(dy) * kernel + dx) * ch * ch;
                    for (u32 ic = 0; ic < ch; ++ic) {
                        const T xv = src[ic];
                        const T* wc = wk + static_cast<size_t>(ic) * ch;
                        for (u32 oc = 0; oc < ch; ++oc) o[oc] += wc[oc] * xv;
                    }
                }
            }
            for (u32 oc = 0; oc < ch; ++oc) {
                kink = std::min(kink, std::abs(o[oc]));
                o[oc] = o[oc] > T(0) ? o[oc] : T(0);
            }
        }
    if (min_abs_preact) *min_abs_preact = std::min(*min_abs_preact, kink);
}

}  // namespace detail

template <class T>
inline EmbeddingGrid<T> encode_with_tape(const EncoderParams<T>& params, const PatchBatch<T>& batch,
                                         EncoderTape<T>* tape) {
    const EncoderConfig& cfg = params.config;
    cfg.validate();
    if (batch.bands != cfg.bands) throw ConfigError("encode: band count mismatch");
    const u32 ch = cfg.channels;
    const u32 k = cfg.spectral_kernel;
    const u32 l1 = cfg.len1(), l2 = cfg.len2(), l3 = cfg.len3();
    const size_t px_count = batch.pixels();
    const u32 P = batch.size;

    EncoderTape<T> local;
    EncoderTape<T>& tp = tape ? *tape : local;
    tp.a1.assign(px_count * l1 * ch, T(0));
    tp.a2.assign(px_count * l2 * ch, T(0));
    tp.a3.assign(px_count * l3 * ch, T(0));
    tp.gap.assign(px_count * ch, T(0));
    tp.s1.assign(px_count * ch, T(0));
    tp.v.assign(px_count * ch, T(0));
    tp.v_norm.assign(px_count, T(0));

    tp.min_abs_preact = std::numeric_limits<T>::max();
    detail::conv1d_forward(batch.data.data(), px_count, cfg.bands, 1, params.w1().data(),
                           params.b1().data(), k, cfg.spectral_strides[0], l1, ch, tp.a1.data(),
                           &tp.min_abs_preact);
    detail::conv1d_forward(tp.a1.data(), px_count, l1, ch, params.w2().data(), params.b2().data(),
                           k, cfg.spectral_strides[1], l2, ch, tp.a2.data(), &tp.min_abs_preact);
    detail::conv1d_forward(tp.a2.data(), px_count, l2, ch, params.w3().data(), params.b3().data(),
                           k, cfg.spectral_strides[2], l3, ch, tp.a3.data(), &tp.min_abs_preact);

    const T inv_l3 = T(1) / static_cast<T>(l3);
    for (size_t px = 0; px < px_count; ++px) {
        const T* a = tp.a3.data() + px * l3 * ch;
        T* g = tp.gap.data() + px * ch;
        for (u32 t = 0; t < l3; ++t)
            for (u32 c = 0; c < ch; ++c) g[c] += a[static_cast<size_t>(t) * ch + c];
        for (u32 c = 0; c < ch; ++c) g[c] *= inv_l3;
    }

    const size_t patch_px = static_cast<size_t>(P) * P;
    for (u32 b = 0; b < batch.count; ++b) {
        const size_t base = static_cast<size_t>(b) * patch_px * ch;
        detail::conv2d_forward(tp.gap.data() + base, P, ch, params.v1().data(), params.vb1().data(),
                               cfg.spatial_kernel, tp.s1.data() + base, &tp.min_abs_preact);
        detail::conv2d_forward(tp.s1.data() + base, P, ch, params.v2().data(), params.vb2().data(),
                               cfg.spatial_kernel, tp.v.data() + base, &tp.min_abs_preact);
    }

    EmbeddingGrid<T> grid;
    grid.batch = batch.count;
    grid.height = P;
    grid.width = P;
    grid.dim = ch;
    grid.values.assign(px_count * ch, T(0));
    grid.normalized = true;
    for (size_t px = 0; px < px_count; ++px) {
        const T* v = tp.v.data() + px * ch;
        T* z = grid.pixel(px);
        T norm_sq = T(0);
        for (u32 c = 0; c < ch; ++c) norm_sq += v[c] * v[c];
        const T norm = std::sqrt(norm_sq);
        tp.v_norm[px] = norm;
        if (norm < T(1e-12)) {
            z[0] = T(1);  // fixed fallback unit vector
        } else {
            const T inv = T(1) / norm;
            for (u32 c = 0; c < ch; ++c) z[c] = v[c] * inv;
        }
    }
    return grid;
}

template <class T>
inline EmbeddingGrid<T> encode(const EncoderParams<T>& params, const PatchBatch<T>& batch) {
    return encode_with_tape<T>(params, batch, nullptr);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

// Reverse of conv1d_forward. `out_post` are the stored post-ReLU outputs,
// `d_out` the gradient on them (modified in place to pre-activation grads).
template <class T>
void conv1d_backward(const T* in, size_t px_count, u32 in_len, u32 in_ch, const T* w, u32 kernel,
                     u32 stride, u32 out_len, u32 out_ch, const T* out_post, T* d_out, T* d_in,
                     T* d_w, T* d_b) {
    const size_t out_stride = static_cast<size_t>(out_len) * out_ch;
    const size_t in_stride = static_cast<size_t>(in_len) * in_ch;
    for (size_t px = 0; px < px_count; ++px) {
        T* dy = d_out + px * out_stride;
        const T* post = out_post + px * out_stride;
        for (size_t i = 0; i < out_stride; ++i)
            if (post[i] <= T(0)) dy[i] = T(0);
    }
    for (size_t px = 0; px < px_count; ++px) {
        const T* x = in + px * in_stride;
        const T* dy = d_out + px * out_stride;
        T* dx = d_in ? d_in + px * in_stride : nullptr;
        for (u32 t = 0; t < out_len; ++t) {
            const T* dyt = dy + static_cast<size_t>(t) * out_ch;
            for (u32 oc = 0; oc < out_ch; ++oc) d_b[oc] += dyt[oc];
            const size_t x_off = static_cast<size_t>(t) * stride * in_ch;
            for (u32 q = 0; q < kernel; ++q) {
                const size_t xq = x_off + static_cast<size_t>(q) * in_ch;
                T* dwq = d_w + static_cast<size_t>(q) * in_ch * out_ch;
                for (u32 ic = 0; ic < in_ch; ++ic) {
                    const T xv = x[xq + ic];
                    T* dwc = dwq + static_cast<size_t>(ic) * out_ch;
                    T acc = T(0);
                    const T* wc = w + (static_cast<size_t>(q) * in_ch + ic) * out_ch;
                    for (u32 oc = 0; oc < out_ch; ++oc) {
                        dwc[oc] += xv * dyt[oc];
                        acc += wc[oc] * dyt[oc];
                    }
                    if (dx) dx[xq + ic] += acc;
                }
            }
        }
    }
}

template <class T>
void conv2d_backward(const T* in, u32 size, u32 ch, const T* w, u32 kernel, const T* out_post,
                     T* d_out, T* d_in, T* d_w, T* d_b) {
    const i64 pad = kernel / 2;
    const size_t n = static_cast<size_t>(size) * size * ch;
    for (size_t i = 0; i < n; ++i)
        if (out_post[i] <= T(0)) d_out[i] = T(0);
    for (u32 y = 0; y < size; ++y)
        for (u32 x = 0; x < size; ++x) {
            const T* dyv = d_out + (static_cast<size_t>(y) * size + x) * ch;
            for (u32 oc = 0; oc < ch; ++oc) d_b[oc] += dyv[oc];
            for (u32 dy = 0; dy < kernel; ++dy) {
                const i64 yy = static_cast<i64>(y) + dy - pad;
                if (yy < 0 || yy >= size) continue;
                for (u32 dx = 0; dx < kernel; ++dx) {
                    const i64 xx = static_cast<i64>(x) + dx - pad;
                    if (xx < 0 || xx >= size) continue;
                    const size_t src_off = (static_cast<size_t>(yy) * size + xx) * ch;
                    const size_t w_off = (static_cast<size_t>(dy) * kernel + dx) * ch * ch;
                    for (u32 ic = 0; ic < ch; ++ic) {
                        const T xv = in[src_off + ic];
                        T* dwc = d_w + w_off + static_cast<size_t>(ic) * ch;
                        const T* wc = w + w_off + static_cast<size_t>(ic) * ch;
                        T acc = T(0);
                        for (u32 oc = 0; oc < ch; ++oc) {
                            dwc[oc] += xv * dyv[oc];
                            acc += wc[oc] * dyv[oc];
                        }
                        d_in[src_off + ic] += acc;
                    }
                }
            }
        }
}

}  // namespace detail

// Gradient of the encoder parameters for an upstream gradient on the
// normalized embeddings. The tape must come from encode_with_tape on the
// same (params, batch).
template <class T>
inline std::vector<T> encode_backward_from_tape(const EncoderParams<T>& params,
                                                const PatchBatch<T>& batch,
                                                const EncoderTape<T>& tape,
                                                const EmbeddingGrid<T>& output,
                                                const std::vector<T>& d_embeddings) {
    const EncoderConfig& cfg = params.config;
    const u32 ch = cfg.channels;
    const u32 k = cfg.spectral_kernel;
    const u32 l1 = cfg.len1(), l2 = cfg.len2(), l3 = cfg.len3();
    const size_t px_count = batch.pixels();
    const u32 P = batch.size;
    if (d_embeddings.size() != px_count * ch)
        throw ConfigError("encode_backward: upstream gradient shape mismatch");

    std::vector<T> grads(cfg.param_count(), T(0));
    EncoderParams<T> gview;
    gview.config = cfg;
    gview.flat.swap(grads);

    // normalization jacobian: dv = (u - (u.z) z) / |v|; zero-fallback pixels
    // are locally constant, so their gradient is zero
    std::vector<T> d_v(px_count * ch, T(0));
    for (size_t px = 0; px < px_count; ++px) {
        const T norm = tape.v_norm[px];
        if (norm < T(1e-12)) continue;
        const T* z = output.pixel(px);
        const T* u = d_embeddings.data() + px * ch;
        T dot = T(0);
        for (u32 c = 0; c < ch; ++c) dot += u[c] * z[c];
        const T inv = T(1) / norm;
        T* dv = d_v.data() + px * ch;
        for (u32 c = 0; c < ch; ++c) dv[c] = (u[c] - dot * z[c]) * inv;
    }

    const size_t patch_px = static_cast<size_t>(P) * P;
    std::vector<T> d_s1(px_count * ch, T(0));
    std::vector<T> d_gap(px_count * ch, T(0));
    for (u32 b = 0; b < batch.count; ++b) {
        const size_t base = static_cast<size_t>(b) * patch_px * ch;
        detail::conv2d_backward(tape.s1.data() + base, P, ch, params.v2().data(), cfg.spatial_kernel,
                                tape.v.data() + base, d_v.data() + base, d_s1.data() + base,
                                gview.v2().data(), gview.vb2().data());
        detail::conv2d_backward(tape.gap.data() + base, P, ch, params.v1().data(), cfg.spatial_kernel,
                                tape.s1.data() + base, d_s1.data() + base, d_gap.data() + base,
                                gview.v1().data(), gview.vb1().data());
    }

    std::vector<T> d_a3(px_count * l3 * ch, T(0));
    const T inv_l3 = T(1) / static_cast<T>(l3);
    for (size_t px = 0; px < px_count; ++px) {
        const T* dg = d_gap.data() + px * ch;
        T* da = d_a3.data() + px * l3 * ch;
        for (u32 t = 0; t < l3; ++t)
            for (u32 c = 0; c < ch; ++c) da[static_cast<size_t>(t) * ch + c] = dg[c] * inv_l3;
    }

    std::vector<T> d_a2(px_count * l2 * ch, T(0));
    detail::conv1d_backward(tape.a2.data(), px_count, l2, ch, params.w3().data(), k,
                            cfg.spectral_strides[2], l3, ch, tape.a3.data(), d_a3.data(),
                            d_a2.data(), gview.w3().data(), gview.b3().data());
    std::vector<T> d_a1(px_count * l1 * ch, T(0));
    detail::conv1d_backward(tape.a1.data(), px_count, l1, ch, params.w2().data(), k,
                            cfg.spectral_strides[1], l2, ch, tape.a2.data(), d_a2.data(),
                            d_a1.data(), gview.w2().data(), gview.b2().data());
    detail::conv1d_backward(batch.data.data(), px_count, cfg.bands, 1, params.w1().data(), k,
                            cfg.spectral_strides[0], l1, ch, tape.a1.data(), d_a1.data(),
                            static_cast<T*>(nullptr), gview.w1().data(), gview.b1().data());

    return std::move(gview.flat);
}

// Standalone variant: recomputes the forward tape internally.
template <class T>
inline std::vector<T> encode_backward(const EncoderParams<T>& params, const PatchBatch<T>& batch,
                                      const std::vector<T>& d_embeddings) {
    EncoderTape<T> tape;
    EmbeddingGrid<T> out = encode_with_tape(params, batch, &tape);
    return encode_backward_from_tape(params, batch, tape, out, d_embeddings);
}

}  // namespace dgc

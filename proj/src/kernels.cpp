#include "relsearch/kernels.hpp"

#include <algorithm>
#include <stdexcept>

namespace relsearch::kernels {

namespace {

// Output positions o in [lo, hi) for which o * stride + k - pad lands inside [0, len).
struct Range {
    std::size_t lo, hi;
};

Range valid_range(std::size_t k, std::size_t stride, std::size_t pad, std::size_t len,
                  std::size_t out_len) {
    const long kk = static_cast<long>(k) - static_cast<long>(pad);
    const long s = static_cast<long>(stride);
    long lo = 0;
    if (kk < 0) lo = (-kk + s - 1) / s;
    long hi = (static_cast<long>(len) - 1 - kk) / s + 1;
    if (static_cast<long>(len) - 1 - kk < 0) hi = 0;
    hi = std::min<long>(hi, static_cast<long>(out_len));
    if (hi < lo) hi = lo;
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return (s0 + s1) + (s2 + s3);
}

inline long to_long(std::size_t v) { return static_cast<long>(v); }

}  // namespace

ConvGeometry ConvGeometry::make(std::size_t in_channels, std::size_t out_channels, std::size_t x,
                                std::size_t y, std::size_t z, std::size_t kernel,
                                std::size_t stride, std::size_t pad) {
    ConvGeometry g;
    g.in_channels = in_channels;
    g.out_channels = out_channels;
    g.x = x;
    g.y = y;
    g.z = z;
    g.kernel = kernel;
    g.stride = stride;
    g.pad = pad;
    auto out_len = [&](std::size_t n) -> std::size_t {
        const long v = (to_long(n) + 2 * to_long(pad) - to_long(kernel)) / to_long(stride) + 1;
        if (v < 1) throw std::invalid_argument("convolution output would be empty");
        return static_cast<std::size_t>(v);
    };
    g.ox = out_len(x);
    g.oy = out_len(y);
    g.oz = out_len(z);
    return g;
}

void conv3d_forward(const ConvGeometry& g, std::span<const double> in, std::span<const double> w,
                    std::span<const double> b, std::span<double> out) {
    const std::size_t k = g.kernel, s = g.stride;
    const std::size_t in_sp = g.x * g.y * g.z;
    const std::size_t out_sp = g.ox * g.oy * g.oz;
    const long co_n = to_long(g.out_channels);
#pragma omp parallel for schedule(static) if (g.output_size() * g.in_channels * k * k * k > 32768)
    for (long co_l = 0; co_l < co_n; ++co_l) {
        const std::size_t co = static_cast<std::size_t>(co_l);
        double* o = out.data() + co * out_sp;
        const double bias = b.empty() ? 0.0 : b[co];
        std::fill(o, o + out_sp, bias);
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            const double* src = in.data() + ci * in_sp;
            const double* wk = w.data() + (co * g.in_channels + ci) * k * k * k;
            for (std::size_t kx = 0; kx < k; ++kx) {
                const Range rx = valid_range(kx, s, g.pad, g.x, g.ox);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const Range ry = valid_range(ky, s, g.pad, g.y, g.oy);
                    for (std::size_t kz = 0; kz < k; ++kz) {
                        const Range rz = valid_range(kz, s, g.pad, g.z, g.oz);
                        const double wv = wk[(kx * k + ky) * k + kz];
                        for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                            const std::size_t ix = ox * s + kx - g.pad;
                            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                                const std::size_t iy = oy * s + ky - g.pad;
                                double* orow = o + (ox * g.oy + oy) * g.oz;
                                const double* irow = src + (ix * g.y + iy) * g.z;
                                if (s == 1) {
                                    const double* ip = irow + (rz.lo + kz - g.pad);
                                    for (std::size_t oz = rz.lo; oz < rz.hi; ++oz) {
                                        orow[oz] += wv * *ip++;
                                    }
                                } else {
                                    for (std::size_t oz = rz.lo; oz < rz.hi; ++oz) {
                                        orow[oz] += wv * irow[oz * s + kz - g.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv3d_backward_input(const ConvGeometry& g, std::span<const double> dout,
                           std::span<const double> w, std::span<double> din) {
    const std::size_t k = g.kernel, s = g.stride;
    const std::size_t in_sp = g.x * g.y * g.z;
    const std::size_t out_sp = g.ox * g.oy * g.oz;
    const long ci_n = to_long(g.in_channels);
#pragma omp parallel for schedule(static) if (g.output_size() * g.in_channels * k * k * k > 32768)
    for (long ci_l = 0; ci_l < ci_n; ++ci_l) {
        const std::size_t ci = static_cast<std::size_t>(ci_l);
        double* dst = din.data() + ci * in_sp;
        for (std::size_t co = 0; co < g.out_channels; ++co) {
            const double* d = dout.data() + co * out_sp;
            const double* wk = w.data() + (co * g.in_channels + ci) * k * k * k;
            for (std::size_t kx = 0; kx < k; ++kx) {
                const Range rx = valid_range(kx, s, g.pad, g.x, g.ox);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const Range ry = valid_range(ky, s, g.pad, g.y, g.oy);
                    for (std::size_t kz = 0; kz < k; ++kz) {
                        const Range rz = valid_range(kz, s, g.pad, g.z, g.oz);
                        const double wv = wk[(kx * k + ky) * k + kz];
                        for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                            const std::size_t ix = ox * s + kx - g.pad;
                            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                                const std::size_t iy = oy * s + ky - g.pad;
                                const double* drow = d + (ox * g.oy + oy) * g.oz;
                                double* irow = dst + (ix * g.y + iy) * g.z;
                                for (std::size_t oz = rz.lo; oz < rz.hi; ++oz) {
                                    irow[oz * s + kz - g.pad] += wv * drow[oz];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

void conv3d_backward_params(const ConvGeometry& g, std::span<const double> in,
                            std::span<const double> dout, std::span<double> dw,
                            std::span<double> db) {
    const std::size_t k = g.kernel, s = g.stride;
    const std::size_t in_sp = g.x * g.y * g.z;
    const std::size_t out_sp = g.ox * g.oy * g.oz;
    const long co_n = to_long(g.out_channels);
#pragma omp parallel for schedule(static) if (g.output_size() * g.in_channels * k * k * k > 32768)
    for (long co_l = 0; co_l < co_n; ++co_l) {
        const std::size_t co = static_cast<std::size_t>(co_l);
        const double* d = dout.data() + co * out_sp;
        if (!db.empty()) {
            double acc = 0.0;
            for (std::size_t i = 0; i < out_sp; ++i) acc += d[i];
            db[co] += acc;
        }
        for (std::size_t ci = 0; ci < g.in_channels; ++ci) {
            const double* src = in.data() + ci * in_sp;
            double* wk = dw.data() + (co * g.in_channels + ci) * k * k * k;
            for (std::size_t kx = 0; kx < k; ++kx) {
                const Range rx = valid_range(kx, s, g.pad, g.x, g.ox);
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const Range ry = valid_range(ky, s, g.pad, g.y, g.oy);
                    for (std::size_t kz = 0; kz < k; ++kz) {
                        const Range rz = valid_range(kz, s, g.pad, g.z, g.oz);
                        double acc = 0.0;
                        for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
                            const std::size_t ix = ox * s + kx - g.pad;
                            for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
                                const std::size_t iy = oy * s + ky - g.pad;
                                const double* drow = d + (ox * g.oy + oy) * g.oz;
                                const double* irow = src + (ix * g.y + iy) * g.z;
                                for (std::size_t oz = rz.lo; oz < rz.hi; ++oz) {
                                    acc += drow[oz] * irow[oz * s + kz - g.pad];
                                }
                            }
                        }
                        wk[(kx * k + ky) * k + kz] += acc;
                    }
                }
            }
        }
    }
}

void linear_forward(std::size_t rows, std::size_t in, std::size_t out, std::span<const double> x,
                    std::span<const double> w, std::span<const double> b, std::span<double> y) {
    const long n = to_long(rows);
#pragma omp parallel for schedule(static) if (rows * in * out > 65536)
    for (long r_l = 0; r_l < n; ++r_l) {
        const std::size_t r = static_cast<std::size_t>(r_l);
        const double* xr = x.data() + r * in;
        double* yr = y.data() + r * out;
        for (std::size_t o = 0; o < out; ++o) {
            yr[o] = (b.empty() ? 0.0 : b[o]) + dot(xr, w.data() + o * in, in);
        }
    }
}

void linear_backward_input(std::size_t rows, std::size_t in, std::size_t out,
                           std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx) {
    const long n = to_long(rows);
#pragma omp parallel for schedule(static) if (rows * in * out > 65536)
    for (long r_l = 0; r_l < n; ++r_l) {
        const std::size_t r = static_cast<std::size_t>(r_l);
        const double* dyr = dy.data() + r * out;
        double* dxr = dx.data() + r * in;
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dyr[o];
            if (g == 0.0) continue;
            const double* wo = w.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) dxr[i] += g * wo[i];
        }
    }
}

void linear_backward_params(std::size_t rows, std::size_t in, std::size_t out,
                            std::span<const double> x, std::span<const double> dy,
                            std::span<double> dw, std::span<double> db) {
    const long n = to_long(out);
#pragma omp parallel for schedule(static) if (rows * in * out > 65536)
    for (long o_l = 0; o_l < n; ++o_l) {
        const std::size_t o = static_cast<std::size_t>(o_l);
        double* wo = dw.data() + o * in;
        double bacc = 0.0;
        for (std::size_t r = 0; r < rows; ++r) {
            const double g = dy[r * out + o];
            bacc += g;
            if (g == 0.0) continue;
            const double* xr = x.data() + r * in;
            for (std::size_t i = 0; i < in; ++i) wo[i] += g * xr[i];
        }
        if (!db.empty()) db[o] += bacc;
    }
}

namespace ref {

namespace {

// Input coordinate for an output coordinate and kernel offset, or -1 when it
// falls into the zero padding.
long input_coord(std::size_t o, std::size_t k, const ConvGeometry& g, std::size_t len) {
    const long v = to_long(o * g.stride + k) - to_long(g.pad);
    return (v < 0 || v >= to_long(len)) ? -1 : v;
}

}  // namespace

void conv3d_forward(const ConvGeometry& g, std::span<const double> in, std::span<const double> w,
                    std::span<const double> b, std::span<double> out) {
    const std::size_t k = g.kernel;
    for (std::size_t co = 0; co < g.out_channels; ++co)
        for (std::size_t ox = 0; ox < g.ox; ++ox)
            for (std::size_t oy = 0; oy < g.oy; ++oy)
                for (std::size_t oz = 0; oz < g.oz; ++oz) {
                    double acc = b.empty() ? 0.0 : b[co];
                    for (std::size_t ci = 0; ci < g.in_channels; ++ci)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            for (std::size_t ky = 0; ky < k; ++ky)
                                for (std::size_t kz = 0; kz < k; ++kz) {
                                    const long ix = input_coord(ox, kx, g, g.x);
                                    const long iy = input_coord(oy, ky, g, g.y);
                                    const long iz = input_coord(oz, kz, g, g.z);
                                    if (ix < 0 || iy < 0 || iz < 0) continue;
                                    acc += w[(((co * g.in_channels + ci) * k + kx) * k + ky) * k + kz] *
                                           in[((ci * g.x + ix) * g.y + iy) * g.z + iz];
                                }
                    out[((co * g.ox + ox) * g.oy + oy) * g.oz + oz] = acc;
                }
}

void conv3d_backward_input(const ConvGeometry& g, std::span<const double> dout,
                           std::span<const double> w, std::span<double> din) {
    const std::size_t k = g.kernel;
    for (std::size_t co = 0; co < g.out_channels; ++co)
        for (std::size_t ox = 0; ox < g.ox; ++ox)
            for (std::size_t oy = 0; oy < g.oy; ++oy)
                for (std::size_t oz = 0; oz < g.oz; ++oz) {
                    const double d = dout[((co * g.ox + ox) * g.oy + oy) * g.oz + oz];
                    for (std::size_t ci = 0; ci < g.in_channels; ++ci)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            for (std::size_t ky = 0; ky < k; ++ky)
                                for (std::size_t kz = 0; kz < k; ++kz) {
                                    const long ix = input_coord(ox, kx, g, g.x);
                                    const long iy = input_coord(oy, ky, g, g.y);
                                    const long iz = input_coord(oz, kz, g, g.z);
                                    if (ix < 0 || iy < 0 || iz < 0) continue;
                                    din[((ci * g.x + ix) * g.y + iy) * g.z + iz] +=
                                        d * w[(((co * g.in_channels + ci) * k + kx) * k + ky) * k + kz];
                                }
                }
}

void conv3d_backward_params(const ConvGeometry& g, std::span<const double> in,
                            std::span<const double> dout, std::span<double> dw,
                            std::span<double> db) {
    const std::size_t k = g.kernel;
    for (std::size_t co = 0; co < g.out_channels; ++co)
        for (std::size_t ox = 0; ox < g.ox; ++ox)
            for (std::size_t oy = 0; oy < g.oy; ++oy)
                for (std::size_t oz = 0; oz < g.oz; ++oz) {
                    const double d = dout[((co * g.ox + ox) * g.oy + oy) * g.oz + oz];
                    if (!db.empty()) db[co] += d;
                    for (std::size_t ci = 0; ci < g.in_channels; ++ci)
                        for (std::size_t kx = 0; kx < k; ++kx)
                            for (std::size_t ky = 0; ky < k; ++ky)
                                for (std::size_t kz = 0; kz < k; ++kz) {
                                    const long ix = input_coord(ox, kx, g, g.x);
                                    const long iy = input_coord(oy, ky, g, g.y);
                                    const long iz = input_coord(oz, kz, g, g.z);
                                    if (ix < 0 || iy < 0 || iz < 0) continue;
                                    dw[(((co * g.in_channels + ci) * k + kx) * k + ky) * k + kz] +=
                                        d * in[((ci * g.x + ix) * g.y + iy) * g.z + iz];
                                }
                }
}

void linear_forward(std::size_t rows, std::size_t in, std::size_t out, std::span<const double> x,
                    std::span<const double> w, std::span<const double> b, std::span<double> y) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o) {
            double acc = b.empty() ? 0.0 : b[o];
            for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * w[o * in + i];
            y[r * out + o] = acc;
        }
}

void linear_backward_input(std::size_t rows, std::size_t in, std::size_t out,
                           std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < in; ++i) {
            double acc = 0.0;
            for (std::size_t o = 0; o < out; ++o) acc += dy[r * out + o] * w[o * in + i];
            dx[r * in + i] += acc;
        }
}

void linear_backward_params(std::size_t rows, std::size_t in, std::size_t out,
                            std::span<const double> x, std::span<const double> dy,
                            std::span<double> dw, std::span<double> db) {
    for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t i = 0; i < in; ++i) {
            double acc = 0.0;
            for (std::size_t r = 0; r < rows; ++r) acc += dy[r * out + o] * x[r * in + i];
            dw[o * in + i] += acc;
        }
        if (!db.empty()) {
            double acc = 0.0;
            for (std::size_t r = 0; r < rows; ++r) acc += dy[r * out + o];
            db[o] += acc;
        }
    }
}

}  // namespace ref

}  // namespace relsearch::kernels

#pragma once

// Dense numeric kernels used by the autodiff ops.
//
// Every kernel has an OpenMP version (namespace kernels) and a plain serial
// version (namespace kernels::ref) that is kept as the reference for tests
// and benchmarks. The parallel versions partition work by output element, so
// their results do not depend on the thread count.

#include <cstddef>
#include <span>

namespace relsearch::kernels {

struct ConvGeometry {
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    std::size_t x = 1, y = 1, z = 1;  // input spatial size
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t ox = 1, oy = 1, oz = 1;  // output spatial size

    static ConvGeometry make(std::size_t in_channels, std::size_t out_channels, std::size_t x,
                             std::size_t y, std::size_t z, std::size_t kernel, std::size_t stride,
                             std::size_t pad);

    std::size_t input_size() const { return in_channels * x * y * z; }
    std::size_t output_size() const { return out_channels * ox * oy * oz; }
    std::size_t weight_size() const { return out_channels * in_channels * kernel * kernel * kernel; }
};

// out = conv(in, w) + b. Overwrites out.
void conv3d_forward(const ConvGeometry& g, std::span<const double> in, std::span<const double> w,
                    std::span<const double> b, std::span<double> out);
// din += conv^T(dout, w).
void conv3d_backward_input(const ConvGeometry& g, std::span<const double> dout,
                           std::span<const double> w, std::span<double> din);
// dw += correlation(in, dout); db += sum(dout).
void conv3d_backward_params(const ConvGeometry& g, std::span<const double> in,
                            std::span<const double> dout, std::span<double> dw,
                            std::span<double> db);

// y[r, o] = b[o] + sum_i x[r, i] * w[o, i]. Overwrites y. b may be empty.
void linear_forward(std::size_t rows, std::size_t in, std::size_t out, std::span<const double> x,
                    std::span<const double> w, std::span<const double> b, std::span<double> y);
// dx += dy * w
void linear_backward_input(std::size_t rows, std::size_t in, std::size_t out,
                           std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx);
// dw += dy^T * x; db += column sums of dy (skipped when db is empty).
void linear_backward_params(std::size_t rows, std::size_t in, std::size_t out,
                            std::span<const double> x, std::span<const double> dy,
                            std::span<double> dw, std::span<double> db);

namespace ref {

void conv3d_forward(const ConvGeometry& g, std::span<const double> in, std::span<const double> w,
                    std::span<const double> b, std::span<double> out);
void conv3d_backward_input(const ConvGeometry& g, std::span<const double> dout,
                           std::span<const double> w, std::span<double> din);
void conv3d_backward_params(const ConvGeometry& g, std::span<const double> in,
                            std::span<const double> dout, std::span<double> dw,
                            std::span<double> db);
void linear_forward(std::size_t rows, std::size_t in, std::size_t out, std::span<const double> x,
                    std::span<const double> w, std::span<const double> b, std::span<double> y);
void linear_backward_input(std::size_t rows, std::size_t in, std::size_t out,
                           std::span<const double> dy, std::span<const double> w,
                           std::span<double> dx);
void linear_backward_params(std::size_t rows, std::size_t in, std::size_t out,
                            std::span<const double> x, std::span<const double> dy,
                            std::span<double> dw, std::span<double> db);

}  // namespace ref

}  // namespace relsearch::kernels

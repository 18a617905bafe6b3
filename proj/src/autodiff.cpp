#include "relsearch/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "relsearch/kernels.hpp"

namespace relsearch {

std::size_t ParamSet::add(std::string role, Shape shape) {
    ParamTensor p;
    p.role = std::move(role);
    p.value = Tensor(shape, 0.0);
    p.grad = Tensor(std::move(shape), 0.0);
    params_.push_back(std::move(p));
    return params_.size() - 1;
}

std::size_t ParamSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
}

void ParamSet::zero_grad() {
    for (auto& p : params_) p.grad.fill(0.0);
}

void check_finite_gradients(const ParamSet& params) {
    for (const auto& p : params.tensors()) {
        if (!p.grad.all_finite()) throw NanGradientError(p.role);
    }
}

Var Tape::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Var Tape::param(ParamTensor& p) {
    Node n;
    n.value = p.value;
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                  std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward fn) {
    Node n;
    n.value = std::move(value);
    for (Var in : inputs) {
        if (in.valid() && nodes_.at(in.id).requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.fn = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
}

Tensor& Tape::grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape, 0.0);
    return n.grad;
}

void Tape::backward(Var root) { backward(root, Tensor(value(root).shape, 1.0)); }

void Tape::backward(Var root, const Tensor& seed) {
    if (seed.shape != value(root).shape) {
        throw std::invalid_argument("backward seed shape " + shape_to_string(seed.shape) +
                                    " does not match " + shape_to_string(value(root).shape));
    }
    Tensor& g = grad(root);
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] += seed[i];
    for (std::size_t id = root.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.fn) n.fn(*this, Var{id});
        if (n.param) {
            for (std::size_t i = 0; i < n.grad.numel(); ++i) n.param->grad[i] += n.grad[i];
        }
    }
}

Var ParamBinding::operator()(std::size_t index) {
    if (bound_.size() < params_->size()) bound_.resize(params_->size());
    Var& v = bound_.at(index);
    if (!v.valid()) {
        v = mutable_ ? tape_.param((*mutable_)[index]) : tape_.constant((*params_)[index].value);
    }
    return v;
}

namespace ad {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape != b.shape) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_to_string(a.shape) + " vs " + shape_to_string(b.shape));
    }
}

void accumulate(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.numel(); ++i) dst[i] += src[i];
}

Tensor scalar(double v) { return Tensor({1}, {v}); }

// Per-axis linear interpolation taps with half-pixel centres.
struct Taps {
    std::vector<std::size_t> i0, i1;
    std::vector<double> w1;
};

Taps make_taps(std::size_t in, std::size_t out) {
    Taps t;
    t.i0.resize(out);
    t.i1.resize(out);
    t.w1.resize(out);
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
        double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::size_t>(std::floor(src));
        t.i0[o] = lo;
        t.i1[o] = std::min(lo + 1, in - 1);
        t.w1[o] = src - static_cast<double>(lo);
    }
    return t;
}

}  // namespace

Var add(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "add");
    Tensor out = av;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    return t.record(std::move(out), {a, b}, [a, b](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(a)) accumulate(tp.grad(a), g);
        if (tp.requires_grad(b)) accumulate(tp.grad(b), g);
    });
}

Var sub(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "sub");
    Tensor out = av;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    return t.record(std::move(out), {a, b}, [a, b](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(a)) accumulate(tp.grad(a), g);
        if (tp.requires_grad(b)) {
            Tensor& gb = tp.grad(b);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
    });
}

Var scale(Tape& t, Var a, double s) {
    Tensor out = t.value(a);
    for (double& v : out.data) v *= s;
    return t.record(std::move(out), {a}, [a, s](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        Tensor& ga = tp.grad(a);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
    });
}

Var add_constant(Tape& t, Var a, const Tensor& c) {
    require_same_shape(t.value(a), c, "add_constant");
    Tensor out = t.value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += c[i];
    return t.record(std::move(out), {a}, [a](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        accumulate(tp.grad(a), g);
    });
}

Var relu(Tape& t, Var a) {
    Tensor out = t.value(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return t.record(std::move(out), {a}, [a](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        const Tensor& x = tp.value(a);
        Tensor& ga = tp.grad(a);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            if (x[i] > 0.0) ga[i] += g[i];
        }
    });
}

Var sigmoid(Tape& t, Var a) {
    Tensor out = t.value(a);
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    return t.record(std::move(out), {a}, [a](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        const Tensor& y = tp.value(self);
        Tensor& ga = tp.grad(a);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Var sum(Tape& t, Var a) {
    double s = 0.0;
    for (double v : t.value(a).data) s += v;
    return t.record(scalar(s), {a}, [a](Tape& tp, Var self) {
        const double g = tp.grad(self)[0];
        for (double& v : tp.grad(a).data) v += g;
    });
}

Var dot_constant(Tape& t, Var a, const Tensor& w) {
    require_same_shape(t.value(a), w, "dot_constant");
    double s = 0.0;
    const Tensor& av = t.value(a);
    for (std::size_t i = 0; i < av.numel(); ++i) s += av[i] * w[i];
    return t.record(scalar(s), {a}, [a, w](Tape& tp, Var self) {
        const double g = tp.grad(self)[0];
        Tensor& ga = tp.grad(a);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g * w[i];
    });
}

Var mean_of(Tape& t, std::span<const Var> scalars) {
    if (scalars.empty()) throw std::invalid_argument("mean_of: empty list");
    double s = 0.0;
    for (Var v : scalars) s += t.value(v)[0];
    const double n = static_cast<double>(scalars.size());
    std::vector<Var> inputs(scalars.begin(), scalars.end());
    return t.record(scalar(s / n), scalars, [inputs, n](Tape& tp, Var self) {
        const double g = tp.grad(self)[0] / n;
        for (Var v : inputs) {
            if (tp.requires_grad(v)) tp.grad(v)[0] += g;
        }
    });
}

Var concat(Tape& t, Var a, Var b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    const std::size_t na = av.numel();
    std::vector<double> data(av.data);
    data.insert(data.end(), bv.data.begin(), bv.data.end());
    const std::size_t total = data.size();
    Tensor out({total}, std::move(data));
    return t.record(std::move(out), {a, b}, [a, b, na](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(a)) {
            Tensor& ga = tp.grad(a);
            for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (tp.requires_grad(b)) {
            Tensor& gb = tp.grad(b);
            for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[na + i];
        }
    });
}

Var reshape(Tape& t, Var a, Shape shape) {
    Tensor out(std::move(shape), t.value(a).data);
    return t.record(std::move(out), {a}, [a](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        Tensor& ga = tp.grad(a);
        for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i];
    });
}

Var gather(Tape& t, Var a, std::vector<std::size_t> index, Shape out_shape) {
    const Tensor& av = t.value(a);
    Tensor out(std::move(out_shape), 0.0);
    if (out.numel() != index.size()) throw std::invalid_argument("gather: index size mismatch");
    for (std::size_t i = 0; i < index.size(); ++i) out[i] = av[index[i]];
    return t.record(std::move(out), {a}, [a, index = std::move(index)](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        Tensor& ga = tp.grad(a);
        for (std::size_t i = 0; i < index.size(); ++i) ga[index[i]] += g[i];
    });
}

Var conv3d(Tape& t, Var x, Var w, Var b, std::size_t stride, std::size_t pad) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    if (xv.rank() != 4 || wv.rank() != 5 || wv.dim(1) != xv.dim(0)) {
        throw std::invalid_argument("conv3d: input " + shape_to_string(xv.shape) +
                                    " incompatible with weight " + shape_to_string(wv.shape));
    }
    const auto g = kernels::ConvGeometry::make(xv.dim(0), wv.dim(0), xv.dim(1), xv.dim(2),
                                               xv.dim(3), wv.dim(2), stride, pad);
    Tensor out({g.out_channels, g.ox, g.oy, g.oz}, 0.0);
    std::span<const double> bias;
    if (b.valid()) bias = t.value(b).span();
    kernels::conv3d_forward(g, xv.span(), wv.span(), bias, out.span());
    return t.record(std::move(out), {x, w, b}, [x, w, b, g](Tape& tp, Var self) {
        const Tensor& gout = tp.grad(self);
        if (tp.requires_grad(x)) {
            kernels::conv3d_backward_input(g, gout.span(), tp.value(w).span(), tp.grad(x).span());
        }
        if (tp.requires_grad(w) || (b.valid() && tp.requires_grad(b))) {
            std::span<double> db;
            if (b.valid()) db = tp.grad(b).span();
            kernels::conv3d_backward_params(g, tp.value(x).span(), gout.span(), tp.grad(w).span(),
                                            db);
        }
    });
}

Var instance_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
    const Tensor& xv = t.value(x);
    const std::size_t c = xv.dim(0);
    const std::size_t n = xv.numel() / c;
    const Tensor& gv = t.value(gamma);
    const Tensor& bv = t.value(beta);
    Tensor out(xv.shape, 0.0);
    auto xhat = std::make_shared<std::vector<double>>(xv.numel());
    auto inv_std = std::make_shared<std::vector<double>>(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = xv.data.data() + ch * n;
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += src[i];
        mean /= static_cast<double>(n);
        // Correction pass; makes the mean exact for constant channels, whose
        // centred values must then be exactly zero.
        double resid = 0.0;
        for (std::size_t i = 0; i < n; ++i) resid += src[i] - mean;
        mean += resid / static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[ch] = is;
        for (std::size_t i = 0; i < n; ++i) {
            const double h = (src[i] - mean) * is;
            (*xhat)[ch * n + i] = h;
            out[ch * n + i] = gv[ch] * h + bv[ch];
        }
    }
    return t.record(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, xhat, inv_std, c, n](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        const Tensor& gv = tp.value(gamma);
        Tensor* gx = tp.requires_grad(x) ? &tp.grad(x) : nullptr;
        Tensor* gg = tp.requires_grad(gamma) ? &tp.grad(gamma) : nullptr;
        Tensor* gb = tp.requires_grad(beta) ? &tp.grad(beta) : nullptr;
        for (std::size_t ch = 0; ch < c; ++ch) {
            double sum_g = 0.0, sum_gh = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                sum_g += g[ch * n + i];
                sum_gh += g[ch * n + i] * (*xhat)[ch * n + i];
            }
            if (gg) (*gg)[ch] += sum_gh;
            if (gb) (*gb)[ch] += sum_g;
            if (gx) {
                const double k = gv[ch] * (*inv_std)[ch];
                const double mg = sum_g / static_cast<double>(n);
                const double mgh = sum_gh / static_cast<double>(n);
                for (std::size_t i = 0; i < n; ++i) {
                    (*gx)[ch * n + i] += k * (g[ch * n + i] - mg - (*xhat)[ch * n + i] * mgh);
                }
            }
        }
    });
}

Var resize_trilinear(Tape& t, Var x, std::size_t nx, std::size_t ny, std::size_t nz) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 4) throw std::invalid_argument("resize_trilinear: expected [C,X,Y,Z]");
    const std::size_t c = xv.dim(0), sx = xv.dim(1), sy = xv.dim(2), sz = xv.dim(3);
    if (sx == nx && sy == ny && sz == nz) return reshape(t, x, xv.shape);
    auto tx = std::make_shared<Taps>(make_taps(sx, nx));
    auto ty = std::make_shared<Taps>(make_taps(sy, ny));
    auto tz = std::make_shared<Taps>(make_taps(sz, nz));
    Tensor out({c, nx, ny, nz}, 0.0);
    auto src_at = [&](std::size_t ch, std::size_t i, std::size_t j, std::size_t k) {
        return xv[((ch * sx + i) * sy + j) * sz + k];
    };
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < nx; ++i) {
            const double wx1 = tx->w1[i], wx0 = 1.0 - wx1;
            for (std::size_t j = 0; j < ny; ++j) {
                const double wy1 = ty->w1[j], wy0 = 1.0 - wy1;
                for (std::size_t k = 0; k < nz; ++k) {
                    const double wz1 = tz->w1[k], wz0 = 1.0 - wz1;
                    const std::size_t x0 = tx->i0[i], x1 = tx->i1[i];
                    const std::size_t y0 = ty->i0[j], y1 = ty->i1[j];
                    const std::size_t z0 = tz->i0[k], z1 = tz->i1[k];
                    out[((ch * nx + i) * ny + j) * nz + k] =
                        wx0 * (wy0 * (wz0 * src_at(ch, x0, y0, z0) + wz1 * src_at(ch, x0, y0, z1)) +
                               wy1 * (wz0 * src_at(ch, x0, y1, z0) + wz1 * src_at(ch, x0, y1, z1))) +
                        wx1 * (wy0 * (wz0 * src_at(ch, x1, y0, z0) + wz1 * src_at(ch, x1, y0, z1)) +
                               wy1 * (wz0 * src_at(ch, x1, y1, z0) + wz1 * src_at(ch, x1, y1, z1)));
                }
            }
        }
    return t.record(std::move(out), {x}, [x, tx, ty, tz, c, sx, sy, sz, nx, ny, nz](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(x);
        auto at = [&](std::size_t ch, std::size_t i, std::size_t j, std::size_t k) -> double& {
            return gx[((ch * sx + i) * sy + j) * sz + k];
        };
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < nx; ++i) {
                const double wx1 = tx->w1[i], wx0 = 1.0 - wx1;
                for (std::size_t j = 0; j < ny; ++j) {
                    const double wy1 = ty->w1[j], wy0 = 1.0 - wy1;
                    for (std::size_t k = 0; k < nz; ++k) {
                        const double wz1 = tz->w1[k], wz0 = 1.0 - wz1;
                        const double gv = g[((ch * nx + i) * ny + j) * nz + k];
                        const std::size_t x0 = tx->i0[i], x1 = tx->i1[i];
                        const std::size_t y0 = ty->i0[j], y1 = ty->i1[j];
                        const std::size_t z0 = tz->i0[k], z1 = tz->i1[k];
                        at(ch, x0, y0, z0) += gv * wx0 * wy0 * wz0;
                        at(ch, x0, y0, z1) += gv * wx0 * wy0 * wz1;
                        at(ch, x0, y1, z0) += gv * wx0 * wy1 * wz0;
                        at(ch, x0, y1, z1) += gv * wx0 * wy1 * wz1;
                        at(ch, x1, y0, z0) += gv * wx1 * wy0 * wz0;
                        at(ch, x1, y0, z1) += gv * wx1 * wy0 * wz1;
                        at(ch, x1, y1, z0) += gv * wx1 * wy1 * wz0;
                        at(ch, x1, y1, z1) += gv * wx1 * wy1 * wz1;
                    }
                }
            }
    });
}

Var softmax_channels(Tape& t, Var x) {
    const Tensor& xv = t.value(x);
    const std::size_t c = xv.dim(0);
    const std::size_t n = xv.numel() / c;
    Tensor out(xv.shape, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double m = xv[i];
        for (std::size_t ch = 1; ch < c; ++ch) m = std::max(m, xv[ch * n + i]);
        double s = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double e = std::exp(xv[ch * n + i] - m);
            out[ch * n + i] = e;
            s += e;
        }
        for (std::size_t ch = 0; ch < c; ++ch) out[ch * n + i] /= s;
    }
    return t.record(std::move(out), {x}, [x, c, n](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        const Tensor& y = tp.value(self);
        Tensor& gx = tp.grad(x);
        for (std::size_t i = 0; i < n; ++i) {
            double dotgy = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) dotgy += g[ch * n + i] * y[ch * n + i];
            for (std::size_t ch = 0; ch < c; ++ch) {
                gx[ch * n + i] += y[ch * n + i] * (g[ch * n + i] - dotgy);
            }
        }
    });
}

namespace {

// Flat index into [C,X,Y,Z] for line b, position l, channel ch.
std::vector<std::size_t> line_index(const Shape& s, int axis, Shape& lines_shape) {
    const std::size_t c = s[0];
    const std::size_t dims[3] = {s[1], s[2], s[3]};
    const std::size_t len = dims[axis];
    const std::size_t batch = dims[0] * dims[1] * dims[2] / len;
    lines_shape = {batch, len, c};
    std::vector<std::size_t> index(batch * len * c);
    // The two non-attended axes, in increasing order, enumerate lines.
    int others[2];
    int o = 0;
    for (int a = 0; a < 3; ++a) {
        if (a != axis) others[o++] = a;
    }
    for (std::size_t b = 0; b < batch; ++b) {
        std::size_t coord[3];
        coord[others[0]] = b / dims[others[1]];
        coord[others[1]] = b % dims[others[1]];
        for (std::size_t l = 0; l < len; ++l) {
            coord[axis] = l;
            for (std::size_t ch = 0; ch < c; ++ch) {
                index[(b * len + l) * c + ch] =
                    ((ch * dims[0] + coord[0]) * dims[1] + coord[1]) * dims[2] + coord[2];
            }
        }
    }
    return index;
}

}  // namespace

Var spatial_to_lines(Tape& t, Var x, int axis) {
    const Tensor& xv = t.value(x);
    if (xv.rank() != 4 || axis < 0 || axis > 2) {
        throw std::invalid_argument("spatial_to_lines: expected [C,X,Y,Z] and axis in 0..2");
    }
    Shape lines_shape;
    auto index = line_index(xv.shape, axis, lines_shape);
    return gather(t, x, std::move(index), lines_shape);
}

Var lines_to_spatial(Tape& t, Var lines, int axis, const Shape& spatial_shape) {
    Shape lines_shape;
    const auto forward_index = line_index(spatial_shape, axis, lines_shape);
    if (t.value(lines).shape != lines_shape) {
        throw std::invalid_argument("lines_to_spatial: line tensor shape mismatch");
    }
    std::vector<std::size_t> inverse(forward_index.size());
    for (std::size_t i = 0; i < forward_index.size(); ++i) inverse[forward_index[i]] = i;
    return gather(t, lines, std::move(inverse), spatial_shape);
}

Var linear(Tape& t, Var x, Var w, Var b) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const std::size_t out_f = wv.dim(0), in_f = wv.dim(1);
    if (xv.shape.empty() || xv.shape.back() != in_f) {
        throw std::invalid_argument("linear: input " + shape_to_string(xv.shape) +
                                    " incompatible with weight " + shape_to_string(wv.shape));
    }
    const std::size_t rows = xv.numel() / in_f;
    Shape out_shape = xv.shape;
    out_shape.back() = out_f;
    Tensor out(std::move(out_shape), 0.0);
    std::span<const double> bias;
    if (b.valid()) bias = t.value(b).span();
    kernels::linear_forward(rows, in_f, out_f, xv.span(), wv.span(), bias, out.span());
    return t.record(std::move(out), {x, w, b}, [x, w, b, rows, in_f, out_f](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        if (tp.requires_grad(x)) {
            kernels::linear_backward_input(rows, in_f, out_f, g.span(), tp.value(w).span(),
                                           tp.grad(x).span());
        }
        if (tp.requires_grad(w) || (b.valid() && tp.requires_grad(b))) {
            std::span<double> db;
            if (b.valid()) db = tp.grad(b).span();
            kernels::linear_backward_params(rows, in_f, out_f, tp.value(x).span(), g.span(),
                                            tp.grad(w).span(), db);
        }
    });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
    const Tensor& xv = t.value(x);
    const std::size_t d = xv.shape.back();
    const std::size_t rows = xv.numel() / d;
    const Tensor& gv = t.value(gamma);
    const Tensor& bv = t.value(beta);
    Tensor out(xv.shape, 0.0);
    auto xhat = std::make_shared<std::vector<double>>(xv.numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = xv.data.data() + r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += src[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t i = 0; i < d; ++i) {
            const double h = (src[i] - mean) * is;
            (*xhat)[r * d + i] = h;
            out[r * d + i] = gv[i] * h + bv[i];
        }
    }
    return t.record(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, xhat, inv_std, rows, d](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        const Tensor& gv = tp.value(gamma);
        Tensor* gx = tp.requires_grad(x) ? &tp.grad(x) : nullptr;
        Tensor* gg = tp.requires_grad(gamma) ? &tp.grad(gamma) : nullptr;
        Tensor* gb = tp.requires_grad(beta) ? &tp.grad(beta) : nullptr;
        std::vector<double> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
            double mdh = 0.0, mdhh = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                const double gi = g[r * d + i];
                const double h = (*xhat)[r * d + i];
                if (gg) (*gg)[i] += gi * h;
                if (gb) (*gb)[i] += gi;
                dh[i] = gi * gv[i];
                mdh += dh[i];
                mdhh += dh[i] * h;
            }
            if (!gx) continue;
            mdh /= static_cast<double>(d);
            mdhh /= static_cast<double>(d);
            for (std::size_t i = 0; i < d; ++i) {
                (*gx)[r * d + i] += (*inv_std)[r] * (dh[i] - mdh - (*xhat)[r * d + i] * mdhh);
            }
        }
    });
}

Var embedding(Tape& t, Var table, std::span<const int> ids) {
    const Tensor& tv = t.value(table);
    const std::size_t vocab = tv.dim(0), d = tv.dim(1);
    Tensor out({ids.size(), d}, 0.0);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
            throw std::out_of_range("embedding: token id " + std::to_string(ids[r]) +
                                    " outside vocabulary of " + std::to_string(vocab));
        }
        std::copy_n(tv.data.begin() + static_cast<long>(ids[r] * d), d,
                    out.data.begin() + static_cast<long>(r * d));
    }
    std::vector<int> id_copy(ids.begin(), ids.end());
    return t.record(std::move(out), {table}, [table, id_copy, d](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        Tensor& gt = tp.grad(table);
        for (std::size_t r = 0; r < id_copy.size(); ++r) {
            const std::size_t base = static_cast<std::size_t>(id_copy[r]) * d;
            for (std::size_t i = 0; i < d; ++i) gt[base + i] += g[r * d + i];
        }
    });
}

Var mean_rows(Tape& t, Var x) {
    const Tensor& xv = t.value(x);
    const std::size_t rows = xv.dim(0), d = xv.numel() / xv.dim(0);
    Tensor out({d}, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < d; ++i) out[i] += xv[r * d + i];
    for (double& v : out.data) v /= static_cast<double>(rows);
    return t.record(std::move(out), {x}, [x, rows, d](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        Tensor& gx = tp.grad(x);
        const double inv = 1.0 / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += g[i] * inv;
    });
}

Var attention(Tape& t, Var q, Var k, Var v, Var rel_bias) {
    const Tensor& qv = t.value(q);
    const Tensor& kv = t.value(k);
    const Tensor& vv = t.value(v);
    require_same_shape(qv, kv, "attention");
    require_same_shape(qv, vv, "attention");
    if (qv.rank() != 3) throw std::invalid_argument("attention: expected [B,L,C]");
    const std::size_t batch = qv.dim(0), len = qv.dim(1), c = qv.dim(2);
    std::size_t span_len = 0;
    if (rel_bias.valid()) {
        span_len = (t.value(rel_bias).numel() + 1) / 2;
        if (len > span_len) {
            throw std::invalid_argument("attention: sequence length " + std::to_string(len) +
                                        " exceeds relative-bias span " + std::to_string(span_len));
        }
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c));
    auto probs = std::make_shared<std::vector<double>>(batch * len * len);
    Tensor out(qv.shape, 0.0);
    const double* bias = rel_bias.valid() ? t.value(rel_bias).data.data() : nullptr;
    const long nb = static_cast<long>(batch);
#pragma omp parallel for schedule(static) if (batch * len * len * c > 65536)
    for (long b_l = 0; b_l < nb; ++b_l) {
        const std::size_t b = static_cast<std::size_t>(b_l);
        const double* qb = qv.data.data() + b * len * c;
        const double* kb = kv.data.data() + b * len * c;
        const double* vb = vv.data.data() + b * len * c;
        double* pb = probs->data() + b * len * len;
        double* ob = out.data.data() + b * len * c;
        for (std::size_t i = 0; i < len; ++i) {
            double* row = pb + i * len;
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
                double s = 0.0;
                for (std::size_t ch = 0; ch < c; ++ch) s += qb[i * c + ch] * kb[j * c + ch];
                s *= inv_sqrt;
                if (bias) s += bias[j + span_len - 1 - i];
                row[j] = s;
                m = std::max(m, s);
            }
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                row[j] = std::exp(row[j] - m);
                z += row[j];
            }
            for (std::size_t j = 0; j < len; ++j) {
                row[j] /= z;
                for (std::size_t ch = 0; ch < c; ++ch) ob[i * c + ch] += row[j] * vb[j * c + ch];
            }
        }
    }
    return t.record(std::move(out), {q, k, v, rel_bias},
                    [q, k, v, rel_bias, probs, batch, len, c, span_len, inv_sqrt](Tape& tp, Var self) {
        const Tensor& g = tp.grad(self);
        const Tensor& qv = tp.value(q);
        const Tensor& kv = tp.value(k);
        const Tensor& vv = tp.value(v);
        Tensor& gq = tp.grad(q);
        Tensor& gk = tp.grad(k);
        Tensor& gv = tp.grad(v);
        const bool want_bias = rel_bias.valid() && tp.requires_grad(rel_bias);
        std::vector<double> dscore(batch * len * len);
        const long nb = static_cast<long>(batch);
#pragma omp parallel for schedule(static) if (batch * len * len * c > 65536)
        for (long b_l = 0; b_l < nb; ++b_l) {
            const std::size_t b = static_cast<std::size_t>(b_l);
            const std::size_t off = b * len * c;
            const double* pb = probs->data() + b * len * len;
            double* ds = dscore.data() + b * len * len;
            std::vector<double> dp(len);
            for (std::size_t i = 0; i < len; ++i) {
                const double* gi = g.data.data() + off + i * c;
                double rowdot = 0.0;
                for (std::size_t j = 0; j < len; ++j) {
                    double s = 0.0;
                    for (std::size_t ch = 0; ch < c; ++ch) s += gi[ch] * vv[off + j * c + ch];
                    dp[j] = s;
                    rowdot += s * pb[i * len + j];
                    const double p = pb[i * len + j];
                    for (std::size_t ch = 0; ch < c; ++ch) gv[off + j * c + ch] += p * gi[ch];
                }
                for (std::size_t j = 0; j < len; ++j) {
                    ds[i * len + j] = pb[i * len + j] * (dp[j] - rowdot);
                }
                for (std::size_t j = 0; j < len; ++j) {
                    const double d = ds[i * len + j] * inv_sqrt;
                    if (d == 0.0) continue;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        gq[off + i * c + ch] += d * kv[off + j * c + ch];
                        gk[off + j * c + ch] += d * qv[off + i * c + ch];
                    }
                }
            }
        }
        if (want_bias) {
            Tensor& gb = tp.grad(rel_bias);
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < len; ++i)
                    for (std::size_t j = 0; j < len; ++j) {
                        gb[j + span_len - 1 - i] += dscore[(b * len + i) * len + j];
                    }
        }
    });
}

Var bce_with_logits(Tape& t, Var logit, double target) {
    const double z = t.value(logit)[0];
    // log(1 + exp(-|z|)) + max(z, 0) - z * y
    const double loss = std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * target;
    return t.record(scalar(loss), {logit}, [logit, target](Tape& tp, Var self) {
        const double z = tp.value(logit)[0];
        const double p = 1.0 / (1.0 + std::exp(-z));
        tp.grad(logit)[0] += tp.grad(self)[0] * (p - target);
    });
}

Var squared_error(Tape& t, Var pred, double target) {
    const double d = t.value(pred)[0] - target;
    return t.record(scalar(d * d), {pred}, [pred, target](Tape& tp, Var self) {
        const double d = tp.value(pred)[0] - target;
        tp.grad(pred)[0] += tp.grad(self)[0] * 2.0 * d;
    });
}

}  // namespace ad

}  // namespace relsearch

#include <cmath>
#include <stdexcept>

#include "relsearch/train_eval.hpp"

namespace relsearch {

namespace {

struct Grid {
    std::size_t c, x, y, z;
    explicit Grid(const Tensor& t) {
        if (t.rank() != 4) throw std::invalid_argument("expected [C, X, Y, Z], got " + shape_to_string(t.shape));
        c = t.dim(0);
        x = t.dim(1);
        y = t.dim(2);
        z = t.dim(3);
    }
    std::size_t at(std::size_t ch, std::size_t i, std::size_t j, std::size_t k) const {
        return ((ch * x + i) * y + j) * z + k;
    }
};

Tensor label_tensor(const std::vector<std::uint8_t>& label, const Tensor& image) {
    Tensor t({1, image.dim(1), image.dim(2), image.dim(3)});
    if (label.size() != t.numel()) throw std::invalid_argument("label size does not match the image");
    for (std::size_t i = 0; i < label.size(); ++i) t[i] = label[i];
    return t;
}

}  // namespace

bool is_spatial(AugKind kind) { return static_cast<int>(kind) <= static_cast<int>(AugKind::Zoom); }

void flip_axis(Tensor& t, int axis) {
    const Grid g(t);
    Tensor out(t.shape);
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t i = 0; i < g.x; ++i)
            for (std::size_t j = 0; j < g.y; ++j)
                for (std::size_t k = 0; k < g.z; ++k) {
                    std::size_t si = i, sj = j, sk = k;
                    if (axis == 0) si = g.x - 1 - i;
                    else if (axis == 1) sj = g.y - 1 - j;
                    else sk = g.z - 1 - k;
                    out[g.at(c, i, j, k)] = t[g.at(c, si, sj, sk)];
                }
    t = std::move(out);
}

void rot90_xy(Tensor& t) {
    const Grid g(t);
    if (g.x != g.y) throw std::invalid_argument("rot90 needs X == Y");
    Tensor out(t.shape);
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t i = 0; i < g.x; ++i)
            for (std::size_t j = 0; j < g.y; ++j)
                for (std::size_t k = 0; k < g.z; ++k)
                    out[g.at(c, j, g.x - 1 - i, k)] = t[g.at(c, i, j, k)];
    t = std::move(out);
}

Tensor zoom(const Tensor& t, double factor, bool nearest) {
    const Grid g(t);
    Tensor out(t.shape, 0.0);
    const std::size_t n[3] = {g.x, g.y, g.z};
    // Source coordinate of each output index along each axis.
    std::vector<double> src[3];
    for (int a = 0; a < 3; ++a) {
        const double centre = (static_cast<double>(n[a]) - 1.0) / 2.0;
        for (std::size_t o = 0; o < n[a]; ++o) src[a].push_back(centre + (static_cast<double>(o) - centre) / factor);
    }
    auto inside = [](long i, std::size_t len) { return i >= 0 && i < static_cast<long>(len); };
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t i = 0; i < g.x; ++i)
            for (std::size_t j = 0; j < g.y; ++j)
                for (std::size_t k = 0; k < g.z; ++k) {
                    const double s[3] = {src[0][i], src[1][j], src[2][k]};
                    double v = 0.0;
                    if (nearest) {
                        const long r[3] = {std::lround(s[0]), std::lround(s[1]), std::lround(s[2])};
                        if (inside(r[0], g.x) && inside(r[1], g.y) && inside(r[2], g.z)) {
                            v = t[g.at(c, r[0], r[1], r[2])];
                        }
                    } else {
                        const long f[3] = {static_cast<long>(std::floor(s[0])), static_cast<long>(std::floor(s[1])),
                                           static_cast<long>(std::floor(s[2]))};
                        const double w[3] = {s[0] - f[0], s[1] - f[1], s[2] - f[2]};
                        for (int corner = 0; corner < 8; ++corner) {
                            long idx[3];
                            double weight = 1.0;
                            for (int a = 0; a < 3; ++a) {
                                const int hi = (corner >> a) & 1;
                                idx[a] = f[a] + hi;
                                weight *= hi ? w[a] : 1.0 - w[a];
                            }
                            if (weight == 0.0) continue;
                            if (inside(idx[0], g.x) && inside(idx[1], g.y) && inside(idx[2], g.z)) {
                                v += weight * t[g.at(c, idx[0], idx[1], idx[2])];
                            }
                        }
                    }
                    out[g.at(c, i, j, k)] = v;
                }
    return out;
}

std::vector<AugKind> apply_augmentations(const AugmentationPlan& plan, Tensor& image,
                                         std::vector<std::uint8_t>& label, Rng& rng, double p) {
    const ValidationReport report = validate_augmentation(plan);
    if (!report.ok()) throw ValidationError(report);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<AugKind> fired;
    Tensor lab;
    bool label_moved = false;
    for (int slot : plan.slots) {
        if (unit(rng) >= p) continue;
        const AugKind kind = static_cast<AugKind>(slot);
        fired.push_back(kind);
        if (is_spatial(kind) && !label_moved) {
            lab = label_tensor(label, image);
            label_moved = true;
        }
        switch (kind) {
            case AugKind::FlipX:
            case AugKind::FlipY:
            case AugKind::FlipZ:
                flip_axis(image, slot);
                flip_axis(lab, slot);
                break;
            case AugKind::Rot90XY:
                rot90_xy(image);
                rot90_xy(lab);
                break;
            case AugKind::Zoom: {
                const double f = std::uniform_real_distribution<double>(kZoomMin, kZoomMax)(rng);
                image = zoom(image, f, false);
                lab = zoom(lab, f, true);
                break;
            }
            case AugKind::GaussianNoise: {
                std::normal_distribution<double> noise(0.0, kNoiseSigma);
                for (double& v : image.data) v += noise(rng);
                break;
            }
            case AugKind::IntensityShift: {
                const double s = std::uniform_real_distribution<double>(-kShiftMax, kShiftMax)(rng);
                for (double& v : image.data) v += s;
                break;
            }
            case AugKind::IntensityScaleShift: {
                const double s = std::uniform_real_distribution<double>(kScaleMin, kScaleMax)(rng);
                for (double& v : image.data) v *= s;
                break;
            }
        }
    }
    if (label_moved) {
        for (std::size_t i = 0; i < label.size(); ++i) label[i] = static_cast<std::uint8_t>(lab[i]);
    }
    return fired;
}

}  // namespace relsearch

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "relsearch/train_eval.hpp"

namespace relsearch {

static_assert(std::endian::native == std::endian::little, "raw volume files are little-endian");

namespace {

constexpr double kBackgroundLevel = 0.1;
constexpr double kOrganLevel = 0.5;
constexpr double kLesionLevel = 0.85;
constexpr double kSmoothSigma = 1.0;
constexpr double kImageNoise = 0.03;

struct Ellipsoid {
    double c[3];
    double r[3];
    bool contains(double x, double y, double z) const {
        const double dx = (x - c[0]) / r[0], dy = (y - c[1]) / r[1], dz = (z - c[2]) / r[2];
        return dx * dx + dy * dy + dz * dz <= 1.0;
    }
};

// Separable Gaussian blur of a single-channel cube with clamped borders.
void smooth(std::vector<double>& v, int n) {
    const int radius = 2;
    std::vector<double> kernel;
    double total = 0.0;
    for (int d = -radius; d <= radius; ++d) {
        kernel.push_back(std::exp(-0.5 * d * d / (kSmoothSigma * kSmoothSigma)));
        total += kernel.back();
    }
    for (double& k : kernel) k /= total;
    const std::size_t strides[3] = {static_cast<std::size_t>(n) * n, static_cast<std::size_t>(n), 1};
    std::vector<double> out(v.size());
    for (int axis = 0; axis < 3; ++axis) {
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < n; ++k) {
                    const int pos[3] = {i, j, k};
                    const std::size_t base = i * strides[0] + j * strides[1] + k * strides[2];
                    const std::size_t home = base - pos[axis] * strides[axis];
                    double acc = 0.0;
                    for (int d = -radius; d <= radius; ++d) {
                        const int q = std::clamp(pos[axis] + d, 0, n - 1);
                        acc += kernel[d + radius] * v[home + q * strides[axis]];
                    }
                    out[base] = acc;
                }
        v.swap(out);
    }
}

SyntheticVolume make_volume(int n, Rng& rng, bool binary) {
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    const double dn = n;
    Ellipsoid organ{};
    for (int a = 0; a < 3; ++a) {
        organ.c[a] = between(0.4 * dn, 0.6 * dn) - 0.5;
        organ.r[a] = between(0.25 * dn, 0.38 * dn);
    }
    std::vector<Ellipsoid> lesions(std::uniform_int_distribution<int>(1, 3)(rng));
    for (Ellipsoid& les : lesions) {
        // Centre within the inner half of the organ, by rejection.
        double u[3];
        do {
            for (double& x : u) x = between(-0.5, 0.5);
        } while (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] > 0.25);
        for (int a = 0; a < 3; ++a) {
            les.c[a] = organ.c[a] + u[a] * organ.r[a];
            les.r[a] = std::max(1.0, between(0.08 * dn, 0.14 * dn));
        }
    }

    const std::size_t voxels = static_cast<std::size_t>(n) * n * n;
    SyntheticVolume vol;
    vol.label.assign(voxels, kBackground);
    std::vector<double> intensity(voxels, kBackgroundLevel);
    std::size_t i = 0;
    for (int x = 0; x < n; ++x)
        for (int y = 0; y < n; ++y)
            for (int z = 0; z < n; ++z, ++i) {
                if (!organ.contains(x, y, z)) continue;
                vol.label[i] = kOrgan;
                intensity[i] = kOrganLevel;
                for (const Ellipsoid& les : lesions) {
                    if (les.contains(x, y, z)) {
                        vol.label[i] = binary ? kOrgan : kLesion;
                        intensity[i] = kLesionLevel;
                    }
                }
            }
    smooth(intensity, n);
    std::normal_distribution<double> noise(0.0, kImageNoise);
    for (double& v : intensity) v = std::clamp(v + noise(rng), 0.0, 1.0);
    const std::size_t side = static_cast<std::size_t>(n);
    vol.image = Tensor({1, side, side, side}, std::move(intensity));
    return vol;
}

template <typename T>
void write_raw(const std::filesystem::path& path, const std::vector<T>& values) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(T)));
    if (!out) throw std::runtime_error("short write to " + path.string());
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& path, std::size_t count) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<T> values(count);
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(T)));
    if (in.gcount() != static_cast<std::streamsize>(count * sizeof(T))) {
        throw std::runtime_error("truncated file " + path.string());
    }
    return values;
}

std::string numbered(const char* stem, std::size_t i, const char* ext) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03zu.%s", stem, i, ext);
    return buf;
}

}  // namespace

SyntheticDataset make_synthetic_dataset(int count, int size, Rng& rng, bool binary) {
    if (count < 0 || size < 1) throw std::invalid_argument("dataset needs count >= 0 and size >= 1");
    SyntheticDataset ds;
    ds.seed = rng();
    ds.size = size;
    ds.num_classes = binary ? 2 : 3;
    Rng gen(ds.seed);
    for (int i = 0; i < count; ++i) ds.volumes.push_back(make_volume(size, gen, binary));
    return ds;
}

Tensor one_hot(const std::vector<std::uint8_t>& label, int num_classes, int x, int y, int z) {
    const std::size_t n = static_cast<std::size_t>(x) * y * z;
    if (label.size() != n) throw std::invalid_argument("label size does not match its extent");
    Tensor out({static_cast<std::size_t>(num_classes), static_cast<std::size_t>(x),
                static_cast<std::size_t>(y), static_cast<std::size_t>(z)});
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] >= num_classes) throw std::out_of_range("label value exceeds the class count");
        out[label[i] * n + i] = 1.0;
    }
    return out;
}

void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["schema_version"] = 1;
    manifest["seed"] = ds.seed;
    manifest["size"] = ds.size;
    manifest["num_classes"] = ds.num_classes;
    manifest["count"] = ds.volumes.size();
    nlohmann::ordered_json vols = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < ds.volumes.size(); ++i) {
        const SyntheticVolume& v = ds.volumes[i];
        std::vector<float> image(v.image.data.begin(), v.image.data.end());
        write_raw(dir / numbered("image", i, "f32"), image);
        write_raw(dir / numbered("label", i, "u8"), v.label);
        std::vector<std::size_t> counts(static_cast<std::size_t>(ds.num_classes), 0);
        for (std::uint8_t l : v.label) ++counts.at(l);
        vols.push_back({{"image", numbered("image", i, "f32")},
                        {"label", numbered("label", i, "u8")},
                        {"shape", {v.x(), v.y(), v.z()}},
                        {"class_counts", counts}});
    }
    manifest["volumes"] = vols;
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
}

SyntheticDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("missing manifest.json in " + dir.string());
    const nlohmann::json m = nlohmann::json::parse(in);
    SyntheticDataset ds;
    ds.seed = m.at("seed").get<std::uint64_t>();
    ds.size = m.at("size").get<int>();
    ds.num_classes = m.at("num_classes").get<int>();
    for (const auto& v : m.at("volumes")) {
        const auto shape = v.at("shape").get<std::vector<std::size_t>>();
        if (shape.size() != 3) throw std::runtime_error("volume shape must have three extents");
        const std::size_t n = shape[0] * shape[1] * shape[2];
        SyntheticVolume vol;
        const auto image = read_raw<float>(dir / v.at("image").get<std::string>(), n);
        vol.image = Tensor({1, shape[0], shape[1], shape[2]}, std::vector<double>(image.begin(), image.end()));
        vol.label = read_raw<std::uint8_t>(dir / v.at("label").get<std::string>(), n);
        for (std::uint8_t l : vol.label) {
            if (l >= ds.num_classes) throw std::runtime_error("label value exceeds num_classes");
        }
        ds.volumes.push_back(std::move(vol));
    }
    return ds;
}

}  // namespace relsearch

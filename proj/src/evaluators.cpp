#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "relsearch/encoding.hpp"
#include "relsearch/net_builder.hpp"
#include "relsearch/train_eval.hpp"

namespace relsearch {

nlohmann::ordered_json to_json(const EvalScore& s) {
    nlohmann::ordered_json j;
    j["dice"] = s.dice;
    j["iterations_used"] = s.iterations_used;
    j["diverged"] = s.diverged;
    return j;
}

EvalScore eval_score_from_json(const nlohmann::json& j) {
    EvalScore s;
    s.dice = j.at("dice").get<double>();
    s.iterations_used = j.at("iterations_used").get<int>();
    s.diverged = j.value("diverged", false);
    if (!(s.dice >= 0.0 && s.dice <= 1.0)) throw std::invalid_argument("dice outside [0, 1]");
    return s;
}

void append_eval_jsonl(const std::filesystem::path& path, int id, const EvalScore& s) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot append to " + path.string());
    nlohmann::ordered_json j;
    j["id"] = id;
    const nlohmann::ordered_json fields = to_json(s);
    for (const auto& [k, v] : fields.items()) j[k] = v;
    out << j.dump() << '\n';
}

double foreground_dice(const Tensor& probs, const std::vector<std::uint8_t>& label) {
    const std::size_t k = probs.dim(0);
    const std::size_t n = probs.numel() / k;
    if (label.size() != n) throw std::invalid_argument("label size does not match the prediction");
    std::vector<std::size_t> tp(k, 0), pred(k, 0), gt(k, 0);
    for (std::size_t v = 0; v < n; ++v) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c) {
            if (probs[c * n + v] > probs[best * n + v]) best = c;
        }
        ++pred[best];
        ++gt[label[v]];
        if (best == label[v]) ++tp[best];
    }
    double total = 0.0;
    for (std::size_t c = 1; c < k; ++c) {
        const std::size_t denom = pred[c] + gt[c];
        total += denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
    }
    return total / static_cast<double>(k - 1);
}

namespace {

std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Uniform in [-1, 1), a pure function of the tokens and the seed.
double hash_noise(const EncodedConfig& vec, std::uint64_t seed) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ mix64(seed);
    for (int tok : vec.tokens) {
        auto u = static_cast<std::uint32_t>(tok);
        for (int b = 0; b < 4; ++b) {
            h ^= (u >> (8 * b)) & 0xffu;
            h *= 0x100000001b3ULL;
        }
    }
    const double unit = static_cast<double>(mix64(h) >> 11) * 0x1.0p-53;
    return 2.0 * unit - 1.0;
}

}  // namespace

SurrogateTerms surrogate_terms(const Configuration& config, const SurrogateOptions& opts) {
    SurrogateTerms t;
    const TrainHyperParams& hp = config.hp();
    t.hp = 0.45 * kSurrogateLrPref[hp.lr_idx] + 0.25 * kSurrogateLossPref[hp.loss_idx] +
           0.20 * kSurrogateOptPref[hp.opt_idx] + 0.10 * kSurrogateSchedPref[hp.sched_idx];

    const ArchitectureSpec& arch = config.arch();
    std::set<int> levels;
    for (int id : reachable_blocks(arch)) levels.insert(arch.blocks[static_cast<std::size_t>(id)].level);
    const double diversity = (static_cast<double>(levels.size()) - 1.0) / 3.0;
    const double extremity = std::abs(arch.block_count() - 8.5) / 3.5;
    t.arch = 0.6 * diversity + 0.4 * (1.0 - extremity);

    std::set<int> spatial;
    for (int s : config.aug().slots) {
        if (is_spatial(static_cast<AugKind>(s))) spatial.insert(s);
    }
    t.aug = static_cast<double>(spatial.size()) / 5.0;

    t.noise = hash_noise(encode(config), opts.seed);
    t.score = std::clamp(0.15 + 0.40 * t.hp + 0.25 * t.arch + 0.15 * t.aug + opts.tau * t.noise, 0.0, 1.0);
    return t;
}

EvalScore surrogate_evaluate(const Configuration& config, const SurrogateOptions& opts) {
    return EvalScore{surrogate_terms(config, opts).score, 0, false};
}

namespace {

struct Crop {
    Tensor image;
    std::vector<std::uint8_t> label;
};

Crop take_crop(const SyntheticVolume& vol, int crop, bool foreground, Rng& rng) {
    const int nx = vol.x(), ny = vol.y(), nz = vol.z();
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < vol.label.size(); ++i) {
        if ((vol.label[i] != kBackground) == foreground) pool.push_back(i);
    }
    std::size_t centre = 0;
    if (!pool.empty()) {
        centre = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    }
    const int cz = static_cast<int>(centre % nz);
    const int cy = static_cast<int>((centre / nz) % ny);
    const int cx = static_cast<int>(centre / (static_cast<std::size_t>(ny) * nz));
    const int x0 = std::clamp(cx - crop / 2, 0, nx - crop);
    const int y0 = std::clamp(cy - crop / 2, 0, ny - crop);
    const int z0 = std::clamp(cz - crop / 2, 0, nz - crop);
    const std::size_t side = static_cast<std::size_t>(crop);
    Crop out{Tensor({1, side, side, side}), std::vector<std::uint8_t>(side * side * side)};
    std::size_t o = 0;
    for (int i = 0; i < crop; ++i)
        for (int j = 0; j < crop; ++j)
            for (int k = 0; k < crop; ++k, ++o) {
                const std::size_t src = (static_cast<std::size_t>(x0 + i) * ny + (y0 + j)) * nz + (z0 + k);
                out.image[o] = vol.image[src];
                out.label[o] = vol.label[src];
            }
    return out;
}

}  // namespace

EvalScore toy_train_evaluate(const Configuration& config, const SyntheticDataset& dataset,
                             const ToyTrainOptions& opts, Rng& rng) {
    const std::size_t count = dataset.volumes.size();
    if (count < 2) throw std::invalid_argument("toy training needs at least two volumes");
    if (opts.budget < 0 || opts.eval_every < 1) throw std::invalid_argument("bad toy training budget");
    for (const SyntheticVolume& v : dataset.volumes) {
        if (opts.crop > std::min({v.x(), v.y(), v.z()})) {
            throw std::invalid_argument("crop exceeds a volume extent");
        }
    }

    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(opts.val_fraction * static_cast<double>(count))), 1, count - 1);
    const std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<long>(n_val));
    const std::vector<std::size_t> train(order.begin() + static_cast<long>(n_val), order.end());

    NetOptions net_opts;
    net_opts.in_channels = 1;
    net_opts.num_classes = dataset.num_classes;
    net_opts.c1 = opts.c1;
    NetworkGraph net = build_network(config.arch(), net_opts, rng);
    Optimizer optimizer(optimizer_kind_from_index(config.hp().opt_idx));
    const double base_lr = config.hp().learning_rate();

    bool diverged = false;
    auto validate = [&]() {
        double total = 0.0;
        for (std::size_t i : val) {
            const SyntheticVolume& v = dataset.volumes[i];
            const Tensor probs = forward(net, v.image);
            if (!probs.all_finite()) {
                diverged = true;
                return 0.0;
            }
            total += foreground_dice(probs, v.label);
        }
        return total / static_cast<double>(val.size());
    };

    double best = validate();
    int it = 0;
    for (; it < opts.budget && !diverged; ++it) {
        const SyntheticVolume& vol =
            dataset.volumes[train[std::uniform_int_distribution<std::size_t>(0, train.size() - 1)(rng)]];
        Crop crop = take_crop(vol, opts.crop, it % 2 == 0, rng);
        apply_augmentations(config.aug(), crop.image, crop.label, rng);
        const Tensor target = one_hot(crop.label, dataset.num_classes, opts.crop, opts.crop, opts.crop);

        net.params.zero_grad();
        Tape tape;
        ParamBinding bind(tape, net.params);
        const Var probs = net.forward(bind, tape.constant(crop.image));
        const Var loss = ad::combined_loss(tape, config.hp().loss_idx, probs, target);
        if (!std::isfinite(tape.value(loss)[0])) {
            diverged = true;
            break;
        }
        tape.backward(loss);
        try {
            optimizer.step(net.params, lr_at(config.hp().sched_idx, base_lr, it, opts.budget));
        } catch (const NanGradientError&) {
            diverged = true;
            break;
        }
        if ((it + 1) % opts.eval_every == 0 || it + 1 == opts.budget) best = std::max(best, validate());
    }
    if (diverged) return EvalScore{0.0, it, true};
    return EvalScore{best, it, false};
}

}  // namespace relsearch

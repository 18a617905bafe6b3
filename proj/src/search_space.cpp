#include "relsearch/search_space.hpp"

#include <sstream>

namespace relsearch {

namespace {

int uniform_int(Rng& rng, int lo, int hi) {
    std::uniform_int_distribution<int> dist(lo, hi);
    return dist(rng);
}

void check_range(ValidationReport& r, int value, int lo, int hi, const char* rule, int block = -1) {
    if (value < lo || value > hi) r.violations.push_back({block, rule});
}

}  // namespace

const char* op_kind_name(OpKind op) {
    switch (op) {
        case OpKind::Residual3D: return "residual3d";
        case OpKind::Bottleneck3D: return "bottleneck3d";
        case OpKind::AxialAttnXYZ: return "axial_xyz";
        case OpKind::AxialAttnYXZ: return "axial_yxz";
    }
    return "unknown";
}

const char* aug_kind_name(AugKind aug) {
    switch (aug) {
        case AugKind::FlipX: return "flip_x";
        case AugKind::FlipY: return "flip_y";
        case AugKind::FlipZ: return "flip_z";
        case AugKind::Rot90XY: return "rot90_xy";
        case AugKind::Zoom: return "zoom";
        case AugKind::GaussianNoise: return "gaussian_noise";
        case AugKind::IntensityShift: return "intensity_shift";
        case AugKind::IntensityScaleShift: return "intensity_scale_shift";
    }
    return "unknown";
}

OpKind op_kind_from_index(int index) {
    if (index < 0 || index >= kOpKindCount) {
        throw std::out_of_range("op index " + std::to_string(index) + " outside 0..3");
    }
    return static_cast<OpKind>(index);
}

bool ValidationReport::has(const std::string& rule) const {
    for (const auto& v : violations) {
        if (v.rule == rule) return true;
    }
    return false;
}

bool ValidationReport::has(const std::string& rule, int block) const {
    for (const auto& v : violations) {
        if (v.rule == rule && v.block == block) return true;
    }
    return false;
}

std::string ValidationReport::summary() const {
    if (ok()) return "ok";
    std::ostringstream os;
    for (std::size_t i = 0; i < violations.size(); ++i) {
        if (i) os << "; ";
        os << violations[i].rule;
        if (violations[i].block >= 0) os << " at block " << violations[i].block;
    }
    return os.str();
}

ValidationError::ValidationError(ValidationReport report)
    : std::invalid_argument("validation failed: " + report.summary()), report_(std::move(report)) {}

ValidationReport validate_architecture(const ArchitectureSpec& arch) {
    ValidationReport r;
    const int n = arch.block_count();
    if (n < kMinBlocks || n > kMaxBlocks) r.violations.push_back({-1, "block-count-out-of-range"});
    for (int i = 0; i < n; ++i) {
        const BlockSpec& b = arch.blocks[static_cast<std::size_t>(i)];
        if (b.block_id != i) r.violations.push_back({i, "block-id-mismatch"});
        check_range(r, static_cast<int>(b.op), 0, kOpKindCount - 1, "op-out-of-range", i);
        check_range(r, b.level, kMinLevel, kMaxLevel, "level-out-of-range", i);
        for (int p : {b.pred1, b.pred2}) {
            if (p < kNoPredecessor) {
                r.violations.push_back({i, "predecessor-invalid"});
            } else if (p >= i) {
                r.violations.push_back({i, "predecessor-not-earlier"});
            }
        }
        if (i == 0 && (b.pred1 != kNoPredecessor || b.pred2 != kNoPredecessor)) {
            r.violations.push_back({i, "sentinel-rule"});
        } else if (i == 1 && (b.pred1 != 0 || b.pred2 != kNoPredecessor)) {
            r.violations.push_back({i, "sentinel-rule"});
        } else if (i >= 2 && (b.pred1 == kNoPredecessor || b.pred2 == kNoPredecessor)) {
            r.violations.push_back({i, "missing-predecessor"});
        }
    }
    return r;
}

ValidationReport validate_augmentation(const AugmentationPlan& aug) {
    ValidationReport r;
    if (aug.slots.size() != static_cast<std::size_t>(kAugSlots)) {
        r.violations.push_back({-1, "aug-length"});
    }
    for (int s : aug.slots) check_range(r, s, 0, kAugCandidates - 1, "aug-out-of-range");
    return r;
}

ValidationReport validate_hyperparams(const TrainHyperParams& hp) {
    ValidationReport r;
    check_range(r, hp.lr_idx, 0, kLrChoices - 1, "lr-out-of-range");
    check_range(r, hp.sched_idx, 0, kSchedChoices - 1, "sched-out-of-range");
    check_range(r, hp.loss_idx, 0, kLossChoices - 1, "loss-out-of-range");
    check_range(r, hp.opt_idx, 0, kOptChoices - 1, "opt-out-of-range");
    return r;
}

ValidationReport validate_configuration(const ArchitectureSpec& arch, const AugmentationPlan& aug,
                                        const TrainHyperParams& hp) {
    ValidationReport r = validate_architecture(arch);
    const auto ra = validate_augmentation(aug);
    const auto rh = validate_hyperparams(hp);
    r.violations.insert(r.violations.end(), ra.violations.begin(), ra.violations.end());
    r.violations.insert(r.violations.end(), rh.violations.begin(), rh.violations.end());
    return r;
}

Configuration::Configuration(ArchitectureSpec arch, AugmentationPlan aug, TrainHyperParams hp)
    : arch_(std::move(arch)), aug_(std::move(aug)), hp_(hp) {
    auto report = validate_configuration(arch_, aug_, hp_);
    if (!report.ok()) throw ValidationError(std::move(report));
}

ArchitectureSpec sample_architecture(Rng& rng) {
    ArchitectureSpec arch;
    const int n = uniform_int(rng, kMinBlocks, kMaxBlocks);
    arch.blocks.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        BlockSpec b;
        b.block_id = i;
        b.op = static_cast<OpKind>(uniform_int(rng, 0, kOpKindCount - 1));
        b.level = uniform_int(rng, kMinLevel, kMaxLevel);
        if (i == 0) {
            b.pred1 = kNoPredecessor;
            b.pred2 = kNoPredecessor;
        } else if (i == 1) {
            b.pred1 = 0;
            b.pred2 = kNoPredecessor;
        } else {
            b.pred1 = uniform_int(rng, 0, i - 1);
            b.pred2 = uniform_int(rng, 0, i - 1);
        }
        arch.blocks.push_back(b);
    }
    return arch;
}

Configuration sample_configuration(Rng& rng) {
    ArchitectureSpec arch = sample_architecture(rng);
    AugmentationPlan aug;
    aug.slots.resize(kAugSlots);
    for (int& s : aug.slots) s = uniform_int(rng, 0, kAugCandidates - 1);
    TrainHyperParams hp;
    hp.lr_idx = uniform_int(rng, 0, kLrChoices - 1);
    hp.sched_idx = uniform_int(rng, 0, kSchedChoices - 1);
    hp.loss_idx = uniform_int(rng, 0, kLossChoices - 1);
    hp.opt_idx = uniform_int(rng, 0, kOptChoices - 1);
    return Configuration(std::move(arch), std::move(aug), hp);
}

std::set<int> reachable_blocks(const ArchitectureSpec& arch) {
    auto report = validate_architecture(arch);
    if (!report.ok()) throw ValidationError(std::move(report));
    std::set<int> seen;
    std::vector<int> stack = {arch.block_count() - 1};
    while (!stack.empty()) {
        const int id = stack.back();
        stack.pop_back();
        if (!seen.insert(id).second) continue;
        const BlockSpec& b = arch.blocks[static_cast<std::size_t>(id)];
        for (int p : {b.pred1, b.pred2}) {
            if (p >= 0 && !seen.count(p)) stack.push_back(p);
        }
    }
    return seen;
}

nlohmann::ordered_json to_json(const ArchitectureSpec& arch) {
    nlohmann::ordered_json blocks = nlohmann::ordered_json::array();
    for (const auto& b : arch.blocks) {
        blocks.push_back({b.block_id, static_cast<int>(b.op), b.level, b.pred1, b.pred2});
    }
    nlohmann::ordered_json j;
    j["blocks"] = std::move(blocks);
    return j;
}

ArchitectureSpec architecture_from_json(const nlohmann::json& j) {
    ArchitectureSpec arch;
    for (const auto& row : j.at("blocks")) {
        if (!row.is_array() || row.size() != 5) {
            throw std::invalid_argument("block entry must be [id, op, level, pred1, pred2]");
        }
        BlockSpec b;
        b.block_id = row[0].get<int>();
        b.op = static_cast<OpKind>(row[1].get<int>());
        b.level = row[2].get<int>();
        b.pred1 = row[3].get<int>();
        b.pred2 = row[4].get<int>();
        arch.blocks.push_back(b);
    }
    return arch;
}

nlohmann::ordered_json to_json(const Configuration& config) {
    nlohmann::ordered_json j;
    j["arch"] = to_json(config.arch());
    j["aug"] = config.aug().slots;
    nlohmann::ordered_json hp;
    hp["lr_idx"] = config.hp().lr_idx;
    hp["sched_idx"] = config.hp().sched_idx;
    hp["loss_idx"] = config.hp().loss_idx;
    hp["opt_idx"] = config.hp().opt_idx;
    j["hp"] = std::move(hp);
    return j;
}

Configuration configuration_from_json(const nlohmann::json& j) {
    ArchitectureSpec arch = architecture_from_json(j.at("arch"));
    AugmentationPlan aug;
    aug.slots = j.at("aug").get<std::vector<int>>();
    const auto& h = j.at("hp");
    TrainHyperParams hp;
    hp.lr_idx = h.at("lr_idx").get<int>();
    hp.sched_idx = h.at("sched_idx").get<int>();
    hp.loss_idx = h.at("loss_idx").get<int>();
    hp.opt_idx = h.at("opt_idx").get<int>();
    return Configuration(std::move(arch), std::move(aug), hp);
}

}  // namespace relsearch

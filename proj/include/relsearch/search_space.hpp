#pragma once

// The joint configuration space: block-graph architectures, augmentation
// plans, and discrete training hyperparameters.

#include <array>
#include <cstdint>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace relsearch {

using Rng = std::mt19937_64;

enum class OpKind : int { Residual3D = 0, Bottleneck3D = 1, AxialAttnXYZ = 2, AxialAttnYXZ = 3 };

inline constexpr int kOpKindCount = 4;
inline constexpr int kMinBlocks = 5;
inline constexpr int kMaxBlocks = 12;
inline constexpr int kMinLevel = 2;
inline constexpr int kMaxLevel = 5;
inline constexpr int kNoPredecessor = -1;

inline constexpr int kAugSlots = 5;
inline constexpr int kAugCandidates = 8;
inline constexpr int kLrChoices = 5;
inline constexpr int kSchedChoices = 2;
inline constexpr int kLossChoices = 5;
inline constexpr int kOptChoices = 5;

inline constexpr std::array<double, kLrChoices> kLearningRates = {0.01, 0.005, 0.001, 0.0005,
                                                                  0.0001};

enum class AugKind : int {
    FlipX = 0,
    FlipY = 1,
    FlipZ = 2,
    Rot90XY = 3,
    Zoom = 4,
    GaussianNoise = 5,
    IntensityShift = 6,
    IntensityScaleShift = 7,
};

const char* op_kind_name(OpKind op);
const char* aug_kind_name(AugKind aug);
OpKind op_kind_from_index(int index);  // throws std::out_of_range

struct BlockSpec {
    int block_id = 0;
    OpKind op = OpKind::Residual3D;
    int level = kMinLevel;
    int pred1 = kNoPredecessor;
    int pred2 = kNoPredecessor;

    bool operator==(const BlockSpec&) const = default;
};

struct ArchitectureSpec {
    std::vector<BlockSpec> blocks;

    int block_count() const { return static_cast<int>(blocks.size()); }
    bool operator==(const ArchitectureSpec&) const = default;
};

struct TrainHyperParams {
    int lr_idx = 0;
    int sched_idx = 0;
    int loss_idx = 0;
    int opt_idx = 0;

    double learning_rate() const { return kLearningRates.at(static_cast<std::size_t>(lr_idx)); }
    bool operator==(const TrainHyperParams&) const = default;
};

struct AugmentationPlan {
    std::vector<int> slots;

    bool operator==(const AugmentationPlan&) const = default;
};

struct Violation {
    int block = -1;  // -1 when the violation is not tied to a block
    std::string rule;

    bool operator==(const Violation&) const = default;
};

struct ValidationReport {
    std::vector<Violation> violations;

    bool ok() const { return violations.empty(); }
    bool has(const std::string& rule) const;
    bool has(const std::string& rule, int block) const;
    std::string summary() const;
};

class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(ValidationReport report);
    const ValidationReport& report() const { return report_; }

private:
    ValidationReport report_;
};

ValidationReport validate_architecture(const ArchitectureSpec& arch);
ValidationReport validate_augmentation(const AugmentationPlan& aug);
ValidationReport validate_hyperparams(const TrainHyperParams& hp);

// A point in the search space. Construction validates every component.
class Configuration {
public:
    Configuration(ArchitectureSpec arch, AugmentationPlan aug, TrainHyperParams hp);

    const ArchitectureSpec& arch() const { return arch_; }
    const AugmentationPlan& aug() const { return aug_; }
    const TrainHyperParams& hp() const { return hp_; }

    bool operator==(const Configuration&) const = default;

private:
    ArchitectureSpec arch_;
    AugmentationPlan aug_;
    TrainHyperParams hp_;
};

ValidationReport validate_configuration(const ArchitectureSpec& arch, const AugmentationPlan& aug,
                                        const TrainHyperParams& hp);

ArchitectureSpec sample_architecture(Rng& rng);
Configuration sample_configuration(Rng& rng);

// Ids of every block on some predecessor path that ends at the final block,
// the final block included. Throws ValidationError on an invalid spec.
std::set<int> reachable_blocks(const ArchitectureSpec& arch);

// Canonical JSON: {"arch":{"blocks":[[id,op,level,p1,p2],...]},"aug":[...],"hp":{...}}
nlohmann::ordered_json to_json(const Configuration& config);
Configuration configuration_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const ArchitectureSpec& arch);
ArchitectureSpec architecture_from_json(const nlohmann::json& j);

}  // namespace relsearch

#pragma once

// Searchable training ingredients (losses, optimizers, schedules,
// augmentations) and the two evaluators that turn a Configuration into an
// EvalScore: a closed-form surrogate and a small trainable segmenter.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relsearch/autodiff.hpp"
#include "relsearch/search_space.hpp"
#include "relsearch/tensor.hpp"

namespace relsearch {

enum class LossKind : int { Dice = 0, DiceSquared = 1, CrossEntropy = 2, DiceCE = 3, DiceFocal = 4 };
enum class OptimizerKind : int { Adam = 0, SGD = 1, Momentum = 2, Nesterov = 3, NovoGrad = 4 };
enum class SchedulerKind : int { Constant = 0, Polynomial = 1 };

// Throw std::out_of_range outside the index maps.
LossKind loss_kind_from_index(int index);
OptimizerKind optimizer_kind_from_index(int index);
SchedulerKind scheduler_kind_from_index(int index);
const char* loss_kind_name(LossKind kind);
const char* optimizer_kind_name(OptimizerKind kind);
const char* scheduler_kind_name(SchedulerKind kind);

// ---- losses ----------------------------------------------------------------
//
// probs and onehot are [K, X, Y, Z]. Class 0 is background; Dice averages the
// K - 1 foreground classes, cross-entropy and focal average over voxels.
// Shape mismatches throw std::invalid_argument ("shape-mismatch: ...").

inline constexpr double kDiceEps = 1e-5;
inline constexpr double kFocalGamma = 2.0;
// Probabilities are clamped from below before taking logs.
inline constexpr double kProbFloor = 1e-12;

namespace ad {
Var dice_loss(Tape& t, Var probs, const Tensor& onehot, bool squared);
Var cross_entropy_loss(Tape& t, Var probs, const Tensor& onehot);
Var focal_loss(Tape& t, Var probs, const Tensor& onehot, double gamma = kFocalGamma);
// 0 Dice, 1 squared Dice, 2 CE, 3 Dice + CE, 4 Dice + focal; unit weights.
Var combined_loss(Tape& t, int loss_idx, Var probs, const Tensor& onehot);
}  // namespace ad

double dice_loss(const Tensor& probs, const Tensor& onehot, bool squared);
double cross_entropy_loss(const Tensor& probs, const Tensor& onehot);
double focal_loss(const Tensor& probs, const Tensor& onehot, double gamma = kFocalGamma);
double combined_loss(int loss_idx, const Tensor& probs, const Tensor& onehot);

// ---- optimizers and schedules -----------------------------------------------

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kOptEps = 1e-8;
inline constexpr double kMomentum = 0.9;
inline constexpr double kNovoBeta1 = 0.9;
inline constexpr double kNovoBeta2 = 0.98;
inline constexpr double kPolyPower = 0.9;

// Per-model optimizer state. Gradients are read from ParamTensor::grad; a
// non-finite gradient throws NanGradientError before anything is updated.
// NovoGrad keeps one second moment per parameter tensor.
class Optimizer {
public:
    explicit Optimizer(OptimizerKind kind) : kind_(kind) {}

    void step(ParamSet& params, double lr);
    OptimizerKind kind() const { return kind_; }
    long steps() const { return t_; }

private:
    OptimizerKind kind_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
    std::vector<double> layer_v_;
};

double lr_at(int sched_idx, double base_lr, long iter, long max_iter);

// ---- synthetic volumes ------------------------------------------------------

struct SyntheticVolume {
    Tensor image;                      // [1, X, Y, Z], values in [0, 1]
    std::vector<std::uint8_t> label;   // X*Y*Z, z fastest
    int x() const { return static_cast<int>(image.dim(1)); }
    int y() const { return static_cast<int>(image.dim(2)); }
    int z() const { return static_cast<int>(image.dim(3)); }
};

struct SyntheticDataset {
    std::vector<SyntheticVolume> volumes;
    int num_classes = 3;  // 3: background/organ/lesion; 2 in binary mode
    int size = 16;
    std::uint64_t seed = 0;
};

inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kOrgan = 1;
inline constexpr std::uint8_t kLesion = 2;

// Organ ellipsoid with 1-3 lesion ellipsoids inside it, smoothed and noised.
// The seed recorded in the dataset is the first draw from rng.
SyntheticDataset make_synthetic_dataset(int count, int size, Rng& rng, bool binary = false);

// Directory of raw little-endian image_NNN.f32 / label_NNN.u8 plus manifest.json.
void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& dir);
SyntheticDataset load_dataset(const std::filesystem::path& dir);

Tensor one_hot(const std::vector<std::uint8_t>& label, int num_classes, int x, int y, int z);

// ---- augmentations ------------------------------------------------------------

inline constexpr double kAugProbability = 0.15;
inline constexpr double kZoomMin = 0.9, kZoomMax = 1.1;
inline constexpr double kNoiseSigma = 0.1;
inline constexpr double kShiftMax = 0.1;
inline constexpr double kScaleMin = 0.9, kScaleMax = 1.1;

bool is_spatial(AugKind kind);

// Spatial transforms on [C, X, Y, Z]. Zoom resamples about the volume centre
// into the same extent: trilinear for images, nearest for labels, zero
// outside the source.
void flip_axis(Tensor& t, int axis);
// (x, y, z) -> (y, X - 1 - x, z); requires X == Y.
void rot90_xy(Tensor& t);
Tensor zoom(const Tensor& t, double factor, bool nearest);

// Applies the slots in order, each firing with probability p. Spatial
// transforms move image and label together; intensity transforms touch the
// image only. Returns the kinds that fired.
std::vector<AugKind> apply_augmentations(const AugmentationPlan& plan, Tensor& image,
                                         std::vector<std::uint8_t>& label, Rng& rng,
                                         double p = kAugProbability);

// ---- evaluation -----------------------------------------------------------------

struct EvalScore {
    double dice = 0.0;
    int iterations_used = 0;
    bool diverged = false;

    bool operator==(const EvalScore&) const = default;
};

nlohmann::ordered_json to_json(const EvalScore& s);
EvalScore eval_score_from_json(const nlohmann::json& j);
// Appends {"id": id, ...score} as one line.
void append_eval_jsonl(const std::filesystem::path& path, int id, const EvalScore& s);

// Hard Dice of the per-voxel argmax, averaged over foreground classes. A
// class absent from both prediction and label scores 1.
double foreground_dice(const Tensor& probs, const std::vector<std::uint8_t>& label);

// The surrogate score is
//   clamp(0.15 + 0.40 h + 0.25 a + 0.15 g + tau u, 0, 1)
// with h = 0.45 lr + 0.25 loss + 0.20 opt + 0.10 sched from the preference
// tables below (unique best cell lr_idx 4, loss_idx 3, opt_idx 0, constant);
// a = 0.6 (distinct levels among reachable blocks - 1) / 3
//   + 0.4 (1 - |N - 8.5| / 3.5);
// g = distinct spatial augmentations among the slots / 5;
// u in [-1, 1) from a hash of the encoded vector and the experiment seed.
inline constexpr double kSurrogateLrPref[kLrChoices] = {0.2, 0.45, 0.7, 0.9, 1.0};
inline constexpr double kSurrogateLossPref[kLossChoices] = {0.7, 0.6, 0.5, 1.0, 0.85};
inline constexpr double kSurrogateOptPref[kOptChoices] = {1.0, 0.3, 0.55, 0.6, 0.8};
inline constexpr double kSurrogateSchedPref[kSchedChoices] = {1.0, 0.6};

struct SurrogateOptions {
    double tau = 0.02;
    std::uint64_t seed = 0;
};

struct SurrogateTerms {
    double hp = 0.0, arch = 0.0, aug = 0.0, noise = 0.0;
    double score = 0.0;
};

SurrogateTerms surrogate_terms(const Configuration& config, const SurrogateOptions& opts = {});
EvalScore surrogate_evaluate(const Configuration& config, const SurrogateOptions& opts = {});

struct ToyTrainOptions {
    int budget = 200;     // training iterations
    int eval_every = 50;  // validation period; iteration 0 is always evaluated
    int crop = 16;        // cubic training crop; must not exceed the volume
    int c1 = 4;
    double val_fraction = 0.2;
};

// Trains the configuration's network on the dataset's 80% split and returns
// the best validation Dice. Non-finite losses or gradients end training with
// dice 0 and diverged set.
EvalScore toy_train_evaluate(const Configuration& config, const SyntheticDataset& dataset,
                             const ToyTrainOptions& opts, Rng& rng);

}  // namespace relsearch

#pragma once

// Configuration predictors: the transformer relation model over pairs of
// encoded configurations, and the two baselines it is compared against (an
// MLP relation model over padded vectors and a transformer accuracy
// regressor). All share the autodiff core.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "relsearch/autodiff.hpp"
#include "relsearch/encoding.hpp"
#include "relsearch/search_space.hpp"
#include "relsearch/train_eval.hpp"

namespace relsearch {

// ---- records and pairs -------------------------------------------------------

enum class Split { Train, Val };
const char* split_name(Split s);

struct TrainedRecord {
    int id = 0;
    Configuration config;
    EncodedConfig encoded;
    EvalScore score;
    Split split = Split::Train;
};

using TrainedRecordSet = std::vector<TrainedRecord>;

// 1 iff a_i >= a_j.
int make_gt(double a_i, double a_j);

struct PairExample {
    EncodedConfig v_i, v_j;
    int gt = 1;
    int i = 0, j = 0;  // record ids
};

// Every ordered pair (i, j) of the split, diagonal included, i-major in
// record order. Throws std::invalid_argument on an empty split.
std::vector<PairExample> build_pair_dataset(const TrainedRecordSet& records, Split split);

nlohmann::ordered_json to_json(const PairExample& p);

// ---- tokens ------------------------------------------------------------------
//
// Field-typed vocabulary: every field owns a disjoint id range, and the
// predecessor sentinel has its own id in each predecessor field.
//   block id 0..11 | op 0..3 | level 2..5 | pred1 -1..10 | pred2 -1..10 |
//   augmentation 0..7 | lr 0..4 | scheduler 0..1 | loss 0..4 | optimizer 0..4

enum class TokenField : int { BlockId, Op, Level, Pred1, Pred2, Aug, Lr, Sched, Loss, Opt };
inline constexpr int kTokenFieldCount = 10;

struct FieldRange {
    int base;  // first vocabulary id
    int min;   // smallest field value
    int count;
};

FieldRange field_range(TokenField f);
TokenField field_at(std::size_t position, std::size_t length);
inline constexpr int kVocabSize = 69;

// Throws DecodeError for malformed vectors or out-of-range values.
std::vector<int> tokenize(const EncodedConfig& vec);

// ---- models --------------------------------------------------------------------

enum class PredictorKind : int { TransformerRelation = 0, MlpRelation = 1, AccuracyRegressor = 2 };
const char* predictor_kind_name(PredictorKind k);

struct PredictorHyper {
    int d_model = 32;
    int layers = 2;
    int ffn = 64;
    int head_hidden = 32;
    int mlp_hidden = 64;
    int iterations = 10000;
    int batch = 32;
    double lr = 0.001;
    std::uint64_t seed = 0;
    // Relation logit w . (e_i - e_j): p(i, j) + p(j, i) = 1 exactly.
    bool antisymmetric = false;
    // Start the output layer at zero (relation probability 0.5).
    bool zero_head = false;
    int log_every = 10;
};

nlohmann::ordered_json to_json(const PredictorHyper& h);
// Unknown keys throw std::invalid_argument; missing keys keep defaults.
PredictorHyper predictor_hyper_from_json(const nlohmann::json& j);

// MLP inputs: both vectors padded to kMaxEncodedLength with kPadValue, then
// scaled by kMlpInputScale so that every field lies within [-0.25, 1.375].
inline constexpr int kPadValue = -2;
inline constexpr double kMlpInputScale = 1.0 / 8.0;
inline constexpr int kMlpInputs = 2 * kMaxEncodedLength;  // 138
std::vector<double> mlp_features(const EncodedConfig& v_i, const EncodedConfig& v_j);

struct EncoderLayerParams {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_g, ln2_b, w1, b1, w2, b2;
};

struct Predictor {
    PredictorKind kind = PredictorKind::TransformerRelation;
    PredictorHyper hyper;
    ParamSet params;
    // Transformer encoder (relation model and regressor).
    std::size_t embed = 0;
    std::vector<EncoderLayerParams> layers;
    std::size_t lnf_g = 0, lnf_b = 0;
    // Output stack: (weight, bias) per fully-connected layer, last one scalar.
    std::vector<std::pair<std::size_t, std::size_t>> head;

    // Encoder output e(v) of shape [d_model].
    Var embed_sequence(ParamBinding& bind, const std::vector<int>& tokens) const;
    // Relation logit from two embeddings, or from MLP features.
    Var relation_logit(ParamBinding& bind, Var e_i, Var e_j) const;
    Var mlp_logit(ParamBinding& bind, Var features) const;
    Var regress(ParamBinding& bind, Var e) const;
};

Predictor make_predictor(PredictorKind kind, const PredictorHyper& hyper);

class PredictorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Probability that v_i scores at least as high as v_j.
double predict_relation(const Predictor& p, const EncodedConfig& v_i, const EncodedConfig& v_j);
double predict_accuracy(const Predictor& p, const EncodedConfig& v);
// out[i][j] = predict_relation(v_i, v_j) for all i != j (diagonal 0.5), with
// each sequence encoded once. upper_only fills i < j and leaves the rest 0.5.
std::vector<std::vector<double>> relation_matrix(const Predictor& p, const std::vector<EncodedConfig>& vs,
                                                 bool upper_only = false);

struct TrainingCurve {
    std::vector<std::pair<int, double>> points;  // (iteration, mean batch loss)
};

struct TrainedPredictor {
    Predictor model;
    TrainingCurve curve;
};

// Binary cross-entropy with Adam over uniformly reshuffled mini-batches.
// A non-finite loss throws PredictorError carrying the last finite loss.
TrainedPredictor train_relation_predictor(const std::vector<PairExample>& pairs, const PredictorHyper& hyper);
TrainedPredictor train_mlp_baseline(const std::vector<PairExample>& pairs, const PredictorHyper& hyper);
// Squared error on the scores of the train split.
TrainedPredictor train_accuracy_regressor(const TrainedRecordSet& records, const PredictorHyper& hyper);

// Loss of one pair (BCE) or one record (squared error) for gradient checks.
double pair_loss(const Predictor& p, const PairExample& pair);
// Fills p.params[*].grad with d pair_loss / d params.
void pair_loss_gradients(Predictor& p, const PairExample& pair);

struct GradientCheckReport {
    double max_rel_error = 0.0;
    std::size_t entries = 0;
    std::string worst;
};

// Central differences (step 1e-5) against analytic gradients over every
// parameter tensor; up to per_tensor random entries each (0 = all).
GradientCheckReport gradient_check(Predictor& p, const PairExample& pair, std::size_t per_tensor = 0,
                                   std::uint64_t seed = 0);

// Binary "TAPR" checkpoint plus a JSON sidecar (path with .json extension).
void save_checkpoint(const Predictor& p, const std::filesystem::path& bin,
                     const nlohmann::ordered_json& extra = {});
Predictor load_checkpoint(const std::filesystem::path& bin);

}  // namespace relsearch

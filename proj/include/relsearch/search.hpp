#pragma once

// The search loop: sample and evaluate candidates, train the relation
// predictor on pairs of evaluated candidates, rank the union of evaluated and
// fresh candidates by pairwise wins, select the top one. Also the three-way
// predictor ablation and the rank statistics it reports.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relsearch/encoding.hpp"
#include "relsearch/predictor.hpp"
#include "relsearch/search_space.hpp"
#include "relsearch/train_eval.hpp"

namespace relsearch {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kVersion = "0.1.0";

// ---- candidates ------------------------------------------------------------------

enum class CandidateStatus { Sampled, Evaluated, Failed };
const char* candidate_status_name(CandidateStatus s);

// Where a candidate sits in the search: evaluated train/val records or the
// unevaluated fresh pool.
enum class CandidateRole { Train, Val, Fresh };
const char* candidate_role_name(CandidateRole r);

struct CandidateRecord {
    int id = 0;
    Configuration config;
    EncodedConfig encoded;
    std::optional<EvalScore> score;  // present iff status == Evaluated
    CandidateStatus status = CandidateStatus::Sampled;
    CandidateRole role = CandidateRole::Fresh;
    std::uint64_t seed = 0;
    std::string error;  // evaluator message when status == Failed

    // Score used for ranking and pair labels; failed candidates count as 0.
    double effective_score() const { return score ? score->dice : 0.0; }
};

nlohmann::ordered_json to_json(const CandidateRecord& c);
// Throws std::invalid_argument when encoded and config disagree or the
// score/status invariant is broken.
CandidateRecord candidate_from_json(const nlohmann::json& j);

std::vector<CandidateRecord> read_candidates_jsonl(const std::filesystem::path& path);
void write_candidates_jsonl(const std::filesystem::path& path, const std::vector<CandidateRecord>& cs);

// Candidate k draws its own seed from Rng(seed); its configuration is then
// sampled from Rng(candidate seed), so candidates are independent of order.
std::vector<CandidateRecord> sample_candidates(int count, std::uint64_t seed, int first_id = 0);

// Evaluated candidates as predictor records; Fresh ones are skipped.
TrainedRecordSet to_records(const std::vector<CandidateRecord>& cs);

// ---- evaluators ------------------------------------------------------------------

class Evaluator {
public:
    virtual ~Evaluator() = default;
    // seed is the candidate's pre-assigned seed. Must be safe to call
    // concurrently for different candidates.
    virtual EvalScore evaluate(const Configuration& config, std::uint64_t seed) const = 0;
    virtual std::string name() const = 0;
    virtual nlohmann::ordered_json params() const = 0;
};

class SurrogateEvaluator : public Evaluator {
public:
    explicit SurrogateEvaluator(SurrogateOptions opts) : opts_(opts) {}
    EvalScore evaluate(const Configuration& config, std::uint64_t seed) const override;
    std::string name() const override { return "surrogate"; }
    nlohmann::ordered_json params() const override;

private:
    SurrogateOptions opts_;
};

class ToyTrainEvaluator : public Evaluator {
public:
    ToyTrainEvaluator(std::shared_ptr<const SyntheticDataset> data, ToyTrainOptions opts)
        : data_(std::move(data)), opts_(opts) {}
    EvalScore evaluate(const Configuration& config, std::uint64_t seed) const override;
    std::string name() const override { return "toytrain"; }
    nlohmann::ordered_json params() const override;

private:
    std::shared_ptr<const SyntheticDataset> data_;
    ToyTrainOptions opts_;
};

// Evaluates every candidate in place with up to `workers` threads (0 = the
// OpenMP default). Evaluator exceptions mark the candidate Failed.
void evaluate_candidates(std::vector<CandidateRecord>& cs, const Evaluator& ev, int workers = 0);

// ---- ranking ----------------------------------------------------------------------

// Probability that candidate i beats candidate j (positions, not ids).
using RelationFn = std::function<double(std::size_t i, std::size_t j)>;

inline constexpr const char* kTieBreakRule = "win-count-desc-then-id-asc";

struct RankingReport {
    std::vector<int> order;  // candidate ids, best first
    std::vector<int> ids;    // input order
    std::vector<int> wins;   // per input position
    std::string predictor;
    std::string tie_break = kTieBreakRule;
    std::size_t relation_calls = 0;
};

nlohmann::ordered_json to_json(const RankingReport& r);

// wins[i] = |{j != i : rel(i, j) > 0.5}|. With antisymmetric set, rel is
// called for i < j only and rel(j, i) is taken as 1 - rel(i, j).
RankingReport rank_candidates(const RelationFn& rel, const std::vector<int>& ids, const std::string& predictor,
                              bool antisymmetric = false);
// Ranks with a trained relation predictor; throws DecodeError on a
// malformed candidate.
RankingReport rank_candidates(const Predictor& p, const std::vector<EncodedConfig>& candidates,
                              const std::vector<int>& ids);

// Comparison oracle over known scores: 1 if scores[i] >= scores[j], else 0.
RelationFn score_oracle(std::vector<double> scores);

// Ordinal ranks (1 = best) of scores sorted descending, ties by position.
std::vector<double> ranks_descending(const std::vector<double>& scores);
// Ranks implied by an ordered id list.
std::vector<double> ranks_from_order(const std::vector<int>& order, const std::vector<int>& ids);

// Spearman coefficient: Pearson correlation of two rank vectors. Throws
// std::invalid_argument on a length mismatch or fewer than two entries.
double rank_correlation(const std::vector<double>& rank_a, const std::vector<double>& rank_b);

// ---- ablation ---------------------------------------------------------------------

struct ScatterPoint {
    int id = 0;
    double gt_rank = 0.0;
    double predicted_rank = 0.0;
};

struct PredictorAblation {
    std::string name;
    PredictorKind kind;
    std::vector<double> correlations;  // per seed
    double median = 0.0;
    std::vector<ScatterPoint> scatter;  // first seed
};

struct AblationReport {
    std::vector<std::uint64_t> seeds;
    std::vector<PredictorAblation> predictors;  // transformer, MLP, regressor
    const PredictorAblation& of(PredictorKind k) const;
};

nlohmann::ordered_json to_json(const AblationReport& r);

double median(std::vector<double> v);

// Trains the three predictors on the train split once per seed (predictor
// seed = seed) and ranks the val split with each.
AblationReport predictor_ablation(const TrainedRecordSet& records, const PredictorHyper& hyper,
                             const std::vector<std::uint64_t>& seeds);

struct Budgets {
    int n_initial = 100;
    int n_train = 75;
    int n_val = 25;
    int n_fresh = 100;
};

nlohmann::ordered_json to_json(const Budgets& b);
// Throws std::invalid_argument unless n_train + n_val == n_initial,
// n_train >= 1, n_val >= 2 and n_fresh >= 0.
void validate_budgets(const Budgets& b);

// Ranks the val split with the true-score comparison oracle. The report has
// a single "oracle" entry; its correlation is 1 when ids ascend with record
// order, since score ties then break the same way in both rankings.
AblationReport oracle_ablation(const TrainedRecordSet& records);

// One replication per seed: sample and evaluate n_initial candidates from
// that seed, then run predictor_ablation on them with the same seed.
AblationReport ablation_experiment(const Evaluator& ev, const Budgets& budgets, const PredictorHyper& hyper,
                                   const std::vector<std::uint64_t>& seeds, int workers = 0);

// Writes ablation.json and figures/scatter_<predictor>.csv under dir.
void write_ablation(const AblationReport& r, const std::filesystem::path& dir);

// ---- full search -----------------------------------------------------------------

struct SearchOptions {
    Budgets budgets;
    PredictorHyper hyper;
    std::uint64_t seed = 0;
    int workers = 0;
    // Empty: nothing is written.
    std::filesystem::path out_dir;
    // Copied into manifest.json under "config".
    nlohmann::ordered_json config_echo;
};

struct SearchResult {
    std::vector<CandidateRecord> candidates;  // initial then fresh, ids 0..
    RankingReport ranking;
    int best_id = 0;
    double val_correlation = 0.0;  // transformer on the val split
    TrainingCurve curve;
};

// The selected configuration is returned unevaluated when it comes from the
// fresh pool. Throws PredictorError on predictor divergence.
SearchResult run_search(const Evaluator& ev, const SearchOptions& opts);

}  // namespace relsearch

#pragma once

// Run configuration files. Sections: seed, budgets, evaluator,
// evaluator_params, predictor_hyper, paths. Unknown keys are rejected at
// every level; missing keys take defaults, and to_json echoes the fully
// resolved document.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "relsearch/predictor.hpp"
#include "relsearch/search.hpp"
#include "relsearch/train_eval.hpp"

namespace relsearch {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class EvaluatorKind { Surrogate, ToyTrain };

struct ToyDatasetParams {
    int count = 6;
    int size = 24;
    std::uint64_t seed = 0;  // defaults to the run seed
    bool binary = false;
};

struct RunConfig {
    std::uint64_t seed = 0;
    Budgets budgets;
    EvaluatorKind evaluator = EvaluatorKind::Surrogate;
    SurrogateOptions surrogate;  // seed defaults to the run seed
    ToyTrainOptions toy;
    ToyDatasetParams dataset;
    PredictorHyper hyper;  // seed defaults to the run seed
    std::filesystem::path out_dir = "run";
    // Optional saved dataset for the toy evaluator; generated when empty.
    std::filesystem::path dataset_dir;
};

// Toy-training runs default to the reduced budgets 20/15/5/20.
inline constexpr Budgets kToyTrainBudgets{20, 15, 5, 20};

RunConfig run_config_from_json(const nlohmann::json& j);
// Throws ConfigError for unreadable or malformed files.
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::ordered_json to_json(const RunConfig& c);

std::unique_ptr<Evaluator> make_evaluator(const RunConfig& c);

}  // namespace relsearch

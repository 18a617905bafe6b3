#include "relsearch/run_config.hpp"

#include <fstream>
#include <set>

namespace relsearch {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, v] : j.items()) {
        if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
    }
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

const nlohmann::json& section(const nlohmann::json& j, const char* key) {
    static const nlohmann::json empty = nlohmann::json::object();
    return j.contains(key) ? j.at(key) : empty;
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    try {
        reject_unknown(j, {"seed", "budgets", "evaluator", "evaluator_params", "predictor_hyper", "paths"},
                       "run config");
        take(j, "seed", c.seed);

        const std::string ev = j.value("evaluator", "surrogate");
        if (ev == "surrogate") {
            c.evaluator = EvaluatorKind::Surrogate;
        } else if (ev == "toytrain") {
            c.evaluator = EvaluatorKind::ToyTrain;
            c.budgets = kToyTrainBudgets;
        } else {
            throw ConfigError("evaluator must be surrogate or toytrain, got '" + ev + "'");
        }

        const nlohmann::json& b = section(j, "budgets");
        reject_unknown(b, {"n_initial", "n_train", "n_val", "n_fresh"}, "budgets");
        take(b, "n_initial", c.budgets.n_initial);
        take(b, "n_train", c.budgets.n_train);
        take(b, "n_val", c.budgets.n_val);
        take(b, "n_fresh", c.budgets.n_fresh);
        validate_budgets(c.budgets);

        const nlohmann::json& ep = section(j, "evaluator_params");
        c.surrogate.seed = c.seed;
        c.dataset.seed = c.seed;
        if (c.evaluator == EvaluatorKind::Surrogate) {
            reject_unknown(ep, {"tau", "seed"}, "evaluator_params");
            take(ep, "tau", c.surrogate.tau);
            take(ep, "seed", c.surrogate.seed);
            if (!(c.surrogate.tau >= 0.0)) throw ConfigError("tau must be >= 0");
        } else {
            reject_unknown(ep,
                           {"budget", "eval_every", "crop", "c1", "val_fraction", "dataset_count", "dataset_size",
                            "dataset_seed", "binary"},
                           "evaluator_params");
            take(ep, "budget", c.toy.budget);
            take(ep, "eval_every", c.toy.eval_every);
            take(ep, "crop", c.toy.crop);
            take(ep, "c1", c.toy.c1);
            take(ep, "val_fraction", c.toy.val_fraction);
            take(ep, "dataset_count", c.dataset.count);
            take(ep, "dataset_size", c.dataset.size);
            take(ep, "dataset_seed", c.dataset.seed);
            take(ep, "binary", c.dataset.binary);
            if (c.toy.budget < 0 || c.toy.eval_every < 1 || c.toy.c1 < 1 || c.dataset.count < 2 ||
                c.toy.crop < 1 || c.toy.crop > c.dataset.size) {
                throw ConfigError("toytrain parameters out of range");
            }
        }

        const nlohmann::json& ph = section(j, "predictor_hyper");
        c.hyper = predictor_hyper_from_json(ph);
        if (!ph.contains("seed")) c.hyper.seed = c.seed;

        const nlohmann::json& paths = section(j, "paths");
        reject_unknown(paths, {"out_dir", "dataset_dir"}, "paths");
        if (paths.contains("out_dir")) c.out_dir = paths.at("out_dir").get<std::string>();
        if (paths.contains("dataset_dir")) c.dataset_dir = paths.at("dataset_dir").get<std::string>();
    } catch (const ConfigError&) {
        throw;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed run config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["budgets"] = to_json(c.budgets);
    if (c.evaluator == EvaluatorKind::Surrogate) {
        j["evaluator"] = "surrogate";
        j["evaluator_params"] = {{"tau", c.surrogate.tau}, {"seed", c.surrogate.seed}};
    } else {
        j["evaluator"] = "toytrain";
        j["evaluator_params"] = {{"budget", c.toy.budget},
                                 {"eval_every", c.toy.eval_every},
                                 {"crop", c.toy.crop},
                                 {"c1", c.toy.c1},
                                 {"val_fraction", c.toy.val_fraction},
                                 {"dataset_count", c.dataset.count},
                                 {"dataset_size", c.dataset.size},
                                 {"dataset_seed", c.dataset.seed},
                                 {"binary", c.dataset.binary}};
    }
    j["predictor_hyper"] = to_json(c.hyper);
    j["paths"] = {{"out_dir", c.out_dir.string()}, {"dataset_dir", c.dataset_dir.string()}};
    return j;
}

std::unique_ptr<Evaluator> make_evaluator(const RunConfig& c) {
    if (c.evaluator == EvaluatorKind::Surrogate) return std::make_unique<SurrogateEvaluator>(c.surrogate);
    std::shared_ptr<const SyntheticDataset> data;
    if (!c.dataset_dir.empty()) {
        data = std::make_shared<const SyntheticDataset>(load_dataset(c.dataset_dir));
    } else {
        Rng rng(c.dataset.seed);
        data = std::make_shared<const SyntheticDataset>(
            make_synthetic_dataset(c.dataset.count, c.dataset.size, rng, c.dataset.binary));
    }
    return std::make_unique<ToyTrainEvaluator>(std::move(data), c.toy);
}

}  // namespace relsearch

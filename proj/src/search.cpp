#include "relsearch/search.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <omp.h>

namespace relsearch {

const char* candidate_status_name(CandidateStatus s) {
    switch (s) {
        case CandidateStatus::Sampled: return "sampled";
        case CandidateStatus::Evaluated: return "evaluated";
        case CandidateStatus::Failed: return "failed";
    }
    return "?";
}

const char* candidate_role_name(CandidateRole r) {
    switch (r) {
        case CandidateRole::Train: return "train";
        case CandidateRole::Val: return "val";
        case CandidateRole::Fresh: return "fresh";
    }
    return "?";
}

namespace {

template <typename Enum, int N>
Enum parse_enum(const std::string& s, const char* (*name)(Enum), const char* what) {
    for (int i = 0; i < N; ++i) {
        if (s == name(static_cast<Enum>(i))) return static_cast<Enum>(i);
    }
    throw std::invalid_argument(std::string("unknown ") + what + " '" + s + "'");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("short write to " + path.string());
}

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
    write_text(path, j.dump(2) + "\n");
}

}  // namespace

nlohmann::ordered_json to_json(const CandidateRecord& c) {
    nlohmann::ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["id"] = c.id;
    j["seed"] = c.seed;
    j["role"] = candidate_role_name(c.role);
    j["status"] = candidate_status_name(c.status);
    j["encoded"] = to_json(c.encoded);
    j["config"] = to_json(c.config);
    j["score"] = c.score ? to_json(*c.score) : nlohmann::ordered_json();
    if (c.status == CandidateStatus::Failed) j["error"] = c.error;
    return j;
}

CandidateRecord candidate_from_json(const nlohmann::json& j) {
    CandidateRecord c{0, configuration_from_json(j.at("config")), {}, std::nullopt, CandidateStatus::Sampled,
                      CandidateRole::Fresh, 0, {}};
    c.id = j.at("id").get<int>();
    c.seed = j.value("seed", std::uint64_t{0});
    c.encoded = encoded_from_json(j.at("encoded"));
    if (encode(c.config) != c.encoded) {
        throw std::invalid_argument("candidate " + std::to_string(c.id) + ": encoded vector does not match config");
    }
    c.status = parse_enum<CandidateStatus, 3>(j.value("status", "sampled"), candidate_status_name, "status");
    c.role = parse_enum<CandidateRole, 3>(j.value("role", "fresh"), candidate_role_name, "role");
    if (j.contains("score") && !j.at("score").is_null()) c.score = eval_score_from_json(j.at("score"));
    if (c.score.has_value() != (c.status == CandidateStatus::Evaluated)) {
        throw std::invalid_argument("candidate " + std::to_string(c.id) + ": score present iff evaluated");
    }
    c.error = j.value("error", "");
    return c;
}

std::vector<CandidateRecord> read_candidates_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::vector<CandidateRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        out.push_back(candidate_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

void write_candidates_jsonl(const std::filesystem::path& path, const std::vector<CandidateRecord>& cs) {
    std::string text;
    for (const auto& c : cs) text += to_json(c).dump() + "\n";
    write_text(path, text);
}

namespace {

// Draws candidates from a seed stream, skipping encodings already in `seen`.
std::vector<CandidateRecord> draw_candidates(int count, std::uint64_t seed, int first_id,
                                             std::set<EncodedConfig>& seen) {
    if (count < 0) throw std::invalid_argument("candidate count must be >= 0");
    Rng stream(seed);
    std::vector<CandidateRecord> out;
    while (static_cast<int>(out.size()) < count) {
        const std::uint64_t s = stream();
        Rng rng(s);
        Configuration config = sample_configuration(rng);
        EncodedConfig enc = encode(config);
        if (!seen.insert(enc).second) continue;
        out.push_back({first_id + static_cast<int>(out.size()), std::move(config), std::move(enc), std::nullopt,
                       CandidateStatus::Sampled, CandidateRole::Fresh, s, {}});
    }
    return out;
}

}  // namespace

std::vector<CandidateRecord> sample_candidates(int count, std::uint64_t seed, int first_id) {
    std::set<EncodedConfig> seen;
    return draw_candidates(count, seed, first_id, seen);
}

TrainedRecordSet to_records(const std::vector<CandidateRecord>& cs) {
    TrainedRecordSet out;
    for (const auto& c : cs) {
        if (c.role == CandidateRole::Fresh) continue;
        out.push_back({c.id, c.config, c.encoded, EvalScore{c.effective_score(), c.score ? c.score->iterations_used : 0,
                                                            c.score ? c.score->diverged : false},
                       c.role == CandidateRole::Train ? Split::Train : Split::Val});
    }
    return out;
}

// ---- evaluators ------------------------------------------------------------------

EvalScore SurrogateEvaluator::evaluate(const Configuration& config, std::uint64_t) const {
    return surrogate_evaluate(config, opts_);
}

nlohmann::ordered_json SurrogateEvaluator::params() const {
    return {{"tau", opts_.tau}, {"seed", opts_.seed}};
}

EvalScore ToyTrainEvaluator::evaluate(const Configuration& config, std::uint64_t seed) const {
    // Decorrelated from the stream that sampled the configuration.
    Rng rng(seed ^ 0x7e57b10bULL);
    return toy_train_evaluate(config, *data_, opts_, rng);
}

nlohmann::ordered_json ToyTrainEvaluator::params() const {
    return {{"budget", opts_.budget},
            {"eval_every", opts_.eval_every},
            {"crop", opts_.crop},
            {"c1", opts_.c1},
            {"val_fraction", opts_.val_fraction},
            {"dataset_seed", data_->seed},
            {"dataset_size", data_->size},
            {"dataset_count", data_->volumes.size()}};
}

void evaluate_candidates(std::vector<CandidateRecord>& cs, const Evaluator& ev, int workers) {
    const int threads = workers > 0 ? workers : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(threads)
    for (long k = 0; k < static_cast<long>(cs.size()); ++k) {
        CandidateRecord& c = cs[static_cast<std::size_t>(k)];
        try {
            c.score = ev.evaluate(c.config, c.seed);
            c.status = CandidateStatus::Evaluated;
            c.error.clear();
        } catch (const std::exception& e) {
            c.score.reset();
            c.status = CandidateStatus::Failed;
            c.error = e.what();
        }
    }
}

// ---- ranking ----------------------------------------------------------------------

nlohmann::ordered_json to_json(const RankingReport& r) {
    nlohmann::ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["predictor"] = r.predictor;
    j["tie_break"] = r.tie_break;
    j["relation_calls"] = r.relation_calls;
    std::map<int, int> win_by_id;
    for (std::size_t k = 0; k < r.ids.size(); ++k) win_by_id[r.ids[k]] = r.wins[k];
    nlohmann::ordered_json ranked = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < r.order.size(); ++k) {
        ranked.push_back({{"rank", k + 1}, {"id", r.order[k]}, {"wins", win_by_id.at(r.order[k])}});
    }
    j["ranking"] = ranked;
    return j;
}

RankingReport rank_candidates(const RelationFn& rel, const std::vector<int>& ids, const std::string& predictor,
                              bool antisymmetric) {
    const std::size_t k = ids.size();
    if (k < 2) throw std::invalid_argument("ranking needs at least two candidates");
    RankingReport r;
    r.ids = ids;
    r.predictor = predictor;
    r.wins.assign(k, 0);
    for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = antisymmetric ? i + 1 : 0; j < k; ++j) {
            if (i == j) continue;
            const double p = rel(i, j);
            ++r.relation_calls;
            if (p > 0.5) ++r.wins[i];
            if (antisymmetric && 1.0 - p > 0.5) ++r.wins[j];
        }
    }
    std::vector<std::size_t> pos(k);
    std::iota(pos.begin(), pos.end(), 0);
    std::sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) {
        if (r.wins[a] != r.wins[b]) return r.wins[a] > r.wins[b];
        return ids[a] < ids[b];
    });
    for (std::size_t p : pos) r.order.push_back(ids[p]);
    return r;
}

RankingReport rank_candidates(const Predictor& p, const std::vector<EncodedConfig>& candidates,
                              const std::vector<int>& ids) {
    if (candidates.size() != ids.size()) throw std::invalid_argument("one id per candidate required");
    const bool anti = p.hyper.antisymmetric;
    const auto m = relation_matrix(p, candidates, anti);
    return rank_candidates([&](std::size_t i, std::size_t j) { return m[i][j]; }, ids, predictor_kind_name(p.kind),
                           anti);
}

RelationFn score_oracle(std::vector<double> scores) {
    return [s = std::move(scores)](std::size_t i, std::size_t j) { return s.at(i) >= s.at(j) ? 1.0 : 0.0; };
}

std::vector<double> ranks_descending(const std::vector<double>& scores) {
    std::vector<std::size_t> pos(scores.size());
    std::iota(pos.begin(), pos.end(), 0);
    std::stable_sort(pos.begin(), pos.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<double> ranks(scores.size());
    for (std::size_t r = 0; r < pos.size(); ++r) ranks[pos[r]] = static_cast<double>(r + 1);
    return ranks;
}

std::vector<double> ranks_from_order(const std::vector<int>& order, const std::vector<int>& ids) {
    std::map<int, double> rank_of;
    for (std::size_t r = 0; r < order.size(); ++r) rank_of[order[r]] = static_cast<double>(r + 1);
    std::vector<double> out;
    for (int id : ids) out.push_back(rank_of.at(id));
    return out;
}

double rank_correlation(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("rank vectors differ in length");
    if (a.size() < 2) throw std::invalid_argument("rank correlation needs at least two entries");
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// ---- ablation ---------------------------------------------------------------------

double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median of nothing");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

const PredictorAblation& AblationReport::of(PredictorKind k) const {
    for (const auto& p : predictors) {
        if (p.kind == k) return p;
    }
    throw std::out_of_range("predictor not in ablation report");
}

nlohmann::ordered_json to_json(const AblationReport& r) {
    nlohmann::ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["seeds"] = r.seeds;
    nlohmann::ordered_json preds = nlohmann::ordered_json::object();
    for (const auto& p : r.predictors) {
        preds[p.name] = {{"correlations", p.correlations}, {"median", p.median}};
    }
    j["predictors"] = preds;
    j["medians"] = nlohmann::ordered_json::object();
    for (const auto& p : r.predictors) j["medians"][p.name] = p.median;
    return j;
}

namespace {

struct ValSplit {
    std::vector<int> ids;
    std::vector<EncodedConfig> enc;
    std::vector<double> scores;
};

ValSplit val_split(const TrainedRecordSet& records) {
    ValSplit v;
    for (const auto& r : records) {
        if (r.split != Split::Val) continue;
        v.ids.push_back(r.id);
        v.enc.push_back(r.encoded);
        v.scores.push_back(r.score.dice);
    }
    if (v.ids.size() < 2) throw std::invalid_argument("ranking the val split needs at least two records");
    return v;
}

}  // namespace

AblationReport oracle_ablation(const TrainedRecordSet& records) {
    const ValSplit v = val_split(records);
    const std::vector<double> gt = ranks_descending(v.scores);
    const std::vector<double> predicted =
        ranks_from_order(rank_candidates(score_oracle(v.scores), v.ids, "oracle").order, v.ids);
    PredictorAblation pa{"oracle", PredictorKind::TransformerRelation, {rank_correlation(gt, predicted)}, 0.0, {}};
    pa.median = pa.correlations.front();
    for (std::size_t i = 0; i < v.ids.size(); ++i) pa.scatter.push_back({v.ids[i], gt[i], predicted[i]});
    return AblationReport{{}, {pa}};
}

AblationReport predictor_ablation(const TrainedRecordSet& records, const PredictorHyper& hyper,
                             const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw std::invalid_argument("ablation needs at least one seed");
    const ValSplit v = val_split(records);
    const std::vector<int>& val_ids = v.ids;
    const std::vector<EncodedConfig>& val_enc = v.enc;
    const std::vector<double> gt = ranks_descending(v.scores);
    const auto pairs = build_pair_dataset(records, Split::Train);

    AblationReport rep;
    rep.seeds = seeds;
    for (PredictorKind k :
         {PredictorKind::TransformerRelation, PredictorKind::MlpRelation, PredictorKind::AccuracyRegressor}) {
        rep.predictors.push_back({predictor_kind_name(k), k, {}, 0.0, {}});
    }
    for (std::uint64_t seed : seeds) {
        PredictorHyper h = hyper;
        h.seed = seed;
        for (auto& pa : rep.predictors) {
            std::vector<double> predicted;
            if (pa.kind == PredictorKind::AccuracyRegressor) {
                const TrainedPredictor t = train_accuracy_regressor(records, h);
                std::vector<double> est;
                for (const auto& v : val_enc) est.push_back(predict_accuracy(t.model, v));
                predicted = ranks_descending(est);
            } else {
                const TrainedPredictor t = pa.kind == PredictorKind::TransformerRelation
                                               ? train_relation_predictor(pairs, h)
                                               : train_mlp_baseline(pairs, h);
                predicted = ranks_from_order(rank_candidates(t.model, val_enc, val_ids).order, val_ids);
            }
            pa.correlations.push_back(rank_correlation(gt, predicted));
            if (pa.scatter.empty()) {
                for (std::size_t i = 0; i < val_ids.size(); ++i) pa.scatter.push_back({val_ids[i], gt[i], predicted[i]});
            }
        }
    }
    for (auto& pa : rep.predictors) pa.median = median(pa.correlations);
    return rep;
}

nlohmann::ordered_json to_json(const Budgets& b) {
    return {{"n_initial", b.n_initial}, {"n_train", b.n_train}, {"n_val", b.n_val}, {"n_fresh", b.n_fresh}};
}

void validate_budgets(const Budgets& b) {
    if (b.n_train < 1 || b.n_val < 2 || b.n_fresh < 0 || b.n_train + b.n_val != b.n_initial) {
        throw std::invalid_argument("budgets need n_train >= 1, n_val >= 2, n_fresh >= 0 and "
                                    "n_train + n_val == n_initial");
    }
}

namespace {

std::vector<CandidateRecord> initial_candidates(const Evaluator& ev, const Budgets& b, std::uint64_t seed,
                                                int workers, std::set<EncodedConfig>& seen) {
    std::vector<CandidateRecord> cs = draw_candidates(b.n_initial, seed, 0, seen);
    for (std::size_t k = 0; k < cs.size(); ++k) {
        cs[k].role = static_cast<int>(k) < b.n_train ? CandidateRole::Train : CandidateRole::Val;
    }
    evaluate_candidates(cs, ev, workers);
    return cs;
}

}  // namespace

AblationReport ablation_experiment(const Evaluator& ev, const Budgets& budgets, const PredictorHyper& hyper,
                                   const std::vector<std::uint64_t>& seeds, int workers) {
    validate_budgets(budgets);
    if (seeds.empty()) throw std::invalid_argument("ablation needs at least one seed");
    AblationReport total;
    total.seeds = seeds;
    for (std::uint64_t seed : seeds) {
        std::set<EncodedConfig> seen;
        const auto cs = initial_candidates(ev, budgets, seed, workers, seen);
        const AblationReport one = predictor_ablation(to_records(cs), hyper, {seed});
        if (total.predictors.empty()) {
            total.predictors = one.predictors;
            continue;
        }
        for (std::size_t k = 0; k < one.predictors.size(); ++k) {
            total.predictors[k].correlations.push_back(one.predictors[k].correlations.front());
        }
    }
    for (auto& pa : total.predictors) pa.median = median(pa.correlations);
    return total;
}

namespace {

void write_scatter(const std::filesystem::path& path, const std::vector<ScatterPoint>& pts) {
    std::ostringstream s;
    s << "id,gt_rank,predicted_rank\n";
    for (const auto& p : pts) s << p.id << ',' << p.gt_rank << ',' << p.predicted_rank << '\n';
    write_text(path, s.str());
}

}  // namespace

void write_ablation(const AblationReport& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "figures");
    write_json(dir / "ablation.json", to_json(r));
    for (const auto& p : r.predictors) {
        write_scatter(dir / "figures" / ("scatter_" + p.name + ".csv"), p.scatter);
    }
}

// ---- full search -----------------------------------------------------------------

namespace {

constexpr std::uint64_t kFreshStream = 0xf7e54c0ffeeULL;

nlohmann::ordered_json index_maps() {
    nlohmann::ordered_json m;
    for (int i = 0; i < kOpKindCount; ++i) m["op"].push_back(op_kind_name(static_cast<OpKind>(i)));
    for (int i = 0; i < kAugCandidates; ++i) m["augmentation"].push_back(aug_kind_name(static_cast<AugKind>(i)));
    for (double lr : kLearningRates) m["learning_rate"].push_back(lr);
    for (int i = 0; i < kSchedChoices; ++i) {
        m["scheduler"].push_back(scheduler_kind_name(scheduler_kind_from_index(i)));
    }
    for (int i = 0; i < kLossChoices; ++i) m["loss"].push_back(loss_kind_name(loss_kind_from_index(i)));
    for (int i = 0; i < kOptChoices; ++i) m["optimizer"].push_back(optimizer_kind_name(optimizer_kind_from_index(i)));
    return m;
}

void write_pairs(const std::filesystem::path& path, const std::vector<PairExample>& pairs) {
    std::string text;
    for (const auto& p : pairs) {
        nlohmann::ordered_json j;
        j["schema_version"] = kSchemaVersion;
        const nlohmann::ordered_json body = to_json(p);
        for (const auto& [k, v] : body.items()) j[k] = v;
        text += j.dump() + "\n";
    }
    write_text(path, text);
}

}  // namespace

SearchResult run_search(const Evaluator& ev, const SearchOptions& opts) {
    const Budgets& b = opts.budgets;
    validate_budgets(b);

    std::set<EncodedConfig> seen;
    SearchResult res;
    res.candidates = initial_candidates(ev, b, opts.seed, opts.workers, seen);
    const TrainedRecordSet records = to_records(res.candidates);
    const auto train_pairs = build_pair_dataset(records, Split::Train);
    const TrainedPredictor tp = train_relation_predictor(train_pairs, opts.hyper);
    res.curve = tp.curve;

    const ValSplit val = val_split(records);
    const std::vector<int>& val_ids = val.ids;
    const RankingReport val_rank = rank_candidates(tp.model, val.enc, val_ids);
    const std::vector<double> val_gt = ranks_descending(val.scores);
    const std::vector<double> val_pred = ranks_from_order(val_rank.order, val_ids);
    res.val_correlation = rank_correlation(val_gt, val_pred);

    auto fresh = draw_candidates(b.n_fresh, opts.seed ^ kFreshStream, b.n_initial, seen);
    for (auto& c : fresh) res.candidates.push_back(std::move(c));

    std::vector<int> ids;
    std::vector<EncodedConfig> encs;
    for (const auto& c : res.candidates) {
        ids.push_back(c.id);
        encs.push_back(c.encoded);
    }
    res.ranking = rank_candidates(tp.model, encs, ids);
    res.best_id = res.ranking.order.front();

    if (opts.out_dir.empty()) return res;
    const auto& dir = opts.out_dir;
    std::filesystem::create_directories(dir / "figures");

    nlohmann::ordered_json manifest;
    manifest["schema_version"] = kSchemaVersion;
    manifest["version"] = kVersion;
    manifest["seed"] = opts.seed;
    manifest["budgets"] = to_json(b);
    manifest["evaluator"] = {{"name", ev.name()}, {"params", ev.params()}};
    manifest["predictor_hyper"] = to_json(opts.hyper);
    manifest["index_maps"] = index_maps();
    manifest["checkpoint_format"] = {{"magic", "TAPR"}, {"version", 1}};
    if (!opts.config_echo.is_null()) manifest["config"] = opts.config_echo;
    write_json(dir / "manifest.json", manifest);

    write_candidates_jsonl(dir / "candidates.jsonl", res.candidates);
    write_pairs(dir / "pairs.train.jsonl", train_pairs);
    write_pairs(dir / "pairs.val.jsonl", build_pair_dataset(records, Split::Val));
    save_checkpoint(tp.model, dir / "predictor.bin",
                    {{"train_pairs", train_pairs.size()},
                     {"final_loss", tp.curve.points.empty() ? 0.0 : tp.curve.points.back().second}});

    nlohmann::ordered_json ranking = to_json(res.ranking);
    ranking["selected"] = res.best_id;
    const CandidateRecord& best = res.candidates[static_cast<std::size_t>(res.best_id)];
    ranking["selected_role"] = candidate_role_name(best.role);
    ranking["selected_evaluated"] = best.status == CandidateStatus::Evaluated;
    ranking["val_spearman"] = res.val_correlation;
    write_json(dir / "ranking.json", ranking);

    write_scatter(dir / "figures" / "val_scatter_transformer_relation.csv", [&] {
        std::vector<ScatterPoint> pts;
        for (std::size_t i = 0; i < val_ids.size(); ++i) pts.push_back({val_ids[i], val_gt[i], val_pred[i]});
        return pts;
    }());
    std::ostringstream curve;
    curve << "iteration,loss\n";
    curve.precision(17);
    for (const auto& [it, loss] : res.curve.points) curve << it << ',' << loss << '\n';
    write_text(dir / "figures" / "training_curve.csv", curve.str());
    return res;
}

}  // namespace relsearch

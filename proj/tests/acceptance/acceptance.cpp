// Desk-scale acceptance run. One PASS/FAIL line per criterion with the
// measured value, the threshold and the runtime against its limit. Exit code
// is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relsearch/encoding.hpp"
#include "relsearch/net_builder.hpp"
#include "relsearch/predictor.hpp"
#include "relsearch/search.hpp"
#include "relsearch/search_space.hpp"
#include "relsearch/train_eval.hpp"
#include "support.hpp"

using namespace relsearch;
namespace fs = std::filesystem;
using test_support::random_tensor;

namespace {

// Predictor iterations for criteria 7 and 8. Each transformer step costs
// about 60 ms on one core, so the default of 10000 does not fit the limits.
constexpr int kDeskIterations = 500;

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Clock {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

int failures = 0;

// limit <= 0 means no runtime bound.
void report(int n, const std::string& name, double limit, const std::function<Outcome()>& body) {
    Clock c;
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = c.seconds();
    const bool in_time = limit <= 0 || secs < limit;
    const bool pass = o.pass && in_time;
    if (!pass) ++failures;
    std::printf("%s %2d %-28s %s | %.1fs", pass ? "PASS" : "FAIL", n, name.c_str(), o.detail.c_str(), secs);
    if (limit > 0) std::printf(" (limit %.0fs)", limit);
    std::printf("\n");
    std::fflush(stdout);
}

// ---- 1 ------------------------------------------------------------------------

Outcome encoding_bijection() {
    Rng rng(1);
    int bad = 0, short_or_long = 0;
    for (int k = 0; k < 100000; ++k) {
        const Configuration c = sample_configuration(rng);
        const EncodedConfig e = encode(c);
        if (e.size() < kMinEncodedLength || e.size() > kMaxEncodedLength) ++short_or_long;
        if (!(decode(e) == c) || !(encode(decode(e)) == e)) ++bad;
    }
    return {bad == 0 && short_or_long == 0,
            "100000 round-trips, mismatches " + std::to_string(bad) + ", lengths outside 34..69 " +
                std::to_string(short_or_long)};
}

// ---- 2 ------------------------------------------------------------------------

std::vector<ArchitectureSpec> arch_mutations(const ArchitectureSpec& a) {
    std::vector<ArchitectureSpec> out;
    const int n = a.block_count();
    for (int i = 0; i < n; ++i) {
        const auto at = [&](auto fn) {
            ArchitectureSpec m = a;
            fn(m.blocks[static_cast<std::size_t>(i)]);
            out.push_back(std::move(m));
        };
        at([&](BlockSpec& b) { b.block_id = i + 1; });
        at([](BlockSpec& b) { b.op = static_cast<OpKind>(kOpKindCount); });
        at([](BlockSpec& b) { b.op = static_cast<OpKind>(-1); });
        at([](BlockSpec& b) { b.level = kMinLevel - 1; });
        at([](BlockSpec& b) { b.level = kMaxLevel + 1; });
        at([&](BlockSpec& b) { b.pred1 = i; });
        at([&](BlockSpec& b) { b.pred2 = i; });
        at([](BlockSpec& b) { b.pred1 = -2; });
        at([](BlockSpec& b) { b.pred2 = -2; });
    }
    ArchitectureSpec shorter = a;
    shorter.blocks.resize(kMinBlocks - 1);
    out.push_back(shorter);
    ArchitectureSpec longer = a;
    while (longer.block_count() <= kMaxBlocks) {
        const int i = longer.block_count();
        longer.blocks.push_back({i, OpKind::Residual3D, kMinLevel, i - 1, i - 2});
    }
    out.push_back(longer);
    return out;
}

Outcome validity_fuzz() {
    Rng rng(2);
    long invalid = 0, accepted_mutants = 0, mutants = 0;
    for (int k = 0; k < 100000; ++k) {
        const Configuration c = sample_configuration(rng);
        if (!validate_configuration(c.arch(), c.aug(), c.hp()).ok()) ++invalid;
        for (const ArchitectureSpec& m : arch_mutations(c.arch())) {
            ++mutants;
            if (validate_architecture(m).ok()) ++accepted_mutants;
        }
        for (std::size_t s = 0; s < c.aug().slots.size(); ++s) {
            for (int v : {-1, kAugCandidates}) {
                AugmentationPlan m = c.aug();
                m.slots[s] = v;
                ++mutants;
                if (validate_augmentation(m).ok()) ++accepted_mutants;
            }
        }
        const std::pair<int TrainHyperParams::*, int> fields[] = {{&TrainHyperParams::lr_idx, kLrChoices},
                                                                  {&TrainHyperParams::sched_idx, kSchedChoices},
                                                                  {&TrainHyperParams::loss_idx, kLossChoices},
                                                                  {&TrainHyperParams::opt_idx, kOptChoices}};
        for (const auto& [field, count] : fields) {
            for (int v : {-1, count}) {
                TrainHyperParams m = c.hp();
                m.*field = v;
                ++mutants;
                if (validate_hyperparams(m).ok()) ++accepted_mutants;
            }
        }
    }
    return {invalid == 0 && accepted_mutants == 0,
            "100000 sampled, invalid " + std::to_string(invalid) + "; " + std::to_string(mutants) +
                " mutants, accepted " + std::to_string(accepted_mutants)};
}

// ---- 3 ------------------------------------------------------------------------

Outcome shape_soundness() {
    Rng rng(3);
    NetOptions opts;
    opts.c1 = 4;
    int wrong_shape = 0;
    double worst = 0.0;
    for (int k = 0; k < 200; ++k) {
        const ArchitectureSpec a = sample_architecture(rng);
        const NetworkGraph g = build_network(a, opts, rng);
        const Tensor out = forward(g, random_tensor({1, 16, 16, 16}, rng, 0.0, 1.0));
        if (out.shape != Shape{3, 16, 16, 16}) {
            ++wrong_shape;
            continue;
        }
        const std::size_t v = 16 * 16 * 16;
        for (std::size_t i = 0; i < v; ++i) {
            double s = 0.0;
            for (std::size_t c = 0; c < 3; ++c) s += out[c * v + i];
            worst = std::max(worst, std::abs(s - 1.0));
        }
    }
    return {wrong_shape == 0 && worst <= 1e-5,
            "200 architectures, wrong shapes " + std::to_string(wrong_shape) + ", max |sum - 1| " +
                fmt("%.2e", worst) + " (tol 1e-5)"};
}

// ---- 4 ------------------------------------------------------------------------

// Central differences grouped by the leading role component (stem, blockN, head).
std::map<std::string, double> grouped_fd(ParamSet& params, const std::function<double()>& loss, Rng& rng,
                                         std::size_t per_tensor) {
    std::map<std::string, double> worst;
    for (auto& p : params.tensors()) {
        const std::string group = p.role.substr(0, p.role.find('.'));
        std::uniform_int_distribution<std::size_t> d(0, p.value.numel() - 1);
        const std::size_t picks = std::min(per_tensor, p.value.numel());
        for (std::size_t k = 0; k < picks; ++k) {
            const std::size_t i = picks == p.value.numel() ? k : d(rng);
            const double saved = p.value[i];
            p.value[i] = saved + 1e-5;
            const double up = loss();
            p.value[i] = saved - 1e-5;
            const double down = loss();
            p.value[i] = saved;
            const double e = test_support::rel_error(p.grad[i], (up - down) / 2e-5);
            worst[group] = std::max(worst[group], e);
        }
    }
    return worst;
}

Outcome gradient_fidelity() {
    std::ostringstream detail;
    double overall = 0.0;
    double head = 0.0;
    for (int op = 0; op < kOpKindCount; ++op) {
        Rng rng(40 + static_cast<unsigned>(op));
        ArchitectureSpec a;
        for (int i = 0; i < kMinBlocks; ++i) {
            a.blocks.push_back({i, static_cast<OpKind>(op), 2, i == 0 ? -1 : i - 1, i <= 1 ? -1 : i - 1});
        }
        NetOptions o;
        o.c1 = 2;
        NetworkGraph g = build_network(a, o, rng);
        const Tensor vol = random_tensor({1, 8, 8, 8}, rng);
        const Tensor w = random_tensor({3, 8, 8, 8}, rng);
        g.params.zero_grad();
        backward(g, vol, w);
        const auto loss = [&] {
            const Tensor out = forward(g, vol);
            double s = 0.0;
            for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * w[i];
            return s;
        };
        double blocks = 0.0;
        for (const auto& [group, e] : grouped_fd(g.params, loss, rng, 4)) {
            if (group == "head") head = std::max(head, e);
            if (group.rfind("block", 0) == 0) blocks = std::max(blocks, e);
            overall = std::max(overall, e);
        }
        detail << op_kind_name(static_cast<OpKind>(op)) << " " << fmt("%.1e", blocks) << ", ";
    }
    detail << "head " << fmt("%.1e", head) << ", ";

    Rng rng(47);
    double losses = 0.0;
    for (int idx = 0; idx < kLossChoices; ++idx) {
        Tensor p = random_tensor({3, 3, 3, 3}, rng, 0.05, 1.0);
        for (std::size_t i = 0; i < 27; ++i) {
            const double s = p[i] + p[27 + i] + p[54 + i];
            for (std::size_t c = 0; c < 3; ++c) p[c * 27 + i] /= s;
        }
        std::vector<std::uint8_t> label(27);
        std::uniform_int_distribution<int> cls(0, 2);
        for (auto& l : label) l = static_cast<std::uint8_t>(cls(rng));
        const Tensor onehot = one_hot(label, 3, 3, 3, 3);
        ParamSet ps;
        ps.add("p", p.shape);
        ps[0].value = p;
        Tape t;
        ParamBinding bind(t, ps);
        t.backward(ad::combined_loss(t, idx, bind(0), onehot));
        losses = std::max(losses, test_support::fd_check_tensor(p, ps[0].grad,
                                                                [&] { return combined_loss(idx, p, onehot); }));
    }
    overall = std::max(overall, losses);
    detail << "5 losses " << fmt("%.1e", losses) << ", ";

    TrainedRecordSet recs;
    Rng crng(48);
    for (int i = 0; i < 4; ++i) {
        Configuration c = sample_configuration(crng);
        EncodedConfig e = encode(c);
        const EvalScore s = surrogate_evaluate(c);
        recs.push_back({i, std::move(c), std::move(e), s, Split::Train});
    }
    const auto pairs = build_pair_dataset(recs, Split::Train);
    PredictorHyper h;
    h.d_model = 16;
    h.ffn = 32;
    h.head_hidden = 16;
    h.mlp_hidden = 32;
    h.seed = 49;
    double predictor = 0.0;
    for (PredictorKind kind :
         {PredictorKind::TransformerRelation, PredictorKind::MlpRelation, PredictorKind::AccuracyRegressor}) {
        Predictor p = make_predictor(kind, h);
        predictor = std::max(predictor, gradient_check(p, pairs[1], 12, 50).max_rel_error);
    }
    overall = std::max(overall, predictor);
    detail << "predictors " << fmt("%.1e", predictor) << "; max " << fmt("%.2e", overall) << " (tol 1e-4)";
    return {overall < 1e-4, detail.str()};
}

// ---- 5 ------------------------------------------------------------------------

Outcome pair_arithmetic() {
    const std::vector<double> grid = {0.0, 0.1, 0.25, 0.5, 0.5000001, 0.75, 0.9, 1.0};
    int bad = 0;
    for (double a : grid) {
        for (double b : grid) {
            const int want = a >= b ? 1 : 0;
            if (make_gt(a, b) != want) ++bad;
            if (a != b && make_gt(a, b) + make_gt(b, a) != 1) ++bad;
            if (a == b && make_gt(a, b) != 1) ++bad;
        }
    }
    Rng rng(5);
    TrainedRecordSet recs;
    for (int i = 0; i < 20; ++i) {
        Configuration c = sample_configuration(rng);
        EncodedConfig e = encode(c);
        const EvalScore s = surrogate_evaluate(c);
        recs.push_back({i, std::move(c), std::move(e), s, Split::Train});
    }
    const auto pairs = build_pair_dataset(recs, Split::Train);
    int label_errors = 0;
    for (const PairExample& p : pairs) {
        const double a = recs[static_cast<std::size_t>(p.i)].score.dice;
        const double b = recs[static_cast<std::size_t>(p.j)].score.dice;
        if (p.gt != (a >= b ? 1 : 0)) ++label_errors;
    }
    return {bad == 0 && pairs.size() == 400 && label_errors == 0,
            "grid violations " + std::to_string(bad) + ", 20 records -> " + std::to_string(pairs.size()) +
                " pairs (want 400), label errors " + std::to_string(label_errors)};
}

// ---- 6 ------------------------------------------------------------------------

Outcome oracle_ranking() {
    const std::vector<CandidateRecord> cs = sample_candidates(200, 6, 0);
    std::vector<double> scores;
    std::vector<int> ids;
    for (const CandidateRecord& c : cs) {
        scores.push_back(surrogate_evaluate(c.config).dice);
        ids.push_back(c.id);
    }
    const RankingReport r = rank_candidates(score_oracle(scores), ids, "oracle");
    std::vector<int> brute(ids);
    std::stable_sort(brute.begin(), brute.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    });
    std::size_t ties = 0;
    std::vector<double> sorted(scores);
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 1; i < sorted.size(); ++i) ties += sorted[i] == sorted[i - 1];
    return {r.order == brute, std::string(r.order == brute ? "order identical" : "order differs") +
                                " to the brute-force sort over 200 (" + std::to_string(ties) + " tied scores)"};
}

// ---- 7 ------------------------------------------------------------------------

Outcome ablation() {
    PredictorHyper h;
    h.iterations = kDeskIterations;
    const SurrogateEvaluator ev(SurrogateOptions{0.02, 0});
    const AblationReport r = ablation_experiment(ev, Budgets{}, h, {0, 1, 2, 3, 4});
    const double t = r.of(PredictorKind::TransformerRelation).median;
    const double m = r.of(PredictorKind::MlpRelation).median;
    const double a = r.of(PredictorKind::AccuracyRegressor).median;
    std::ostringstream d;
    d << "median spearman T " << fmt("%.3f", t) << " M " << fmt("%.3f", m) << " R " << fmt("%.3f", a)
      << " (want T >= 0.5, T > M > R; " << kDeskIterations << " iterations)";
    return {t >= 0.5 && t > m && m > a, d.str()};
}

// ---- 8 ------------------------------------------------------------------------

Outcome search_quality() {
    std::vector<double> ranks;
    std::ostringstream d;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const SurrogateOptions so{0.02, s};
        const SurrogateEvaluator ev(so);
        SearchOptions o;
        o.seed = s;
        o.hyper.iterations = kDeskIterations;
        o.hyper.seed = s;
        const SearchResult r = run_search(ev, o);
        std::vector<double> truth;
        for (const CandidateRecord& c : r.candidates) truth.push_back(surrogate_evaluate(c.config, so).dice);
        ranks.push_back(ranks_descending(truth)[static_cast<std::size_t>(r.best_id)]);
        d << (s ? " " : "true ranks ") << ranks.back();
    }
    const double med = median(ranks);
    d << ", median " << med << " of 200 (want <= 20)";
    return {med <= 20.0, d.str()};
}

// ---- 9 ------------------------------------------------------------------------

Outcome toy_training() {
    Rng data(9);
    const SyntheticDataset ds = make_synthetic_dataset(8, 16, data);
    ArchitectureSpec a;
    a.blocks = {{0, OpKind::Residual3D, 2, -1, -1},
                {1, OpKind::Residual3D, 3, 0, -1},
                {2, OpKind::Residual3D, 2, 1, 0},
                {3, OpKind::Residual3D, 3, 2, 1},
                {4, OpKind::Residual3D, 2, 3, 2}};
    const Configuration c(a, AugmentationPlan{{0, 1, 2, 5, 6}}, TrainHyperParams{2, 0, 3, 0});
    ToyTrainOptions o;
    o.budget = 200;
    Rng r1(91), r2(91);
    const EvalScore s1 = toy_train_evaluate(c, ds, o, r1);
    const EvalScore s2 = toy_train_evaluate(c, ds, o, r2);
    // All-background baseline, maximised over every volume so it bounds the
    // mean over whichever volumes land in the validation split.
    double baseline = 0.0;
    for (const SyntheticVolume& v : ds.volumes) {
        Tensor probs({3, 16, 16, 16}, 0.0);
        for (std::size_t i = 0; i < v.label.size(); ++i) probs[i] = 1.0;
        baseline = std::max(baseline, foreground_dice(probs, v.label));
    }
    return {s1.dice > baseline && s1 == s2,
            "dice " + fmt("%.4f", s1.dice) + " vs background " + fmt("%.4f", baseline) + ", rerun " +
                (s1 == s2 ? "identical" : "differs (" + fmt("%.6f", s2.dice) + ")")};
}

// ---- 10 -----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome reproducibility() {
    const fs::path dir = fs::temp_directory_path() / "relsearch_acceptance";
    fs::remove_all(dir);
    fs::create_directories(dir);
    const nlohmann::json cfg = {
        {"seed", 10},
        {"budgets", {{"n_initial", 20}, {"n_train", 15}, {"n_val", 5}, {"n_fresh", 20}}},
        {"evaluator", "surrogate"},
        {"predictor_hyper", {{"iterations", 60}, {"d_model", 16}, {"ffn", 32}}},
        {"paths", {{"out_dir", (dir / "run").string()}}}};
    std::ofstream(dir / "config.json") << cfg.dump(2);
    const std::string cmd = std::string(RELSEARCH_BINARY) + " search --config " + (dir / "config.json").string() +
                            " > " + (dir / "log.txt").string() + " 2>&1";
    std::string first[2];
    for (int run = 0; run < 2; ++run) {
        if (std::system(cmd.c_str()) != 0) return {false, "search exited non-zero: " + slurp(dir / "log.txt")};
        const std::string cand = slurp(dir / "run" / "candidates.jsonl");
        const std::string rank = slurp(dir / "run" / "ranking.json");
        if (run == 0) {
            first[0] = cand;
            first[1] = rank;
            fs::remove_all(dir / "run");
        } else {
            const bool same = !cand.empty() && cand == first[0] && rank == first[1];
            return {same, std::string("candidates.jsonl ") + (cand == first[0] ? "identical" : "differs") +
                              ", ranking.json " + (rank == first[1] ? "identical" : "differs")};
        }
    }
    return {false, "unreachable"};
}

}  // namespace

int main() {
    report(1, "encoding bijection", 30, encoding_bijection);
    report(2, "search-space validity fuzz", 60, validity_fuzz);
    report(3, "shape soundness", 300, shape_soundness);
    report(4, "gradient fidelity", 300, gradient_fidelity);
    report(5, "pair arithmetic", 1, pair_arithmetic);
    report(6, "ranking oracle equivalence", 10, oracle_ranking);
    report(7, "predictor ablation", 900, ablation);
    report(8, "end-to-end search quality", 900, search_quality);
    report(9, "toy trainable evaluator", 600, toy_training);
    report(10, "search reproducibility", 0, reproducibility);
    std::printf("%d of 10 criteria failed\n", failures);
    return failures;
}

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

#include "relsearch/encoding.hpp"
#include "relsearch/predictor.hpp"
#include "relsearch/search_space.hpp"
#include "relsearch/train_eval.hpp"

using namespace relsearch;

namespace {

Configuration config_with_blocks(int n, Rng& rng) {
    for (;;) {
        Configuration c = sample_configuration(rng);
        if (c.arch().block_count() == n) return c;
    }
}

// n surrogate-scored records; the first n_train are tagged train.
TrainedRecordSet surrogate_records(int n, int n_train, std::uint64_t seed) {
    Rng rng(seed);
    TrainedRecordSet out;
    for (int i = 0; i < n; ++i) {
        Configuration c = sample_configuration(rng);
        EncodedConfig e = encode(c);
        const EvalScore s = surrogate_evaluate(c, SurrogateOptions{0.02, seed});
        out.push_back({i, std::move(c), std::move(e), s, i < n_train ? Split::Train : Split::Val});
    }
    return out;
}

PredictorHyper small_hyper(int iterations, std::uint64_t seed = 1) {
    PredictorHyper h;
    h.d_model = 16;
    h.ffn = 32;
    h.head_hidden = 16;
    h.mlp_hidden = 32;
    h.iterations = iterations;
    h.batch = 16;
    h.seed = seed;
    return h;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct SwapStats {
    double mean_sum = 0.0;     // mean of p(i, j) + p(j, i)
    double consistent = 0.0;   // fraction with exactly one side above 0.5
};

SwapStats swap_stats(const Predictor& p, const std::vector<EncodedConfig>& pool, std::size_t pairs, Rng& rng) {
    const auto m = relation_matrix(p, pool);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    SwapStats s;
    for (std::size_t k = 0; k < pairs; ++k) {
        std::size_t i = pick(rng), j = pick(rng);
        while (j == i) j = pick(rng);
        s.mean_sum += m[i][j] + m[j][i];
        if ((m[i][j] > 0.5) != (m[j][i] > 0.5)) s.consistent += 1.0;
    }
    s.mean_sum /= static_cast<double>(pairs);
    s.consistent /= static_cast<double>(pairs);
    return s;
}

}  // namespace

TEST_CASE("make_gt follows the >= rule over a grid of scores") {
    const std::vector<double> grid{-1.0, 0.0, 0.25, 0.5, 0.74, 0.76, 1.0, 3.5};
    for (double a : grid)
        for (double b : grid) {
            CHECK(make_gt(a, b) == (a >= b ? 1 : 0));
            CHECK((make_gt(a, b) | make_gt(b, a)) == 1);
            CHECK((make_gt(a, b) & make_gt(b, a)) == (a == b ? 1 : 0));
        }
    CHECK(make_gt(0.76, 0.74) == 1);
    CHECK(make_gt(0.5, 0.5) == 1);
}

TEST_CASE("pair datasets hold every ordered pair of the split") {
    TrainedRecordSet recs = surrogate_records(25, 20, 3);
    const auto train = build_pair_dataset(recs, Split::Train);
    CHECK(train.size() == 400);
    const auto val = build_pair_dataset(recs, Split::Val);
    CHECK(val.size() == 25);

    int ones = 0, off = 0;
    for (const PairExample& p : train) {
        CHECK(p.gt == make_gt(recs[static_cast<std::size_t>(p.i)].score.dice,
                              recs[static_cast<std::size_t>(p.j)].score.dice));
        if (p.i == p.j) {
            CHECK(p.gt == 1);
            continue;
        }
        ++off;
        ones += p.gt;
    }
    std::set<double> distinct;
    for (int i = 0; i < 20; ++i) distinct.insert(recs[static_cast<std::size_t>(i)].score.dice);
    REQUIRE(distinct.size() == 20);
    CHECK(off == 380);
    CHECK(ones == 190);
    CHECK(train[1].i == 0);
    CHECK(train[1].j == 1);
    CHECK(train[20].i == 1);

    TrainedRecordSet one(recs.begin(), recs.begin() + 1);
    const auto single = build_pair_dataset(one, Split::Train);
    REQUIRE(single.size() == 1);
    CHECK(single[0].gt == 1);
    CHECK_THROWS_AS(build_pair_dataset(one, Split::Val), std::invalid_argument);
}

TEST_CASE("tokenization uses disjoint field ranges") {
    Rng rng(11);
    const Configuration c5 = config_with_blocks(5, rng);
    const EncodedConfig e5 = encode(c5);
    const auto t5 = tokenize(e5);
    CHECK(t5.size() == 34);
    CHECK(e5.tokens[3] == -1);
    CHECK(t5[3] == field_range(TokenField::Pred1).base);
    CHECK(t5[4] == field_range(TokenField::Pred2).base);
    for (std::size_t k = 0; k < t5.size(); ++k) {
        const FieldRange r = field_range(field_at(k, t5.size()));
        CHECK(t5[k] == r.base + (e5.tokens[k] - r.min));
        CHECK(t5[k] >= 0);
        CHECK(t5[k] < kVocabSize);
    }
    // Sentinel and value 0 of the same field never share an id.
    CHECK(field_range(TokenField::Pred1).min == -1);
    CHECK(field_range(TokenField::Pred1).base + 1 != field_range(TokenField::Pred1).base);

    // Ranges tile the vocabulary.
    int next = 0;
    for (int f = 0; f < kTokenFieldCount; ++f) {
        const FieldRange r = field_range(static_cast<TokenField>(f));
        CHECK(r.base == next);
        next += r.count;
    }
    CHECK(next == kVocabSize);

    EncodedConfig other = e5;
    other.tokens[1] = (other.tokens[1] + 1) % kOpKindCount;
    const auto t_other = tokenize(other);
    int diffs = 0;
    for (std::size_t k = 0; k < t5.size(); ++k) diffs += t5[k] != t_other[k];
    CHECK(diffs == 1);

    EncodedConfig bad = e5;
    bad.tokens.back() = 9;
    CHECK_THROWS_AS(tokenize(bad), DecodeError);
    bad = e5;
    bad.tokens.pop_back();
    CHECK_THROWS_AS(tokenize(bad), DecodeError);
}

TEST_CASE("zero head gives probability one half on any pair of lengths") {
    Rng rng(5);
    const EncodedConfig a = encode(config_with_blocks(5, rng));
    const EncodedConfig b = encode(config_with_blocks(12, rng));
    REQUIRE(a.size() == 34);
    REQUIRE(b.size() == 69);
    PredictorHyper h = small_hyper(0);
    h.zero_head = true;
    for (PredictorKind kind : {PredictorKind::TransformerRelation, PredictorKind::MlpRelation}) {
        const Predictor p = make_predictor(kind, h);
        CHECK(predict_relation(p, a, a) == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(predict_relation(p, a, b) == doctest::Approx(0.5).epsilon(1e-12));
    }
    const Predictor p = make_predictor(PredictorKind::TransformerRelation, small_hyper(0));
    const double q = predict_relation(p, a, b);
    CHECK(q > 0.0);
    CHECK(q < 1.0);
    CHECK(predict_relation(p, a, b) == q);
    CHECK_THROWS_AS(predict_accuracy(p, a), std::invalid_argument);
}

TEST_CASE("antisymmetric head gives complementary probabilities") {
    Rng rng(6);
    PredictorHyper h = small_hyper(0);
    h.antisymmetric = true;
    const Predictor p = make_predictor(PredictorKind::TransformerRelation, h);
    for (int k = 0; k < 10; ++k) {
        const EncodedConfig a = encode(sample_configuration(rng));
        const EncodedConfig b = encode(sample_configuration(rng));
        CHECK(predict_relation(p, a, b) + predict_relation(p, b, a) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("relation_matrix agrees with single-pair prediction") {
    Rng rng(8);
    std::vector<EncodedConfig> vs;
    for (int k = 0; k < 6; ++k) vs.push_back(encode(sample_configuration(rng)));
    for (PredictorKind kind : {PredictorKind::TransformerRelation, PredictorKind::MlpRelation}) {
        const Predictor p = make_predictor(kind, small_hyper(0));
        const auto m = relation_matrix(p, vs);
        for (std::size_t i = 0; i < vs.size(); ++i)
            for (std::size_t j = 0; j < vs.size(); ++j) {
                if (i == j) {
                    CHECK(m[i][j] == 0.5);
                } else {
                    CHECK(m[i][j] == doctest::Approx(predict_relation(p, vs[i], vs[j])).epsilon(1e-12));
                }
            }
    }
}

TEST_CASE("MLP features are padded to 138 values") {
    Rng rng(9);
    for (int n : {5, 8, 12}) {
        const EncodedConfig a = encode(config_with_blocks(n, rng));
        const EncodedConfig b = encode(config_with_blocks(5, rng));
        const auto f = mlp_features(a, b);
        CHECK(f.size() == 138);
        CHECK(f[0] == doctest::Approx(a.tokens[0] * kMlpInputScale));
        CHECK(f[68] == doctest::Approx((n == 12 ? a.tokens[68] : kPadValue) * kMlpInputScale));
        CHECK(f[69 + 33] == doctest::Approx(b.tokens[33] * kMlpInputScale));
        CHECK(f[69 + 34] == doctest::Approx(kPadValue * kMlpInputScale));
    }
}

TEST_CASE("diagonal-only training drives seen pairs to one") {
    const TrainedRecordSet recs = surrogate_records(6, 6, 2);
    std::vector<PairExample> diag;
    for (const PairExample& p : build_pair_dataset(recs, Split::Train)) {
        if (p.i == p.j) diag.push_back(p);
    }
    REQUIRE(diag.size() == 6);
    PredictorHyper h = small_hyper(150);
    h.batch = 6;
    h.lr = 0.01;
    const TrainedPredictor t = train_relation_predictor(diag, h);
    const TrainedPredictor m = train_mlp_baseline(diag, h);
    for (const PairExample& p : diag) {
        CHECK(predict_relation(t.model, p.v_i, p.v_j) >= 0.99);
        CHECK(predict_relation(m.model, p.v_i, p.v_j) >= 0.99);
    }
}

TEST_CASE("relation training reduces the loss and improves swap consistency") {
    std::vector<double> first, last, before_cons, after_cons;
    SwapStats after{};
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const TrainedRecordSet recs = surrogate_records(30, 30, 100 + seed);
        const auto pairs = build_pair_dataset(recs, Split::Train);
        const PredictorHyper h = small_hyper(200, seed);
        Rng pool_rng(500 + seed);
        std::vector<EncodedConfig> pool;
        for (int k = 0; k < 60; ++k) pool.push_back(encode(sample_configuration(pool_rng)));

        const Predictor init = make_predictor(PredictorKind::TransformerRelation, h);
        Rng r0(seed);
        before_cons.push_back(swap_stats(init, pool, 1000, r0).consistent);

        const TrainedPredictor t = train_relation_predictor(pairs, h);
        REQUIRE(t.curve.points.size() >= 2);
        CHECK(t.curve.points.front().first == 0);
        CHECK(t.curve.points.back().first == 199);
        // Mean of the first and last five logged losses.
        double a = 0.0, b = 0.0;
        for (int k = 0; k < 5; ++k) {
            a += t.curve.points[static_cast<std::size_t>(k)].second / 5.0;
            b += t.curve.points[t.curve.points.size() - 1 - static_cast<std::size_t>(k)].second / 5.0;
        }
        first.push_back(a);
        last.push_back(b);
        Rng r1(seed);
        after = swap_stats(t.model, pool, 1000, r1);
        after_cons.push_back(after.consistent);
        CHECK(after.mean_sum >= 0.9);
        CHECK(after.mean_sum <= 1.1);
    }
    CHECK(median(last) < median(first));
    CHECK(median(after_cons) > median(before_cons));
}

TEST_CASE("training is a pure function of data and hyperparameters") {
    const TrainedRecordSet recs = surrogate_records(8, 8, 4);
    const auto pairs = build_pair_dataset(recs, Split::Train);
    const PredictorHyper h = small_hyper(10, 3);
    const TrainedPredictor a = train_relation_predictor(pairs, h);
    const TrainedPredictor b = train_relation_predictor(pairs, h);
    REQUIRE(a.model.params.size() == b.model.params.size());
    for (std::size_t k = 0; k < a.model.params.size(); ++k) {
        CHECK(a.model.params[k].value.data == b.model.params[k].value.data);
    }
    CHECK(a.curve.points == b.curve.points);
    const TrainedPredictor c = train_relation_predictor(pairs, small_hyper(10, 4));
    CHECK(c.curve.points != a.curve.points);
}

TEST_CASE("regressor fits a constant score") {
    TrainedRecordSet recs = surrogate_records(12, 12, 7);
    for (auto& r : recs) r.score.dice = 0.37;
    PredictorHyper h = small_hyper(600);
    h.batch = 12;
    const TrainedPredictor t = train_accuracy_regressor(recs, h);
    for (const auto& r : recs) CHECK(std::abs(predict_accuracy(t.model, r.encoded) - 0.37) <= 0.01);
}

TEST_CASE("record and pair counts at the default split") {
    const TrainedRecordSet recs = surrogate_records(100, 75, 1);
    std::size_t train = 0;
    for (const auto& r : recs) train += r.split == Split::Train;
    CHECK(train == 75);
    CHECK(build_pair_dataset(recs, Split::Train).size() == 5625);
    CHECK(build_pair_dataset(recs, Split::Val).size() == 625);
}

TEST_CASE("divergent or empty training is reported") {
    const TrainedRecordSet recs = surrogate_records(4, 4, 1);
    CHECK_THROWS_AS(train_relation_predictor({}, small_hyper(1)), std::invalid_argument);
    TrainedRecordSet none = recs;
    for (auto& r : none) r.split = Split::Val;
    CHECK_THROWS_AS(train_accuracy_regressor(none, small_hyper(1)), std::invalid_argument);
    TrainedRecordSet huge = recs;
    for (auto& r : huge) r.score.dice = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(train_accuracy_regressor(huge, small_hyper(3)), PredictorError);
}

TEST_CASE("analytic gradients match central differences for every predictor") {
    const TrainedRecordSet recs = surrogate_records(4, 4, 12);
    const auto pairs = build_pair_dataset(recs, Split::Train);
    const PairExample& pair = pairs[1];
    for (PredictorKind kind :
         {PredictorKind::TransformerRelation, PredictorKind::MlpRelation, PredictorKind::AccuracyRegressor}) {
        for (bool anti : {false, true}) {
            if (anti && kind != PredictorKind::TransformerRelation) continue;
            PredictorHyper h = small_hyper(0, 21);
            h.antisymmetric = anti;
            Predictor p = make_predictor(kind, h);
            const GradientCheckReport r = gradient_check(p, pair, 12, 3);
            INFO(predictor_kind_name(kind), " ", r.worst);
            CHECK(r.entries > 0);
            CHECK(r.max_rel_error < 1e-4);
        }
    }
}

TEST_CASE("embedding rows of absent tokens receive exactly zero gradient") {
    const TrainedRecordSet recs = surrogate_records(2, 2, 13);
    const auto pairs = build_pair_dataset(recs, Split::Train);
    const PairExample& pair = pairs[1];
    Predictor p = make_predictor(PredictorKind::TransformerRelation, small_hyper(0));
    pair_loss_gradients(p, pair);
    std::set<int> present;
    for (int t : tokenize(pair.v_i)) present.insert(t);
    for (int t : tokenize(pair.v_j)) present.insert(t);
    const ParamTensor& emb = p.params[p.embed];
    const std::size_t d = emb.value.dim(1);
    int zero_rows = 0, live_rows = 0;
    for (int row = 0; row < kVocabSize; ++row) {
        double mag = 0.0;
        for (std::size_t c = 0; c < d; ++c) mag += std::abs(emb.grad[static_cast<std::size_t>(row) * d + c]);
        if (present.count(row)) {
            live_rows += mag > 0.0;
        } else {
            CHECK(mag == 0.0);
            ++zero_rows;
        }
    }
    CHECK(zero_rows > 0);
    CHECK(live_rows == static_cast<int>(present.size()));
}

TEST_CASE("checkpoints round-trip through float32") {
    const auto dir = std::filesystem::temp_directory_path() / "relsearch_ckpt_test";
    std::filesystem::create_directories(dir);
    Rng rng(14);
    const EncodedConfig a = encode(sample_configuration(rng));
    const EncodedConfig b = encode(sample_configuration(rng));
    for (PredictorKind kind :
         {PredictorKind::TransformerRelation, PredictorKind::MlpRelation, PredictorKind::AccuracyRegressor}) {
        PredictorHyper h = small_hyper(0, 5);
        h.antisymmetric = kind == PredictorKind::TransformerRelation;
        const Predictor p = make_predictor(kind, h);
        const auto bin = dir / (std::string(predictor_kind_name(kind)) + ".bin");
        save_checkpoint(p, bin, {{"note", "x"}});
        const Predictor q = load_checkpoint(bin);
        CHECK(q.kind == kind);
        CHECK(q.hyper.seed == 5);
        CHECK(q.hyper.antisymmetric == h.antisymmetric);
        REQUIRE(q.params.size() == p.params.size());
        for (std::size_t k = 0; k < p.params.size(); ++k) {
            for (std::size_t i = 0; i < p.params[k].value.numel(); ++i) {
                CHECK(q.params[k].value[i] == static_cast<double>(static_cast<float>(p.params[k].value[i])));
            }
        }
        if (kind == PredictorKind::AccuracyRegressor) {
            CHECK(predict_accuracy(q, a) == doctest::Approx(predict_accuracy(p, a)).epsilon(1e-5));
        } else {
            CHECK(predict_relation(q, a, b) == doctest::Approx(predict_relation(p, a, b)).epsilon(1e-5));
        }
    }
    {
        std::ofstream junk(dir / "junk.bin", std::ios::binary);
        junk << "NOPE";
    }
    CHECK_THROWS(load_checkpoint(dir / "junk.bin"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("hyperparameter JSON round-trips and rejects unknown keys") {
    PredictorHyper h;
    h.iterations = 123;
    h.lr = 0.005;
    h.antisymmetric = true;
    const PredictorHyper back = predictor_hyper_from_json(nlohmann::json::parse(to_json(h).dump()));
    CHECK(back.iterations == 123);
    CHECK(back.lr == 0.005);
    CHECK(back.antisymmetric);
    CHECK(back.batch == 32);
    const PredictorHyper defaults = predictor_hyper_from_json(nlohmann::json::object());
    CHECK(defaults.iterations == 10000);
    CHECK(defaults.batch == 32);
    CHECK(defaults.lr == 0.001);
    CHECK_THROWS_AS(predictor_hyper_from_json({{"iterationz", 5}}), std::invalid_argument);
}

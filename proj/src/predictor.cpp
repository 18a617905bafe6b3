#include "relsearch/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>

namespace relsearch {

namespace {

constexpr std::size_t kNoBias = std::numeric_limits<std::size_t>::max();

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void xavier(Tensor& w, Rng& rng) {
    const double fan_out = static_cast<double>(w.dim(0));
    const double fan_in = static_cast<double>(w.numel()) / fan_out;
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> d(-a, a);
    for (double& v : w.data) v = d(rng);
}

// Sinusoidal encodings for every position up to the longest vector.
const Tensor& positional_table(int d) {
    static thread_local std::map<int, Tensor> cache;
    auto it = cache.find(d);
    if (it != cache.end()) return it->second;
    Tensor pe({static_cast<std::size_t>(kMaxEncodedLength), static_cast<std::size_t>(d)});
    for (int pos = 0; pos < kMaxEncodedLength; ++pos) {
        for (int i = 0; i < d; i += 2) {
            const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d);
            pe[static_cast<std::size_t>(pos * d + i)] = std::sin(angle);
            if (i + 1 < d) pe[static_cast<std::size_t>(pos * d + i + 1)] = std::cos(angle);
        }
    }
    return cache.emplace(d, std::move(pe)).first->second;
}

}  // namespace

const char* split_name(Split s) { return s == Split::Train ? "train" : "val"; }

int make_gt(double a_i, double a_j) { return a_i >= a_j ? 1 : 0; }

std::vector<PairExample> build_pair_dataset(const TrainedRecordSet& records, Split split) {
    std::vector<const TrainedRecord*> members;
    for (const auto& r : records) {
        if (r.split == split) members.push_back(&r);
    }
    if (members.empty()) throw std::invalid_argument(std::string("empty ") + split_name(split) + " split");
    std::vector<PairExample> pairs;
    pairs.reserve(members.size() * members.size());
    for (const TrainedRecord* a : members) {
        for (const TrainedRecord* b : members) {
            pairs.push_back({a->encoded, b->encoded, make_gt(a->score.dice, b->score.dice), a->id, b->id});
        }
    }
    return pairs;
}

nlohmann::ordered_json to_json(const PairExample& p) {
    nlohmann::ordered_json j;
    j["i"] = p.i;
    j["j"] = p.j;
    j["gt"] = p.gt;
    j["v_i"] = to_json(p.v_i);
    j["v_j"] = to_json(p.v_j);
    return j;
}

// ---- tokens --------------------------------------------------------------------

FieldRange field_range(TokenField f) {
    switch (f) {
        case TokenField::BlockId: return {0, 0, kMaxBlocks};
        case TokenField::Op: return {12, 0, kOpKindCount};
        case TokenField::Level: return {16, kMinLevel, kMaxLevel - kMinLevel + 1};
        case TokenField::Pred1: return {20, kNoPredecessor, kMaxBlocks};
        case TokenField::Pred2: return {32, kNoPredecessor, kMaxBlocks};
        case TokenField::Aug: return {44, 0, kAugCandidates};
        case TokenField::Lr: return {52, 0, kLrChoices};
        case TokenField::Sched: return {57, 0, kSchedChoices};
        case TokenField::Loss: return {59, 0, kLossChoices};
        case TokenField::Opt: return {64, 0, kOptChoices};
    }
    throw std::out_of_range("token field");
}

TokenField field_at(std::size_t position, std::size_t length) {
    const std::size_t block_tokens = length - static_cast<std::size_t>(kTailTokens);
    if (position < block_tokens) return static_cast<TokenField>(position % kTokensPerBlock);
    const std::size_t tail = position - block_tokens;
    if (tail < static_cast<std::size_t>(kAugSlots)) return TokenField::Aug;
    return static_cast<TokenField>(static_cast<int>(TokenField::Lr) + static_cast<int>(tail) - kAugSlots);
}

std::vector<int> tokenize(const EncodedConfig& vec) {
    decode(vec);  // full validation; throws DecodeError
    std::vector<int> ids(vec.size());
    for (std::size_t p = 0; p < vec.size(); ++p) {
        const FieldRange r = field_range(field_at(p, vec.size()));
        ids[p] = r.base + vec.tokens[p] - r.min;
    }
    return ids;
}

// ---- hyperparameters -------------------------------------------------------------

const char* predictor_kind_name(PredictorKind k) {
    switch (k) {
        case PredictorKind::TransformerRelation: return "transformer_relation";
        case PredictorKind::MlpRelation: return "mlp_relation";
        case PredictorKind::AccuracyRegressor: return "accuracy_regressor";
    }
    return "?";
}

nlohmann::ordered_json to_json(const PredictorHyper& h) {
    nlohmann::ordered_json j;
    j["d_model"] = h.d_model;
    j["layers"] = h.layers;
    j["ffn"] = h.ffn;
    j["head_hidden"] = h.head_hidden;
    j["mlp_hidden"] = h.mlp_hidden;
    j["iterations"] = h.iterations;
    j["batch"] = h.batch;
    j["lr"] = h.lr;
    j["seed"] = h.seed;
    j["antisymmetric"] = h.antisymmetric;
    j["zero_head"] = h.zero_head;
    j["log_every"] = h.log_every;
    return j;
}

PredictorHyper predictor_hyper_from_json(const nlohmann::json& j) {
    PredictorHyper h;
    for (const auto& [key, v] : j.items()) {
        if (key == "d_model") h.d_model = v.get<int>();
        else if (key == "layers") h.layers = v.get<int>();
        else if (key == "ffn") h.ffn = v.get<int>();
        else if (key == "head_hidden") h.head_hidden = v.get<int>();
        else if (key == "mlp_hidden") h.mlp_hidden = v.get<int>();
        else if (key == "iterations") h.iterations = v.get<int>();
        else if (key == "batch") h.batch = v.get<int>();
        else if (key == "lr") h.lr = v.get<double>();
        else if (key == "seed") h.seed = v.get<std::uint64_t>();
        else if (key == "antisymmetric") h.antisymmetric = v.get<bool>();
        else if (key == "zero_head") h.zero_head = v.get<bool>();
        else if (key == "log_every") h.log_every = v.get<int>();
        else throw std::invalid_argument("unknown predictor_hyper key: " + key);
    }
    if (h.d_model < 2 || h.d_model % 2 || h.layers < 0 || h.ffn < 1 || h.head_hidden < 1 || h.mlp_hidden < 1 ||
        h.iterations < 0 || h.batch < 1 || !(h.lr > 0.0) || h.log_every < 1) {
        throw std::invalid_argument("predictor_hyper out of range");
    }
    return h;
}

std::vector<double> mlp_features(const EncodedConfig& v_i, const EncodedConfig& v_j) {
    std::vector<double> f(kMlpInputs, kPadValue * kMlpInputScale);
    for (std::size_t p = 0; p < v_i.size(); ++p) f[p] = v_i.tokens[p] * kMlpInputScale;
    for (std::size_t p = 0; p < v_j.size(); ++p) f[kMaxEncodedLength + p] = v_j.tokens[p] * kMlpInputScale;
    return f;
}

// ---- model ---------------------------------------------------------------------------

Predictor make_predictor(PredictorKind kind, const PredictorHyper& hyper) {
    Predictor p;
    p.kind = kind;
    p.hyper = hyper;
    Rng rng(hyper.seed);
    ParamSet& ps = p.params;
    const auto d = static_cast<std::size_t>(hyper.d_model);
    auto dense = [&](const std::string& role, std::size_t out, std::size_t in, bool bias) {
        const std::size_t w = ps.add(role + ".w", {out, in});
        xavier(ps[w].value, rng);
        const std::size_t b = bias ? ps.add(role + ".b", {out}) : kNoBias;
        return std::make_pair(w, b);
    };
    auto norm = [&](const std::string& role) {
        const std::size_t g = ps.add(role + ".gamma", {d});
        ps[g].value.fill(1.0);
        return std::make_pair(g, ps.add(role + ".beta", {d}));
    };

    if (kind != PredictorKind::MlpRelation) {
        p.embed = ps.add("embed", {static_cast<std::size_t>(kVocabSize), d});
        std::normal_distribution<double> nd(0.0, 0.5);
        for (double& v : ps[p.embed].value.data) v = nd(rng);
        const auto ffn = static_cast<std::size_t>(hyper.ffn);
        for (int l = 0; l < hyper.layers; ++l) {
            const std::string r = "layer" + std::to_string(l);
            EncoderLayerParams e{};
            std::tie(e.ln1_g, e.ln1_b) = norm(r + ".ln1");
            std::tie(e.wq, e.bq) = dense(r + ".q", d, d, true);
            std::tie(e.wk, e.bk) = dense(r + ".k", d, d, true);
            std::tie(e.wv, e.bv) = dense(r + ".v", d, d, true);
            std::tie(e.wo, e.bo) = dense(r + ".o", d, d, true);
            std::tie(e.ln2_g, e.ln2_b) = norm(r + ".ln2");
            std::tie(e.w1, e.b1) = dense(r + ".ffn1", ffn, d, true);
            std::tie(e.w2, e.b2) = dense(r + ".ffn2", d, ffn, true);
            p.layers.push_back(e);
        }
        std::tie(p.lnf_g, p.lnf_b) = norm("final_ln");
    }

    const auto hidden = static_cast<std::size_t>(hyper.head_hidden);
    switch (kind) {
        case PredictorKind::TransformerRelation:
            if (hyper.antisymmetric) {
                p.head.push_back(dense("head.diff", 1, d, false));
            } else {
                p.head.push_back(dense("head.fc1", hidden, 2 * d, true));
                p.head.push_back(dense("head.fc2", 1, hidden, true));
            }
            break;
        case PredictorKind::MlpRelation: {
            const auto h = static_cast<std::size_t>(hyper.mlp_hidden);
            p.head.push_back(dense("mlp.fc1", h, kMlpInputs, true));
            p.head.push_back(dense("mlp.fc2", h, h, true));
            p.head.push_back(dense("mlp.fc3", 1, h, true));
            break;
        }
        case PredictorKind::AccuracyRegressor:
            p.head.push_back(dense("head.fc1", hidden, d, true));
            p.head.push_back(dense("head.fc2", 1, hidden, true));
            break;
    }
    if (hyper.zero_head) {
        ps[p.head.back().first].value.fill(0.0);
    }
    return p;
}

Var Predictor::embed_sequence(ParamBinding& bind, const std::vector<int>& tokens) const {
    Tape& t = bind.tape();
    const std::size_t len = tokens.size();
    const auto d = static_cast<std::size_t>(hyper.d_model);
    const Tensor& table = positional_table(hyper.d_model);
    Tensor pe({len, d}, std::vector<double>(table.data.begin(), table.data.begin() + static_cast<long>(len * d)));
    Var x = ad::add_constant(t, ad::embedding(t, bind(embed), tokens), pe);
    for (const EncoderLayerParams& e : layers) {
        const Var h = ad::layer_norm(t, x, bind(e.ln1_g), bind(e.ln1_b));
        const Shape seq{1, len, d};
        const Var q = ad::reshape(t, ad::linear(t, h, bind(e.wq), bind(e.bq)), seq);
        const Var k = ad::reshape(t, ad::linear(t, h, bind(e.wk), bind(e.bk)), seq);
        const Var v = ad::reshape(t, ad::linear(t, h, bind(e.wv), bind(e.bv)), seq);
        const Var a = ad::reshape(t, ad::attention(t, q, k, v), {len, d});
        x = ad::add(t, x, ad::linear(t, a, bind(e.wo), bind(e.bo)));
        const Var h2 = ad::layer_norm(t, x, bind(e.ln2_g), bind(e.ln2_b));
        const Var f = ad::relu(t, ad::linear(t, h2, bind(e.w1), bind(e.b1)));
        x = ad::add(t, x, ad::linear(t, f, bind(e.w2), bind(e.b2)));
    }
    x = ad::layer_norm(t, x, bind(lnf_g), bind(lnf_b));
    return ad::mean_rows(t, x);
}

namespace {

Var bias_or_none(ParamBinding& bind, std::size_t b) { return b == kNoBias ? Var{} : bind(b); }

Var run_head(ParamBinding& bind, const std::vector<std::pair<std::size_t, std::size_t>>& head, Var x) {
    Tape& t = bind.tape();
    for (std::size_t l = 0; l < head.size(); ++l) {
        x = ad::linear(t, x, bind(head[l].first), bias_or_none(bind, head[l].second));
        if (l + 1 < head.size()) x = ad::relu(t, x);
    }
    return x;
}

}  // namespace

Var Predictor::relation_logit(ParamBinding& bind, Var e_i, Var e_j) const {
    Tape& t = bind.tape();
    if (hyper.antisymmetric) return run_head(bind, head, ad::sub(t, e_i, e_j));
    return run_head(bind, head, ad::concat(t, e_i, e_j));
}

Var Predictor::mlp_logit(ParamBinding& bind, Var features) const { return run_head(bind, head, features); }

Var Predictor::regress(ParamBinding& bind, Var e) const { return run_head(bind, head, e); }

namespace {

void require_kind(const Predictor& p, bool relation) {
    const bool is_relation = p.kind != PredictorKind::AccuracyRegressor;
    if (is_relation != relation) {
        throw std::invalid_argument(std::string("operation not available for ") + predictor_kind_name(p.kind));
    }
}

Var mlp_input(Tape& t, const EncodedConfig& a, const EncodedConfig& b) {
    tokenize(a);
    tokenize(b);
    return t.constant(Tensor({static_cast<std::size_t>(kMlpInputs)}, mlp_features(a, b)));
}

}  // namespace

double predict_relation(const Predictor& p, const EncodedConfig& v_i, const EncodedConfig& v_j) {
    require_kind(p, true);
    Tape t;
    ParamBinding bind(t, std::as_const(p.params));
    Var logit;
    if (p.kind == PredictorKind::MlpRelation) {
        logit = p.mlp_logit(bind, mlp_input(t, v_i, v_j));
    } else {
        logit = p.relation_logit(bind, p.embed_sequence(bind, tokenize(v_i)), p.embed_sequence(bind, tokenize(v_j)));
    }
    return sigmoid(t.value(logit)[0]);
}

double predict_accuracy(const Predictor& p, const EncodedConfig& v) {
    require_kind(p, false);
    Tape t;
    ParamBinding bind(t, std::as_const(p.params));
    return t.value(p.regress(bind, p.embed_sequence(bind, tokenize(v))))[0];
}

std::vector<std::vector<double>> relation_matrix(const Predictor& p, const std::vector<EncodedConfig>& vs,
                                                 bool upper_only) {
    require_kind(p, true);
    const std::size_t k = vs.size();
    std::vector<std::vector<double>> out(k, std::vector<double>(k, 0.5));
    std::vector<Tensor> emb(k);
    if (p.kind == PredictorKind::TransformerRelation) {
        for (std::size_t i = 0; i < k; ++i) {
            Tape t;
            ParamBinding bind(t, std::as_const(p.params));
            emb[i] = t.value(p.embed_sequence(bind, tokenize(vs[i])));
        }
    } else {
        for (const auto& v : vs) tokenize(v);
    }
#pragma omp parallel for schedule(dynamic)
    for (long li = 0; li < static_cast<long>(k); ++li) {
        const auto i = static_cast<std::size_t>(li);
        for (std::size_t j = upper_only ? i + 1 : 0; j < k; ++j) {
            if (i == j) continue;
            Tape t;
            ParamBinding bind(t, std::as_const(p.params));
            Var logit;
            if (p.kind == PredictorKind::MlpRelation) {
                logit = p.mlp_logit(
                    bind, t.constant(Tensor({static_cast<std::size_t>(kMlpInputs)}, mlp_features(vs[i], vs[j]))));
            } else {
                logit = p.relation_logit(bind, t.constant(emb[i]), t.constant(emb[j]));
            }
            out[i][j] = sigmoid(t.value(logit)[0]);
        }
    }
    return out;
}

// ---- training ---------------------------------------------------------------------------

namespace {

// Epoch-wise uniform reshuffling of example indices.
class BatchSampler {
public:
    BatchSampler(std::size_t n, Rng& rng) : order_(n), rng_(rng) {
        std::iota(order_.begin(), order_.end(), 0);
        std::shuffle(order_.begin(), order_.end(), rng_);
    }
    std::vector<std::size_t> next(std::size_t batch) {
        std::vector<std::size_t> out;
        while (out.size() < batch) {
            if (pos_ == order_.size()) {
                std::shuffle(order_.begin(), order_.end(), rng_);
                pos_ = 0;
            }
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
    Rng& rng_;
};

// Shared Adam loop. batch_loss records one mini-batch on the tape.
template <typename BatchLoss>
TrainingCurve fit(Predictor& model, std::size_t examples, BatchLoss batch_loss) {
    const PredictorHyper& h = model.hyper;
    Rng rng(h.seed ^ 0x5eedba7c4ULL);
    BatchSampler sampler(examples, rng);
    Optimizer adam(OptimizerKind::Adam);
    TrainingCurve curve;
    double last_finite = std::numeric_limits<double>::quiet_NaN();
    const auto batch = std::min<std::size_t>(static_cast<std::size_t>(h.batch), examples);
    for (int it = 0; it < h.iterations; ++it) {
        const auto idx = sampler.next(batch);
        model.params.zero_grad();
        Tape t;
        ParamBinding bind(t, model.params);
        const Var loss = batch_loss(bind, idx);
        const double value = t.value(loss)[0];
        if (!std::isfinite(value)) {
            throw PredictorError("predictor divergence at iteration " + std::to_string(it) +
                                 "; last finite loss " + std::to_string(last_finite));
        }
        last_finite = value;
        if (it % h.log_every == 0 || it + 1 == h.iterations) curve.points.emplace_back(it, value);
        t.backward(loss);
        try {
            adam.step(model.params, h.lr);
        } catch (const NanGradientError& e) {
            throw PredictorError(std::string(e.what()) + "; last finite loss " + std::to_string(last_finite));
        }
    }
    return curve;
}

}  // namespace

TrainedPredictor train_relation_predictor(const std::vector<PairExample>& pairs, const PredictorHyper& hyper) {
    if (pairs.empty()) throw std::invalid_argument("empty pair set");
    std::map<EncodedConfig, std::size_t> unique;
    std::vector<std::vector<int>> tokens;
    std::vector<std::pair<std::size_t, std::size_t>> ids;
    for (const auto& pr : pairs) {
        auto intern = [&](const EncodedConfig& v) {
            auto [it, fresh] = unique.emplace(v, tokens.size());
            if (fresh) tokens.push_back(tokenize(v));
            return it->second;
        };
        const std::size_t a = intern(pr.v_i);
        ids.emplace_back(a, intern(pr.v_j));
    }
    TrainedPredictor out{make_predictor(PredictorKind::TransformerRelation, hyper), {}};
    const Predictor& model = out.model;
    out.curve = fit(out.model, pairs.size(), [&](ParamBinding& bind, const std::vector<std::size_t>& idx) {
        Tape& t = bind.tape();
        std::map<std::size_t, Var> emb;
        auto embed = [&](std::size_t u) {
            auto it = emb.find(u);
            if (it == emb.end()) it = emb.emplace(u, model.embed_sequence(bind, tokens[u])).first;
            return it->second;
        };
        std::vector<Var> losses;
        for (std::size_t k : idx) {
            const Var ei = embed(ids[k].first);
            const Var ej = embed(ids[k].second);
            losses.push_back(ad::bce_with_logits(t, model.relation_logit(bind, ei, ej), pairs[k].gt));
        }
        return ad::mean_of(t, losses);
    });
    return out;
}

TrainedPredictor train_mlp_baseline(const std::vector<PairExample>& pairs, const PredictorHyper& hyper) {
    if (pairs.empty()) throw std::invalid_argument("empty pair set");
    std::vector<Tensor> features;
    for (const auto& pr : pairs) {
        tokenize(pr.v_i);
        tokenize(pr.v_j);
        features.emplace_back(Shape{static_cast<std::size_t>(kMlpInputs)}, mlp_features(pr.v_i, pr.v_j));
    }
    TrainedPredictor out{make_predictor(PredictorKind::MlpRelation, hyper), {}};
    const Predictor& model = out.model;
    out.curve = fit(out.model, pairs.size(), [&](ParamBinding& bind, const std::vector<std::size_t>& idx) {
        Tape& t = bind.tape();
        std::vector<Var> losses;
        for (std::size_t k : idx) {
            const Var logit = model.mlp_logit(bind, t.constant(features[k]));
            losses.push_back(ad::bce_with_logits(t, logit, pairs[k].gt));
        }
        return ad::mean_of(t, losses);
    });
    return out;
}

TrainedPredictor train_accuracy_regressor(const TrainedRecordSet& records, const PredictorHyper& hyper) {
    std::vector<std::vector<int>> tokens;
    std::vector<double> targets;
    for (const auto& r : records) {
        if (r.split != Split::Train) continue;
        tokens.push_back(tokenize(r.encoded));
        targets.push_back(r.score.dice);
    }
    if (tokens.empty()) throw std::invalid_argument("empty train split");
    TrainedPredictor out{make_predictor(PredictorKind::AccuracyRegressor, hyper), {}};
    const Predictor& model = out.model;
    out.curve = fit(out.model, tokens.size(), [&](ParamBinding& bind, const std::vector<std::size_t>& idx) {
        Tape& t = bind.tape();
        std::vector<Var> losses;
        for (std::size_t k : idx) {
            const Var pred = model.regress(bind, model.embed_sequence(bind, tokens[k]));
            losses.push_back(ad::squared_error(t, pred, targets[k]));
        }
        return ad::mean_of(t, losses);
    });
    return out;
}

// ---- gradient checks -------------------------------------------------------------------

namespace {

// Records the loss of one example. For the regressor the pair label is the
// regression target of v_i.
Var record_pair_loss(const Predictor& p, ParamBinding& bind, const PairExample& pair) {
    Tape& t = bind.tape();
    switch (p.kind) {
        case PredictorKind::TransformerRelation:
            return ad::bce_with_logits(
                t,
                p.relation_logit(bind, p.embed_sequence(bind, tokenize(pair.v_i)),
                                 p.embed_sequence(bind, tokenize(pair.v_j))),
                pair.gt);
        case PredictorKind::MlpRelation:
            return ad::bce_with_logits(t, p.mlp_logit(bind, mlp_input(t, pair.v_i, pair.v_j)), pair.gt);
        case PredictorKind::AccuracyRegressor:
            return ad::squared_error(t, p.regress(bind, p.embed_sequence(bind, tokenize(pair.v_i))), pair.gt);
    }
    throw std::logic_error("predictor kind");
}

}  // namespace

double pair_loss(const Predictor& p, const PairExample& pair) {
    Tape t;
    ParamBinding bind(t, std::as_const(p.params));
    return t.value(record_pair_loss(p, bind, pair))[0];
}

void pair_loss_gradients(Predictor& p, const PairExample& pair) {
    p.params.zero_grad();
    Tape t;
    ParamBinding bind(t, p.params);
    t.backward(record_pair_loss(p, bind, pair));
}

GradientCheckReport gradient_check(Predictor& p, const PairExample& pair, std::size_t per_tensor,
                                   std::uint64_t seed) {
    constexpr double kStep = 1e-5;
    // Gradients smaller than this are compared absolutely.
    constexpr double kFloor = 1e-6;
    pair_loss_gradients(p, pair);
    Rng rng(seed);
    GradientCheckReport report;
    for (auto& pt : p.params.tensors()) {
        const std::size_t n = pt.value.numel();
        std::vector<std::size_t> picks(n);
        std::iota(picks.begin(), picks.end(), 0);
        if (per_tensor != 0 && per_tensor < n) {
            std::shuffle(picks.begin(), picks.end(), rng);
            picks.resize(per_tensor);
        }
        for (std::size_t i : picks) {
            const double saved = pt.value[i];
            pt.value[i] = saved + kStep;
            const double up = pair_loss(p, pair);
            pt.value[i] = saved - kStep;
            const double down = pair_loss(p, pair);
            pt.value[i] = saved;
            const double numeric = (up - down) / (2.0 * kStep);
            const double analytic = pt.grad[i];
            const double err =
                std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kFloor});
            ++report.entries;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = pt.role + "[" + std::to_string(i) + "]";
            }
        }
    }
    return report;
}

// ---- checkpoints -------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'T', 'A', 'P', 'R'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw std::runtime_error("truncated checkpoint");
    return v;
}

std::filesystem::path sidecar_path(const std::filesystem::path& bin) {
    std::filesystem::path s = bin;
    s.replace_extension(".json");
    return s;
}

}  // namespace

void save_checkpoint(const Predictor& p, const std::filesystem::path& bin, const nlohmann::ordered_json& extra) {
    std::ofstream out(bin, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + bin.string());
    out.write(kMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.kind));
    put<std::uint32_t>(out, kVocabSize);
    put<std::uint32_t>(out, kTokenFieldCount);
    for (int f = 0; f < kTokenFieldCount; ++f) {
        const FieldRange r = field_range(static_cast<TokenField>(f));
        put<std::int32_t>(out, r.base);
        put<std::int32_t>(out, r.min);
        put<std::int32_t>(out, r.count);
    }
    for (int v : {p.hyper.d_model, p.hyper.layers, p.hyper.ffn, p.hyper.head_hidden, p.hyper.mlp_hidden}) {
        put<std::int32_t>(out, v);
    }
    put<std::uint8_t>(out, p.hyper.antisymmetric ? 1 : 0);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p.params.size()));
    for (const auto& pt : p.params.tensors()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(pt.role.size()));
        out.write(pt.role.data(), static_cast<std::streamsize>(pt.role.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(pt.value.rank()));
        for (std::size_t d : pt.value.shape) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        for (double v : pt.value.data) put<float>(out, static_cast<float>(v));
    }
    if (!out) throw std::runtime_error("short write to " + bin.string());

    nlohmann::ordered_json side;
    side["schema_version"] = 1;
    side["format"] = "TAPR";
    side["version"] = kCheckpointVersion;
    side["kind"] = predictor_kind_name(p.kind);
    side["hyper"] = to_json(p.hyper);
    side["parameters"] = p.params.scalar_count();
    if (!extra.is_null()) side["extra"] = extra;
    std::ofstream js(sidecar_path(bin));
    if (!js) throw std::runtime_error("cannot write checkpoint sidecar");
    js << side.dump(2) << '\n';
}

Predictor load_checkpoint(const std::filesystem::path& bin) {
    std::ifstream in(bin, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + bin.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("not a TAPR checkpoint");
    if (get<std::uint32_t>(in) != kCheckpointVersion) throw std::runtime_error("unsupported checkpoint version");
    const auto kind_idx = get<std::uint32_t>(in);
    if (kind_idx > 2) throw std::runtime_error("unknown predictor kind in checkpoint");
    if (get<std::uint32_t>(in) != static_cast<std::uint32_t>(kVocabSize) ||
        get<std::uint32_t>(in) != static_cast<std::uint32_t>(kTokenFieldCount)) {
        throw std::runtime_error("checkpoint vocabulary differs from this build");
    }
    for (int f = 0; f < kTokenFieldCount; ++f) {
        const FieldRange r = field_range(static_cast<TokenField>(f));
        const auto base = get<std::int32_t>(in), min = get<std::int32_t>(in), count = get<std::int32_t>(in);
        if (base != r.base || min != r.min || count != r.count) {
            throw std::runtime_error("checkpoint vocabulary differs from this build");
        }
    }
    PredictorHyper hyper;
    const auto side = sidecar_path(bin);
    if (std::filesystem::exists(side)) {
        std::ifstream js(side);
        hyper = predictor_hyper_from_json(nlohmann::json::parse(js).at("hyper"));
    }
    hyper.d_model = get<std::int32_t>(in);
    hyper.layers = get<std::int32_t>(in);
    hyper.ffn = get<std::int32_t>(in);
    hyper.head_hidden = get<std::int32_t>(in);
    hyper.mlp_hidden = get<std::int32_t>(in);
    hyper.antisymmetric = get<std::uint8_t>(in) != 0;
    Predictor p = make_predictor(static_cast<PredictorKind>(kind_idx), hyper);
    if (get<std::uint32_t>(in) != p.params.size()) throw std::runtime_error("checkpoint tensor count mismatch");
    for (auto& pt : p.params.tensors()) {
        std::string role(get<std::uint32_t>(in), '\0');
        in.read(role.data(), static_cast<std::streamsize>(role.size()));
        Shape shape(get<std::uint32_t>(in));
        for (auto& d : shape) d = get<std::uint32_t>(in);
        if (role != pt.role || shape != pt.value.shape) {
            throw std::runtime_error("checkpoint tensor " + role + " does not match " + pt.role);
        }
        for (double& v : pt.value.data) v = get<float>(in);
    }
    return p;
}

}  // namespace relsearch

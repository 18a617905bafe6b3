#include <doctest.h>

#include <numeric>

#include "relsearch/autodiff.hpp"
#include "support.hpp"

using namespace relsearch;
using test_support::random_tensor;

namespace {

using Build = std::function<Var(Tape&, ParamBinding&)>;

// Checks d(sum(w * build(params)))/d(params) against central differences,
// where w is a fixed random weighting of the op output.
double op_grad_error(ParamSet& ps, const Build& build, Rng& rng) {
    Tensor weights;
    {
        Tape t;
        ParamBinding bind(t, static_cast<const ParamSet&>(ps));
        weights = random_tensor(t.value(build(t, bind)).shape, rng);
    }
    auto loss = [&] {
        Tape t;
        ParamBinding bind(t, static_cast<const ParamSet&>(ps));
        const Tensor& out = t.value(build(t, bind));
        double s = 0.0;
        for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * weights[i];
        return s;
    };
    ps.zero_grad();
    Tape t;
    ParamBinding bind(t, ps);
    t.backward(build(t, bind), weights);
    return test_support::fd_check_params(ps, loss, rng).max_rel;
}

std::size_t add_random(ParamSet& ps, const std::string& role, Shape shape, Rng& rng,
                       double lo = -1.0, double hi = 1.0) {
    const std::size_t i = ps.add(role, shape);
    ps[i].value = random_tensor(std::move(shape), rng, lo, hi);
    return i;
}

}  // namespace

TEST_CASE("elementwise and reduction ops have exact gradients") {
    Rng rng(11);
    ParamSet ps;
    const auto a = add_random(ps, "a", {3, 4}, rng);
    const auto b = add_random(ps, "b", {3, 4}, rng);
    const Tensor c = random_tensor({3, 4}, rng);
    const Tensor w = random_tensor({3, 4}, rng);

    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::add(t, p(a), p(b)); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::sub(t, p(a), p(b)); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::scale(t, p(a), -2.5); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::add_constant(t, p(a), c); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::relu(t, p(a)); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::sigmoid(t, p(a)); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::sum(t, p(a)); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::dot_constant(t, p(a), w); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::concat(t, p(a), p(b)); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::reshape(t, p(a), {2, 6}); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) {
        return ad::gather(t, p(a), {0, 0, 5, 11, 3}, {5});
    }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) {
        Var s[] = {ad::sum(t, p(a)), ad::dot_constant(t, p(b), w), ad::sum(t, p(a))};
        return ad::mean_of(t, s);
    }, rng) < 1e-6);
}

TEST_CASE("spatial ops have exact gradients") {
    Rng rng(12);
    ParamSet ps;
    const auto x = add_random(ps, "x", {3, 4, 5, 6}, rng);
    const auto w3 = add_random(ps, "w3", {2, 3, 3, 3, 3}, rng);
    const auto w2 = add_random(ps, "w2", {3, 3, 2, 2, 2}, rng);
    const auto b = add_random(ps, "b", {2}, rng);
    const auto gamma = add_random(ps, "gamma", {3}, rng, 0.5, 1.5);
    const auto beta = add_random(ps, "beta", {3}, rng);

    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::conv3d(t, p(x), p(w3), p(b), 1, 1); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::conv3d(t, p(x), p(w3), p(b), 2, 1); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::conv3d(t, p(x), p(w2), Var{}, 2, 0); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::instance_norm(t, p(x), p(gamma), p(beta)); }, rng) < 1e-5);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::resize_trilinear(t, p(x), 8, 10, 12); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::resize_trilinear(t, p(x), 2, 7, 3); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::softmax_channels(t, p(x)); }, rng) < 1e-6);
    for (int axis = 0; axis < 3; ++axis) {
        CAPTURE(axis);
        CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::spatial_to_lines(t, p(x), axis); }, rng) < 1e-6);
        CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) {
            Var l = ad::spatial_to_lines(t, p(x), axis);
            return ad::lines_to_spatial(t, ad::scale(t, l, 2.0), axis, {3, 4, 5, 6});
        }, rng) < 1e-6);
    }
}

TEST_CASE("sequence ops have exact gradients") {
    Rng rng(13);
    ParamSet ps;
    const auto x = add_random(ps, "x", {2, 5, 4}, rng);
    const auto w = add_random(ps, "w", {3, 4}, rng);
    const auto b = add_random(ps, "b", {3}, rng);
    const auto g = add_random(ps, "g", {4}, rng, 0.5, 1.5);
    const auto be = add_random(ps, "be", {4}, rng);
    const auto q = add_random(ps, "q", {2, 5, 4}, rng);
    const auto k = add_random(ps, "k", {2, 5, 4}, rng);
    const auto rb = add_random(ps, "rb", {2 * 6 - 1}, rng);
    const auto table = add_random(ps, "table", {7, 4}, rng);
    const auto rows = add_random(ps, "rows", {5, 4}, rng);
    const auto logit = add_random(ps, "logit", {1}, rng, -3.0, 3.0);
    const int ids[] = {0, 3, 3, 6};

    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::linear(t, p(x), p(w), p(b)); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::linear(t, p(x), p(w), Var{}); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::layer_norm(t, p(x), p(g), p(be)); }, rng) < 1e-5);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::attention(t, p(q), p(k), p(x)); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::attention(t, p(q), p(k), p(x), p(rb)); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::embedding(t, p(table), ids); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::mean_rows(t, p(rows)); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::bce_with_logits(t, p(logit), 1.0); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::bce_with_logits(t, p(logit), 0.0); }, rng) < 1e-6);
    CHECK(op_grad_error(ps, [&](Tape& t, ParamBinding& p) { return ad::squared_error(t, p(logit), 0.3); }, rng) < 1e-6);
}

TEST_CASE("spatial_to_lines enumerates lines by the two other axes") {
    Tensor x({2, 2, 3, 4});
    std::iota(x.data.begin(), x.data.end(), 0.0);
    Tape t;
    Var v = t.constant(x);
    // Along y: lines indexed by (x, z); L = 3; C = 2.
    const Tensor& l = t.value(ad::spatial_to_lines(t, v, 1));
    CHECK(l.shape == Shape{8, 3, 2});
    // line (x=1, z=2) = index 1 * 4 + 2 = 6; position y=1; channel 1
    const std::size_t idx = (6 * 3 + 1) * 2 + 1;
    CHECK(l[idx] == x[((1 * 2 + 1) * 3 + 1) * 4 + 2]);
    for (int axis = 0; axis < 3; ++axis) {
        Var back = ad::lines_to_spatial(t, ad::spatial_to_lines(t, v, axis), axis, x.shape);
        CHECK(t.value(back).data == x.data);
    }
}

TEST_CASE("trilinear resize preserves constants and is identity at equal size") {
    Rng rng(2);
    Tape t;
    Var c = t.constant(Tensor({2, 2, 3, 2}, 0.75));
    for (double v : t.value(ad::resize_trilinear(t, c, 5, 4, 8)).data) CHECK(v == doctest::Approx(0.75));
    Tensor r = random_tensor({2, 3, 3, 3}, rng);
    Var rv = t.constant(r);
    CHECK(t.value(ad::resize_trilinear(t, rv, 3, 3, 3)).data == r.data);
    // Doubling along one axis with half-pixel centres: [a, b] -> [a, .75a+.25b, .25a+.75b, b].
    Var line = t.constant(Tensor({1, 1, 1, 2}, std::vector<double>{1.0, 5.0}));
    const Tensor& up = t.value(ad::resize_trilinear(t, line, 1, 1, 4));
    CHECK(up[0] == doctest::Approx(1.0));
    CHECK(up[1] == doctest::Approx(2.0));
    CHECK(up[2] == doctest::Approx(4.0));
    CHECK(up[3] == doctest::Approx(5.0));
}

TEST_CASE("attention over one element returns the values") {
    Rng rng(4);
    Tape t;
    Var q = t.constant(random_tensor({3, 1, 4}, rng));
    Var k = t.constant(random_tensor({3, 1, 4}, rng));
    Tensor vv = random_tensor({3, 1, 4}, rng);
    Var v = t.constant(vv);
    Var bias = t.constant(random_tensor({7}, rng));
    const Tensor& out = t.value(ad::attention(t, q, k, v, bias));
    for (std::size_t i = 0; i < vv.numel(); ++i) CHECK(out[i] == doctest::Approx(vv[i]));
}

TEST_CASE("attention rejects sequences longer than the bias span") {
    Tape t;
    Var q = t.constant(Tensor({1, 5, 2}, 0.1));
    Var bias = t.constant(Tensor({7}, 0.0));  // span 4
    CHECK_THROWS_AS(ad::attention(t, q, q, q, bias), std::invalid_argument);
}

TEST_CASE("relative bias shifts attention toward the favoured offset") {
    Tape t;
    Var q = t.constant(Tensor({1, 3, 1}, 0.0));
    Tensor vals({1, 3, 1}, std::vector<double>{10.0, 20.0, 30.0});
    Var v = t.constant(vals);
    Tensor b({5}, 0.0);
    b[2 + 1] = 50.0;  // offset j - i = +1
    const Tensor& out = t.value(ad::attention(t, q, q, v, t.constant(b)));
    CHECK(out[0] == doctest::Approx(20.0));
    CHECK(out[1] == doctest::Approx(30.0));
    CHECK(out[2] == doctest::Approx(20.0));  // no j = 3; uniform over all three
}

TEST_CASE("softmax over channels sums to one") {
    Rng rng(5);
    Tape t;
    const Tensor& p = t.value(ad::softmax_channels(t, t.constant(random_tensor({4, 3, 3, 3}, rng, -20, 20))));
    for (std::size_t v = 0; v < 27; ++v) {
        double s = 0.0;
        for (std::size_t c = 0; c < 4; ++c) s += p[c * 27 + v];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("frozen bindings record constants and leave gradients untouched") {
    ParamSet ps;
    const auto a = ps.add("a", {2});
    ps[a].value.fill(1.0);
    Tape t;
    ParamBinding bind(t, static_cast<const ParamSet&>(ps));
    Var s = ad::sum(t, bind(a));
    CHECK_FALSE(t.requires_grad(s));
    t.backward(s);
    CHECK(ps[a].grad[0] == 0.0);
}

TEST_CASE("non-finite gradients are reported with their role") {
    ParamSet ps;
    const auto a = ps.add("layer.w", {2});
    ps[a].grad[1] = std::nan("");
    try {
        check_finite_gradients(ps);
        FAIL("expected NanGradientError");
    } catch (const NanGradientError& e) {
        CHECK(e.role() == "layer.w");
        CHECK(std::string(e.what()).find("nan-gradient") != std::string::npos);
    }
}

TEST_CASE("embedding rejects out-of-vocabulary ids") {
    Tape t;
    Var table = t.constant(Tensor({3, 2}, 0.0));
    const int ids[] = {0, 3};
    CHECK_THROWS_AS(ad::embedding(t, table, ids), std::out_of_range);
}

#pragma once

// Tape-based reverse-mode automatic differentiation over dense tensors.
//
// Both the segmentation networks and the configuration predictors are built
// on this core. A Tape records every op in creation order, which is also a
// topological order, so backward() is one reverse sweep.

#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "relsearch/tensor.hpp"

namespace relsearch {

struct ParamTensor {
    std::string role;
    Tensor value;
    Tensor grad;
};

// Owns the learnable tensors of one model. Indices are stable, so models keep
// indices rather than pointers and stay copyable.
class ParamSet {
public:
    std::size_t add(std::string role, Shape shape);

    ParamTensor& operator[](std::size_t i) { return params_.at(i); }
    const ParamTensor& operator[](std::size_t i) const { return params_.at(i); }

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    void zero_grad();

    std::vector<ParamTensor>& tensors() { return params_; }
    const std::vector<ParamTensor>& tensors() const { return params_; }

private:
    std::vector<ParamTensor> params_;
};

class NanGradientError : public std::runtime_error {
public:
    NanGradientError(std::string role)
        : std::runtime_error("nan-gradient: non-finite gradient in " + role), role_(std::move(role)) {}
    const std::string& role() const { return role_; }

private:
    std::string role_;
};

// Throws NanGradientError naming the first parameter with a non-finite gradient.
void check_finite_gradients(const ParamSet& params);

struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;
    bool valid() const { return id != npos; }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, Var self)>;

    Var constant(Tensor value);
    Var param(ParamTensor& p);
    // Records an op result. The backward closure is dropped when no input
    // needs a gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, Backward fn);
    Var record(Tensor value, std::span<const Var> inputs, Backward fn);

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    // Gradient buffer of v, zero-allocated on first access.
    Tensor& grad(Var v);
    bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    // Seeds d(root)/d(root) = 1 for every element of root, sweeps the tape in
    // reverse, and accumulates into ParamTensor::grad.
    void backward(Var root);
    void backward(Var root, const Tensor& seed);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        ParamTensor* param = nullptr;
        Backward fn;
        bool requires_grad = false;
    };
    std::deque<Node> nodes_;
};

// Binds ParamSet entries onto a tape, each at most once. A binding over a
// const ParamSet records frozen constants, so inference never touches grads.
class ParamBinding {
public:
    ParamBinding(Tape& tape, ParamSet& params) : tape_(tape), mutable_(&params), params_(&params) {}
    ParamBinding(Tape& tape, const ParamSet& params) : tape_(tape), params_(&params) {}

    Var operator()(std::size_t index);
    Tape& tape() { return tape_; }

private:
    Tape& tape_;
    ParamSet* mutable_ = nullptr;
    const ParamSet* params_;
    std::vector<Var> bound_;
};

namespace ad {

Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var scale(Tape& t, Var a, double s);
Var add_constant(Tape& t, Var a, const Tensor& c);
Var relu(Tape& t, Var a);
Var sigmoid(Tape& t, Var a);
Var sum(Tape& t, Var a);
// Scalar sum_i a[i] * w[i] with a constant weight tensor.
Var dot_constant(Tape& t, Var a, const Tensor& w);
// Mean of a list of scalars.
Var mean_of(Tape& t, std::span<const Var> scalars);
Var concat(Tape& t, Var a, Var b);
Var reshape(Tape& t, Var a, Shape shape);
// out[i] = a[index[i]].
Var gather(Tape& t, Var a, std::vector<std::size_t> index, Shape out_shape);

// x: [C, X, Y, Z]; w: [Co, C, k, k, k]; b: [Co] or invalid.
Var conv3d(Tape& t, Var x, Var w, Var b, std::size_t stride, std::size_t pad);
// Per-channel normalization over the spatial extent with affine gamma/beta [C].
Var instance_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);
// Trilinear resampling of [C, X, Y, Z] to [C, nx, ny, nz] (half-pixel centres).
Var resize_trilinear(Tape& t, Var x, std::size_t nx, std::size_t ny, std::size_t nz);
// Softmax over the leading channel axis of [C, ...].
Var softmax_channels(Tape& t, Var x);
// [C, X, Y, Z] -> [B, L, C] where L runs along `axis` (0 = x, 1 = y, 2 = z).
Var spatial_to_lines(Tape& t, Var x, int axis);
Var lines_to_spatial(Tape& t, Var lines, int axis, const Shape& spatial_shape);

// Affine map over the last axis: x [..., in], w [out, in], b [out] or invalid.
Var linear(Tape& t, Var x, Var w, Var b);
// Normalization over the last axis with affine gamma/beta.
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);
// Rows of `table` [V, d] selected by ids -> [L, d].
Var embedding(Tape& t, Var table, std::span<const int> ids);
// Mean over rows of [L, d] -> [d].
Var mean_rows(Tape& t, Var x);
// Scaled dot-product attention over q, k, v of shape [B, L, C]. When
// rel_bias [2 * span - 1] is given, bias[(j - i) + span - 1] is added to the
// score of query i against key j.
Var attention(Tape& t, Var q, Var k, Var v, Var rel_bias = {});

// Numerically stable binary cross-entropy on a scalar logit.
Var bce_with_logits(Tape& t, Var logit, double target);
Var squared_error(Tape& t, Var pred, double target);

}  // namespace ad

}  // namespace relsearch

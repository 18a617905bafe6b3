#pragma once

// Executable 3D segmentation networks built from an ArchitectureSpec.
//
// Layout: a stride-2 3x3x3 stem (output at level 2), one node per reachable
// block, and a head (1x1x1 projection to classes, trilinear resize to the
// input size, channel softmax). A block at level l works at spatial size
// input / 2^(l-1) with c1 * 2^(l-1) channels. Each incoming edge resamples
// the producer to the consumer's level (2x2x2 stride-2 convs going down,
// trilinear going up) and then projects channels with a 1x1x1 conv; the
// adapted inputs of a node are summed.

#include <cstddef>
#include <map>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relsearch/autodiff.hpp"
#include "relsearch/search_space.hpp"
#include "relsearch/tensor.hpp"

namespace relsearch {

struct Shape3D {
    int channels = 1;
    int x = 1, y = 1, z = 1;

    bool operator==(const Shape3D&) const = default;
    Shape to_shape() const;
};

class ShapeError : public std::invalid_argument {
public:
    ShapeError(std::string rule, const std::string& what)
        : std::invalid_argument(rule + ": " + what), rule_(std::move(rule)) {}
    const std::string& rule() const { return rule_; }

private:
    std::string rule_;
};

struct NetOptions {
    int in_channels = 1;
    int num_classes = 3;
    int c1 = 16;
    // Longest axis an axial-attention pass accepts; sizes the relative bias.
    int attn_span = 64;
    // Start the head projection at zero (uniform class probabilities).
    bool zero_head = false;
};

inline constexpr int kStemSource = -1;

struct EdgeAdapter {
    int source = kStemSource;  // producing block id, or kStemSource
    int source_level = kMinLevel;
    int target_level = kMinLevel;
    int source_channels = 1;
    int target_channels = 1;
    // (weight, bias) parameter indices of each 2x2x2 stride-2 step.
    std::vector<std::pair<std::size_t, std::size_t>> down_steps;
    std::size_t proj_w = 0, proj_b = 0;

    bool resamples() const { return source_level != target_level; }
    bool upsamples() const { return source_level > target_level; }
};

struct GraphNode {
    int block_id = 0;
    OpKind op = OpKind::Residual3D;
    int level = kMinLevel;
    int channels = 1;
    std::vector<EdgeAdapter> inputs;
    std::vector<std::size_t> params;  // block-internal parameters in a fixed order
};

class NetworkGraph {
public:
    ArchitectureSpec arch;
    NetOptions options;
    ParamSet params;

    struct Stem {
        std::size_t w = 0, b = 0, gamma = 0, beta = 0;
        int channels = 1;
    } stem;
    std::vector<GraphNode> nodes;  // topological order; last is the final block
    struct Head {
        std::size_t w = 0, b = 0;
    } head;

    int channels_at(int level) const;
    const GraphNode* node(int block_id) const;

    // Records the network on a tape; returns class probabilities [K, X, Y, Z].
    Var forward(ParamBinding& bind, Var input) const;
};

struct InferredShapes {
    Shape3D stem;
    std::map<int, Shape3D> blocks;
    Shape3D head;
};

NetworkGraph build_network(const ArchitectureSpec& arch, const NetOptions& options, Rng& rng);

InferredShapes infer_shapes(const NetworkGraph& graph, const Shape3D& input);

std::size_t count_parameters(const NetworkGraph& graph);
// Parameters owned by one block's internals (adapters excluded).
std::size_t block_parameter_count(const NetworkGraph& graph, int block_id);

// Inference; parameters are read-only.
Tensor forward(const NetworkGraph& graph, const Tensor& volume);

// Gradients of sum(upstream * forward(volume)) for every parameter, in
// ParamSet order. Also left in graph.params[i].grad. Throws NanGradientError.
std::vector<Tensor> backward(NetworkGraph& graph, const Tensor& volume, const Tensor& upstream);

enum class AxialOrder { XYZ, YXZ };

// Three sequential single-axis self-attention passes with residuals. Each
// pass instance-normalizes its input before the projections and owns
// gamma, beta, wq, bq, wk, bk, wv, bv, rel_bias (9 indices, 27 in total).
Var axial_attention(ParamBinding& bind, Var features, AxialOrder order,
                    std::span<const std::size_t> param_indices);
// One pass along `axis` (0 = x, 1 = y, 2 = z) with its 9 parameter indices.
Var axial_attention_pass(ParamBinding& bind, Var features, int axis,
                         std::span<const std::size_t> pass_params);
// Adds the parameters for one axial block of `channels` to `params`.
std::vector<std::size_t> add_axial_params(ParamSet& params, const std::string& prefix,
                                          int channels, int span, Rng& rng);

nlohmann::ordered_json graph_to_json(const NetworkGraph& graph, const Shape3D* input = nullptr);
// Graphviz text. Dangling blocks of the architecture are drawn dashed.
std::string graph_to_dot(const NetworkGraph& graph);

}  // namespace relsearch

#include "relsearch/net_builder.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>
#include <sstream>
#include <tuple>

namespace relsearch {

namespace {

constexpr int kAxialParamsPerPass = 9;

// Fan-in scaled uniform init: U(-sqrt(3 / fan_in), sqrt(3 / fan_in)).
void init_uniform(ParamTensor& p, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(3.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : p.value.data) v = dist(rng);
}

std::size_t add_conv(ParamSet& ps, const std::string& role, int out_ch, int in_ch, int k, Rng& rng) {
    const auto uo = static_cast<std::size_t>(out_ch), ui = static_cast<std::size_t>(in_ch),
               uk = static_cast<std::size_t>(k);
    const std::size_t idx = ps.add(role + ".w", {uo, ui, uk, uk, uk});
    init_uniform(ps[idx], ui * uk * uk * uk, rng);
    return idx;
}

std::size_t add_bias(ParamSet& ps, const std::string& role, int n) {
    return ps.add(role + ".b", {static_cast<std::size_t>(n)});
}

std::pair<std::size_t, std::size_t> add_norm(ParamSet& ps, const std::string& role, int c) {
    const std::size_t g = ps.add(role + ".gamma", {static_cast<std::size_t>(c)});
    ps[g].value.fill(1.0);
    const std::size_t b = ps.add(role + ".beta", {static_cast<std::size_t>(c)});
    return {g, b};
}

std::string block_prefix(int id) { return "block" + std::to_string(id); }

EdgeAdapter make_adapter(ParamSet& ps, const std::string& role, int source, int source_level,
                         int source_channels, int target_level, int target_channels, Rng& rng) {
    EdgeAdapter a;
    a.source = source;
    a.source_level = source_level;
    a.target_level = target_level;
    a.source_channels = source_channels;
    a.target_channels = target_channels;
    for (int step = 0; step < target_level - source_level; ++step) {
        const std::string r = role + ".down" + std::to_string(step);
        const std::size_t w = add_conv(ps, r, source_channels, source_channels, 2, rng);
        a.down_steps.emplace_back(w, add_bias(ps, r, source_channels));
    }
    a.proj_w = add_conv(ps, role + ".proj", target_channels, source_channels, 1, rng);
    a.proj_b = add_bias(ps, role + ".proj", target_channels);
    return a;
}

Var conv_norm_relu(ParamBinding& bind, Var x, std::size_t w, std::size_t b, std::size_t g,
                   std::size_t beta, std::size_t pad, bool relu) {
    Tape& t = bind.tape();
    Var h = ad::conv3d(t, x, bind(w), bind(b), 1, pad);
    h = ad::instance_norm(t, h, bind(g), bind(beta));
    return relu ? ad::relu(t, h) : h;
}

Var apply_adapter(ParamBinding& bind, const EdgeAdapter& a, Var x, const Shape3D& target_dims) {
    Tape& t = bind.tape();
    Var h = x;
    for (const auto& [w, b] : a.down_steps) h = ad::conv3d(t, h, bind(w), bind(b), 2, 0);
    if (a.upsamples()) {
        h = ad::resize_trilinear(t, h, static_cast<std::size_t>(target_dims.x),
                                 static_cast<std::size_t>(target_dims.y),
                                 static_cast<std::size_t>(target_dims.z));
    }
    return ad::conv3d(t, h, bind(a.proj_w), bind(a.proj_b), 1, 0);
}

Var run_block(ParamBinding& bind, const GraphNode& n, Var x) {
    Tape& t = bind.tape();
    const auto& p = n.params;
    switch (n.op) {
        case OpKind::Residual3D: {
            Var h = conv_norm_relu(bind, x, p[0], p[1], p[2], p[3], 1, true);
            h = conv_norm_relu(bind, h, p[4], p[5], p[6], p[7], 1, false);
            return ad::relu(t, ad::add(t, h, x));
        }
        case OpKind::Bottleneck3D: {
            Var h = conv_norm_relu(bind, x, p[0], p[1], p[2], p[3], 0, true);
            h = conv_norm_relu(bind, h, p[4], p[5], p[6], p[7], 1, true);
            h = conv_norm_relu(bind, h, p[8], p[9], p[10], p[11], 0, false);
            return ad::relu(t, ad::add(t, h, x));
        }
        case OpKind::AxialAttnXYZ: return axial_attention(bind, x, AxialOrder::XYZ, p);
        case OpKind::AxialAttnYXZ: return axial_attention(bind, x, AxialOrder::YXZ, p);
    }
    throw std::logic_error("unknown block kind");
}

Shape3D level_dims(const Shape3D& input, int level, int channels) {
    const int f = 1 << (level - 1);
    return {channels, input.x / f, input.y / f, input.z / f};
}

Shape3D shape_of(const Tensor& t) {
    return {static_cast<int>(t.dim(0)), static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)),
            static_cast<int>(t.dim(3))};
}

void check_input(const NetworkGraph& g, const Tensor& volume) {
    if (volume.rank() != 4 || volume.dim(0) != static_cast<std::size_t>(g.options.in_channels)) {
        throw ShapeError("shape-mismatch", "expected input (" + std::to_string(g.options.in_channels) +
                                               ",x,y,z), got " + shape_to_string(volume.shape));
    }
    (void)infer_shapes(g, shape_of(volume));
}

}  // namespace

Shape Shape3D::to_shape() const {
    return {static_cast<std::size_t>(channels), static_cast<std::size_t>(x),
            static_cast<std::size_t>(y), static_cast<std::size_t>(z)};
}

int NetworkGraph::channels_at(int level) const { return options.c1 * (1 << (level - 1)); }

const GraphNode* NetworkGraph::node(int block_id) const {
    for (const auto& n : nodes) {
        if (n.block_id == block_id) return &n;
    }
    return nullptr;
}

std::vector<std::size_t> add_axial_params(ParamSet& ps, const std::string& prefix, int channels,
                                          int span, Rng& rng) {
    std::vector<std::size_t> idx;
    const auto c = static_cast<std::size_t>(channels);
    for (int pass = 0; pass < 3; ++pass) {
        const std::string r = prefix + ".pass" + std::to_string(pass);
        const std::size_t g = ps.add(r + ".norm.gamma", {c});
        ps[g].value.fill(1.0);
        idx.push_back(g);
        idx.push_back(ps.add(r + ".norm.beta", {c}));
        for (const char* proj : {"q", "k", "v"}) {
            const std::size_t w = ps.add(r + "." + proj + ".w", {c, c});
            init_uniform(ps[w], c, rng);
            idx.push_back(w);
            idx.push_back(ps.add(r + "." + proj + ".b", {c}));
        }
        idx.push_back(ps.add(r + ".rel_bias", {static_cast<std::size_t>(2 * span - 1)}));
    }
    return idx;
}

Var axial_attention_pass(ParamBinding& bind, Var features, int axis,
                         std::span<const std::size_t> p) {
    Tape& t = bind.tape();
    const Shape spatial = t.value(features).shape;
    Var lines = ad::spatial_to_lines(t, features, axis);
    Var normed =
        ad::spatial_to_lines(t, ad::instance_norm(t, features, bind(p[0]), bind(p[1])), axis);
    Var q = ad::linear(t, normed, bind(p[2]), bind(p[3]));
    Var k = ad::linear(t, normed, bind(p[4]), bind(p[5]));
    Var v = ad::linear(t, normed, bind(p[6]), bind(p[7]));
    Var a = ad::attention(t, q, k, v, bind(p[8]));
    return ad::lines_to_spatial(t, ad::add(t, lines, a), axis, spatial);
}

Var axial_attention(ParamBinding& bind, Var features, AxialOrder order,
                    std::span<const std::size_t> param_indices) {
    if (param_indices.size() != 3 * kAxialParamsPerPass) {
        throw std::invalid_argument("axial attention expects 27 parameter indices");
    }
    const int xyz[3] = {0, 1, 2};
    const int yxz[3] = {1, 0, 2};
    const int* axes = order == AxialOrder::XYZ ? xyz : yxz;
    Var h = features;
    for (int pass = 0; pass < 3; ++pass) {
        h = axial_attention_pass(bind, h, axes[pass],
                                 param_indices.subspan(static_cast<std::size_t>(pass) *
                                                           kAxialParamsPerPass,
                                                       kAxialParamsPerPass));
    }
    return h;
}

NetworkGraph build_network(const ArchitectureSpec& arch, const NetOptions& options, Rng& rng) {
    auto report = validate_architecture(arch);
    if (!report.ok()) throw ValidationError(std::move(report));
    if (options.c1 < 1) throw std::invalid_argument("c1 must be >= 1");
    if (options.num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
    if (options.in_channels < 1) throw std::invalid_argument("in_channels must be >= 1");

    NetworkGraph g;
    g.arch = arch;
    g.options = options;
    ParamSet& ps = g.params;

    g.stem.channels = g.channels_at(kMinLevel);
    g.stem.w = add_conv(ps, "stem.conv", g.stem.channels, options.in_channels, 3, rng);
    g.stem.b = add_bias(ps, "stem.conv", g.stem.channels);
    std::tie(g.stem.gamma, g.stem.beta) = add_norm(ps, "stem.norm", g.stem.channels);

    const std::set<int> live = reachable_blocks(arch);
    for (const BlockSpec& b : arch.blocks) {
        if (!live.count(b.block_id)) continue;
        GraphNode n;
        n.block_id = b.block_id;
        n.op = b.op;
        n.level = b.level;
        n.channels = g.channels_at(b.level);
        const std::string pre = block_prefix(b.block_id);

        std::vector<int> sources;
        if (b.block_id == 0) {
            sources = {kStemSource};
        } else {
            for (int p : {b.pred1, b.pred2}) {
                if (p != kNoPredecessor) sources.push_back(p);
            }
        }
        for (std::size_t e = 0; e < sources.size(); ++e) {
            const int src = sources[e];
            const int src_level = src == kStemSource ? kMinLevel : arch.blocks[static_cast<std::size_t>(src)].level;
            n.inputs.push_back(make_adapter(ps, pre + ".in" + std::to_string(e), src, src_level,
                                            g.channels_at(src_level), b.level, n.channels, rng));
        }

        const int c = n.channels;
        switch (b.op) {
            case OpKind::Residual3D:
                for (int i = 1; i <= 2; ++i) {
                    const std::string r = pre + ".conv" + std::to_string(i);
                    n.params.push_back(add_conv(ps, r, c, c, 3, rng));
                    n.params.push_back(add_bias(ps, r, c));
                    auto [gm, bt] = add_norm(ps, pre + ".norm" + std::to_string(i), c);
                    n.params.push_back(gm);
                    n.params.push_back(bt);
                }
                break;
            case OpKind::Bottleneck3D: {
                const int r = std::max(1, c / 4);
                const int outs[3] = {r, r, c};
                const int ins[3] = {c, r, r};
                const int ks[3] = {1, 3, 1};
                for (int i = 0; i < 3; ++i) {
                    const std::string role = pre + ".conv" + std::to_string(i + 1);
                    n.params.push_back(add_conv(ps, role, outs[i], ins[i], ks[i], rng));
                    n.params.push_back(add_bias(ps, role, outs[i]));
                    auto [gm, bt] = add_norm(ps, pre + ".norm" + std::to_string(i + 1), outs[i]);
                    n.params.push_back(gm);
                    n.params.push_back(bt);
                }
                break;
            }
            case OpKind::AxialAttnXYZ:
            case OpKind::AxialAttnYXZ:
                n.params = add_axial_params(ps, pre + ".axial", c, options.attn_span, rng);
                break;
        }
        g.nodes.push_back(std::move(n));
    }

    const int final_channels = g.nodes.back().channels;
    g.head.w = add_conv(ps, "head.proj", options.num_classes, final_channels, 1, rng);
    g.head.b = add_bias(ps, "head.proj", options.num_classes);
    if (options.zero_head) ps[g.head.w].value.fill(0.0);
    return g;
}

InferredShapes infer_shapes(const NetworkGraph& graph, const Shape3D& input) {
    if (input.channels != graph.options.in_channels) {
        throw ShapeError("shape-mismatch", "expected " + std::to_string(graph.options.in_channels) +
                                               " input channels, got " +
                                               std::to_string(input.channels));
    }
    int max_level = kMinLevel;
    for (const auto& n : graph.nodes) max_level = std::max(max_level, n.level);
    for (int level = kMinLevel; level <= max_level; ++level) {
        const int f = 1 << (level - 1);
        if (input.x % f || input.y % f || input.z % f) {
            throw ShapeError("indivisible-input",
                             "input (" + std::to_string(input.x) + "," + std::to_string(input.y) +
                                 "," + std::to_string(input.z) + ") not divisible by " +
                                 std::to_string(f) + " required by level " + std::to_string(level));
        }
    }
    for (const auto& n : graph.nodes) {
        if (n.op != OpKind::AxialAttnXYZ && n.op != OpKind::AxialAttnYXZ) continue;
        const Shape3D d = level_dims(input, n.level, n.channels);
        if (std::max({d.x, d.y, d.z}) > graph.options.attn_span) {
            throw ShapeError("attention-span-exceeded",
                             "block " + std::to_string(n.block_id) + " axis longer than span " +
                                 std::to_string(graph.options.attn_span));
        }
    }
    InferredShapes s;
    s.stem = level_dims(input, kMinLevel, graph.stem.channels);
    for (const auto& n : graph.nodes) s.blocks[n.block_id] = level_dims(input, n.level, n.channels);
    s.head = {graph.options.num_classes, input.x, input.y, input.z};
    return s;
}

Var NetworkGraph::forward(ParamBinding& bind, Var input) const {
    Tape& t = bind.tape();
    const Shape3D in_shape = shape_of(t.value(input));
    infer_shapes(*this, in_shape);

    Var stem_out = ad::conv3d(t, input, bind(stem.w), bind(stem.b), 2, 1);
    stem_out = ad::relu(t, ad::instance_norm(t, stem_out, bind(stem.gamma), bind(stem.beta)));

    std::map<int, Var> outputs;
    for (const auto& n : nodes) {
        const Shape3D dims = level_dims(in_shape, n.level, n.channels);
        Var fused;
        for (const auto& a : n.inputs) {
            Var src = a.source == kStemSource ? stem_out : outputs.at(a.source);
            Var adapted = apply_adapter(bind, a, src, dims);
            fused = fused.valid() ? ad::add(t, fused, adapted) : adapted;
        }
        outputs[n.block_id] = run_block(bind, n, fused);
    }
    Var logits = ad::conv3d(t, outputs.at(nodes.back().block_id), bind(head.w), bind(head.b), 1, 0);
    logits = ad::resize_trilinear(t, logits, static_cast<std::size_t>(in_shape.x),
                                  static_cast<std::size_t>(in_shape.y),
                                  static_cast<std::size_t>(in_shape.z));
    return ad::softmax_channels(t, logits);
}

std::size_t count_parameters(const NetworkGraph& graph) { return graph.params.scalar_count(); }

std::size_t block_parameter_count(const NetworkGraph& graph, int block_id) {
    const GraphNode* n = graph.node(block_id);
    if (!n) return 0;
    std::size_t total = 0;
    for (std::size_t idx : n->params) total += graph.params[idx].value.numel();
    return total;
}

Tensor forward(const NetworkGraph& graph, const Tensor& volume) {
    check_input(graph, volume);
    Tape t;
    ParamBinding bind(t, graph.params);
    Var out = graph.forward(bind, t.constant(volume));
    return t.value(out);
}

std::vector<Tensor> backward(NetworkGraph& graph, const Tensor& volume, const Tensor& upstream) {
    check_input(graph, volume);
    graph.params.zero_grad();
    Tape t;
    ParamBinding bind(t, graph.params);
    Var out = graph.forward(bind, t.constant(volume));
    t.backward(out, upstream);
    check_finite_gradients(graph.params);
    std::vector<Tensor> grads;
    grads.reserve(graph.params.size());
    for (const auto& p : graph.params.tensors()) grads.push_back(p.grad);
    return grads;
}

nlohmann::ordered_json graph_to_json(const NetworkGraph& graph, const Shape3D* input) {
    using nlohmann::ordered_json;
    ordered_json j;
    j["schema_version"] = 1;
    j["c1"] = graph.options.c1;
    j["in_channels"] = graph.options.in_channels;
    j["num_classes"] = graph.options.num_classes;
    std::optional<InferredShapes> shapes;
    if (input) shapes = infer_shapes(graph, *input);
    auto shape_json = [](const Shape3D& s) { return ordered_json::array({s.channels, s.x, s.y, s.z}); };

    auto count = [&](std::initializer_list<std::size_t> idx) {
        std::size_t n = 0;
        for (std::size_t i : idx) n += graph.params[i].value.numel();
        return n;
    };
    ordered_json nodes = ordered_json::array();
    ordered_json stem;
    stem["id"] = "stem";
    stem["level"] = kMinLevel;
    stem["channels"] = graph.stem.channels;
    stem["params"] = count({graph.stem.w, graph.stem.b, graph.stem.gamma, graph.stem.beta});
    if (shapes) stem["shape"] = shape_json(shapes->stem);
    nodes.push_back(stem);

    ordered_json edges = ordered_json::array();
    for (const auto& n : graph.nodes) {
        ordered_json node;
        node["id"] = block_prefix(n.block_id);
        node["block_id"] = n.block_id;
        node["op"] = op_kind_name(n.op);
        node["level"] = n.level;
        node["channels"] = n.channels;
        node["params"] = block_parameter_count(graph, n.block_id);
        if (shapes) node["shape"] = shape_json(shapes->blocks.at(n.block_id));
        nodes.push_back(node);
        for (const auto& a : n.inputs) {
            ordered_json e;
            e["from"] = a.source == kStemSource ? std::string("stem") : block_prefix(a.source);
            e["to"] = block_prefix(n.block_id);
            e["adapter"] = a.upsamples() ? "upsample" : (a.resamples() ? "downsample" : "none");
            e["from_level"] = a.source_level;
            e["to_level"] = a.target_level;
            std::size_t np = count({a.proj_w, a.proj_b});
            for (const auto& [w, b] : a.down_steps) np += count({w, b});
            e["params"] = np;
            edges.push_back(e);
        }
    }
    ordered_json head;
    head["id"] = "head";
    head["channels"] = graph.options.num_classes;
    head["params"] = count({graph.head.w, graph.head.b});
    if (shapes) head["shape"] = shape_json(shapes->head);
    nodes.push_back(head);
    edges.push_back({{"from", block_prefix(graph.nodes.back().block_id)},
                     {"to", "head"},
                     {"adapter", "upsample"},
                     {"from_level", graph.nodes.back().level},
                     {"to_level", 1},
                     {"params", 0}});
    j["nodes"] = std::move(nodes);
    j["edges"] = std::move(edges);
    j["total_params"] = count_parameters(graph);
    return j;
}

std::string graph_to_dot(const NetworkGraph& graph) {
    std::ostringstream os;
    os << "digraph network {\n";
    os << "  rankdir=LR;\n";
    os << "  stem [shape=box, style=solid, label=\"stem\\nL2 c" << graph.stem.channels << "\"];\n";
    const std::set<int> live = reachable_blocks(graph.arch);
    static const char* shapes[] = {"box", "hexagon", "ellipse", "diamond"};
    for (const BlockSpec& b : graph.arch.blocks) {
        const bool alive = live.count(b.block_id) > 0;
        os << "  " << block_prefix(b.block_id) << " [shape=" << shapes[static_cast<int>(b.op)]
           << ", style=" << (alive ? "solid" : "dashed") << ", label=\"" << b.block_id << " "
           << op_kind_name(b.op) << "\\nL" << b.level << " c" << graph.channels_at(b.level)
           << "\"];\n";
    }
    os << "  head [shape=box, style=solid, label=\"head\\nsoftmax " << graph.options.num_classes
       << "\"];\n";
    for (const BlockSpec& b : graph.arch.blocks) {
        const bool alive = live.count(b.block_id) > 0;
        std::vector<int> srcs;
        if (b.block_id == 0) {
            srcs = {kStemSource};
        } else {
            for (int p : {b.pred1, b.pred2}) {
                if (p != kNoPredecessor) srcs.push_back(p);
            }
        }
        for (int s : srcs) {
            os << "  " << (s == kStemSource ? std::string("stem") : block_prefix(s)) << " -> "
               << block_prefix(b.block_id) << " [style=" << (alive ? "solid" : "dashed") << "];\n";
        }
    }
    os << "  " << block_prefix(graph.arch.block_count() - 1) << " -> head [style=solid];\n";
    os << "}\n";
    return os.str();
}

}  // namespace relsearch

#include "relsearch/encoding.hpp"

#include <sstream>

namespace relsearch {

namespace {

const char* kind_name(DecodeError::Kind k) {
    return k == DecodeError::Kind::MalformedLength ? "malformed-length" : "token-out-of-range";
}

void expect_range(const std::vector<int>& t, std::size_t pos, int lo, int hi) {
    if (t[pos] < lo || t[pos] > hi) {
        throw DecodeError(DecodeError::Kind::TokenOutOfRange, pos,
                          "token " + std::to_string(t[pos]) + " outside [" + std::to_string(lo) +
                              ", " + std::to_string(hi) + "]");
    }
}

}  // namespace

DecodeError::DecodeError(Kind kind, std::size_t position, const std::string& what)
    : std::invalid_argument(std::string(kind_name(kind)) + " at position " +
                            std::to_string(position) + ": " + what),
      kind_(kind),
      position_(position) {}

EncodedConfig encode(const Configuration& config) {
    EncodedConfig out;
    const auto& blocks = config.arch().blocks;
    out.tokens.reserve(blocks.size() * kTokensPerBlock + kTailTokens);
    for (const auto& b : blocks) {
        out.tokens.insert(out.tokens.end(),
                          {b.block_id, static_cast<int>(b.op), b.level, b.pred1, b.pred2});
    }
    out.tokens.insert(out.tokens.end(), config.aug().slots.begin(), config.aug().slots.end());
    const auto& hp = config.hp();
    out.tokens.insert(out.tokens.end(), {hp.lr_idx, hp.sched_idx, hp.loss_idx, hp.opt_idx});
    return out;
}

Configuration decode(const EncodedConfig& vec) {
    const auto& t = vec.tokens;
    const int len = static_cast<int>(t.size());
    if (len < kMinEncodedLength || len > kMaxEncodedLength ||
        (len - kTailTokens) % kTokensPerBlock != 0) {
        throw DecodeError(DecodeError::Kind::MalformedLength, 0,
                          "length " + std::to_string(len) + " is not 5*N+9 with N in [5,12]");
    }
    const int n = (len - kTailTokens) / kTokensPerBlock;
    ArchitectureSpec arch;
    for (int i = 0; i < n; ++i) {
        const std::size_t base = static_cast<std::size_t>(i * kTokensPerBlock);
        expect_range(t, base, i, i);
        expect_range(t, base + 1, 0, kOpKindCount - 1);
        expect_range(t, base + 2, kMinLevel, kMaxLevel);
        if (i == 0) {
            expect_range(t, base + 3, kNoPredecessor, kNoPredecessor);
            expect_range(t, base + 4, kNoPredecessor, kNoPredecessor);
        } else if (i == 1) {
            expect_range(t, base + 3, 0, 0);
            expect_range(t, base + 4, kNoPredecessor, kNoPredecessor);
        } else {
            expect_range(t, base + 3, 0, i - 1);
            expect_range(t, base + 4, 0, i - 1);
        }
        arch.blocks.push_back(
            {t[base], static_cast<OpKind>(t[base + 1]), t[base + 2], t[base + 3], t[base + 4]});
    }
    std::size_t pos = static_cast<std::size_t>(n * kTokensPerBlock);
    AugmentationPlan aug;
    for (int s = 0; s < kAugSlots; ++s, ++pos) {
        expect_range(t, pos, 0, kAugCandidates - 1);
        aug.slots.push_back(t[pos]);
    }
    TrainHyperParams hp;
    expect_range(t, pos, 0, kLrChoices - 1);
    hp.lr_idx = t[pos++];
    expect_range(t, pos, 0, kSchedChoices - 1);
    hp.sched_idx = t[pos++];
    expect_range(t, pos, 0, kLossChoices - 1);
    hp.loss_idx = t[pos++];
    expect_range(t, pos, 0, kOptChoices - 1);
    hp.opt_idx = t[pos++];
    return Configuration(std::move(arch), std::move(aug), hp);
}

nlohmann::json to_json(const EncodedConfig& vec) { return vec.tokens; }

EncodedConfig encoded_from_json(const nlohmann::json& j) {
    return EncodedConfig{j.get<std::vector<int>>()};
}

std::string to_text(const EncodedConfig& vec) {
    std::string s;
    for (std::size_t i = 0; i < vec.tokens.size(); ++i) {
        if (i) s += ' ';
        s += std::to_string(vec.tokens[i]);
    }
    return s;
}

EncodedConfig encoded_from_text(const std::string& line) {
    std::istringstream is(line);
    EncodedConfig out;
    int v = 0;
    while (is >> v) out.tokens.push_back(v);
    if (!is.eof()) throw std::invalid_argument("encoded text contains a non-integer token");
    return out;
}

}  // namespace relsearch

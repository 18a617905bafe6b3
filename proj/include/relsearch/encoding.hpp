#pragma once

// Flat integer encoding of a Configuration:
//   [id, op, level, pred1, pred2] per block, then 5 augmentation slots, then
//   [lr_idx, sched_idx, loss_idx, opt_idx].
// Length is 5 * N + 9, so N = (length - 9) / 5 and length is in {34, ..., 69}.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "relsearch/search_space.hpp"

namespace relsearch {

inline constexpr int kTokensPerBlock = 5;
inline constexpr int kTailTokens = kAugSlots + 4;
inline constexpr int kMinEncodedLength = kTokensPerBlock * kMinBlocks + kTailTokens;  // 34
inline constexpr int kMaxEncodedLength = kTokensPerBlock * kMaxBlocks + kTailTokens;  // 69

struct EncodedConfig {
    std::vector<int> tokens;

    std::size_t size() const { return tokens.size(); }
    int block_count() const { return (static_cast<int>(tokens.size()) - kTailTokens) / kTokensPerBlock; }
    bool operator==(const EncodedConfig&) const = default;
    auto operator<=>(const EncodedConfig&) const = default;
};

class DecodeError : public std::invalid_argument {
public:
    enum class Kind { MalformedLength, TokenOutOfRange };

    DecodeError(Kind kind, std::size_t position, const std::string& what);
    Kind kind() const { return kind_; }
    // Offending token position; 0 for length errors.
    std::size_t position() const { return position_; }

private:
    Kind kind_;
    std::size_t position_;
};

EncodedConfig encode(const Configuration& config);
Configuration decode(const EncodedConfig& vec);

nlohmann::json to_json(const EncodedConfig& vec);
EncodedConfig encoded_from_json(const nlohmann::json& j);
// Space-separated one-line form used in logs.
std::string to_text(const EncodedConfig& vec);
EncodedConfig encoded_from_text(const std::string& line);

}  // namespace relsearch

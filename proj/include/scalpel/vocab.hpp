#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace scalpel {

using TokenId = std::int32_t;

// Fixed shared vocabulary covering problem descriptions, test renderings,
// the code initiator, and the mini expression language.
class Vocab {
  public:
    Vocab();

    TokenId id(const std::string& lexeme) const;
    std::optional<TokenId> try_id(const std::string& lexeme) const;
    const std::string& lexeme(TokenId id) const;
    std::size_t size() const { return lexemes_.size(); }

    TokenId bos() const { return bos_; }
    TokenId eos() const { return eos_; }
    TokenId newline() const { return nl_; }
    TokenId instruct() const { return inst_; }
    TokenId digit(int d) const;  // d in [0, 9]

    std::string detokenize(const std::vector<TokenId>& tokens) const;
    std::vector<std::string> all_lexemes() const { return lexemes_; }

  private:
    std::vector<std::string> lexemes_;
    std::unordered_map<std::string, TokenId> index_;
    TokenId bos_, eos_, nl_, inst_, digit0_;
};

const Vocab& vocab();  // process-wide singleton (vocabulary is fixed)

}  // namespace scalpel

#include "scalpel/vocab.hpp"

#include <stdexcept>

namespace scalpel {

Vocab::Vocab() {
    auto add = [this](const std::string& s) {
        TokenId id = static_cast<TokenId>(lexemes_.size());
        lexemes_.push_back(s);
        index_.emplace(s, id);
        return id;
    };
    bos_ = add("<bos>");
    eos_ = add("<eos>");
    nl_ = add("<nl>");
    inst_ = add("<inst>");
    digit0_ = add("0");
    for (int d = 1; d <= 9; ++d) add(std::to_string(d));
    // expression tokens
    add("x");
    add("+");
    add("-");
    add("*");
    add("(");
    add(")");
    // test / initiator tokens
    add("def");
    add("f");
    add(":");
    add("return");
    add("assert");
    add("=");
    add(",");
    // description words
    add("write");
    add("a");
    add("function");
    add("that");
    add("computes");
    add("plus");
    add("minus");
    add("times");
    add("open");
    add("close");
    add("the");
    add("input");
    add("value");
    add("of");
    add("result");
    add("number");
    add("and");
    add("given");
}

TokenId Vocab::id(const std::string& lexeme) const {
    auto it = index_.find(lexeme);
    if (it == index_.end()) throw std::out_of_range("unknown lexeme: " + lexeme);
    return it->second;
}

std::optional<TokenId> Vocab::try_id(const std::string& lexeme) const {
    auto it = index_.find(lexeme);
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

const std::string& Vocab::lexeme(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= lexemes_.size())
        throw std::out_of_range("token id out of range");
    return lexemes_[static_cast<std::size_t>(id)];
}

TokenId Vocab::digit(int d) const {
    if (d < 0 || d > 9) throw std::out_of_range("digit out of range");
    return digit0_ + d;
}

std::string Vocab::detokenize(const std::vector<TokenId>& tokens) const {
    std::string out;
    for (TokenId t : tokens) {
        if (!out.empty()) out.push_back(' ');
        out += lexeme(t);
    }
    return out;
}

const Vocab& vocab() {
    static const Vocab v;
    return v;
}

}  // namespace scalpel

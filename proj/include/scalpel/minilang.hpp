#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "scalpel/vocab.hpp"

namespace scalpel {
namespace minilang {

// Expressions over the variable x, single-digit literals 0-9, binary + - *,
// and parentheses. * binds tighter than + and -; all operators associate left.

enum class NodeKind { Var, Literal, Add, Sub, Mul };

struct Expr {
    NodeKind kind;
    int value = 0;  // Literal only
    std::unique_ptr<Expr> lhs, rhs;

    static std::unique_ptr<Expr> var();
    static std::unique_ptr<Expr> lit(int v);
    static std::unique_ptr<Expr> op(NodeKind k, std::unique_ptr<Expr> l, std::unique_ptr<Expr> r);
    std::unique_ptr<Expr> clone() const;
};

std::int64_t eval(const Expr& e, std::int64_t x);
int depth(const Expr& e);
bool contains_var(const Expr& e);

// Token renderings against the shared vocabulary.
std::vector<TokenId> to_tokens(const Expr& e);

struct ParseResult {
    std::unique_ptr<Expr> expr;  // null on failure
    std::string error;
};

// Recursive-descent parser over vocabulary token ids. The whole sequence must
// be one expression; trailing tokens are a parse error.
ParseResult parse(const std::vector<TokenId>& tokens);

// Multi-digit (optionally negative) integer rendering as digit tokens.
std::vector<TokenId> render_int(std::int64_t v);

}  // namespace minilang
}  // namespace scalpel

#include "scalpel/minilang.hpp"

#include <algorithm>

namespace scalpel {
namespace minilang {

std::unique_ptr<Expr> Expr::var() {
    auto e = std::make_unique<Expr>();
    e->kind = NodeKind::Var;
    return e;
}

std::unique_ptr<Expr> Expr::lit(int v) {
    auto e = std::make_unique<Expr>();
    e->kind = NodeKind::Literal;
    e->value = v;
    return e;
}

std::unique_ptr<Expr> Expr::op(NodeKind k, std::unique_ptr<Expr> l, std::unique_ptr<Expr> r) {
    auto e = std::make_unique<Expr>();
    e->kind = k;
    e->lhs = std::move(l);
    e->rhs = std::move(r);
    return e;
}

std::unique_ptr<Expr> Expr::clone() const {
    auto e = std::make_unique<Expr>();
    e->kind = kind;
    e->value = value;
    if (lhs) e->lhs = lhs->clone();
    if (rhs) e->rhs = rhs->clone();
    return e;
}

std::int64_t eval(const Expr& e, std::int64_t x) {
    switch (e.kind) {
        case NodeKind::Var: return x;
        case NodeKind::Literal: return e.value;
        case NodeKind::Add: return eval(*e.lhs, x) + eval(*e.rhs, x);
        case NodeKind::Sub: return eval(*e.lhs, x) - eval(*e.rhs, x);
        case NodeKind::Mul: return eval(*e.lhs, x) * eval(*e.rhs, x);
    }
    return 0;
}

int depth(const Expr& e) {
    if (e.kind == NodeKind::Var || e.kind == NodeKind::Literal) return 0;
    return 1 + std::max(depth(*e.lhs), depth(*e.rhs));
}

bool contains_var(const Expr& e) {
    if (e.kind == NodeKind::Var) return true;
    if (e.kind == NodeKind::Literal) return false;
    return contains_var(*e.lhs) || contains_var(*e.rhs);
}

namespace {

// Emission parenthesizes sub-expressions whenever precedence requires it, so
// re-parsing reproduces the same tree value.
int precedence(NodeKind k) {
    return k == NodeKind::Mul ? 2 : (k == NodeKind::Var || k == NodeKind::Literal ? 3 : 1);
}

void emit(const Expr& e, std::vector<TokenId>& out) {
    const Vocab& v = vocab();
    switch (e.kind) {
        case NodeKind::Var: out.push_back(v.id("x")); return;
        case NodeKind::Literal: out.push_back(v.digit(e.value)); return;
        default: break;
    }
    auto side = [&](const Expr& child, bool right) {
        int pc = precedence(child.kind);
        int pe = precedence(e.kind);
        bool need = pc < pe || (right && pc == pe);
        if (need) out.push_back(v.id("("));
        emit(child, out);
        if (need) out.push_back(v.id(")"));
    };
    side(*e.lhs, false);
    out.push_back(v.id(e.kind == NodeKind::Add ? "+" : e.kind == NodeKind::Sub ? "-" : "*"));
    side(*e.rhs, true);
}

struct Parser {
    const std::vector<TokenId>& toks;
    std::size_t pos = 0;
    std::string error;

    TokenId xid, plus, minus, star, lparen, rparen, d0;

    explicit Parser(const std::vector<TokenId>& t) : toks(t) {
        const Vocab& v = vocab();
        xid = v.id("x");
        plus = v.id("+");
        minus = v.id("-");
        star = v.id("*");
        lparen = v.id("(");
        rparen = v.id(")");
        d0 = v.digit(0);
    }

    bool at_end() const { return pos >= toks.size(); }
    TokenId peek() const { return toks[pos]; }

    std::unique_ptr<Expr> expr() {
        auto lhs = term();
        if (!lhs) return nullptr;
        while (!at_end() && (peek() == plus || peek() == minus)) {
            NodeKind k = peek() == plus ? NodeKind::Add : NodeKind::Sub;
            ++pos;
            auto rhs = term();
            if (!rhs) return nullptr;
            lhs = Expr::op(k, std::move(lhs), std::move(rhs));
        }
        return lhs;
    }

    std::unique_ptr<Expr> term() {
        auto lhs = factor();
        if (!lhs) return nullptr;
        while (!at_end() && peek() == star) {
            ++pos;
            auto rhs = factor();
            if (!rhs) return nullptr;
            lhs = Expr::op(NodeKind::Mul, std::move(lhs), std::move(rhs));
        }
        return lhs;
    }

    std::unique_ptr<Expr> factor() {
        if (at_end()) {
            error = "unexpected end of expression";
            return nullptr;
        }
        TokenId t = peek();
        if (t == xid) {
            ++pos;
            return Expr::var();
        }
        if (t >= d0 && t <= d0 + 9) {
            ++pos;
            return Expr::lit(static_cast<int>(t - d0));
        }
        if (t == lparen) {
            ++pos;
            auto inner = expr();
            if (!inner) return nullptr;
            if (at_end() || peek() != rparen) {
                error = "missing closing parenthesis";
                return nullptr;
            }
            ++pos;
            return inner;
        }
        error = "unexpected token '" + vocab().lexeme(t) + "'";
        return nullptr;
    }
};

}  // namespace

std::vector<TokenId> to_tokens(const Expr& e) {
    std::vector<TokenId> out;
    emit(e, out);
    return out;
}

ParseResult parse(const std::vector<TokenId>& tokens) {
    if (tokens.empty()) return {nullptr, "empty expression"};
    Parser p(tokens);
    auto e = p.expr();
    if (!e) return {nullptr, p.error};
    if (!p.at_end()) return {nullptr, "trailing tokens after expression"};
    return {std::move(e), ""};
}

std::vector<TokenId> render_int(std::int64_t v) {
    const Vocab& voc = vocab();
    std::vector<TokenId> out;
    if (v < 0) {
        out.push_back(voc.id("-"));
        v = -v;
    }
    std::string s = std::to_string(v);
    for (char c : s) out.push_back(voc.digit(c - '0'));
    return out;
}

}  // namespace minilang
}  // namespace scalpel

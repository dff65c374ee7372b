#include "scalpel/model.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "scalpel/io.hpp"
#include "scalpel/rng.hpp"

namespace scalpel {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x) {
    const double c = 0.7978845608028654;  // sqrt(2/pi)
    double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
    const double c = 0.7978845608028654;
    double u = c * (x + 0.044715 * x * x * x);
    double t = std::tanh(u);
    double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

struct LnCache {
    Eigen::MatrixXd xhat;     // seq x d
    Eigen::VectorXd invstd;   // per row
};

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& g,
                           const Eigen::VectorXd& b, LnCache* cache) {
    const Eigen::Index n = x.rows(), d = x.cols();
    Eigen::MatrixXd out(n, d);
    Eigen::MatrixXd xhat(n, d);
    Eigen::VectorXd invstd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double mu = x.row(i).mean();
        double var = (x.row(i).array() - mu).square().mean();
        double is = 1.0 / std::sqrt(var + kLnEps);
        invstd(i) = is;
        xhat.row(i) = (x.row(i).array() - mu) * is;
        out.row(i) = xhat.row(i).cwiseProduct(g.transpose()) + b.transpose();
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->invstd = std::move(invstd);
    }
    return out;
}

Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy, const LnCache& c,
                                    const Eigen::VectorXd& g, Eigen::VectorXd& dg,
                                    Eigen::VectorXd& db) {
    const Eigen::Index n = dy.rows(), d = dy.cols();
    Eigen::MatrixXd dx(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::RowVectorXd dyg = dy.row(i).cwiseProduct(g.transpose());
        double m1 = dyg.mean();
        double m2 = dyg.cwiseProduct(c.xhat.row(i)).mean();
        dx.row(i) = (dyg.array() - m1 - c.xhat.row(i).array() * m2) * c.invstd(i);
    }
    dg += (dy.cwiseProduct(c.xhat)).colwise().sum().transpose();
    db += dy.colwise().sum().transpose();
    return dx;
}

struct LayerCache {
    Eigen::MatrixXd x_in;
    LnCache ln1;
    Eigen::MatrixXd a;  // ln1 output
    Eigen::MatrixXd q, k, v;
    std::vector<Eigen::MatrixXd> probs;  // per head, seq x seq
    Eigen::MatrixXd attn_concat;
    Eigen::MatrixXd x_mid;
    LnCache ln2;
    Eigen::MatrixXd b;  // ln2 output
    Eigen::MatrixXd fc_pre, fc_act;
};

struct Cache {
    Eigen::MatrixXd x0;
    std::vector<LayerCache> layers;
    Eigen::MatrixXd x_final;  // residual entering the final norm
    LnCache lnf;
    Eigen::MatrixXd hf;  // final norm output
    Eigen::MatrixXd logits;
};

void apply_hook(Eigen::MatrixXd& x, const HookSpec& h, std::size_t final_idx,
                std::vector<Eigen::VectorXd>& captures) {
    switch (h.kind) {
        case HookKind::Identity:
            return;
        case HookKind::AddDirection:
            if (h.positions == HookPositions::All) {
                x.rowwise() += (h.alpha * h.direction).transpose();
            } else {
                x.row(static_cast<Eigen::Index>(final_idx)) += (h.alpha * h.direction).transpose();
            }
            return;
        case HookKind::Capture: {
            std::size_t idx = h.positions == HookPositions::All
                                  ? static_cast<std::size_t>(x.rows()) - 1
                                  : final_idx;
            captures.push_back(x.row(static_cast<Eigen::Index>(idx)).transpose());
            return;
        }
        case HookKind::CaptureAll:
            for (Eigen::Index i = 0; i < x.rows(); ++i)
                captures.push_back(x.row(i).transpose());
            return;
    }
}

Eigen::MatrixXd run_forward(const Checkpoint& ckpt, const std::vector<TokenId>& tokens,
                            const std::vector<HookSpec>& hooks, std::size_t final_idx,
                            std::vector<Eigen::VectorXd>* captures, Cache* cache,
                            AttentionTrace* attn_out) {
    const ModelConfig& cfg = ckpt.cfg;
    const auto T = static_cast<Eigen::Index>(tokens.size());
    if (tokens.empty()) throw std::invalid_argument("empty token sequence");
    if (T > cfg.max_seq_len) throw std::invalid_argument("sequence exceeds max_seq_len");
    if (final_idx == SIZE_MAX) final_idx = tokens.size() - 1;

    const int d = cfg.d_model;
    const int dh = cfg.d_head();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Eigen::MatrixXd x(T, d);
    for (Eigen::Index i = 0; i < T; ++i) {
        TokenId t = tokens[static_cast<std::size_t>(i)];
        if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("token id out of range");
        x.row(i) = ckpt.tok_emb.row(t) + ckpt.pos_emb.row(i);
    }
    if (cache) {
        cache->x0 = x;
        cache->layers.resize(static_cast<std::size_t>(cfg.n_layers));
    }

    std::vector<Eigen::VectorXd> local_captures;
    std::vector<Eigen::VectorXd>& caps = captures ? *captures : local_captures;

    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerCache* lc = cache ? &cache->layers[static_cast<std::size_t>(l)] : nullptr;
        const LayerParams& p = ckpt.layers[static_cast<std::size_t>(l)];
        if (lc) lc->x_in = x;

        LnCache ln1c;
        Eigen::MatrixXd a = layer_norm(x, p.ln1_g, p.ln1_b, lc ? &ln1c : nullptr);
        Eigen::MatrixXd q = (a * p.wq).rowwise() + p.bq.transpose();
        Eigen::MatrixXd k = (a * p.wk).rowwise() + p.bk.transpose();
        Eigen::MatrixXd v = (a * p.wv).rowwise() + p.bv.transpose();

        Eigen::MatrixXd concat(T, d);
        std::vector<Eigen::MatrixXd> probs(static_cast<std::size_t>(cfg.n_heads));
        for (int h = 0; h < cfg.n_heads; ++h) {
            auto qh = q.middleCols(h * dh, dh);
            auto kh = k.middleCols(h * dh, dh);
            auto vh = v.middleCols(h * dh, dh);
            Eigen::MatrixXd s = qh * kh.transpose() * scale;
            for (Eigen::Index i = 0; i < T; ++i)
                for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = -1e30;
            Eigen::MatrixXd pmat(T, T);
            for (Eigen::Index i = 0; i < T; ++i) {
                double mx = s.row(i).maxCoeff();
                Eigen::ArrayXd e = (s.row(i).array() - mx).exp();
                pmat.row(i) = (e / e.sum()).matrix();
            }
            concat.middleCols(h * dh, dh) = pmat * vh;
            probs[static_cast<std::size_t>(h)] = std::move(pmat);
        }
        if (attn_out && attn_out->layer == l) {
            attn_out->weights.resize(cfg.n_heads, T);
            for (int h = 0; h < cfg.n_heads; ++h)
                attn_out->weights.row(h) =
                    probs[static_cast<std::size_t>(h)].row(static_cast<Eigen::Index>(final_idx));
        }

        Eigen::MatrixXd attn_o = (concat * p.wo).rowwise() + p.bo.transpose();
        Eigen::MatrixXd x_mid = x + attn_o;

        LnCache ln2c;
        Eigen::MatrixXd b = layer_norm(x_mid, p.ln2_g, p.ln2_b, lc ? &ln2c : nullptr);
        Eigen::MatrixXd fc_pre = (b * p.w_fc).rowwise() + p.b_fc.transpose();
        Eigen::MatrixXd fc_act = fc_pre.unaryExpr([](double z) { return gelu(z); });
        Eigen::MatrixXd mlp_o = (fc_act * p.w_proj).rowwise() + p.b_proj.transpose();
        x = x_mid + mlp_o;

        if (lc) {
            lc->ln1 = std::move(ln1c);
            lc->a = std::move(a);
            lc->q = std::move(q);
            lc->k = std::move(k);
            lc->v = std::move(v);
            lc->probs = std::move(probs);
            lc->attn_concat = std::move(concat);
            lc->x_mid = std::move(x_mid);
            lc->ln2 = std::move(ln2c);
            lc->b = std::move(b);
            lc->fc_pre = std::move(fc_pre);
            lc->fc_act = std::move(fc_act);
        }

        // Residual stream "at layer l" = after block l completes.
        for (const HookSpec& h : hooks)
            if (h.layer == l) apply_hook(x, h, final_idx, caps);
    }

    LnCache lnfc;
    Eigen::MatrixXd hf = layer_norm(x, ckpt.lnf_g, ckpt.lnf_b, cache ? &lnfc : nullptr);
    Eigen::MatrixXd logits = hf * ckpt.unembed;
    if (!logits.allFinite()) throw std::runtime_error("non-finite logits in forward pass");
    if (cache) {
        cache->x_final = std::move(x);
        cache->lnf = std::move(lnfc);
        cache->hf = std::move(hf);
        cache->logits = logits;
    }
    return logits;
}

void zero_like(const Checkpoint& src, Checkpoint& dst) {
    dst = src;
    dst.visit([](Eigen::MatrixXd& m) { m.setZero(); },
              [](Eigen::VectorXd& v) { v.setZero(); });
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || max_seq_len < 1)
        throw std::invalid_argument("all model dims must be >= 1");
    if (d_model % n_heads != 0)
        throw std::invalid_argument("d_model must be divisible by n_heads");
}

void Checkpoint::visit(const std::function<void(Eigen::MatrixXd&)>& fm,
                       const std::function<void(Eigen::VectorXd&)>& fv) {
    fm(tok_emb);
    fm(pos_emb);
    for (LayerParams& p : layers) {
        fv(p.ln1_g); fv(p.ln1_b);
        fm(p.wq); fv(p.bq);
        fm(p.wk); fv(p.bk);
        fm(p.wv); fv(p.bv);
        fm(p.wo); fv(p.bo);
        fv(p.ln2_g); fv(p.ln2_b);
        fm(p.w_fc); fv(p.b_fc);
        fm(p.w_proj); fv(p.b_proj);
    }
    fv(lnf_g);
    fv(lnf_b);
    fm(unembed);
}

void Checkpoint::visit(const std::function<void(const Eigen::MatrixXd&)>& fm,
                       const std::function<void(const Eigen::VectorXd&)>& fv) const {
    const_cast<Checkpoint*>(this)->visit(
        [&](Eigen::MatrixXd& m) { fm(m); }, [&](Eigen::VectorXd& v) { fv(v); });
}

void Checkpoint::visit_residual_writers(const std::function<void(Eigen::MatrixXd&)>& fm,
                                        const std::function<void(Eigen::VectorXd&)>& fv) {
    fm(tok_emb);
    fm(pos_emb);
    for (LayerParams& p : layers) {
        fm(p.wo);
        fv(p.bo);
        fm(p.w_proj);
        fv(p.b_proj);
    }
}

Eigen::VectorXd Checkpoint::flatten() const {
    std::size_t n = 0;
    visit([&](const Eigen::MatrixXd& m) { n += static_cast<std::size_t>(m.size()); },
          [&](const Eigen::VectorXd& v) { n += static_cast<std::size_t>(v.size()); });
    Eigen::VectorXd out(static_cast<Eigen::Index>(n));
    Eigen::Index at = 0;
    visit(
        [&](const Eigen::MatrixXd& m) {
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c) out(at++) = m(r, c);
        },
        [&](const Eigen::VectorXd& v) {
            for (Eigen::Index i = 0; i < v.size(); ++i) out(at++) = v(i);
        });
    return out;
}

void Checkpoint::unflatten(const Eigen::VectorXd& theta) {
    Eigen::Index at = 0;
    visit(
        [&](Eigen::MatrixXd& m) {
            for (Eigen::Index r = 0; r < m.rows(); ++r)
                for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = theta(at++);
        },
        [&](Eigen::VectorXd& v) {
            for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = theta(at++);
        });
    if (at != theta.size()) throw std::invalid_argument("flattened size mismatch");
}

Checkpoint init_checkpoint(const ModelConfig& cfg_in) {
    ModelConfig cfg = cfg_in;
    if (cfg.vocab_size == 0) cfg.vocab_size = static_cast<int>(vocab().size());
    cfg.validate();
    Checkpoint ckpt;
    ckpt.cfg = cfg;
    ckpt.base_seed = cfg.rng_seed;
    Rng rng = make_rng(cfg.rng_seed, "lm-init");
    auto randn_mat = [&](Eigen::Index r, Eigen::Index c, double std) {
        Eigen::MatrixXd m(r, c);
        for (Eigen::Index i = 0; i < r; ++i)
            for (Eigen::Index j = 0; j < c; ++j) m(i, j) = std * rand_normal(rng);
        return m;
    };
    const int d = cfg.d_model;
    ckpt.tok_emb = randn_mat(cfg.vocab_size, d, 0.02);
    ckpt.pos_emb = randn_mat(cfg.max_seq_len, d, 0.02);
    ckpt.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (LayerParams& p : ckpt.layers) {
        p.ln1_g = Eigen::VectorXd::Ones(d);
        p.ln1_b = Eigen::VectorXd::Zero(d);
        p.wq = randn_mat(d, d, 0.02);
        p.wk = randn_mat(d, d, 0.02);
        p.wv = randn_mat(d, d, 0.02);
        p.wo = randn_mat(d, d, 0.02);
        p.bq = Eigen::VectorXd::Zero(d);
        p.bk = Eigen::VectorXd::Zero(d);
        p.bv = Eigen::VectorXd::Zero(d);
        p.bo = Eigen::VectorXd::Zero(d);
        p.ln2_g = Eigen::VectorXd::Ones(d);
        p.ln2_b = Eigen::VectorXd::Zero(d);
        p.w_fc = randn_mat(d, cfg.d_ff(), 0.02);
        p.b_fc = Eigen::VectorXd::Zero(cfg.d_ff());
        p.w_proj = randn_mat(cfg.d_ff(), d, 0.02);
        p.b_proj = Eigen::VectorXd::Zero(d);
    }
    ckpt.lnf_g = Eigen::VectorXd::Ones(d);
    ckpt.lnf_b = Eigen::VectorXd::Zero(d);
    ckpt.unembed = randn_mat(d, cfg.vocab_size, 0.02);
    return ckpt;
}

ForwardResult forward(const Checkpoint& ckpt, const std::vector<TokenId>& tokens,
                      const std::vector<HookSpec>& hooks, std::size_t final_prompt_index) {
    for (const HookSpec& h : hooks)
        if (h.layer < 0 || h.layer >= ckpt.cfg.n_layers)
            throw std::invalid_argument("hook layer out of range");
    ForwardResult res;
    res.logits = run_forward(ckpt, tokens, hooks, final_prompt_index, &res.captures, nullptr, nullptr);
    return res;
}

std::vector<TokenId> generate(const Checkpoint& ckpt, const PromptBundle& prompt,
                              double temperature, int max_new,
                              const std::vector<HookSpec>& hooks, std::uint64_t sample_seed) {
    std::vector<TokenId> tokens = prompt.tokens;
    std::vector<TokenId> out;
    Rng rng = make_rng(sample_seed, "generate/" + std::to_string(prompt.problem_id));
    const std::size_t final_idx = prompt.tokens.size() - 1;
    const TokenId eos = vocab().eos();
    for (int step = 0; step < max_new; ++step) {
        if (static_cast<int>(tokens.size()) >= ckpt.cfg.max_seq_len) break;
        Eigen::MatrixXd logits = run_forward(ckpt, tokens, hooks, final_idx, nullptr, nullptr, nullptr);
        Eigen::RowVectorXd last = logits.row(logits.rows() - 1);
        TokenId next;
        if (temperature <= 0.0) {
            Eigen::Index best = 0;
            for (Eigen::Index i = 1; i < last.size(); ++i)
                if (last(i) > last(best)) best = i;  // ties keep the lowest id
            next = static_cast<TokenId>(best);
        } else {
            Eigen::ArrayXd z = last.transpose().array() / temperature;
            z -= z.maxCoeff();
            Eigen::ArrayXd p = z.exp();
            p /= p.sum();
            double u = rand_unit(rng);
            double acc = 0.0;
            Eigen::Index pick = p.size() - 1;
            for (Eigen::Index i = 0; i < p.size(); ++i) {
                acc += p(i);
                if (u < acc) {
                    pick = i;
                    break;
                }
            }
            next = static_cast<TokenId>(pick);
        }
        out.push_back(next);
        tokens.push_back(next);
        if (next == eos) break;
    }
    return out;
}

double lm_loss(const Checkpoint& ckpt, const std::vector<TokenId>& tokens) {
    Eigen::MatrixXd logits = run_forward(ckpt, tokens, {}, SIZE_MAX, nullptr, nullptr, nullptr);
    const Eigen::Index T = logits.rows();
    double loss = 0.0;
    for (Eigen::Index i = 0; i + 1 < T; ++i) {
        double mx = logits.row(i).maxCoeff();
        double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
        loss += lse - logits(i, tokens[static_cast<std::size_t>(i + 1)]);
    }
    return loss / static_cast<double>(T - 1);
}

double lm_loss_and_grad(const Checkpoint& ckpt, const std::vector<TokenId>& tokens,
                        Checkpoint& grads) {
    Cache cache;
    run_forward(ckpt, tokens, {}, SIZE_MAX, nullptr, &cache, nullptr);
    const ModelConfig& cfg = ckpt.cfg;
    const Eigen::Index T = cache.logits.rows();
    if (T < 2) throw std::invalid_argument("need at least 2 tokens for a training step");
    const double inv_count = 1.0 / static_cast<double>(T - 1);

    // Softmax cross-entropy gradient at each predicting position.
    double loss = 0.0;
    Eigen::MatrixXd dlogits = Eigen::MatrixXd::Zero(T, cfg.vocab_size);
    for (Eigen::Index i = 0; i + 1 < T; ++i) {
        double mx = cache.logits.row(i).maxCoeff();
        Eigen::ArrayXd e = (cache.logits.row(i).array() - mx).exp();
        double sum = e.sum();
        loss += std::log(sum) + mx - cache.logits(i, tokens[static_cast<std::size_t>(i + 1)]);
        dlogits.row(i) = (e / sum).matrix() * inv_count;
        dlogits(i, tokens[static_cast<std::size_t>(i + 1)]) -= inv_count;
    }
    loss *= inv_count;

    zero_like(ckpt, grads);

    grads.unembed += cache.hf.transpose() * dlogits;
    Eigen::MatrixXd dhf = dlogits * ckpt.unembed.transpose();
    Eigen::MatrixXd dx = layer_norm_backward(dhf, cache.lnf, ckpt.lnf_g, grads.lnf_g, grads.lnf_b);

    const int dh = cfg.d_head();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerParams& p = ckpt.layers[static_cast<std::size_t>(l)];
        LayerParams& gp = grads.layers[static_cast<std::size_t>(l)];
        const LayerCache& lc = cache.layers[static_cast<std::size_t>(l)];

        // MLP branch: x = x_mid + proj(gelu(fc(ln2(x_mid))))
        Eigen::MatrixXd dmlp = dx;  // gradient w.r.t. the mlp output
        gp.w_proj += lc.fc_act.transpose() * dmlp;
        gp.b_proj += dmlp.colwise().sum().transpose();
        Eigen::MatrixXd dfc_act = dmlp * p.w_proj.transpose();
        Eigen::MatrixXd dfc_pre =
            dfc_act.cwiseProduct(lc.fc_pre.unaryExpr([](double z) { return gelu_grad(z); }));
        gp.w_fc += lc.b.transpose() * dfc_pre;
        gp.b_fc += dfc_pre.colwise().sum().transpose();
        Eigen::MatrixXd db_ln2 = dfc_pre * p.w_fc.transpose();
        Eigen::MatrixXd dx_mid =
            dx + layer_norm_backward(db_ln2, lc.ln2, p.ln2_g, gp.ln2_g, gp.ln2_b);

        // Attention branch: x_mid = x_in + wo(attn(ln1(x_in)))
        Eigen::MatrixXd dattn_o = dx_mid;
        gp.wo += lc.attn_concat.transpose() * dattn_o;
        gp.bo += dattn_o.colwise().sum().transpose();
        Eigen::MatrixXd dconcat = dattn_o * p.wo.transpose();

        Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(T, cfg.d_model);
        Eigen::MatrixXd dk = Eigen::MatrixXd::Zero(T, cfg.d_model);
        Eigen::MatrixXd dv = Eigen::MatrixXd::Zero(T, cfg.d_model);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const Eigen::MatrixXd& pm = lc.probs[static_cast<std::size_t>(h)];
            auto qh = lc.q.middleCols(h * dh, dh);
            auto kh = lc.k.middleCols(h * dh, dh);
            auto vh = lc.v.middleCols(h * dh, dh);
            auto doh = dconcat.middleCols(h * dh, dh);
            Eigen::MatrixXd dp = doh * vh.transpose();
            dv.middleCols(h * dh, dh) = pm.transpose() * doh;
            Eigen::MatrixXd ds(T, T);
            for (Eigen::Index i = 0; i < T; ++i) {
                double dot = dp.row(i).dot(pm.row(i));
                ds.row(i) = pm.row(i).cwiseProduct(dp.row(i) - Eigen::RowVectorXd::Constant(T, dot));
            }
            dq.middleCols(h * dh, dh) = ds * kh * scale;
            dk.middleCols(h * dh, dh) = ds.transpose() * qh * scale;
        }
        gp.wq += lc.a.transpose() * dq;
        gp.bq += dq.colwise().sum().transpose();
        gp.wk += lc.a.transpose() * dk;
        gp.bk += dk.colwise().sum().transpose();
        gp.wv += lc.a.transpose() * dv;
        gp.bv += dv.colwise().sum().transpose();
        Eigen::MatrixXd da = dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
        dx = dx_mid + layer_norm_backward(da, lc.ln1, p.ln1_g, gp.ln1_g, gp.ln1_b);
    }

    // Embeddings.
    for (Eigen::Index i = 0; i < T; ++i) {
        grads.tok_emb.row(tokens[static_cast<std::size_t>(i)]) += dx.row(i);
        grads.pos_emb.row(i) += dx.row(i);
    }
    return loss;
}

namespace {

Checkpoint run_training(Checkpoint ckpt, const std::vector<std::vector<TokenId>>& corpus,
                        const TrainOptions& opt, TrainStats* stats, const char* stream) {
    if (corpus.empty()) throw std::invalid_argument("training corpus is empty");
    Rng rng = make_rng(opt.seed, stream);

    Eigen::VectorXd theta = ckpt.flatten();
    Eigen::VectorXd m = Eigen::VectorXd::Zero(theta.size());
    Eigen::VectorXd v = Eigen::VectorXd::Zero(theta.size());
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

    Checkpoint grads;
    for (int step = 0; step < opt.steps; ++step) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(theta.size());
        double loss = 0.0;
        for (int b = 0; b < opt.batch; ++b) {
            const auto& seq = corpus[rand_below(rng, corpus.size())];
            loss += lm_loss_and_grad(ckpt, seq, grads);
            g += grads.flatten();
        }
        loss /= opt.batch;
        if (!std::isfinite(loss))
            throw std::runtime_error("training diverged at step " + std::to_string(step));
        if (stats) stats->losses.push_back(loss);
        if (opt.verbose && step % 100 == 0)
            std::cerr << "step " << step << " loss " << loss << "\n";

        g /= static_cast<double>(opt.batch);
        double bc1 = 1.0 - std::pow(b1, step + 1);
        double bc2 = 1.0 - std::pow(b2, step + 1);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
        theta -= (opt.lr / bc1) * m.cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());
        ckpt.unflatten(theta);
    }
    return ckpt;
}

}  // namespace

Checkpoint train_lm(const ModelConfig& cfg, const std::vector<std::vector<TokenId>>& corpus,
                    const TrainOptions& opt, TrainStats* stats) {
    Checkpoint ckpt = init_checkpoint(cfg);
    ckpt = run_training(std::move(ckpt), corpus, opt, stats, "lm-train");
    ckpt.provenance = Provenance::Base;
    return ckpt;
}

Checkpoint fine_tune(const Checkpoint& base, const std::vector<std::vector<TokenId>>& corpus,
                     const TrainOptions& opt, TrainStats* stats) {
    if (base.provenance != Provenance::Base)
        throw std::invalid_argument("fine_tune requires a base-provenance checkpoint");
    Checkpoint ckpt = base;
    if (opt.steps > 0) ckpt = run_training(std::move(ckpt), corpus, opt, stats, "lm-finetune");
    ckpt.provenance = Provenance::FineTuned;
    ckpt.base_seed = base.base_seed;
    return ckpt;
}

std::vector<ActivationRecord> capture_final_token_residuals(
    const Checkpoint& ckpt, const std::vector<PromptBundle>& prompts, int layer) {
    if (layer < 0 || layer >= ckpt.cfg.n_layers) throw std::invalid_argument("layer out of range");
    std::vector<ActivationRecord> out;
    out.reserve(prompts.size());
    for (const PromptBundle& p : prompts) {
        HookSpec h;
        h.layer = layer;
        h.kind = HookKind::Capture;
        h.positions = HookPositions::FinalPromptToken;
        ForwardResult r = forward(ckpt, p.tokens, {h}, p.tokens.size() - 1);
        ActivationRecord rec;
        rec.problem_id = p.problem_id;
        rec.layer = layer;
        rec.residual = r.captures.at(0);
        out.push_back(std::move(rec));
    }
    return out;
}

AttentionTrace attention_weights(const Checkpoint& ckpt, const std::vector<TokenId>& tokens,
                                 int layer, const std::vector<HookSpec>& hooks) {
    if (layer < 0 || layer >= ckpt.cfg.n_layers) throw std::invalid_argument("layer out of range");
    AttentionTrace trace;
    trace.layer = layer;
    run_forward(ckpt, tokens, hooks, tokens.size() - 1, nullptr, nullptr, &trace);
    return trace;
}

Checkpoint orthogonalize_checkpoint(const Checkpoint& ckpt, const Eigen::VectorXd& direction,
                                    const std::string& direction_id) {
    if (direction.size() != ckpt.cfg.d_model)
        throw std::invalid_argument("direction dimension mismatch");
    if (std::abs(direction.norm() - 1.0) > 1e-6)
        throw std::invalid_argument("direction must be unit norm");
    Checkpoint out = ckpt;
    out.visit_residual_writers(
        [&](Eigen::MatrixXd& w) { w -= (w * direction) * direction.transpose(); },
        [&](Eigen::VectorXd& v) { v -= v.dot(direction) * direction; });
    out.provenance = Provenance::Orthogonalized;
    out.orthogonalized_direction = direction_id;
    return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    BinaryWriter w(os);
    w.magic("MLM1");
    w.u32(static_cast<std::uint32_t>(ckpt.cfg.n_layers));
    w.u32(static_cast<std::uint32_t>(ckpt.cfg.d_model));
    w.u32(static_cast<std::uint32_t>(ckpt.cfg.n_heads));
    w.u32(static_cast<std::uint32_t>(ckpt.cfg.vocab_size));
    w.u32(static_cast<std::uint32_t>(ckpt.cfg.max_seq_len));
    w.u64(ckpt.cfg.rng_seed);
    w.u8(static_cast<std::uint8_t>(ckpt.provenance));
    w.u64(ckpt.base_seed);
    w.u32(static_cast<std::uint32_t>(ckpt.orthogonalized_direction.size()));
    os.write(ckpt.orthogonalized_direction.data(),
             static_cast<std::streamsize>(ckpt.orthogonalized_direction.size()));
    ckpt.visit([&](const Eigen::MatrixXd& m) { w.matrix(m); },
               [&](const Eigen::VectorXd& v) { w.vector(v); });
    if (!os) throw IoError("short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    BinaryReader r(is);
    r.expect_magic("MLM1");
    ModelConfig cfg;
    cfg.n_layers = static_cast<int>(r.u32());
    cfg.d_model = static_cast<int>(r.u32());
    cfg.n_heads = static_cast<int>(r.u32());
    cfg.vocab_size = static_cast<int>(r.u32());
    cfg.max_seq_len = static_cast<int>(r.u32());
    cfg.rng_seed = r.u64();
    Provenance prov = static_cast<Provenance>(r.u8());
    std::uint64_t base_seed = r.u64();
    std::uint32_t dlen = r.u32();
    std::string dir(dlen, '\0');
    is.read(dir.data(), dlen);

    Checkpoint ckpt = init_checkpoint(cfg);
    ckpt.visit([&](Eigen::MatrixXd& m) { m = r.matrix(m.rows(), m.cols()); },
               [&](Eigen::VectorXd& v) { v = r.vector(v.size()); });
    ckpt.provenance = prov;
    ckpt.base_seed = base_seed;
    ckpt.orthogonalized_direction = dir;
    bool finite = true;
    ckpt.visit([&](const Eigen::MatrixXd& m) { finite = finite && m.allFinite(); },
               [&](const Eigen::VectorXd& v) { finite = finite && v.allFinite(); });
    if (!finite) throw IoError("checkpoint contains non-finite values");
    return ckpt;
}

void save_activations(const std::vector<ActivationRecord>& records,
                      const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    BinaryWriter w(os);
    w.magic("ACT1");
    w.u32(static_cast<std::uint32_t>(records.size()));
    w.u32(records.empty() ? 0 : static_cast<std::uint32_t>(records[0].residual.size()));
    for (const ActivationRecord& rec : records) {
        w.u32(static_cast<std::uint32_t>(rec.problem_id));
        w.u16(static_cast<std::uint16_t>(rec.layer));
        w.u8(rec.label_correct ? 1 : 0);
        w.vector(rec.residual);
    }
}

std::vector<ActivationRecord> load_activations(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    BinaryReader r(is);
    r.expect_magic("ACT1");
    std::uint32_t n = r.u32();
    std::uint32_t d = r.u32();
    std::vector<ActivationRecord> out(n);
    for (auto& rec : out) {
        rec.problem_id = static_cast<int>(r.u32());
        rec.layer = r.u16();
        rec.label_correct = r.u8() != 0;
        rec.residual = r.vector(d);
    }
    return out;
}

std::string provenance_name(Provenance p) {
    switch (p) {
        case Provenance::Base: return "base";
        case Provenance::FineTuned: return "fine_tuned";
        case Provenance::Orthogonalized: return "orthogonalized";
    }
    return "base";
}

}  // namespace scalpel

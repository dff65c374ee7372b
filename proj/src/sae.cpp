#include "scalpel/sae.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "scalpel/io.hpp"
#include "scalpel/rng.hpp"

namespace scalpel {

Eigen::VectorXd jumprelu(const Eigen::VectorXd& z, const Eigen::VectorXd& theta) {
    if (z.size() != theta.size()) throw std::invalid_argument("jumprelu size mismatch");
    if ((theta.array() < 0).any()) throw std::invalid_argument("thresholds must be >= 0");
    // H(0) = 0: activation requires strictly exceeding the threshold.
    return (z.array() > theta.array()).select(z, Eigen::VectorXd::Zero(z.size()));
}

Eigen::VectorXd sae_encode(const Eigen::VectorXd& x, const SAEParams& sae) {
    Eigen::VectorXd z = sae.w_enc.transpose() * x + sae.b_enc;
    return jumprelu(z, sae.theta);
}

Eigen::VectorXd sae_decode(const Eigen::VectorXd& a, const SAEParams& sae) {
    return sae.w_dec.transpose() * a + sae.b_dec;
}

SAELoss sae_loss(const Eigen::VectorXd& x, const SAEParams& sae, double lambda) {
    if (lambda < 0) throw std::invalid_argument("lambda must be >= 0");
    Eigen::VectorXd a = sae_encode(x, sae);
    Eigen::VectorXd r = sae_decode(a, sae) - x;
    SAELoss out;
    out.recon = r.squaredNorm();
    out.l0 = static_cast<double>((a.array() != 0.0).count());
    out.total = out.recon + lambda * out.l0;
    return out;
}

Eigen::VectorXd sae_flatten(const SAEParams& sae) {
    const Eigen::Index dm = sae.w_enc.rows(), ds = sae.w_enc.cols();
    Eigen::VectorXd out(dm * ds + ds + ds + ds * dm + dm);
    Eigen::Index at = 0;
    for (Eigen::Index r = 0; r < dm; ++r)
        for (Eigen::Index c = 0; c < ds; ++c) out(at++) = sae.w_enc(r, c);
    out.segment(at, ds) = sae.b_enc; at += ds;
    out.segment(at, ds) = sae.theta; at += ds;
    for (Eigen::Index r = 0; r < ds; ++r)
        for (Eigen::Index c = 0; c < dm; ++c) out(at++) = sae.w_dec(r, c);
    out.segment(at, dm) = sae.b_dec;
    return out;
}

void sae_unflatten(SAEParams& sae, const Eigen::VectorXd& theta) {
    const Eigen::Index dm = sae.w_enc.rows(), ds = sae.w_enc.cols();
    Eigen::Index at = 0;
    for (Eigen::Index r = 0; r < dm; ++r)
        for (Eigen::Index c = 0; c < ds; ++c) sae.w_enc(r, c) = theta(at++);
    sae.b_enc = theta.segment(at, ds); at += ds;
    sae.theta = theta.segment(at, ds); at += ds;
    for (Eigen::Index r = 0; r < ds; ++r)
        for (Eigen::Index c = 0; c < dm; ++c) sae.w_dec(r, c) = theta(at++);
    sae.b_dec = theta.segment(at, dm);
}

double sae_loss_and_grad(const Eigen::VectorXd& x, const SAEParams& sae, double lambda,
                         double epsilon, Eigen::VectorXd& grad) {
    const Eigen::Index dm = sae.w_enc.rows(), ds = sae.w_enc.cols();
    Eigen::VectorXd z = sae.w_enc.transpose() * x + sae.b_enc;
    Eigen::ArrayXd active = (z.array() > sae.theta.array()).cast<double>();
    Eigen::VectorXd a = z.cwiseProduct(active.matrix());
    Eigen::VectorXd r = sae.w_dec.transpose() * a + sae.b_dec - x;
    double l0 = active.sum();
    double loss = r.squaredNorm() + lambda * l0;

    Eigen::VectorXd da = sae.w_dec * (2.0 * r);  // d recon / d a
    // Straight-through: H treated constant for z, rectangle kernel for theta.
    Eigen::ArrayXd kern =
        ((z - sae.theta).array().abs() <= epsilon / 2.0).cast<double>() / epsilon;
    Eigen::VectorXd dz = da.cwiseProduct(active.matrix());
    Eigen::VectorXd dtheta =
        (-(z.array()) * kern * da.array() - lambda * kern).matrix();

    Eigen::MatrixXd dw_enc = x * dz.transpose();              // dm x ds
    Eigen::MatrixXd dw_dec = a * (2.0 * r).transpose();       // ds x dm
    Eigen::VectorXd db_dec = 2.0 * r;

    grad.resize(dm * ds + ds + ds + ds * dm + dm);
    Eigen::Index at = 0;
    for (Eigen::Index rr = 0; rr < dm; ++rr)
        for (Eigen::Index c = 0; c < ds; ++c) grad(at++) = dw_enc(rr, c);
    grad.segment(at, ds) = dz; at += ds;
    grad.segment(at, ds) = dtheta; at += ds;
    for (Eigen::Index rr = 0; rr < ds; ++rr)
        for (Eigen::Index c = 0; c < dm; ++c) grad(at++) = dw_dec(rr, c);
    grad.segment(at, dm) = db_dec;
    return loss;
}

SAEParams init_sae(int d_model, int layer, std::uint64_t seed) {
    const int d_sae = 8 * d_model;
    Rng rng = make_rng(seed, "sae-init");
    SAEParams sae;
    sae.layer = layer;
    sae.w_dec.resize(d_sae, d_model);
    for (int i = 0; i < d_sae; ++i) {
        Eigen::VectorXd row(d_model);
        for (int j = 0; j < d_model; ++j) row(j) = rand_normal(rng);
        sae.w_dec.row(i) = row.normalized().transpose();
    }
    sae.w_enc = sae.w_dec.transpose();
    sae.b_enc = Eigen::VectorXd::Zero(d_sae);
    sae.theta = Eigen::VectorXd::Constant(d_sae, 0.001);
    sae.b_dec = Eigen::VectorXd::Zero(d_model);
    return sae;
}

SAEParams train_sae(const std::vector<ActivationRecord>& records, const SAETrainConfig& cfg,
                    std::vector<double>* recon_trace) {
    if (records.empty()) throw std::invalid_argument("train_sae requires at least one record");
    const int layer = records[0].layer;
    for (const auto& r : records)
        if (r.layer != layer) throw std::invalid_argument("records span multiple layers");
    if (cfg.lambda < 0 || cfg.epsilon <= 0) throw std::invalid_argument("bad SAE train config");

    const int d_model = static_cast<int>(records[0].residual.size());
    SAEParams sae = init_sae(d_model, layer, cfg.seed);
    // Center the decoder at the data mean so latents model deviations.
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d_model);
    for (const auto& r : records) mean += r.residual;
    sae.b_dec = mean / static_cast<double>(records.size());

    Rng rng = make_rng(cfg.seed, "sae-train");
    Eigen::VectorXd theta = sae_flatten(sae);
    Eigen::VectorXd m = Eigen::VectorXd::Zero(theta.size());
    Eigen::VectorXd v = Eigen::VectorXd::Zero(theta.size());
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

    const Eigen::Index ds = sae.w_enc.cols();
    const Eigen::Index theta_off = d_model * ds + ds;

    Eigen::VectorXd g1;
    for (int step = 0; step < cfg.steps; ++step) {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(theta.size());
        double recon = 0.0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& rec = records[rand_below(rng, records.size())];
            sae_loss_and_grad(rec.residual, sae, cfg.lambda, cfg.epsilon, g1);
            g += g1;
            Eigen::VectorXd r = sae_decode(sae_encode(rec.residual, sae), sae) - rec.residual;
            recon += r.squaredNorm();
        }
        g /= cfg.batch;
        recon /= cfg.batch;
        if (!std::isfinite(recon))
            throw std::runtime_error("SAE training diverged at step " + std::to_string(step));
        if (recon_trace) recon_trace->push_back(recon);
        if (cfg.verbose && step % 200 == 0) std::cerr << "sae step " << step << " recon " << recon << "\n";

        double bc1 = 1.0 - std::pow(b1, step + 1);
        double bc2 = 1.0 - std::pow(b2, step + 1);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
        theta -= (cfg.lr / bc1) * m.cwiseQuotient(((v / bc2).cwiseSqrt().array() + eps).matrix());

        // Constraints: theta >= 0, unit-norm decoder rows.
        theta.segment(theta_off, ds) = theta.segment(theta_off, ds).cwiseMax(0.0);
        sae_unflatten(sae, theta);
        for (Eigen::Index i = 0; i < sae.w_dec.rows(); ++i) {
            double n = sae.w_dec.row(i).norm();
            if (n > 1e-12) sae.w_dec.row(i) /= n;
        }
        theta = sae_flatten(sae);
    }
    return sae;
}

PlantedDictionary make_planted_dictionary(int d_model, int n_features, double firing_prob,
                                          double noise_std, std::uint64_t seed) {
    Rng rng = make_rng(seed, "planted-dict");
    PlantedDictionary dict;
    dict.features.resize(n_features, d_model);
    for (int i = 0; i < n_features; ++i) {
        Eigen::VectorXd row(d_model);
        for (int j = 0; j < d_model; ++j) row(j) = rand_normal(rng);
        dict.features.row(i) = row.normalized().transpose();
    }
    dict.firing_prob = Eigen::VectorXd::Constant(n_features, firing_prob);
    dict.noise_std = noise_std;
    return dict;
}

void generate_superposition_data(const PlantedDictionary& dict, int n, std::uint64_t seed,
                                 Eigen::MatrixXd& activations, Eigen::MatrixXd& true_codes) {
    if (n < 1) throw std::invalid_argument("n must be >= 1");
    const Eigen::Index nf = dict.features.rows();
    const Eigen::Index d = dict.features.cols();
    Rng rng = make_rng(seed, "superposition");
    activations = Eigen::MatrixXd::Zero(n, d);
    true_codes = Eigen::MatrixXd::Zero(n, nf);
    for (int i = 0; i < n; ++i) {
        for (Eigen::Index f = 0; f < nf; ++f) {
            if (rand_unit(rng) < dict.firing_prob(f)) {
                double mag =
                    dict.magnitude_mean + dict.magnitude_jitter * (2.0 * rand_unit(rng) - 1.0);
                true_codes(i, f) = mag;
                activations.row(i) += mag * dict.features.row(f);
            }
        }
        if (dict.noise_std > 0)
            for (Eigen::Index j = 0; j < d; ++j)
                activations(i, j) += dict.noise_std * rand_normal(rng);
    }
}

MatchResult match_features(const SAEParams& learned, const PlantedDictionary& dict) {
    const Eigen::Index nf = dict.features.rows();
    const Eigen::Index ds = learned.w_dec.rows();
    if (nf == 0 || ds == 0) throw std::invalid_argument("empty dictionaries");
    Eigen::MatrixXd cos(nf, ds);
    for (Eigen::Index i = 0; i < nf; ++i)
        for (Eigen::Index j = 0; j < ds; ++j) {
            double denom = dict.features.row(i).norm() * learned.w_dec.row(j).norm();
            cos(i, j) = denom > 1e-12
                            ? std::abs(dict.features.row(i).dot(learned.w_dec.row(j))) / denom
                            : 0.0;
        }
    MatchResult res;
    res.assignment.assign(static_cast<std::size_t>(nf), -1);
    res.cosines.assign(static_cast<std::size_t>(nf), 0.0);
    std::vector<bool> used_row(static_cast<std::size_t>(nf), false);
    std::vector<bool> used_col(static_cast<std::size_t>(ds), false);
    const Eigen::Index k = std::min(nf, ds);
    for (Eigen::Index iter = 0; iter < k; ++iter) {
        double best = -1.0;
        Eigen::Index bi = -1, bj = -1;
        for (Eigen::Index i = 0; i < nf; ++i) {
            if (used_row[static_cast<std::size_t>(i)]) continue;
            for (Eigen::Index j = 0; j < ds; ++j) {
                if (used_col[static_cast<std::size_t>(j)]) continue;
                if (cos(i, j) > best) {
                    best = cos(i, j);
                    bi = i;
                    bj = j;
                }
            }
        }
        used_row[static_cast<std::size_t>(bi)] = true;
        used_col[static_cast<std::size_t>(bj)] = true;
        res.assignment[static_cast<std::size_t>(bi)] = static_cast<int>(bj);
        res.cosines[static_cast<std::size_t>(bi)] = best;
        res.mean_abs_cosine += best;
    }
    res.mean_abs_cosine /= static_cast<double>(k);
    return res;
}

void save_sae(const SAEParams& sae, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    BinaryWriter w(os);
    w.magic("SAE1");
    w.u32(static_cast<std::uint32_t>(sae.d_model()));
    w.u32(static_cast<std::uint32_t>(sae.d_sae()));
    w.u32(static_cast<std::uint32_t>(sae.layer));
    w.matrix(sae.w_enc);
    w.vector(sae.b_enc);
    w.vector(sae.theta);
    w.matrix(sae.w_dec);
    w.vector(sae.b_dec);
}

SAEParams load_sae(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    BinaryReader r(is);
    r.expect_magic("SAE1");
    int dm = static_cast<int>(r.u32());
    int ds = static_cast<int>(r.u32());
    SAEParams sae;
    sae.layer = static_cast<int>(r.u32());
    sae.w_enc = r.matrix(dm, ds);
    sae.b_enc = r.vector(ds);
    sae.theta = r.vector(ds);
    sae.w_dec = r.matrix(ds, dm);
    sae.b_dec = r.vector(dm);
    return sae;
}

}  // namespace scalpel

#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "scalpel/io.hpp"
#include "scalpel/rng.hpp"
#include "scalpel/sae.hpp"

using namespace scalpel;

namespace {

SAEParams random_sae(int d, int ds, std::uint64_t seed) {
    SAEParams sae = init_sae(d, 0, seed);
    // init_sae builds d_sae = 8*d; cut or keep as-is when ds == 8*d.
    REQUIRE(sae.d_sae() == 8 * d);
    (void)ds;
    Rng rng = make_rng(seed, "sae-test-jitter");
    for (Eigen::Index i = 0; i < sae.b_enc.size(); ++i) sae.b_enc(i) = 0.1 * rand_normal(rng);
    for (Eigen::Index i = 0; i < sae.theta.size(); ++i) sae.theta(i) = 0.05 + 0.1 * rand_unit(rng);
    return sae;
}

}  // namespace

TEST_CASE("jumprelu: strict threshold, H(0)=0") {
    Eigen::VectorXd z(4), th(4);
    z << -1.0, 0.2, 0.2, 0.5;
    th << 0.0, 0.2, 0.1, 0.0;
    Eigen::VectorXd a = jumprelu(z, th);
    CHECK(a(0) == 0.0);  // below zero threshold
    CHECK(a(1) == 0.0);  // z == theta is NOT above threshold
    CHECK(a(2) == 0.2);
    CHECK(a(3) == 0.5);
    // z == 0 with theta == 0: H(0) = 0 convention.
    Eigen::VectorXd z0 = Eigen::VectorXd::Zero(1), t0 = Eigen::VectorXd::Zero(1);
    CHECK(jumprelu(z0, t0)(0) == 0.0);
}

TEST_CASE("encode/decode/loss match brute-force oracle on 120 random instances") {
    const int d = 6;
    for (int inst = 0; inst < 120; ++inst) {
        SAEParams sae = random_sae(d, 8 * d, 100 + inst);
        Rng rng = make_rng(inst, "sae-oracle-x");
        Eigen::VectorXd x(d);
        for (int i = 0; i < d; ++i) x(i) = rand_normal(rng);

        // Oracle: plain loops, no Eigen products.
        int ds = sae.d_sae();
        Eigen::VectorXd a_oracle(ds);
        for (int j = 0; j < ds; ++j) {
            double z = sae.b_enc(j);
            for (int i = 0; i < d; ++i) z += x(i) * sae.w_enc(i, j);
            a_oracle(j) = z > sae.theta(j) ? z : 0.0;
        }
        Eigen::VectorXd xhat_oracle(d);
        for (int i = 0; i < d; ++i) {
            double v = sae.b_dec(i);
            for (int j = 0; j < ds; ++j) v += a_oracle(j) * sae.w_dec(j, i);
            xhat_oracle(i) = v;
        }
        double recon = 0.0;
        int l0 = 0;
        for (int i = 0; i < d; ++i) recon += (x(i) - xhat_oracle(i)) * (x(i) - xhat_oracle(i));
        for (int j = 0; j < ds; ++j) l0 += a_oracle(j) != 0.0;
        const double lambda = 0.01;

        Eigen::VectorXd a = sae_encode(x, sae);
        CHECK((a - a_oracle).cwiseAbs().maxCoeff() <= 1e-6);
        CHECK((sae_decode(a, sae) - xhat_oracle).cwiseAbs().maxCoeff() <= 1e-6);
        SAELoss loss = sae_loss(x, sae, lambda);
        CHECK(std::abs(loss.recon - recon) <= 1e-6);
        CHECK(loss.l0 == static_cast<double>(l0));
        CHECK(std::abs(loss.total - (recon + lambda * l0)) <= 1e-6);
    }
}

TEST_CASE("SAE gradient: finite differences for weights, STE formula for thresholds") {
    const int d = 8;
    SAEParams sae = random_sae(d, 8 * d, 77);
    Rng rng = make_rng(3, "sae-grad-x");
    Eigen::VectorXd x(d);
    for (int i = 0; i < d; ++i) x(i) = rand_normal(rng);
    const double lambda = 0.02, eps = 0.3;

    Eigen::VectorXd g;
    sae_loss_and_grad(x, sae, lambda, eps, g);
    Eigen::VectorXd theta = sae_flatten(sae);
    REQUIRE(g.size() == theta.size());

    const Eigen::Index n_enc = static_cast<Eigen::Index>(d) * sae.d_sae();
    const Eigen::Index th_begin = n_enc + sae.d_sae();
    const Eigen::Index th_end = th_begin + sae.d_sae();

    // Central differences on non-threshold coordinates (exact gradients).
    const double h = 1e-6;
    Rng pick = make_rng(4, "sae-grad-pick");
    for (int trial = 0; trial < 120; ++trial) {
        Eigen::Index i = static_cast<Eigen::Index>(rand_below(pick, theta.size()));
        if (i >= th_begin && i < th_end) continue;
        Eigen::VectorXd tp = theta, tm = theta;
        tp(i) += h;
        tm(i) -= h;
        SAEParams sp = sae, sm = sae;
        sae_unflatten(sp, tp);
        sae_unflatten(sm, tm);
        double fd =
            (sae_loss(x, sp, lambda).total - sae_loss(x, sm, lambda).total) / (2 * h);
        double denom = std::max({std::abs(fd), std::abs(g(i)), 1e-6});
        CHECK(std::abs(fd - g(i)) / denom <= 1e-3);
    }

    // Independent straight-through oracle for theta: rectangle kernel of
    // bandwidth eps around z = theta.
    Eigen::VectorXd a = sae_encode(x, sae);
    Eigen::VectorXd r = sae_decode(a, sae) - x;
    for (int j = 0; j < sae.d_sae(); ++j) {
        double z = sae.b_enc(j) + x.dot(sae.w_enc.col(j));
        double K = std::abs(z - sae.theta(j)) <= eps / 2 ? 1.0 : 0.0;
        double dl_da = 2.0 * r.dot(sae.w_dec.row(j).transpose());
        double want = -(z * K / eps) * dl_da - lambda * K / eps;
        CHECK(std::abs(g(th_begin + j) - want) <= 1e-9);
    }
}

TEST_CASE("planted-feature recovery on a small dictionary") {
    const int d = 8, n_feat = 12;
    PlantedDictionary dict = make_planted_dictionary(d, n_feat, 2.0 / n_feat, 0.005, 5);
    CHECK(dict.features.rows() == n_feat);
    for (int i = 0; i < n_feat; ++i)
        CHECK(std::abs(dict.features.row(i).norm() - 1.0) <= 1e-9);

    Eigen::MatrixXd X, codes;
    generate_superposition_data(dict, 2000, 6, X, codes);
    REQUIRE(X.rows() == 2000);

    std::vector<ActivationRecord> records(2000);
    for (int i = 0; i < 2000; ++i) {
        records[static_cast<std::size_t>(i)].residual = X.row(i).transpose();
        records[static_cast<std::size_t>(i)].problem_id = i;
    }
    SAETrainConfig cfg;
    cfg.lambda = 3e-2;
    cfg.epsilon = 0.5;
    cfg.lr = 4e-3;
    cfg.steps = 5000;
    cfg.batch = 32;
    cfg.seed = 7;
    SAEParams sae = train_sae(records, cfg);
    MatchResult match = match_features(sae, dict);
    CHECK(match.mean_abs_cosine >= 0.8);  // looser than the acceptance bound: tiny setup
}

TEST_CASE("save/load round-trip preserves f32-quantized parameters") {
    SAEParams sae = random_sae(6, 48, 9);
    sae.layer = 3;
    auto dir = std::filesystem::temp_directory_path() / "scalpel-test-sae";
    std::filesystem::create_directories(dir);
    save_sae(sae, dir / "s.bin");
    SAEParams loaded = load_sae(dir / "s.bin");
    CHECK(loaded.layer == 3);
    CHECK(loaded.d_model() == sae.d_model());
    CHECK(loaded.d_sae() == sae.d_sae());
    save_sae(loaded, dir / "s2.bin");
    CHECK(read_file(dir / "s.bin") == read_file(dir / "s2.bin"));
    std::filesystem::remove_all(dir);
}

TEST_CASE("match_features is exact when the decoder equals the dictionary") {
    PlantedDictionary dict = make_planted_dictionary(8, 8, 0.2, 0.0, 11);
    SAEParams sae = init_sae(8, 0, 12);
    sae.w_dec.topRows(8) = dict.features;
    MatchResult match = match_features(sae, dict);
    CHECK(match.mean_abs_cosine >= 1.0 - 1e-9);
}

TEST_CASE("training reduces reconstruction error") {
    PlantedDictionary dict = make_planted_dictionary(8, 10, 0.2, 0.01, 21);
    Eigen::MatrixXd X, codes;
    generate_superposition_data(dict, 500, 22, X, codes);
    std::vector<ActivationRecord> records(500);
    for (int i = 0; i < 500; ++i) records[static_cast<std::size_t>(i)].residual = X.row(i).transpose();
    SAETrainConfig cfg;
    cfg.steps = 400;
    cfg.seed = 23;
    std::vector<double> trace;
    train_sae(records, cfg, &trace);
    REQUIRE(trace.size() >= 2);
    CHECK(trace.back() < trace.front());
}

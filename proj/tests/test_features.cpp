#include <doctest.h>

#include <cmath>
#include <vector>

#include "scalpel/features.hpp"
#include "scalpel/rng.hpp"

using namespace scalpel;

namespace {

LayerActivationDataset random_dataset(std::uint64_t seed, int n, int d_sae, double fire_p) {
    LayerActivationDataset ds;
    ds.layer = 0;
    ds.activations = Eigen::MatrixXd::Zero(n, d_sae);
    Rng rng = make_rng(seed, "feat-test");
    for (int i = 0; i < n; ++i) {
        ds.labels.push_back(rand_unit(rng) < 0.6);
        ds.problem_ids.push_back(i);
        for (int j = 0; j < d_sae; ++j)
            if (rand_unit(rng) < fire_p) ds.activations(i, j) = 0.1 + rand_unit(rng);
    }
    for (bool b : ds.labels) (b ? ds.n_correct : ds.n_incorrect)++;
    return ds;
}

// Brute-force Welch-t oracle: moments over nonzero activations per class,
// unbiased sigma, denominators over TOTAL class counts.
std::optional<std::pair<double, double>> oracle_welch(const LayerActivationDataset& ds, int j) {
    std::vector<double> c, i;
    for (int r = 0; r < ds.activations.rows(); ++r) {
        double a = ds.activations(r, j);
        if (a == 0.0) continue;
        (ds.labels[static_cast<std::size_t>(r)] ? c : i).push_back(a);
    }
    if (c.size() < 2 || i.size() < 2) return std::nullopt;
    auto moments = [](const std::vector<double>& v) {
        double mu = 0.0;
        for (double x : v) mu += x;
        mu /= static_cast<double>(v.size());
        double s2 = 0.0;
        for (double x : v) s2 += (x - mu) * (x - mu);
        s2 /= static_cast<double>(v.size() - 1);
        return std::pair(mu, s2);
    };
    auto [mc, vc] = moments(c);
    auto [mi, vi] = moments(i);
    double denom = std::sqrt(vc / ds.n_correct + vi / ds.n_incorrect);
    if (denom == 0.0) return std::pair(0.0, 0.0);
    double t = (mc - mi) / denom;
    return std::pair(t, -t);
}

}  // namespace

TEST_CASE("welch_t matches the brute-force Welch-t oracle on random datasets") {
    int checked = 0;
    for (int rep = 0; rep < 25; ++rep) {
        LayerActivationDataset ds = random_dataset(rep, 40, 8, 0.35);
        for (int j = 0; j < 8; ++j) {
            auto got = welch_t(ds, j);
            auto want = oracle_welch(ds, j);
            REQUIRE(got.has_value() == want.has_value());
            if (!got) continue;
            CHECK(std::abs(got->first - want->first) <= 1e-9);
            CHECK(std::abs(got->second - want->second) <= 1e-9);
            CHECK(std::abs(got->first + got->second) <= 1e-12);  // antisymmetry
            ++checked;
        }
    }
    CHECK(checked >= 100);
}

TEST_CASE("frequencies and separation match a counting oracle") {
    for (int rep = 0; rep < 20; ++rep) {
        LayerActivationDataset ds = random_dataset(1000 + rep, 30, 6, 0.4);
        for (int j = 0; j < 6; ++j) {
            int nc = 0, ni = 0;
            for (int r = 0; r < 30; ++r)
                if (ds.activations(r, j) > 0.0)
                    (ds.labels[static_cast<std::size_t>(r)] ? nc : ni)++;
            double fc = static_cast<double>(nc) / ds.n_correct;
            double fi = static_cast<double>(ni) / ds.n_incorrect;
            FreqSep fs = frequencies_and_separation(ds, j);
            CHECK(fs.f_correct == doctest::Approx(fc).epsilon(1e-12));
            CHECK(fs.f_incorrect == doctest::Approx(fi).epsilon(1e-12));
            CHECK(fs.s_correct == doctest::Approx(fc - fi).epsilon(1e-12));
            CHECK(fs.s_correct == doctest::Approx(-fs.s_incorrect).epsilon(1e-12));
            CHECK(fs.f_correct >= 0.0);
            CHECK(fs.f_correct <= 1.0);
            CHECK(std::abs(fs.s_correct) <= 1.0);
        }
    }
}

TEST_CASE("background filter boundary: exactly 2% kept, above excluded") {
    // SAE with identity-ish encoder: latent j fires iff x(j) > 0.
    const int d = 4;
    SAEParams sae = init_sae(d, 0, 1);
    sae.w_enc = Eigen::MatrixXd::Zero(d, sae.d_sae());
    for (int j = 0; j < sae.d_sae(); ++j) sae.w_enc(j % d, j) = 0.0;
    for (int j = 0; j < d; ++j) sae.w_enc(j, j) = 1.0;  // latents 0..3 mirror inputs
    sae.b_enc.setZero();
    sae.theta.setZero();

    // 100 background samples; latent 0 fires on exactly 2, latent 1 on 3,
    // latent 2 never, latent 3 always.
    std::vector<Eigen::VectorXd> corpus;
    for (int i = 0; i < 100; ++i) {
        Eigen::VectorXd x = Eigen::VectorXd::Zero(d);
        if (i < 2) x(0) = 1.0;
        if (i < 3) x(1) = 1.0;
        x(3) = 1.0;
        corpus.push_back(x);
    }
    std::vector<double> rates;
    std::vector<bool> keep = background_filter(sae, corpus, 0.02, &rates);
    CHECK(keep[0]);        // 2.0% → kept (strict > excludes)
    CHECK_FALSE(keep[1]);  // 3%
    CHECK(keep[2]);        // never fires
    CHECK_FALSE(keep[3]);  // always fires
    CHECK(rates[0] == doctest::Approx(0.02));
    CHECK(rates[3] == doctest::Approx(1.0));

    CHECK_THROWS(background_filter(sae, {}, 0.02));
}

TEST_CASE("select_features argmax per role with hand-built stats") {
    auto mk = [](int layer, int idx, double t, double s, bool valid, bool bg_ok) {
        FeatureStats f;
        f.layer = layer;
        f.index = idx;
        f.t_correct = t;
        f.t_incorrect = -t;
        f.s_correct = s;
        f.s_incorrect = -s;
        f.valid_t = valid;
        f.background_ok = bg_ok;
        return f;
    };
    std::vector<std::vector<FeatureStats>> stats = {
        {mk(0, 0, 3.0, 0.2, true, true), mk(0, 1, 9.0, 0.9, true, false)},  // 1 filtered out
        {mk(1, 0, -4.0, -0.7, true, true), mk(1, 1, 5.0, 0.5, false, true)},
    };
    SelectionResult sel = select_features(stats);
    CHECK(sel.correct_predicting.layer == 0);   // t=3 best among valid+bg_ok
    CHECK(sel.correct_predicting.index == 0);
    CHECK(sel.incorrect_predicting.layer == 1);  // t_incorrect = 4
    CHECK(sel.incorrect_predicting.index == 0);
    CHECK(sel.correct_steering.layer == 1);      // s=0.5 valid not required for sep
    CHECK(sel.correct_steering.index == 1);
    CHECK(sel.incorrect_steering.layer == 1);    // s_incorrect = 0.7
    CHECK(sel.incorrect_steering.index == 0);

    // No candidate at all → throws.
    std::vector<std::vector<FeatureStats>> none = {{mk(0, 0, 1.0, 0.1, true, false)}};
    CHECK_THROWS(select_features(none));
}

TEST_CASE("layer_feature_stats + build_dataset spot check") {
    const int d = 4;
    SAEParams sae = init_sae(d, 2, 3);
    std::vector<ActivationRecord> records;
    Rng rng = make_rng(8, "build-ds");
    for (int i = 0; i < 12; ++i) {
        ActivationRecord r;
        r.problem_id = i;
        r.layer = 2;
        r.residual = Eigen::VectorXd::NullaryExpr(d, [&](Eigen::Index) { return rand_normal(rng); });
        r.label_correct = i % 3 != 0;
        records.push_back(r);
    }
    LayerActivationDataset ds = build_dataset(records, sae);
    CHECK(ds.layer == 2);
    CHECK(ds.activations.rows() == 12);
    CHECK(ds.n_correct + ds.n_incorrect == 12);
    CHECK(ds.activations.minCoeff() >= 0.0);
    // Spot sample: row 5 equals direct encode.
    CHECK((ds.activations.row(5).transpose() - sae_encode(records[5].residual, sae))
              .cwiseAbs()
              .maxCoeff() == 0.0);

    std::vector<bool> keep(static_cast<std::size_t>(sae.d_sae()), true);
    auto stats = layer_feature_stats(ds, keep);
    CHECK(stats.size() == static_cast<std::size_t>(sae.d_sae()));
    for (const auto& f : stats) {
        CHECK(f.layer == 2);
        CHECK(std::abs(f.s_correct + f.s_incorrect) <= 1e-12);
    }

    // Layer mismatch must throw.
    records[0].layer = 1;
    CHECK_THROWS(build_dataset(records, sae));
}

TEST_CASE("feature_stats_csv has the documented header") {
    std::vector<std::vector<FeatureStats>> stats = {{FeatureStats{}}};
    std::string csv = feature_stats_csv(stats);
    CHECK(csv.rfind("layer,index,t_correct,", 0) == 0);
}

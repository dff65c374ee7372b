#include "scalpel/features.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace scalpel {

LayerActivationDataset build_dataset(const std::vector<ActivationRecord>& records,
                                     const SAEParams& sae) {
    if (records.empty()) throw std::invalid_argument("no activation records");
    LayerActivationDataset ds;
    ds.layer = sae.layer;
    ds.activations.resize(static_cast<Eigen::Index>(records.size()), sae.d_sae());
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].layer != sae.layer)
            throw std::invalid_argument("record layer does not match SAE layer");
        ds.activations.row(static_cast<Eigen::Index>(i)) =
            sae_encode(records[i].residual, sae).transpose();
        ds.labels.push_back(records[i].label_correct);
        ds.problem_ids.push_back(records[i].problem_id);
        (records[i].label_correct ? ds.n_correct : ds.n_incorrect)++;
    }
    return ds;
}

std::vector<bool> background_filter(const SAEParams& sae,
                                    const std::vector<Eigen::VectorXd>& corpus_residuals,
                                    double threshold, std::vector<double>* rates_out) {
    if (corpus_residuals.empty()) throw std::invalid_argument("empty background corpus");
    const int ds = sae.d_sae();
    std::vector<int> fire(static_cast<std::size_t>(ds), 0);
    for (const auto& x : corpus_residuals) {
        Eigen::VectorXd a = sae_encode(x, sae);
        for (int j = 0; j < ds; ++j)
            if (a(j) > 0) ++fire[static_cast<std::size_t>(j)];
    }
    std::vector<bool> keep(static_cast<std::size_t>(ds));
    if (rates_out) rates_out->assign(static_cast<std::size_t>(ds), 0.0);
    for (int j = 0; j < ds; ++j) {
        double rate = static_cast<double>(fire[static_cast<std::size_t>(j)]) /
                      static_cast<double>(corpus_residuals.size());
        if (rates_out) (*rates_out)[static_cast<std::size_t>(j)] = rate;
        keep[static_cast<std::size_t>(j)] = !(rate > threshold);  // strict > excludes
    }
    return keep;
}

std::optional<std::pair<double, double>> welch_t(const LayerActivationDataset& ds, int j,
                                                 const WelchOptions& opt) {
    std::vector<double> nz_c, nz_i;
    for (Eigen::Index i = 0; i < ds.activations.rows(); ++i) {
        double a = ds.activations(i, j);
        if (a != 0.0) (ds.labels[static_cast<std::size_t>(i)] ? nz_c : nz_i).push_back(a);
    }
    if (nz_c.size() < 2 || nz_i.size() < 2) return std::nullopt;

    auto moments = [](const std::vector<double>& v) {
        double mu = 0.0;
        for (double x : v) mu += x;
        mu /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mu) * (x - mu);
        var /= static_cast<double>(v.size() - 1);  // unbiased
        return std::pair<double, double>(mu, var);
    };
    auto [mu_c, var_c] = moments(nz_c);
    auto [mu_i, var_i] = moments(nz_i);
    double n_c = opt.nonzero_counts_in_denominator ? static_cast<double>(nz_c.size())
                                                   : static_cast<double>(ds.n_correct);
    double n_i = opt.nonzero_counts_in_denominator ? static_cast<double>(nz_i.size())
                                                   : static_cast<double>(ds.n_incorrect);
    double denom = std::sqrt(var_c / n_c + var_i / n_i);
    if (denom == 0.0) return std::pair<double, double>(0.0, 0.0);
    double t = (mu_c - mu_i) / denom;
    return std::pair<double, double>(t, -t);
}

FreqSep frequencies_and_separation(const LayerActivationDataset& ds, int j) {
    if (ds.n_correct == 0 || ds.n_incorrect == 0)
        throw std::invalid_argument("both classes must be present");
    int fire_c = 0, fire_i = 0;
    for (Eigen::Index i = 0; i < ds.activations.rows(); ++i) {
        if (ds.activations(i, j) > 0.0)
            (ds.labels[static_cast<std::size_t>(i)] ? fire_c : fire_i)++;
    }
    FreqSep out;
    out.f_correct = static_cast<double>(fire_c) / ds.n_correct;
    out.f_incorrect = static_cast<double>(fire_i) / ds.n_incorrect;
    out.s_correct = out.f_correct - out.f_incorrect;
    out.s_incorrect = -out.s_correct;
    return out;
}

std::vector<FeatureStats> layer_feature_stats(const LayerActivationDataset& ds,
                                              const std::vector<bool>& keep_mask,
                                              const std::vector<double>* background_rates,
                                              const WelchOptions& opt) {
    const int d_sae = static_cast<int>(ds.activations.cols());
    if (static_cast<int>(keep_mask.size()) != d_sae)
        throw std::invalid_argument("mask size mismatch");
    std::vector<FeatureStats> out;
    out.reserve(static_cast<std::size_t>(d_sae));
    for (int j = 0; j < d_sae; ++j) {
        FeatureStats fs;
        fs.layer = ds.layer;
        fs.index = j;
        fs.background_ok = keep_mask[static_cast<std::size_t>(j)];
        if (background_rates) fs.background_rate = (*background_rates)[static_cast<std::size_t>(j)];
        auto t = welch_t(ds, j, opt);
        if (t) {
            fs.valid_t = true;
            fs.t_correct = t->first;
            fs.t_incorrect = t->second;
        }
        FreqSep f = frequencies_and_separation(ds, j);
        fs.f_correct = f.f_correct;
        fs.f_incorrect = f.f_incorrect;
        fs.s_correct = f.s_correct;
        fs.s_incorrect = f.s_incorrect;
        out.push_back(fs);
    }
    return out;
}

namespace {

const FeatureStats* argmax_stat(const std::vector<std::vector<FeatureStats>>& all,
                                const std::function<std::optional<double>(const FeatureStats&)>& key) {
    const FeatureStats* best = nullptr;
    double best_val = 0.0;
    for (const auto& layer_stats : all) {
        for (const FeatureStats& fs : layer_stats) {
            if (!fs.background_ok) continue;
            auto v = key(fs);
            if (!v) continue;
            // ties break to lowest layer then lowest index: strict > keeps the
            // earliest candidate in scan order.
            if (!best || *v > best_val) {
                best = &fs;
                best_val = *v;
            }
        }
    }
    return best;
}

}  // namespace

SelectionResult select_features(const std::vector<std::vector<FeatureStats>>& all_layer_stats) {
    auto pick = [&](FeatureRole role, const char* kind,
                    const std::function<std::optional<double>(const FeatureStats&)>& key) {
        const FeatureStats* fs = argmax_stat(all_layer_stats, key);
        if (!fs) throw std::runtime_error("no valid candidate for " + feature_role_name(role));
        SelectedFeature sel;
        sel.role = role;
        sel.layer = fs->layer;
        sel.index = fs->index;
        sel.metric = *key(*fs);
        sel.metric_kind = kind;
        return sel;
    };
    SelectionResult res;
    res.correct_predicting = pick(FeatureRole::CorrectPredicting, "t-stat",
                                  [](const FeatureStats& f) -> std::optional<double> {
                                      if (!f.valid_t) return std::nullopt;
                                      return f.t_correct;
                                  });
    res.incorrect_predicting = pick(FeatureRole::IncorrectPredicting, "t-stat",
                                    [](const FeatureStats& f) -> std::optional<double> {
                                        if (!f.valid_t) return std::nullopt;
                                        return f.t_incorrect;
                                    });
    res.correct_steering = pick(FeatureRole::CorrectSteering, "sep",
                                [](const FeatureStats& f) -> std::optional<double> {
                                    return f.s_correct;
                                });
    res.incorrect_steering = pick(FeatureRole::IncorrectSteering, "sep",
                                  [](const FeatureStats& f) -> std::optional<double> {
                                      return f.s_incorrect;
                                  });
    return res;
}

std::string feature_role_name(FeatureRole role) {
    switch (role) {
        case FeatureRole::CorrectPredicting: return "correct_predicting";
        case FeatureRole::IncorrectPredicting: return "incorrect_predicting";
        case FeatureRole::CorrectSteering: return "correct_steering";
        case FeatureRole::IncorrectSteering: return "incorrect_steering";
    }
    return "";
}

std::string feature_stats_csv(const std::vector<std::vector<FeatureStats>>& all_layer_stats) {
    std::ostringstream ss;
    ss << "layer,index,t_correct,t_incorrect,f_correct,f_incorrect,s_correct,s_incorrect,"
          "background_rate,valid\n";
    ss.precision(12);
    for (const auto& layer_stats : all_layer_stats)
        for (const FeatureStats& f : layer_stats)
            ss << f.layer << ',' << f.index << ',' << f.t_correct << ',' << f.t_incorrect << ','
               << f.f_correct << ',' << f.f_incorrect << ',' << f.s_correct << ','
               << f.s_incorrect << ',' << f.background_rate << ','
               << (f.valid_t && f.background_ok ? 1 : 0) << '\n';
    return ss.str();
}

}  // namespace scalpel

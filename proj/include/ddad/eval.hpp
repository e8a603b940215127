#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddad/data.hpp"
#include "ddad/error.hpp"
#include "ddad/scoring.hpp"
#include "ddad/trainer.hpp"

namespace ddad {

/// Average ranks (1-based) with ties sharing the mean of their positions.
inline std::vector<double> average_ranks(std::span<const double> values) {
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i + 1;
        while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t) ranks[order[t]] = rank;
        i = j;
    }
    return ranks;
}

/// Mann-Whitney AUC: P(abnormal > normal) + 0.5 P(tie), via rank sums.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw EvaluationError("auc: scores and labels differ in length");
    std::size_t pos = 0;
    for (int y : labels) {
        if (y != 0 && y != 1) throw EvaluationError("auc: labels must be 0 or 1");
        pos += static_cast<std::size_t>(y);
    }
    const std::size_t neg = labels.size() - pos;
    if (pos == 0 || neg == 0) throw EvaluationError("auc: both classes must be present");
    for (double s : scores)
        if (std::isnan(s)) throw EvaluationError("auc: NaN score");
    const auto ranks = average_ranks(scores);
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < ranks.size(); ++i)
        if (labels[i] == 1) rank_sum += ranks[i];
    const double p = static_cast<double>(pos), n = static_cast<double>(neg);
    return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

struct Histogram {
    std::vector<double> bin_lo;
    std::vector<double> bin_hi;
    std::vector<std::size_t> normal;
    std::vector<std::size_t> abnormal;

    std::size_t bins() const { return normal.size(); }
};

/// Joint min-max normalization to [0, 1], then `n_bins` equal bins,
/// right-exclusive except the last. Constant scores all land in bin 0.
inline Histogram histogram(std::span<const double> scores, std::span<const int> labels, std::size_t n_bins = 50) {
    if (n_bins < 1) throw EvaluationError("histogram: n_bins must be >= 1");
    if (scores.size() != labels.size()) throw EvaluationError("histogram: scores and labels differ in length");
    Histogram h;
    h.normal.assign(n_bins, 0);
    h.abnormal.assign(n_bins, 0);
    for (std::size_t b = 0; b < n_bins; ++b) {
        h.bin_lo.push_back(static_cast<double>(b) / static_cast<double>(n_bins));
        h.bin_hi.push_back(static_cast<double>(b + 1) / static_cast<double>(n_bins));
    }
    if (scores.empty()) return h;
    const auto [lo_it, hi_it] = std::minmax_element(scores.begin(), scores.end());
    const double lo = *lo_it, range = *hi_it - *lo_it;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        std::size_t bin = 0;
        if (range > 0.0) {
            const double u = (scores[i] - lo) / range;
            bin = std::min(n_bins - 1, static_cast<std::size_t>(u * static_cast<double>(n_bins)));
        }
        (labels[i] == 1 ? h.abnormal : h.normal)[bin] += 1;
    }
    return h;
}

/// Sum over bins of min(normal share, abnormal share); 1 means identical
/// class distributions, 0 means disjoint support.
inline double overlap_coefficient(const Histogram& h) {
    const double n = static_cast<double>(std::accumulate(h.normal.begin(), h.normal.end(), std::size_t{0}));
    const double a = static_cast<double>(std::accumulate(h.abnormal.begin(), h.abnormal.end(), std::size_t{0}));
    if (n == 0.0 || a == 0.0) throw EvaluationError("overlap_coefficient: both classes must be present");
    double acc = 0.0;
    for (std::size_t b = 0; b < h.bins(); ++b)
        acc += std::min(static_cast<double>(h.normal[b]) / n, static_cast<double>(h.abnormal[b]) / a);
    return acc;
}

/// Pearson correlation of average ranks.
inline double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) throw EvaluationError("spearman: need two equal-length samples of size >= 2");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

inline void write_histogram_csv(std::ostream& out, const Histogram& h) {
    out << "bin_lo,bin_hi,count_normal,count_abnormal\n";
    for (std::size_t b = 0; b < h.bins(); ++b)
        out << h.bin_lo[b] << ',' << h.bin_hi[b] << ',' << h.normal[b] << ',' << h.abnormal[b] << '\n';
}

// ---------------------------------------------------------------------------
// Experiments

/// Image-level scores of `images` for each requested kind.
struct ScoreTable {
    std::vector<ScoreKind> kinds;
    std::vector<std::vector<double>> scores; // [kind][image]
};

template <typename T>
ScoreTable score_images(DualEnsembles<T>& modules, const ImagePool& images, const std::vector<ScoreKind>& kinds,
                        SigmaPooling pooling = SigmaPooling::RootMeanVariance) {
    const auto a = reconstruct(modules.a, images);
    const auto b = reconstruct(modules.b, images);
    ScoreTable table{kinds, {}};
    for (ScoreKind k : kinds) table.scores.push_back(image_scores(score_maps(k, images, a, b, pooling)));
    return table;
}

struct SweepRow {
    double ar = 0.0;
    ScoreKind kind = ScoreKind::Rec;
    BackboneKind backbone = BackboneKind::AE;
    double auc = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t seed = 0;
    std::string error; // non-empty when this AR point failed
};

struct SweepConfig {
    std::vector<double> ar_values{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
    SyntheticParams data;
    BackboneConfig arch;
    TrainConfig train;
    std::vector<ScoreKind> kinds{ScoreKind::Rec, ScoreKind::Intra, ScoreKind::Inter};
    SigmaPooling pooling = SigmaPooling::RootMeanVariance;
};

using SweepProgress = std::function<void(double ar, const std::string& stage)>;

/// Regenerates D_u at each AR from one seed family and scores the fixed test
/// set. D_n and the test set do not depend on AR, so module B is trained once
/// and shared by every AR point. A failed point yields NaN rows carrying the
/// error text and the sweep continues.
template <typename T = float>
std::vector<SweepRow> run_ar_sweep(const SweepConfig& config, const SweepProgress& progress = {}) {
    for (double ar : config.ar_values)
        if (!(ar >= 0.0 && ar <= 1.0)) throw ConfigError("sweep: AR values must lie in [0, 1]");
    config.train.validate();
    SyntheticParams base = config.data;
    base.anomaly_rate = 0.0;
    const DatasetSpec fixed = generate_synthetic(base);
    if (progress) progress(0.0, "module B");
    auto module_b = train_ensemble<T>(ModuleRole::B, fixed.normal, config.arch, config.train);

    std::vector<SweepRow> rows;
    for (double ar : config.ar_values) {
        std::vector<SweepRow> point;
        for (ScoreKind k : config.kinds) point.push_back({ar, k, config.arch.kind, std::numeric_limits<double>::quiet_NaN(), config.train.base_seed, {}});
        try {
            if (progress) progress(ar, "module A");
            SyntheticParams p = config.data;
            p.anomaly_rate = ar;
            const DatasetSpec spec = generate_synthetic(p);
            DualEnsembles<T> modules;
            modules.a = train_ensemble<T>(ModuleRole::A, concat(spec.normal, spec.unlabeled), config.arch, config.train);
            modules.b = std::move(module_b);
            try {
                const auto table = score_images(modules, spec.test.images, config.kinds, config.pooling);
                module_b = std::move(modules.b);
                for (std::size_t i = 0; i < point.size(); ++i) point[i].auc = auc(table.scores[i], spec.test.labels);
            } catch (...) {
                module_b = std::move(modules.b);
                throw;
            }
        } catch (const std::exception& e) {
            for (auto& r : point) r.error = e.what();
        }
        rows.insert(rows.end(), point.begin(), point.end());
    }
    return rows;
}

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
    out << "ar,score_kind,backbone,auc,seed\n";
    for (const auto& r : rows) {
        out << r.ar << ',' << name_of(r.kind) << ',' << name_of(r.backbone) << ',';
        if (std::isnan(r.auc)) {
            out << "nan";
        } else {
            out << std::setprecision(6) << std::fixed << r.auc << std::defaultfloat;
        }
        out << ',' << r.seed << '\n';
    }
}

struct MethodSpec {
    BackboneKind backbone = BackboneKind::AE;
    ScoreKind kind = ScoreKind::Rec;
};

struct ComparisonRow {
    MethodSpec spec;
    double auc = 0.0;
};

struct ComparisonReport {
    std::vector<ComparisonRow> rows;
    std::size_t k = 0;
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
    double anomaly_rate = 0.0;
};

/// Trains one pair of modules per distinct backbone on `dataset` and scores
/// every requested (backbone, kind) on its test set.
template <typename T = float>
ComparisonReport method_comparison_report(const std::vector<MethodSpec>& specs, const DatasetSpec& dataset,
                                          const BackboneConfig& arch, const TrainConfig& config,
                                          SigmaPooling pooling = SigmaPooling::RootMeanVariance) {
    if (specs.empty()) throw ConfigError("comparison: no methods requested");
    for (const auto& s : specs)
        if (is_refined(s.kind) && s.backbone != BackboneKind::AEU)
            throw ConfigError("comparison: " + std::string(name_of(s.kind)) + " requires the aeu backbone");
    ComparisonReport report{{}, config.k, config.base_seed, config.epochs, dataset.anomaly_rate};
    for (BackboneKind backbone : {BackboneKind::AE, BackboneKind::AEU}) {
        std::vector<ScoreKind> kinds;
        for (const auto& s : specs)
            if (s.backbone == backbone) kinds.push_back(s.kind);
        if (kinds.empty()) continue;
        BackboneConfig c = arch;
        c.kind = backbone;
        auto modules = train_dual_ensembles<T>(dataset.normal, dataset.unlabeled, c, config);
        const auto table = score_images(modules, dataset.test.images, kinds, pooling);
        for (std::size_t i = 0; i < kinds.size(); ++i)
            report.rows.push_back({{backbone, kinds[i]}, auc(table.scores[i], dataset.test.labels)});
    }
    // Restore the caller's ordering.
    std::vector<ComparisonRow> ordered;
    for (const auto& s : specs)
        for (const auto& r : report.rows)
            if (r.spec.backbone == s.backbone && r.spec.kind == s.kind) {
                ordered.push_back(r);
                break;
            }
    report.rows = std::move(ordered);
    return report;
}

/// Aligned text table: one row per score kind, one column per backbone.
inline std::string format_table(const ComparisonReport& report) {
    std::vector<BackboneKind> cols;
    std::vector<ScoreKind> rows;
    for (const auto& r : report.rows) {
        if (std::find(cols.begin(), cols.end(), r.spec.backbone) == cols.end()) cols.push_back(r.spec.backbone);
        if (std::find(rows.begin(), rows.end(), r.spec.kind) == rows.end()) rows.push_back(r.spec.kind);
    }
    std::ostringstream out;
    out << std::left << std::setw(16) << "score";
    for (auto c : cols) out << std::right << std::setw(10) << name_of(c);
    out << '\n';
    for (auto k : rows) {
        out << std::left << std::setw(16) << name_of(k);
        for (auto c : cols) {
            const auto it = std::find_if(report.rows.begin(), report.rows.end(),
                                         [&](const ComparisonRow& r) { return r.spec.backbone == c && r.spec.kind == k; });
            std::ostringstream cell;
            if (it != report.rows.end()) cell << std::fixed << std::setprecision(4) << it->auc;
            else cell << "-";
            out << std::right << std::setw(10) << cell.str();
        }
        out << '\n';
    }
    return out.str();
}

inline nlohmann::json to_json(const ComparisonReport& report) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : report.rows)
        rows.push_back({{"backbone", name_of(r.spec.backbone)}, {"score_kind", name_of(r.spec.kind)}, {"auc", r.auc}});
    return {{"metadata", {{"k", report.k}, {"seed", report.seed}, {"epochs", report.epochs}, {"ar", report.anomaly_rate}}},
            {"rows", rows}};
}

} // namespace ddad

// Acceptance suite: one PASS/FAIL line per criterion 1-8.
//
//   acceptance            run every criterion
//   acceptance 1 3 7      run a subset
//
// Exit status is 0 only if every selected criterion passes. Criteria 4 and 8
// share one set of trained modules; criteria 4-6 train 64x64 autoencoder
// ensembles and dominate the runtime.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ddad/checkpoint.hpp"
#include "ddad/eval.hpp"
#include "ddad/gradcheck.hpp"
#include "ddad/scoring.hpp"
#include "ddad/trainer.hpp"

using namespace ddad;
using T64 = Tensor<double>;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* format, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, format, args...);
    return buf;
}

T64 random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return T64(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

Outcome gradient_correctness() {
    constexpr int kInstances = 20;
    const GradCheckOptions opt; // h = 1e-5, tol = 1e-6
    std::map<std::string, double> worst;
    std::map<std::string, int> passed;

    for (int seed = 0; seed < kInstances; ++seed) {
        Rng rng(7000 + seed);
        const auto check = [&](const std::string& name, const std::function<T64()>& f, std::vector<T64> inputs) {
            const auto r = grad_check<double>(f, std::span<T64>(inputs), opt);
            worst[name] = std::max(worst[name], r.max_rel_error);
            passed[name] += r.passed ? 1 : 0;
        };

        const std::size_t k = 2 + rng.below(3), s = 1 + rng.below(2), p = rng.below(2);
        auto cx = random_tensor(rng, {2, 2, 7, 7}), cw = random_tensor(rng, {3, 2, k, k}), cb = random_tensor(rng, {3});
        const std::size_t oh = (7 + 2 * p - k) / s + 1;
        auto ct = random_tensor(rng, {2, 3, oh, oh});
        check("conv2d", [&] { return sum(mul(conv2d(cx, cw, cb, s, p), ct)); }, {cx, cw, cb});

        auto tx = random_tensor(rng, {2, 3, 4, 4}), tw = random_tensor(rng, {3, 2, k, k}), tb = random_tensor(rng, {2});
        const std::size_t th = 3 * s + k - 2 * p;
        auto tt = random_tensor(rng, {2, 2, th, th});
        check("conv_transpose2d", [&] { return sum(mul(conv_transpose2d(tx, tw, tb, s, p), tt)); }, {tx, tw, tb});

        auto bx = random_tensor(rng, {3, 2, 3, 3}), bg = random_tensor(rng, {2}, 0.5, 1.5), bb = random_tensor(rng, {2});
        auto bt = random_tensor(rng, {3, 2, 3, 3});
        BatchNormState<double> st(2);
        check("batchnorm2d(train)", [&] { return sum(mul(batchnorm(bx, bg, bb, st, Mode::Train), bt)); }, {bx, bg, bb});

        auto lx = random_tensor(rng, {4, 6}), lw = random_tensor(rng, {5, 6}), lb = random_tensor(rng, {5});
        auto lt = random_tensor(rng, {4, 5});
        check("linear", [&] { return sum(mul(linear(lx, lw, lb), lt)); }, {lx, lw, lb});

        // conv -> relu -> conv, with the bias moved off any kink within reach of h.
        auto rx = random_tensor(rng, {1, 2, 5, 5}), rw = random_tensor(rng, {3, 2, 3, 3}), rb = random_tensor(rng, {3});
        auto rw2 = random_tensor(rng, {1, 3, 3, 3});
        auto fx = random_tensor(rng, {3, 4}), fw = random_tensor(rng, {5, 4}), fb = random_tensor(rng, {5});
        auto fw2 = random_tensor(rng, {2, 5}), fb2 = random_tensor(rng, {2});
        {
            NoGradGuard ng;
            for (auto [pre, bias] : {std::pair{conv2d(rx, rw, rb, 1, 1), &rb}, std::pair{linear(fx, fw, fb), &fb}}) {
                double closest = 1.0;
                for (double v : pre.data()) closest = std::min(closest, std::abs(v));
                if (closest < 1e-3)
                    for (double& v : bias->mutable_data()) v += 2e-3;
            }
        }
        check("relu-composite(conv)",
              [&] { return mean(square(conv2d(relu(conv2d(rx, rw, rb, 1, 1)), rw2, T64::zeros({1}), 1, 0))); },
              {rx, rw, rb, rw2});
        check("relu-composite(linear)", [&] { return mean(square(linear(relu(linear(fx, fw, fb)), fw2, fb2))); },
              {fx, fw, fb, fw2, fb2});

        auto mx = random_tensor(rng, {2, 1, 4, 4}, 0.0, 1.0), mr = random_tensor(rng, {2, 1, 4, 4}, 0.0, 1.0);
        check("loss_mse", [&] { return loss_mse(mx, mr); }, {mr});
        auto ur = random_tensor(rng, {2, 1, 4, 4}, 0.0, 1.0), ul = random_tensor(rng, {2, 1, 4, 4}, -2.0, 1.0);
        check("loss_aeu", [&] { return loss_aeu(mx, ur, ul); }, {ur, ul});
    }

    bool ok = true;
    std::string detail;
    for (const auto& [name, err] : worst) {
        ok = ok && passed[name] == kInstances;
        detail += fmt("%s %d/%d (%.1e) ", name.c_str(), passed[name], kInstances, err);
    }
    return {ok, detail};
}

// ---------------------------------------------------------------------------
// 2. Score-formula oracles

bool same(double a, double b) { return std::abs(a - b) <= 4 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(b)); }

Outcome score_oracles() {
    std::vector<std::string> failures;
    const auto expect = [&](bool cond, const std::string& what) {
        if (!cond) failures.push_back(what);
    };
    const auto one_pixel = [](std::initializer_list<double> values) {
        std::vector<std::vector<double>> members;
        for (double v : values) members.push_back({v});
        return make_outputs(members);
    };
    expect(score_intra(one_pixel({0.37})).scores[0] == 0.0, "K=1 -> 0");
    expect(same(score_intra(one_pixel({0.0, 2.0})).scores[0], 1.0), "{0,2} -> 1");
    expect(same(score_intra(one_pixel({1.0, 1.0, 4.0})).scores[0], std::sqrt(2.0)), "{1,1,4} -> sqrt 2");

    Rng rng(11);
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 1 + rng.below(16), k = 1 + rng.below(5);
        std::vector<std::vector<double>> ma(k, std::vector<double>(n)), mb(k, std::vector<double>(n)),
            var(k, std::vector<double>(n));
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t p = 0; p < n; ++p) {
                ma[i][p] = rng.uniform();
                mb[i][p] = rng.uniform();
                var[i][p] = rng.uniform(1e-8, 0.2);
            }
        const auto a = make_outputs(ma), b = make_outputs(mb, var);
        const auto intra = score_intra(b), inter = score_inter(a, b);
        const auto sigma = pooled_sigma(b);
        const auto refined_intra = refine_with_uncertainty(intra, sigma);
        const auto refined_inter = refine_with_uncertainty(inter, sigma);
        for (std::size_t p = 0; p < n; ++p) {
            // Direct evaluation: population sd across B, |mean A - mean B|, division by pooled sigma.
            double mu_a = 0, mu_b = 0, v_mean = 0;
            for (std::size_t i = 0; i < k; ++i) {
                mu_a += ma[i][p];
                mu_b += mb[i][p];
                v_mean += var[i][p];
            }
            mu_a /= k;
            mu_b /= k;
            v_mean /= k;
            double ss = 0;
            for (std::size_t i = 0; i < k; ++i) ss += (mb[i][p] - mu_b) * (mb[i][p] - mu_b);
            const double direct_intra = std::sqrt(ss / k);
            const double direct_inter = std::abs(mu_a - mu_b);
            const double s = std::max(std::sqrt(v_mean), kSigmaFloor);
            expect(same(intra.scores[p], direct_intra), "intra direct");
            expect(same(inter.scores[p], direct_inter), "inter direct");
            expect(same(refined_intra.scores[p], direct_intra / s), "refined intra direct");
            expect(same(refined_inter.scores[p], direct_inter / s), "refined inter direct");
            if (k == 2) expect(same(intra.scores[p], std::abs(mb[0][p] - mb[1][p]) / 2.0), "K=2 closed form");
        }
    }
    std::sort(failures.begin(), failures.end());
    failures.erase(std::unique(failures.begin(), failures.end()), failures.end());
    std::string detail = failures.empty() ? "K=1, {0,2}, {1,1,4}, K=2 closed form, 200 random direct evaluations" : "";
    for (const auto& f : failures) detail += "mismatch: " + f + "; ";
    return {failures.empty(), detail};
}

// ---------------------------------------------------------------------------
// 3. AUC oracle

double brute_force_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] == 1 && y[j] == 0) {
                pairs += 1.0;
                wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
            }
    return wins / pairs;
}

Outcome auc_oracle() {
    Rng rng(2024);
    int exact = 0, invariant = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 2 + rng.below(49), alphabet = 1 + rng.below(10);
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = static_cast<double>(rng.below(alphabet)) / 4.0;
            y[i] = static_cast<int>(rng.below(2));
        }
        y[0] = 0;
        y[1] = 1;
        const double a = auc(s, y);
        exact += a == brute_force_auc(s, y);
        if (t < 100) {
            std::vector<double> g(n);
            for (std::size_t i = 0; i < n; ++i) g[i] = std::exp(2.0 * s[i]) * 3.0 - 1.0;
            invariant += auc(g, y) == a;
        }
    }
    return {exact == 1000 && invariant == 100,
            fmt("%d/1000 equal brute force, %d/100 invariant under exp transform", exact, invariant)};
}

// ---------------------------------------------------------------------------
// 4 and 8. Desk-scale DDAD effect and histogram overlap

constexpr std::size_t kDeskEpochs = 50;
constexpr std::uint64_t kDeskSeeds[] = {0, 1, 2};

struct DeskRun {
    double auc_rec, auc_intra, auc_inter;
    double overlap_rec, overlap_inter;
};

std::optional<std::vector<DeskRun>> desk_runs;

const std::vector<DeskRun>& desk_scale_runs() {
    if (desk_runs) return *desk_runs;
    desk_runs.emplace();
    for (std::uint64_t seed : kDeskSeeds) {
        const auto t0 = std::chrono::steady_clock::now();
        SyntheticParams p; // 512 normal, 512 unlabeled at AR 0.6, 128 + 128 test
        p.seed = seed;
        const auto data = generate_synthetic(p);
        TrainConfig cfg; // K = 3, lr 5e-4, batch 64
        cfg.epochs = kDeskEpochs;
        cfg.base_seed = seed;
        auto modules = train_dual_ensembles<float>(data.normal, data.unlabeled, BackboneConfig{}, cfg);
        const auto table = score_images(modules, data.test.images, {ScoreKind::Rec, ScoreKind::Intra, ScoreKind::Inter});
        const auto& y = data.test.labels;
        DeskRun r{auc(table.scores[0], y), auc(table.scores[1], y), auc(table.scores[2], y),
                  overlap_coefficient(histogram(table.scores[0], y)), overlap_coefficient(histogram(table.scores[2], y))};
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::fprintf(stderr, "  desk-scale seed %llu: rec %.4f intra %.4f inter %.4f | overlap rec %.3f inter %.3f (%.0f s)\n",
                     static_cast<unsigned long long>(seed), r.auc_rec, r.auc_intra, r.auc_inter, r.overlap_rec,
                     r.overlap_inter, secs);
        desk_runs->push_back(r);
    }
    return *desk_runs;
}

template <typename F>
double mean_of(const std::vector<DeskRun>& runs, F field) {
    double s = 0;
    for (const auto& r : runs) s += field(r);
    return s / static_cast<double>(runs.size());
}

Outcome ddad_effect() {
    const auto& runs = desk_scale_runs();
    const double rec = mean_of(runs, [](const DeskRun& r) { return r.auc_rec; });
    const double intra = mean_of(runs, [](const DeskRun& r) { return r.auc_intra; });
    const double inter = mean_of(runs, [](const DeskRun& r) { return r.auc_inter; });
    return {inter >= rec + 0.05 && intra >= rec,
            fmt("mean AUC over %zu seeds: rec %.4f intra %.4f inter %.4f (need inter >= rec + 0.05, intra >= rec)",
                runs.size(), rec, intra, inter)};
}

Outcome histogram_sanity() {
    const auto& runs = desk_scale_runs();
    const double rec = mean_of(runs, [](const DeskRun& r) { return r.overlap_rec; });
    const double inter = mean_of(runs, [](const DeskRun& r) { return r.overlap_inter; });
    return {inter < rec, fmt("mean overlap coefficient (50 bins): inter %.4f rec %.4f", inter, rec)};
}

// ---------------------------------------------------------------------------
// 5. AR-sweep trend

constexpr std::uint64_t kSweepSeeds[] = {0, 1, 2};

Outcome ar_trend() {
    std::map<double, std::vector<double>> inter, rec;
    for (std::uint64_t seed : kSweepSeeds) {
        SweepConfig cfg;
        cfg.ar_values = {0.0, 0.5, 1.0};
        cfg.data.n_normal = 256;
        cfg.data.m_unlabeled = 256;
        cfg.data.t_normal = 128;
        cfg.data.t_abnormal = 128;
        cfg.data.seed = 100 + seed;
        cfg.train.epochs = 50;
        // Half-size pools; batch 32 keeps the optimizer step count of the full-size run.
        cfg.train.batch_size = 32;
        cfg.train.base_seed = 100 + seed;
        cfg.kinds = {ScoreKind::Rec, ScoreKind::Inter};
        const auto t0 = std::chrono::steady_clock::now();
        const auto rows = run_ar_sweep<float>(cfg);
        for (const auto& r : rows) {
            if (!r.error.empty()) return {false, "sweep point failed: " + r.error};
            (r.kind == ScoreKind::Inter ? inter : rec)[r.ar].push_back(r.auc);
        }
        std::fprintf(stderr, "  sweep seed %llu: inter %.4f %.4f %.4f | rec %.4f (%.0f s)\n",
                     static_cast<unsigned long long>(seed), inter[0.0].back(), inter[0.5].back(), inter[1.0].back(),
                     rec[0.0].back(), std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    const auto avg = [](const std::vector<double>& v) {
        double s = 0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    const double i0 = avg(inter[0.0]), i5 = avg(inter[0.5]), i1 = avg(inter[1.0]), r0 = avg(rec[0.0]);
    return {i1 >= i0 + 0.02 && i0 >= r0 - 0.01,
            fmt("mean inter AUC AR=0 %.4f AR=0.5 %.4f AR=1 %.4f; rec AR=0 %.4f (need AR=1 >= AR=0 + 0.02, "
                "inter >= rec - 0.01 at AR=0)",
                i0, i5, i1, r0)};
}

// ---------------------------------------------------------------------------
// 6. AE-U variance tracks reconstruction error

Outcome aeu_uncertainty() {
    SyntheticParams p;
    p.n_normal = 512;
    p.m_unlabeled = 0;
    p.t_normal = 64;
    p.t_abnormal = 0;
    p.seed = 300;
    const auto data = generate_synthetic(p);
    BackboneConfig arch;
    arch.kind = BackboneKind::AEU;
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.base_seed = 300;
    auto module_b = train_ensemble<float>(ModuleRole::B, data.normal, arch, cfg);
    const auto outputs = reconstruct(module_b, data.test.images);
    std::vector<double> sigma2, err2;
    for (std::size_t i = 0; i < outputs.size(); ++i) {
        const auto x = data.test.images.image(i);
        for (std::size_t m = 0; m < outputs[i].k(); ++m)
            for (std::size_t px = 0; px < x.size(); ++px) {
                sigma2.push_back(outputs[i].variances[m][px]);
                const double d = x[px] - outputs[i].members[m][px];
                err2.push_back(d * d);
            }
    }
    const double rho = spearman(sigma2, err2);
    return {rho >= 0.3, fmt("Spearman(sigma^2, squared error) = %.4f over %zu held-out normal pixels x %zu members",
                            rho, data.test.size() * kImagePixels, module_b.k())};
}

// ---------------------------------------------------------------------------
// 7. Determinism and serialization

Outcome determinism() {
    SyntheticParams p;
    p.n_normal = 32;
    p.m_unlabeled = 0;
    p.t_normal = 8;
    p.t_abnormal = 0;
    p.seed = 9;
    const auto data = generate_synthetic(p);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 8;
    std::vector<std::string> failures;
    for (auto kind : {BackboneKind::AE, BackboneKind::AEU}) {
        BackboneConfig arch;
        arch.kind = kind;
        arch.seed = 17;
        auto n1 = build_backbone<float>(arch), n2 = build_backbone<float>(arch);
        const auto c1 = train_network(n1, data.normal, cfg, 5), c2 = train_network(n2, data.normal, cfg, 5);
        if (c1 != c2) failures.push_back(std::string(name_of(kind)) + " loss curves differ");
        if (encode_checkpoint(n1) != encode_checkpoint(n2)) failures.push_back(std::string(name_of(kind)) + " parameters differ");

        const auto path = std::filesystem::temp_directory_path() / ("ddad_acceptance_" + std::string(name_of(kind)) + ".ckpt");
        save_checkpoint(n1, path);
        auto loaded = load_checkpoint<float>(path, kind);
        std::filesystem::remove(path);
        const auto x = gather<float>(data.test.images, std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7});
        const auto y1 = n1.forward(x, Mode::Eval), y2 = loaded.forward(x, Mode::Eval);
        const auto eq = [](const Tensor<float>& a, const Tensor<float>& b) {
            return std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
        };
        if (!eq(y1.reconstruction, y2.reconstruction) ||
            (y1.log_variance && !eq(*y1.log_variance, *y2.log_variance)))
            failures.push_back(std::string(name_of(kind)) + " round-trip forward differs");
    }
    std::string detail = failures.empty() ? "ae and aeu: loss curves, parameters and round-trip forward bit-identical" : "";
    for (const auto& f : failures) detail += f + "; ";
    return {failures.empty(), detail};
}

} // namespace

int main(int argc, char** argv) {
    configure_allocator();
    const std::vector<std::pair<int, Outcome (*)()>> criteria{
        {1, gradient_correctness}, {2, score_oracles}, {3, auc_oracle},   {4, ddad_effect},
        {5, ar_trend},             {6, aeu_uncertainty}, {7, determinism}, {8, histogram_sanity}};
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    bool all = true;
    for (const auto& [id, run] : criteria) {
        if (!selected.empty() && !selected.contains(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("criterion %d: %s  %s [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
        std::fflush(stdout);
        all = all && o.pass;
    }
    return all ? 0 : 1;
}

#include <cmath>
#include <cstdlib>
#include <vector>

#include <gtest/gtest.h>

#include "ddad/trainer.hpp"

using namespace ddad;

namespace {

// Pools are 64x64, so tests use the default architecture with few images and epochs.
TrainConfig quick_config(std::size_t epochs = 2, std::size_t k = 2) {
    TrainConfig c;
    c.epochs = epochs;
    c.k = k;
    c.batch_size = 4;
    c.base_seed = 5;
    return c;
}

ImagePool constant_pool(std::size_t n, float value) {
    ImagePool pool;
    const std::vector<float> img(kImagePixels, value);
    for (std::size_t i = 0; i < n; ++i) pool.push_back("c" + std::to_string(i), img);
    return pool;
}

ImagePool synthetic_normals(std::size_t n, std::uint64_t seed) {
    SyntheticParams p;
    p.n_normal = n;
    p.m_unlabeled = 0;
    p.t_normal = 0;
    p.t_abnormal = 0;
    p.seed = seed;
    return generate_synthetic(p).normal;
}

std::vector<Parameter<double>> make_params(std::vector<double> w, std::vector<double> g) {
    const std::size_t n = w.size();
    Tensor<double> t({n}, std::move(w), true);
    std::copy(g.begin(), g.end(), t.mutable_grad().begin());
    return {{"w", t}};
}

} // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    auto params = make_params({0.5, -1.0, 2.0}, {0.0, 0.0, 0.0});
    AdamState<double> state(params);
    for (int i = 0; i < 10; ++i) adam_step(params, state, 5e-4, 0.9, 0.999, 1e-8);
    EXPECT_EQ(std::vector<double>(params[0].value.data().begin(), params[0].value.data().end()),
              (std::vector<double>{0.5, -1.0, 2.0}));
    EXPECT_EQ(state.t, 10u);
}

TEST(Adam, FirstStepMovesByLearningRateTimesSign) {
    // m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps).
    const std::vector<double> g{0.3, -2.0, 1e-3};
    auto params = make_params({0.0, 0.0, 0.0}, g);
    AdamState<double> state(params);
    const double lr = 5e-4, eps = 1e-8;
    adam_step(params, state, lr, 0.9, 0.999, eps);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double expected = -lr * g[i] / (std::abs(g[i]) + eps);
        EXPECT_NEAR(params[0].value.data()[i], expected, 1e-15);
    }
}

TEST(Adam, MatchesHandComputedSecondStep) {
    auto params = make_params({1.0}, {0.5});
    AdamState<double> state(params);
    adam_step(params, state, 0.1, 0.9, 0.999, 1e-8);
    params[0].value.mutable_grad()[0] = -0.25;
    adam_step(params, state, 0.1, 0.9, 0.999, 1e-8);
    double w = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 2; ++t) {
        const double g = t == 1 ? 0.5 : -0.25;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
        w -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    }
    EXPECT_NEAR(params[0].value.data()[0], w, 1e-14);
}

TEST(Adam, NonFiniteGradientIsNumericalErrorAndNothingChanges) {
    auto params = make_params({1.0, 2.0}, {0.1, NAN});
    AdamState<double> state(params);
    EXPECT_THROW(adam_step(params, state, 0.1, 0.9, 0.999, 1e-8), NumericalError);
    EXPECT_EQ(params[0].value.data()[0], 1.0);
    EXPECT_EQ(state.t, 0u);
}

TEST(Adam, IdenticalInputsGiveIdenticalParameters) {
    auto p1 = make_params({0.1, 0.2}, {0.3, -0.4});
    auto p2 = make_params({0.1, 0.2}, {0.3, -0.4});
    AdamState<double> s1(p1), s2(p2);
    for (int i = 0; i < 5; ++i) {
        adam_step(p1, s1, 1e-2, 0.9, 0.999, 1e-8);
        adam_step(p2, s2, 1e-2, 0.9, 0.999, 1e-8);
    }
    EXPECT_EQ(p1[0].value.data()[0], p2[0].value.data()[0]);
    EXPECT_EQ(p1[0].value.data()[1], p2[0].value.data()[1]);
}

TEST(TrainConfig, Validation) {
    TrainConfig c;
    EXPECT_NO_THROW(c.validate());
    c.k = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.epochs = 0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch_size = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainConfig, DefaultsMatchTheMethod) {
    const TrainConfig c;
    EXPECT_EQ(c.epochs, 250u);
    EXPECT_EQ(c.learning_rate, 5e-4);
    EXPECT_EQ(c.batch_size, 64u);
    EXPECT_EQ(c.k, 3u);
    EXPECT_EQ(c.beta1, 0.9);
    EXPECT_EQ(c.beta2, 0.999);
    EXPECT_EQ(c.eps, 1e-8);
}

TEST(TrainNetwork, EmptyPoolIsConfigError) {
    auto net = build_backbone<float>(BackboneConfig{});
    EXPECT_THROW(train_network(net, ImagePool{}, quick_config(), 1), ConfigError);
}

TEST(TrainNetwork, LossDecreasesOnConstantImages) {
    auto net = build_backbone<float>(BackboneConfig{});
    auto cfg = quick_config(3);
    const auto curve = train_network(net, constant_pool(8, 0.7f), cfg, 1);
    ASSERT_EQ(curve.size(), 3u);
    EXPECT_LT(curve.back(), curve.front());
}

TEST(TrainNetwork, SameSeedGivesIdenticalLossCurveAndParameters) {
    const auto pool = synthetic_normals(10, 4);
    BackboneConfig arch;
    arch.seed = 9;
    auto a = build_backbone<float>(arch);
    auto b = build_backbone<float>(arch);
    const auto ca = train_network(a, pool, quick_config(), 3);
    const auto cb = train_network(b, pool, quick_config(), 3);
    EXPECT_EQ(ca, cb);
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
        const auto pa = a.parameters()[i].value.data(), pb = b.parameters()[i].value.data();
        ASSERT_TRUE(std::equal(pa.begin(), pa.end(), pb.begin())) << a.parameters()[i].name;
    }
}

TEST(TrainNetwork, ShuffleSeedChangesTheCurve) {
    const auto pool = synthetic_normals(10, 4);
    auto a = build_backbone<float>(BackboneConfig{});
    auto b = build_backbone<float>(BackboneConfig{});
    EXPECT_NE(train_network(a, pool, quick_config(), 3), train_network(b, pool, quick_config(), 4));
}

TEST(TrainNetwork, AeuTrains) {
    BackboneConfig arch;
    arch.kind = BackboneKind::AEU;
    auto net = build_backbone<float>(arch);
    const auto curve = train_network(net, synthetic_normals(8, 2), quick_config(3), 1);
    for (double v : curve) EXPECT_TRUE(std::isfinite(v));
    EXPECT_LT(curve.back(), curve.front());
}

TEST(TrainNetwork, CallbackSeesEveryEpoch) {
    auto net = build_backbone<float>(BackboneConfig{});
    std::vector<double> seen;
    const auto curve =
        train_network(net, constant_pool(4, 0.5f), quick_config(2), 1, [&](std::size_t, double l) { seen.push_back(l); });
    EXPECT_EQ(seen, curve);
}

TEST(DualEnsembles, SeedsAndRoles) {
    EXPECT_EQ(member_seed(ModuleRole::A, 10, 2), 12u);
    EXPECT_EQ(member_seed(ModuleRole::B, 10, 2), 1012u);
    const auto normal = synthetic_normals(6, 1);
    const auto modules = train_dual_ensembles<float>(normal, ImagePool{}, BackboneConfig{}, quick_config(1, 3));
    ASSERT_EQ(modules.a.k(), 3u);
    ASSERT_EQ(modules.b.k(), 3u);
    EXPECT_EQ(modules.a.role, ModuleRole::A);
    EXPECT_EQ(modules.b.role, ModuleRole::B);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(modules.a.nets[i].config().seed, 5u + i);
        EXPECT_EQ(modules.b.nets[i].config().seed, 1005u + i);
        EXPECT_EQ(modules.a.loss_curves[i].size(), 1u);
    }
}

TEST(DualEnsembles, EmptyNormalPoolIsConfigError) {
    EXPECT_THROW(train_dual_ensembles<float>(ImagePool{}, synthetic_normals(2, 1), BackboneConfig{}, quick_config()),
                 ConfigError);
}

TEST(DualEnsembles, ThreadCountDoesNotChangeResults) {
    const auto normal = synthetic_normals(6, 3);
    const auto unlabeled = synthetic_normals(4, 8);
    setenv("DDAD_THREADS", "1", 1);
    const auto serial = train_dual_ensembles<float>(normal, unlabeled, BackboneConfig{}, quick_config(1, 2));
    setenv("DDAD_THREADS", "4", 1);
    const auto parallel = train_dual_ensembles<float>(normal, unlabeled, BackboneConfig{}, quick_config(1, 2));
    unsetenv("DDAD_THREADS");
    for (auto [s, p] : {std::pair{&serial.a, &parallel.a}, std::pair{&serial.b, &parallel.b}}) {
        EXPECT_EQ(s->loss_curves, p->loss_curves);
        for (std::size_t m = 0; m < s->k(); ++m)
            for (std::size_t i = 0; i < s->nets[m].parameters().size(); ++i) {
                const auto x = s->nets[m].parameters()[i].value.data(), y = p->nets[m].parameters()[i].value.data();
                ASSERT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
            }
    }
}

TEST(DualEnsembles, TrainingSeparateMembersMatchesEnsembleTraining) {
    const auto normal = synthetic_normals(6, 3);
    const auto cfg = quick_config(1, 2);
    const auto modules = train_dual_ensembles<float>(normal, ImagePool{}, BackboneConfig{}, cfg);
    BackboneConfig arch;
    arch.seed = member_seed(ModuleRole::B, cfg.base_seed, 1);
    auto alone = build_backbone<float>(arch);
    EXPECT_EQ(train_network(alone, normal, cfg, arch.seed), modules.b.loss_curves[1]);
}

TEST(WorkerThreads, RespectsEnvironmentCap) {
    setenv("DDAD_THREADS", "2", 1);
    EXPECT_EQ(worker_threads(6), 2u);
    EXPECT_EQ(worker_threads(1), 1u);
    setenv("DDAD_THREADS", "junk", 1);
    EXPECT_GE(worker_threads(6), 1u);
    unsetenv("DDAD_THREADS");
}

TEST(TrainNetwork, FinalLossAtMostHalfTheFirstOnSyntheticNormals) {
    auto net = build_backbone<float>(BackboneConfig{});
    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.batch_size = 16;
    const auto curve = train_network(net, synthetic_normals(64, 12), cfg, 2);
    EXPECT_LE(curve.back(), 0.5 * curve.front()) << curve.front() << " -> " << curve.back();
}

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <gtest/gtest.h>

#include "ddad/scoring.hpp"

using namespace ddad;

namespace {

using Map = std::vector<double>;

EnsembleOutputs outputs(std::vector<Map> members, std::vector<Map> variances = {}) {
    return make_outputs(std::move(members), std::move(variances));
}

// Population standard deviation written out independently of score_intra.
double population_sd(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::sqrt(ss / double(v.size()));
}

Map random_map(Rng& rng, std::size_t n) {
    Map m(n);
    for (auto& v : m) v = rng.uniform();
    return m;
}

} // namespace

TEST(ScoreRec, Examples) {
    const std::vector<double> x{1.0, 0.2, 0.0};
    EXPECT_EQ(score_rec(std::span<const double>(x), std::span<const double>(x)).scores, (Map{0, 0, 0}));
    const std::vector<double> one{1.0}, half{0.5};
    EXPECT_EQ(score_rec(std::span<const double>(one), std::span<const double>(half)).scores[0], 0.25);
    const std::vector<double> a{0.25}, b{0.5}, c{0.75};
    EXPECT_EQ(score_rec(std::span<const double>(b), std::span<const double>(a)).scores,
              score_rec(std::span<const double>(b), std::span<const double>(c)).scores);
    EXPECT_THROW(score_rec(std::span<const double>(x), std::span<const double>(one)), ShapeError);
}

TEST(ScoreIntra, SingleMemberIsZero) {
    EXPECT_EQ(score_intra(outputs({{0.3, 0.9}})).scores, (Map{0.0, 0.0}));
}

TEST(ScoreIntra, HandBuiltCases) {
    EXPECT_EQ(score_intra(outputs({{0.0}, {2.0}})).scores[0], 1.0);
    EXPECT_EQ(score_intra(outputs({{1.0}, {1.0}, {4.0}})).scores[0], std::sqrt(2.0));
}

TEST(ScoreIntra, TwoMembersMatchClosedForm) {
    Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        const double a = rng.uniform(), b = rng.uniform();
        EXPECT_NEAR(score_intra(outputs({{a}, {b}})).scores[0], std::abs(a - b) / 2.0, 1e-16);
    }
}

TEST(ScoreIntra, MatchesPopulationStandardDeviation) {
    Rng rng(2);
    for (int t = 0; t < 50; ++t) {
        const std::size_t k = 1 + rng.below(6);
        std::vector<Map> members;
        for (std::size_t i = 0; i < k; ++i) members.push_back(random_map(rng, 8));
        const auto map = score_intra(outputs(members));
        for (std::size_t p = 0; p < 8; ++p) {
            std::vector<double> column;
            for (const auto& m : members) column.push_back(m[p]);
            EXPECT_NEAR(map.scores[p], population_sd(column), 1e-15);
        }
    }
}

TEST(EnsembleOutputs, MeanIsArithmeticMean) {
    const auto o = outputs({{0.0, 1.0}, {0.5, 0.0}, {1.0, 0.5}});
    EXPECT_EQ(o.mean, (Map{0.5, 0.5}));
    EXPECT_THROW(outputs({{0.0}, {0.0, 1.0}}), ShapeError);
}

TEST(ScoreInter, Examples) {
    const auto a = outputs({{0.8}}), b = outputs({{0.3}});
    EXPECT_DOUBLE_EQ(score_inter(a, b).scores[0], 0.5);
    EXPECT_EQ(score_inter(a, a).scores[0], 0.0);
    EXPECT_THROW(score_inter(a, outputs({{0.1, 0.2}})), ShapeError);
}

TEST(ScoreInter, IsSymmetric) {
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        const auto a = outputs({random_map(rng, 16), random_map(rng, 16), random_map(rng, 16)});
        const auto b = outputs({random_map(rng, 16), random_map(rng, 16)});
        EXPECT_EQ(score_inter(a, b).scores, score_inter(b, a).scores);
    }
}

TEST(ScoreInter, MatchesDirectMeanDifference) {
    const auto a = outputs({{0.1, 0.9}, {0.3, 0.5}}), b = outputs({{0.6, 0.2}, {0.6, 0.4}, {0.9, 0.0}});
    EXPECT_NEAR(score_inter(a, b).scores[0], std::abs(0.2 - 0.7), 1e-15);
    EXPECT_NEAR(score_inter(a, b).scores[1], std::abs(0.7 - 0.2), 1e-15);
}

TEST(Refine, UnitAndDoubleSigma) {
    const AnomalyMap intra{{0.2, 0.6, 0.0}, ScoreKind::Intra};
    const std::vector<double> ones(3, 1.0), twos(3, 2.0);
    const auto same = refine_with_uncertainty(intra, ones);
    EXPECT_EQ(same.scores, intra.scores);
    EXPECT_EQ(same.kind, ScoreKind::IntraRefined);
    EXPECT_EQ(refine_with_uncertainty(intra, twos).scores, (Map{0.1, 0.3, 0.0}));
    const AnomalyMap inter{{0.4}, ScoreKind::Inter};
    EXPECT_EQ(refine_with_uncertainty(inter, std::vector<double>{2.0}).kind, ScoreKind::InterRefined);
}

TEST(Refine, SigmaFloor) {
    const AnomalyMap m{{1.0}, ScoreKind::Inter};
    EXPECT_EQ(refine_with_uncertainty(m, std::vector<double>{1e-9}).scores[0], 1.0 / 1e-3);
    EXPECT_EQ(refine_with_uncertainty(m, std::vector<double>{0.0}).scores[0], 1.0 / 1e-3);
}

TEST(Refine, RejectsRecMapsAndSizeMismatch) {
    const AnomalyMap rec{{1.0}, ScoreKind::Rec};
    EXPECT_THROW(refine_with_uncertainty(rec, std::vector<double>{1.0}), ContractError);
    const AnomalyMap inter{{1.0}, ScoreKind::Inter};
    EXPECT_THROW(refine_with_uncertainty(inter, std::vector<double>{1.0, 1.0}), ShapeError);
}

TEST(PooledSigma, RootMeanVarianceAndMeanSigma) {
    // Member sigmas 1 and 3, i.e. variances 1 and 9.
    const auto b = outputs({{0.0}, {0.0}}, {{1.0}, {9.0}});
    EXPECT_DOUBLE_EQ(pooled_sigma(b, SigmaPooling::RootMeanVariance)[0], std::sqrt(5.0));
    EXPECT_DOUBLE_EQ(pooled_sigma(b, SigmaPooling::MeanSigma)[0], 2.0);
    EXPECT_THROW(pooled_sigma(outputs({{0.0}})), ContractError);
}

TEST(PooledSigma, ParseNames) {
    EXPECT_EQ(parse_sigma_pooling("rms"), SigmaPooling::RootMeanVariance);
    EXPECT_EQ(parse_sigma_pooling("mean"), SigmaPooling::MeanSigma);
    EXPECT_THROW(parse_sigma_pooling("median"), ConfigError);
}

TEST(ImageScore, Examples) {
    EXPECT_EQ(image_score({Map(4096, 0.25), ScoreKind::Rec}), 0.25);
    EXPECT_EQ(image_score({{0.0, 1.0}, ScoreKind::Rec}), 0.5);
    EXPECT_EQ(image_score({Map(4096, 0.0), ScoreKind::Inter}), 0.0);
}

TEST(ScoreKinds, ParseRoundTrip) {
    for (auto k : {ScoreKind::Rec, ScoreKind::Intra, ScoreKind::Inter, ScoreKind::IntraRefined, ScoreKind::InterRefined})
        EXPECT_EQ(parse_score_kind(name_of(k)), k);
    EXPECT_THROW(parse_score_kind("bogus"), ConfigError);
}

TEST(Properties, MapsAreNonNegative) {
    Rng rng(4);
    for (int t = 0; t < 30; ++t) {
        const auto a = outputs({random_map(rng, 32), random_map(rng, 32)});
        const auto b = outputs({random_map(rng, 32), random_map(rng, 32), random_map(rng, 32)},
                               {random_map(rng, 32), random_map(rng, 32), random_map(rng, 32)});
        const auto sigma = pooled_sigma(b);
        for (const auto& m : {score_intra(b), score_inter(a, b), refine_with_uncertainty(score_inter(a, b), sigma),
                              refine_with_uncertainty(score_intra(b), sigma)})
            for (double v : m.scores) EXPECT_GE(v, 0.0);
    }
}

TEST(Properties, IntraDependsOnModuleBOnly) {
    Rng rng(5);
    ImagePool images;
    images.push_back("x", std::vector<float>(kImagePixels, 0.5f));
    const std::vector<EnsembleOutputs> b{outputs({random_map(rng, kImagePixels), random_map(rng, kImagePixels)})};
    const std::vector<EnsembleOutputs> a1{outputs({random_map(rng, kImagePixels)})};
    const std::vector<EnsembleOutputs> a2{outputs({random_map(rng, kImagePixels), random_map(rng, kImagePixels)})};
    EXPECT_EQ(score_maps(ScoreKind::Intra, images, a1, b)[0].scores, score_maps(ScoreKind::Intra, images, a2, b)[0].scores);
}

TEST(Properties, RefinedEqualsUnrefinedWhereSigmaIsOne) {
    Rng rng(7);
    const auto a = outputs({random_map(rng, 8)});
    const auto b = outputs({random_map(rng, 8), random_map(rng, 8)}, {Map(8, 1.0), Map(8, 1.0)});
    EXPECT_EQ(refine_with_uncertainty(score_inter(a, b), pooled_sigma(b)).scores, score_inter(a, b).scores);
    EXPECT_EQ(refine_with_uncertainty(score_intra(b), pooled_sigma(b)).scores, score_intra(b).scores);
}

TEST(Properties, BatchScoresAreConcatenatedPerImageScores) {
    Rng rng(6);
    ImagePool images;
    std::vector<EnsembleOutputs> a, b;
    for (int i = 0; i < 3; ++i) {
        std::vector<float> img(kImagePixels);
        for (auto& v : img) v = float(rng.uniform());
        images.push_back("i" + std::to_string(i), img);
        a.push_back(outputs({random_map(rng, kImagePixels), random_map(rng, kImagePixels)}));
        b.push_back(outputs({random_map(rng, kImagePixels), random_map(rng, kImagePixels)}));
    }
    for (auto kind : {ScoreKind::Rec, ScoreKind::Intra, ScoreKind::Inter}) {
        const auto all = image_scores(score_maps(kind, images, a, b));
        for (std::size_t i = 0; i < 3; ++i) {
            ImagePool single;
            single.push_back(images.ids[i], images.image(i));
            const auto one = image_scores(score_maps(kind, single, {a[i]}, {b[i]}));
            EXPECT_EQ(one[0], all[i]);
        }
    }
}

TEST(Properties, RecUsesFirstMemberOfModuleB) {
    ImagePool images;
    images.push_back("x", std::vector<float>(kImagePixels, 1.0f));
    const std::vector<EnsembleOutputs> a{outputs({Map(kImagePixels, 0.0)})};
    const std::vector<EnsembleOutputs> b{outputs({Map(kImagePixels, 0.5), Map(kImagePixels, 1.0)})};
    EXPECT_EQ(image_scores(score_maps(ScoreKind::Rec, images, a, b))[0], 0.25);
}

TEST(Export, PgmIsMinMaxScaled) {
    const auto path = std::filesystem::temp_directory_path() / "ddad_test_map.pgm";
    AnomalyMap m{Map(kImagePixels, 2.0), ScoreKind::Inter};
    m.scores[0] = 1.0;
    m.scores[1] = 3.0;
    write_map_pgm(path, m);
    std::ifstream in(path, std::ios::binary);
    std::string magic, dims_w, dims_h, maxval;
    in >> magic >> dims_w >> dims_h >> maxval;
    in.get();
    std::vector<unsigned char> px(kImagePixels);
    in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
    EXPECT_EQ(magic, "P5");
    EXPECT_EQ(maxval, "255");
    EXPECT_EQ(px[0], 0);
    EXPECT_EQ(px[1], 255);
    EXPECT_EQ(px[2], 128);
    std::filesystem::remove(path);
}

TEST(Export, RawIsLittleEndianFloat32) {
    const auto path = std::filesystem::temp_directory_path() / "ddad_test_map.f32";
    write_map_raw(path, {{1.0, -2.5}, ScoreKind::Rec});
    std::ifstream in(path, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    ASSERT_EQ(bytes.size(), 8u);
    // 1.0f = 0x3F800000, -2.5f = 0xC0200000
    EXPECT_EQ(bytes, (std::vector<unsigned char>{0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x20, 0xC0}));
    std::filesystem::remove(path);
}

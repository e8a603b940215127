#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ddad/backbone.hpp"
#include "ddad/data.hpp"
#include "ddad/error.hpp"
#include "ddad/trainer.hpp"

namespace ddad {

enum class ScoreKind : std::uint8_t { Rec, Intra, Inter, IntraRefined, InterRefined };

inline std::string_view name_of(ScoreKind kind) {
    switch (kind) {
    case ScoreKind::Rec: return "rec";
    case ScoreKind::Intra: return "intra";
    case ScoreKind::Inter: return "inter";
    case ScoreKind::IntraRefined: return "intra_refined";
    case ScoreKind::InterRefined: return "inter_refined";
    }
    return "?";
}

inline ScoreKind parse_score_kind(std::string_view text) {
    for (auto k : {ScoreKind::Rec, ScoreKind::Intra, ScoreKind::Inter, ScoreKind::IntraRefined, ScoreKind::InterRefined})
        if (text == name_of(k)) return k;
    throw ConfigError("unknown score kind '" + std::string(text) + "'");
}

inline bool is_refined(ScoreKind kind) { return kind == ScoreKind::IntraRefined || kind == ScoreKind::InterRefined; }

/// Pixel map of one image.
struct AnomalyMap {
    std::vector<double> scores;
    ScoreKind kind = ScoreKind::Rec;
};

/// Reconstructions of one image by the K members of a module.
struct EnsembleOutputs {
    std::vector<std::vector<double>> members;
    std::vector<double> mean;
    // AEU members only: per-member sigma^2 maps.
    std::vector<std::vector<double>> variances;

    std::size_t k() const { return members.size(); }
    std::size_t pixels() const { return mean.size(); }
};

/// Builds outputs from member maps; the mean is computed here.
inline EnsembleOutputs make_outputs(std::vector<std::vector<double>> members,
                                    std::vector<std::vector<double>> variances = {}) {
    if (members.empty()) throw ContractError("ensemble outputs need at least one member");
    const std::size_t n = members.front().size();
    for (const auto& m : members)
        if (m.size() != n) throw ShapeError("ensemble outputs: member maps differ in size");
    for (const auto& v : variances)
        if (v.size() != n) throw ShapeError("ensemble outputs: variance maps differ in size");
    if (!variances.empty() && variances.size() != members.size()) {
        throw ShapeError("ensemble outputs: one variance map per member required");
    }
    EnsembleOutputs out;
    out.mean.assign(n, 0.0);
    for (const auto& m : members)
        for (std::size_t p = 0; p < n; ++p) out.mean[p] += m[p];
    const double inv_k = 1.0 / static_cast<double>(members.size());
    for (double& v : out.mean) v *= inv_k;
    out.members = std::move(members);
    out.variances = std::move(variances);
    return out;
}

template <typename U>
AnomalyMap score_rec(std::span<const U> x, std::span<const double> reconstruction) {
    if (x.size() != reconstruction.size()) throw ShapeError("score_rec: image and reconstruction differ in size");
    AnomalyMap map{std::vector<double>(x.size()), ScoreKind::Rec};
    for (std::size_t p = 0; p < x.size(); ++p) {
        const double d = static_cast<double>(x[p]) - reconstruction[p];
        map.scores[p] = d * d;
    }
    return map;
}

/// Population standard deviation across module B's members.
inline AnomalyMap score_intra(const EnsembleOutputs& b) {
    AnomalyMap map{std::vector<double>(b.pixels(), 0.0), ScoreKind::Intra};
    const double inv_k = 1.0 / static_cast<double>(b.k());
    for (std::size_t p = 0; p < b.pixels(); ++p) {
        double acc = 0.0;
        for (const auto& m : b.members) acc += (b.mean[p] - m[p]) * (b.mean[p] - m[p]);
        map.scores[p] = std::sqrt(acc * inv_k);
    }
    return map;
}

inline AnomalyMap score_inter(const EnsembleOutputs& a, const EnsembleOutputs& b) {
    if (a.pixels() != b.pixels()) throw ShapeError("score_inter: module outputs differ in size");
    AnomalyMap map{std::vector<double>(a.pixels()), ScoreKind::Inter};
    for (std::size_t p = 0; p < a.pixels(); ++p) map.scores[p] = std::abs(a.mean[p] - b.mean[p]);
    return map;
}

enum class SigmaPooling : std::uint8_t {
    RootMeanVariance, // sqrt(mean_i sigma_i^2)
    MeanSigma,        // mean_i sigma_i
};

inline std::string_view name_of(SigmaPooling pooling) {
    return pooling == SigmaPooling::RootMeanVariance ? "rms" : "mean";
}

inline SigmaPooling parse_sigma_pooling(std::string_view text) {
    if (text == "rms") return SigmaPooling::RootMeanVariance;
    if (text == "mean") return SigmaPooling::MeanSigma;
    throw ConfigError("unknown sigma pooling '" + std::string(text) + "' (expected rms or mean)");
}

inline constexpr double kSigmaFloor = 1e-3;

/// Per-pixel sigma pooled over module B's AEU members (no floor applied).
inline std::vector<double> pooled_sigma(const EnsembleOutputs& b, SigmaPooling pooling = SigmaPooling::RootMeanVariance) {
    if (b.variances.empty()) throw ContractError("uncertainty refinement needs an AEU module B");
    std::vector<double> sigma(b.pixels(), 0.0);
    const double inv_k = 1.0 / static_cast<double>(b.variances.size());
    for (const auto& v : b.variances)
        for (std::size_t p = 0; p < sigma.size(); ++p)
            sigma[p] += pooling == SigmaPooling::RootMeanVariance ? v[p] : std::sqrt(v[p]);
    for (double& s : sigma) {
        s *= inv_k;
        if (pooling == SigmaPooling::RootMeanVariance) s = std::sqrt(s);
    }
    return sigma;
}

/// Divides an intra or inter map by max(sigma, 1e-3) per pixel.
inline AnomalyMap refine_with_uncertainty(const AnomalyMap& map, std::span<const double> sigma) {
    if (map.kind != ScoreKind::Intra && map.kind != ScoreKind::Inter) {
        throw ContractError("refine_with_uncertainty: only intra and inter maps can be refined");
    }
    if (sigma.size() != map.scores.size()) throw ShapeError("refine_with_uncertainty: sigma size mismatch");
    AnomalyMap out{std::vector<double>(map.scores.size()),
                   map.kind == ScoreKind::Intra ? ScoreKind::IntraRefined : ScoreKind::InterRefined};
    for (std::size_t p = 0; p < sigma.size(); ++p) out.scores[p] = map.scores[p] / std::max(sigma[p], kSigmaFloor);
    return out;
}

inline double image_score(const AnomalyMap& map) {
    if (map.scores.empty()) return 0.0;
    double acc = 0.0;
    for (double v : map.scores) acc += v;
    return acc / static_cast<double>(map.scores.size());
}

/// Eval-mode reconstructions of every pool image by every member of `module`.
template <typename T>
std::vector<EnsembleOutputs> reconstruct(EnsembleModule<T>& module, const ImagePool& pool,
                                         std::size_t batch_size = 64) {
    if (module.nets.empty()) throw ContractError("reconstruct: module has no members");
    const bool aeu = module.nets.front().kind() == BackboneKind::AEU;
    const std::size_t n = pool.size();
    std::vector<std::vector<std::vector<double>>> recon(n), var(n);
    NoGradGuard no_grad;
    for (std::size_t start = 0; start < n; start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) idx.push_back(i);
        const auto x = gather<T>(pool, idx);
        for (auto& net : module.nets) {
            const auto out = net.forward(x, Mode::Eval);
            const auto r = out.reconstruction.data();
            for (std::size_t b = 0; b < idx.size(); ++b) {
                recon[idx[b]].emplace_back(r.begin() + static_cast<std::ptrdiff_t>(b * kImagePixels),
                                           r.begin() + static_cast<std::ptrdiff_t>((b + 1) * kImagePixels));
                if (aeu) {
                    const auto s = out.log_variance->data();
                    std::vector<double> v(kImagePixels);
                    for (std::size_t p = 0; p < kImagePixels; ++p) v[p] = std::exp(static_cast<double>(s[b * kImagePixels + p]));
                    var[idx[b]].push_back(std::move(v));
                }
            }
        }
    }
    std::vector<EnsembleOutputs> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_outputs(std::move(recon[i]), std::move(var[i])));
    return out;
}

/// Per-image maps for one score kind. A_rec uses module B's first member,
/// i.e. a single autoencoder trained on normal images only.
inline std::vector<AnomalyMap> score_maps(ScoreKind kind, const ImagePool& images, const std::vector<EnsembleOutputs>& a,
                                          const std::vector<EnsembleOutputs>& b,
                                          SigmaPooling pooling = SigmaPooling::RootMeanVariance) {
    std::vector<AnomalyMap> maps;
    maps.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        switch (kind) {
        case ScoreKind::Rec: maps.push_back(score_rec(images.image(i), std::span<const double>(b[i].members.front()))); break;
        case ScoreKind::Intra: maps.push_back(score_intra(b[i])); break;
        case ScoreKind::Inter: maps.push_back(score_inter(a[i], b[i])); break;
        case ScoreKind::IntraRefined:
            maps.push_back(refine_with_uncertainty(score_intra(b[i]), pooled_sigma(b[i], pooling)));
            break;
        case ScoreKind::InterRefined:
            maps.push_back(refine_with_uncertainty(score_inter(a[i], b[i]), pooled_sigma(b[i], pooling)));
            break;
        }
    }
    return maps;
}

inline std::vector<double> image_scores(const std::vector<AnomalyMap>& maps) {
    std::vector<double> out;
    out.reserve(maps.size());
    for (const auto& m : maps) out.push_back(image_score(m));
    return out;
}

/// 8-bit P5 PGM, min-max scaled per map; a constant map is written as zeros.
inline void write_map_pgm(const std::filesystem::path& path, const AnomalyMap& map, std::size_t width = kImageSide,
                          std::size_t height = kImageSide) {
    if (map.scores.size() != width * height) throw ShapeError("write_map_pgm: map size does not match dimensions");
    const auto [lo, hi] = std::minmax_element(map.scores.begin(), map.scores.end());
    const double range = *hi - *lo;
    std::vector<unsigned char> buf(map.scores.size());
    for (std::size_t p = 0; p < buf.size(); ++p)
        buf[p] = range > 0.0 ? static_cast<unsigned char>(std::lround((map.scores[p] - *lo) / range * 255.0)) : 0;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

/// Raw little-endian float32 grid, row-major, no header.
inline void write_map_raw(const std::filesystem::path& path, const AnomalyMap& map) {
    std::vector<unsigned char> buf(4 * map.scores.size());
    for (std::size_t p = 0; p < map.scores.size(); ++p) {
        const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(map.scores[p]));
        for (std::size_t b = 0; b < 4; ++b) buf[4 * p + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

} // namespace ddad

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "ddad/error.hpp"
#include "ddad/rng.hpp"
#include "ddad/tensor.hpp"

namespace ddad {

inline constexpr std::size_t kImageSide = 64;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;

/// Unlabeled images, row-major 64x64 each, values in [0, 1].
/// This is the only image type the trainer accepts; it has no label field.
struct ImagePool {
    std::vector<float> pixels;
    std::vector<std::string> ids;

    std::size_t size() const { return ids.size(); }
    bool empty() const { return ids.empty(); }
    std::span<const float> image(std::size_t i) const {
        return std::span<const float>(pixels).subspan(i * kImagePixels, kImagePixels);
    }
    void push_back(std::string id, std::span<const float> image) {
        if (image.size() != kImagePixels) throw ShapeError("ImagePool: image must have 64x64 pixels");
        pixels.insert(pixels.end(), image.begin(), image.end());
        ids.push_back(std::move(id));
    }
};

/// Concatenation; `a` first.
inline ImagePool concat(const ImagePool& a, const ImagePool& b) {
    ImagePool out = a;
    out.pixels.insert(out.pixels.end(), b.pixels.begin(), b.pixels.end());
    out.ids.insert(out.ids.end(), b.ids.begin(), b.ids.end());
    return out;
}

struct TestSet {
    ImagePool images;
    std::vector<int> labels; // 1 = abnormal

    std::size_t size() const { return images.size(); }
};

struct DatasetSpec {
    ImagePool normal;
    ImagePool unlabeled;
    TestSet test;
    double anomaly_rate = 0.0;
    // Ground truth for D_u; filled only by the synthetic generator.
    std::vector<int> unlabeled_flags;
};

template <typename T>
struct ImageBatch {
    Tensor<T> pixels; // [n, 1, 64, 64]
    std::vector<std::size_t> indices;
};

/// Gathers pool images by index into an [n, 1, 64, 64] tensor.
template <typename T = float>
Tensor<T> gather(const ImagePool& pool, std::span<const std::size_t> indices) {
    std::vector<T> data(indices.size() * kImagePixels);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        if (indices[b] >= pool.size()) throw ContractError("gather: index out of range");
        const auto img = pool.image(indices[b]);
        std::copy(img.begin(), img.end(), data.begin() + static_cast<std::ptrdiff_t>(b * kImagePixels));
    }
    return Tensor<T>({indices.size(), 1, kImageSide, kImageSide}, std::move(data));
}

/// Seeded permutation of [0, n) cut into batches; the last batch may be short.
inline std::vector<std::vector<std::size_t>> batch_indices(std::size_t n, std::size_t batch_size, Rng& rng) {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    const auto perm = rng.permutation(n);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size) {
        out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                         perm.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    }
    return out;
}

template <typename T = float>
std::vector<ImageBatch<T>> batches(const ImagePool& pool, std::size_t batch_size, std::uint64_t shuffle_seed) {
    if (pool.empty()) throw ConfigError("batches: empty pool");
    Rng rng(shuffle_seed);
    std::vector<ImageBatch<T>> out;
    for (auto& idx : batch_indices(pool.size(), batch_size, rng)) {
        auto pixels = gather<T>(pool, idx);
        out.push_back({std::move(pixels), std::move(idx)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticParams {
    std::size_t n_normal = 512;
    std::size_t m_unlabeled = 512;
    double anomaly_rate = 0.6;
    std::size_t t_normal = 128;
    std::size_t t_abnormal = 128;
    std::uint64_t seed = 0;
};

namespace detail {

enum SyntheticStream : std::uint64_t { kNormalPool = 1, kUnlabeledPool = 2, kTestPool = 3, kUnlabeledChoice = 4 };

/// Smooth field: base level plus 2-3 Gaussian bumps, kept within [0.1, 0.6].
inline std::vector<float> blob_field(Rng& rng) {
    std::vector<double> field(kImagePixels, rng.uniform(0.15, 0.3));
    const std::size_t bumps = 2 + rng.below(2);
    for (std::size_t b = 0; b < bumps; ++b) {
        const double amp = rng.uniform(0.08, 0.25);
        const double cy = rng.uniform(0.0, kImageSide), cx = rng.uniform(0.0, kImageSide);
        const double inv = 1.0 / (2.0 * std::pow(rng.uniform(6.0, 14.0), 2));
        for (std::size_t y = 0; y < kImageSide; ++y)
            for (std::size_t x = 0; x < kImageSide; ++x) {
                const double d2 = std::pow(y - cy, 2) + std::pow(x - cx, 2);
                field[y * kImageSide + x] += amp * std::exp(-d2 * inv);
            }
    }
    std::vector<float> out(kImagePixels);
    for (std::size_t i = 0; i < kImagePixels; ++i) out[i] = static_cast<float>(std::clamp(field[i], 0.1, 0.6));
    return out;
}

/// Adds a bright rectangle or ellipse of side 8-16 px at a random location.
inline void insert_patch(std::vector<float>& field, Rng& rng) {
    const std::size_t h = 8 + rng.below(9), w = 8 + rng.below(9);
    const std::size_t top = rng.below(kImageSide - h + 1), left = rng.below(kImageSide - w + 1);
    const bool ellipse = rng.below(2) == 1;
    const float boost = static_cast<float>(rng.uniform(0.35, 0.45));
    const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            if (ellipse && std::pow((y - cy) / (h / 2.0), 2) + std::pow((x - cx) / (w / 2.0), 2) > 1.0) continue;
            float& v = field[(top + y) * kImageSide + left + x];
            v = std::min(1.0f, v + boost);
        }
}

/// Per-image Gaussian noise with an image-specific level in [0.01, 0.15].
inline void add_noise(std::vector<float>& image, Rng& rng) {
    const double level = rng.uniform(0.01, 0.15);
    for (float& v : image) v = static_cast<float>(std::clamp(v + level * rng.normal(), 0.0, 1.0));
}

} // namespace detail

/// One synthetic image before and after the anomaly patch (noise included in both).
struct SyntheticImage {
    std::vector<float> base;
    std::vector<float> pixels;
};

/// Image `index` of stream `pool`. Each image owns its seed, so pools do not
/// shift when other pools or the anomaly rate change.
inline SyntheticImage synthesize_image(std::uint64_t seed, std::uint64_t pool, std::size_t index, bool abnormal) {
    Rng rng(derive_seed(seed, {pool, index}));
    auto field = detail::blob_field(rng);
    Rng noise_rng(rng.next_u64());
    Rng patch_rng(rng.next_u64());
    SyntheticImage out{field, field};
    if (abnormal) detail::insert_patch(out.pixels, patch_rng);
    Rng base_noise = noise_rng;
    detail::add_noise(out.base, base_noise);
    detail::add_noise(out.pixels, noise_rng);
    return out;
}

inline std::size_t abnormal_count(std::size_t m, double anomaly_rate) {
    return static_cast<std::size_t>(std::llround(anomaly_rate * static_cast<double>(m)));
}

inline DatasetSpec generate_synthetic(const SyntheticParams& p) {
    if (!(p.anomaly_rate >= 0.0 && p.anomaly_rate <= 1.0)) throw ConfigError("anomaly rate must lie in [0, 1]");
    using namespace detail;
    char name[32];
    const auto id = [&](const char* prefix, std::size_t i) {
        std::snprintf(name, sizeof name, "%s_%05zu", prefix, i);
        return std::string(name);
    };
    DatasetSpec spec;
    spec.anomaly_rate = p.anomaly_rate;
    for (std::size_t i = 0; i < p.n_normal; ++i)
        spec.normal.push_back(id("n", i), synthesize_image(p.seed, kNormalPool, i, false).pixels);

    const std::size_t n_abnormal = abnormal_count(p.m_unlabeled, p.anomaly_rate);
    spec.unlabeled_flags.assign(p.m_unlabeled, 0);
    Rng choice(derive_seed(p.seed, {kUnlabeledChoice}));
    const auto order = choice.permutation(p.m_unlabeled);
    for (std::size_t j = 0; j < n_abnormal; ++j) spec.unlabeled_flags[order[j]] = 1;
    for (std::size_t i = 0; i < p.m_unlabeled; ++i)
        spec.unlabeled.push_back(id("u", i),
                                 synthesize_image(p.seed, kUnlabeledPool, i, spec.unlabeled_flags[i] == 1).pixels);

    for (std::size_t i = 0; i < p.t_normal + p.t_abnormal; ++i) {
        const bool abnormal = i >= p.t_normal;
        spec.test.images.push_back(id(abnormal ? "ta" : "tn", i), synthesize_image(p.seed, kTestPool, i, abnormal).pixels);
        spec.test.labels.push_back(abnormal ? 1 : 0);
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Image files

/// Decoded grayscale image, values already divided by the format maximum.
struct GrayImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<float> pixels;
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline GrayImage decode_pgm(const std::vector<unsigned char>& bytes, const std::string& name) {
    std::size_t pos = 0;
    const auto fail = [&](const std::string& why) -> IngestionError { return IngestionError(name + ": " + why); };
    const auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(bytes[pos])) {
                ++pos;
            } else {
                break;
            }
        }
    };
    const auto number = [&] {
        skip_space();
        std::size_t v = 0, digits = 0;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos++] - '0');
            if (++digits > 9) throw fail("header value too large");
        }
        if (digits == 0) throw fail("malformed PGM header");
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw fail("not a binary PGM (P5)");
    pos = 2;
    GrayImage img;
    img.width = number();
    img.height = number();
    const std::size_t maxval = number();
    if (img.width == 0 || img.height == 0 || maxval == 0 || maxval > 65535) throw fail("invalid PGM dimensions or maxval");
    if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw fail("malformed PGM header");
    ++pos;
    const std::size_t bps = maxval > 255 ? 2 : 1;
    const std::size_t count = img.width * img.height;
    if (bytes.size() - pos < count * bps) throw fail("truncated PGM payload");
    img.pixels.resize(count);
    const double scale = 1.0 / static_cast<double>(maxval);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t v = bps == 1 ? bytes[pos + i] : (std::size_t{bytes[pos + 2 * i]} << 8) | bytes[pos + 2 * i + 1];
        if (v > maxval) throw fail("sample exceeds maxval");
        img.pixels[i] = static_cast<float>(v * scale);
    }
    return img;
}

inline GrayImage decode_png(const std::vector<unsigned char>& bytes, const std::string& name) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
        throw IngestionError(name + ": " + image.message);
    }
    // Linear 16-bit gray keeps 16-bit sources exact; 8-bit sources use the sRGB-free 8-bit path.
    const bool sixteen = (image.format & PNG_FORMAT_FLAG_LINEAR) != 0;
    image.format = sixteen ? PNG_FORMAT_LINEAR_Y : PNG_FORMAT_GRAY;
    GrayImage img;
    img.width = image.width;
    img.height = image.height;
    img.pixels.resize(img.width * img.height);
    if (sixteen) {
        std::vector<png_uint_16> buf(img.pixels.size());
        if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
            png_image_free(&image);
            throw IngestionError(name + ": " + image.message);
        }
        for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = static_cast<float>(buf[i] / 65535.0);
    } else {
        std::vector<png_byte> buf(img.pixels.size());
        if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
            png_image_free(&image);
            throw IngestionError(name + ": " + image.message);
        }
        for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = static_cast<float>(buf[i] / 255.0);
    }
    return img;
}

} // namespace detail

/// Decodes a PGM (P5, 8/16-bit) or PNG file by its signature.
inline GrayImage decode_image(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    static constexpr unsigned char kPngSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
    if (bytes.size() >= 8 && std::equal(kPngSignature, kPngSignature + 8, bytes.begin())) {
        return detail::decode_png(bytes, path.string());
    }
    return detail::decode_pgm(bytes, path.string());
}

/// Bilinear resize with corner-aligned sampling: output pixel i maps to
/// source coordinate i * (in - 1) / (out - 1).
inline std::vector<float> resize_bilinear(const GrayImage& img, std::size_t out_h, std::size_t out_w) {
    std::vector<float> out(out_h * out_w);
    const auto coord = [](std::size_t i, std::size_t in, std::size_t out_n) {
        return out_n <= 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out_n - 1);
    };
    for (std::size_t y = 0; y < out_h; ++y) {
        const double sy = coord(y, img.height, out_h);
        const std::size_t y0 = std::min(static_cast<std::size_t>(sy), img.height - 1);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const double fy = sy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double sx = coord(x, img.width, out_w);
            const std::size_t x0 = std::min(static_cast<std::size_t>(sx), img.width - 1);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const double fx = sx - static_cast<double>(x0);
            const auto at = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(img.pixels[yy * img.width + xx]); };
            const double top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
            const double bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
            out[y * out_w + x] = static_cast<float>(top + (bottom - top) * fy);
        }
    }
    return out;
}

/// Loads every regular file in `dir`, sorted by filename, resized to 64x64.
/// A missing directory yields an empty pool.
inline ImagePool ingest_pool(const std::filesystem::path& dir) {
    ImagePool pool;
    if (!std::filesystem::is_directory(dir)) return pool;
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().filename().string().front() != '.') files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        const auto img = decode_image(f);
        pool.push_back(f.stem().string(), resize_bilinear(img, kImageSide, kImageSide));
    }
    return pool;
}

/// Reads the layout normal/, unlabeled/, test/normal/, test/abnormal/.
/// Only normal/ is required to be non-empty.
inline DatasetSpec ingest_directory(const std::filesystem::path& root) {
    if (!std::filesystem::is_directory(root)) throw IngestionError("not a directory: " + root.string());
    DatasetSpec spec;
    spec.normal = ingest_pool(root / "normal");
    if (spec.normal.empty()) throw ConfigError("empty normal pool in " + (root / "normal").string());
    spec.unlabeled = ingest_pool(root / "unlabeled");
    const auto test_normal = ingest_pool(root / "test" / "normal");
    const auto test_abnormal = ingest_pool(root / "test" / "abnormal");
    spec.test.images = concat(test_normal, test_abnormal);
    spec.test.labels.assign(test_normal.size(), 0);
    spec.test.labels.insert(spec.test.labels.end(), test_abnormal.size(), 1);
    return spec;
}

/// Writes a 16-bit P5 PGM (maxval 65535) of one 64x64 image.
inline void write_pgm16(const std::filesystem::path& path, std::span<const float> image, std::size_t width,
                        std::size_t height) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << "\n65535\n";
    std::vector<unsigned char> buf(2 * image.size());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const auto v = static_cast<std::uint16_t>(std::lround(std::clamp(image[i], 0.0f, 1.0f) * 65535.0f));
        buf[2 * i] = static_cast<unsigned char>(v >> 8);
        buf[2 * i + 1] = static_cast<unsigned char>(v & 0xFF);
    }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IngestionError("write failed for " + path.string());
}

/// Writes `spec` in the ingestion layout. Synthetic D_u flags go to
/// provenance.csv at the root, which ingestion never reads.
inline void export_dataset(const DatasetSpec& spec, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    const auto dump = [](const ImagePool& pool, const fs::path& dir, std::size_t begin, std::size_t end) {
        fs::create_directories(dir);
        for (std::size_t i = begin; i < end; ++i)
            write_pgm16(dir / (pool.ids[i] + ".pgm"), pool.image(i), kImageSide, kImageSide);
    };
    dump(spec.normal, root / "normal", 0, spec.normal.size());
    dump(spec.unlabeled, root / "unlabeled", 0, spec.unlabeled.size());
    fs::create_directories(root / "test" / "normal");
    fs::create_directories(root / "test" / "abnormal");
    for (std::size_t i = 0; i < spec.test.size(); ++i) {
        const auto dir = root / "test" / (spec.test.labels[i] == 1 ? "abnormal" : "normal");
        write_pgm16(dir / (spec.test.images.ids[i] + ".pgm"), spec.test.images.image(i), kImageSide, kImageSide);
    }
    if (!spec.unlabeled_flags.empty()) {
        std::ofstream prov(root / "provenance.csv", std::ios::trunc);
        prov << "id,abnormal\n";
        for (std::size_t i = 0; i < spec.unlabeled.size(); ++i) prov << spec.unlabeled.ids[i] << ',' << spec.unlabeled_flags[i] << '\n';
    }
}

} // namespace ddad

// ddad: synth, train, score, eval, sweep and compare subcommands over the
// header-only library. Every subcommand writes manifest.json next to its
// outputs; `reproduce` in the manifest reruns the command bit-identically.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "CLI11.hpp"
#include "ddad/checkpoint.hpp"
#include "ddad/eval.hpp"
#include "ddad/scoring.hpp"
#include "ddad/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Usage problems detected after CLI11 parsing (config file keys, missing
// inputs the parser cannot see). Exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t n) { EVP_DigestUpdate(ctx_, data, n); }
    void update(std::string_view s) { update(s.data(), s.size()); }

    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_, md, &len);
        static constexpr char digits[] = "0123456789abcdef";
        std::string out;
        for (unsigned int i = 0; i < len; ++i) {
            out += digits[md[i] >> 4];
            out += digits[md[i] & 0xF];
        }
        return out;
    }

private:
    EVP_MD_CTX* ctx_;
};

std::string file_sha256(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ddad::IngestionError("cannot read " + path.string());
    Sha256 h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return h.hex();
}

// Digest of decoded pool content: ids and pixels, in pool order.
json pool_digest(const ddad::ImagePool& pool) {
    Sha256 h;
    for (std::size_t i = 0; i < pool.size(); ++i) {
        h.update(pool.ids[i]);
        h.update("\n");
        const auto img = pool.image(i);
        h.update(img.data(), img.size_bytes());
    }
    return {{"count", pool.size()}, {"sha256", h.hex()}};
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Collects what a subcommand wrote and the inputs it depended on.
class Manifest {
public:
    Manifest(std::string command, fs::path out) : command_(std::move(command)), out_(std::move(out)) {}

    json config = json::object();
    json seeds = json::object();
    json inputs = json::object();

    fs::path path(const fs::path& relative) {
        const auto p = out_ / relative;
        fs::create_directories(p.parent_path());
        written_.push_back(relative);
        return p;
    }

    void write() const {
        json artifacts = json::object();
        for (const auto& rel : written_) artifacts[rel.generic_string()] = file_sha256(out_ / rel);
        const json m{{"tool", "ddad"},       {"command", command_}, {"config", config},      {"seeds", seeds},
                     {"inputs", inputs},     {"artifacts", artifacts}, {"reproduce", reproduce()}};
        std::ofstream f(out_ / "manifest.json", std::ios::trunc);
        f << m.dump(2) << '\n';
        if (!f) throw ddad::IngestionError("cannot write " + (out_ / "manifest.json").string());
    }

private:
    std::string reproduce() const {
        std::string cmd = "ddad " + command_;
        for (const auto& [key, value] : config.items()) {
            if (value.is_boolean()) {
                if (value.get<bool>()) cmd += " --" + key;
                continue;
            }
            std::string text;
            const auto scalar = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
            if (value.is_array()) {
                for (const auto& v : value) text += (text.empty() ? "" : ",") + scalar(v);
            } else {
                text = scalar(value);
            }
            cmd += " --" + key + " " + text;
        }
        return cmd;
    }

    std::string command_;
    fs::path out_;
    std::vector<fs::path> written_;
};

// Applies `key = value` lines to options of `sub` that were not given as
// flags. Blank lines and lines starting with '#' are skipped.
void apply_config_file(CLI::App& sub, const std::string& file) {
    std::ifstream in(file);
    if (!in) throw UsageError("cannot read config file " + file);
    std::string line;
    for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
        const auto text = CLI::detail::trim_copy(line);
        if (text.empty() || text.front() == '#') continue;
        const auto eq = text.find('=');
        if (eq == std::string::npos)
            throw UsageError(file + ":" + std::to_string(lineno) + ": expected key = value");
        const auto key = CLI::detail::trim_copy(text.substr(0, eq));
        const auto value = CLI::detail::trim_copy(text.substr(eq + 1));
        auto* opt = sub.get_option_no_throw("--" + key);
        if (opt == nullptr || key == "config")
            throw UsageError(file + ":" + std::to_string(lineno) + ": unknown key '" + key + "' for " + sub.get_name());
        if (opt->count() > 0) continue;
        opt->clear();
        if (opt->get_type_size() == 0) {
            // Flags take true/false.
            if (value == "true" || value == "1") opt->add_result("true");
            else if (value != "false" && value != "0") throw UsageError(file + ": flag '" + key + "' takes true or false");
            else continue;
        } else {
            opt->add_result(value);
        }
        opt->run_callback();
    }
}

const std::vector<std::string> kScoreNames{"rec", "intra", "inter", "intra_refined", "inter_refined"};

struct Settings {
    std::string config;
    fs::path data, out, models, scores;
    std::vector<fs::path> images;
    std::string backbone = "ae";
    std::vector<std::string> backbones{"ae", "aeu"};
    std::vector<std::string> score_kinds;
    std::string pooling = "rms";
    std::size_t k = 3, epochs = 250, batch_size = 64, bins = 50;
    double lr = 5e-4, ar = 0.6;
    std::vector<double> ars{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
    std::uint64_t seed = 0;
    std::size_t n_normal = 512, m_unlabeled = 512, t_normal = 128, t_abnormal = 128;
    bool maps = false;
};

void add_config(CLI::App& sub, Settings& s) {
    sub.add_option("--config", s.config, "key = value file; flags override it")->check(CLI::ExistingFile);
}

void add_train_flags(CLI::App& sub, Settings& s) {
    sub.add_option("--k", s.k, "members per module")->capture_default_str()->check(CLI::PositiveNumber);
    sub.add_option("--epochs", s.epochs)->capture_default_str()->check(CLI::PositiveNumber);
    sub.add_option("--lr", s.lr, "Adam learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    sub.add_option("--batch-size", s.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
    sub.add_option("--seed", s.seed, "base seed")->capture_default_str();
}

void add_synthetic_flags(CLI::App& sub, Settings& s) {
    sub.add_option("--n-normal", s.n_normal, "D_n size")->capture_default_str();
    sub.add_option("--m-unlabeled", s.m_unlabeled, "D_u size")->capture_default_str();
    sub.add_option("--t-normal", s.t_normal, "normal test images")->capture_default_str();
    sub.add_option("--t-abnormal", s.t_abnormal, "abnormal test images")->capture_default_str();
}

void add_score_flags(CLI::App& sub, Settings& s, std::string help) {
    sub.add_option("--score", s.score_kinds, std::move(help))->delimiter(',')->check(CLI::IsMember(kScoreNames));
    sub.add_option("--pooling", s.pooling, "sigma pooling across module B for refined scores")
        ->capture_default_str()
        ->check(CLI::IsMember({"rms", "mean"}));
}

ddad::TrainConfig train_config(const Settings& s) {
    ddad::TrainConfig c;
    c.epochs = s.epochs;
    c.learning_rate = s.lr;
    c.batch_size = s.batch_size;
    c.k = s.k;
    c.base_seed = s.seed;
    return c;
}

json train_json(const Settings& s) {
    return {{"k", s.k}, {"epochs", s.epochs}, {"lr", s.lr}, {"batch-size", s.batch_size}, {"seed", s.seed}};
}

ddad::SyntheticParams synthetic_params(const Settings& s, double ar) {
    return {s.n_normal, s.m_unlabeled, ar, s.t_normal, s.t_abnormal, s.seed};
}

json synthetic_json(const Settings& s) {
    return {{"n-normal", s.n_normal}, {"m-unlabeled", s.m_unlabeled}, {"t-normal", s.t_normal}, {"t-abnormal", s.t_abnormal}};
}

std::vector<ddad::ScoreKind> parse_kinds(const std::vector<std::string>& names) {
    std::vector<ddad::ScoreKind> kinds;
    for (const auto& n : names) kinds.push_back(ddad::parse_score_kind(n));
    return kinds;
}

std::vector<std::string> kind_names(const std::vector<ddad::ScoreKind>& kinds) {
    std::vector<std::string> out;
    for (auto k : kinds) out.emplace_back(ddad::name_of(k));
    return out;
}

json merge(json a, const json& b) {
    a.update(b);
    return a;
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw ddad::IngestionError("cannot create " + p.string() + ": " + ec.message());
}

std::string member_file(ddad::ModuleRole role, std::size_t i) {
    return std::string("module") + ddad::name_of(role) + "_member" + std::to_string(i) + ".ckpt";
}

// ---------------------------------------------------------------------------

int run_synth(const Settings& s) {
    ensure_dir(s.out);
    const auto data = ddad::generate_synthetic(synthetic_params(s, s.ar));
    ddad::export_dataset(data, s.out);
    Manifest m("synth", s.out);
    m.config = merge(synthetic_json(s), {{"ar", s.ar}, {"seed", s.seed}, {"out", s.out.generic_string()}});
    m.seeds = {{"data", s.seed}};
    for (const char* sub : {"normal", "unlabeled", "test"})
        for (const auto& entry : fs::recursive_directory_iterator(s.out / sub))
            if (entry.is_regular_file()) m.path(fs::relative(entry.path(), s.out));
    if (fs::exists(s.out / "provenance.csv")) m.path("provenance.csv");
    m.write();
    std::cerr << "synth: wrote " << data.normal.size() << " normal, " << data.unlabeled.size() << " unlabeled, "
              << data.test.size() << " test images to " << s.out.string() << '\n';
    return 0;
}

int run_train(Settings s) {
    if (s.out.empty()) s.out = s.data / "models";
    if (!fs::is_directory(s.data)) throw ddad::IngestionError("data directory not found: " + s.data.string());
    // Only the training pools are opened: test/ and provenance.csv stay unread.
    const auto normal = ddad::ingest_pool(s.data / "normal");
    if (normal.empty()) throw ddad::ConfigError("empty normal pool in " + (s.data / "normal").string());
    const auto unlabeled = ddad::ingest_pool(s.data / "unlabeled");
    ensure_dir(s.out);

    ddad::BackboneConfig arch;
    arch.kind = ddad::parse_backbone_kind(s.backbone);
    const auto cfg = train_config(s);
    std::cerr << "train: " << s.backbone << ", K=" << s.k << ", " << s.epochs << " epochs, |D_n|=" << normal.size()
              << ", |D_u|=" << unlabeled.size() << '\n';
    const auto modules = ddad::train_dual_ensembles<float>(normal, unlabeled, arch, cfg);

    Manifest m("train", s.out);
    m.config = merge(train_json(s), {{"data", s.data.generic_string()}, {"backbone", s.backbone},
                                     {"out", s.out.generic_string()}});
    m.inputs = {{"normal", pool_digest(normal)}, {"unlabeled", pool_digest(unlabeled)}};
    std::ofstream loss(m.path("loss.csv"), std::ios::trunc);
    loss << "epoch,member,role,loss\n";
    for (const auto* module : {&modules.a, &modules.b}) {
        json seeds = json::array();
        for (std::size_t i = 0; i < module->k(); ++i) {
            ddad::save_checkpoint(module->nets[i], m.path(member_file(module->role, i)));
            seeds.push_back(module->nets[i].config().seed);
            const auto& curve = module->loss_curves[i];
            for (std::size_t e = 0; e < curve.size(); ++e)
                loss << e + 1 << ',' << i << ',' << ddad::name_of(module->role) << ',' << format_double(curve[e]) << '\n';
        }
        m.seeds[std::string("module_") + ddad::name_of(module->role)] = seeds;
    }
    loss.close();
    m.write();
    std::cerr << "train: wrote " << 2 * s.k << " checkpoints to " << s.out.string() << '\n';
    return 0;
}

ddad::EnsembleModule<float> load_module(const fs::path& dir, ddad::ModuleRole role) {
    ddad::EnsembleModule<float> module;
    module.role = role;
    for (std::size_t i = 0; fs::exists(dir / member_file(role, i)); ++i)
        module.nets.push_back(ddad::load_checkpoint<float>(dir / member_file(role, i)));
    if (module.nets.empty()) throw ddad::FormatError("no " + member_file(role, 0) + " in " + dir.string());
    return module;
}

int run_score(Settings s) {
    if (s.models.empty()) s.models = s.data / "models";
    if (s.out.empty()) s.out = s.data / "scores";
    if (s.images.empty()) {
        if (s.data.empty()) throw UsageError("score needs --data or --images");
        s.images = {s.data / "test" / "normal", s.data / "test" / "abnormal"};
    }
    ddad::DualEnsembles<float> modules{load_module(s.models, ddad::ModuleRole::A),
                                       load_module(s.models, ddad::ModuleRole::B)};
    if (modules.a.k() != modules.b.k())
        throw ddad::FormatError("module A has " + std::to_string(modules.a.k()) + " members but module B has " +
                                std::to_string(modules.b.k()));
    const auto kind = modules.b.nets.front().kind();
    for (const auto* module : {&modules.a, &modules.b})
        for (const auto& net : module->nets)
            if (net.kind() != kind) throw ddad::FormatError("checkpoints in " + s.models.string() + " mix backbones");

    std::vector<ddad::ScoreKind> kinds;
    if (s.score_kinds.empty()) {
        kinds = {ddad::ScoreKind::Rec, ddad::ScoreKind::Intra, ddad::ScoreKind::Inter};
        if (kind == ddad::BackboneKind::AEU)
            kinds.insert(kinds.end(), {ddad::ScoreKind::IntraRefined, ddad::ScoreKind::InterRefined});
    } else {
        kinds = parse_kinds(s.score_kinds);
    }
    for (auto k : kinds)
        if (ddad::is_refined(k) && kind != ddad::BackboneKind::AEU)
            throw ddad::ConfigError(std::string(ddad::name_of(k)) + " needs aeu checkpoints");

    ddad::ImagePool images;
    for (const auto& dir : s.images) {
        if (!fs::is_directory(dir)) throw ddad::IngestionError("image directory not found: " + dir.string());
        images = ddad::concat(images, ddad::ingest_pool(dir));
    }
    if (images.empty()) throw ddad::ConfigError("no images to score");
    ensure_dir(s.out);

    const auto pooling = ddad::parse_sigma_pooling(s.pooling);
    const auto a = ddad::reconstruct(modules.a, images);
    const auto b = ddad::reconstruct(modules.b, images);
    Manifest m("score", s.out);
    std::vector<std::vector<double>> table;
    for (auto k : kinds) {
        const auto maps = ddad::score_maps(k, images, a, b, pooling);
        table.push_back(ddad::image_scores(maps));
        if (!s.maps) continue;
        for (std::size_t i = 0; i < images.size(); ++i) {
            const auto stem = fs::path("maps") / std::string(ddad::name_of(k)) / images.ids[i];
            ddad::write_map_pgm(m.path(stem.string() + ".pgm"), maps[i]);
            ddad::write_map_raw(m.path(stem.string() + ".raw"), maps[i]);
        }
    }
    std::ofstream csv(m.path("scores.csv"), std::ios::trunc);
    csv << "id";
    for (auto k : kinds) csv << ',' << ddad::name_of(k);
    csv << '\n';
    for (std::size_t i = 0; i < images.size(); ++i) {
        csv << images.ids[i];
        for (const auto& col : table) csv << ',' << format_double(col[i]);
        csv << '\n';
    }
    csv.close();

    json image_dirs = json::array();
    for (const auto& d : s.images) image_dirs.push_back(d.generic_string());
    m.config = {{"models", s.models.generic_string()}, {"images", image_dirs}, {"score", kind_names(kinds)},
                {"pooling", s.pooling}, {"maps", s.maps}, {"out", s.out.generic_string()}};
    if (!s.data.empty()) m.config["data"] = s.data.generic_string();
    m.inputs["images"] = pool_digest(images);
    for (const auto* module : {&modules.a, &modules.b}) {
        json seeds = json::array();
        for (std::size_t i = 0; i < module->k(); ++i) {
            const auto f = member_file(module->role, i);
            m.inputs["checkpoints"][f] = file_sha256(s.models / f);
            seeds.push_back(module->nets[i].config().seed);
        }
        m.seeds[std::string("module_") + ddad::name_of(module->role)] = seeds;
    }
    m.inputs["backbone"] = ddad::name_of(kind);
    m.inputs["k"] = modules.a.k();
    m.write();
    std::cerr << "score: " << images.size() << " images x " << kinds.size() << " kinds -> "
              << (s.out / "scores.csv").string() << '\n';
    return 0;
}

struct ScoresCsv {
    std::vector<std::string> ids;
    std::vector<std::string> kinds;
    std::vector<std::vector<double>> columns;
};

ScoresCsv read_scores(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ddad::EvaluationError("cannot read scores " + path.string());
    ScoresCsv out;
    std::string line;
    if (!std::getline(in, line)) throw ddad::EvaluationError(path.string() + ": empty file");
    std::stringstream header(line);
    std::string cell;
    std::getline(header, cell, ',');
    if (cell != "id") throw ddad::EvaluationError(path.string() + ": header must start with id");
    while (std::getline(header, cell, ',')) {
        ddad::parse_score_kind(cell);
        out.kinds.push_back(cell);
    }
    out.columns.resize(out.kinds.size());
    for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
        if (line.empty()) continue;
        std::stringstream row(line);
        std::getline(row, cell, ',');
        out.ids.push_back(cell);
        for (auto& col : out.columns) {
            if (!std::getline(row, cell, ','))
                throw ddad::EvaluationError(path.string() + ":" + std::to_string(lineno) + ": missing score");
            try {
                col.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw ddad::EvaluationError(path.string() + ":" + std::to_string(lineno) + ": bad score '" + cell + "'");
            }
        }
    }
    return out;
}

// Labels come from which test subdirectory holds a file; nothing is decoded.
std::map<std::string, int> read_labels(const fs::path& data) {
    std::map<std::string, int> labels;
    for (auto [sub, label] : {std::pair{"normal", 0}, std::pair{"abnormal", 1}}) {
        const auto dir = data / "test" / sub;
        if (!fs::is_directory(dir)) continue;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_regular_file() && entry.path().filename().string().front() != '.')
                labels[entry.path().stem().string()] = label;
    }
    return labels;
}

std::optional<json> read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) return std::nullopt;
    try {
        return json::parse(in);
    } catch (const json::exception&) {
        return std::nullopt;
    }
}

int run_eval(Settings s) {
    if (s.scores.empty()) s.scores = s.data / "scores" / "scores.csv";
    if (s.out.empty()) s.out = s.data / "eval";
    const auto table = read_scores(s.scores);
    const auto label_of = read_labels(s.data);
    std::vector<int> labels;
    for (const auto& id : table.ids) {
        const auto it = label_of.find(id);
        if (it == label_of.end()) throw ddad::EvaluationError("no label for image '" + id + "' under " + s.data.string());
        labels.push_back(it->second);
    }
    ensure_dir(s.out);
    Manifest m("eval", s.out);

    json metadata{{"backbone", nullptr}, {"k", nullptr}, {"anomaly_rate", nullptr}, {"seeds", nullptr}};
    if (const auto sm = read_json(s.scores.parent_path() / "manifest.json"); sm && sm->value("command", "") == "score") {
        metadata["backbone"] = (*sm)["inputs"].value("backbone", json());
        metadata["k"] = (*sm)["inputs"].value("k", json());
        metadata["seeds"] = (*sm)["seeds"];
    }
    if (const auto dm = read_json(s.data / "manifest.json"); dm && dm->value("command", "") == "synth") {
        metadata["anomaly_rate"] = (*dm)["config"].value("ar", json());
        metadata["data_seed"] = (*dm)["config"].value("seed", json());
    }

    json report{{"metadata", metadata}, {"auc", json::object()}, {"histograms", json::object()}};
    json per_image = json::array();
    for (std::size_t i = 0; i < table.ids.size(); ++i) {
        json scores = json::object();
        for (std::size_t c = 0; c < table.kinds.size(); ++c) scores[table.kinds[c]] = table.columns[c][i];
        per_image.push_back({{"id", table.ids[i]}, {"label", labels[i]}, {"scores", scores}});
    }
    report["images"] = per_image;

    std::ofstream auc_csv(m.path("auc.csv"), std::ios::trunc);
    auc_csv << "score_kind,auc,overlap\n";
    for (std::size_t c = 0; c < table.kinds.size(); ++c) {
        const auto& name = table.kinds[c];
        const double a = ddad::auc(table.columns[c], labels);
        const auto h = ddad::histogram(table.columns[c], labels, s.bins);
        const double overlap = ddad::overlap_coefficient(h);
        report["auc"][name] = a;
        report["overlap"][name] = overlap;
        json bins = json::array();
        for (std::size_t b = 0; b < h.bins(); ++b)
            bins.push_back({{"bin_lo", h.bin_lo[b]}, {"bin_hi", h.bin_hi[b]}, {"count_normal", h.normal[b]},
                            {"count_abnormal", h.abnormal[b]}});
        report["histograms"][name] = bins;
        std::ofstream hist(m.path("histogram_" + name + ".csv"), std::ios::trunc);
        ddad::write_histogram_csv(hist, h);
        auc_csv << name << ',' << format_double(a) << ',' << format_double(overlap) << '\n';
        std::cerr << "eval: " << name << " auc " << a << " overlap " << overlap << '\n';
    }
    auc_csv.close();
    std::ofstream(m.path("report.json"), std::ios::trunc) << report.dump(2) << '\n';
    m.config = {{"scores", s.scores.generic_string()}, {"data", s.data.generic_string()}, {"bins", s.bins},
                {"out", s.out.generic_string()}};
    m.inputs["scores"] = file_sha256(s.scores);
    m.write();
    return 0;
}

int run_sweep(const Settings& s) {
    ensure_dir(s.out);
    ddad::SweepConfig cfg;
    cfg.ar_values = s.ars;
    cfg.data = synthetic_params(s, 0.0);
    cfg.arch.kind = ddad::parse_backbone_kind(s.backbone);
    cfg.train = train_config(s);
    if (!s.score_kinds.empty()) cfg.kinds = parse_kinds(s.score_kinds);
    cfg.pooling = ddad::parse_sigma_pooling(s.pooling);
    const auto rows = ddad::run_ar_sweep<float>(
        cfg, [](double ar, const std::string& stage) { std::cerr << "sweep: AR=" << ar << ' ' << stage << '\n'; });

    Manifest m("sweep", s.out);
    std::ofstream csv(m.path("sweep.csv"), std::ios::trunc);
    ddad::write_sweep_csv(csv, rows);
    csv.close();
    m.config = merge(merge(train_json(s), synthetic_json(s)),
                     {{"ar", s.ars}, {"backbone", s.backbone}, {"score", kind_names(cfg.kinds)},
                      {"pooling", s.pooling}, {"out", s.out.generic_string()}});
    m.seeds = {{"data", s.seed}, {"train_base", s.seed}};
    m.write();
    std::size_t failed = 0;
    for (const auto& r : rows) {
        if (r.error.empty()) continue;
        ++failed;
        std::cerr << "sweep: AR=" << r.ar << " " << ddad::name_of(r.kind) << " failed: " << r.error << '\n';
    }
    if (failed > 0) {
        std::cerr << "ddad: eval error: " << failed << " sweep rows failed\n";
        return 1;
    }
    return 0;
}

int run_compare(const Settings& s) {
    ensure_dir(s.out);
    const auto data = s.data.empty() ? ddad::generate_synthetic(synthetic_params(s, s.ar)) : ddad::ingest_directory(s.data);
    std::vector<ddad::ScoreKind> kinds;
    if (s.score_kinds.empty()) {
        kinds = {ddad::ScoreKind::Rec, ddad::ScoreKind::Intra, ddad::ScoreKind::Inter, ddad::ScoreKind::IntraRefined,
                 ddad::ScoreKind::InterRefined};
    } else {
        kinds = parse_kinds(s.score_kinds);
    }
    std::vector<ddad::MethodSpec> specs;
    for (const auto& b : s.backbones) {
        const auto backbone = ddad::parse_backbone_kind(b);
        for (auto k : kinds) {
            // Refined kinds need a predicted variance, so ae columns skip them.
            if (ddad::is_refined(k) && backbone == ddad::BackboneKind::AE) continue;
            specs.push_back({backbone, k});
        }
    }
    ddad::BackboneConfig arch;
    auto report = ddad::method_comparison_report<float>(specs, data, arch, train_config(s),
                                                        ddad::parse_sigma_pooling(s.pooling));
    if (!s.data.empty()) report.anomaly_rate = std::numeric_limits<double>::quiet_NaN();

    Manifest m("compare", s.out);
    std::ofstream(m.path("table.txt"), std::ios::trunc) << ddad::format_table(report);
    std::ofstream(m.path("report.json"), std::ios::trunc) << ddad::to_json(report).dump(2) << '\n';
    m.config = merge(train_json(s), {{"backbone", s.backbones}, {"score", kind_names(kinds)}, {"pooling", s.pooling},
                                     {"out", s.out.generic_string()}});
    if (s.data.empty()) {
        m.config.update(synthetic_json(s));
        m.config["ar"] = s.ar;
        m.seeds["data"] = s.seed;
    } else {
        m.config["data"] = s.data.generic_string();
        m.inputs = {{"normal", pool_digest(data.normal)}, {"unlabeled", pool_digest(data.unlabeled)},
                    {"test", pool_digest(data.test.images)}};
    }
    m.seeds["train_base"] = s.seed;
    m.write();
    std::cout << ddad::format_table(report);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-distribution discrepancy anomaly detection"};
    app.name("ddad");
    app.require_subcommand(1);
    Settings s;

    auto* synth = app.add_subcommand("synth", "write a synthetic dataset directory");
    add_config(*synth, s);
    synth->add_option("--ar", s.ar, "anomaly rate of D_u")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    synth->add_option("--seed", s.seed)->capture_default_str();
    add_synthetic_flags(*synth, s);
    synth->add_option("--out", s.out, "dataset directory")->required();

    auto* train = app.add_subcommand("train", "train modules A and B; writes checkpoints and loss.csv");
    add_config(*train, s);
    train->add_option("--data", s.data, "dataset directory")->required();
    train->add_option("--backbone", s.backbone)->capture_default_str()->check(CLI::IsMember({"ae", "aeu"}));
    add_train_flags(*train, s);
    train->add_option("--out", s.out, "checkpoint directory [default: DATA/models]");

    auto* score = app.add_subcommand("score", "score images with trained modules");
    add_config(*score, s);
    score->add_option("--data", s.data, "dataset directory");
    score->add_option("--models", s.models, "checkpoint directory [default: DATA/models]");
    score->add_option("--images", s.images, "image directories [default: DATA/test/normal,DATA/test/abnormal]")
        ->delimiter(',');
    add_score_flags(*score, s, "score kinds [default: all the backbone supports]");
    score->add_flag("--maps", s.maps, "also write per-pixel maps as PGM and raw float32");
    score->add_option("--out", s.out, "output directory [default: DATA/scores]");

    auto* eval = app.add_subcommand("eval", "AUC, histograms and report from scores.csv and test labels");
    add_config(*eval, s);
    eval->add_option("--data", s.data, "dataset directory holding test/normal and test/abnormal")->required();
    eval->add_option("--scores", s.scores, "scores.csv [default: DATA/scores/scores.csv]");
    eval->add_option("--bins", s.bins, "histogram bins")->capture_default_str()->check(CLI::PositiveNumber);
    eval->add_option("--out", s.out, "output directory [default: DATA/eval]");

    auto* sweep = app.add_subcommand("sweep", "AUC per score kind across anomaly rates on synthetic data");
    add_config(*sweep, s);
    sweep->add_option("--ar", s.ars, "anomaly rates")->capture_default_str()->delimiter(',')->check(CLI::Range(0.0, 1.0));
    sweep->add_option("--backbone", s.backbone)->capture_default_str()->check(CLI::IsMember({"ae", "aeu"}));
    add_train_flags(*sweep, s);
    add_synthetic_flags(*sweep, s);
    add_score_flags(*sweep, s, "score kinds [default: rec,intra,inter]");
    sweep->add_option("--out", s.out)->required();

    auto* compare = app.add_subcommand("compare", "score kinds by backbone on one dataset");
    add_config(*compare, s);
    compare->add_option("--data", s.data, "dataset directory [default: synthetic]");
    compare->add_option("--backbone", s.backbones)
        ->capture_default_str()
        ->delimiter(',')
        ->check(CLI::IsMember({"ae", "aeu"}));
    compare->add_option("--ar", s.ar, "anomaly rate for synthetic data")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    add_train_flags(*compare, s);
    add_synthetic_flags(*compare, s);
    add_score_flags(*compare, s, "score kinds [default: all]");
    compare->add_option("--out", s.out)->required();

    CLI::App* active = nullptr;
    try {
        app.parse(argc, argv);
        active = app.get_subcommands().front();
        if (!s.config.empty()) apply_config_file(*active, s.config);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const UsageError& e) {
        std::cerr << "ddad: usage error: " << e.what() << '\n';
        return 2;
    }

    try {
        const auto& name = active->get_name();
        if (name == "synth") return run_synth(s);
        if (name == "train") return run_train(s);
        if (name == "score") return run_score(s);
        if (name == "eval") return run_eval(s);
        if (name == "sweep") return run_sweep(s);
        return run_compare(s);
    } catch (const UsageError& e) {
        std::cerr << "ddad: usage error: " << e.what() << '\n';
        return 2;
    } catch (const ddad::Error& e) {
        std::cerr << "ddad: " << e.module() << " error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "ddad: io error: " << e.what() << '\n';
        return 1;
    }
}

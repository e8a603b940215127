#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "ddad/allocator.hpp"
#include "ddad/backbone.hpp"
#include "ddad/data.hpp"
#include "ddad/error.hpp"
#include "ddad/rng.hpp"

namespace ddad {

struct TrainConfig {
    std::size_t epochs = 250;
    double learning_rate = 5e-4;
    std::size_t batch_size = 64;
    std::size_t k = 3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t base_seed = 0;

    void validate() const {
        if (k < 1) throw ConfigError("k must be >= 1");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be > 0");
        if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must lie in [0, 1)");
        if (!(eps > 0.0)) throw ConfigError("adam eps must be > 0");
    }
};

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::uint64_t t = 0;

    AdamState() = default;
    explicit AdamState(const std::vector<Parameter<T>>& params) {
        for (const auto& p : params) {
            m.emplace_back(p.value.numel(), T(0));
            v.emplace_back(p.value.numel(), T(0));
        }
    }
};

/// One bias-corrected Adam update from the gradients stored on `params`.
/// Parameters without a gradient buffer are treated as having zero gradient.
/// All gradients are checked before anything is modified.
template <typename T>
void adam_step(std::vector<Parameter<T>>& params, AdamState<T>& state, double lr, double beta1, double beta2,
               double eps) {
    if (state.m.size() != params.size()) throw ContractError("adam_step: state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].value.numel()) {
            throw ContractError("adam_step: moment shape mismatch for " + params[i].name);
        }
        if (!params[i].value.has_grad()) continue;
        for (T g : params[i].value.grad()) {
            if (!std::isfinite(static_cast<double>(g))) throw NumericalError("non-finite gradient in " + params[i].name);
        }
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T step = static_cast<T>(lr / c1), inv_c2 = static_cast<T>(1.0 / c2), e = static_cast<T>(eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].value.mutable_data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        const bool has = params[i].value.has_grad();
        const std::span<const T> g = has ? params[i].value.grad() : std::span<const T>();
        for (std::size_t j = 0; j < w.size(); ++j) {
            const T gj = has ? g[j] : T(0);
            m[j] = b1 * m[j] + (T(1) - b1) * gj;
            v[j] = b2 * v[j] + (T(1) - b2) * gj * gj;
            w[j] -= step * m[j] / (std::sqrt(v[j] * inv_c2) + e);
        }
    }
}

/// Per-epoch mean training loss, weighted by batch size.
using LossCurve = std::vector<double>;

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

/// Trains `net` in place. `seed` drives the shuffle order; initialization
/// comes from the net's own config seed.
template <typename T>
LossCurve train_network(BackboneNet<T>& net, const ImagePool& pool, const TrainConfig& config, std::uint64_t seed,
                        const EpochCallback& on_epoch = {}) {
    config.validate();
    if (pool.empty()) throw ConfigError("train_network: empty training pool");
    configure_allocator();
    Rng shuffle(derive_seed(seed, {0x5348'5546ULL}));
    AdamState<T> adam(net.parameters());
    LossCurve curve;
    curve.reserve(config.epochs);
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto order = batch_indices(pool.size(), config.batch_size, shuffle);
        double total = 0.0;
        for (std::size_t b = 0; b < order.size(); ++b) {
            try {
                const auto x = gather<T>(pool, order[b]);
                net.zero_grad();
                const auto out = net.forward(x, Mode::Train);
                const auto loss = reconstruction_loss(out, x);
                loss.backward();
                adam_step(net.parameters(), adam, config.learning_rate, config.beta1, config.beta2, config.eps);
                total += static_cast<double>(loss.item()) * static_cast<double>(order[b].size());
            } catch (const NumericalError& e) {
                throw NumericalError(std::string(e.what()) + " (epoch " + std::to_string(epoch + 1) + ", batch " +
                                     std::to_string(b + 1) + ")");
            }
        }
        curve.push_back(total / static_cast<double>(pool.size()));
        if (on_epoch) on_epoch(epoch, curve.back());
    }
    return curve;
}

enum class ModuleRole : std::uint8_t { A, B };

inline const char* name_of(ModuleRole role) { return role == ModuleRole::A ? "A" : "B"; }

template <typename T>
struct EnsembleModule {
    ModuleRole role = ModuleRole::A;
    std::vector<BackboneNet<T>> nets;
    std::vector<LossCurve> loss_curves;

    std::size_t k() const { return nets.size(); }
};

/// Seed of member `i`: base + i for module A, base + 1000 + i for module B.
inline std::uint64_t member_seed(ModuleRole role, std::uint64_t base, std::size_t i) {
    return base + (role == ModuleRole::B ? 1000 : 0) + i;
}

/// Worker count: DDAD_THREADS when set to a positive integer, otherwise the
/// hardware concurrency, and never more than `jobs`.
inline std::size_t worker_threads(std::size_t jobs) {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("DDAD_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) n = static_cast<std::size_t>(v);
    }
    return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Runs jobs 0..n-1 on up to worker_threads(n) threads; rethrows the first failure.
inline void run_parallel(std::size_t n, const std::function<void(std::size_t)>& job) {
    const std::size_t workers = worker_threads(n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    job(i);
                } catch (...) {
                    std::lock_guard lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
}

/// Trains the K members of one module on `pool`. Members share nothing, so
/// the result does not depend on the thread count.
template <typename T = float>
EnsembleModule<T> train_ensemble(ModuleRole role, const ImagePool& pool, const BackboneConfig& arch,
                                 const TrainConfig& config, const EpochCallback& on_epoch = {}) {
    config.validate();
    arch.validate();
    if (pool.empty()) throw ConfigError(std::string("module ") + name_of(role) + ": empty training pool");
    EnsembleModule<T> module;
    module.role = role;
    for (std::size_t i = 0; i < config.k; ++i) {
        BackboneConfig c = arch;
        c.seed = member_seed(role, config.base_seed, i);
        module.nets.push_back(build_backbone<T>(c));
    }
    module.loss_curves.resize(config.k);
    run_parallel(config.k, [&](std::size_t i) {
        module.loss_curves[i] = train_network(module.nets[i], pool, config, module.nets[i].config().seed,
                                              i == 0 ? on_epoch : EpochCallback{});
    });
    return module;
}

template <typename T>
struct DualEnsembles {
    EnsembleModule<T> a;
    EnsembleModule<T> b;
};

/// Module A on D_n + D_u, module B on D_n; all 2K members train independently.
template <typename T = float>
DualEnsembles<T> train_dual_ensembles(const ImagePool& normal, const ImagePool& unlabeled, const BackboneConfig& arch,
                                      const TrainConfig& config) {
    config.validate();
    arch.validate();
    if (normal.empty()) throw ConfigError("train_dual_ensembles: empty normal pool");
    const ImagePool pool_a = concat(normal, unlabeled);
    DualEnsembles<T> out;
    out.a.role = ModuleRole::A;
    out.b.role = ModuleRole::B;
    for (auto* m : {&out.a, &out.b}) {
        for (std::size_t i = 0; i < config.k; ++i) {
            BackboneConfig c = arch;
            c.seed = member_seed(m->role, config.base_seed, i);
            m->nets.push_back(build_backbone<T>(c));
        }
        m->loss_curves.resize(config.k);
    }
    run_parallel(2 * config.k, [&](std::size_t job) {
        auto& m = job < config.k ? out.a : out.b;
        const std::size_t i = job % config.k;
        m.loss_curves[i] = train_network(m.nets[i], m.role == ModuleRole::A ? pool_a : normal, config,
                                         m.nets[i].config().seed);
    });
    return out;
}

} // namespace ddad

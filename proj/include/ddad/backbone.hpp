#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ddad/error.hpp"
#include "ddad/ops.hpp"
#include "ddad/rng.hpp"
#include "ddad/tensor.hpp"

namespace ddad {

enum class BackboneKind : std::uint8_t { AE = 0, AEU = 1 };

inline std::string_view name_of(BackboneKind kind) { return kind == BackboneKind::AE ? "ae" : "aeu"; }

inline BackboneKind parse_backbone_kind(std::string_view text) {
    if (text == "ae" || text == "AE") return BackboneKind::AE;
    if (text == "aeu" || text == "AEU" || text == "ae-u" || text == "AE-U") return BackboneKind::AEU;
    throw ConfigError("unknown backbone '" + std::string(text) + "' (expected ae or aeu)");
}

inline constexpr float kLogVarianceMin = -10.0f;
inline constexpr float kLogVarianceMax = 10.0f;

/// Architecture of one reconstruction network.
///
/// Encoder: one conv per `enc_channels` entry (kernel/stride/padding shared),
/// each followed by batchnorm and ReLU. Bottleneck: flatten, then linear
/// layers fc_dims[0] -> fc_dims[1] -> ... -> fc_dims.back() -> fc_dims[0],
/// each followed by batchnorm and ReLU. Decoder: one transposed conv per
/// `dec_channels` entry; all but the last get batchnorm and ReLU, the last is
/// the output layer. AEU adds a second output channel holding log variance.
struct BackboneConfig {
    BackboneKind kind = BackboneKind::AE;
    std::size_t input_size = 64;
    std::vector<std::size_t> enc_channels{16, 32, 64, 64};
    std::size_t kernel = 4;
    std::size_t stride = 2;
    std::size_t padding = 1;
    std::vector<std::size_t> fc_dims{1024, 128, 16};
    std::vector<std::size_t> dec_channels{64, 32, 16, 1};
    std::uint64_t seed = 0;

    std::size_t output_channels() const { return dec_channels.back() + (kind == BackboneKind::AEU ? 1 : 0); }

    /// Spatial side after the encoder, or nullopt when a layer does not
    /// invert exactly through its transposed counterpart.
    std::optional<std::size_t> bottleneck_side() const {
        std::size_t side = input_size;
        for (std::size_t i = 0; i < enc_channels.size(); ++i) {
            if (side + 2 * padding < kernel) return std::nullopt;
            const std::size_t next = (side + 2 * padding - kernel) / stride + 1;
            if ((next - 1) * stride + kernel != side + 2 * padding) return std::nullopt;
            side = next;
        }
        return side;
    }

    void validate() const {
        if (input_size == 0 || kernel == 0 || stride == 0) throw ConfigError("backbone: zero-sized geometry");
        if (enc_channels.empty() || dec_channels.size() != enc_channels.size()) {
            throw ConfigError("backbone: decoder must mirror the encoder layer count");
        }
        if (dec_channels.back() != 1) throw ConfigError("backbone: reconstruction must have 1 channel");
        for (std::size_t c : enc_channels)
            if (c == 0) throw ConfigError("backbone: zero channel count");
        for (std::size_t c : dec_channels)
            if (c == 0) throw ConfigError("backbone: zero channel count");
        const auto side = bottleneck_side();
        if (!side || *side == 0) {
            throw ConfigError("backbone: input_size " + std::to_string(input_size) +
                              " does not map through the encoder exactly");
        }
        if (fc_dims.size() < 2 || fc_dims.front() != enc_channels.back() * *side * *side) {
            throw ConfigError("backbone: fc_dims must start at the flattened encoder size " +
                              std::to_string(enc_channels.back() * *side * *side));
        }
        for (std::size_t d : fc_dims)
            if (d == 0) throw ConfigError("backbone: zero fc dimension");
    }

    bool operator==(const BackboneConfig&) const = default;
};

template <typename T>
struct BackboneOutput {
    Tensor<T> reconstruction;
    std::optional<Tensor<T>> log_variance; // AEU only, clamped
};

/// One AE / AE-U reconstruction network: named parameters plus batchnorm
/// running statistics. Not shareable across threads while training.
template <typename T>
class BackboneNet {
public:
    explicit BackboneNet(BackboneConfig config) : config_(std::move(config)) {
        config_.validate();
        build();
        initialize();
    }

    // Parameters are shared handles; a copy would alias them.
    BackboneNet(const BackboneNet&) = delete;
    BackboneNet& operator=(const BackboneNet&) = delete;
    BackboneNet(BackboneNet&&) noexcept = default;
    BackboneNet& operator=(BackboneNet&&) noexcept = default;

    const BackboneConfig& config() const { return config_; }
    BackboneKind kind() const { return config_.kind; }

    std::vector<Parameter<T>>& parameters() { return params_; }
    const std::vector<Parameter<T>>& parameters() const { return params_; }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        for (const auto& p : params_) total += p.value.numel();
        return total;
    }

    struct NamedBatchNorm {
        std::string name;
        BatchNormState<T> state;
    };
    std::vector<NamedBatchNorm>& batchnorm_states() { return bn_; }
    const std::vector<NamedBatchNorm>& batchnorm_states() const { return bn_; }

    Parameter<T>* find(std::string_view name) {
        const auto it = index_.find(std::string(name));
        return it == index_.end() ? nullptr : &params_[it->second];
    }

    void zero_grad() {
        for (auto& p : params_) p.value.zero_grad();
    }

    /// Runs the network on x[N, 1, S, S]. Train mode updates batchnorm
    /// running statistics.
    BackboneOutput<T> forward(const Tensor<T>& x, Mode mode) {
        const std::size_t s = config_.input_size;
        if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != s || x.dim(3) != s || x.dim(0) == 0) {
            throw ShapeError("backbone: expected input [N,1," + std::to_string(s) + "," + std::to_string(s) +
                             "], got " + to_string(x.shape()));
        }
        const std::size_t n = x.dim(0);
        std::size_t bn_index = 0;
        std::size_t p = 0;
        auto next_param = [&]() -> const Tensor<T>& { return params_[p++].value; };
        auto norm_relu = [&](const Tensor<T>& h) {
            const Tensor<T>& gamma = next_param();
            const Tensor<T>& beta = next_param();
            return relu(batchnorm(h, gamma, beta, bn_[bn_index++].state, mode));
        };

        Tensor<T> h = x;
        for (std::size_t i = 0; i < config_.enc_channels.size(); ++i) {
            const Tensor<T>& w = next_param();
            const Tensor<T>& b = next_param();
            h = norm_relu(conv2d(h, w, b, config_.stride, config_.padding));
        }
        const std::size_t side = h.dim(2);
        h = reshape(h, {n, config_.fc_dims.front()});
        for (std::size_t i = 0; i < config_.fc_dims.size(); ++i) {
            const Tensor<T>& w = next_param();
            const Tensor<T>& b = next_param();
            h = norm_relu(linear(h, w, b));
        }
        h = reshape(h, {n, config_.enc_channels.back(), side, side});
        for (std::size_t i = 0; i < config_.dec_channels.size(); ++i) {
            const Tensor<T>& w = next_param();
            const Tensor<T>& b = next_param();
            h = conv_transpose2d(h, w, b, config_.stride, config_.padding);
            if (i + 1 < config_.dec_channels.size()) h = norm_relu(h);
        }

        if (config_.kind == BackboneKind::AE) return {sigmoid(h), std::nullopt};
        return {sigmoid(select_channel(h, 0)),
                clamp(select_channel(h, 1), static_cast<T>(kLogVarianceMin), static_cast<T>(kLogVarianceMax))};
    }

private:
    void add_param(std::string name, Shape shape) {
        index_.emplace(name, params_.size());
        params_.push_back({std::move(name), Tensor<T>::zeros(std::move(shape), true)});
    }

    void add_norm(const std::string& prefix, std::size_t channels) {
        add_param(prefix + ".weight", {channels});
        add_param(prefix + ".bias", {channels});
        bn_.push_back({prefix, BatchNormState<T>(channels)});
    }

    // Parameter order here is the order forward() consumes them.
    void build() {
        const std::size_t k = config_.kernel;
        std::size_t in = 1;
        for (std::size_t i = 0; i < config_.enc_channels.size(); ++i) {
            const std::size_t out = config_.enc_channels[i];
            const std::string layer = "enc.conv" + std::to_string(i + 1);
            add_param(layer + ".weight", {out, in, k, k});
            add_param(layer + ".bias", {out});
            add_norm("enc.bn" + std::to_string(i + 1), out);
            in = out;
        }
        const auto& fc = config_.fc_dims;
        for (std::size_t i = 0; i < fc.size(); ++i) {
            const std::size_t f_in = fc[i];
            const std::size_t f_out = i + 1 < fc.size() ? fc[i + 1] : fc.front();
            const std::string layer = "fc" + std::to_string(i + 1);
            add_param(layer + ".weight", {f_out, f_in});
            add_param(layer + ".bias", {f_out});
            add_norm("fc.bn" + std::to_string(i + 1), f_out);
        }
        in = config_.enc_channels.back();
        for (std::size_t i = 0; i < config_.dec_channels.size(); ++i) {
            const bool output_layer = i + 1 == config_.dec_channels.size();
            const std::size_t out = output_layer ? config_.output_channels() : config_.dec_channels[i];
            const std::string layer = "dec.deconv" + std::to_string(i + 1);
            add_param(layer + ".weight", {in, out, k, k});
            add_param(layer + ".bias", {out});
            if (!output_layer) add_norm("dec.bn" + std::to_string(i + 1), out);
            in = out;
        }
    }

    // Fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and
    // biases; batchnorm scale 1 and shift 0. One stream per network seed.
    void initialize() {
        Rng rng(config_.seed);
        const std::size_t k = config_.kernel;
        for (auto& p : params_) {
            auto values = p.value.mutable_data();
            const bool is_norm = p.name.find(".bn") != std::string::npos;
            if (is_norm) {
                const bool scale = p.name.ends_with(".weight");
                std::fill(values.begin(), values.end(), scale ? T(1) : T(0));
                continue;
            }
            const std::string layer = p.name.substr(0, p.name.rfind('.'));
            const Shape& ws = find(layer + ".weight")->value.shape();
            // conv [out,in,k,k], deconv [in,out,k,k] and linear [out,in] all use dim 1.
            const std::size_t fan_in = ws.size() == 4 ? ws[1] * k * k : ws[1];
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            for (T& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
        }
    }

    BackboneConfig config_;
    std::vector<Parameter<T>> params_;
    std::map<std::string, std::size_t, std::less<>> index_;
    std::vector<NamedBatchNorm> bn_;
};

template <typename T = float>
BackboneNet<T> build_backbone(const BackboneConfig& config) {
    return BackboneNet<T>(config);
}

template <typename T>
Tensor<T> forward_ae(BackboneNet<T>& net, const Tensor<T>& batch, Mode mode = Mode::Eval) {
    if (net.kind() != BackboneKind::AE) throw ContractError("forward_ae: network is AEU");
    return net.forward(batch, mode).reconstruction;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> forward_aeu(BackboneNet<T>& net, const Tensor<T>& batch, Mode mode = Mode::Eval) {
    if (net.kind() != BackboneKind::AEU) throw ContractError("forward_aeu: network is AE");
    auto out = net.forward(batch, mode);
    return {out.reconstruction, *out.log_variance};
}

namespace detail {

template <typename T>
void require_finite(const Tensor<T>& loss, const char* what) {
    if (!std::isfinite(static_cast<double>(loss.item()))) {
        throw NumericalError(std::string(what) + ": non-finite loss");
    }
}

} // namespace detail

/// Mean squared reconstruction error over every pixel and batch item.
template <typename T>
Tensor<T> loss_mse(const Tensor<T>& batch, const Tensor<T>& reconstruction) {
    if (batch.shape() != reconstruction.shape()) {
        throw ShapeError("loss_mse: " + to_string(batch.shape()) + " vs " + to_string(reconstruction.shape()));
    }
    auto loss = mean(square(sub(batch, reconstruction)));
    detail::require_finite(loss, "loss_mse");
    return loss;
}

/// Heteroscedastic reconstruction loss mean((x - x_hat)^2 / s2 + log s2),
/// evaluated as (x - x_hat)^2 * exp(-log_variance) + log_variance.
template <typename T>
Tensor<T> loss_aeu(const Tensor<T>& batch, const Tensor<T>& reconstruction, const Tensor<T>& log_variance) {
    if (batch.shape() != reconstruction.shape() || batch.shape() != log_variance.shape()) {
        throw ShapeError("loss_aeu: shapes " + to_string(batch.shape()) + ", " + to_string(reconstruction.shape()) +
                         ", " + to_string(log_variance.shape()) + " differ");
    }
    auto weighted = mul(square(sub(batch, reconstruction)), exp(neg(log_variance)));
    auto loss = mean(add(weighted, log_variance));
    detail::require_finite(loss, "loss_aeu");
    return loss;
}

/// Selects loss_mse or loss_aeu by network kind.
template <typename T>
Tensor<T> reconstruction_loss(const BackboneOutput<T>& out, const Tensor<T>& batch) {
    if (out.log_variance) return loss_aeu(batch, out.reconstruction, *out.log_variance);
    return loss_mse(batch, out.reconstruction);
}

} // namespace ddad

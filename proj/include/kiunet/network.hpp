#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kiunet/errors.hpp"
#include "kiunet/ops.hpp"
#include "kiunet/random.hpp"
#include "kiunet/serialization.hpp"
#include "kiunet/tensor.hpp"

namespace kiunet {

/// Which way a branch's encoder resamples.
enum class Direction {
    overcomplete,   ///< upsample in the encoder, pool in the decoder (Ki-Net)
    undercomplete,  ///< pool in the encoder, upsample in the decoder (U-Net)
};

struct BranchSpec {
    std::size_t depth = 3;
    std::vector<std::size_t> widths{32, 64, 128};
    Direction direction = Direction::undercomplete;
    bool skips = false;

    void validate() const {
        if (depth == 0) {
            throw ConfigError("branch depth must be >= 1");
        }
        if (widths.size() != depth) {
            throw ConfigError("branch needs one width per block: depth " + std::to_string(depth) +
                              ", got " + std::to_string(widths.size()) + " widths");
        }
        if (std::any_of(widths.begin(), widths.end(), [](std::size_t w) { return w == 0; })) {
            throw ConfigError("branch widths must be positive");
        }
    }
};

/// The seven ablation configurations.
enum class NetworkVariant { uc, oc, uc_sk, oc_sk, dual, dual_sk, kiunet };

inline constexpr std::array<NetworkVariant, 7> kAllVariants{
    NetworkVariant::uc,   NetworkVariant::oc,      NetworkVariant::uc_sk, NetworkVariant::oc_sk,
    NetworkVariant::dual, NetworkVariant::dual_sk, NetworkVariant::kiunet};

inline std::string_view variant_name(NetworkVariant v) {
    switch (v) {
        case NetworkVariant::uc: return "uc";
        case NetworkVariant::oc: return "oc";
        case NetworkVariant::uc_sk: return "uc-sk";
        case NetworkVariant::oc_sk: return "oc-sk";
        case NetworkVariant::dual: return "dual";
        case NetworkVariant::dual_sk: return "dual-sk";
        case NetworkVariant::kiunet: return "kiunet";
    }
    return "?";
}

inline std::string variant_names_list() {
    std::string s;
    for (auto v : kAllVariants) {
        s += (s.empty() ? "" : ", ") + std::string(variant_name(v));
    }
    return s;
}

inline NetworkVariant parse_variant(std::string_view name) {
    for (auto v : kAllVariants) {
        if (variant_name(v) == name) {
            return v;
        }
    }
    throw ConfigError("unknown variant '" + std::string(name) + "'; expected one of: " +
                      variant_names_list());
}

inline bool uses_undercomplete(NetworkVariant v) { return v != NetworkVariant::oc && v != NetworkVariant::oc_sk; }
inline bool uses_overcomplete(NetworkVariant v) { return v != NetworkVariant::uc && v != NetworkVariant::uc_sk; }
inline bool uses_skips(NetworkVariant v) {
    return v == NetworkVariant::uc_sk || v == NetworkVariant::oc_sk || v == NetworkVariant::dual_sk ||
           v == NetworkVariant::kiunet;
}
inline bool uses_crfb(NetworkVariant v) { return v == NetworkVariant::kiunet; }

/// Channel presets.
inline std::vector<std::size_t> reference_widths() { return {32, 64, 128}; }
inline std::vector<std::size_t> small_widths() { return {16, 32, 64}; }
inline std::vector<std::size_t> tiny_widths() { return {8, 16, 32}; }

/// Parameter count reported for the fused network in the original comparison table.
inline constexpr double kReferenceKiUNetParams = 0.29e6;

template <typename T>
struct ConvLayer {
    std::string name;
    Tensor<T> weight;  // [cout, cin, k, k]
    Tensor<T> bias;    // [cout, 1, 1, 1]

    std::size_t kernel() const { return weight.shape().h; }
    std::size_t in_channels() const { return weight.shape().c; }
    std::size_t out_channels() const { return weight.shape().n; }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, (kernel() - 1) / 2); }
};

/// Cross residual fusion between the two branches at one block.
template <typename T>
struct CRFBParams {
    ConvLayer<T> u_to_ki;
    ConvLayer<T> ki_to_u;
    /// Linear spatial ratio (Ki-Net side / U-Net side), a power of 4.
    std::size_t resize_factor = 1;

    std::size_t halvings() const {
        std::size_t steps = 0;
        for (std::size_t f = resize_factor; f > 1; f /= 2) {
            ++steps;
        }
        return steps;
    }
};

/// F̂_U = F_U + down(ki_to_u(F_Ki)),  F̂_Ki = F_Ki + up(u_to_ki(F_U)),
/// with up/down realized as repeated bilinear x2 resizes.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> crfb(const Tensor<T>& f_u, const Tensor<T>& f_ki, const CRFBParams<T>& params) {
    const Shape& su = f_u.shape();
    const Shape& sk = f_ki.shape();
    if (su.c != sk.c || su.n != sk.n) {
        throw ShapeError("crfb branch features differ in batch/channels: " + su.str() + " vs " + sk.str());
    }
    const std::size_t f = params.resize_factor;
    if (sk.h != su.h * f || sk.w != su.w * f) {
        throw ShapeError("crfb spatial ratio mismatch: " + su.str() + " vs " + sk.str() +
                         ", expected factor " + std::to_string(f));
    }
    Tensor<T> r_ki = params.ki_to_u(f_ki);
    Tensor<T> r_u = params.u_to_ki(f_u);
    for (std::size_t i = 0; i < params.halvings(); ++i) {
        r_ki = bilinear_downsample2x(r_ki);
        r_u = bilinear_upsample2x(r_u);
    }
    return {add(f_u, r_ki), add(f_ki, r_u)};
}

/// One recorded block output from a forward pass.
struct TraceEntry {
    std::string block;  // e.g. "unet.encoder.1", "kinet.decoder.2"
    Shape shape;
};

struct ForwardTrace {
    std::vector<TraceEntry> entries;

    /// Largest spatial extent recorded for blocks whose name starts with `prefix`.
    std::size_t peak_height(std::string_view prefix) const {
        std::size_t peak = 0;
        for (const auto& e : entries) {
            if (e.block.starts_with(prefix)) {
                peak = std::max(peak, e.shape.h);
            }
        }
        return peak;
    }
    std::size_t min_height(std::string_view prefix) const {
        std::size_t lo = SIZE_MAX;
        for (const auto& e : entries) {
            if (e.block.starts_with(prefix)) {
                lo = std::min(lo, e.shape.h);
            }
        }
        return lo;
    }
};

struct ParamRow {
    std::string layer;
    std::string shape;
    std::size_t count = 0;
};

struct ParamReport {
    std::size_t total = 0;
    std::vector<ParamRow> rows;

    std::string table(bool with_reference) const {
        std::ostringstream os;
        std::size_t name_w = 5;
        for (const auto& r : rows) {
            name_w = std::max(name_w, r.layer.size());
        }
        os << std::left << std::setw(static_cast<int>(name_w)) << "layer" << "  " << std::setw(18) << "weight shape"
           << std::right << std::setw(10) << "params" << "\n";
        for (const auto& r : rows) {
            os << std::left << std::setw(static_cast<int>(name_w)) << r.layer << "  " << std::setw(18) << r.shape
               << std::right << std::setw(10) << r.count << "\n";
        }
        os << std::left << std::setw(static_cast<int>(name_w)) << "total" << "  " << std::setw(18) << ""
           << std::right << std::setw(10) << total << "\n";
        if (with_reference) {
            os << reference_note();
        }
        return os.str();
    }

    std::string csv() const {
        std::ostringstream os;
        os << "layer,shape,params\n";
        for (const auto& r : rows) {
            os << r.layer << "," << r.shape << "," << r.count << "\n";
        }
        os << "total,," << total << "\n";
        return os.str();
    }

    /// Comparison against the published 0.29M figure. Parity is not expected:
    /// the published width/fusion configuration behind that number is unknown.
    std::string reference_note() const {
        std::ostringstream os;
        os << std::fixed << std::setprecision(2);
        os << "reference: published KiU-Net parameter count 0.29M; this configuration has "
           << static_cast<double>(total) / 1e6 << "M ("
           << static_cast<double>(total) / kReferenceKiUNetParams << "x the reference). "
           << "Discrepancy expected: the published layer widths and fusion-block layout that "
              "yield 0.29M are not recoverable, so no preset claims parity.\n";
        return os.str();
    }
};

template <typename T>
struct BranchLayers {
    BranchSpec spec;
    std::string prefix;  // "unet" or "kinet"
    std::vector<ConvLayer<T>> encoder;
    std::vector<ConvLayer<T>> decoder;
};

template <typename T>
class Network;

template <typename T>
Network<T> build_variant(NetworkVariant variant, const std::vector<std::size_t>& widths, std::size_t depth,
                         std::uint64_t seed);

/// A compiled network variant with an ordered, uniquely named parameter registry.
template <typename T>
class Network {
public:
    NetworkVariant variant() const { return variant_; }
    std::size_t depth() const { return depth_; }
    const std::vector<std::size_t>& widths() const { return widths_; }
    const std::optional<BranchLayers<T>>& unet() const { return unet_; }
    const std::optional<BranchLayers<T>>& kinet() const { return kinet_; }
    const std::vector<CRFBParams<T>>& crfb_blocks() const { return crfbs_; }
    std::vector<CRFBParams<T>>& crfb_blocks() { return crfbs_; }
    const ConvLayer<T>& head() const { return head_; }

    /// Largest spatial size the over-complete branch may reach.
    std::size_t max_resolution = 8192;

    /// Parameters in registration order.
    std::vector<io::NamedTensor<T>> parameters() const {
        std::vector<io::NamedTensor<T>> out;
        for (const ConvLayer<T>* layer : layers()) {
            out.push_back({layer->name + ".weight", layer->weight});
            out.push_back({layer->name + ".bias", layer->bias});
        }
        return out;
    }

    std::vector<Tensor<T>> parameter_tensors() const {
        std::vector<Tensor<T>> out;
        for (auto& p : parameters()) {
            out.push_back(p.tensor);
        }
        return out;
    }

    void zero_grad() {
        for (auto& p : parameters()) {
            p.tensor.zero_grad();
        }
    }

    std::size_t required_divisor() const { return std::size_t{1} << depth_; }

    /// Per-pixel foreground probability, same spatial size as `image`.
    Tensor<T> forward(const Tensor<T>& image, ForwardTrace* trace = nullptr) const {
        const Shape& s = image.shape();
        if (s.c != 1) {
            throw ShapeError("network input must have 1 channel, got " + s.str());
        }
        const std::size_t div = required_divisor();
        if (s.h % div != 0 || s.w % div != 0) {
            throw ShapeError("input " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                             " must be divisible by " + std::to_string(div) + " (2^depth)");
        }
        if (kinet_ && std::max(s.h, s.w) * div > max_resolution) {
            throw ShapeError("over-complete branch would reach " + std::to_string(std::max(s.h, s.w) * div) +
                             " px, above max_resolution " + std::to_string(max_resolution));
        }
        auto record = [&](const std::string& block, const Tensor<T>& t) {
            if (trace) {
                trace->entries.push_back({block, t.shape()});
            }
        };

        const bool skips = uses_skips(variant_);
        std::optional<Tensor<T>> xu, xk;
        if (unet_) xu = image;
        if (kinet_) xk = image;
        std::vector<Tensor<T>> skip_u, skip_k;

        for (std::size_t i = 0; i < depth_; ++i) {
            const std::string tag = ".encoder." + std::to_string(i + 1);
            if (xu) {
                xu = relu(maxpool2x2(unet_->encoder[i](*xu)));
                record("unet" + tag, *xu);
            }
            if (xk) {
                xk = relu(bilinear_upsample2x(kinet_->encoder[i](*xk)));
                record("kinet" + tag, *xk);
            }
            if (!crfbs_.empty()) {
                std::tie(xu, xk) = crfb(*xu, *xk, crfbs_[i]);
            }
            if (xu) skip_u.push_back(*xu);
            if (xk) skip_k.push_back(*xk);
        }
        for (std::size_t j = 0; j < depth_; ++j) {
            const std::size_t pair = depth_ - 1 - j;
            const std::string tag = ".decoder." + std::to_string(j + 1);
            if (xu) {
                Tensor<T> y = unet_->decoder[j](*xu);
                if (skips) y = add(y, skip_u[pair]);
                xu = relu(bilinear_upsample2x(y));
                record("unet" + tag, *xu);
            }
            if (xk) {
                Tensor<T> y = kinet_->decoder[j](*xk);
                if (skips) y = add(y, skip_k[pair]);
                xk = relu(maxpool2x2(y));
                record("kinet" + tag, *xk);
            }
            if (!crfbs_.empty()) {
                std::tie(xu, xk) = crfb(*xu, *xk, crfbs_[depth_ + j]);
            }
        }
        Tensor<T> fused = (xu && xk) ? add(*xu, *xk) : (xu ? *xu : *xk);
        record("fused", fused);
        return sigmoid(head_(fused));
    }

    ParamReport count_params() const {
        ParamReport report;
        for (const ConvLayer<T>* layer : layers()) {
            const Shape& ws = layer->weight.shape();
            const std::size_t n = layer->weight.numel() + layer->bias.numel();
            report.rows.push_back({layer->name,
                                   std::to_string(ws.n) + "x" + std::to_string(ws.c) + "x" +
                                       std::to_string(ws.h) + "x" + std::to_string(ws.w),
                                   n});
            report.total += n;
        }
        return report;
    }

    /// Replaces parameter values from named entries. Name sets must match exactly.
    void load_parameters(const std::vector<io::NamedTensor<T>>& entries) {
        std::map<std::string, const Tensor<T>*> incoming;
        for (const auto& e : entries) {
            if (!incoming.emplace(e.name, &e.tensor).second) {
                throw ParameterMismatchError("duplicate parameter name in checkpoint: " + e.name);
            }
        }
        auto params = parameters();
        std::set<std::string> expected;
        for (const auto& p : params) {
            expected.insert(p.name);
        }
        std::vector<std::string> missing, unknown;
        for (const auto& name : expected) {
            if (!incoming.contains(name)) missing.push_back(name);
        }
        for (const auto& [name, _] : incoming) {
            if (!expected.contains(name)) unknown.push_back(name);
        }
        if (!missing.empty() || !unknown.empty()) {
            std::string msg = "checkpoint does not match variant '" + std::string(variant_name(variant_)) + "':";
            auto list = [&msg](const char* label, const std::vector<std::string>& names) {
                if (names.empty()) return;
                msg += std::string(" ") + label + " [";
                for (std::size_t i = 0; i < names.size(); ++i) {
                    msg += (i ? ", " : "") + names[i];
                }
                msg += "]";
            };
            list("missing", missing);
            list("unknown", unknown);
            throw ParameterMismatchError(msg);
        }
        for (const auto& p : params) {
            if (incoming.at(p.name)->shape() != p.tensor.shape()) {
                throw ShapeError("parameter " + p.name + " has shape " + incoming.at(p.name)->shape().str() +
                                 ", network expects " + p.tensor.shape().str());
            }
        }
        for (auto& p : params) {
            auto dst = p.tensor.mutable_values();
            auto src = incoming.at(p.name)->values();
            std::copy(src.begin(), src.end(), dst.begin());
        }
    }

    /// Deep copy of the current parameter values.
    std::vector<io::NamedTensor<T>> snapshot() const {
        std::vector<io::NamedTensor<T>> out;
        for (auto& p : parameters()) {
            out.push_back({p.name, p.tensor.detach()});
        }
        return out;
    }

    /// Deep copy of the whole network (independent parameters).
    Network clone() const {
        Network copy = *this;
        for (ConvLayer<T>* layer : copy.mutable_layers()) {
            layer->weight = layer->weight.detach();
            layer->bias = layer->bias.detach();
        }
        return copy;
    }

private:
    friend Network build_variant<T>(NetworkVariant, const std::vector<std::size_t>&, std::size_t, std::uint64_t);

    std::vector<const ConvLayer<T>*> layers() const {
        std::vector<const ConvLayer<T>*> out;
        for (const auto* b : {&unet_, &kinet_}) {
            if (!*b) continue;
            for (const auto& l : (*b)->encoder) out.push_back(&l);
            for (const auto& l : (*b)->decoder) out.push_back(&l);
        }
        for (const auto& c : crfbs_) {
            out.push_back(&c.u_to_ki);
            out.push_back(&c.ki_to_u);
        }
        out.push_back(&head_);
        return out;
    }

    std::vector<ConvLayer<T>*> mutable_layers() {
        std::vector<ConvLayer<T>*> out;
        for (const ConvLayer<T>* l : layers()) {
            out.push_back(const_cast<ConvLayer<T>*>(l));
        }
        return out;
    }

    NetworkVariant variant_ = NetworkVariant::kiunet;
    std::size_t depth_ = 3;
    std::vector<std::size_t> widths_;
    std::optional<BranchLayers<T>> unet_;
    std::optional<BranchLayers<T>> kinet_;
    std::vector<CRFBParams<T>> crfbs_;
    ConvLayer<T> head_;
};

/// Initial scale of the fusion-block convolution weights relative to the branch
/// convolutions. At zero a freshly built KIUNET computes what DUAL_SK computes
/// and the exchange paths grow from there; at full scale the residuals added at
/// every block compound and the head saturates before the first step.
inline constexpr double kCrfbInitScale = 0.0;

namespace detail {

// Kaiming-style fan-in uniform init, U(-b, b) with b = sqrt(6 / fan_in); zero bias.
template <typename T>
ConvLayer<T> make_conv(std::string name, std::size_t cin, std::size_t cout, std::size_t k, Rng& rng) {
    ConvLayer<T> layer{std::move(name), Tensor<T>(Shape{cout, cin, k, k}), Tensor<T>(Shape{cout, 1, 1, 1})};
    const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
    for (T& w : layer.weight.mutable_values()) {
        w = static_cast<T>(rng.uniform(-bound, bound));
    }
    layer.weight.set_requires_grad(true);
    layer.bias.set_requires_grad(true);
    return layer;
}

template <typename T>
BranchLayers<T> make_branch(const BranchSpec& spec, std::string prefix, Rng& rng) {
    spec.validate();
    BranchLayers<T> b{spec, std::move(prefix), {}, {}};
    std::size_t cin = 1;
    for (std::size_t i = 0; i < spec.depth; ++i) {
        b.encoder.push_back(make_conv<T>(b.prefix + ".encoder." + std::to_string(i + 1) + ".conv", cin,
                                         spec.widths[i], 3, rng));
        cin = spec.widths[i];
    }
    // Mirrored decoder: block j maps widths[d-j] -> widths[d-1-j].
    for (std::size_t j = 0; j < spec.depth; ++j) {
        const std::size_t cout = spec.widths[spec.depth - 1 - j];
        b.decoder.push_back(make_conv<T>(b.prefix + ".decoder." + std::to_string(j + 1) + ".conv", cin, cout, 3, rng));
        cin = cout;
    }
    return b;
}

}  // namespace detail

/// Builds one of the seven variants; `seed` fixes the initialization.
template <typename T>
Network<T> build_variant(NetworkVariant variant, const std::vector<std::size_t>& widths, std::size_t depth,
                         std::uint64_t seed) {
    Network<T> net;
    net.variant_ = variant;
    net.depth_ = depth;
    net.widths_ = widths;
    Rng rng(seed);
    const bool skips = uses_skips(variant);
    if (uses_undercomplete(variant)) {
        net.unet_ = detail::make_branch<T>({depth, widths, Direction::undercomplete, skips}, "unet", rng);
    }
    if (uses_overcomplete(variant)) {
        net.kinet_ = detail::make_branch<T>({depth, widths, Direction::overcomplete, skips}, "kinet", rng);
    }
    // Head before fusion blocks: variants that share branches then share every
    // common parameter for a given seed.
    net.head_ = detail::make_conv<T>("head", widths.front(), 1, 1, rng);
    if (uses_crfb(variant)) {
        for (std::size_t i = 0; i < depth; ++i) {
            const std::size_t c = widths[i];
            const std::string name = "crfb.encoder." + std::to_string(i + 1);
            net.crfbs_.push_back({detail::make_conv<T>(name + ".u_to_ki", c, c, 3, rng),
                                  detail::make_conv<T>(name + ".ki_to_u", c, c, 3, rng),
                                  std::size_t{1} << (2 * (i + 1))});
        }
        for (std::size_t j = 0; j < depth; ++j) {
            const std::size_t c = widths[depth - 1 - j];
            const std::string name = "crfb.decoder." + std::to_string(j + 1);
            net.crfbs_.push_back({detail::make_conv<T>(name + ".u_to_ki", c, c, 3, rng),
                                  detail::make_conv<T>(name + ".ki_to_u", c, c, 3, rng),
                                  std::size_t{1} << (2 * (depth - 1 - j))});
        }
    }
    // The draws above still happen, so the rest of the stream is unaffected by the scale.
    for (auto& block : net.crfbs_) {
        for (auto* layer : {&block.u_to_ki, &block.ki_to_u}) {
            for (T& w : layer->weight.mutable_values()) w = static_cast<T>(kCrfbInitScale * static_cast<double>(w));
        }
    }
    return net;
}

template <typename T>
void save_checkpoint(const Network<T>& net, const std::filesystem::path& path) {
    io::save_checkpoint_file(path, net.parameters());
}

/// Loads a checkpoint into an already-built network of the intended variant.
template <typename T>
void load_checkpoint(Network<T>& net, const std::filesystem::path& path) {
    net.load_parameters(io::load_checkpoint_file<T>(path));
}

template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path, NetworkVariant variant,
                           const std::vector<std::size_t>& widths, std::size_t depth) {
    auto entries = io::load_checkpoint_file<T>(path);
    Network<T> net = build_variant<T>(variant, widths, depth, 0);
    net.load_parameters(entries);
    return net;
}

}  // namespace kiunet

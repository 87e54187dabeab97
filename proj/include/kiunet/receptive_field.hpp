#pragma once

#include <boost/rational.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kiunet/errors.hpp"
#include "kiunet/network.hpp"
#include "kiunet/ops.hpp"
#include "kiunet/random.hpp"
#include "kiunet/tensor.hpp"

namespace kiunet::rf {

using Rational = boost::rational<std::int64_t>;

enum class LayerKind { conv, pool, upsample };

struct LayerDesc {
    LayerKind kind = LayerKind::conv;
    std::int64_t kernel = 3;  // spatial extent: k for conv, 2 for pool and two-tap upsample

    static LayerDesc conv(std::int64_t k) { return {LayerKind::conv, k}; }
    static LayerDesc pool() { return {LayerKind::pool, 2}; }
    static LayerDesc upsample() { return {LayerKind::upsample, 2}; }

    std::string label() const {
        switch (kind) {
            case LayerKind::conv: return "conv" + std::to_string(kernel);
            case LayerKind::pool: return "pool2";
            case LayerKind::upsample: return "up2";
        }
        return "?";
    }
    Rational stride() const {
        switch (kind) {
            case LayerKind::conv: return 1;
            case LayerKind::pool: return 2;
            case LayerKind::upsample: return Rational(1, 2);
        }
        return 1;
    }
};

struct LayerTrace {
    std::vector<LayerDesc> layers;

    /// conv -> resample per block, the encoder layout of one branch.
    static LayerTrace encoder(Direction direction, std::size_t depth, std::int64_t kernel = 3) {
        LayerTrace t;
        for (std::size_t i = 0; i < depth; ++i) {
            t.layers.push_back(LayerDesc::conv(kernel));
            t.layers.push_back(direction == Direction::undercomplete ? LayerDesc::pool() : LayerDesc::upsample());
        }
        return t;
    }
};

struct RFRow {
    LayerDesc layer;
    Rational jump;
    Rational rf;
};

struct Extent {
    std::size_t height = 0;
    std::size_t width = 0;
    /// The footprint reached the input border, so the extent may be clipped.
    bool touches_border = false;
};

inline std::string format_rational(const Rational& r) {
    if (r.denominator() == 1) return std::to_string(r.numerator());
    std::ostringstream os;
    os << r.numerator() << "/" << r.denominator();
    return os.str();
}

struct RFReport {
    std::vector<RFRow> rows;
    Rational final_rf = 1;
    Rational final_jump = 1;
    std::optional<Extent> empirical;

    std::string table() const {
        std::ostringstream os;
        os << std::left << std::setw(7) << "layer" << std::setw(8) << "kind" << std::right << std::setw(10) << "jump"
           << std::setw(10) << "rf" << std::setw(12) << "rf (dec)" << "\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& r = rows[i];
            std::ostringstream dec;
            dec << std::fixed << std::setprecision(3) << boost::rational_cast<double>(r.rf);
            os << std::left << std::setw(7) << (i + 1) << std::setw(8) << r.layer.label() << std::right << std::setw(10)
               << format_rational(r.jump) << std::setw(10) << format_rational(r.rf) << std::setw(12) << dec.str()
               << "\n";
        }
        os << "final rf: " << format_rational(final_rf) << " px";
        if (empirical) {
            os << "; empirical footprint: " << empirical->height << "x" << empirical->width << " px"
               << (empirical->touches_border ? " (clipped by border)" : "");
        }
        os << "\n";
        return os.str();
    }

    /// `layer,kind,jump,rf` with exact rationals.
    std::string csv() const {
        std::ostringstream os;
        os << "layer,kind,jump,rf\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            os << (i + 1) << "," << rows[i].layer.label() << "," << format_rational(rows[i].jump) << ","
               << format_rational(rows[i].rf) << "\n";
        }
        return os.str();
    }
};

/// r <- r + (k - 1) j, then j <- j s, starting from r = j = 1.
inline RFReport analytic_rf(const LayerTrace& trace) {
    if (trace.layers.empty()) {
        throw ConfigError("analytic_rf needs a non-empty layer trace");
    }
    RFReport report;
    Rational jump = 1, rf = 1;
    for (const auto& layer : trace.layers) {
        rf += Rational(layer.kernel - 1) * jump;
        jump *= layer.stride();
        report.rows.push_back({layer, jump, rf});
    }
    report.final_rf = rf;
    report.final_jump = jump;
    return report;
}

struct ProbeOptions {
    std::size_t channels = 1;
    std::uint64_t seed = 1;
    /// Keep relu between blocks instead of the identity.
    bool relu = false;
    /// Use max pooling instead of its linear stand-in (2x2 mean); the max
    /// routes gradient to a single tap, so its footprint can be narrower.
    bool max_pool = false;
};

/// Input-gradient footprint of the centre output unit of `trace` realized with
/// random weights, zero biases and (by default) identity activations.
inline Extent empirical_rf(const LayerTrace& trace, std::size_t input_size, const ProbeOptions& opt = {}) {
    if (trace.layers.empty()) {
        throw ConfigError("empirical_rf needs a non-empty layer trace");
    }
    Rng rng(opt.seed);
    auto random_tensor = [&rng](Shape s) {
        std::vector<double> v(s.numel());
        for (double& x : v) x = rng.normal();
        return Tensor<double>(s, std::move(v));
    };

    Tensor<double> input = random_tensor(Shape{1, 1, input_size, input_size});
    input.set_requires_grad(true);
    Tensor<double> x = input;
    std::size_t channels = 1;
    for (const auto& layer : trace.layers) {
        switch (layer.kind) {
            case LayerKind::conv: {
                const auto k = static_cast<std::size_t>(layer.kernel);
                Tensor<double> w = random_tensor(Shape{opt.channels, channels, k, k});
                Tensor<double> b(Shape{opt.channels, 1, 1, 1});
                x = conv2d(x, w, b, (k - 1) / 2);
                channels = opt.channels;
                break;
            }
            case LayerKind::pool:
                x = opt.max_pool ? maxpool2x2(x) : avgpool2x2(x);
                break;
            case LayerKind::upsample:
                x = bilinear_upsample2x(x);
                break;
        }
        if (opt.relu && layer.kind != LayerKind::conv) {
            x = relu(x);
        }
    }
    const Shape& os = x.shape();
    std::vector<double> seed(x.numel(), 0.0);
    seed[(os.h / 2) * os.w + os.w / 2] = 1.0;  // channel 0, centre
    x.backward(seed);

    if (!input.has_grad()) {
        throw NumericError("receptive-field probe: input received no gradient");
    }
    auto g = input.grad();
    std::size_t y0 = SIZE_MAX, y1 = 0, x0 = SIZE_MAX, x1 = 0;
    for (std::size_t y = 0; y < input_size; ++y) {
        for (std::size_t xi = 0; xi < input_size; ++xi) {
            if (std::abs(g[y * input_size + xi]) > 1e-12) {
                y0 = std::min(y0, y);
                y1 = std::max(y1, y);
                x0 = std::min(x0, xi);
                x1 = std::max(x1, xi);
            }
        }
    }
    if (y0 == SIZE_MAX) {
        throw NumericError("receptive-field probe: all input gradients are zero (measurement failed)");
    }
    const bool border = y0 == 0 || x0 == 0 || y1 + 1 == input_size || x1 + 1 == input_size;
    return {y1 - y0 + 1, x1 - x0 + 1, border};
}

}  // namespace kiunet::rf

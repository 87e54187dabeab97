#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kiunet/data.hpp"
#include "kiunet/errors.hpp"
#include "kiunet/metrics.hpp"
#include "kiunet/network.hpp"
#include "kiunet/ops.hpp"
#include "kiunet/random.hpp"
#include "kiunet/tensor.hpp"

namespace kiunet {

inline constexpr double kBceClampEps = 1e-7;

/// Mean pixel-wise binary cross entropy over N*H*W:
///   -(1/NHW) sum [t log p + (1 - t) log(1 - p)],  p clamped to [eps, 1 - eps].
/// The gradient is taken at the clamped value.
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& prediction, const Tensor<T>& target) {
    if (prediction.shape() != target.shape()) {
        throw ShapeError("bce_loss shape mismatch: prediction " + prediction.shape().str() + " vs target " +
                         target.shape().str());
    }
    auto p = prediction.values();
    auto t = target.values();
    const double lo = kBceClampEps, hi = 1.0 - kBceClampEps;
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pc = std::clamp(static_cast<double>(p[i]), lo, hi);
        const double ti = static_cast<double>(t[i]);
        acc += ti * std::log(pc) + (1.0 - ti) * std::log(1.0 - pc);
    }
    const double count = static_cast<double>(p.size());
    std::vector<T> out{static_cast<T>(-acc / count)};
    detail::ensure_finite<T>(out, "bce_loss");

    std::shared_ptr<detail::Node<T>> node;
    if (detail::any_requires_grad({&prediction, &target})) {
        node = detail::make_node<T>(
            OpKind::bce_loss, {&prediction, &target},
            [prediction, target, lo, hi, count](std::span<const T> g, std::span<std::vector<T>*> dst) {
                auto p = prediction.values();
                auto t = target.values();
                const double scale = static_cast<double>(g[0]) / count;
                if (auto* gp = dst[0]) {
                    for (std::size_t i = 0; i < p.size(); ++i) {
                        // Evaluated at the clamped value rather than zeroed, so a
                        // saturated sigmoid still gets pulled back.
                        const double pi = std::clamp(static_cast<double>(p[i]), lo, hi);
                        const double ti = static_cast<double>(t[i]);
                        (*gp)[i] += static_cast<T>(-scale * (ti / pi - (1.0 - ti) / (1.0 - pi)));
                    }
                }
                if (auto* gt = dst[1]) {
                    for (std::size_t i = 0; i < p.size(); ++i) {
                        const double pc = std::clamp(static_cast<double>(p[i]), lo, hi);
                        (*gt)[i] += static_cast<T>(-scale * (std::log(pc) - std::log(1.0 - pc)));
                    }
                }
            });
    }
    return Tensor<T>::from_op(Shape{}, std::move(out), std::move(node));
}

struct TrainConfig {
    double learning_rate = 0.001;
    std::size_t batch_size = 1;
    std::size_t epochs = 100;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    std::uint64_t seed = 0;
    std::size_t eval_every = 1;
    double threshold = 0.5;
    /// When false the `seconds` column is written as 0 so that histories of
    /// identical runs compare byte for byte.
    bool record_time = true;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
        if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
            throw ConfigError("adam betas must lie in [0, 1)");
        }
        if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be > 0");
    }
};

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::uint64_t t = 0;
};

/// Standard Adam with bias correction:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   p <- p - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps).
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const TrainConfig& cfg) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params[i].has_grad()) {
            throw Error("adam_step: parameter " + std::to_string(i) + " has no gradient (disconnected graph?)");
        }
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.numel(), T(0));
            state.v.emplace_back(p.numel(), T(0));
        }
    }
    if (state.m.size() != params.size()) {
        throw Error("adam_step: optimizer state does not match the parameter list");
    }
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const T b1 = static_cast<T>(cfg.adam_beta1), b2 = static_cast<T>(cfg.adam_beta2);
    const T bc1 = static_cast<T>(1.0 - std::pow(cfg.adam_beta1, t));
    const T bc2 = static_cast<T>(1.0 - std::pow(cfg.adam_beta2, t));
    const T lr = static_cast<T>(cfg.learning_rate), eps = static_cast<T>(cfg.adam_epsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto g = params[i].grad();
        auto p = params[i].mutable_values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps);
        }
    }
}

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    std::optional<double> val_dice;
    std::optional<double> val_jaccard;
    double seconds = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;

    /// `epoch,train_loss,val_dice,val_jaccard,seconds`, LF line endings,
    /// empty cells where validation did not run.
    std::string csv() const {
        std::ostringstream os;
        os << "epoch,train_loss,val_dice,val_jaccard,seconds\n";
        os << std::setprecision(17);
        for (const auto& e : epochs) {
            os << e.epoch << "," << e.train_loss << ",";
            if (e.val_dice) os << *e.val_dice;
            os << ",";
            if (e.val_jaccard) os << *e.val_jaccard;
            os << "," << e.seconds << "\n";
        }
        return os.str();
    }
};

template <typename T>
struct TrainResult {
    std::vector<io::NamedTensor<T>> final_checkpoint;
    std::vector<io::NamedTensor<T>> best_checkpoint;
    std::optional<std::size_t> best_epoch;
    TrainHistory history;
};

/// Raised when the loss becomes non-finite; carries where it happened.
class TrainingDivergedError : public NumericError {
public:
    TrainingDivergedError(std::size_t epoch, std::size_t step, const std::string& what)
        : NumericError("training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                       ": " + what),
          epoch_(epoch),
          step_(step) {}
    std::size_t epoch() const { return epoch_; }
    std::size_t step() const { return step_; }

private:
    std::size_t epoch_;
    std::size_t step_;
};

namespace detail {

template <typename T>
Tensor<T> stack_field(std::span<const data::Sample> samples, std::span<const std::size_t> idx, bool mask) {
    std::vector<Tensor<T>> parts;
    for (std::size_t i : idx) {
        const auto& s = samples[i];
        parts.push_back(tensor_cast<T>(mask ? s.mask : s.image));
    }
    if (parts.size() == 1) return parts[0];
    return concat_batch<T>(parts);
}

}  // namespace detail

/// Dice/Jaccard of the binarized prediction against each sample's mask.
template <typename T>
EvalReport evaluate(const Network<T>& net, std::span<const data::Sample> samples, double threshold) {
    if (samples.empty()) {
        throw ConfigError("evaluate needs a non-empty dataset");
    }
    NoGradGuard no_grad;
    std::vector<SampleScore> rows;
    for (const auto& s : samples) {
        const Tensor<T> prob = net.forward(tensor_cast<T>(s.image));
        const BinaryMask pred = binarize(prob, threshold);
        const BinaryMask truth = mask_from_tensor(s.mask);
        rows.push_back({s.id, dice(pred, truth), jaccard(pred, truth)});
    }
    return EvalReport::from_rows(std::move(rows));
}

/// Shuffled visiting order for one epoch; a pure function of (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(seed, epoch));
    rng.shuffle(order);
    return order;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam on BCE for `cfg.epochs` epochs of ceil(|train| / batch) steps each.
/// Validation (when `val` is non-empty) runs every `eval_every` epochs and on
/// the last epoch; the best checkpoint is the one with the highest validation
/// Dice (ties keep the earlier epoch).
template <typename T>
TrainResult<T> train(Network<T>& net, std::span<const data::Sample> train_set, std::span<const data::Sample> val,
                     const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    if (train_set.empty()) {
        throw ConfigError("training set is empty");
    }
    TrainResult<T> result;
    AdamState<T> adam;
    std::vector<Tensor<T>> params = net.parameter_tensors();
    std::optional<double> best_dice;

    std::size_t global_step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        const auto order = epoch_order(train_set.size(), cfg.seed, epoch);
        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
            std::span<const std::size_t> idx(order.data() + begin, end - begin);
            const Tensor<T> image = detail::stack_field<T>(train_set, idx, false);
            const Tensor<T> target = detail::stack_field<T>(train_set, idx, true);

            net.zero_grad();
            Tensor<T> loss;
            try {
                loss = bce_loss(net.forward(image), target);
            } catch (const NumericError& e) {
                throw TrainingDivergedError(epoch, global_step, e.what());
            }
            const double value = static_cast<double>(loss.item());
            if (!std::isfinite(value)) {
                throw TrainingDivergedError(epoch, global_step, "non-finite loss");
            }
            loss.backward();
            adam_step<T>(params, adam, cfg);
            loss_sum += value;
            ++steps;
            ++global_step;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(steps);
        if (!val.empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
            const EvalReport report = evaluate(net, val, cfg.threshold);
            rec.val_dice = report.dice.mean;
            rec.val_jaccard = report.jaccard.mean;
            if (!best_dice || report.dice.mean > *best_dice) {
                best_dice = report.dice.mean;
                result.best_epoch = epoch;
                result.best_checkpoint = net.snapshot();
            }
        }
        if (cfg.record_time) {
            rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        }
        result.history.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec);
    }
    result.final_checkpoint = net.snapshot();
    if (result.best_checkpoint.empty()) {
        result.best_checkpoint = result.final_checkpoint;
    }
    return result;
}

}  // namespace kiunet

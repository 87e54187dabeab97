#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "kiunet/errors.hpp"
#include "kiunet/tensor.hpp"

namespace kiunet {

struct BinaryMask {
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<std::uint8_t> bits;

    std::size_t count() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
};

/// value >= threshold -> 1.
template <typename T>
BinaryMask binarize(const Tensor<T>& prob, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw ConfigError("binarize threshold must lie in (0, 1)");
    }
    const Shape& s = prob.shape();
    if (s.n != 1 || s.c != 1) {
        throw ShapeError("binarize expects a 1x1xHxW map, got " + s.str());
    }
    BinaryMask m{s.h, s.w, std::vector<std::uint8_t>(s.plane())};
    auto v = prob.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
        m.bits[i] = static_cast<double>(v[i]) >= threshold ? 1 : 0;
    }
    return m;
}

/// Ground-truth masks are exactly 0/1 already; any value >= 0.5 counts as set.
template <typename T>
BinaryMask mask_from_tensor(const Tensor<T>& mask) {
    return binarize(mask, 0.5);
}

namespace detail {

struct OverlapCounts {
    std::size_t a = 0, b = 0, both = 0;
};

inline OverlapCounts overlap(const BinaryMask& a, const BinaryMask& b) {
    if (a.h != b.h || a.w != b.w) {
        throw ShapeError("mask shapes differ: " + std::to_string(a.h) + "x" + std::to_string(a.w) + " vs " +
                         std::to_string(b.h) + "x" + std::to_string(b.w));
    }
    OverlapCounts c;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
        c.a += a.bits[i];
        c.b += b.bits[i];
        c.both += a.bits[i] & b.bits[i];
    }
    return c;
}

}  // namespace detail

/// 2|A∩B| / (|A|+|B|); 1 when both masks are empty.
inline double dice(const BinaryMask& a, const BinaryMask& b) {
    const auto c = detail::overlap(a, b);
    if (c.a + c.b == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.a + c.b);
}

/// |A∩B| / |A∪B|; 1 when both masks are empty.
inline double jaccard(const BinaryMask& a, const BinaryMask& b) {
    const auto c = detail::overlap(a, b);
    const std::size_t uni = c.a + c.b - c.both;
    if (uni == 0) {
        return 1.0;
    }
    return static_cast<double>(c.both) / static_cast<double>(uni);
}

struct MeanVariance {
    double mean = 0.0;
    double variance = 0.0;  // population
};

/// Population mean/variance, summed in sorted order so the result does not
/// depend on the order of `values`.
inline MeanVariance mean_variance(std::span<const double> values) {
    if (values.empty()) {
        return {};
    }
    std::vector<double> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const double n = static_cast<double>(sorted.size());
    const double mean = std::accumulate(sorted.begin(), sorted.end(), 0.0) / n;
    std::vector<double> sq(sorted.size());
    std::transform(sorted.begin(), sorted.end(), sq.begin(), [mean](double v) { return (v - mean) * (v - mean); });
    std::sort(sq.begin(), sq.end());
    return {mean, std::accumulate(sq.begin(), sq.end(), 0.0) / n};
}

struct SampleScore {
    std::string id;
    double dice = 0.0;
    double jaccard = 0.0;
};

struct EvalReport {
    std::vector<SampleScore> rows;
    MeanVariance dice;
    MeanVariance jaccard;

    static EvalReport from_rows(std::vector<SampleScore> rows) {
        EvalReport r;
        r.rows = std::move(rows);
        std::vector<double> d, j;
        for (const auto& s : r.rows) {
            d.push_back(s.dice);
            j.push_back(s.jaccard);
        }
        r.dice = mean_variance(d);
        r.jaccard = mean_variance(j);
        return r;
    }

    /// `sample,dice,jaccard` rows followed by a `# summary` comment line.
    std::string csv() const {
        std::ostringstream os;
        os << std::setprecision(17);
        os << "sample,dice,jaccard\n";
        for (const auto& s : rows) {
            os << s.id << "," << s.dice << "," << s.jaccard << "\n";
        }
        os << "# summary n=" << rows.size() << " dice_mean=" << dice.mean << " dice_var=" << dice.variance
           << " jaccard_mean=" << jaccard.mean << " jaccard_var=" << jaccard.variance << "\n";
        return os.str();
    }
};

/// Mean/variance of per-fold means.
struct FoldSummary {
    std::size_t folds = 0;
    MeanVariance dice;
    MeanVariance jaccard;
};

inline FoldSummary aggregate_folds(std::span<const EvalReport> reports) {
    std::vector<double> d, j;
    for (const auto& r : reports) {
        d.push_back(r.dice.mean);
        j.push_back(r.jaccard.mean);
    }
    return {reports.size(), mean_variance(d), mean_variance(j)};
}

/// Plain-text table with the columns of the published comparison table,
/// metrics in percent.
inline std::string metrics_table(const std::vector<std::pair<std::string, FoldSummary>>& methods,
                                 const std::vector<std::size_t>& param_counts) {
    std::ostringstream os;
    os << std::left << std::setw(16) << "Method" << "| " << std::setw(22) << "DICE Acc (%)" << "| "
       << std::setw(22) << "Jaccard Idx (%)" << "| " << "Parameters\n";
    os << std::string(16, '-') << "+" << std::string(23, '-') << "+" << std::string(23, '-') << "+"
       << std::string(11, '-') << "\n";
    for (std::size_t i = 0; i < methods.size(); ++i) {
        const auto& [name, s] = methods[i];
        std::ostringstream d, j;
        d << std::fixed << std::setprecision(2) << 100.0 * s.dice.mean << " +/- " << std::setprecision(3)
          << 100.0 * 100.0 * s.dice.variance;
        j << std::fixed << std::setprecision(2) << 100.0 * s.jaccard.mean << " +/- " << std::setprecision(3)
          << 100.0 * 100.0 * s.jaccard.variance;
        os << std::left << std::setw(16) << name << "| " << std::setw(22) << d.str() << "| " << std::setw(22)
           << j.str() << "| ";
        if (i < param_counts.size()) {
            std::ostringstream p;
            p << std::fixed << std::setprecision(2) << static_cast<double>(param_counts[i]) / 1e6 << "M";
            os << p.str();
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace kiunet

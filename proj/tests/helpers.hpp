#pragma once

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "kiunet/random.hpp"
#include "kiunet/tensor.hpp"

namespace testutil {

template <typename T = double>
kiunet::Tensor<T> random_tensor(kiunet::Shape s, kiunet::Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(s.numel());
    for (T& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return kiunet::Tensor<T>(s, std::move(v));
}

template <typename T>
std::vector<double> as_double(const kiunet::Tensor<T>& t) {
    return {t.values().begin(), t.values().end()};
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return a.size() == b.size() ? m : 1e300;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("kiunet-test-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil

// Independent reference implementations used as test oracles.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace afrd_test {

// Mean over all (positive, negative) pairs of [s+ > s-] + 1/2 [s+ == s-].
inline double pairwise_auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    double wins = 0;
    double pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            pairs += 1;
            if (scores[i] > scores[j]) wins += 1;
            else if (scores[i] == scores[j]) wins += 0.5;
        }
    }
    return wins / pairs;
}

// Lambertian shading of a height field, written from the model definition:
// the surface z = h(x, y) has tangents (1, 0, dh/dx) and (0, 1, dh/dy), whose
// cross product is the unnormalized normal (-dh/dx, -dh/dy, 1). Derivatives
// are numpy.gradient style: central inside, one-sided at the borders.
inline std::vector<double> lambert_oracle(const std::vector<double>& height,
                                          const std::array<std::vector<double>, 3>& albedo, std::size_t size,
                                          const std::array<double, 3>& light, double ambient) {
    auto h = [&](long y, long x) { return height[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)]; };
    auto deriv = [&](long i, long last, auto at) {
        if (i == 0) return at(1) - at(0);
        if (i == last) return at(last) - at(last - 1);
        return (at(i + 1) - at(i - 1)) / 2.0;
    };
    const long n = static_cast<long>(size);
    std::vector<double> out(size * size * 3);
    for (long y = 0; y < n; ++y)
        for (long x = 0; x < n; ++x) {
            const double dx = deriv(x, n - 1, [&](long k) { return h(y, k); });
            const double dy = deriv(y, n - 1, [&](long k) { return h(k, x); });
            const std::array<double, 3> t1{1, 0, dx}, t2{0, 1, dy};
            std::array<double, 3> nv{t1[1] * t2[2] - t1[2] * t2[1], t1[2] * t2[0] - t1[0] * t2[2],
                                     t1[0] * t2[1] - t1[1] * t2[0]};
            const double len = std::hypot(nv[0], nv[1], nv[2]);
            double dot = 0;
            for (int k = 0; k < 3; ++k) dot += nv[k] / len * light[k];
            const std::size_t i = static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x);
            for (std::size_t c = 0; c < 3; ++c) out[i * 3 + c] = albedo[c][i] * std::max(0.0, dot) + ambient;
        }
    return out;
}

}  // namespace afrd_test

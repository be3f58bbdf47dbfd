#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "protosal/common.hpp"
#include "protosal/graph.hpp"
#include "protosal/rng.hpp"

namespace protosal {

struct GradCheckResult {
    double max_err = 0.0;   // |fd - analytic| / max(|fd|, |analytic|, 1)
    std::string worst;      // coordinate where the max occurred
    std::int64_t checked = 0;
    bool ok(double tol = 1e-6) const { return max_err <= tol; }
};

inline Tensor64 random_tensor(std::vector<std::int64_t> shape, Rng& rng,
                              double lo = -1.0, double hi = 1.0) {
    Tensor64 t(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Central-difference check of every input and trainable-parameter coordinate
// against the analytic backward pass. The graph's last node must be scalar.
// Throws NumericError when a cached piecewise switch sits closer than
// kink_guard to its threshold; callers resample the input and retry.
inline GradCheckResult finite_difference_check(Graph64& g, const Tensor64& input,
                                               double h = 1e-5, bool training = false,
                                               double kink_guard = 1e-3) {
    auto scalar_forward = [&](const Tensor64& x) {
        const Tensor64& out = g.forward(x, training);
        if (out.numel() != 1)
            throw Error("finite_difference_check needs a scalar output, got " +
                        out.shape_str());
        return double(out.data[0]);
    };

    // snapshot buffers (batch-norm running stats mutate during training forwards)
    std::vector<std::vector<double>> buf_snapshot;
    for (auto& p : g.params())
        if (p.is_buffer) buf_snapshot.push_back(p.value.data);

    scalar_forward(input);
    if (g.min_kink_margin() < kink_guard)
        throw NumericError("input too close to a piecewise switch (margin " +
                           std::to_string(g.min_kink_margin()) + ")");
    g.zero_grad();
    Tensor64 seed({1});
    seed.data[0] = 1.0;
    g.backward(seed);

    Tensor64 analytic_input = g.input_gradient();
    std::vector<std::vector<double>> analytic_params;
    for (auto& p : g.params())
        analytic_params.push_back(p.trainable ? p.value.grad : std::vector<double>{});

    GradCheckResult res;
    auto compare = [&](double fd, double an, const std::string& where) {
        double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1.0});
        ++res.checked;
        if (err > res.max_err) {
            res.max_err = err;
            res.worst = where;
        }
    };

    Tensor64 x = input;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        double keep = x.data[i];
        x.data[i] = keep + h;
        double fp = scalar_forward(x);
        x.data[i] = keep - h;
        double fm = scalar_forward(x);
        x.data[i] = keep;
        compare((fp - fm) / (2 * h), analytic_input.data[i],
                "input[" + std::to_string(i) + "]");
    }

    for (std::size_t pi = 0; pi < g.params().size(); ++pi) {
        auto& p = g.params()[pi];
        if (!p.trainable) continue;
        for (std::int64_t i = 0; i < p.value.numel(); ++i) {
            double keep = p.value.data[i];
            p.value.data[i] = keep + h;
            double fp = scalar_forward(x);
            p.value.data[i] = keep - h;
            double fm = scalar_forward(x);
            p.value.data[i] = keep;
            compare((fp - fm) / (2 * h), analytic_params[pi][i],
                    p.name + "[" + std::to_string(i) + "]");
        }
    }

    std::size_t bi = 0;
    for (auto& p : g.params())
        if (p.is_buffer) p.value.data = buf_snapshot[bi++];
    g.invalidate();
    return res;
}

// Retries with fresh random inputs until the kink guard admits one.
inline GradCheckResult fd_check_resampled(Graph64& g, std::vector<std::int64_t> shape,
                                          Rng& rng, int attempts = 16, double h = 1e-5,
                                          bool training = false,
                                          double kink_guard = 1e-3, double lo = -1.0,
                                          double hi = 1.0) {
    for (int a = 0; a < attempts; ++a) {
        Tensor64 x = random_tensor(shape, rng, lo, hi);
        try {
            return finite_difference_check(g, x, h, training, kink_guard);
        } catch (const NumericError&) {
            continue;
        }
    }
    throw NumericError("no admissible input after " + std::to_string(attempts) +
                       " resampling attempts");
}

}  // namespace protosal

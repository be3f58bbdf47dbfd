#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "protosal/common.hpp"
#include "protosal/graph.hpp"

namespace protosal {

// SGD with momentum and Adam over a graph's trainable parameters.
// An optional name filter restricts updates (frozen layers keep their values
// and their state slots).
class Optimizer {
public:
    enum class Kind { Sgd, Adam };

    static Optimizer sgd(double lr, double momentum = 0.9) {
        Optimizer o;
        o.kind_ = Kind::Sgd;
        o.lr_ = lr;
        o.momentum_ = momentum;
        return o;
    }

    static Optimizer adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                          double eps = 1e-8) {
        Optimizer o;
        o.kind_ = Kind::Adam;
        o.lr_ = lr;
        o.beta1_ = beta1;
        o.beta2_ = beta2;
        o.eps_ = eps;
        return o;
    }

    static Optimizer by_name(const std::string& name, double lr) {
        if (name == "sgd") return sgd(lr);
        if (name == "adam") return adam(lr);
        throw ConfigError("unknown optimizer: " + name);
    }

    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }
    Kind kind() const { return kind_; }

    // empty = update every trainable parameter
    void set_param_filter(std::vector<std::string> names) {
        filter_ = std::move(names);
    }

    void step(Graph& g) {
        auto& params = g.params();
        if (state_.size() != params.size()) {
            state_.assign(params.size(), State{});
        }
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i];
            if (!p.trainable) continue;
            if (!filter_.empty() &&
                std::find(filter_.begin(), filter_.end(), p.name) == filter_.end())
                continue;
            auto& s = state_[i];
            const std::size_t n = p.value.data.size();
            if (kind_ == Kind::Sgd) {
                if (s.m.size() != n) s.m.assign(n, 0.f);
                for (std::size_t j = 0; j < n; ++j) {
                    s.m[j] = float(momentum_) * s.m[j] + p.value.grad[j];
                    p.value.data[j] -= float(lr_) * s.m[j];
                }
            } else {
                if (s.m.size() != n) s.m.assign(n, 0.f);
                if (s.v.size() != n) s.v.assign(n, 0.f);
                const double c1 = 1.0 - std::pow(beta1_, t_);
                const double c2 = 1.0 - std::pow(beta2_, t_);
                for (std::size_t j = 0; j < n; ++j) {
                    double gj = p.value.grad[j];
                    s.m[j] = float(beta1_ * s.m[j] + (1 - beta1_) * gj);
                    s.v[j] = float(beta2_ * s.v[j] + (1 - beta2_) * gj * gj);
                    double mhat = s.m[j] / c1;
                    double vhat = s.v[j] / c2;
                    p.value.data[j] -= float(lr_ * mhat / (std::sqrt(vhat) + eps_));
                }
            }
        }
        g.invalidate();
    }

private:
    struct State {
        std::vector<float> m, v;
    };

    Kind kind_ = Kind::Sgd;
    double lr_ = 0.01, momentum_ = 0.9;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
    std::vector<std::string> filter_;
    std::vector<State> state_;
};

// Plateau rule shared by early stopping and LR reduction: no improvement
// greater than min_delta for `patience` consecutive updates.
struct PlateauTracker {
    double min_delta = 1e-4;
    double best = -1e300;
    int since = 0;

    bool update(double value) {
        if (value > best + min_delta) {
            best = value;
            since = 0;
            return true;
        }
        ++since;
        return false;
    }
};

}  // namespace protosal

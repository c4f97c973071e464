#pragma once

#include <cmath>
#include <map>
#include <string>

#include "stable/matrix.hpp"

namespace stable {

enum class OptimizerKind { sgd, adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

inline OptimizerKind optimizer_from(const std::string& s) {
    if (s == "sgd") return OptimizerKind::sgd;
    if (s == "adam") return OptimizerKind::adam;
    fail(ErrorKind::config, "unknown optimizer '" + s + "'");
}

// Per-tensor optimizer state keyed by parameter name. One instance per
// training run; never shared across concurrent runs.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {
        if (lr <= 0.0) fail(ErrorKind::config, "learning rate must be positive");
    }

    void step(std::map<std::string, Matrix>& params, const std::map<std::string, Matrix>& grads) {
        if (kind_ == OptimizerKind::sgd) {
            for (const auto& [name, g] : grads) add_inplace(params.at(name), g, -lr_);
            return;
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (const auto& [name, g] : grads) {
            Matrix& p = params.at(name);
            Matrix& m = state(m_, name, p);
            Matrix& v = state(v_, name, p);
            for (size_t i = 0; i < p.data.size(); ++i) {
                m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * g.data[i];
                v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
                const double mhat = m.data[i] / bc1;
                const double vhat = v.data[i] / bc2;
                p.data[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    Matrix& state(std::map<std::string, Matrix>& store, const std::string& name, const Matrix& like) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Matrix(like.rows, like.cols)).first;
        return it->second;
    }

    OptimizerKind kind_;
    double lr_;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long t_ = 0;
    std::map<std::string, Matrix> m_, v_;
};

}  // namespace stable

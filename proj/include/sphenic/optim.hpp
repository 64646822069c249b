#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "error.hpp"
#include "matrix.hpp"
#include "rng.hpp"

namespace sphenic {

// Named, ordered parameter collection. Order is fixed at construction and
// shared by optimizer state and checkpoints.
using ParamSet = std::vector<std::pair<std::string, DenseMatrix>>;

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig cfg;
    std::size_t step = 0;
    std::vector<DenseMatrix> m;
    std::vector<DenseMatrix> v;
};

inline void adam_step(ParamSet& params, const std::vector<DenseMatrix>& grads, AdamState& st) {
    if (grads.size() != params.size())
        throw DimensionError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                             std::to_string(params.size()) + " parameters");
    if (st.m.empty()) {
        for (const auto& [name, p] : params) {
            st.m.emplace_back(p.rows(), p.cols());
            st.v.emplace_back(p.rows(), p.cols());
        }
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (!params[k].second.same_shape(grads[k]))
            throw DimensionError("adam_step: gradient shape " + grads[k].shape_str() +
                                 " for parameter " + params[k].first + " of shape " +
                                 params[k].second.shape_str());
        if (!grads[k].all_finite())
            throw TrainError("adam_step: non-finite gradient for parameter " + params[k].first);
    }
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.cfg.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.cfg.beta2, static_cast<double>(st.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k].second;
        const auto& g = grads[k];
        auto& m = st.m[k];
        auto& v = st.v[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = st.cfg.beta1 * m[i] + (1.0 - st.cfg.beta1) * g[i];
            v[i] = st.cfg.beta2 * v[i] + (1.0 - st.cfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
        }
    }
}

// Builds the loss node from tape inputs registered in ParamSet order.
using LossBuilder = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    std::size_t coords_checked = 0;
    bool pass = true;
};

// Central finite differences (relative step 1e-5) against tape gradients on a
// random sample of coordinates per parameter.
inline GradCheckReport grad_check(const LossBuilder& build, ParamSet params, double tolerance,
                                  Rng rng, std::size_t max_coords_per_param = 32) {
    Tape tape;
    std::vector<NodeId> ids;
    ids.reserve(params.size());
    for (auto& [name, p] : params) ids.push_back(tape.input(p, true));
    const NodeId loss = build(tape, ids);
    tape.backward(loss);
    std::vector<DenseMatrix> analytic;
    analytic.reserve(params.size());
    for (NodeId id : ids) analytic.push_back(tape.grad_copy(id));

    auto eval = [&](const ParamSet& ps) {
        Tape t;
        std::vector<NodeId> cids;
        cids.reserve(ps.size());
        for (const auto& [name, p] : ps) cids.push_back(t.constant(p));
        return t.value(build(t, cids))(0, 0);
    };

    GradCheckReport rep;
    for (std::size_t k = 0; k < params.size(); ++k) {
        const std::size_t sz = params[k].second.size();
        if (sz == 0) continue;
        std::vector<std::size_t> coords;
        if (sz <= max_coords_per_param) {
            for (std::size_t i = 0; i < sz; ++i) coords.push_back(i);
        } else {
            for (std::size_t c = 0; c < max_coords_per_param; ++c)
                coords.push_back(static_cast<std::size_t>(rng.uniform_int(sz)));
        }
        for (std::size_t i : coords) {
            const double theta = params[k].second[i];
            const double h = 1e-5 * std::max(1.0, std::fabs(theta));
            params[k].second[i] = theta + h;
            const double fp = eval(params);
            params[k].second[i] = theta - h;
            const double fm = eval(params);
            params[k].second[i] = theta;
            const double fd = (fp - fm) / (2.0 * h);
            const double ad = analytic[k][i];
            const double rel = std::fabs(ad - fd) / std::max({std::fabs(ad), std::fabs(fd), 1e-6});
            rep.coords_checked += 1;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = params[k].first;
                rep.worst_index = i;
            }
        }
    }
    rep.pass = rep.max_rel_err < tolerance;
    return rep;
}

} // namespace sphenic

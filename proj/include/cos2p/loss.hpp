// Training losses: cross entropy and the multi-exit self-distillation
// composite (teacher = deepest exit, temperature-softened KL, teacher logits
// detached so students cannot drag it).
#pragma once

#include <cmath>
#include <vector>

#include "cos2p/tensor.hpp"

namespace cos2p {

struct LossGrad {
    double value = 0.0;
    Tensor dlogits;  // (B, C), mean-over-batch convention
};

// Mean negative log-softmax of the true class.
inline LossGrad ce_loss(const Tensor& logits, const std::vector<int>& labels) {
    const size_t B = logits.rows(), C = logits.cols();
    require(labels.size() == B, "ce_loss: label count mismatch");
    Tensor p;
    softmax_rows(logits, p);
    LossGrad out;
    out.dlogits = Tensor{B, C};
    double total = 0.0;
    const double inv_b = 1.0 / static_cast<double>(B);
    for (size_t i = 0; i < B; ++i) {
        const int y = labels[i];
        require(y >= 0 && static_cast<size_t>(y) < C, "ce_loss: label out of range");
        const double* pi = p.row(i);
        total += -std::log(std::max(pi[y], 1e-300));
        double* gi = out.dlogits.row(i);
        for (size_t k = 0; k < C; ++k) gi[k] = pi[k] * inv_b;
        gi[y] -= inv_b;
    }
    out.value = total * inv_b;
    require(std::isfinite(out.value), "ce_loss: non-finite loss");
    return out;
}

// KL(student, teacher) = sum(softmax(zs/t) * ln(softmax(zs/t)/softmax(zt/t))) * t^2,
// mean over the batch. Gradient is w.r.t. the student logits only.
inline LossGrad kl_distill(const Tensor& student, const Tensor& teacher, double t,
                           bool reverse = false) {
    require(t > 0.0, "kl_distill: temperature must be positive");
    const Tensor& zs = reverse ? teacher : student;
    const Tensor& zt = reverse ? student : teacher;
    const size_t B = student.rows(), C = student.cols();
    require(teacher.rows() == B && teacher.cols() == C, "kl_distill: shape mismatch");

    Tensor ss{B, C}, st{B, C};
    for (size_t i = 0; i < B * C; ++i) {
        ss.data[i] = zs.data[i] / t;
        st.data[i] = zt.data[i] / t;
    }
    Tensor p, q;
    softmax_rows(ss, p);
    softmax_rows(st, q);

    LossGrad out;
    out.dlogits = Tensor{B, C};
    const double inv_b = 1.0 / static_cast<double>(B);
    double total = 0.0;
    for (size_t i = 0; i < B; ++i) {
        const double* pi = p.row(i);
        const double* qi = q.row(i);
        double kl = 0.0;
        for (size_t k = 0; k < C; ++k)
            kl += pi[k] * (std::log(std::max(pi[k], 1e-300)) - std::log(std::max(qi[k], 1e-300)));
        total += kl * t * t;
        if (!reverse) {
            // d/dz_j of t^2*KL: t * p_j * (ln p_j - ln q_j - KL)
            double* gi = out.dlogits.row(i);
            for (size_t k = 0; k < C; ++k) {
                const double diff =
                    std::log(std::max(pi[k], 1e-300)) - std::log(std::max(qi[k], 1e-300));
                gi[k] = t * pi[k] * (diff - kl) * inv_b;
            }
        } else {
            // Student appears as the KL's second argument: d/dz_j = -t * (p_j - q_j)
            double* gi = out.dlogits.row(i);
            for (size_t k = 0; k < C; ++k) gi[k] = -t * (pi[k] - qi[k]) * inv_b;
        }
    }
    out.value = total * inv_b;
    return out;
}

struct DistillResult {
    double value = 0.0;
    std::vector<Tensor> dlogits;  // per exit, same order as inputs
    std::vector<double> ce;       // per-exit CE, handy for logging
};

// Sum over exits of (1-lambda2)*CE + lambda2*KL(exit, teacher); the last exit
// is the teacher and its KL term is identically zero.
inline DistillResult self_distill_loss(const std::vector<const Tensor*>& exit_logits,
                                       const std::vector<int>& labels, double lambda2,
                                       double t, bool reverse_kl = false) {
    require(!exit_logits.empty(), "self_distill_loss: need at least one exit");
    const size_t n = exit_logits.size();
    const Tensor& teacher = *exit_logits[n - 1];
    DistillResult out;
    out.dlogits.resize(n);
    out.ce.resize(n);
    for (size_t i = 0; i < n; ++i) {
        LossGrad ce = ce_loss(*exit_logits[i], labels);
        out.ce[i] = ce.value;
        out.value += (1.0 - lambda2) * ce.value;
        Tensor g = ce.dlogits;
        for (double& v : g.data) v *= (1.0 - lambda2);
        if (i + 1 < n) {
            LossGrad kl = kl_distill(*exit_logits[i], teacher, t, reverse_kl);
            out.value += lambda2 * kl.value;
            for (size_t k = 0; k < g.size(); ++k) g.data[k] += lambda2 * kl.dlogits.data[k];
        }
        out.dlogits[i] = std::move(g);
    }
    require(std::isfinite(out.value), "self_distill_loss: non-finite loss");
    return out;
}

}  // namespace cos2p

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "xdelta/network.hpp"

namespace xdelta {

// Weights of the three-term training objective plus the inner correlation
// penalty strength. The inner lambda and lambda_fnc are distinct knobs.
struct LossWeights {
    double lambda_fnc = 1.0;
    double lambda_sr = 1e-4;
    double lambda = 0.5;  // inner strength of the cross term

    void validate() const {
        if (lambda_fnc < 0 || lambda_sr < 0 || lambda < 0)
            throw DomainError("loss weights must be non-negative");
    }
};

namespace loss_detail {

inline void check_batch(const Tensor& a, const Tensor& b, const char* what) {
    if (a.rank() != 2 || !a.same_shape(b)) throw StructuralError(std::string(what) + ": shape mismatch");
    if (a.dim(0) == 0) throw DomainError(std::string(what) + ": empty batch");
}

}  // namespace loss_detail

// Mean over examples of the squared l2 distance between fused and base
// feature rows.
inline double mse_loss(const Tensor& fused, const Tensor& base) {
    loss_detail::check_batch(fused, base, "mse_loss");
    const long N = fused.dim(0);
    double total = 0;
    for (long i = 0; i < fused.size(); ++i) {
        double d = static_cast<double>(fused[static_cast<std::size_t>(i)]) -
                   base[static_cast<std::size_t>(i)];
        total += d * d;
    }
    return total / static_cast<double>(N);
}

// d mse / d fused; the gradient w.r.t. base is its negative.
inline Tensor mse_loss_grad_fused(const Tensor& fused, const Tensor& base) {
    loss_detail::check_batch(fused, base, "mse_loss");
    const long N = fused.dim(0);
    Tensor g(fused.shape());
    for (long i = 0; i < fused.size(); ++i)
        g[static_cast<std::size_t>(i)] =
            2.0f / static_cast<float>(N) *
            (fused[static_cast<std::size_t>(i)] - base[static_cast<std::size_t>(i)]);
    return g;
}

// Feature-wise negative correlation:
//   (2 lambda / N) sum_i <F_E - F_fused, F_delta - F_fused>
// + (1 / 2N) sum_i (|F_delta - F_B|^2 + |F_E - F_B|^2)
inline double fnc_loss(const Tensor& fe, const Tensor& fdelta, const Tensor& fused,
                       const Tensor& fbase, double lambda) {
    loss_detail::check_batch(fe, fdelta, "fnc_loss");
    loss_detail::check_batch(fused, fbase, "fnc_loss");
    if (!fe.same_shape(fused)) throw StructuralError("fnc_loss: shape mismatch");
    const long N = fe.dim(0);
    double cross = 0, dist = 0;
    for (long i = 0; i < fe.size(); ++i) {
        std::size_t k = static_cast<std::size_t>(i);
        double de = static_cast<double>(fe[k]) - fused[k];
        double dd = static_cast<double>(fdelta[k]) - fused[k];
        cross += de * dd;
        double eb = static_cast<double>(fe[k]) - fbase[k];
        double db = static_cast<double>(fdelta[k]) - fbase[k];
        dist += db * db + eb * eb;
    }
    return 2.0 * lambda / static_cast<double>(N) * cross + dist / (2.0 * static_cast<double>(N));
}

struct FncGrads {
    Tensor d_fe, d_fdelta, d_fused, d_fbase;
};

// Gradients treating the four batches as independent inputs.
inline FncGrads fnc_loss_grads(const Tensor& fe, const Tensor& fdelta, const Tensor& fused,
                               const Tensor& fbase, double lambda) {
    loss_detail::check_batch(fe, fdelta, "fnc_loss");
    const long N = fe.dim(0);
    FncGrads g{Tensor(fe.shape()), Tensor(fe.shape()), Tensor(fe.shape()), Tensor(fe.shape())};
    const double cl = 2.0 * lambda / static_cast<double>(N);
    const double dl = 1.0 / static_cast<double>(N);
    for (long i = 0; i < fe.size(); ++i) {
        std::size_t k = static_cast<std::size_t>(i);
        double de = static_cast<double>(fe[k]) - fused[k];
        double dd = static_cast<double>(fdelta[k]) - fused[k];
        double eb = static_cast<double>(fe[k]) - fbase[k];
        double db = static_cast<double>(fdelta[k]) - fbase[k];
        g.d_fe[k] = static_cast<float>(cl * dd + dl * eb);
        g.d_fdelta[k] = static_cast<float>(cl * de + dl * db);
        g.d_fused[k] = static_cast<float>(-cl * (de + dd));
        g.d_fbase[k] = static_cast<float>(-dl * (eb + db));
    }
    return g;
}

// Group lasso over conv weights: per layer, the sum of l2 norms of filter
// slices (by output channel) plus channel slices (by input channel).
inline double sr_loss_conv_tensor(const Tensor& W) {
    if (W.rank() != 4) throw StructuralError("sr_loss expects conv weights of rank 4");
    const long co = W.dim(0), ci = W.dim(1), kk = W.dim(2) * W.dim(3);
    double total = 0;
    for (long f = 0; f < co; ++f) {
        double s = 0;
        const float* p = W.data() + f * ci * kk;
        for (long i = 0; i < ci * kk; ++i) s += static_cast<double>(p[i]) * p[i];
        total += std::sqrt(s);
    }
    for (long c = 0; c < ci; ++c) {
        double s = 0;
        for (long f = 0; f < co; ++f) {
            const float* p = W.data() + (f * ci + c) * kk;
            for (long i = 0; i < kk; ++i) s += static_cast<double>(p[i]) * p[i];
        }
        total += std::sqrt(s);
    }
    return total;
}

inline void sr_loss_grad_conv_tensor(const Tensor& W, Tensor& grad, double scale) {
    const long co = W.dim(0), ci = W.dim(1), kk = W.dim(2) * W.dim(3);
    std::vector<double> fnorm(static_cast<std::size_t>(co), 0.0);
    std::vector<double> cnorm(static_cast<std::size_t>(ci), 0.0);
    for (long f = 0; f < co; ++f) {
        double s = 0;
        const float* p = W.data() + f * ci * kk;
        for (long i = 0; i < ci * kk; ++i) s += static_cast<double>(p[i]) * p[i];
        fnorm[static_cast<std::size_t>(f)] = std::sqrt(s);
    }
    for (long c = 0; c < ci; ++c) {
        double s = 0;
        for (long f = 0; f < co; ++f) {
            const float* p = W.data() + (f * ci + c) * kk;
            for (long i = 0; i < kk; ++i) s += static_cast<double>(p[i]) * p[i];
        }
        cnorm[static_cast<std::size_t>(c)] = std::sqrt(s);
    }
    for (long f = 0; f < co; ++f)
        for (long c = 0; c < ci; ++c)
            for (long i = 0; i < kk; ++i) {
                std::size_t k = static_cast<std::size_t>((f * ci + c) * kk + i);
                double w = W[k];
                double g = 0;
                if (fnorm[static_cast<std::size_t>(f)] > 0) g += w / fnorm[static_cast<std::size_t>(f)];
                if (cnorm[static_cast<std::size_t>(c)] > 0) g += w / cnorm[static_cast<std::size_t>(c)];
                grad[k] += static_cast<float>(scale * g);
            }
}

// Total over the named conv weight tensors of a parameter store.
inline double sr_loss(const ParamStore& ps, const std::vector<std::string>& conv_weight_names) {
    double total = 0;
    for (const auto& name : conv_weight_names) total += sr_loss_conv_tensor(ps.param(name));
    return total;
}

inline double total_loss(double mse, double fnc, double sr, const LossWeights& w) {
    w.validate();
    return mse + w.lambda_fnc * fnc + w.lambda_sr * sr;
}

// Pearson correlation over all (example, dimension) pairs of the deviations
// of F_E and F_delta from a reference feature batch.
inline double correlation_score(const Tensor& fe, const Tensor& fdelta, const Tensor& reference) {
    loss_detail::check_batch(fe, fdelta, "correlation_score");
    if (!fe.same_shape(reference)) throw StructuralError("correlation_score: shape mismatch");
    const long n = fe.size();
    double ma = 0, mb = 0;
    for (long i = 0; i < n; ++i) {
        std::size_t k = static_cast<std::size_t>(i);
        ma += static_cast<double>(fe[k]) - reference[k];
        mb += static_cast<double>(fdelta[k]) - reference[k];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0, saa = 0, sbb = 0;
    for (long i = 0; i < n; ++i) {
        std::size_t k = static_cast<std::size_t>(i);
        double a = (static_cast<double>(fe[k]) - reference[k]) - ma;
        double b = (static_cast<double>(fdelta[k]) - reference[k]) - mb;
        sab += a * b;
        saa += a * a;
        sbb += b * b;
    }
    if (saa <= 0 || sbb <= 0) throw UndefinedScoreError("zero-variance deviations");
    return sab / std::sqrt(saa * sbb);
}

}  // namespace xdelta

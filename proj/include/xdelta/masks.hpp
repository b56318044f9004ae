#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "xdelta/common.hpp"
#include "xdelta/network.hpp"
#include "xdelta/rng.hpp"

namespace xdelta {

// Structured 0/1 mask over a prunable layer. Zeros cover whole units — conv
// filters (output channels) or linear rows — never scattered scalars. The
// unit flags are the source of truth; the expanded weight mask and the bias
// mask are derived views.
struct BinaryMask {
    double declared_sparsity = 0.0;        // the zeta this mask realizes
    std::vector<std::uint8_t> unit_keep;   // per structural unit, 1 = kept

    long unit_count() const { return static_cast<long>(unit_keep.size()); }
    long zero_count() const {
        long z = 0;
        for (auto k : unit_keep)
            if (!k) ++z;
        return z;
    }
    long kept_count() const { return unit_count() - zero_count(); }

    // Expands to a 0/1 tensor congruent with the layer weight tensor.
    Tensor expand(const std::vector<long>& weight_shape) const {
        Tensor m(weight_shape);
        if (weight_shape.empty() || weight_shape[0] != unit_count())
            throw StructuralError("mask unit count does not match weight tensor");
        long per_unit = m.size() / unit_count();
        for (long u = 0; u < unit_count(); ++u) {
            float v = unit_keep[static_cast<std::size_t>(u)] ? 1.0f : 0.0f;
            for (long i = 0; i < per_unit; ++i) m[static_cast<std::size_t>(u * per_unit + i)] = v;
        }
        return m;
    }
};

inline long zero_units_for(double zeta, long unit_count) {
    if (zeta < 0.0 || zeta >= 1.0) throw DomainError("sparsity rate must lie in [0,1)");
    return round_half_up(zeta * static_cast<double>(unit_count));
}

// Per-unit l2 norms; a unit is the leading-dimension slice of the weights.
inline std::vector<double> unit_l2_norms(const Tensor& weights) {
    if (weights.rank() < 2) throw StructuralError("prunable weights must have rank >= 2");
    long units = weights.dim(0);
    long per_unit = weights.size() / units;
    std::vector<double> norms(static_cast<std::size_t>(units));
    for (long u = 0; u < units; ++u) {
        double s = 0;
        const float* p = weights.data() + u * per_unit;
        for (long i = 0; i < per_unit; ++i) s += static_cast<double>(p[i]) * p[i];
        norms[static_cast<std::size_t>(u)] = std::sqrt(s);
    }
    return norms;
}

// Zeros exactly round(zeta * U) units with the smallest l2 norms; ties keep
// the lowest index first in the zero set.
inline BinaryMask generate_mask_l2(const Tensor& weights, double zeta) {
    BinaryMask mask;
    mask.declared_sparsity = zeta;
    auto norms = unit_l2_norms(weights);
    long units = static_cast<long>(norms.size());
    long zeros = zero_units_for(zeta, units);
    std::vector<long> order(static_cast<std::size_t>(units));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](long a, long b) {
        return norms[static_cast<std::size_t>(a)] < norms[static_cast<std::size_t>(b)];
    });
    mask.unit_keep.assign(static_cast<std::size_t>(units), 1);
    for (long i = 0; i < zeros; ++i) mask.unit_keep[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 0;
    return mask;
}

// Uniformly random choice of zeroed units; deterministic per seed.
inline BinaryMask generate_random_mask(long unit_count, double zeta, std::uint64_t seed) {
    BinaryMask mask;
    mask.declared_sparsity = zeta;
    long zeros = zero_units_for(zeta, unit_count);
    std::vector<long> order(static_cast<std::size_t>(unit_count));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    rng.shuffle(order);
    mask.unit_keep.assign(static_cast<std::size_t>(unit_count), 1);
    for (long i = 0; i < zeros; ++i) mask.unit_keep[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 0;
    return mask;
}

inline BinaryMask generate_random_mask(const Tensor& weights, double zeta, std::uint64_t seed) {
    return generate_random_mask(weights.dim(0), zeta, seed);
}

// Elementwise product with an expanded mask tensor.
inline Tensor apply_mask(const Tensor& weights, const Tensor& mask) {
    if (!weights.same_shape(mask)) throw StructuralError("mask shape does not match weights");
    Tensor out = weights;
    for (long i = 0; i < out.size(); ++i) out[static_cast<std::size_t>(i)] *= mask[static_cast<std::size_t>(i)];
    return out;
}

// Applies a structured mask in place to a layer's weights and bias. Masked
// units lose their bias as well, so the unit is truly inert.
inline void apply_unit_mask(Tensor& weights, Tensor* bias, const BinaryMask& mask) {
    long units = weights.dim(0);
    if (units != mask.unit_count()) throw StructuralError("mask unit count mismatch");
    long per_unit = weights.size() / units;
    for (long u = 0; u < units; ++u) {
        if (mask.unit_keep[static_cast<std::size_t>(u)]) continue;
        float* p = weights.data() + u * per_unit;
        std::fill(p, p + per_unit, 0.0f);
        if (bias) (*bias)[static_cast<std::size_t>(u)] = 0.0f;
    }
}

// Zeroes gradient entries of masked units; used as a train-time hook so
// masked weights receive exactly zero update.
inline void gate_unit_grads(ParamStore& ps, const std::string& layer_name, const BinaryMask& mask) {
    auto wit = ps.grads.find(layer_name + ".weight");
    if (wit != ps.grads.end()) {
        Tensor& g = wit->second;
        long per_unit = g.size() / mask.unit_count();
        for (long u = 0; u < mask.unit_count(); ++u) {
            if (mask.unit_keep[static_cast<std::size_t>(u)]) continue;
            float* p = g.data() + u * per_unit;
            std::fill(p, p + per_unit, 0.0f);
        }
    }
    auto bit = ps.grads.find(layer_name + ".bias");
    if (bit != ps.grads.end()) {
        Tensor& g = bit->second;
        for (long u = 0; u < mask.unit_count(); ++u)
            if (!mask.unit_keep[static_cast<std::size_t>(u)]) g[static_cast<std::size_t>(u)] = 0.0f;
    }
}

}  // namespace xdelta

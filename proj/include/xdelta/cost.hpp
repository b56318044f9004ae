#pragma once

#include "xdelta/layers.hpp"
#include "xdelta/network.hpp"

namespace xdelta {

// Per-layer (or whole-network) cost triple. MACs follow the fvcore
// convention: one multiply-add counts once, pooling/activation count zero.
// mem_access_cost models one forward pass as weight reads + input reads +
// output writes.
struct CostProfile {
    long param_count = 0;
    long mac_count = 0;
    long mem_access_cost = 0;

    CostProfile& operator+=(const CostProfile& o) {
        param_count += o.param_count;
        mac_count += o.mac_count;
        mem_access_cost += o.mem_access_cost;
        return *this;
    }
};

inline long layer_mac_count(const LayerSpec& L) {
    switch (L.kind) {
        case LayerKind::Conv:
            return L.kernel * L.kernel * L.in_channels * L.out_channels * L.out_h * L.out_w;
        case LayerKind::Linear:
            return L.in_features * L.out_features;
        case LayerKind::SeBlock: {
            long mid = L.in_c / L.se_reduction;
            return L.in_c * mid + mid * L.in_c;  // the two gate linears
        }
        case LayerKind::Pool:
        case LayerKind::Activation:
        case LayerKind::Norm:
        case LayerKind::SkipMerge:
            return 0;
    }
    return 0;
}

inline CostProfile layer_cost(const LayerSpec& L) {
    CostProfile c;
    c.param_count = L.param_count();
    c.mac_count = layer_mac_count(L);
    long in = L.input_elems();
    long out = L.output_elems();
    if (in == 0 && out == 0 && c.param_count == 0) {
        c.mem_access_cost = 0;  // identity/empty layer
    } else {
        c.mem_access_cost = c.param_count + in + out;
    }
    return c;
}

// Total scalar weight count including biases.
inline long count_params(const NetworkSpec& net) {
    long total = 0;
    for (const LayerSpec& L : net.layers) total += L.param_count();
    return total;
}

// Multiply-accumulate operations for one example. Requires a finalized spec
// whose input shape matches `input_shape`.
inline long count_macs(const NetworkSpec& net, const std::vector<long>& input_shape) {
    if (net.input_shape != input_shape)
        throw StructuralError("count_macs: input shape does not match network");
    long total = 0;
    for (const LayerSpec& L : net.layers) total += layer_mac_count(L);
    return total;
}

inline long count_macs(const NetworkSpec& net) { return count_macs(net, net.input_shape); }

// Scalar reads + writes for one forward pass of a single layer.
inline long estimate_mem_access(const LayerSpec& L) { return layer_cost(L).mem_access_cost; }

inline CostProfile network_cost(const NetworkSpec& net) {
    CostProfile total;
    for (const LayerSpec& L : net.layers) total += layer_cost(L);
    return total;
}

}  // namespace xdelta

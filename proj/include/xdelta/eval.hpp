#pragma once

#include <vector>

#include "xdelta/dataset.hpp"
#include "xdelta/network.hpp"

namespace xdelta {

// Ties broken toward the lowest index so results never depend on phase of moon.
inline long argmax_row(const Tensor& logits, long row) {
    long best = 0;
    float bv = logits.at2(row, 0);
    for (long k = 1; k < logits.dim(1); ++k)
        if (logits.at2(row, k) > bv) {
            bv = logits.at2(row, k);
            best = k;
        }
    return best;
}

inline std::vector<long> predict_labels(const NetworkSpec& net, const LabeledDataset& data,
                                        long batch_size = 128) {
    std::vector<long> preds;
    preds.reserve(data.size());
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
        std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < end; ++i) idx.push_back(i);
        Tensor logits = Runtime::forward(net, make_batch(data, idx), nullptr);
        for (long n = 0; n < logits.dim(0); ++n) preds.push_back(argmax_row(logits, n));
    }
    return preds;
}

// Top-1 accuracy. Deterministic for fixed weights and data, and invariant to
// dataset order by construction (per-image argmax, counted).
inline double evaluate_accuracy(const NetworkSpec& net, const LabeledDataset& data,
                                long batch_size = 128) {
    if (data.size() == 0) throw DomainError("evaluate_accuracy on empty dataset");
    if (net.class_count() != data.class_count())
        throw StructuralError("network output dimension does not match class count");
    std::vector<long> preds = predict_labels(net, data, batch_size);
    long correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == data.labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

struct PairVerdict {
    double base_accuracy = 0;
    double edge_accuracy = 0;
    double gap = 0;
    bool compatible = false;
};

// A base/edge pair is workable when the base leads by at least ten points on
// the test split (boundary inclusive).
inline PairVerdict validate_pair(const NetworkSpec& base, const NetworkSpec& edge,
                                 const LabeledDataset& test_data, double min_gap = 0.10) {
    if (base.class_count() != edge.class_count())
        throw StructuralError("base/edge class counts differ");
    if (base.input_shape != edge.input_shape)
        throw StructuralError("base/edge input shapes differ");
    PairVerdict v;
    v.base_accuracy = evaluate_accuracy(base, test_data);
    v.edge_accuracy = evaluate_accuracy(edge, test_data);
    v.gap = v.base_accuracy - v.edge_accuracy;
    v.compatible = v.gap >= min_gap;
    return v;
}

}  // namespace xdelta

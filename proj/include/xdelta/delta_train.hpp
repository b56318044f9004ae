#pragma once

#include <cmath>
#include <vector>

#include "xdelta/delta.hpp"
#include "xdelta/eval.hpp"
#include "xdelta/losses.hpp"
#include "xdelta/train.hpp"

namespace xdelta {

struct DeltaTrainConfig {
    long epochs = 10;
    long batch_size = 64;
    double lr = 0.001;
    double momentum = 0.9;
    double lr_decay = 0.95;
    long eval_every = 0;  // 0 = only after the final epoch
    LossWeights weights;
};

struct DeltaEpochRow {
    long epoch = 0;
    double mse = 0, fnc = 0, sr = 0, total = 0;
    double fused_acc = -1, edge_acc = -1;  // -1 when not evaluated this epoch
};

struct TrainingRun {
    std::vector<DeltaEpochRow> rows;
    double final_fused_acc = -1;
    double final_edge_acc = -1;
    double correlation = 0;  // on the edge-wrong/base-right eval subset
    bool correlation_defined = false;
};

inline Tensor flatten_features(const Tensor& t) {
    if (t.rank() == 2) return t;
    long n = t.dim(0);
    return t.reshaped({n, t.size() / n});
}

// Fusion feature views for a batch of images under frozen endpoints.
inline FusionFeatures collect_fusion_features(const DeltaNetwork& delta, const NetworkSpec& base,
                                              const NetworkSpec& edge, const Tensor& images) {
    FusionFeatures f;
    f.f_base = flatten_features(Runtime::forward_features(base, images));
    Tensor edge_map = Runtime::forward_features(edge, images);
    DeltaNetwork::Cache cache;
    f.f_edge = delta.adapt_edge(edge_map, &cache);
    f.f_delta = delta.delta_features(images, f.f_edge, &cache);
    f.f_fused = fuse_features(f.f_edge, f.f_delta);
    f.check();
    return f;
}

// Accuracy of the fused path: mean of edge and delta features through the
// frozen base classifier head.
inline double evaluate_fused_accuracy(const DeltaNetwork& delta, const NetworkSpec& base,
                                      const NetworkSpec& edge, const LabeledDataset& data,
                                      long batch_size = 128) {
    if (data.size() == 0) throw DomainError("evaluate_fused_accuracy on empty dataset");
    long correct = 0;
    for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
        std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < end; ++i) idx.push_back(i);
        Tensor batch = make_batch(data, idx);
        Tensor edge_map = Runtime::forward_features(edge, batch);
        DeltaNetwork::Cache cache;
        Tensor fe = delta.adapt_edge(edge_map, &cache);
        Tensor fdelta = delta.delta_features(batch, fe, &cache);
        Tensor logits = fuse_and_classify(fe, fdelta, base);
        for (long n = 0; n < logits.dim(0); ++n)
            if (argmax_row(logits, n) == data.labels[idx[static_cast<std::size_t>(n)]]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

// Pearson score of edge/delta deviations on the subset the analysis cares
// about: images the edge model gets wrong and the base model gets right.
// Deviations are taken against the base features; measuring against the
// exact elementwise mean would pin the score at -1 for any inputs.
inline double fusion_correlation(const DeltaNetwork& delta, const NetworkSpec& base,
                                 const NetworkSpec& edge, const LabeledDataset& data,
                                 const std::vector<std::size_t>& subset) {
    if (subset.empty()) throw DomainError("correlation subset empty");
    Tensor batch = make_batch(data, subset);
    FusionFeatures f = collect_fusion_features(delta, base, edge, batch);
    return correlation_score(f.f_edge, f.f_delta, f.f_base);
}

// Indices misclassified by the edge model but correct under the base model.
inline std::vector<std::size_t> edge_wrong_base_right(const NetworkSpec& base,
                                                      const NetworkSpec& edge,
                                                      const LabeledDataset& data) {
    auto pb = predict_labels(base, data);
    auto pe = predict_labels(edge, data);
    std::vector<std::size_t> subset;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (pb[i] == data.labels[i] && pe[i] != data.labels[i]) subset.push_back(i);
    return subset;
}

// Trains the delta network against frozen endpoints with the three-term
// objective. Only the delta-owned store is updated; the endpoint checksums
// are verified before and after.
inline TrainingRun train_delta(DeltaNetwork& delta, const NetworkSpec& base,
                               const NetworkSpec& edge, const LabeledDataset& train_data,
                               const LabeledDataset& eval_data, const DeltaTrainConfig& cfg,
                               Rng& rng) {
    cfg.weights.validate();
    const std::uint64_t base_ck = base.params->checksum();
    const std::uint64_t edge_ck = edge.params->checksum();

    TrainingRun run;
    Sgd opt;
    auto conv_names = delta.conv_weight_names();
    std::vector<std::size_t> order(train_data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    double lr = cfg.lr;

    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        DeltaEpochRow row;
        row.epoch = epoch;
        long batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                          order.begin() + static_cast<long>(end));
            Tensor batch = make_batch(train_data, idx);

            Tensor f_base = flatten_features(Runtime::forward_features(base, batch));
            Tensor edge_map = Runtime::forward_features(edge, batch);
            DeltaNetwork::Cache cache;
            Tensor fe = delta.adapt_edge(edge_map, &cache);
            Tensor fdelta = delta.delta_features(batch, fe, &cache);
            Tensor fused = fuse_features(fe, fdelta);

            double l_mse = mse_loss(fused, f_base);
            double l_fnc = fnc_loss(fe, fdelta, fused, f_base, cfg.weights.lambda);
            double l_sr = sr_loss(*delta.store(), conv_names);
            double total = total_loss(l_mse, l_fnc, l_sr, cfg.weights);
            if (!std::isfinite(total)) throw TrainingError("delta training diverged");

            Tensor d_fused = mse_loss_grad_fused(fused, f_base);
            FncGrads fg = fnc_loss_grads(fe, fdelta, fused, f_base, cfg.weights.lambda);
            Tensor d_fe(fe.shape()), d_fdelta(fdelta.shape());
            const float lf = static_cast<float>(cfg.weights.lambda_fnc);
            for (long i = 0; i < fe.size(); ++i) {
                std::size_t k = static_cast<std::size_t>(i);
                float df = d_fused[k] + lf * fg.d_fused[k];
                d_fe[k] = lf * fg.d_fe[k] + 0.5f * df;
                d_fdelta[k] = lf * fg.d_fdelta[k] + 0.5f * df;
            }
            delta.store()->zero_grads();
            delta.backward(cache, d_fdelta, d_fe);
            for (const auto& name : conv_names)
                sr_loss_grad_conv_tensor(delta.store()->param(name), delta.store()->grad(name),
                                         cfg.weights.lambda_sr);
            opt.step(*delta.store(), lr, cfg.momentum);

            row.mse += l_mse;
            row.fnc += l_fnc;
            row.sr += l_sr;
            row.total += total;
            ++batches;
        }
        if (batches > 0) {
            row.mse /= batches;
            row.fnc /= batches;
            row.sr /= batches;
            row.total /= batches;
        }
        bool eval_now = (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) ||
                        epoch + 1 == cfg.epochs;
        if (eval_now && eval_data.size() > 0) {
            row.fused_acc = evaluate_fused_accuracy(delta, base, edge, eval_data);
            row.edge_acc = evaluate_accuracy(edge, eval_data);
        }
        run.rows.push_back(row);
        lr *= cfg.lr_decay;
    }

    if (base.params->checksum() != base_ck || edge.params->checksum() != edge_ck)
        throw ConsistencyError("frozen endpoint parameters changed during delta training");

    if (!run.rows.empty()) {
        run.final_fused_acc = run.rows.back().fused_acc;
        run.final_edge_acc = run.rows.back().edge_acc;
    }
    if (eval_data.size() > 0) {
        auto subset = edge_wrong_base_right(base, edge, eval_data);
        if (!subset.empty()) {
            try {
                run.correlation = fusion_correlation(delta, base, edge, eval_data, subset);
                run.correlation_defined = true;
            } catch (const UndefinedScoreError&) {
                run.correlation_defined = false;
            }
        }
    }
    return run;
}

}  // namespace xdelta

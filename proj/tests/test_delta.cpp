#include <catch2/catch_amalgamated.hpp>

#include "xdelta/delta.hpp"
#include "xdelta/delta_train.hpp"
#include "xdelta/models.hpp"
#include "xdelta/synthetic.hpp"

using namespace xdelta;

namespace {

// small base -> trivial gamma table -> truncated subgraph
SubgraphSpec make_subgraph(Rng& rng, double zeta = 0.25) {
    NetworkSpec base = conv4_net(4, 10);
    base.init_params(rng);
    std::vector<ExtendedNetwork::GammaRecord> table;
    for (const auto& L : base.layers)
        if (L.prunable()) table.push_back({L.name, {zeta, zeta + 0.1}, {1.0, 0.0}});
    SubgraphSpec sg = extract_subgraph(base, table);
    SubgraphSpec probe = sg;
    probe.head_removed = true;
    probe.truncation_point = probe.net.split_index;
    CostProfile c = subgraph_cost(probe);
    return truncate_tail(sg, TailBudget{c.param_count, c.mac_count});
}

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// independent scalar-loop oracle for the se refiner
Tensor se_oracle(const Tensor& map, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                 const Tensor& b2) {
    const long C = map.dim(0), H = map.dim(1), W = map.dim(2);
    const long M = w1.dim(0);
    std::vector<double> z(static_cast<std::size_t>(C), 0.0);
    for (long c = 0; c < C; ++c) {
        for (long i = 0; i < H * W; ++i) z[static_cast<std::size_t>(c)] += map[static_cast<std::size_t>(c * H * W + i)];
        z[static_cast<std::size_t>(c)] /= static_cast<double>(H * W);
    }
    std::vector<double> h(static_cast<std::size_t>(M), 0.0);
    for (long m = 0; m < M; ++m) {
        double s = b1[static_cast<std::size_t>(m)];
        for (long c = 0; c < C; ++c) s += static_cast<double>(w1[static_cast<std::size_t>(m * C + c)]) * z[static_cast<std::size_t>(c)];
        h[static_cast<std::size_t>(m)] = std::max(0.0, s);
    }
    Tensor out(map.shape());
    for (long c = 0; c < C; ++c) {
        double s = b2[static_cast<std::size_t>(c)];
        for (long m = 0; m < M; ++m) s += static_cast<double>(w2[static_cast<std::size_t>(c * M + m)]) * h[static_cast<std::size_t>(m)];
        double gate = sigmoid_d(s);
        for (long i = 0; i < H * W; ++i) {
            double x = map[static_cast<std::size_t>(c * H * W + i)];
            out[static_cast<std::size_t>(c * H * W + i)] = static_cast<float>(x + x * gate);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("se_refine matches the scalar oracle and its degenerate gates") {
    Rng rng(61);
    const long C = 4, H = 2, W = 2, M = 1;
    Tensor map({C, H, W});
    map.fill_normal(rng, 0, 1);
    Tensor w1({M, C}), b1({M}), w2({C, M}), b2({C});

    SECTION("gate pushed to zero leaves the input (skip path)") {
        b2.fill(-50.0f);
        Tensor out = se_refine(map, w1, b1, w2, b2, 4);
        for (long i = 0; i < map.size(); ++i)
            REQUIRE_THAT(out[static_cast<std::size_t>(i)],
                         Catch::Matchers::WithinAbs(map[static_cast<std::size_t>(i)], 1e-6));
    }

    SECTION("gate forced to one doubles the input") {
        b2.fill(50.0f);
        Tensor out = se_refine(map, w1, b1, w2, b2, 4);
        for (long i = 0; i < map.size(); ++i)
            REQUIRE_THAT(out[static_cast<std::size_t>(i)],
                         Catch::Matchers::WithinAbs(2.0f * map[static_cast<std::size_t>(i)], 1e-5));
    }

    SECTION("random small gate matches the oracle within 1e-6") {
        w1.fill_normal(rng, 0, 0.3f);
        b1.fill_normal(rng, 0, 0.1f);
        w2.fill_normal(rng, 0, 0.3f);
        b2.fill_normal(rng, 0, 0.1f);
        Tensor out = se_refine(map, w1, b1, w2, b2, 4);
        Tensor expect = se_oracle(map, w1, b1, w2, b2);
        for (long i = 0; i < map.size(); ++i)
            REQUIRE_THAT(out[static_cast<std::size_t>(i)],
                         Catch::Matchers::WithinAbs(expect[static_cast<std::size_t>(i)], 1e-6));
    }

    SECTION("channel count below the reduction ratio is a config error") {
        CHECK_THROWS_AS(se_refine(map, w1, b1, w2, b2, 8), ConfigError);
    }
}

TEST_CASE("global_avg_pool basics") {
    Tensor constant({3, 2, 2});
    constant.fill(0.7f);
    Tensor v = global_avg_pool(constant);
    for (long c = 0; c < 3; ++c)
        CHECK_THAT(v[static_cast<std::size_t>(c)], Catch::Matchers::WithinAbs(0.7f, 1e-7));

    Tensor single({2, 1, 1}, {3.0f, -1.0f});
    Tensor sv = global_avg_pool(single);
    CHECK(sv[0] == 3.0f);
    CHECK(sv[1] == -1.0f);

    Tensor ch({1, 2, 2}, {1, 2, 3, 4});
    CHECK_THAT(global_avg_pool(ch)[0], Catch::Matchers::WithinAbs(2.5f, 1e-7));
}

TEST_CASE("compacted subgraph computes the same function as the masked one") {
    Rng rng(71);
    NetworkSpec base = conv4_net(4, 10);
    base.init_params(rng);
    std::vector<ExtendedNetwork::GammaRecord> table;
    for (const auto& L : base.layers)
        if (L.prunable()) table.push_back({L.name, {0.25, 0.5}, {0.4, 0.6}});
    SubgraphSpec sg = extract_subgraph(base, table);
    SubgraphSpec trunc = truncate_tail(sg, TailBudget{count_params(base), count_macs(base)});
    NetworkSpec dense = compact_subgraph(trunc);

    Tensor x({2, 3, 32, 32});
    x.fill_normal(rng, 0, 1);
    Tensor masked_out = Runtime::forward(trunc.net, x, nullptr);
    Tensor dense_out = Runtime::forward(dense, x, nullptr);

    // surviving channels of the masked net must match the dense net exactly
    const LayerSpec& lastL = trunc.net.layers[trunc.net.layers.size() - 1];
    (void)lastL;
    const auto& mask = trunc.masks.at("conv3");
    long kept_i = 0;
    for (long u = 0; u < mask.unit_count(); ++u) {
        if (!mask.unit_keep[static_cast<std::size_t>(u)]) continue;
        for (long n = 0; n < 2; ++n)
            for (long i = 0; i < masked_out.dim(2) * masked_out.dim(3); ++i) {
                float a = masked_out[static_cast<std::size_t>(
                    (n * masked_out.dim(1) + u) * masked_out.dim(2) * masked_out.dim(3) + i)];
                float b = dense_out[static_cast<std::size_t>(
                    (n * dense_out.dim(1) + kept_i) * dense_out.dim(2) * dense_out.dim(3) + i)];
                REQUIRE_THAT(a, Catch::Matchers::WithinAbs(b, 1e-5));
            }
        ++kept_i;
    }
    CHECK(count_params(dense) < count_params(base));
}

TEST_CASE("delta feature path: adapters, resizer, independence") {
    Rng rng(81);
    SubgraphSpec sg = make_subgraph(rng);
    DeltaBuildConfig dcfg;
    DeltaNetwork delta = DeltaNetwork::build(sg, 16, 24, dcfg, rng);

    SECTION("edge adapter with identity projection passes features through") {
        Tensor& w = delta.store()->param("edge_adapter.weight");
        w.fill(0);
        for (long i = 0; i < std::min(w.dim(0), w.dim(1)); ++i)
            w[static_cast<std::size_t>(i * w.dim(1) + i)] = 1.0f;
        Tensor edge_map({2, 16, 1, 1});
        edge_map.fill_normal(rng, 0, 1);
        Tensor fe = delta.adapt_edge(edge_map, nullptr);
        for (long n = 0; n < 2; ++n)
            for (long c = 0; c < 16; ++c)
                REQUIRE_THAT(fe.at2(n, c),
                             Catch::Matchers::WithinAbs(edge_map[static_cast<std::size_t>(n * 16 + c)], 1e-6));
    }

    SECTION("zero adapter weights give the zero batch") {
        delta.store()->param("edge_adapter.weight").fill(0);
        delta.store()->param("edge_adapter.bias").fill(0);
        Tensor edge_map({3, 16, 2, 2});
        edge_map.fill_normal(rng, 0, 1);
        Tensor fe = delta.adapt_edge(edge_map, nullptr);
        CHECK(fe.abs_sum() == 0.0);
    }

    SECTION("adapter matches a dense matmul oracle") {
        Tensor edge_map({2, 16, 1, 1});
        edge_map.fill_normal(rng, 0, 1);
        Tensor fe = delta.adapt_edge(edge_map, nullptr);
        const Tensor& w = delta.store()->param("edge_adapter.weight");
        const Tensor& b = delta.store()->param("edge_adapter.bias");
        for (long n = 0; n < 2; ++n)
            for (long o = 0; o < fe.dim(1); ++o) {
                double s = b[static_cast<std::size_t>(o)];
                for (long c = 0; c < 16; ++c)
                    s += static_cast<double>(w[static_cast<std::size_t>(o * 16 + c)]) *
                         edge_map[static_cast<std::size_t>(n * 16 + c)];
                REQUIRE_THAT(fe.at2(n, o), Catch::Matchers::WithinAbs(static_cast<float>(s), 1e-5));
            }
    }

    SECTION("zero resizer weights broadcast the bias") {
        delta.store()->param("resizer_fc0.weight").fill(0);
        delta.store()->param("resizer_fc0.bias").fill(0);
        delta.store()->param("resizer_fc1.weight").fill(0);
        Tensor& bias = delta.store()->param("resizer_fc1.bias");
        bias.fill_normal(rng, 0, 1);
        Tensor x({3, 3, 32, 32});
        x.fill_normal(rng, 0, 1);
        Tensor edge_map({3, 16, 1, 1});
        edge_map.fill_normal(rng, 0, 1);
        Tensor fe = delta.adapt_edge(edge_map, nullptr);
        Tensor fdelta = delta.delta_features(x, fe, nullptr);
        for (long n = 0; n < 3; ++n)
            for (long j = 0; j < fdelta.dim(1); ++j)
                REQUIRE(fdelta.at2(n, j) == bias[static_cast<std::size_t>(j)]);
    }

    SECTION("each example's delta feature is independent of its batch") {
        Tensor big({8, 3, 32, 32});
        big.fill_normal(rng, 0, 1);
        Tensor edge_map({8, 16, 1, 1});
        edge_map.fill_normal(rng, 0, 1);
        Tensor fe = delta.adapt_edge(edge_map, nullptr);
        Tensor all = delta.delta_features(big, fe, nullptr);

        Tensor one({1, 3, 32, 32});
        std::copy_n(big.data() + 5 * 3 * 32 * 32, 3 * 32 * 32, one.data());
        Tensor fe_one({1, fe.dim(1)});
        std::copy_n(fe.data() + 5 * fe.dim(1), fe.dim(1), fe_one.data());
        Tensor solo = delta.delta_features(one, fe_one, nullptr);
        // no cross-example coupling; row values agree to matmul-kernel rounding
        for (long j = 0; j < all.dim(1); ++j)
            REQUIRE_THAT(solo.at2(0, j),
                         Catch::Matchers::WithinRel(all.at2(5, j), 1e-5f) ||
                             Catch::Matchers::WithinAbs(all.at2(5, j), 1e-6f));
    }

    SECTION("delta feature matches the composed stage oracle") {
        Tensor x({1, 3, 32, 32});
        x.fill_normal(rng, 0, 1);
        Tensor edge_map({1, 16, 1, 1});
        edge_map.fill_normal(rng, 0, 1);
        DeltaNetwork::Cache cache;
        Tensor fe = delta.adapt_edge(edge_map, &cache);
        Tensor fdelta = delta.delta_features(x, fe, &cache);

        // oracle over the fusion stages, driven by the trunk's conv output
        const auto& layers = delta.trunk().layers;
        std::size_t se_idx = layers.size() - 3;
        const Tensor& conv_out = cache.trunk_trace.outputs[se_idx - 1];
        Tensor map = conv_out.reshaped({conv_out.dim(1), conv_out.dim(2), conv_out.dim(3)});
        Tensor refined = se_oracle(map, delta.store()->param("refiner.fc1.weight"),
                                   delta.store()->param("refiner.fc1.bias"),
                                   delta.store()->param("refiner.fc2.weight"),
                                   delta.store()->param("refiner.fc2.bias"));
        Tensor pooled = global_avg_pool(refined);
        const Tensor& rw = delta.store()->param("reduce.weight");
        const Tensor& rb = delta.store()->param("reduce.bias");
        std::vector<double> s(static_cast<std::size_t>(delta.reduced_dim()));
        for (long o = 0; o < delta.reduced_dim(); ++o) {
            double acc = rb[static_cast<std::size_t>(o)];
            for (long c = 0; c < pooled.size(); ++c)
                acc += static_cast<double>(rw[static_cast<std::size_t>(o * pooled.size() + c)]) *
                       pooled[static_cast<std::size_t>(c)];
            s[static_cast<std::size_t>(o)] = acc;
        }
        std::vector<double> cat;
        for (double v : s) cat.push_back(v);
        for (long j = 0; j < fe.dim(1); ++j) cat.push_back(fe.at2(0, j));
        const Tensor& w0 = delta.store()->param("resizer_fc0.weight");
        const Tensor& b0 = delta.store()->param("resizer_fc0.bias");
        const Tensor& w1 = delta.store()->param("resizer_fc1.weight");
        const Tensor& b1 = delta.store()->param("resizer_fc1.bias");
        std::vector<double> hid(static_cast<std::size_t>(delta.hidden_dim()));
        for (long m = 0; m < delta.hidden_dim(); ++m) {
            double acc = b0[static_cast<std::size_t>(m)];
            for (std::size_t c = 0; c < cat.size(); ++c)
                acc += static_cast<double>(w0[static_cast<std::size_t>(m * static_cast<long>(cat.size()) + static_cast<long>(c))]) * cat[c];
            hid[static_cast<std::size_t>(m)] = std::max(0.0, acc);
        }
        for (long o = 0; o < fdelta.dim(1); ++o) {
            double acc = b1[static_cast<std::size_t>(o)];
            for (long m = 0; m < delta.hidden_dim(); ++m)
                acc += static_cast<double>(w1[static_cast<std::size_t>(o * delta.hidden_dim() + m)]) *
                       hid[static_cast<std::size_t>(m)];
            REQUIRE_THAT(fdelta.at2(0, o), Catch::Matchers::WithinAbs(static_cast<float>(acc), 2e-5));
        }
    }
}

TEST_CASE("fusion and classification through the frozen head") {
    Rng rng(91);
    NetworkSpec base = conv4_net(4, 10);
    base.init_params(rng);
    const long d_f = base.feature_dim();

    Tensor fe({2, d_f});
    fe.fill_normal(rng, 0, 1);

    SECTION("identical features fuse to themselves") {
        Tensor fused = fuse_features(fe, fe);
        for (long i = 0; i < fe.size(); ++i)
            REQUIRE(fused[static_cast<std::size_t>(i)] == fe[static_cast<std::size_t>(i)]);
    }

    SECTION("opposite features fuse to the bias path") {
        Tensor neg = fe;
        neg *= -1.0f;
        Tensor logits = fuse_and_classify(fe, neg, base);
        Tensor zero({2, d_f});
        Tensor expect = Runtime::forward_head(base, zero);
        for (long i = 0; i < logits.size(); ++i)
            REQUIRE_THAT(logits[static_cast<std::size_t>(i)],
                         Catch::Matchers::WithinAbs(expect[static_cast<std::size_t>(i)], 1e-6));
    }

    SECTION("random fusion matches an independent dense-layer oracle") {
        Tensor fd_({2, d_f});
        fd_.fill_normal(rng, 0, 1);
        Tensor logits = fuse_and_classify(fe, fd_, base);
        // oracle: mean, then the head's linear layer scalar loops
        const Tensor& w = base.params->param("fc0.weight");
        const Tensor& b = base.params->param("fc0.bias");
        for (long n = 0; n < 2; ++n)
            for (long o = 0; o < w.dim(0); ++o) {
                double acc = b[static_cast<std::size_t>(o)];
                for (long c = 0; c < d_f; ++c)
                    acc += static_cast<double>(w[static_cast<std::size_t>(o * d_f + c)]) * 0.5 *
                           (fe.at2(n, c) + fd_.at2(n, c));
                REQUIRE_THAT(logits.at2(n, o), Catch::Matchers::WithinAbs(static_cast<float>(acc), 1e-5));
            }
    }

    SECTION("head weights stay untouched") {
        std::uint64_t ck = base.params->checksum();
        Tensor fd_({2, d_f});
        fd_.fill_normal(rng, 0, 1);
        fuse_and_classify(fe, fd_, base);
        CHECK(base.params->checksum() == ck);
    }
}

TEST_CASE("delta training freezes endpoints and records the component trace") {
    Rng rng(101);
    SyntheticConfig sc;
    sc.count = 80;
    sc.seed = 5;
    LabeledDataset data = generate_synthetic(sc);

    NetworkSpec base = conv4_net(4, 10);
    base.init_params(rng);
    NetworkSpec edge = vgg8_style(2, 10);
    Rng rng2(102);
    edge.init_params(rng2);

    SubgraphSpec sg = make_subgraph(rng);
    DeltaBuildConfig dcfg;
    DeltaNetwork delta = DeltaNetwork::build(sg, edge.feature_dim(), base.feature_dim(), dcfg, rng);

    std::uint64_t base_ck = base.params->checksum();
    std::uint64_t edge_ck = edge.params->checksum();
    std::uint64_t delta_ck = delta.store()->checksum();

    DeltaTrainConfig cfg;
    cfg.epochs = 0;
    Rng tr(5);
    TrainingRun none = train_delta(delta, base, edge, data, data, cfg, tr);
    CHECK(none.rows.empty());
    CHECK(delta.store()->checksum() == delta_ck);  // zero epochs leave it be

    cfg.epochs = 2;
    cfg.batch_size = 20;
    TrainingRun run = train_delta(delta, base, edge, data, data, cfg, tr);
    REQUIRE(run.rows.size() == 2);
    CHECK(base.params->checksum() == base_ck);
    CHECK(edge.params->checksum() == edge_ck);
    CHECK(delta.store()->checksum() != delta_ck);
    for (const auto& row : run.rows) {
        double recombined = total_loss(row.mse, row.fnc, row.sr, cfg.weights);
        REQUIRE_THAT(row.total, Catch::Matchers::WithinAbs(recombined, 1e-6));
    }
    CHECK(run.rows.back().fused_acc >= 0.0);
}

TEST_CASE("delta cost includes refiner, adapter and resizer") {
    Rng rng(111);
    SubgraphSpec sg = make_subgraph(rng);
    DeltaBuildConfig dcfg;
    DeltaNetwork delta = DeltaNetwork::build(sg, 16, 24, dcfg, rng);
    CostProfile c = delta.cost();
    long expected = count_params(delta.trunk());  // trunk already has refiner+reduce
    expected += 24 * 16 + 24;                     // adapter
    expected += delta.hidden_dim() * (delta.reduced_dim() + 24) + delta.hidden_dim();
    expected += 24 * delta.hidden_dim() + 24;
    CHECK(c.param_count == expected);
    // recount oracle over the serialized store
    long recount = 0;
    for (const auto& [k, t] : delta.store()->params) recount += t.size();
    CHECK(c.param_count == recount);
}

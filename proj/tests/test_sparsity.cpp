#include <catch2/catch_amalgamated.hpp>

#include "xdelta/models.hpp"
#include "xdelta/sparsity.hpp"
#include "xdelta/synthetic.hpp"

using namespace xdelta;

namespace {

NetworkSpec two_conv_net(Rng& rng) {
    NetworkSpec net;
    net.input_shape = {3, 8, 8};
    net.layers = {
        conv_spec("conv0", 3, 8, 3, 1, 1), relu_spec("relu0"), maxpool_spec("pool0"),
        conv_spec("conv1", 8, 8, 3, 1, 1), relu_spec("relu1"), global_avg_pool_spec("gap"),
        linear_spec("fc", 8, 4),
    };
    net.split_index = 6;
    net.finalize();
    net.init_params(rng);
    return net;
}

}  // namespace

TEST_CASE("normalize_coefficients is abs-then-divide") {
    auto out = normalize_coefficients({-0.2, 0.6, 0.2});
    REQUIRE(out.size() == 3);
    CHECK_THAT(out[0], Catch::Matchers::WithinAbs(0.2, 1e-12));
    CHECK_THAT(out[1], Catch::Matchers::WithinAbs(0.6, 1e-12));
    CHECK_THAT(out[2], Catch::Matchers::WithinAbs(0.2, 1e-12));

    CHECK(normalize_coefficients({1.0}) == std::vector<double>{1.0});
    auto half = normalize_coefficients({0.5, 0.5});
    CHECK_THAT(half[0], Catch::Matchers::WithinAbs(0.5, 1e-12));
    CHECK_THROWS_AS(normalize_coefficients({0.0, 0.0}), DomainError);
}

TEST_CASE("normalization always lands on the simplex") {
    Rng rng(21);
    for (int t = 0; t < 200; ++t) {
        std::vector<double> raw(static_cast<std::size_t>(rng.uniform_int(1, 6)));
        bool nonzero = false;
        for (auto& v : raw) {
            v = rng.uniform(-2.0, 2.0);
            if (v != 0) nonzero = true;
        }
        if (!nonzero) raw[0] = 0.3;
        auto g = normalize_coefficients(raw);
        double sum = 0;
        for (double v : g) {
            REQUIRE(v >= 0.0);
            sum += v;
        }
        REQUIRE_THAT(sum, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
}

TEST_CASE("effective_sparsity is the convex combination") {
    CHECK_THAT(effective_sparsity({1, 0, 0}, {0.125, 0.25, 0.375}),
               Catch::Matchers::WithinAbs(0.125, 1e-12));
    CHECK_THAT(effective_sparsity({0.5, 0.5}, {0.25, 0.75}),
               Catch::Matchers::WithinAbs(0.5, 1e-12));
    // independent loop oracle
    std::vector<double> g = {0.2, 0.3, 0.5}, z = {0.125, 0.25, 0.5};
    double oracle = 0;
    for (std::size_t i = 0; i < g.size(); ++i) oracle += g[i] * z[i];
    CHECK_THAT(effective_sparsity(g, z), Catch::Matchers::WithinAbs(oracle, 1e-12));
    CHECK_THAT(oracle, Catch::Matchers::WithinAbs(0.35, 1e-12));

    CHECK_THROWS_AS(effective_sparsity({1.0}, {0.1, 0.2}), DomainError);
    CHECK_THROWS_AS(effective_sparsity({0.7, 0.7}, {0.1, 0.2}), DomainError);
}

TEST_CASE("effective sparsity stays within the candidate range") {
    Rng rng(4);
    std::vector<double> z = {0.125, 0.375, 0.625, 0.875};
    for (int t = 0; t < 100; ++t) {
        std::vector<double> raw(z.size());
        for (auto& v : raw) v = rng.uniform(-1.0, 1.0);
        raw[0] += 0.01;
        auto g = normalize_coefficients(raw);
        double eff = effective_sparsity(g, z);
        REQUIRE(eff >= z.front() - 1e-12);
        REQUIRE(eff <= z.back() + 1e-12);
    }
}

TEST_CASE("extraction_loss matches the closed form") {
    // one layer, two branches
    std::vector<ExtendedLayer> layers(1);
    ExtendedBranch b0, b1;
    b0.gamma = 0.6;
    b0.mem_access = 10;
    b0.macs = 100;
    b1.gamma = 0.4;
    b1.mem_access = 5;
    b1.macs = 50;
    layers[0].branches = {b0, b1};

    SparsitySearchConfig cfg;
    cfg.lambda0 = 0.5;
    cfg.lambda1 = 1.0;
    cfg.alpha = 1e-5;
    cfg.beta = 1e-7;
    CHECK_THAT(extraction_loss(1.0, layers, cfg), Catch::Matchers::WithinAbs(0.500088, 1e-9));

    cfg.lambda1 = 0.0;
    CHECK_THAT(extraction_loss(1.0, layers, cfg), Catch::Matchers::WithinAbs(0.5, 1e-12));

    for (auto& b : layers[0].branches) b.gamma = 0.0;
    cfg.lambda1 = 1.0;
    CHECK_THAT(extraction_loss(2.0, layers, cfg), Catch::Matchers::WithinAbs(1.0, 1e-12));
}

TEST_CASE("extended network structure and combination") {
    Rng rng(11);
    NetworkSpec base = two_conv_net(rng);
    SparsityCandidates cands;

    SECTION("K=3 on a two-conv net gives 3 coefficients per prunable layer") {
        ExtendedNetwork ext(base, cands, 3);
        CHECK(ext.coefficient_count() == 9);  // conv0, conv1, fc
        long prunable = 0;
        for (const auto& L : base.layers)
            if (L.prunable()) ++prunable;
        CHECK(ext.coefficient_count() == prunable * 3);
    }

    SECTION("branch masks realize their declared rates exactly") {
        ExtendedNetwork ext(base, cands, 3);
        for (const auto& el : ext.layers())
            for (const auto& br : el.branches)
                CHECK(br.mask.zero_count() ==
                      round_half_up(br.rate * static_cast<double>(br.mask.unit_count())));
    }

    SECTION("K exceeding distinct candidates is a config error") {
        CHECK_THROWS_AS(ExtendedNetwork(base, cands, 8), ConfigError);
    }

    SECTION("branch outputs mix linearly") {
        ExtendedNetwork ext(base, cands, 2);
        Tensor x({2, 3, 8, 8});
        x.fill_normal(rng, 0.0f, 1.0f);
        ExtendedNetwork::Trace tr;
        Tensor out = ext.forward(x, &tr);
        CHECK(out.dim(1) == 4);
        // with gamma doubled on every branch the logits double layer by layer
        // only for a single extended layer; instead check the direct identity
        // y = sum gamma_j y_j on the first extended layer's cache
        const auto& el = ext.layers()[0];
        const auto& branch_outs = tr.branch_outs[0];
        Tensor combined(branch_outs[0].shape());
        for (std::size_t j = 0; j < branch_outs.size(); ++j)
            for (long i = 0; i < combined.size(); ++i)
                combined[static_cast<std::size_t>(i)] +=
                    static_cast<float>(el.branches[j].gamma) *
                    branch_outs[j][static_cast<std::size_t>(i)];
        const Tensor& recorded = tr.base_trace.outputs[el.layer_index];
        for (long i = 0; i < combined.size(); ++i)
            REQUIRE_THAT(combined[static_cast<std::size_t>(i)],
                         Catch::Matchers::WithinAbs(recorded[static_cast<std::size_t>(i)], 1e-5));
    }

    SECTION("K=1 reduces to the singly-masked base") {
        SparsityCandidates one;
        one.conv_rates = {0.25};
        one.linear_rates = {0.25};
        ExtendedNetwork ext(base, one, 1);
        Tensor x({1, 3, 8, 8});
        x.fill_normal(rng, 0.0f, 1.0f);
        Tensor out_ext = ext.forward(x, nullptr);

        NetworkSpec masked = base;
        masked.params = std::make_shared<ParamStore>(*base.params);
        for (const auto& L : masked.layers) {
            if (!L.prunable()) continue;
            Tensor& W = masked.params->param(L.name + ".weight");
            Tensor& B = masked.params->param(L.name + ".bias");
            BinaryMask m = generate_mask_l2(W, 0.25);
            apply_unit_mask(W, &B, m);
        }
        Tensor out_masked = Runtime::forward(masked, x, nullptr);
        for (long i = 0; i < out_ext.size(); ++i)
            REQUIRE_THAT(out_ext[static_cast<std::size_t>(i)],
                         Catch::Matchers::WithinAbs(out_masked[static_cast<std::size_t>(i)], 1e-5));
    }
}

TEST_CASE("coefficient search trains only gammas and keeps weights frozen") {
    Rng rng(17);
    NetworkSpec base = two_conv_net(rng);
    SyntheticConfig sc;
    sc.count = 60;
    sc.seed = 2;
    LabeledDataset data = generate_synthetic(sc);
    // re-home the dataset to 8x8x3 inputs by cropping to match the toy net
    LabeledDataset small;
    small.height = 8;
    small.width = 8;
    small.channels = 3;
    small.norm = data.norm;
    small.class_names = {"a", "b", "c", "d"};
    for (std::size_t i = 0; i < data.size(); ++i) {
        Tensor img({3, 8, 8});
        for (long c = 0; c < 3; ++c)
            for (long y = 0; y < 8; ++y)
                for (long x = 0; x < 8; ++x)
                    img[static_cast<std::size_t>((c * 8 + y) * 8 + x)] =
                        data.images[i][static_cast<std::size_t>((c * 32 + y) * 32 + x)];
        small.images.push_back(std::move(img));
        small.labels.push_back(data.labels[i] % 4);
    }
    small.segments.assign(small.size(), {});
    small.boxes.assign(small.size(), Box{});

    ExtendedNetwork ext(base, SparsityCandidates{}, 3);
    std::uint64_t before = base.params->checksum();
    auto gamma_before = ext.gamma_table();

    SparsitySearchConfig cfg;
    cfg.epochs = 0;
    Rng tr(3);
    train_sparsity_coefficients(ext, small, cfg, tr);
    auto gamma_after = ext.gamma_table();
    for (std::size_t i = 0; i < gamma_before.size(); ++i)
        CHECK(gamma_before[i].gammas == gamma_after[i].gammas);  // zero steps -> unchanged

    cfg.epochs = 2;
    cfg.batch_size = 16;
    train_sparsity_coefficients(ext, small, cfg, tr);
    CHECK(base.params->checksum() == before);  // base weights untouched
    // branch weights still equal masked base weights
    for (const auto& el : ext.layers()) {
        const LayerSpec& L = base.layers[el.layer_index];
        const Tensor& W = base.params->param(L.name + ".weight");
        for (const auto& br : el.branches) {
            Tensor expect = W;
            Tensor bias = base.params->param(L.name + ".bias");
            apply_unit_mask(expect, &bias, br.mask);
            for (long i = 0; i < expect.size(); ++i)
                REQUIRE(br.weights[static_cast<std::size_t>(i)] ==
                        expect[static_cast<std::size_t>(i)]);
        }
    }
    bool moved = false;
    for (std::size_t i = 0; i < gamma_after.size(); ++i)
        if (ext.gamma_table()[i].gammas != gamma_after[i].gammas) moved = true;
    (void)moved;  // gammas may move; the frozen checks above are the contract
}

TEST_CASE("extract_subgraph applies per-layer convex rates") {
    Rng rng(23);
    NetworkSpec base = two_conv_net(rng);

    SECTION("one-hot at zero rate reproduces the base") {
        std::vector<ExtendedNetwork::GammaRecord> table;
        for (const auto& L : base.layers)
            if (L.prunable()) table.push_back({L.name, {0.0, 0.5}, {1.0, 0.0}});
        SubgraphSpec sg = extract_subgraph(base, table);
        CHECK(sg.net.params->checksum() == base.params->checksum());
    }

    SECTION("symmetric gammas over {0.25, 0.75} mask at exactly 0.5") {
        std::vector<ExtendedNetwork::GammaRecord> table;
        for (const auto& L : base.layers)
            if (L.prunable()) table.push_back({L.name, {0.25, 0.75}, {0.5, 0.5}});
        SubgraphSpec sg = extract_subgraph(base, table);
        for (const auto& [name, mask] : sg.masks) {
            CHECK_THAT(sg.rates[name], Catch::Matchers::WithinAbs(0.5, 1e-12));
            CHECK(mask.zero_count() == round_half_up(0.5 * mask.unit_count()));
        }
        CHECK(subgraph_cost(sg).param_count <= count_params(base));
    }
}

TEST_CASE("truncate_tail removes stages deepest-first under a budget") {
    Rng rng(29);
    NetworkSpec base = conv4_net(4, 10);
    base.init_params(rng);
    std::vector<ExtendedNetwork::GammaRecord> table;
    for (const auto& L : base.layers)
        if (L.prunable()) table.push_back({L.name, {0.25, 0.75}, {0.5, 0.5}});
    SubgraphSpec sg = extract_subgraph(base, table);

    SubgraphSpec full = sg;
    full.head_removed = true;
    full.truncation_point = full.net.split_index;
    CostProfile extractor_cost = subgraph_cost(full);

    SECTION("roomy budget keeps every layer") {
        TailBudget b{extractor_cost.param_count + 1, extractor_cost.mac_count + 1};
        SubgraphSpec t = truncate_tail(sg, b);
        CHECK(t.truncation_point == sg.net.split_index);
        CHECK(t.head_removed);
    }

    SECTION("budget just under the full cost removes exactly the last stage") {
        // oracle: enumerate suffix cuts and find the first fitting one
        TailBudget b{extractor_cost.param_count - 1, extractor_cost.mac_count};
        SubgraphSpec t = truncate_tail(sg, b);
        std::vector<std::size_t> bounds;
        for (std::size_t i = 0; i < sg.net.split_index; ++i)
            if (sg.net.layers[i].kind == LayerKind::Pool) bounds.push_back(i + 1);
        std::size_t expect = 0;
        for (std::size_t s = bounds.size(); s-- > 0;) {
            SubgraphSpec probe = sg;
            probe.head_removed = true;
            probe.truncation_point = bounds[s];
            CostProfile c = subgraph_cost(probe);
            if (c.param_count <= b.max_params && c.mac_count <= b.max_macs) {
                expect = bounds[s];
                break;
            }
        }
        CHECK(t.truncation_point == expect);
        CHECK(t.truncation_point == bounds[bounds.size() - 2]);  // exactly one stage dropped
    }

    SECTION("an impossible budget is a budget error") {
        CHECK_THROWS_AS(truncate_tail(sg, TailBudget{1, 1}), BudgetError);
        CHECK_THROWS_AS(truncate_tail(sg, TailBudget{0, 100}), BudgetError);
    }
}

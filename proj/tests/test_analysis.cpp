#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "xdelta/cam.hpp"
#include "xdelta/regions.hpp"

using namespace xdelta;

namespace {

// 1-channel conv (3x3, pad 1) + relu + linear head to 2 classes on a 4x4 input
NetworkSpec toy_cam_net(Rng& rng) {
    NetworkSpec net;
    net.input_shape = {1, 4, 4};
    net.layers = {conv_spec("c", 1, 1, 3, 1, 1), relu_spec("a"), linear_spec("fc", 16, 2)};
    net.split_index = 2;
    net.finalize();
    net.init_params(rng);
    return net;
}

RegionSet rect_regions(long h, long w, long x0, long y0, long x1, long y1) {
    RegionSet rs;
    rs.h = h;
    rs.w = w;
    rs.threshold = 0.5;
    std::vector<std::uint8_t> comp(static_cast<std::size_t>(h * w), 0);
    for (long y = y0; y < y1; ++y)
        for (long x = x0; x < x1; ++x) comp[static_cast<std::size_t>(y * w + x)] = 1;
    rs.components.push_back(std::move(comp));
    return rs;
}

ActivationMap map_from(std::vector<float> v, long h, long w) {
    ActivationMap m;
    m.map = Tensor({h, w}, std::move(v));
    m.source = "edge";
    return m;
}

}  // namespace

TEST_CASE("activation maps stay in [0,1] and are deterministic") {
    Rng rng(7);
    NetworkSpec net = toy_cam_net(rng);
    Tensor img({1, 4, 4});
    img.fill_normal(rng, 0.3f, 1.0f);
    ActivationMap a = compute_cam(net, img, 0, "edge");
    ActivationMap b = compute_cam(net, img, 0, "edge");
    CHECK(a.map.max_value() <= 1.0f);
    CHECK(a.map.min_value() >= 0.0f);
    CHECK(std::memcmp(a.map.data(), b.map.data(),
                      sizeof(float) * static_cast<std::size_t>(a.map.size())) == 0);
    CHECK(a.map.dim(0) == 4);
    CHECK(a.map.dim(1) == 4);
}

TEST_CASE("single channel with a uniform positive head is a rectified copy") {
    Rng rng(9);
    NetworkSpec net = toy_cam_net(rng);
    net.params->param("fc.weight").fill(0.5f);  // identical positive weight everywhere
    net.params->param("fc.bias").fill(0.0f);
    Tensor img({1, 4, 4});
    img.fill_normal(rng, 0.2f, 1.0f);

    ForwardTrace trace;
    Runtime::forward(net, img.reshaped({1, 1, 4, 4}), &trace);
    const Tensor& act = trace.outputs[1];  // post-relu map

    ActivationMap cam = compute_cam(net, img, 1, "edge");
    // peak location of the activation is the peak of the map
    long best = 0;
    for (long i = 1; i < act.size(); ++i)
        if (act[static_cast<std::size_t>(i)] > act[static_cast<std::size_t>(best)]) best = i;
    CHECK(cam.map[static_cast<std::size_t>(best)] == 1.0f);
    // and the map is the min-max normalized activation
    float mx = act.max_value(), mn = act.min_value();
    for (long i = 0; i < act.size(); ++i) {
        float expect = (act[static_cast<std::size_t>(i)] - mn) / (mx - mn);
        REQUIRE_THAT(cam.map[static_cast<std::size_t>(i)],
                     Catch::Matchers::WithinAbs(expect, 1e-6f));
    }
}

TEST_CASE("toy map matches the hand-derived weighting within 1e-6") {
    Rng rng(11);
    NetworkSpec net = toy_cam_net(rng);
    Tensor img({1, 4, 4});
    img.fill_normal(rng, 0.0f, 1.0f);
    const long cls = 0;

    // oracle: scalar conv + relu, score gradient = head row, then the
    // exponential-score weighting formulas
    const Tensor& cw = net.params->param("c.weight");
    const Tensor& cb = net.params->param("c.bias");
    const Tensor& hw = net.params->param("fc.weight");
    double A[16];
    for (long y = 0; y < 4; ++y)
        for (long x = 0; x < 4; ++x) {
            double s = cb[0];
            for (long ky = -1; ky <= 1; ++ky)
                for (long kx = -1; kx <= 1; ++kx) {
                    long iy = y + ky, ix = x + kx;
                    if (iy < 0 || iy > 3 || ix < 0 || ix > 3) continue;
                    s += static_cast<double>(cw[static_cast<std::size_t>((ky + 1) * 3 + kx + 1)]) *
                         img[static_cast<std::size_t>(iy * 4 + ix)];
                }
            A[y * 4 + x] = std::max(0.0, s);
        }
    double asum = 0;
    for (double v : A) asum += v;
    double g[16];
    for (long i = 0; i < 16; ++i) {
        // d score / d A_i is the head weight, gated by nothing (A is post-relu)
        g[i] = hw[static_cast<std::size_t>(cls * 16 + i)];
    }
    double wsum = 0;
    for (long i = 0; i < 16; ++i) {
        double g2 = g[i] * g[i];
        double denom = 2.0 * g2 + asum * g2 * g[i];
        double alpha = denom != 0.0 ? g2 / denom : 0.0;
        if (g[i] > 0) wsum += alpha * g[i];
    }
    double M[16];
    double mx = -1e30, mn = 1e30;
    for (long i = 0; i < 16; ++i) {
        M[i] = std::max(0.0, wsum * A[i]);
        mx = std::max(mx, M[i]);
        mn = std::min(mn, M[i]);
    }

    ActivationMap cam = compute_cam(net, img, cls, "edge");
    for (long i = 0; i < 16; ++i) {
        double expect = (mx == 0.0) ? 0.0 : (mx == mn ? 1.0 : (M[i] - mn) / (mx - mn));
        REQUIRE_THAT(static_cast<double>(cam.map[static_cast<std::size_t>(i)]),
                     Catch::Matchers::WithinAbs(expect, 1e-6));
    }
}

TEST_CASE("constant feature maps give a uniform activation map") {
    Rng rng(13);
    NetworkSpec net = toy_cam_net(rng);
    net.params->param("c.weight").fill(0.0f);
    net.params->param("c.bias").fill(1.0f);  // conv output constant 1
    Tensor img({1, 4, 4});
    img.fill_normal(rng, 0.0f, 1.0f);
    ActivationMap cam = compute_cam(net, img, 0, "edge");
    float first = cam.map[0];
    for (long i = 0; i < cam.map.size(); ++i) REQUIRE(cam.map[static_cast<std::size_t>(i)] == first);
}

TEST_CASE("segment_regions splits the thresholded map into 4-connected parts") {
    SECTION("everything below threshold is empty") {
        RegionSet rs = segment_regions(map_from({0.1f, 0.2f, 0.3f, 0.05f}, 2, 2), 0.5);
        CHECK(rs.empty());
    }
    SECTION("everything at or above threshold is one region") {
        RegionSet rs = segment_regions(map_from({0.9f, 0.8f, 0.5f, 0.7f}, 2, 2), 0.5);
        REQUIRE(rs.components.size() == 1);
        CHECK(rs.union_pixels() == 4);
    }
    SECTION("diagonal pixels are not 4-connected") {
        RegionSet rs = segment_regions(map_from({0.9f, 0.1f, 0.2f, 0.8f}, 2, 2), 0.5);
        REQUIRE(rs.components.size() == 2);
        CHECK(rs.union_pixels() == 2);
    }
    SECTION("threshold domain") {
        CHECK_THROWS_AS(segment_regions(map_from({0.5f}, 1, 1), 0.0), DomainError);
        CHECK_THROWS_AS(segment_regions(map_from({0.5f}, 1, 1), 1.0), DomainError);
    }
    SECTION("raising the threshold never grows a region") {
        Rng rng(3);
        for (int t = 0; t < 30; ++t) {
            std::vector<float> v(64);
            for (auto& x : v) x = static_cast<float>(rng.uniform());
            ActivationMap m = map_from(v, 8, 8);
            long prev = 64 + 1;
            for (double tau : {0.2, 0.4, 0.6, 0.8}) {
                long now = segment_regions(m, tau).union_pixels();
                REQUIRE(now <= prev);
                prev = now;
            }
        }
    }
}

TEST_CASE("overlap_score is intersection over the delta union") {
    RegionSet a = rect_regions(8, 8, 0, 0, 4, 4);
    SECTION("identical unions score one") {
        CHECK(overlap_score(a, a) == 1.0);
    }
    SECTION("disjoint unions score zero") {
        RegionSet b = rect_regions(8, 8, 4, 4, 8, 8);
        CHECK(overlap_score(a, b) == 0.0);
    }
    SECTION("half-covered delta scores one half") {
        RegionSet delta = rect_regions(8, 8, 0, 0, 5, 2);  // 10 pixels
        RegionSet edge = rect_regions(8, 8, 0, 0, 5, 1);   // covers 5 of them
        CHECK(overlap_score(edge, delta) == 0.5);
    }
    SECTION("empty delta union is undefined") {
        RegionSet empty;
        empty.h = 8;
        empty.w = 8;
        CHECK_THROWS_AS(overlap_score(a, empty), UndefinedScoreError);
    }
    SECTION("matches brute-force pixel counting and is translation invariant") {
        Rng rng(19);
        for (int t = 0; t < 200; ++t) {
            long x0 = rng.uniform_int(0, 4), y0 = rng.uniform_int(0, 4);
            long x1 = x0 + rng.uniform_int(1, 3), y1 = y0 + rng.uniform_int(1, 3);
            long u0 = rng.uniform_int(0, 4), v0 = rng.uniform_int(0, 4);
            long u1 = u0 + rng.uniform_int(1, 3), v1 = v0 + rng.uniform_int(1, 3);
            RegionSet e = rect_regions(12, 12, x0, y0, x1, y1);
            RegionSet d = rect_regions(12, 12, u0, v0, u1, v1);
            auto ue = e.union_mask();
            auto ud = d.union_mask();
            long inter = 0, dn = 0;
            for (std::size_t i = 0; i < ud.size(); ++i) {
                if (ud[i]) ++dn;
                if (ud[i] && ue[i]) ++inter;
            }
            double expect = static_cast<double>(inter) / static_cast<double>(dn);
            REQUIRE(overlap_score(e, d) == expect);
            // translate both by (+2,+3)
            RegionSet e2 = rect_regions(16, 16, x0 + 2, y0 + 3, x1 + 2, y1 + 3);
            RegionSet d2 = rect_regions(16, 16, u0 + 2, v0 + 3, u1 + 2, v1 + 3);
            REQUIRE(overlap_score(e2, d2) == expect);
        }
    }
}

TEST_CASE("classic metrics over pixel unions") {
    RegionSet a = rect_regions(4, 4, 0, 0, 2, 2);
    ClassicMetrics same = classic_metrics(a, a);
    CHECK(same.jaccard == 1.0);
    CHECK(same.dice == 1.0);
    CHECK(same.overlap_coefficient == 1.0);

    RegionSet b = rect_regions(4, 4, 2, 2, 4, 4);
    ClassicMetrics dis = classic_metrics(a, b);
    CHECK(dis.jaccard == 0.0);
    CHECK(dis.dice == 0.0);
    CHECK(dis.overlap_coefficient == 0.0);

    // |A| = 4, |B| = 6, |A and B| = 2
    RegionSet A = rect_regions(4, 6, 0, 0, 4, 1);
    RegionSet B = rect_regions(4, 6, 2, 0, 5, 2);
    ClassicMetrics m = classic_metrics(A, B);
    CHECK_THAT(m.jaccard, Catch::Matchers::WithinAbs(0.25, 1e-12));
    CHECK_THAT(m.dice, Catch::Matchers::WithinAbs(0.4, 1e-12));
    CHECK_THAT(m.overlap_coefficient, Catch::Matchers::WithinAbs(0.5, 1e-12));

    RegionSet empty;
    empty.h = 4;
    empty.w = 4;
    CHECK_THROWS_AS(classic_metrics(empty, empty), UndefinedScoreError);
}

TEST_CASE("locality against the dilated object box") {
    Box box{2, 2, 4, 4};
    SECTION("fully inside is local") {
        CHECK(locality(rect_regions(10, 10, 3, 3, 5, 5), box) == Scope::Local);
    }
    SECTION("fully outside is global") {
        CHECK(locality(rect_regions(10, 10, 8, 8, 10, 10), box) == Scope::Global);
    }
    SECTION("60 percent inside with tau 0.5 is local") {
        // 10-pixel strip, 6 inside the box columns [2,6)
        RegionSet r = rect_regions(10, 10, 1, 3, 11 - 4, 3 + 10 / 7);  // x in [1,7): 6 columns
        // build precisely: one row y=3, x from 1..10 -> 10 pixels, inside x in [2,6) -> 4
        RegionSet strip;
        strip.h = 10;
        strip.w = 12;
        std::vector<std::uint8_t> comp(120, 0);
        for (long x = 0; x < 10; ++x) comp[static_cast<std::size_t>(3 * 12 + x)] = 1;
        strip.components.push_back(comp);
        // box dilated by 10%: x in [1.8, 6.2] covers pixel centers 2..5 -> wait,
        // centers at x+0.5: inside iff 1.8 <= x+0.5 <= 6.2 -> x in [2,5] -> 4 px.
        // use a wider box for the 60% case instead:
        Box wide{1, 0, 6, 10};  // centers 1.3..7.7 -> x in [1,7] -> 7 of 10 inside
        CHECK(locality(strip, wide) == Scope::Local);
        (void)r;
    }
    SECTION("missing box raises an annotation error") {
        CHECK_THROWS_AS(locality(rect_regions(10, 10, 0, 0, 2, 2), Box{}), AnnotationError);
    }
}

TEST_CASE("categorize_pair applies the overlap bands and scope") {
    Box box{2, 2, 6, 6};
    RegionSet inside = rect_regions(12, 12, 3, 3, 6, 6);

    SECTION("disjoint regions inside the box complement locally") {
        RegionSet edge = rect_regions(12, 12, 9, 9, 12, 12);
        CHECK(categorize_pair(edge, inside, box) == GeometricCategory::LocalComplement);
    }
    SECTION("high overlap inside the box enhances locally") {
        RegionSet edge = inside;
        CHECK(categorize_pair(edge, inside, box) == GeometricCategory::LocalEnhancement);
    }
    SECTION("disjoint regions outside the box complement globally") {
        RegionSet delta = rect_regions(12, 12, 9, 0, 12, 3);
        RegionSet edge = rect_regions(12, 12, 0, 9, 3, 12);
        CHECK(categorize_pair(edge, delta, box) == GeometricCategory::GlobalComplement);
    }
    SECTION("intermediate overlap is a mix") {
        RegionSet delta = rect_regions(12, 12, 3, 3, 6, 6);   // 9 px
        RegionSet edge = rect_regions(12, 12, 3, 3, 6, 4);    // covers 3 of 9
        CHECK(categorize_pair(edge, delta, box) == GeometricCategory::LocalMix);
    }
    SECTION("empty delta region maps to the dedicated category") {
        RegionSet empty;
        empty.h = 12;
        empty.w = 12;
        CHECK(categorize_pair(inside, empty, box) == GeometricCategory::NoDeltaRegion);
    }
}

TEST_CASE("semantic labels inherit by overlap share") {
    RegionSet delta = rect_regions(10, 10, 0, 0, 10, 1);  // row 0, 10 px

    SegmentAnnotation handle{"handle", std::vector<std::uint8_t>(100, 0)};
    for (long x = 0; x < 7; ++x) handle.mask[static_cast<std::size_t>(x)] = 1;
    SegmentAnnotation body{"body", std::vector<std::uint8_t>(100, 0)};
    for (long x = 7; x < 10; ++x) body.mask[static_cast<std::size_t>(x)] = 1;
    SegmentAnnotation far{"far", std::vector<std::uint8_t>(100, 0)};
    far.mask[99] = 1;

    auto labels = assign_semantic_labels(delta, {body, handle, far}, 0.2);
    REQUIRE(labels.size() == 2);
    CHECK(labels[0].label == "handle");
    CHECK_THAT(labels[0].fraction, Catch::Matchers::WithinAbs(0.7, 1e-12));
    CHECK(labels[1].label == "body");
    CHECK_THAT(labels[1].fraction, Catch::Matchers::WithinAbs(0.3, 1e-12));

    SECTION("fully contained delta inherits with fraction one") {
        SegmentAnnotation eye{"eye", std::vector<std::uint8_t>(100, 1)};
        auto l = assign_semantic_labels(delta, {eye}, 0.2);
        REQUIRE(l.size() == 1);
        CHECK(l[0].label == "eye");
        CHECK(l[0].fraction == 1.0);
    }
    SECTION("touching no segment yields no labels") {
        auto l = assign_semantic_labels(delta, {far}, 0.2);
        CHECK(l.empty());
    }
}

TEST_CASE("summarize tallies categories, mean overlaps and concepts") {
    std::vector<ExplanationRecord> records;
    Rng rng(23);
    // 30 synthetic records with known contents
    std::map<std::string, long> expect_counts;
    std::map<std::string, long> expect_concepts;
    for (int i = 0; i < 30; ++i) {
        ExplanationRecord r;
        r.image_id = "img" + std::to_string(i);
        r.category = all_categories()[static_cast<std::size_t>(i % 5)];
        r.overlap_defined = r.category != GeometricCategory::NoDeltaRegion;
        r.overlap = 0.1 * static_cast<double>(i % 5);
        if (i % 3 == 0) r.labels.push_back({"eye", 0.5});
        if (i % 2 == 0) r.labels.push_back({"wheel", 0.4});
        expect_counts[category_name(r.category)] += 1;
        if (i % 3 == 0) expect_concepts["eye"] += 1;
        if (i % 2 == 0) expect_concepts["wheel"] += 1;
        records.push_back(std::move(r));
    }
    AnalysisSummary s = summarize(records, 10);
    long total = 0;
    for (const auto& [cat, n] : s.category_counts) total += n;
    CHECK(total == 30);
    for (const auto& [cat, n] : expect_counts) CHECK(s.category_counts.at(cat) == n);
    REQUIRE(s.top_missed_concepts.size() == 2);
    CHECK(s.top_missed_concepts[0].name == "wheel");
    CHECK(s.top_missed_concepts[0].count == expect_concepts["wheel"]);
    CHECK(s.top_missed_concepts[1].name == "eye");

    CHECK_THROWS_AS(summarize({}, 10), DomainError);

    SECTION("single-category tallies") {
        std::vector<ExplanationRecord> one;
        for (int i = 0; i < 4; ++i) {
            ExplanationRecord r;
            r.category = GeometricCategory::LocalComplement;
            r.overlap_defined = true;
            r.overlap = 0.0;
            one.push_back(r);
        }
        AnalysisSummary ss = summarize(one, 10);
        CHECK(ss.category_counts.at("local_complement") == 4);
        CHECK(ss.category_counts.at("global_mix") == 0);
    }
}

TEST_CASE("proxy box wraps the largest base region") {
    RegionSet base;
    base.h = 10;
    base.w = 10;
    std::vector<std::uint8_t> small(100, 0), big(100, 0);
    small[0] = 1;
    for (long y = 4; y < 8; ++y)
        for (long x = 2; x < 7; ++x) big[static_cast<std::size_t>(y * 10 + x)] = 1;
    base.components = {small, big};
    Box box = proxy_box_from_base(base);
    CHECK(box.x == 2);
    CHECK(box.y == 4);
    CHECK(box.w == 5);
    CHECK(box.h == 4);
}

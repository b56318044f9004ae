#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "xdelta/cam.hpp"
#include "xdelta/dataset.hpp"

namespace xdelta {

// Disjoint 4-connected components of a thresholded activation map.
struct RegionSet {
    long h = 0, w = 0;
    double threshold = 0.0;
    std::vector<std::vector<std::uint8_t>> components;  // each h*w, 0/1

    std::vector<std::uint8_t> union_mask() const {
        std::vector<std::uint8_t> u(static_cast<std::size_t>(h * w), 0);
        for (const auto& c : components)
            for (std::size_t i = 0; i < c.size(); ++i)
                if (c[i]) u[i] = 1;
        return u;
    }

    long union_pixels() const {
        long n = 0;
        for (const auto& c : components)
            for (auto v : c)
                if (v) ++n;
        return n;  // components are disjoint by construction
    }

    bool empty() const { return components.empty(); }
};

enum class GeometricCategory {
    LocalComplement,
    LocalEnhancement,
    LocalMix,
    GlobalComplement,
    GlobalEnhancement,
    GlobalMix,
    NoDeltaRegion,
};

inline const char* category_name(GeometricCategory c) {
    switch (c) {
        case GeometricCategory::LocalComplement: return "local_complement";
        case GeometricCategory::LocalEnhancement: return "local_enhancement";
        case GeometricCategory::LocalMix: return "local_mix";
        case GeometricCategory::GlobalComplement: return "global_complement";
        case GeometricCategory::GlobalEnhancement: return "global_enhancement";
        case GeometricCategory::GlobalMix: return "global_mix";
        case GeometricCategory::NoDeltaRegion: return "no_delta_region";
    }
    return "?";
}

inline const std::array<GeometricCategory, 7>& all_categories() {
    static const std::array<GeometricCategory, 7> cats = {
        GeometricCategory::LocalComplement,  GeometricCategory::LocalEnhancement,
        GeometricCategory::LocalMix,         GeometricCategory::GlobalComplement,
        GeometricCategory::GlobalEnhancement, GeometricCategory::GlobalMix,
        GeometricCategory::NoDeltaRegion};
    return cats;
}

// 4-connected components of the super-level set {value >= tau}, discovered
// in row-major scan order.
inline RegionSet segment_regions(const ActivationMap& map, double tau) {
    if (tau <= 0.0 || tau >= 1.0) throw DomainError("segmentation threshold must lie in (0,1)");
    const long h = map.map.dim(0), w = map.map.dim(1);
    RegionSet rs;
    rs.h = h;
    rs.w = w;
    rs.threshold = tau;
    std::vector<std::uint8_t> in(static_cast<std::size_t>(h * w), 0);
    for (long i = 0; i < h * w; ++i)
        in[static_cast<std::size_t>(i)] = map.map[static_cast<std::size_t>(i)] >= tau ? 1 : 0;
    std::vector<std::uint8_t> seen(static_cast<std::size_t>(h * w), 0);
    std::vector<long> stack;
    for (long start = 0; start < h * w; ++start) {
        if (!in[static_cast<std::size_t>(start)] || seen[static_cast<std::size_t>(start)]) continue;
        std::vector<std::uint8_t> comp(static_cast<std::size_t>(h * w), 0);
        stack.assign(1, start);
        seen[static_cast<std::size_t>(start)] = 1;
        while (!stack.empty()) {
            long p = stack.back();
            stack.pop_back();
            comp[static_cast<std::size_t>(p)] = 1;
            long y = p / w, x = p % w;
            const long ns[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
            for (const auto& n : ns) {
                if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
                long q = n[0] * w + n[1];
                if (in[static_cast<std::size_t>(q)] && !seen[static_cast<std::size_t>(q)]) {
                    seen[static_cast<std::size_t>(q)] = 1;
                    stack.push_back(q);
                }
            }
        }
        rs.components.push_back(std::move(comp));
    }
    return rs;
}

// |edge union  delta union| / |delta union| in pixels.
inline double overlap_score(const RegionSet& edge, const RegionSet& delta) {
    auto ue = edge.union_mask();
    auto ud = delta.union_mask();
    long inter = 0, dsize = 0;
    for (std::size_t i = 0; i < ud.size(); ++i) {
        if (ud[i]) {
            ++dsize;
            if (i < ue.size() && ue[i]) ++inter;
        }
    }
    if (dsize == 0) throw UndefinedScoreError("delta region union empty");
    return static_cast<double>(inter) / static_cast<double>(dsize);
}

struct ClassicMetrics {
    double jaccard = 0, dice = 0, overlap_coefficient = 0;
};

inline ClassicMetrics classic_metrics(const RegionSet& a, const RegionSet& b) {
    auto ua = a.union_mask();
    auto ub = b.union_mask();
    long na = 0, nb = 0, inter = 0;
    for (std::size_t i = 0; i < ua.size(); ++i) {
        if (ua[i]) ++na;
        if (i < ub.size() && ub[i]) ++nb;
        if (ua[i] && i < ub.size() && ub[i]) ++inter;
    }
    if (na == 0 && nb == 0) throw UndefinedScoreError("both region unions empty");
    ClassicMetrics m;
    long uni = na + nb - inter;
    m.jaccard = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
    m.dice = (na + nb) > 0 ? 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb) : 0.0;
    long mn = std::min(na, nb);
    m.overlap_coefficient = mn > 0 ? static_cast<double>(inter) / static_cast<double>(mn) : 0.0;
    return m;
}

struct CategorizeConfig {
    double s_lo = 0.2;         // at or below: complement
    double s_hi = 0.7;         // at or above: enhancement
    double tau_loc = 0.5;      // fraction of pixels inside the box for "local"
    double box_dilation = 0.1; // widen the box by this fraction per axis
};

enum class Scope { Local, Global };

// Local means at least tau_loc of the region-union pixels fall inside the
// dilated object box.
inline Scope locality(const RegionSet& regions, const Box& box, const CategorizeConfig& cfg = {}) {
    if (!box.valid()) throw AnnotationError("object box unavailable");
    double dx = cfg.box_dilation * static_cast<double>(box.w) / 2.0;
    double dy = cfg.box_dilation * static_cast<double>(box.h) / 2.0;
    double x0 = static_cast<double>(box.x) - dx, x1 = static_cast<double>(box.x + box.w) + dx;
    double y0 = static_cast<double>(box.y) - dy, y1 = static_cast<double>(box.y + box.h) + dy;
    auto u = regions.union_mask();
    long total = 0, inside = 0;
    for (long y = 0; y < regions.h; ++y)
        for (long x = 0; x < regions.w; ++x) {
            if (!u[static_cast<std::size_t>(y * regions.w + x)]) continue;
            ++total;
            double cx = x + 0.5, cy = y + 0.5;
            if (cx >= x0 && cx <= x1 && cy >= y0 && cy <= y1) ++inside;
        }
    if (total == 0) return Scope::Global;
    return (static_cast<double>(inside) / static_cast<double>(total) >= cfg.tau_loc)
               ? Scope::Local
               : Scope::Global;
}

// Overlap band picks the interaction, locality of the delta regions picks the
// scope; an empty delta union short-circuits to NoDeltaRegion.
inline GeometricCategory categorize_pair(const RegionSet& edge, const RegionSet& delta,
                                         const Box& box, const CategorizeConfig& cfg = {}) {
    if (delta.union_pixels() == 0) return GeometricCategory::NoDeltaRegion;
    double s = overlap_score(edge, delta);
    Scope scope = locality(delta, box, cfg);
    if (s <= cfg.s_lo)
        return scope == Scope::Local ? GeometricCategory::LocalComplement
                                     : GeometricCategory::GlobalComplement;
    if (s >= cfg.s_hi)
        return scope == Scope::Local ? GeometricCategory::LocalEnhancement
                                     : GeometricCategory::GlobalEnhancement;
    return scope == Scope::Local ? GeometricCategory::LocalMix : GeometricCategory::GlobalMix;
}

struct SemanticLabel {
    std::string label;
    double fraction = 0;  // share of the delta union covered by this segment
};

// Inherits every annotated segment label whose overlap with the delta union
// exceeds tau_sem of that union; ordered by descending overlap share.
inline std::vector<SemanticLabel> assign_semantic_labels(
    const RegionSet& delta, const std::vector<SegmentAnnotation>& segments, double tau_sem = 0.2) {
    auto ud = delta.union_mask();
    long dsize = 0;
    for (auto v : ud)
        if (v) ++dsize;
    std::vector<SemanticLabel> out;
    if (dsize == 0) return out;
    for (const auto& seg : segments) {
        long inter = 0;
        for (std::size_t i = 0; i < ud.size() && i < seg.mask.size(); ++i)
            if (ud[i] && seg.mask[i]) ++inter;
        double frac = static_cast<double>(inter) / static_cast<double>(dsize);
        if (frac > tau_sem) out.push_back({seg.label, frac});
    }
    std::stable_sort(out.begin(), out.end(), [](const SemanticLabel& a, const SemanticLabel& b) {
        if (a.fraction != b.fraction) return a.fraction > b.fraction;
        return a.label < b.label;
    });
    return out;
}

// One analyzed image: exists only for images the edge model got wrong and the
// base model got right.
struct ExplanationRecord {
    std::string image_id;
    RegionSet edge_regions;
    RegionSet delta_regions;
    bool overlap_defined = false;
    double overlap = 0;
    GeometricCategory category = GeometricCategory::NoDeltaRegion;
    std::vector<SemanticLabel> labels;
    long edge_prediction = -1;
    long base_prediction = -1;
    long true_label = -1;
};

struct ConceptCount {
    std::string name;
    long count = 0;
};

struct AnalysisSummary {
    std::map<std::string, long> category_counts;          // every category key present
    std::map<std::string, double> mean_overlap;           // categories with defined scores
    std::vector<ConceptCount> top_missed_concepts;        // sorted desc, then lexicographic
    long record_count = 0;
};

inline AnalysisSummary summarize(const std::vector<ExplanationRecord>& records, long top_k = 10) {
    if (records.empty()) throw DomainError("summarize on empty record list");
    AnalysisSummary s;
    s.record_count = static_cast<long>(records.size());
    for (auto c : all_categories()) s.category_counts[category_name(c)] = 0;
    std::map<std::string, std::pair<double, long>> overlap_acc;
    std::map<std::string, long> concepts;
    for (const auto& r : records) {
        s.category_counts[category_name(r.category)] += 1;
        if (r.overlap_defined) {
            auto& acc = overlap_acc[category_name(r.category)];
            acc.first += r.overlap;
            acc.second += 1;
        }
        for (const auto& l : r.labels) concepts[l.label] += 1;
    }
    for (const auto& [cat, acc] : overlap_acc)
        s.mean_overlap[cat] = acc.first / static_cast<double>(acc.second);
    std::vector<ConceptCount> all;
    for (const auto& [name, count] : concepts) all.push_back({name, count});
    std::stable_sort(all.begin(), all.end(), [](const ConceptCount& a, const ConceptCount& b) {
        if (a.count != b.count) return a.count > b.count;
        return a.name < b.name;
    });
    if (static_cast<long>(all.size()) > top_k) all.resize(static_cast<std::size_t>(top_k));
    s.top_missed_concepts = std::move(all);
    return s;
}

// Object-box fallback when annotations are absent: the bounding box of the
// largest region of the base model's map.
inline Box proxy_box_from_base(const RegionSet& base_regions) {
    long best = -1, best_size = 0;
    for (std::size_t c = 0; c < base_regions.components.size(); ++c) {
        long size = 0;
        for (auto v : base_regions.components[c])
            if (v) ++size;
        if (size > best_size) {
            best_size = size;
            best = static_cast<long>(c);
        }
    }
    if (best < 0) return Box{};
    const auto& comp = base_regions.components[static_cast<std::size_t>(best)];
    long minx = base_regions.w, miny = base_regions.h, maxx = -1, maxy = -1;
    for (long y = 0; y < base_regions.h; ++y)
        for (long x = 0; x < base_regions.w; ++x)
            if (comp[static_cast<std::size_t>(y * base_regions.w + x)]) {
                minx = std::min(minx, x);
                maxx = std::max(maxx, x);
                miny = std::min(miny, y);
                maxy = std::max(maxy, y);
            }
    return Box{minx, miny, maxx - minx + 1, maxy - miny + 1};
}

}  // namespace xdelta

#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "xdelta/config.hpp"
#include "xdelta/regions.hpp"

namespace xdelta {

inline constexpr const char* kReportSchemaVersion = "1";

// Parameter and compute ratios of the delta model against the edge and base
// endpoints, plus the headline accuracy numbers.
struct RatioReport {
    double p_delta_edge = 0, f_delta_edge = 0;
    double p_delta_base = 0, f_delta_base = 0;
    long delta_params = 0, delta_macs = 0;
    long edge_params = 0, edge_macs = 0;
    long base_params = 0, base_macs = 0;
    double fused_accuracy = -1;
    double edge_accuracy = -1;
    double accuracy_gain = 0;
    bool budget_ok = false;  // param(D)+param(E) < param(B), same for macs
};

inline RatioReport compute_ratios(const CostProfile& delta, const CostProfile& edge,
                                  const CostProfile& base) {
    if (edge.param_count == 0 || edge.mac_count == 0 || base.param_count == 0 ||
        base.mac_count == 0)
        throw StructuralError("ratio denominators must be positive");
    RatioReport r;
    r.delta_params = delta.param_count;
    r.delta_macs = delta.mac_count;
    r.edge_params = edge.param_count;
    r.edge_macs = edge.mac_count;
    r.base_params = base.param_count;
    r.base_macs = base.mac_count;
    r.p_delta_edge = static_cast<double>(delta.param_count) / static_cast<double>(edge.param_count);
    r.f_delta_edge = static_cast<double>(delta.mac_count) / static_cast<double>(edge.mac_count);
    r.p_delta_base = static_cast<double>(delta.param_count) / static_cast<double>(base.param_count);
    r.f_delta_base = static_cast<double>(delta.mac_count) / static_cast<double>(base.mac_count);
    r.budget_ok = (delta.param_count + edge.param_count < base.param_count) &&
                  (delta.mac_count + edge.mac_count < base.mac_count);
    return r;
}

inline Json ratio_report_json(const RatioReport& r) {
    Json j;
    j["schema_version"] = kReportSchemaVersion;
    j["p_delta_edge"] = r.p_delta_edge;
    j["f_delta_edge"] = r.f_delta_edge;
    j["p_delta_base"] = r.p_delta_base;
    j["f_delta_base"] = r.f_delta_base;
    j["delta_params"] = r.delta_params;
    j["delta_macs"] = r.delta_macs;
    j["edge_params"] = r.edge_params;
    j["edge_macs"] = r.edge_macs;
    j["base_params"] = r.base_params;
    j["base_macs"] = r.base_macs;
    j["fused_accuracy"] = r.fused_accuracy;
    j["edge_accuracy"] = r.edge_accuracy;
    j["accuracy_gain"] = r.accuracy_gain;
    j["budget_ok"] = r.budget_ok;
    return j;
}

// One explanation record per analyzed image, one JSON object per line.
inline Json record_json(const ExplanationRecord& r) {
    Json j;
    j["schema_version"] = kReportSchemaVersion;
    j["image"] = r.image_id;
    j["edge_prediction"] = r.edge_prediction;
    j["base_prediction"] = r.base_prediction;
    j["true_label"] = r.true_label;
    j["category"] = category_name(r.category);
    if (r.overlap_defined)
        j["overlap_score"] = r.overlap;
    else
        j["overlap_score"] = nullptr;
    Json labels = Json::array();
    for (const auto& l : r.labels) labels.push_back({{"label", l.label}, {"fraction", l.fraction}});
    j["labels"] = labels;
    auto regions_json = [](const RegionSet& rs) {
        Json out;
        out["h"] = rs.h;
        out["w"] = rs.w;
        out["threshold"] = rs.threshold;
        Json comps = Json::array();
        for (const auto& c : rs.components) comps.push_back(rle_encode(c));
        out["components_rle"] = comps;
        return out;
    };
    j["edge_regions"] = regions_json(r.edge_regions);
    j["delta_regions"] = regions_json(r.delta_regions);
    return j;
}

inline Json summary_json(const AnalysisSummary& s) {
    Json j;
    j["schema_version"] = kReportSchemaVersion;
    j["record_count"] = s.record_count;
    j["category_counts"] = s.category_counts;
    j["mean_overlap"] = s.mean_overlap;
    Json top = Json::array();
    for (const auto& c : s.top_missed_concepts) top.push_back({{"concept", c.name}, {"count", c.count}});
    j["top_missed_concepts"] = top;
    return j;
}

// ---------------------------------------------------------------------------
// Plots: deterministic SVG bar charts, each with a CSV data table alongside.
// ---------------------------------------------------------------------------

struct BarDatum {
    std::string label;
    double value = 0;
};

inline std::string format_fixed(double v, int precision = 4) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(precision) << v;
    return ss.str();
}

inline void write_csv_table(const std::filesystem::path& path, const std::string& value_header,
                            const std::vector<BarDatum>& data) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << "label," << value_header << "\n";
    for (const auto& d : data) f << d.label << "," << format_fixed(d.value) << "\n";
}

inline void write_bar_chart_svg(const std::filesystem::path& path, const std::string& title,
                                const std::vector<BarDatum>& data) {
    if (data.empty()) throw DomainError("empty plot data");
    const int bar_w = 56, gap = 18, left = 60, bottom = 70, top = 40, height = 220;
    const int width = left + static_cast<int>(data.size()) * (bar_w + gap) + 20;
    double maxv = 0;
    for (const auto& d : data) maxv = std::max(maxv, d.value);
    if (maxv <= 0) maxv = 1;
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height + top + bottom << "\">\n";
    f << "<text x=\"" << left << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">" << title
      << "</text>\n";
    f << "<line x1=\"" << left - 8 << "\" y1=\"" << top + height << "\" x2=\"" << width - 10
      << "\" y2=\"" << top + height << "\" stroke=\"#444\"/>\n";
    for (std::size_t i = 0; i < data.size(); ++i) {
        int h = static_cast<int>(std::lround(static_cast<double>(height) * data[i].value / maxv));
        int x = left + static_cast<int>(i) * (bar_w + gap);
        int y = top + height - h;
        f << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bar_w << "\" height=\"" << h
          << "\" fill=\"#3b7dd8\"/>\n";
        f << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << y - 5
          << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">"
          << format_fixed(data[i].value, 2) << "</text>\n";
        f << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << top + height + 14
          << "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\" transform=\"rotate(30 "
          << x + bar_w / 2 << " " << top + height + 14 << ")\">" << data[i].label << "</text>\n";
    }
    f << "</svg>\n";
}

// Emits <name>.svg plus <name>.csv with identical data.
inline void emit_plot_with_table(const std::filesystem::path& dir, const std::string& name,
                                 const std::string& title, const std::string& value_header,
                                 const std::vector<BarDatum>& data) {
    std::filesystem::create_directories(dir);
    write_bar_chart_svg(dir / (name + ".svg"), title, data);
    write_csv_table(dir / (name + ".csv"), value_header, data);
}

// Region overlay: cyan marks delta regions, magenta marks edge regions.
inline void write_region_overlay(const std::filesystem::path& path, const Tensor& image,
                                 const DatasetNorm& norm, const RegionSet& edge,
                                 const RegionSet& delta) {
    auto rgb = tensor_to_image(image, norm);
    auto ue = edge.union_mask();
    auto ud = delta.union_mask();
    const long h = image.dim(1), w = image.dim(2);
    for (long i = 0; i < h * w; ++i) {
        bool e = i < static_cast<long>(ue.size()) && ue[static_cast<std::size_t>(i)];
        bool d = i < static_cast<long>(ud.size()) && ud[static_cast<std::size_t>(i)];
        if (!e && !d) continue;
        auto blend = [&](long ch, float target) {
            auto& v = rgb[static_cast<std::size_t>(i * 3 + ch)];
            v = static_cast<std::uint8_t>(0.45f * static_cast<float>(v) + 0.55f * target);
        };
        if (d) {  // cyan
            blend(0, 0), blend(1, 255), blend(2, 255);
        }
        if (e) {  // magenta
            blend(0, 255), blend(1, 0), blend(2, 255);
        }
    }
    write_ppm(path, rgb, h, w);
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

inline Json read_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read " + path.string());
    Json j;
    f >> j;
    return j;
}

}  // namespace xdelta

#include "vitlens/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

namespace vitlens {

using nlohmann::json;

const ReportRow* ExperimentReport::find(const std::string& set, const std::string& condition,
                                        const std::string& metric) const {
    for (const auto& r : rows) {
        if (r.set == set && r.condition == condition && r.metric == metric) return &r;
    }
    for (const auto& r : groups) {
        if (r.set == set && r.condition == condition && r.metric == metric) return &r;
    }
    return nullptr;
}

namespace {

json row_json(const ReportRow& r) {
    return {{"set", r.set},     {"condition", r.condition}, {"metric", r.metric},
            {"value", r.value}, {"count", r.count},         {"total", r.total}};
}

json layer_map_json(const std::map<int, double>& values) {
    json out = json::object();
    for (const auto& [layer, v] : values) out[std::to_string(layer)] = v;
    return out;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string number(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

void fill_rect(Image& img, int x0, int y0, int x1, int y1, std::array<uint8_t, 3> rgb) {
    for (int y = std::max(0, y0); y < std::min(img.height, y1); ++y) {
        for (int x = std::max(0, x0); x < std::min(img.width, x1); ++x) {
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = rgb[static_cast<size_t>(c)];
        }
    }
}

} // namespace

json report_to_json(const ExperimentReport& report) {
    json rows = json::array(), groups = json::array(), series = json::array();
    for (const auto& r : report.rows) rows.push_back(row_json(r));
    for (const auto& r : report.groups) groups.push_back(row_json(r));
    for (const auto& s : report.series) {
        json counts = json::object();
        for (const auto& [layer, c] : s.counts) counts[std::to_string(layer)] = c;
        series.push_back({{"name", s.name}, {"values", layer_map_json(s.values)}, {"counts", std::move(counts)}});
    }
    json replaced = json::object();
    for (const auto& [cond, values] : report.replaced_per_layer) replaced[cond] = layer_map_json(values);
    return {{"experiment", report.experiment}, {"config", report.config},
            {"rows", std::move(rows)},         {"groups", std::move(groups)},
            {"series", std::move(series)},     {"replaced_per_layer", std::move(replaced)},
            {"warnings", report.warnings}};
}

std::string report_to_csv(const ExperimentReport& report) {
    std::ostringstream os;
    os << "section,set,condition,metric,layer,value,count,total\n";
    auto emit_row = [&](const char* section, const ReportRow& r) {
        os << section << ',' << csv_field(r.set) << ',' << csv_field(r.condition) << ',' << csv_field(r.metric) << ",,"
           << number(r.value) << ',' << r.count << ',' << r.total << '\n';
    };
    for (const auto& r : report.rows) emit_row("row", r);
    for (const auto& r : report.groups) emit_row("group", r);
    for (const auto& s : report.series) {
        for (const auto& [layer, v] : s.values) {
            const auto it = s.counts.find(layer);
            const int64_t c = it == s.counts.end() ? 0 : it->second;
            os << "series,," << csv_field(s.name) << ",," << layer << ',' << number(v) << ',' << c << ",\n";
        }
    }
    for (const auto& [cond, values] : report.replaced_per_layer) {
        for (const auto& [layer, v] : values) {
            os << "replaced,," << csv_field(cond) << ",tokens," << layer << ',' << number(v) << ",,\n";
        }
    }
    return os.str();
}

Image report_chart(const ExperimentReport& report, int width, int height) {
    Image img = Image::solid(std::max(width, 64), std::max(height, 64), {255, 255, 255});
    static constexpr std::array<std::array<uint8_t, 3>, 6> palette{
        {{52, 101, 164}, {204, 0, 0}, {78, 154, 6}, {245, 121, 0}, {117, 80, 123}, {193, 125, 17}}};

    // Bars grouped by layer (one colour per series), or one bar per row.
    struct Bar {
        std::string label;
        std::vector<double> values;
    };
    std::vector<Bar> bars;
    std::vector<std::string> legend;
    if (!report.series.empty()) {
        std::set<int> layers;
        for (const auto& s : report.series) {
            legend.push_back(s.name);
            for (const auto& [layer, _] : s.values) layers.insert(layer);
        }
        for (int layer : layers) {
            Bar bar{std::to_string(layer), {}};
            for (const auto& s : report.series) {
                const auto it = s.values.find(layer);
                bar.values.push_back(it == s.values.end() ? 0.0 : it->second);
            }
            bars.push_back(std::move(bar));
        }
    } else {
        for (const auto& r : report.rows) bars.push_back({std::to_string(bars.size() + 1), {r.value}});
    }

    const int scale = 1;
    const int left = 8, right = 8, top = 12 + kGlyphHeight * scale, bottom = 14 + kGlyphHeight * scale;
    const int plot_w = img.width - left - right, plot_h = img.height - top - bottom;
    draw_text(img, report.experiment, left, 4, scale, {0, 0, 0});
    int lx = left + text_width(report.experiment, scale) + 12;
    for (size_t s = 0; s < legend.size(); ++s) {
        fill_rect(img, lx, 4, lx + kGlyphHeight, 4 + kGlyphHeight, palette[s % palette.size()]);
        draw_text(img, legend[s], lx + kGlyphHeight + 3, 4, scale, {0, 0, 0});
        lx += kGlyphHeight + 9 + text_width(legend[s], scale);
    }
    fill_rect(img, left, top + plot_h, left + plot_w, top + plot_h + 1, {0, 0, 0});
    if (bars.empty() || plot_w <= 0 || plot_h <= 0) return img;

    double max_value = 0.0;
    for (const auto& b : bars) {
        for (double v : b.values) {
            if (std::isfinite(v)) max_value = std::max(max_value, v);
        }
    }
    if (max_value <= 0.0) max_value = 1.0;
    const int slot = plot_w / static_cast<int>(bars.size());
    for (size_t i = 0; i < bars.size(); ++i) {
        const int x0 = left + static_cast<int>(i) * slot;
        const int n = static_cast<int>(bars[i].values.size());
        const int bar_w = std::max(1, (slot - 4) / std::max(n, 1));
        for (int s = 0; s < n; ++s) {
            const double v = std::isfinite(bars[i].values[static_cast<size_t>(s)]) ? bars[i].values[static_cast<size_t>(s)] : 0.0;
            const int h = static_cast<int>(std::lround(plot_h * std::max(v, 0.0) / max_value));
            const int bx = x0 + 2 + s * bar_w;
            const auto colour = palette[(report.series.empty() ? i : static_cast<size_t>(s)) % palette.size()];
            fill_rect(img, bx, top + plot_h - h, bx + bar_w - 1, top + plot_h, colour);
        }
        draw_text(img, bars[i].label, x0 + 2, top + plot_h + 4, scale, {0, 0, 0});
    }
    return img;
}

} // namespace vitlens

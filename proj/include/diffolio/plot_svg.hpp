#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "diffolio/errors.hpp"

// Minimal static line charts as SVG. Output is a pure function of the inputs.
namespace diffolio::svg {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;  // NaN breaks the line
};

struct ChartOptions {
    std::string title;
    std::string x_label;
    std::string y_label;
    int width = 800;
    int height = 450;
    bool zero_line = false;
};

namespace detail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string tick_label(double v, double step) {
    char buf[32];
    const int digits = step >= 1.0 ? 0 : std::min(6, static_cast<int>(std::ceil(-std::log10(step))));
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// 1-2-5 tick spacing giving roughly `target` ticks.
inline double nice_step(double span, int target) {
    if (!(span > 0.0)) return 1.0;
    const double raw = span / target;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    const double f = raw / mag;
    return (f < 1.5 ? 1.0 : f < 3.5 ? 2.0 : f < 7.5 ? 5.0 : 10.0) * mag;
}

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
    return colors[i % (sizeof colors / sizeof *colors)];
}

}  // namespace detail

inline std::string line_chart(const std::vector<Series>& series, const ChartOptions& opt) {
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw DataError("plot series '" + s.name + "' has mismatched x/y lengths");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
            x0 = std::min(x0, s.x[i]);
            x1 = std::max(x1, s.x[i]);
            y0 = std::min(y0, s.y[i]);
            y1 = std::max(y1, s.y[i]);
        }
    }
    if (!std::isfinite(x0)) x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
    if (opt.zero_line) y0 = std::min(y0, 0.0), y1 = std::max(y1, 0.0);
    if (x1 == x0) x0 -= 0.5, x1 += 0.5;
    if (y1 == y0) y0 -= 0.5, y1 += 0.5;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;

    const double left = 70, right = 20 + 150, top = 40, bottom = 50;
    const double pw = opt.width - left - right, ph = opt.height - top - bottom;
    auto sx = [&](double x) { return left + (x - x0) / (x1 - x0) * pw; };
    auto sy = [&](double y) { return top + (y1 - y) / (y1 - y0) * ph; };
    using detail::num;

    std::string o;
    o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(opt.width) + "\" height=\"" +
         std::to_string(opt.height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o += "<text x=\"" + num(opt.width / 2.0) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" +
         detail::escape(opt.title) + "</text>\n";

    const double xs = detail::nice_step(x1 - x0, 8), ys = detail::nice_step(y1 - y0, 6);
    for (double t = std::ceil(x0 / xs) * xs; t <= x1 + 1e-9 * xs; t += xs) {
        o += "<line x1=\"" + num(sx(t)) + "\" y1=\"" + num(top) + "\" x2=\"" + num(sx(t)) + "\" y2=\"" + num(top + ph) +
             "\" stroke=\"#e5e5e5\"/>\n";
        o += "<text x=\"" + num(sx(t)) + "\" y=\"" + num(top + ph + 16) + "\" text-anchor=\"middle\">" +
             detail::tick_label(t, xs) + "</text>\n";
    }
    for (double t = std::ceil(y0 / ys) * ys; t <= y1 + 1e-9 * ys; t += ys) {
        o += "<line x1=\"" + num(left) + "\" y1=\"" + num(sy(t)) + "\" x2=\"" + num(left + pw) + "\" y2=\"" + num(sy(t)) +
             "\" stroke=\"#e5e5e5\"/>\n";
        o += "<text x=\"" + num(left - 6) + "\" y=\"" + num(sy(t) + 4) + "\" text-anchor=\"end\">" +
             detail::tick_label(std::abs(t) < 1e-12 * ys ? 0.0 : t, ys) + "</text>\n";
    }
    if (opt.zero_line && y0 < 0.0 && y1 > 0.0) {
        o += "<line x1=\"" + num(left) + "\" y1=\"" + num(sy(0)) + "\" x2=\"" + num(left + pw) + "\" y2=\"" +
             num(sy(0)) + "\" stroke=\"#888\" stroke-dasharray=\"4 3\"/>\n";
    }
    o += "<rect x=\"" + num(left) + "\" y=\"" + num(top) + "\" width=\"" + num(pw) + "\" height=\"" + num(ph) +
         "\" fill=\"none\" stroke=\"#333\"/>\n";
    o += "<text x=\"" + num(left + pw / 2) + "\" y=\"" + num(opt.height - 10.0) + "\" text-anchor=\"middle\">" +
         detail::escape(opt.x_label) + "</text>\n";
    o += "<text transform=\"translate(16 " + num(top + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
         detail::escape(opt.y_label) + "</text>\n";

    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        std::string d;
        bool pen_up = true;
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
                pen_up = true;
                continue;
            }
            d += (pen_up ? "M" : "L") + num(sx(s.x[i])) + " " + num(sy(s.y[i])) + " ";
            pen_up = false;
        }
        if (!d.empty()) {
            o += "<path d=\"" + d + "\" fill=\"none\" stroke=\"" + detail::palette(k) + "\" stroke-width=\"1.5\"/>\n";
        }
        const double ly = top + 14 + 18.0 * static_cast<double>(k);
        o += "<line x1=\"" + num(left + pw + 12) + "\" y1=\"" + num(ly - 4) + "\" x2=\"" + num(left + pw + 34) +
             "\" y2=\"" + num(ly - 4) + "\" stroke=\"" + detail::palette(k) + "\" stroke-width=\"2\"/>\n";
        o += "<text x=\"" + num(left + pw + 40) + "\" y=\"" + num(ly) + "\">" + detail::escape(s.name) + "</text>\n";
    }
    o += "</svg>\n";
    return o;
}

inline void write_line_chart(const std::string& path, const std::vector<Series>& series, const ChartOptions& opt) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path);
    out << line_chart(series, opt);
}

}  // namespace diffolio::svg

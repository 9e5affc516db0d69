// SPDX-License-Identifier: Apache-2.0
//
// This file is part of sidelab, a desk-scale side-channel laboratory.
//
// CSV assembly helpers and a tiny self-contained SVG line plotter for the
// evaluation reports.

#ifndef SIDELAB_REPORT_HPP
#define SIDELAB_REPORT_HPP

#include <cstdio>
#include <string>
#include <vector>

#include "sidelab/util.hpp"

namespace sidelab::report {

inline std::string fmt(double v, const char *spec = "%.6g") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

struct Series {
    std::string name;
    std::vector<double> x, y;
};

/// Minimal SVG line plot: axes, ticks, one polyline per series, legend.
inline std::string svg_line_plot(const std::string &title, const std::string &xlabel,
                                 const std::string &ylabel, const std::vector<Series> &series) {
    const double width = 720, height = 440;
    const double ml = 64, mr = 24, mt = 40, mb = 48;
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto &s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (first) {
                xmin = xmax = s.x[i];
                ymin = ymax = s.y[i];
                first = false;
            }
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (xmax == xmin)
        xmax = xmin + 1;
    if (ymax == ymin)
        ymax = ymin + 1;
    auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (width - ml - mr); };
    auto py = [&](double y) { return height - mb - (y - ymin) / (ymax - ymin) * (height - mt - mb); };

    static const char *palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) + "\" height=\"" +
                      fmt(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + fmt(width / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" + title +
           "</text>\n";
    // Axes.
    svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(height - mb) + "\" x2=\"" + fmt(width - mr) +
           "\" y2=\"" + fmt(height - mb) + "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(mt) + "\" x2=\"" + fmt(ml) + "\" y2=\"" +
           fmt(height - mb) + "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
        double xv = xmin + (xmax - xmin) * t / 4.0;
        double yv = ymin + (ymax - ymin) * t / 4.0;
        svg += "<text x=\"" + fmt(px(xv)) + "\" y=\"" + fmt(height - mb + 18) +
               "\" text-anchor=\"middle\" font-size=\"11\">" + fmt(xv, "%.4g") + "</text>\n";
        svg += "<text x=\"" + fmt(ml - 8) + "\" y=\"" + fmt(py(yv) + 4) +
               "\" text-anchor=\"end\" font-size=\"11\">" + fmt(yv, "%.4g") + "</text>\n";
    }
    svg += "<text x=\"" + fmt(width / 2) + "\" y=\"" + fmt(height - 10) +
           "\" text-anchor=\"middle\" font-size=\"12\">" + xlabel + "</text>\n";
    svg += "<text x=\"16\" y=\"" + fmt(height / 2) + "\" font-size=\"12\" transform=\"rotate(-90 16 " +
           fmt(height / 2) + ")\" text-anchor=\"middle\">" + ylabel + "</text>\n";

    for (std::size_t s = 0; s < series.size(); ++s) {
        const char *color = palette[s % 6];
        std::string pts;
        for (std::size_t i = 0; i < series[s].x.size(); ++i)
            pts += fmt(px(series[s].x[i]), "%.2f") + "," + fmt(py(series[s].y[i]), "%.2f") + " ";
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" +
               pts + "\"/>\n";
        svg += "<text x=\"" + fmt(width - mr - 8) + "\" y=\"" + fmt(mt + 16 * static_cast<double>(s) + 12) +
               "\" text-anchor=\"end\" font-size=\"12\" fill=\"" + color + "\">" + series[s].name +
               "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

} // namespace sidelab::report

#endif

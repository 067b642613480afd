#pragma once

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "didipose/common.hpp"

namespace didipose {

struct PlotSeries {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

// Minimal standalone SVG line plot; presentation only.
inline void write_line_plot_svg(const std::string& path, const std::string& title,
                                const std::string& x_label, const std::string& y_label,
                                const std::vector<PlotSeries>& series) {
    const double w = 720, h = 440, ml = 70, mr = 20, mt = 40, mb = 50;
    double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
    bool first = true;
    for (const auto& s : series)
        for (const auto& [x, y] : s.points) {
            if (first) {
                xmin = xmax = x;
                ymin = ymax = y;
                first = false;
            }
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        }
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
    auto sy = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

    std::ostringstream os;
    os << std::setprecision(6);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">" << title
       << "</text>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
       << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
       << x_label << "</text>\n";
    os << "<text x=\"16\" y=\"" << (mt + h - mb) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 16 "
       << (mt + h - mb) / 2 << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
    for (int t = 0; t <= 4; ++t) {
        const double xv = xmin + (xmax - xmin) * t / 4.0;
        const double yv = ymin + (ymax - ymin) * t / 4.0;
        os << "<text x=\"" << sx(xv) << "\" y=\"" << h - mb + 16 << "\" text-anchor=\"middle\" font-size=\"10\">"
           << std::setprecision(4) << xv << "</text>\n";
        os << "<text x=\"" << ml - 6 << "\" y=\"" << sy(yv) + 3 << "\" text-anchor=\"end\" font-size=\"10\">"
           << yv << "</text>\n";
    }
    int ci = 0;
    for (const auto& s : series) {
        const char* color = colors[ci % 5];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& [x, y] : s.points) os << sx(x) << "," << sy(y) << " ";
        os << "\"/>\n";
        os << "<text x=\"" << w - mr - 8 << "\" y=\"" << mt + 14 + 16 * ci
           << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << color << "\">" << s.label << "</text>\n";
        ++ci;
    }
    os << "</svg>\n";

    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("plot: cannot open '" + path + "' for writing");
    out << os.str();
}

}  // namespace didipose

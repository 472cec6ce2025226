#include "mnmt/svg.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace mnmt {

std::string xml_escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
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

SvgDoc::SvgDoc(double width, double height) : width_(width), height_(height) {}

void SvgDoc::rect(double x, double y, double w, double h, std::string_view fill, std::string_view title) {
  if (title.empty()) {
    body_ += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"{}\"/>\n", x, y, w, h, fill);
  } else {
    body_ += fmt::format("<rect x=\"{:.2f}\" y=\"{:.2f}\" width=\"{:.2f}\" height=\"{:.2f}\" fill=\"{}\"><title>{}</title></rect>\n", x, y,
                         w, h, fill, xml_escape(title));
  }
}

void SvgDoc::line(double x1, double y1, double x2, double y2, std::string_view stroke, double width) {
  body_ += fmt::format("<line x1=\"{:.2f}\" y1=\"{:.2f}\" x2=\"{:.2f}\" y2=\"{:.2f}\" stroke=\"{}\" stroke-width=\"{:.2f}\"/>\n", x1, y1,
                       x2, y2, stroke, width);
}

void SvgDoc::text(double x, double y, std::string_view s, double size, std::string_view anchor, double rotate) {
  std::string transform;
  if (rotate != 0.0) transform = fmt::format(" transform=\"rotate({:.2f} {:.2f} {:.2f})\"", rotate, x, y);
  body_ += fmt::format("<text x=\"{:.2f}\" y=\"{:.2f}\" font-size=\"{:.2f}\" text-anchor=\"{}\"{}>{}</text>\n", x, y, size, anchor,
                       transform, xml_escape(s));
}

std::string SvgDoc::str() const {
  return fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{:.2f}\" height=\"{:.2f}\" font-family=\"sans-serif\">\n"
      "<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n{}</svg>\n",
      width_, height_, body_);
}

std::string grey(double v) {
  const auto c = static_cast<int>(std::lround(255.0 * (1.0 - std::clamp(v, 0.0, 1.0))));
  return fmt::format("#{:02x}{:02x}{:02x}", c, c, c);
}

}  // namespace mnmt

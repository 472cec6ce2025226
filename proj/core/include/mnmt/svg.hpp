#pragma once

// Minimal SVG builder for the figure exports. Coordinates are printed with
// two decimals so output bytes depend only on the inputs.

#include <string>
#include <string_view>

namespace mnmt {

std::string xml_escape(std::string_view s);

class SvgDoc {
 public:
  SvgDoc(double width, double height);

  void rect(double x, double y, double w, double h, std::string_view fill, std::string_view title = {});
  void line(double x1, double y1, double x2, double y2, std::string_view stroke = "#000", double width = 1.0);
  // anchor: start | middle | end; rotate in degrees about (x, y).
  void text(double x, double y, std::string_view s, double size = 10.0, std::string_view anchor = "start", double rotate = 0.0);

  std::string str() const;

 private:
  double width_, height_;
  std::string body_;
};

// Greyscale shade for v in [0, 1]: white at 0, black at 1.
std::string grey(double v);

}  // namespace mnmt

#include "mnmt/error.hpp"

namespace mnmt {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Contract: return "contract";
    case ErrorKind::Numeric: return "numeric";
    case ErrorKind::Vocab: return "vocab";
    case ErrorKind::Length: return "length";
    case ErrorKind::Config: return "config";
    case ErrorKind::Training: return "training";
    case ErrorKind::Routing: return "routing";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Capacity: return "capacity";
    case ErrorKind::Alignment: return "alignment";
    case ErrorKind::Extraction: return "extraction";
    case ErrorKind::Bounds: return "bounds";
    case ErrorKind::Degenerate: return "degenerate-row";
    case ErrorKind::Io: return "io";
    case ErrorKind::MissingInput: return "missing-input";
  }
  return "unknown";
}

}  // namespace mnmt

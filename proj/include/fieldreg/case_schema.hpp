#pragma once

#include <string>
#include <vector>

#include "fieldreg/errors.hpp"

namespace fieldreg {

/// The three supported input/output channel schemas. The stiffness field E is
/// always an input; the load field f joins it in the many-to-many case.
enum class CaseKind { one2one, one2many, many2many };

inline std::string to_string(CaseKind k) {
  switch (k) {
    case CaseKind::one2one: return "one2one";
    case CaseKind::one2many: return "one2many";
    case CaseKind::many2many: return "many2many";
  }
  throw std::invalid_argument("to_string: unknown case kind");
}

inline CaseKind parse_case(const std::string& s) {
  if (s == "one2one") return CaseKind::one2one;
  if (s == "one2many") return CaseKind::one2many;
  if (s == "many2many") return CaseKind::many2many;
  throw config_error("unknown case '" + s + "', expected one2one, one2many or many2many");
}

inline std::vector<std::string> case_input_names(CaseKind k) {
  if (k == CaseKind::many2many) return {"E", "f"};
  return {"E"};
}

inline std::vector<std::string> case_output_names(CaseKind k) {
  switch (k) {
    case CaseKind::one2one: return {"w"};
    case CaseKind::one2many: return {"sigma_v", "tau_max", "tau_xy"};
    case CaseKind::many2many: return {"w", "sigma_v"};
  }
  throw std::invalid_argument("case_output_names: unknown case kind");
}

inline int case_input_channels(CaseKind k) {
  return static_cast<int>(case_input_names(k).size());
}
inline int case_output_channels(CaseKind k) {
  return static_cast<int>(case_output_names(k).size());
}

}  // namespace fieldreg

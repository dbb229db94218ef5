#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbres/constants.hpp"
#include "mbres/csv.hpp"
#include "mbres/mattis_bardeen.hpp"
#include "mbres/resonator.hpp"

// Flat key-value run configuration with dotted section names:
//
//   # comment
//   material.Tc_K     = 1.34
//   material.tau0_ns  = 30
//   baseline.fres0_GHz = 6.837
//   baseline.Qi0      = 980
//   baseline.Qc       = 828
//   baseline.alpha    = 0.17
//   run.Tref_mK       = 10
//   run.seed          = 1
//
// Units are encoded in key suffixes; the accepted set is _K/_mK, _Hz/_GHz,
// _s/_us/_ns, _V, plus N0 in SI (per J m^3) or per eV um^3. Values are
// converted to strict SI at this boundary.

namespace mbres::io {

struct KeyValues {
  std::map<std::string, std::string> kv;

  static KeyValues parse(std::istream& is) {
    KeyValues out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const std::string s = detail::trim(line);
      if (s.empty()) continue;
      const size_t eq = s.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("config line " + std::to_string(lineno) +
                                 ": expected 'key = value'");
      const std::string key = detail::trim(s.substr(0, eq));
      const std::string val = detail::trim(s.substr(eq + 1));
      if (key.empty() || val.empty())
        throw std::runtime_error("config line " + std::to_string(lineno) +
                                 ": empty key or value");
      out.kv[key] = val;
    }
    return out;
  }

  static KeyValues parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config: " + path);
    return parse(f);
  }

  bool has(const std::string& key) const { return kv.count(key) > 0; }

  double number(const std::string& key) const {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("config: missing key " + key);
    size_t pos = 0;
    const double v = std::stod(it->second, &pos);
    if (pos != it->second.size())
      throw std::runtime_error("config: cannot parse number for " + key);
    return v;
  }

  std::string text(const std::string& key) const {
    const auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("config: missing key " + key);
    return it->second;
  }

  /// Fetch `base` with one of the unit suffixes, converting to SI.
  /// suffixes: list of {suffix, factor}.
  std::optional<double> with_units(
      const std::string& base,
      const std::vector<std::pair<std::string, double>>& suffixes) const {
    std::optional<double> found;
    for (const auto& [suf, fac] : suffixes) {
      const std::string key = base + suf;
      if (has(key)) {
        if (found)
          throw std::runtime_error("config: duplicate unit variants for " + base);
        found = number(key) * fac;
      }
    }
    return found;
  }
};

inline const std::vector<std::pair<std::string, double>> kelvin_suffixes{
    {"_K", 1.0}, {"_mK", 1e-3}};
inline const std::vector<std::pair<std::string, double>> hertz_suffixes{
    {"_Hz", 1.0}, {"_GHz", 1e9}, {"_MHz", 1e6}, {"_kHz", 1e3}};
inline const std::vector<std::pair<std::string, double>> second_suffixes{
    {"_s", 1.0}, {"_us", 1e-6}, {"_ns", 1e-9}};

struct RunConfig {
  mb::MaterialParams material;
  resonator::ResonatorBaseline baseline;
  double Tref_K = resonator::default_Tref_K;
  std::uint64_t seed = 1;
  KeyValues raw; // full key set, for command-specific sections

  static RunConfig from_keyvalues(KeyValues k) {
    RunConfig c;
    auto require = [&](std::optional<double> v, const char* what) {
      if (!v) throw std::runtime_error(std::string("config: missing ") + what);
      return *v;
    };
    c.material.Tc_K = require(k.with_units("material.Tc", kelvin_suffixes),
                              "material.Tc_K (or _mK)");
    c.material.tau0_s = require(k.with_units("material.tau0", second_suffixes),
                                "material.tau0_s (or _us/_ns)");
    if (k.has("material.N0_per_J_m3"))
      c.material.N0_per_J_m3 = k.number("material.N0_per_J_m3");
    else if (k.has("material.N0_per_eV_um3"))
      c.material.N0_per_J_m3 = k.number("material.N0_per_eV_um3") /
                               (constants::e_charge * 1e-18);
    c.material.validate();

    c.baseline.fres0_Hz = require(k.with_units("baseline.fres0", hertz_suffixes),
                                  "baseline.fres0_Hz (or _GHz)");
    c.baseline.Qi0 = k.number("baseline.Qi0");
    c.baseline.Qc = k.number("baseline.Qc");
    c.baseline.alpha = k.number("baseline.alpha");
    c.baseline.validate();

    if (const auto v = k.with_units("run.Tref", kelvin_suffixes)) c.Tref_K = *v;
    if (!(c.Tref_K > 0.0) || !(c.Tref_K < c.material.Tc_K))
      throw std::runtime_error("config: run.Tref must be in (0, Tc)");
    if (k.has("run.seed")) {
      const double s = k.number("run.seed");
      if (s < 0.0) throw std::runtime_error("config: run.seed must be >= 0");
      c.seed = static_cast<std::uint64_t>(s);
    }
    c.raw = std::move(k);
    return c;
  }

  static RunConfig from_file(const std::string& path) {
    return from_keyvalues(KeyValues::parse_file(path));
  }
};

} // namespace mbres::io

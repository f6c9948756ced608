#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "pointgmm/errors.hpp"
#include "pointgmm/hgmm.hpp"
#include "pointgmm/params.hpp"
#include "pointgmm/point_cloud.hpp"

namespace pointgmm::io {

using json = nlohmann::json;

inline constexpr int kFormatVersion = 1;

/// Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view tok, std::size_t line) {
  double v = 0.0;
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw ParseError("invalid number '" + std::string(tok) + "'", line);
  if (!std::isfinite(v)) throw ParseError("non-finite coordinate", line);
  return v;
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    std::size_t j = i;
    while (j < s.size() && !std::isspace(static_cast<unsigned char>(s[j]))) ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ParseError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw ParseError("write failed for '" + path.string() + "'");
}

}  // namespace detail

// ---- point clouds -----------------------------------------------------------

/// Whitespace-separated `x y z` per line; blank lines and `#` comments skipped.
inline PointCloud parse_xyz(std::string_view text) {
  std::vector<Vec3> pts;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    ++line_no;
    pos = end + 1;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto tok = detail::split_ws(line);
    if (tok.empty()) {
      if (end == text.size()) break;
      continue;
    }
    if (tok.size() != 3) throw ParseError("expected 3 coordinates, got " + std::to_string(tok.size()), line_no);
    pts.emplace_back(parse_double(tok[0], line_no), parse_double(tok[1], line_no), parse_double(tok[2], line_no));
    if (end == text.size()) break;
  }
  if (pts.empty()) throw ParseError("no points in XYZ data");
  return PointCloud(pts);
}

inline std::string format_xyz(const PointCloud& cloud) {
  std::string out;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 p = cloud.point(i);
    out += format_double(p.x()) + ' ' + format_double(p.y()) + ' ' + format_double(p.z()) + '\n';
  }
  return out;
}

/// ASCII PLY; the vertex element must come first with x, y, z as its first three properties.
inline PointCloud parse_ply(std::string_view text) {
  std::size_t pos = 0, line_no = 0;
  auto next_line = [&]() -> std::string_view {
    if (pos >= text.size()) throw ParseError("unexpected end of PLY data", line_no + 1);
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    std::string_view l = text.substr(pos, end - pos);
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
    pos = end + 1;
    ++line_no;
    return l;
  };
  if (next_line() != "ply") throw ParseError("missing 'ply' magic", 1);
  std::size_t vertex_count = 0;
  bool in_vertex = false, seen_vertex = false;
  std::vector<std::string> props;
  for (;;) {
    const auto tok = detail::split_ws(next_line());
    if (tok.empty() || tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "format") {
      if (tok.size() < 2 || tok[1] != "ascii") throw ParseError("only ASCII PLY is supported", line_no);
    } else if (tok[0] == "element") {
      if (tok.size() != 3) throw ParseError("malformed element line", line_no);
      in_vertex = tok[1] == "vertex";
      if (in_vertex) {
        if (seen_vertex) throw ParseError("duplicate vertex element", line_no);
        seen_vertex = true;
        vertex_count = static_cast<std::size_t>(parse_double(tok[2], line_no));
      } else if (!seen_vertex) {
        throw ParseError("vertex element must come first", line_no);
      }
    } else if (tok[0] == "property") {
      if (in_vertex) {
        if (tok.size() != 3) throw ParseError("unsupported vertex property declaration", line_no);
        props.emplace_back(tok[2]);
      }
    } else if (tok[0] == "end_header") {
      break;
    } else {
      throw ParseError("unknown header keyword '" + std::string(tok[0]) + "'", line_no);
    }
  }
  if (!seen_vertex) throw ParseError("no vertex element");
  if (props.size() < 3 || props[0] != "x" || props[1] != "y" || props[2] != "z")
    throw ParseError("vertex properties must start with x, y, z in that order");
  if (vertex_count == 0) throw ParseError("PLY has zero vertices");
  std::vector<Vec3> pts;
  pts.reserve(vertex_count);
  while (pts.size() < vertex_count) {
    const auto tok = detail::split_ws(next_line());
    if (tok.empty()) continue;
    if (tok.size() != props.size())
      throw ParseError("expected " + std::to_string(props.size()) + " values per vertex", line_no);
    pts.emplace_back(parse_double(tok[0], line_no), parse_double(tok[1], line_no), parse_double(tok[2], line_no));
  }
  return PointCloud(pts);
}

inline std::string format_ply(const PointCloud& cloud) {
  std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(cloud.size()) +
                    "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  return out + format_xyz(cloud);
}

inline bool is_ply(const std::filesystem::path& p) { return p.extension() == ".ply" || p.extension() == ".PLY"; }

inline PointCloud read_cloud(const std::filesystem::path& path) {
  const std::string text = detail::read_file(path);
  try {
    return is_ply(path) ? parse_ply(text) : parse_xyz(text);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.line());
  }
}

inline void write_cloud(const std::filesystem::path& path, const PointCloud& cloud) {
  detail::write_file(path, is_ply(path) ? format_ply(cloud) : format_xyz(cloud));
}

// ---- hGMM trees -------------------------------------------------------------

inline json tree_to_json(const HgmmTree& tree) {
  json levels = json::array();
  for (int l = 1; l <= tree.depth(); ++l) {
    json lvl = json::array();
    for (const auto& g : tree.level(l)) {
      json cov = json::array();
      for (int r = 0; r < 3; ++r) cov.push_back({g.cov(r, 0), g.cov(r, 1), g.cov(r, 2)});
      lvl.push_back({{"weight", g.weight}, {"mean", {g.mean.x(), g.mean.y(), g.mean.z()}}, {"cov", cov}});
    }
    levels.push_back(std::move(lvl));
  }
  return {{"format_version", kFormatVersion},
          {"kind", "hgmm"},
          {"branching", tree.branching()},
          {"levels", std::move(levels)}};
}

inline void check_format_version(const json& j);

inline HgmmTree tree_from_json(const json& j) {
  check_format_version(j);
  try {
    if (j.contains("kind") && j.at("kind") != "hgmm") throw ParseError("JSON is not an hGMM tree");
    auto branching = j.at("branching").get<std::vector<int>>();
    std::vector<std::vector<Gaussian>> levels;
    for (const auto& lvl : j.at("levels")) {
      std::vector<Gaussian> gs;
      for (const auto& g : lvl) {
        Gaussian out;
        out.weight = g.at("weight").get<double>();
        const auto m = g.at("mean").get<std::vector<double>>();
        const auto c = g.at("cov").get<std::vector<std::vector<double>>>();
        if (m.size() != 3 || c.size() != 3) throw ParseError("mean must have 3 entries and cov 3 rows");
        for (int r = 0; r < 3; ++r) {
          out.mean[r] = m[static_cast<std::size_t>(r)];
          if (c[static_cast<std::size_t>(r)].size() != 3) throw ParseError("cov rows must have 3 entries");
          for (int k = 0; k < 3; ++k) out.cov(r, k) = c[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
        }
        gs.push_back(out);
      }
      levels.push_back(std::move(gs));
    }
    return HgmmTree(std::move(branching), std::move(levels));
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed hGMM JSON: ") + e.what());
  }
}

// ---- parameter sets ---------------------------------------------------------

inline json params_to_json(const ParamSet& ps) {
  json out = json::object();
  for (const auto& [name, t] : ps.entries()) out[name] = {{"shape", {t.rows(), t.cols()}}, {"data", t.values()}};
  return out;
}

inline ParamSet params_from_json(const json& j) {
  ParamSet ps;
  try {
    for (const auto& [name, v] : j.items()) {
      const auto shape = v.at("shape").get<std::vector<std::size_t>>();
      if (shape.size() != 2) throw ParseError("parameter '" + name + "' must be rank 2");
      ps.set(name, ad::Tensor(shape[0], shape[1], v.at("data").get<std::vector<double>>()));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed parameter JSON: ") + e.what());
  } catch (const UsageError& e) {
    throw ParseError(e.what());
  }
  return ps;
}

inline json read_json(const std::filesystem::path& path) {
  const std::string text = detail::read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const json& j) { detail::write_file(path, j.dump(1) + "\n"); }

inline void check_format_version(const json& j) {
  if (!j.contains("format_version")) throw ParseError("missing format_version");
  const int v = j.at("format_version").get<int>();
  if (v != kFormatVersion)
    throw ParseError("unsupported format_version " + std::to_string(v) + " (expected " +
                     std::to_string(kFormatVersion) + ")");
}

inline HgmmTree read_tree(const std::filesystem::path& path) { return tree_from_json(read_json(path)); }
inline void write_tree(const std::filesystem::path& path, const HgmmTree& tree) { write_json(path, tree_to_json(tree)); }

}  // namespace pointgmm::io

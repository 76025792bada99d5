/// ASCII mesh format:
///   SHAPE <dim> <n_vertices> <n_cells>
///   one vertex per line (dim floats, %.17g)
///   one cell per line (2 or 3 zero-based indices)
/// Unix newlines, UTF-8. Doubles round-trip exactly through %.17g.
#pragma once

#include "longshape/shape.hpp"
#include "longshape/types.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

namespace longshape {

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

[[noreturn]] inline void parse_fail(const std::string& path, int line, const std::string& what) {
  throw DataError(path + ":" + std::to_string(line) + ": " + what);
}

}  // namespace detail

inline void write_shape(const Shape& s, std::ostream& os) {
  const int verts_per_cell = s.dim == 2 ? 2 : 3;
  os << "SHAPE " << s.dim << ' ' << s.n_vertices() << ' ' << s.n_cells() << '\n';
  for (int v = 0; v < s.n_vertices(); ++v) {
    for (int k = 0; k < s.dim; ++k)
      os << (k ? " " : "") << detail::format_double(s.vertices(v, k));
    os << '\n';
  }
  for (int c = 0; c < s.n_cells(); ++c) {
    for (int k = 0; k < verts_per_cell; ++k) os << (k ? " " : "") << s.cells(c, k);
    os << '\n';
  }
}

inline void write_shape(const Shape& s, const std::string& path) {
  std::ofstream os(path, std::ios::binary);  // binary: keep Unix newlines everywhere
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  write_shape(s, os);
  if (!os) throw DataError("write failed for '" + path + "'");
}

inline Shape read_shape(std::istream& is, const std::string& path = "<stream>") {
  int line_no = 0;
  std::string line;
  auto next_line = [&]() -> std::string& {
    if (!std::getline(is, line)) detail::parse_fail(path, line_no + 1, "unexpected end of file");
    ++line_no;
    return line;
  };

  std::istringstream header(next_line());
  std::string magic;
  int dim = 0, nv = -1, nc = -1;
  if (!(header >> magic >> dim >> nv >> nc) || magic != "SHAPE")
    detail::parse_fail(path, line_no, "expected header 'SHAPE <dim> <n_vertices> <n_cells>'");
  if (dim != 2 && dim != 3) detail::parse_fail(path, line_no, "dim must be 2 or 3");
  if (nv < 0 || nc < 0) detail::parse_fail(path, line_no, "negative vertex or cell count");

  Shape s;
  s.dim = dim;
  s.vertices.resize(nv, dim);
  const int verts_per_cell = dim == 2 ? 2 : 3;
  s.cells.resize(nc, verts_per_cell);

  for (int v = 0; v < nv; ++v) {
    std::istringstream ls(next_line());
    for (int k = 0; k < dim; ++k)
      if (!(ls >> s.vertices(v, k)))
        detail::parse_fail(path, line_no, "expected " + std::to_string(dim) + " vertex coordinates");
    if (!std::isfinite(s.vertices.row(v).sum()))
      detail::parse_fail(path, line_no, "non-finite vertex coordinate");
  }
  for (int c = 0; c < nc; ++c) {
    std::istringstream ls(next_line());
    for (int k = 0; k < verts_per_cell; ++k) {
      if (!(ls >> s.cells(c, k)))
        detail::parse_fail(path, line_no, "expected " + std::to_string(verts_per_cell) + " cell indices");
      if (s.cells(c, k) < 0 || s.cells(c, k) >= nv)
        detail::parse_fail(path, line_no, "cell index " + std::to_string(s.cells(c, k)) +
                                              " out of range [0, " + std::to_string(nv) + ")");
    }
  }
  return s;
}

inline Shape read_shape(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open '" + path + "' for reading");
  return read_shape(is, path);
}

}  // namespace longshape

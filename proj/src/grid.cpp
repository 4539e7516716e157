#include "gliocal/grid.hpp"

#include <cctype>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <queue>
#include <sstream>

namespace gliocal {

Grid::Grid(int nx, int ny, double hx, double hy, std::vector<std::uint8_t> mask)
    : nx_(nx), ny_(ny), hx_(hx), hy_(hy), mask_(std::move(mask)) {
  if (nx_ < 4 || ny_ < 4) {
    throw DimensionMismatch("grid needs nx,ny >= 4, got " + std::to_string(nx_) + "x" +
                            std::to_string(ny_));
  }
  if (!(hx_ > 0.0) || !(hy_ > 0.0)) {
    throw DimensionMismatch("grid spacing must be positive");
  }
  if (static_cast<long long>(mask_.size()) != static_cast<long long>(nx_) * ny_) {
    throw DimensionMismatch("mask size " + std::to_string(mask_.size()) +
                            " does not match " + std::to_string(nx_) + "x" +
                            std::to_string(ny_));
  }

  cell_to_dof_.assign(mask_.size(), -1);
  for (int c = 0; c < size(); ++c) {
    if (mask_[c]) {
      cell_to_dof_[c] = static_cast<int>(dof_cells_.size());
      dof_cells_.push_back(c);
    }
  }
  if (dof_cells_.empty()) throw EmptyMask("mask has no active cells");

  // 4-connectivity check: every masked-in cell reachable from the first one.
  {
    std::vector<std::uint8_t> seen(dof_cells_.size(), 0);
    std::queue<int> q;
    q.push(0);
    seen[0] = 1;
    int reached = 1;
    while (!q.empty()) {
      const int d = q.front();
      q.pop();
      const int c = dof_cells_[d];
      const int i = c % nx_;
      const int j = c / nx_;
      const int nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
      for (auto& n : nb) {
        if (n[0] < 0 || n[0] >= nx_ || n[1] < 0 || n[1] >= ny_) continue;
        const int dn = cell_to_dof_[idx(n[0], n[1])];
        if (dn >= 0 && !seen[dn]) {
          seen[dn] = 1;
          ++reached;
          q.push(dn);
        }
      }
    }
    if (reached != n_dof()) {
      throw DisconnectedMask("mask splits into multiple 4-connected pieces");
    }
  }

  nbound_x_.assign(dof_cells_.size(), 0);
  nbound_y_.assign(dof_cells_.size(), 0);
  for (int j = 0; j < ny_; ++j) {
    for (int i = 0; i < nx_; ++i) {
      const int d = cell_to_dof_[idx(i, j)];
      if (d < 0) continue;
      // x-direction neighbor at i+1; domain edge or masked-out neighbor is a
      // boundary face of this cell.
      if (i + 1 < nx_) {
        const int dn = cell_to_dof_[idx(i + 1, j)];
        if (dn >= 0) {
          faces_x_.push_back({d, dn});
        } else {
          ++nbound_x_[d];
        }
      } else {
        ++nbound_x_[d];
      }
      if (i == 0 || cell_to_dof_[idx(i - 1, j)] < 0) ++nbound_x_[d];
      if (j + 1 < ny_) {
        const int dn = cell_to_dof_[idx(i, j + 1)];
        if (dn >= 0) {
          faces_y_.push_back({d, dn});
        } else {
          ++nbound_y_[d];
        }
      } else {
        ++nbound_y_[d];
      }
      if (j == 0 || cell_to_dof_[idx(i, j - 1)] < 0) ++nbound_y_[d];
    }
  }
}

Vec Grid::gather(const Vec& full) const {
  if (full.size() != size()) {
    throw DimensionMismatch("gather: field size " + std::to_string(full.size()) +
                            " != grid size " + std::to_string(size()));
  }
  Vec out(n_dof());
  for (int d = 0; d < n_dof(); ++d) out[d] = full[dof_cells_[d]];
  return out;
}

Vec Grid::scatter(const Vec& compact) const {
  if (compact.size() != n_dof()) {
    throw DimensionMismatch("scatter: vector size " + std::to_string(compact.size()) +
                            " != dof count " + std::to_string(n_dof()));
  }
  Vec out = Vec::Zero(size());
  for (int d = 0; d < n_dof(); ++d) out[dof_cells_[d]] = compact[d];
  return out;
}

bool Grid::same_shape(const Grid& other) const {
  return nx_ == other.nx_ && ny_ == other.ny_ && hx_ == other.hx_ &&
         hy_ == other.hy_ && mask_ == other.mask_;
}

GridPtr make_grid(int nx, int ny, double hx, double hy, std::vector<std::uint8_t> mask) {
  return std::make_shared<const Grid>(nx, ny, hx, hy, std::move(mask));
}

GridPtr make_full_grid(int nx, int ny, double hx, double hy) {
  return make_grid(nx, ny, hx, hy,
                   std::vector<std::uint8_t>(static_cast<size_t>(nx) * ny, 1));
}

void require_same_grid(const GridPtr& a, const GridPtr& b, const std::string& where) {
  if (!a || !b) throw GridMismatch(where + ": missing grid");
  if (a.get() == b.get()) return;
  if (!a->same_shape(*b)) throw GridMismatch(where + ": fields live on different grids");
}

ScalarField::ScalarField(GridPtr grid)
    : grid_(std::move(grid)), values_(Vec::Zero(grid_->size())) {}

ScalarField::ScalarField(GridPtr grid, Vec values)
    : grid_(std::move(grid)), values_(std::move(values)) {
  if (values_.size() != grid_->size()) {
    throw DimensionMismatch("scalar field size does not match grid");
  }
}

void ScalarField::clean() {
  for (int c = 0; c < grid_->size(); ++c) {
    if (!grid_->inside(c)) values_[c] = 0.0;
  }
}

BinaryMask::BinaryMask(GridPtr g)
    : grid(std::move(g)), on(grid->size(), 0) {}

BinaryMask::BinaryMask(GridPtr g, std::vector<std::uint8_t> v)
    : grid(std::move(g)), on(std::move(v)) {
  if (static_cast<int>(on.size()) != grid->size()) {
    throw DimensionMismatch("binary mask size does not match grid");
  }
  for (int c = 0; c < grid->size(); ++c) {
    if (on[c] && !grid->inside(c)) {
      throw NotAPartition("binary mask set on a masked-out cell");
    }
  }
}

int BinaryMask::count() const {
  int n = 0;
  for (auto v : on) n += v ? 1 : 0;
  return n;
}

BinaryMask brain_mask(const GridPtr& grid) {
  BinaryMask m(grid);
  for (int c = 0; c < grid->size(); ++c) m.on[c] = grid->inside(c) ? 1 : 0;
  return m;
}

RegionLabels::RegionLabels(GridPtr g)
    : grid(std::move(g)), label(grid->size(), Region::outside) {}

RegionLabels::RegionLabels(GridPtr g, std::vector<Region> v)
    : grid(std::move(g)), label(std::move(v)) {
  if (static_cast<int>(label.size()) != grid->size()) {
    throw DimensionMismatch("label image size does not match grid");
  }
}

RegionLabels labels_from_masks(const BinaryMask& gm, const BinaryMask& wm,
                               double band_halfwidth) {
  require_same_grid(gm.grid, wm.grid, "labels_from_masks");
  if (band_halfwidth < 0.0) throw ValidationError("band_halfwidth must be >= 0");
  const GridPtr& grid = gm.grid;
  RegionLabels out(grid);
  for (int c = 0; c < grid->size(); ++c) {
    const bool g = gm.on[c] != 0;
    const bool w = wm.on[c] != 0;
    if (grid->inside(c)) {
      if (g == w) {
        throw NotAPartition("GM/WM masks must cover each brain cell exactly once");
      }
      out.label[c] = g ? Region::gm : Region::wm;
    } else if (g || w) {
      throw NotAPartition("GM/WM masks set outside the brain");
    }
  }

  // Seam points: midpoints of faces joining a GM cell to a WM cell.
  std::vector<std::pair<double, double>> seams;
  auto side = [&](int dof) { return out.label[grid->dof_cells()[dof]]; };
  for (const auto& f : grid->faces_x()) {
    if (side(f.a) != side(f.b)) {
      const int c = grid->dof_cells()[f.a];
      seams.emplace_back(grid->cx(c % grid->nx()) + 0.5 * grid->hx(),
                         grid->cy(c / grid->nx()));
    }
  }
  for (const auto& f : grid->faces_y()) {
    if (side(f.a) != side(f.b)) {
      const int c = grid->dof_cells()[f.a];
      seams.emplace_back(grid->cx(c % grid->nx()),
                         grid->cy(c / grid->nx()) + 0.5 * grid->hy());
    }
  }
  if (seams.empty() || band_halfwidth == 0.0) return out;

  const double r2 = band_halfwidth * band_halfwidth;
  for (int d = 0; d < grid->n_dof(); ++d) {
    const int c = grid->dof_cells()[d];
    const double x = grid->cx(c % grid->nx());
    const double y = grid->cy(c / grid->nx());
    for (const auto& s : seams) {
      const double dx = x - s.first;
      const double dy = y - s.second;
      if (dx * dx + dy * dy <= r2) {
        out.label[c] = Region::interface_band;
        break;
      }
    }
  }
  return out;
}

BinaryMask mask_of_region(const RegionLabels& labels, Region r) {
  BinaryMask m(labels.grid);
  for (int c = 0; c < labels.grid->size(); ++c) {
    m.on[c] = (labels.label[c] == r) ? 1 : 0;
  }
  return m;
}

// --- text file formats -----------------------------------------------------

std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

namespace {

void write_header(std::ostream& os, const char* magic, const Grid& g) {
  os << magic << " 1\n";
  os << "nx " << g.nx() << " ny " << g.ny() << '\n';
  os << "hx " << format_double(g.hx()) << " hy " << format_double(g.hy()) << '\n';
}

struct LineReader {
  std::ifstream in;
  std::string path;
  int lineno = 0;

  explicit LineReader(const std::string& p) : in(p), path(p) {
    if (!in) throw FormatError(p + ": cannot open file");
  }

  bool next(std::string& line) {
    while (std::getline(in, line)) {
      ++lineno;
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(path + ":" + std::to_string(lineno) + ": " + msg);
  }
};

std::vector<std::string> tokenize(const std::string& line) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

double parse_double(const LineReader& r, const std::string& tok) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size() || errno == ERANGE) {
    r.fail("bad number '" + tok + "'");
  }
  return v;
}

long parse_int(const LineReader& r, const std::string& tok) {
  errno = 0;
  char* end = nullptr;
  const long v = std::strtol(tok.c_str(), &end, 10);
  if (end != tok.c_str() + tok.size() || errno == ERANGE) {
    r.fail("bad integer '" + tok + "'");
  }
  return v;
}

RawField read_raw(LineReader& r, const char* magic) {
  std::string line;
  if (!r.next(line)) r.fail("missing header");
  auto h = tokenize(line);
  if (h.size() != 2 || h[0] != magic || h[1] != "1") {
    r.fail("expected header '" + std::string(magic) + " 1'");
  }
  RawField f;
  if (!r.next(line)) r.fail("missing dimension line");
  h = tokenize(line);
  if (h.size() != 4 || h[0] != "nx" || h[2] != "ny") r.fail("expected 'nx <int> ny <int>'");
  f.nx = static_cast<int>(parse_int(r, h[1]));
  f.ny = static_cast<int>(parse_int(r, h[3]));
  if (!r.next(line)) r.fail("missing spacing line");
  h = tokenize(line);
  if (h.size() != 4 || h[0] != "hx" || h[2] != "hy") r.fail("expected 'hx <decimal> hy <decimal>'");
  f.hx = parse_double(r, h[1]);
  f.hy = parse_double(r, h[3]);
  if (f.nx <= 0 || f.ny <= 0) r.fail("non-positive grid dimensions");
  if (!(f.hx > 0.0) || !(f.hy > 0.0)) r.fail("non-positive grid spacing");
  f.values.resize(static_cast<long>(f.nx) * f.ny);
  for (int j = 0; j < f.ny; ++j) {
    if (!r.next(line)) r.fail("expected " + std::to_string(f.ny) + " data rows, file ended");
    const auto toks = tokenize(line);
    if (static_cast<int>(toks.size()) != f.nx) {
      r.fail("row has " + std::to_string(toks.size()) + " entries, expected " +
             std::to_string(f.nx));
    }
    for (int i = 0; i < f.nx; ++i) {
      f.values[static_cast<long>(j) * f.nx + i] = parse_double(r, toks[i]);
    }
  }
  while (r.next(line)) {
    if (!tokenize(line).empty()) r.fail("trailing content after data rows");
  }
  return f;
}

}  // namespace

void write_scalar_field(const ScalarField& f, const std::string& path) {
  const Grid& g = *f.grid();
  std::ofstream os(path);
  if (!os) throw FormatError(path + ": cannot open for writing");
  write_header(os, "SFIELD", g);
  for (int j = 0; j < g.ny(); ++j) {
    for (int i = 0; i < g.nx(); ++i) {
      if (i) os << ' ';
      os << format_double(g.inside(i, j) ? f(i, j) : 0.0);
    }
    os << '\n';
  }
  if (!os) throw FormatError(path + ": write failed");
}

void write_mask_file(const GridPtr& grid, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError(path + ": cannot open for writing");
  write_header(os, "MASK", *grid);
  for (int j = 0; j < grid->ny(); ++j) {
    for (int i = 0; i < grid->nx(); ++i) {
      if (i) os << ' ';
      os << (grid->inside(i, j) ? 1 : 0);
    }
    os << '\n';
  }
  if (!os) throw FormatError(path + ": write failed");
}

void write_labels_file(const RegionLabels& labels, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError(path + ": cannot open for writing");
  write_header(os, "LABELS", *labels.grid);
  const Grid& g = *labels.grid;
  for (int j = 0; j < g.ny(); ++j) {
    for (int i = 0; i < g.nx(); ++i) {
      if (i) os << ' ';
      os << static_cast<int>(labels.label[g.idx(i, j)]);
    }
    os << '\n';
  }
  if (!os) throw FormatError(path + ": write failed");
}

RawField read_sfield_raw(const std::string& path) {
  LineReader r(path);
  return read_raw(r, "SFIELD");
}

RawField read_raw_file(const std::string& path, const std::string& magic) {
  LineReader r(path);
  return read_raw(r, magic.c_str());
}

void write_raw_field(const RawField& raw, const std::string& magic, const std::string& path) {
  if (raw.nx <= 0 || raw.ny <= 0 || raw.values.size() != static_cast<long>(raw.nx) * raw.ny)
    throw DimensionMismatch(path + ": raw field shape is inconsistent");
  std::ofstream os(path);
  if (!os) throw FormatError(path + ": cannot open for writing");
  os << magic << " 1\n";
  os << "nx " << raw.nx << " ny " << raw.ny << '\n';
  os << "hx " << format_double(raw.hx) << " hy " << format_double(raw.hy) << '\n';
  for (int j = 0; j < raw.ny; ++j) {
    for (int i = 0; i < raw.nx; ++i) {
      if (i) os << ' ';
      os << format_double(raw.values[static_cast<long>(j) * raw.nx + i]);
    }
    os << '\n';
  }
  if (!os) throw FormatError(path + ": write failed");
}

ScalarField read_scalar_field(const std::string& path, const GridPtr& grid) {
  const RawField raw = read_sfield_raw(path);
  if (raw.nx != grid->nx() || raw.ny != grid->ny() || raw.hx != grid->hx() ||
      raw.hy != grid->hy()) {
    throw GridMismatch(path + ": field header does not match the target grid");
  }
  ScalarField f(grid, raw.values);
  f.clean();
  return f;
}

GridPtr read_grid_mask(const std::string& path) {
  LineReader r(path);
  const RawField raw = read_raw(r, "MASK");
  std::vector<std::uint8_t> mask(raw.values.size());
  for (long c = 0; c < raw.values.size(); ++c) {
    if (raw.values[c] == 0.0) {
      mask[c] = 0;
    } else if (raw.values[c] == 1.0) {
      mask[c] = 1;
    } else {
      throw FormatError(path + ": mask entries must be 0 or 1");
    }
  }
  return make_grid(raw.nx, raw.ny, raw.hx, raw.hy, std::move(mask));
}

RegionLabels read_labels_file(const std::string& path, const GridPtr& grid) {
  LineReader r(path);
  const RawField raw = read_raw(r, "LABELS");
  if (raw.nx != grid->nx() || raw.ny != grid->ny() || raw.hx != grid->hx() ||
      raw.hy != grid->hy()) {
    throw GridMismatch(path + ": labels header does not match the target grid");
  }
  RegionLabels labels(grid);
  for (int c = 0; c < grid->size(); ++c) {
    const double v = raw.values[c];
    if (v != 0.0 && v != 1.0 && v != 2.0 && v != 3.0) {
      throw UnknownLabelValue(path + ": label values must be 0..3");
    }
    const auto lab = static_cast<Region>(static_cast<int>(v));
    if (grid->inside(c)) {
      if (lab == Region::outside) {
        throw NotAPartition(path + ": brain cell labeled as outside");
      }
      labels.label[c] = lab;
    } else if (lab != Region::outside) {
      throw NotAPartition(path + ": masked-out cell carries a tissue label");
    }
  }
  return labels;
}

}  // namespace gliocal

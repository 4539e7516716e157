#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "gliocal/errors.hpp"

namespace gliocal {

using Vec = Eigen::VectorXd;

enum class Region : std::uint8_t {
  outside = 0,
  gm = 1,
  wm = 2,
  interface_band = 3,
};

// Uniform cell-centered 2D grid with a brain mask. Cells are stored
// row-major (index = j*nx + i). Masked-in cells get a compact dof index;
// all PDE algebra runs on the compact vectors, full-size fields exist only
// at the API boundary.
class Grid {
public:
  // Faces join two masked-in cells; (a,b) are compact dof ids.
  struct Face {
    int a;
    int b;
  };

  Grid(int nx, int ny, double hx, double hy, std::vector<std::uint8_t> mask);

  int nx() const { return nx_; }
  int ny() const { return ny_; }
  double hx() const { return hx_; }
  double hy() const { return hy_; }
  int size() const { return nx_ * ny_; }
  double cell_area() const { return hx_ * hy_; }

  int idx(int i, int j) const { return j * nx_ + i; }
  double cx(int i) const { return (i + 0.5) * hx_; }
  double cy(int j) const { return (j + 0.5) * hy_; }
  double extent_x() const { return nx_ * hx_; }
  double extent_y() const { return ny_ * hy_; }

  bool inside(int cell) const { return mask_[cell] != 0; }
  bool inside(int i, int j) const { return mask_[idx(i, j)] != 0; }
  const std::vector<std::uint8_t>& mask() const { return mask_; }

  int n_dof() const { return static_cast<int>(dof_cells_.size()); }
  const std::vector<int>& dof_cells() const { return dof_cells_; }
  // -1 when the cell is masked out.
  int dof_of(int cell) const { return cell_to_dof_[cell]; }

  const std::vector<Face>& faces_x() const { return faces_x_; }
  const std::vector<Face>& faces_y() const { return faces_y_; }
  // Number of mask-boundary faces of each dof, split by direction. Used for
  // Robin boundary terms.
  const std::vector<std::uint8_t>& boundary_faces_x() const { return nbound_x_; }
  const std::vector<std::uint8_t>& boundary_faces_y() const { return nbound_y_; }

  Vec gather(const Vec& full) const;
  Vec scatter(const Vec& compact) const;

  bool same_shape(const Grid& other) const;

private:
  int nx_ = 0;
  int ny_ = 0;
  double hx_ = 0.0;
  double hy_ = 0.0;
  std::vector<std::uint8_t> mask_;
  std::vector<int> cell_to_dof_;
  std::vector<int> dof_cells_;
  std::vector<Face> faces_x_;
  std::vector<Face> faces_y_;
  std::vector<std::uint8_t> nbound_x_;
  std::vector<std::uint8_t> nbound_y_;
};

using GridPtr = std::shared_ptr<const Grid>;

GridPtr make_grid(int nx, int ny, double hx, double hy, std::vector<std::uint8_t> mask);
GridPtr make_full_grid(int nx, int ny, double hx, double hy);

// Throws GridMismatch unless both fields live on structurally equal grids.
void require_same_grid(const GridPtr& a, const GridPtr& b, const std::string& where);

// Cell-centered scalar field bound to a grid. Values on masked-out cells are
// kept at zero; operations only ever look at masked-in entries.
class ScalarField {
public:
  explicit ScalarField(GridPtr grid);
  ScalarField(GridPtr grid, Vec values);

  const GridPtr& grid() const { return grid_; }
  const Vec& values() const { return values_; }
  Vec& values() { return values_; }

  double operator()(int i, int j) const { return values_[grid_->idx(i, j)]; }
  double& operator()(int i, int j) { return values_[grid_->idx(i, j)]; }

  Vec compact() const { return grid_->gather(values_); }
  void set_compact(const Vec& v) { values_ = grid_->scatter(v); }
  // Zero out entries on masked-out cells.
  void clean();

private:
  GridPtr grid_;
  Vec values_;
};

struct BinaryMask {
  GridPtr grid;
  std::vector<std::uint8_t> on;

  BinaryMask() = default;
  explicit BinaryMask(GridPtr g);
  BinaryMask(GridPtr g, std::vector<std::uint8_t> v);
  int count() const;
};

BinaryMask brain_mask(const GridPtr& grid);

struct RegionLabels {
  GridPtr grid;
  std::vector<Region> label;

  RegionLabels() = default;
  explicit RegionLabels(GridPtr g);
  RegionLabels(GridPtr g, std::vector<Region> v);
};

// Build labels from GM/WM masks: the two masks must partition the brain.
// Cells whose center lies within band_halfwidth (mm) of the midpoint of any
// face joining a GM cell to a WM cell are relabeled as the interface band.
RegionLabels labels_from_masks(const BinaryMask& gm, const BinaryMask& wm,
                               double band_halfwidth);

BinaryMask mask_of_region(const RegionLabels& labels, Region r);

// --- text file formats -----------------------------------------------------
// All three formats share a three-line header (magic + version, cell counts,
// cell sizes) followed by ny rows of nx whitespace-separated entries. Doubles
// are written with 17 significant digits so read(write(x)) is bitwise exact.

void write_scalar_field(const ScalarField& f, const std::string& path);
void write_mask_file(const GridPtr& grid, const std::string& path);
void write_labels_file(const RegionLabels& labels, const std::string& path);

// Raw field = header + values without any mask; used for images as well.
struct RawField {
  int nx = 0;
  int ny = 0;
  double hx = 0.0;
  double hy = 0.0;
  Vec values;
};

RawField read_sfield_raw(const std::string& path);
// Generic form for the other magics (images reuse SFIELD, raw label rasters
// use LABELS without grid checks).
RawField read_raw_file(const std::string& path, const std::string& magic);
void write_raw_field(const RawField& raw, const std::string& magic, const std::string& path);
ScalarField read_scalar_field(const std::string& path, const GridPtr& grid);
GridPtr read_grid_mask(const std::string& path);
RegionLabels read_labels_file(const std::string& path, const GridPtr& grid);

std::string format_double(double x);

}  // namespace gliocal

#pragma once
#include <array>
#include <cstddef>
#include <vector>

#include "invmat/errors.hpp"

namespace invmat {

using Vec3 = std::array<double, 3>;

// Per-element material field in normalized space. Channels 0/1/2 are the
// normalized (E, nu, rho). Storage is row-major over (z, y, x) with the
// channel as the minor index, matching the on-disk tensor layout. 2D grids
// are nz == 1.
struct Grid {
  int dims = 2;
  int nx = 0, ny = 0, nz = 1;
  std::vector<double> data;

  Grid() = default;
  Grid(int dims_, int nx_, int ny_, int nz_ = 1)
      : dims(dims_), nx(nx_), ny(ny_), nz(dims_ == 2 ? 1 : nz_) {
    if (dims != 2 && dims != 3) throw ValidationError("grid dims must be 2 or 3");
    if (nx <= 0 || ny <= 0 || nz <= 0) throw ValidationError("grid shape must be positive");
    data.assign(size_t(3) * nx * ny * nz, 0.0);
  }

  size_t elements() const { return size_t(nx) * ny * nz; }
  size_t element_index(int ix, int iy, int iz) const {
    return (size_t(iz) * ny + iy) * nx + ix;
  }
  double& at(int ix, int iy, int iz, int c) {
    return data[element_index(ix, iy, iz) * 3 + c];
  }
  double at(int ix, int iy, int iz, int c) const {
    return data[element_index(ix, iy, iz) * 3 + c];
  }
  Vec3 element(size_t e) const {
    return {data[e * 3], data[e * 3 + 1], data[e * 3 + 2]};
  }
  void set_element(size_t e, const Vec3& v) {
    data[e * 3] = v[0];
    data[e * 3 + 1] = v[1];
    data[e * 3 + 2] = v[2];
  }
  bool same_shape(const Grid& o) const {
    return dims == o.dims && nx == o.nx && ny == o.ny && nz == o.nz;
  }
};

}  // namespace invmat

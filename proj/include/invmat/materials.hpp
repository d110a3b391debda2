#pragma once
#include <string>
#include <vector>

#include "invmat/grid.hpp"
#include "invmat/rng.hpp"

namespace invmat {

// Fixed normalization anchors (selection bounds, not catalog min/max): grids
// stay comparable across catalogs and line up with the 10x10x10 chunk grid.
inline constexpr double kEMax = 500.0;
inline constexpr double kNuMax = 0.5;
inline constexpr double kRhoMax = 10.0;

struct MaterialRecord {
  int id = 0;
  double E = 0.0;    // GPa
  double nu = 0.0;   // Poisson ratio
  double rho = 0.0;  // g/cm^3
};

struct ChunkIndex {
  int i = 0, j = 0, k = 0;
  int flat() const { return (i * 10 + j) * 10 + k; }
  bool operator==(const ChunkIndex&) const = default;
};

class Catalog {
 public:
  explicit Catalog(std::vector<MaterialRecord> records);

  const std::vector<MaterialRecord>& records() const { return records_; }
  size_t size() const { return records_.size(); }
  const MaterialRecord& by_index(size_t i) const { return records_[i]; }

  // Nonempty chunks in ascending flat-id order; fixed order keeps two-stage
  // sampling reproducible.
  const std::vector<int>& nonempty_chunks() const { return chunk_ids_; }
  const std::vector<std::vector<int>>& chunk_members() const { return members_; }

 private:
  std::vector<MaterialRecord> records_;
  std::vector<int> chunk_ids_;               // flat chunk ids, ascending
  std::vector<std::vector<int>> members_;    // record indices per chunk id
};

Catalog load_catalog(const std::string& path);
void save_catalog(const Catalog& catalog, const std::string& path);

Catalog generate_synthetic_catalog(uint64_t seed, int n);

// Affine map of (E, nu, rho) onto [-1,1]^3 with the fixed anchors. Inputs
// outside the anchors are clamped; 'clamped' reports that (generated grids
// may drift out of range).
Vec3 normalize_material(const Vec3& physical, bool* clamped = nullptr);
Vec3 denormalize_material(const Vec3& normalized);

ChunkIndex chunk_index(const MaterialRecord& m);
ChunkIndex chunk_index_of(const Vec3& physical);

// Two-stage draw: uniform over nonempty chunks, then uniform inside the
// chunk. Gives sparse chunks the same marginal weight as crowded ones.
const MaterialRecord& sample_material(const Catalog& catalog, Rng& rng);

struct NearestMaterial {
  const MaterialRecord* record;
  double distance;  // Euclidean, normalized space
};

// Ties broken by lowest id.
NearestMaterial nearest_material(const Catalog& catalog, const Vec3& normalized);

}  // namespace invmat

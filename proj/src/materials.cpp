#include "invmat/materials.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "invmat/errors.hpp"

namespace invmat {

namespace {

void validate_record(const MaterialRecord& m, std::vector<std::string>& bad) {
  if (!(m.E > 0.0 && m.E <= kEMax) || !(m.nu > 0.0 && m.nu < kNuMax) ||
      !(m.rho > 0.0 && m.rho < kRhoMax)) {
    bad.push_back("id " + std::to_string(m.id));
  }
}

}  // namespace

Catalog::Catalog(std::vector<MaterialRecord> records) : records_(std::move(records)) {
  if (records_.empty()) throw ValidationError("empty catalog");
  std::vector<std::string> bad;
  std::map<int, int> seen;
  for (const auto& m : records_) {
    validate_record(m, bad);
    if (++seen[m.id] > 1) throw ValidationError("duplicate material id " + std::to_string(m.id));
  }
  if (!bad.empty()) {
    std::string msg = "material out of range:";
    for (const auto& s : bad) msg += " " + s;
    throw ValidationError(msg);
  }
  std::map<int, std::vector<int>> by_chunk;
  for (size_t i = 0; i < records_.size(); ++i)
    by_chunk[chunk_index(records_[i]).flat()].push_back(int(i));
  for (auto& [id, members] : by_chunk) {
    chunk_ids_.push_back(id);
    members_.push_back(std::move(members));
  }
}

Catalog load_catalog(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open catalog file: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ValidationError("empty catalog file: " + path);
  auto strip = [](std::string s) {
    s.erase(0, s.find_first_not_of(" \t\r"));
    s.erase(s.find_last_not_of(" \t\r") + 1);
    return s;
  };
  if (strip(line) != "id,E,nu,rho")
    throw ValidationError("catalog header must be 'id,E,nu,rho' in " + path);
  std::vector<MaterialRecord> records;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (strip(line).empty()) continue;
    std::stringstream ss(line);
    std::string field;
    MaterialRecord m;
    try {
      if (!std::getline(ss, field, ',')) throw std::invalid_argument("id");
      m.id = std::stoi(strip(field));
      if (!std::getline(ss, field, ',')) throw std::invalid_argument("E");
      m.E = std::stod(strip(field));
      if (!std::getline(ss, field, ',')) throw std::invalid_argument("nu");
      m.nu = std::stod(strip(field));
      if (!std::getline(ss, field, ',')) throw std::invalid_argument("rho");
      m.rho = std::stod(strip(field));
    } catch (const std::exception&) {
      throw ValidationError("malformed catalog row at line " + std::to_string(lineno) +
                            " in " + path);
    }
    records.push_back(m);
  }
  if (records.empty()) throw ValidationError("catalog has no records: " + path);
  return Catalog(std::move(records));
}

void save_catalog(const Catalog& catalog, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write catalog file: " + path);
  out << "id,E,nu,rho\n";
  char buf[128];
  for (const auto& m : catalog.records()) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", m.id, m.E, m.nu, m.rho);
    out << buf;
  }
  if (!out) throw IoError("write failed: " + path);
}

Catalog generate_synthetic_catalog(uint64_t seed, int n) {
  if (n < 2) throw ValidationError("catalog needs at least 2 materials");
  Rng rng = Rng::stream(seed, 0);
  const int target_chunks = std::min(168, n);

  // Weighted selection of distinct chunks, skewed toward low E to mimic the
  // crowded low-stiffness end of real material databases.
  std::vector<double> weight(1000);
  for (int i = 0; i < 10; ++i)
    for (int j = 0; j < 10; ++j)
      for (int k = 0; k < 10; ++k) weight[(i * 10 + j) * 10 + k] = std::exp(-i / 3.0);
  std::vector<int> chunks;
  for (int pick = 0; pick < target_chunks; ++pick) {
    double total = 0.0;
    for (double w : weight) total += w;
    double r = rng.uniform() * total, acc = 0.0;
    int chosen = -1;
    for (int c = 0; c < 1000; ++c) {
      acc += weight[c];
      if (r < acc) { chosen = c; break; }
    }
    if (chosen < 0) chosen = 999;
    chunks.push_back(chosen);
    weight[chosen] = 0.0;
  }

  auto sample_in_chunk = [&rng](int flat) {
    int i = flat / 100, j = (flat / 10) % 10, k = flat % 10;
    // Stay strictly inside the open bounds at the extreme segments.
    auto coord = [&rng](int idx, double width) {
      return (idx + rng.uniform(1e-4, 1.0 - 1e-4)) * width;
    };
    MaterialRecord m;
    m.E = coord(i, kEMax / 10.0);
    m.nu = coord(j, kNuMax / 10.0);
    m.rho = coord(k, kRhoMax / 10.0);
    return m;
  };

  std::vector<MaterialRecord> records;
  std::vector<int> count(target_chunks, 0);
  for (int c = 0; c < target_chunks && int(records.size()) < n; ++c) {
    records.push_back(sample_in_chunk(chunks[c]));
    count[c] = 1;
  }
  const int cap = std::max(2, (2 * n + target_chunks - 1) / target_chunks);
  while (int(records.size()) < n) {
    int c = int(rng.uniform_int(target_chunks));
    if (count[c] >= cap) continue;
    records.push_back(sample_in_chunk(chunks[c]));
    ++count[c];
  }
  for (size_t i = 0; i < records.size(); ++i) records[i].id = int(i) + 1;
  return Catalog(std::move(records));
}

Vec3 normalize_material(const Vec3& physical, bool* clamped) {
  const Vec3 half = {kEMax / 2, kNuMax / 2, kRhoMax / 2};
  Vec3 out;
  bool c = false;
  for (int d = 0; d < 3; ++d) {
    double x = physical[d] / half[d] - 1.0;
    if (x < -1.0) { x = -1.0; c = true; }
    if (x > 1.0) { x = 1.0; c = true; }
    out[d] = x;
  }
  if (clamped) *clamped = c;
  return out;
}

Vec3 denormalize_material(const Vec3& normalized) {
  const Vec3 half = {kEMax / 2, kNuMax / 2, kRhoMax / 2};
  return {(normalized[0] + 1.0) * half[0], (normalized[1] + 1.0) * half[1],
          (normalized[2] + 1.0) * half[2]};
}

ChunkIndex chunk_index_of(const Vec3& physical) {
  auto seg = [](double v, double upper) {
    int i = int(std::floor(10.0 * v / upper));
    return std::clamp(i, 0, 9);
  };
  return {seg(physical[0], kEMax), seg(physical[1], kNuMax), seg(physical[2], kRhoMax)};
}

ChunkIndex chunk_index(const MaterialRecord& m) {
  return chunk_index_of({m.E, m.nu, m.rho});
}

const MaterialRecord& sample_material(const Catalog& catalog, Rng& rng) {
  const auto& members = catalog.chunk_members();
  const auto& chunk = members[rng.uniform_int(members.size())];
  return catalog.by_index(chunk[rng.uniform_int(chunk.size())]);
}

NearestMaterial nearest_material(const Catalog& catalog, const Vec3& normalized) {
  const MaterialRecord* best = nullptr;
  double best_d2 = 0.0;
  for (const auto& m : catalog.records()) {
    Vec3 p = normalize_material({m.E, m.nu, m.rho});
    double d2 = 0.0;
    for (int d = 0; d < 3; ++d) {
      double diff = p[d] - normalized[d];
      d2 += diff * diff;
    }
    if (!best || d2 < best_d2 || (d2 == best_d2 && m.id < best->id)) {
      best = &m;
      best_d2 = d2;
    }
  }
  return {best, std::sqrt(best_d2)};
}

}  // namespace invmat

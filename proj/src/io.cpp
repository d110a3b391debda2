#include "invmat/io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "invmat/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "container format assumes a little-endian host");
static_assert(sizeof(float) == 4, "container blobs are 32-bit floats");

namespace invmat {

namespace {

void put_u64(std::ofstream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), 8);
}

uint64_t get_u64(std::ifstream& in) {
  uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

}  // namespace

void write_container(const std::string& path, const std::string& magic,
                     const Json& manifest, const std::vector<float>& blob) {
  if (magic.size() != 8) throw IoError("container magic must be 8 bytes");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(magic.data(), 8);
  const std::string m = manifest.dump();
  put_u64(out, m.size());
  out.write(m.data(), std::streamsize(m.size()));
  put_u64(out, blob.size());
  out.write(reinterpret_cast<const char*>(blob.data()),
            std::streamsize(blob.size() * sizeof(float)));
  if (!out) throw IoError("write failed: " + path);
}

Container read_container(const std::string& path, const std::string& magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  char got[8];
  in.read(got, 8);
  if (!in || std::memcmp(got, magic.data(), 8) != 0)
    throw IoError("bad magic in " + path + " (expected " + magic + ")");
  const uint64_t mlen = get_u64(in);
  if (!in || mlen > (1ull << 32)) throw IoError("corrupt manifest length in " + path);
  std::string m(mlen, '\0');
  in.read(m.data(), std::streamsize(mlen));
  if (!in) throw IoError("truncated manifest in " + path);
  Container c;
  try {
    c.manifest = Json::parse(m);
  } catch (const std::exception& e) {
    throw IoError("invalid manifest JSON in " + path + ": " + e.what());
  }
  const uint64_t n = get_u64(in);
  if (!in) throw IoError("truncated blob header in " + path);
  c.blob.resize(n);
  in.read(reinterpret_cast<char*>(c.blob.data()), std::streamsize(n * sizeof(float)));
  if (!in || size_t(in.gcount()) != n * sizeof(float))
    throw IoError("truncated blob in " + path);
  return c;
}

std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(text.data(), std::streamsize(text.size()));
  if (!out) throw IoError("write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

}  // namespace invmat

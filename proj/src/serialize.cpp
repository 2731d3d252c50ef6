#include "seibw/serialize.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace seibw {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  std::uint32_t u32() {
    SEIBW_CHECK_FORMAT(pos + 4 <= buf.size(), "container truncated");
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(buf[pos + i]);
    pos += 4;
    return v;
  }

  float f32() {
    const std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::string bytes(std::size_t n) {
    SEIBW_CHECK_FORMAT(pos + n <= buf.size(), "container truncated");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void write_container(const std::string& path, const std::vector<NamedTensor>& records) {
  std::string out;
  out += "SEIB";
  put_u32(out, kContainerVersion);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& rec : records) {
    put_u32(out, static_cast<std::uint32_t>(rec.name.size()));
    out += rec.name;
    put_u32(out, static_cast<std::uint32_t>(rec.tensor.rank()));
    for (auto d : rec.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < rec.tensor.numel(); ++i) put_f32(out, rec.tensor[i]);
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    SEIBW_CHECK(f.good(), "cannot open for write: " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    SEIBW_CHECK(f.good(), "write failed: " + tmp);
  }
  SEIBW_CHECK(std::rename(tmp.c_str(), path.c_str()) == 0, "rename failed: " + path);
}

std::vector<NamedTensor> read_container(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  SEIBW_CHECK_FORMAT(f.good(), "cannot open container: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  SEIBW_CHECK_FORMAT(r.bytes(4) == "SEIB", "bad container magic: " + path);
  const std::uint32_t version = r.u32();
  SEIBW_CHECK_FORMAT(version == kContainerVersion, "unsupported container version");
  const std::uint32_t count = r.u32();

  std::vector<NamedTensor> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor rec;
    const std::uint32_t name_len = r.u32();
    rec.name = r.bytes(name_len);
    const std::uint32_t rank = r.u32();
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = r.u32();
      SEIBW_CHECK_FORMAT(shape[d] > 0, "container: zero dimension");
      numel *= shape[d];
    }
    if (rank == 0) numel = 0;
    SEIBW_CHECK_FORMAT(r.pos + 4 * numel <= buf.size(), "container truncated");
    TensorT<float> t(shape);
    for (std::size_t j = 0; j < numel; ++j) t[j] = r.f32();
    rec.tensor = std::move(t);
    records.push_back(std::move(rec));
  }
  SEIBW_CHECK_FORMAT(r.pos == buf.size(), "container has trailing bytes");
  return records;
}

const Tensor* find_record(const std::vector<NamedTensor>& records, const std::string& name) {
  for (const auto& rec : records)
    if (rec.name == name) return &rec.tensor;
  return nullptr;
}

}  // namespace seibw

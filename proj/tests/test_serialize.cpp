#include <cstring>
#include <fstream>

#include "doctest.h"
#include "seibw/serialize.hpp"

using namespace seibw;

TEST_CASE("container golden bytes") {
  Tensor t = Tensor::from_data({2}, {1.0f, -2.0f});
  const std::string path = "/tmp/seibw_golden.seib";
  write_container(path, {{"ab", t}});

  std::ifstream f(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  std::string want;
  want += "SEIB";
  auto le32 = [&](std::uint32_t v) {
    want.push_back(static_cast<char>(v & 0xff));
    want.push_back(static_cast<char>((v >> 8) & 0xff));
    want.push_back(static_cast<char>((v >> 16) & 0xff));
    want.push_back(static_cast<char>((v >> 24) & 0xff));
  };
  le32(1);  // version
  le32(1);  // record count
  le32(2);  // name length
  want += "ab";
  le32(1);  // rank
  le32(2);  // dim
  for (float v : {1.0f, -2.0f}) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    le32(bits);
  }
  CHECK(bytes == want);
}

TEST_CASE("container round trip") {
  Tensor a = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_data({4}, {0.5f, -0.5f, 100.0f, -1e-7f});
  const std::string path = "/tmp/seibw_rt.seib";
  write_container(path, {{"weights", a}, {"bias", b}});

  auto records = read_container(path);
  REQUIRE(records.size() == 2);
  CHECK(records[0].name == "weights");
  CHECK(records[0].tensor.shape() == a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(records[0].tensor[i] == a[i]);
  const Tensor* found = find_record(records, "bias");
  REQUIRE(found != nullptr);
  for (std::size_t i = 0; i < b.numel(); ++i) CHECK((*found)[i] == b[i]);
  CHECK(find_record(records, "nope") == nullptr);

  SUBCASE("write-read-write is byte-identical") {
    const std::string path2 = "/tmp/seibw_rt2.seib";
    write_container(path2, records.size() == 2
                               ? std::vector<NamedTensor>{records[0], records[1]}
                               : std::vector<NamedTensor>{});
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
  }
}

TEST_CASE("container rejects corruption") {
  const std::string path = "/tmp/seibw_corrupt.seib";
  Tensor a = Tensor::from_data({3}, {1, 2, 3});
  write_container(path, {{"x", a}});

  std::ifstream f(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  f.close();

  SUBCASE("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream o(path, std::ios::binary | std::ios::trunc);
    o.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    o.close();
    CHECK_THROWS_AS(read_container(path), FormatError);
  }
  SUBCASE("truncated payload") {
    std::string bad = bytes.substr(0, bytes.size() - 3);
    std::ofstream o(path, std::ios::binary | std::ios::trunc);
    o.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    o.close();
    CHECK_THROWS_AS(read_container(path), FormatError);
  }
  SUBCASE("trailing bytes") {
    std::string bad = bytes + "zz";
    std::ofstream o(path, std::ios::binary | std::ios::trunc);
    o.write(bad.data(), static_cast<std::streamsize>(bad.size()));
    o.close();
    CHECK_THROWS_AS(read_container(path), FormatError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(read_container("/tmp/seibw_none.seib"), FormatError); }
}

TEST_CASE("writes are atomic: no temp file remains") {
  const std::string path = "/tmp/seibw_atomic.seib";
  Tensor a({5}, 1.0f);
  write_container(path, {{"x", a}});
  std::ifstream tmp(path + ".tmp");
  CHECK_FALSE(tmp.good());
}

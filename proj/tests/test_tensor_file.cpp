#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "retainkv/tensor_file.hpp"

using namespace retainkv;
namespace fs = std::filesystem;

namespace {

fs::path scratch_file(const char* name) {
  fs::path dir = fs::temp_directory_path() / "retainkv_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

}  // namespace

TEST_CASE("tensor container round-trips bit-exactly") {
  Rng rng(7);
  Mat<double> w(5, 9);
  for (auto& v : w.data) v = rng.normal();
  Mat<float> wf(3, 4);
  for (auto& v : wf.data) v = static_cast<float>(rng.normal());
  std::vector<double> gains = {1.0, -0.25, 3.5};

  TensorFile tf;
  tf.put("layer0.wq", w);
  tf.put("layer0.wq_f32", wf);
  tf.put("final_norm", gains);

  auto path = scratch_file("roundtrip.rkv");
  tf.save(path.string());
  TensorFile back = TensorFile::load(path.string());

  Mat<double> w2 = back.get_mat<double>("layer0.wq");
  REQUIRE(w2.rows == 5);
  REQUIRE(w2.cols == 9);
  CHECK(std::memcmp(w2.data.data(), w.data.data(), w.data.size() * 8) == 0);

  Mat<float> wf2 = back.get_mat<float>("layer0.wq_f32");
  CHECK(std::memcmp(wf2.data.data(), wf.data.data(), wf.data.size() * 4) == 0);

  auto g2 = back.get_vec<double>("final_norm");
  CHECK(g2 == gains);

  // resaving an unchanged store reproduces identical bytes
  auto path2 = scratch_file("roundtrip2.rkv");
  back.save(path2.string());
  CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("tensor container starts with the magic bytes") {
  TensorFile tf;
  tf.put("x", std::vector<double>{1.0});
  auto path = scratch_file("magic.rkv");
  tf.save(path.string());
  std::string bytes = slurp(path);
  REQUIRE(bytes.size() >= 12);
  CHECK(bytes.substr(0, 4) == "RKV1");
}

TEST_CASE("tensor container converts dtype on request") {
  TensorFile tf;
  tf.put("v", std::vector<double>{1.5, -2.25});
  auto path = scratch_file("convert.rkv");
  tf.save(path.string());
  auto back = TensorFile::load(path.string());
  auto vf = back.get_vec<float>("v");
  CHECK(vf == std::vector<float>{1.5f, -2.25f});
}

TEST_CASE("tensor container rejects a bad magic") {
  auto path = scratch_file("badmagic.rkv");
  std::ofstream f(path, std::ios::binary);
  f << "NOPE" << std::string(32, '\0');
  f.close();
  CHECK_THROWS_AS(TensorFile::load(path.string()), DataError);
}

TEST_CASE("tensor container rejects truncated data") {
  TensorFile tf;
  std::vector<double> big(64, 3.0);
  tf.put("big", big);
  auto path = scratch_file("trunc.rkv");
  tf.save(path.string());
  std::string bytes = slurp(path);
  auto cut = scratch_file("trunc_cut.rkv");
  std::ofstream f(cut, std::ios::binary);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 40));
  f.close();
  CHECK_THROWS_AS(TensorFile::load(cut.string()), DataError);
}

TEST_CASE("tensor container reports missing tensors") {
  TensorFile tf;
  tf.put("a", std::vector<double>{1.0});
  CHECK_THROWS_AS(tf.get_vec<double>("b"), DataError);
}

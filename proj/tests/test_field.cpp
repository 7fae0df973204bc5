#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "fieldreg/field.hpp"
#include "fieldreg/rng.hpp"

namespace fs = std::filesystem;
using namespace fieldreg;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("fieldreg_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<unsigned char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Dataset make_dataset(std::uint64_t seed, int n, int h, int w, int ci, int co) {
  Rng rng(seed);
  Dataset ds;
  ds.seed = seed;
  for (int i = 0; i < n; ++i) {
    Field in(h, w, ci), out(h, w, co);
    for (double& v : in.data) v = rng.normal();
    for (double& v : out.data) v = rng.normal();
    ds.inputs.push_back(std::move(in));
    ds.outputs.push_back(std::move(out));
  }
  return ds;
}

}  // namespace

TEST(Field, ChannelMajorLayout) {
  Field f(3, 4, 2);
  f.at(1, 2, 3) = 7.0;
  EXPECT_EQ(f.data[(1 * 3 + 2) * 4 + 3], 7.0);
  EXPECT_EQ(f.chan(1), f.data.data() + 12);
  EXPECT_EQ(f.size(), 24u);
}

TEST(Field, RejectsBadDimensions) {
  EXPECT_THROW(Field(0, 4, 1), std::invalid_argument);
  EXPECT_THROW(Field(4, -1, 1), std::invalid_argument);
  EXPECT_THROW(Field(4, 4, 0), std::invalid_argument);
}

TEST(DatasetIo, RoundTripBitExact) {
  auto dir = temp_dir("roundtrip");
  Dataset ds = make_dataset(42, 5, 6, 7, 2, 3);
  dataset_write(dir / "d.frds", ds);
  Dataset back = dataset_read(dir / "d.frds");

  EXPECT_EQ(back.seed, ds.seed);
  ASSERT_EQ(back.inputs.size(), ds.inputs.size());
  for (std::size_t i = 0; i < ds.inputs.size(); ++i) {
    ASSERT_TRUE(back.inputs[i].same_shape(ds.inputs[i]));
    ASSERT_TRUE(back.outputs[i].same_shape(ds.outputs[i]));
    EXPECT_EQ(0, std::memcmp(back.inputs[i].data.data(), ds.inputs[i].data.data(),
                             8 * ds.inputs[i].size()));
    EXPECT_EQ(0, std::memcmp(back.outputs[i].data.data(), ds.outputs[i].data.data(),
                             8 * ds.outputs[i].size()));
  }
}

TEST(DatasetIo, RewriteIsByteIdentical) {
  auto dir = temp_dir("rewrite");
  Dataset ds = make_dataset(7, 3, 4, 4, 1, 1);
  dataset_write(dir / "a.frds", ds);
  dataset_write(dir / "b.frds", ds);
  EXPECT_EQ(file_bytes(dir / "a.frds"), file_bytes(dir / "b.frds"));
}

TEST(DatasetIo, BadMagicRejected) {
  auto dir = temp_dir("badmagic");
  dataset_write(dir / "d.frds", make_dataset(1, 1, 2, 2, 1, 1));
  auto bytes = file_bytes(dir / "d.frds");
  bytes[0] = 'X';
  std::ofstream(dir / "d.frds", std::ios::binary)
      .write(reinterpret_cast<char*>(bytes.data()), bytes.size());
  try {
    dataset_read(dir / "d.frds");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
}

TEST(DatasetIo, TruncationRejected) {
  auto dir = temp_dir("trunc");
  dataset_write(dir / "d.frds", make_dataset(1, 2, 3, 3, 1, 2));
  auto bytes = file_bytes(dir / "d.frds");
  bytes.resize(bytes.size() - 5);
  std::ofstream(dir / "d.frds", std::ios::binary)
      .write(reinterpret_cast<char*>(bytes.data()), bytes.size());
  try {
    dataset_read(dir / "d.frds");
    FAIL() << "expected format_error";
  } catch (const format_error& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(DatasetIo, TrailingBytesRejected) {
  auto dir = temp_dir("trailing");
  dataset_write(dir / "d.frds", make_dataset(1, 1, 2, 2, 1, 1));
  std::ofstream(dir / "d.frds", std::ios::binary | std::ios::app) << "junk";
  EXPECT_THROW(dataset_read(dir / "d.frds"), format_error);
}

TEST(DatasetIo, ZeroSampleHeaderRejected) {
  auto dir = temp_dir("zerosample");
  dataset_write(dir / "d.frds", make_dataset(1, 1, 2, 2, 1, 1));
  auto bytes = file_bytes(dir / "d.frds");
  bytes[8] = bytes[9] = bytes[10] = bytes[11] = 0;  // N lives after magic+version
  std::ofstream(dir / "d.frds", std::ios::binary)
      .write(reinterpret_cast<char*>(bytes.data()), bytes.size());
  EXPECT_THROW(dataset_read(dir / "d.frds"), format_error);
}

TEST(DatasetIo, NonFiniteEntriesRejectedOnWrite) {
  auto dir = temp_dir("nonfinite");
  Dataset ds = make_dataset(1, 1, 2, 2, 1, 1);
  ds.inputs[0].data[2] = std::nan("");
  EXPECT_THROW(dataset_write(dir / "d.frds", ds), std::invalid_argument);
}

TEST(DatasetIo, MissingFileRejected) {
  EXPECT_THROW(dataset_read("/nonexistent/nope.frds"), format_error);
}

TEST(CsvExport, ExactGrid) {
  auto dir = temp_dir("csv");
  Field f(2, 3, 1);
  double vals[6] = {1.0, 2.5, -3.0, 0.5, 0.25, 100.0};
  std::copy(vals, vals + 6, f.data.begin());
  write_channel_csv(dir / "f.csv", f, 0);
  std::ifstream in(dir / "f.csv");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(text, "1,2.5,-3\n0.5,0.25,100\n");
}

TEST(PpmExport, MinMaxScaling) {
  auto dir = temp_dir("ppm");
  Field f(2, 2, 1);
  f.data = {0.0, 1.0, 2.0, 3.0};
  write_channel_ppm(dir / "f.ppm", f, 0);
  auto bytes = file_bytes(dir / "f.ppm");
  std::string header = "P5\n2 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 4);
  EXPECT_EQ(0, std::memcmp(bytes.data(), header.data(), header.size()));
  EXPECT_EQ(bytes[header.size() + 0], 0);
  EXPECT_EQ(bytes[header.size() + 1], 85);
  EXPECT_EQ(bytes[header.size() + 2], 170);
  EXPECT_EQ(bytes[header.size() + 3], 255);

  Field flat(2, 2, 1);
  flat.data = {5.0, 5.0, 5.0, 5.0};
  write_channel_ppm(dir / "flat.ppm", flat, 0);
  auto fb = file_bytes(dir / "flat.ppm");
  for (std::size_t i = header.size(); i < fb.size(); ++i) EXPECT_EQ(fb[i], 0);
}

#include <gtest/gtest.h>

#include "neurontrace/checkpoint.hpp"
#include "neurontrace/error.hpp"
#include "test_support.hpp"

using namespace neurontrace;

TEST(Checkpoint, RoundTripIsBitwise) {
  nt_test::TempDir dir("ckpt");
  const ModelArch arch = ModelArch::small_cnn(10);
  ModelWeights w = ModelWeights::uniform(arch, 3, -1, 1);
  w.params[0].bias[0] = -0.0;
  w.params[1].weight[2] = 5e-324;
  write_checkpoint(dir / "a.ckpt", arch, w);
  const ModelWeights back = read_checkpoint(dir / "a.ckpt", arch);
  EXPECT_EQ(back, w);
  EXPECT_TRUE(std::signbit(back.params[0].bias[0]));
  EXPECT_EQ(encode_checkpoint(arch, back), read_file(dir / "a.ckpt"));
}

TEST(Checkpoint, HeaderLayout) {
  const ModelArch arch = ModelArch::parse("dense:2:1", {2});
  const std::string bytes = encode_checkpoint(arch, ModelWeights::zeros(arch));
  EXPECT_EQ(bytes.substr(0, 8), "NTCKPT01");
  // magic, fingerprint, count, (rank, dims, values) for a 1x2 weight and a 1-vector bias
  EXPECT_EQ(bytes.size(), 8u + 8 + 8 + (8 + 16 + 16) + (8 + 8 + 8));
}

TEST(Checkpoint, RejectsOtherArchitecture) {
  const ModelArch a = ModelArch::parse("dense:3:2", {3});
  const ModelArch b = ModelArch::parse("dense:3:4,relu,dense:4:2", {3});
  const std::string bytes = encode_checkpoint(a, ModelWeights::zeros(a));
  try {
    decode_checkpoint(b, bytes, "weights.ckpt");
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("weights.ckpt"), std::string::npos);
  }
}

TEST(Checkpoint, RejectsTruncationAndGarbage) {
  const ModelArch arch = ModelArch::parse("dense:3:2", {3});
  const std::string bytes = encode_checkpoint(arch, ModelWeights::uniform(arch, 1, -1, 1));
  for (std::size_t cut = 0; cut < bytes.size(); ++cut)
    EXPECT_THROW(decode_checkpoint(arch, std::string_view(bytes).substr(0, cut), "x"), IoError) << cut;
  EXPECT_THROW(decode_checkpoint(arch, bytes + "z", "x"), IoError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(arch, bad, "x"), IoError);
  EXPECT_THROW(read_checkpoint("/nonexistent/dir/w.ckpt", arch), IoError);
}

TEST(Checkpoint, AtomicWriteLeavesNoTempFile) {
  nt_test::TempDir dir("atomic");
  write_file_atomic(dir / "f.txt", "one");
  write_file_atomic(dir / "f.txt", "two");
  EXPECT_EQ(read_file(dir / "f.txt"), "two");
  EXPECT_FALSE(std::filesystem::exists(dir / "f.txt.tmp"));
}

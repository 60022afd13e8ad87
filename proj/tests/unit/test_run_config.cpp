#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "pcae/run_config.hpp"

using namespace pcae;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name, const std::string& body) {
  auto p = fs::temp_directory_path() / name;
  std::ofstream(p) << body;
  return p;
}

}  // namespace

TEST(RunConfig, DefaultsMatchLibraryStructs) {
  RunConfig c;
  const TrainConfig tc;
  EXPECT_EQ(c.train().learning_rate, tc.learning_rate);
  EXPECT_EQ(c.train().batch_size, tc.batch_size);
  EXPECT_EQ(c.shape().body_c, synth::ShapeParams{}.body_c);
  EXPECT_EQ(c.model().num_points, ModelConfig::desk().num_points);
  EXPECT_EQ(c.shape().num_points, c.model().num_points);
}

TEST(RunConfig, UnknownKeyAndMalformedValuesThrow) {
  RunConfig c;
  EXPECT_THROW(c.set("no_such_key", "1"), ConfigError);
  EXPECT_THROW(c.set_assignment("seed"), ConfigError);
  c.set("seed", "abc");
  EXPECT_THROW(c.seed(), ConfigError);
  c.set("augment", "maybe");
  EXPECT_THROW(c.flag("augment"), ConfigError);
  c.set("batch_size", "1");
  c.set("augment", "true");
  EXPECT_THROW(c.train(), ConfigError);
}

TEST(RunConfig, FileMergeSkipsCommentsAndReportsLine) {
  RunConfig c;
  c.merge_file(temp_file("pcae_rc_ok.cfg", "# comment\n\n  seed = 42  # trailing\nepochs=7\n"));
  EXPECT_EQ(c.seed(), 42u);
  EXPECT_EQ(c.train().epochs, 7u);
  try {
    c.merge_file(temp_file("pcae_rc_bad.cfg", "seed=1\nbogus=2\n"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
  EXPECT_THROW(c.merge_file("/nonexistent/pcae.cfg"), ConfigError);
}

TEST(RunConfig, LaterSourcesOverrideEarlierOnes) {
  RunConfig c;
  c.merge_file(temp_file("pcae_rc_a.cfg", "seed=1\nlearning_rate=0.01\n"));
  c.merge_file(temp_file("pcae_rc_b.cfg", "seed=2\n"));
  c.set_assignment("seed=3");
  EXPECT_EQ(c.seed(), 3u);
  EXPECT_EQ(c.train().learning_rate, 0.01);
}

TEST(RunConfig, WrittenFileRoundTrips) {
  RunConfig c;
  c.set("seed", "77");
  c.set("preset", "reduced");
  c.set("num_points", "64");
  const auto p = fs::temp_directory_path() / "pcae_rc_written.cfg";
  c.write(p);
  RunConfig d;
  d.merge_file(p);
  EXPECT_EQ(d.values(), c.values());
}

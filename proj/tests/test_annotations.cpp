#include <gtest/gtest.h>

#include <fstream>

#include "propq/annotations.hpp"
#include "propq/error.hpp"
#include "test_util.hpp"

using namespace propq;

namespace {

AnnotationSet sample() {
  AnnotationSet s;
  s.images.push_back({1, "a.pgm", 64, 48, {{0, 0, 4, 4}}, std::nullopt, std::nullopt});
  s.images.push_back({2, "a_r0_c1.pgm", 32, 32, {}, 1, std::make_pair(32, 0)});
  Instance i1;
  i1.id = 1;
  i1.image_id = 1;
  i1.box = {1.5, 2, 10, 12.25};
  i1.polygon = {1.5, 2, 10, 2, 10, 12.25};
  i1.contrast = 0.12;
  Instance i2;
  i2.id = 2;
  i2.image_id = 2;
  i2.category = "papule";
  i2.box = {0, 0, 32, 32};
  s.instances = {i1, i2};
  return s;
}

}  // namespace

TEST(AnnotationSet, JsonRoundTripIsStable) {
  const auto s = sample();
  const std::string text = s.to_json();
  const auto back = AnnotationSet::from_json(text);
  EXPECT_EQ(back.to_json(), text);
  ASSERT_EQ(back.instances.size(), 2u);
  EXPECT_EQ(back.instances[0].polygon, s.instances[0].polygon);
  EXPECT_EQ(back.instances[0].contrast, 0.12);
  EXPECT_FALSE(back.instances[1].contrast);
  EXPECT_EQ(back.instances[1].category, "papule");
  EXPECT_EQ(back.images[1].source_image_id, 1);
  EXPECT_EQ(back.images[1].origin, std::make_pair(32, 0));
  EXPECT_EQ(back.images[0].ignore_regions.size(), 1u);
  EXPECT_EQ(back.instances_of(1).size(), 1u);
  EXPECT_EQ(back.image(2).file_name, "a_r0_c1.pgm");
  EXPECT_THROW(back.image(9), InvalidArgument);
}

TEST(AnnotationSet, ValidationErrors) {
  auto s = sample();
  s.instances[0].box.x1 = 100;
  EXPECT_THROW(s.validate(), InvalidArgument);
  EXPECT_THROW(AnnotationSet::from_json(s.to_json()), IoError);
  s = sample();
  s.instances[0].image_id = 5;
  EXPECT_THROW(s.validate(), InvalidArgument);
  s = sample();
  s.images[1].id = 1;
  EXPECT_THROW(s.validate(), InvalidArgument);
  EXPECT_THROW(AnnotationSet::from_json("{\"images\": 3}"), IoError);
  EXPECT_THROW(AnnotationSet::from_json("not json"), IoError);
}

TEST(Pgm, RoundTripAndErrors) {
  const auto dir = testutil::scratch_dir("pgm");
  GrayImage img(5, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<std::uint8_t>(i * 17);
  write_pgm(dir / "x.pgm", img);
  const auto back = read_pgm(dir / "x.pgm");
  EXPECT_EQ(back.width, 5);
  EXPECT_EQ(back.height, 3);
  EXPECT_EQ(back.pixels, img.pixels);
  EXPECT_THROW(read_pgm(dir / "missing.pgm"), IoError);
  std::ofstream(dir / "bad.pgm") << "P2\n1 1\n255\n0\n";
  EXPECT_THROW(read_pgm(dir / "bad.pgm"), IoError);
  std::ofstream(dir / "short.pgm", std::ios::binary) << "P5\n4 4\n255\nab";
  EXPECT_THROW(read_pgm(dir / "short.pgm"), IoError);
}

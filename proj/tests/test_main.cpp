#include <gtest/gtest.h>

#include "jea/harness.hpp"

int main(int argc, char** argv) {
  jea::tune_allocator();
  ::testing::InitGoogleTest(&argc, argv);
  return RUN_ALL_TESTS();
}

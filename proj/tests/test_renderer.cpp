#include <catch2/catch_amalgamated.hpp>

#include "pose6d/harness.hpp"

TEST_CASE("placeholder renderer") { SUCCEED(); }

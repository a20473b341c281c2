// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "vikdf/model.hpp"

TEST_CASE("model constructs under the default configuration") {
  vikdf::ModelConfig cfg;
  cfg.validate();
  vikdf::VikdfModel model(cfg);
  CHECK(model.reg.size() > 0);
}

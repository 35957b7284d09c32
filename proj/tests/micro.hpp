#pragma once

#include "ovvad/verify.hpp"
#include "test_util.hpp"

namespace ovvad::testing {

using verify::MicroInstance;
using verify::make_micro;

}  // namespace ovvad::testing

#pragma once

#include "config.hpp"
#include "dataset.hpp"
#include "errors.hpp"
#include "harness.hpp"
#include "linalg.hpp"
#include "methods.hpp"
#include "objectives.hpp"
#include "partition.hpp"
#include "rng.hpp"

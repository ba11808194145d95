#pragma once

#include "algos.hpp"
#include "approx.hpp"
#include "collect.hpp"
#include "core.hpp"
#include "envs.hpp"
#include "eval.hpp"
#include "harness.hpp"
#include "models.hpp"
#include "policy.hpp"
#include "rng.hpp"

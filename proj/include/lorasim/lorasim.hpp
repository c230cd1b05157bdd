// Copyright 2026 The lorasim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "lorasim/baselines.hpp"
#include "lorasim/block_pool.hpp"
#include "lorasim/cli.hpp"
#include "lorasim/config.hpp"
#include "lorasim/cost_model.hpp"
#include "lorasim/dependency_tree.hpp"
#include "lorasim/fastlibra.hpp"
#include "lorasim/metrics.hpp"
#include "lorasim/policy.hpp"
#include "lorasim/query.hpp"
#include "lorasim/scenario.hpp"
#include "lorasim/simulator.hpp"
#include "lorasim/swapper.hpp"
#include "lorasim/types.hpp"
#include "lorasim/workload.hpp"

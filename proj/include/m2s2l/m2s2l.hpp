// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "m2s2l/checkpoint.hpp"
#include "m2s2l/config.hpp"
#include "m2s2l/data_pipeline.hpp"
#include "m2s2l/eval_profile.hpp"
#include "m2s2l/model.hpp"
#include "m2s2l/objective_scoring.hpp"
#include "m2s2l/trainer.hpp"

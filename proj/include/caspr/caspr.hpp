// Copyright (c) 2026 The caspr Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "caspr/autodiff.hpp"
#include "caspr/checkpoint.hpp"
#include "caspr/csv.hpp"
#include "caspr/error.hpp"
#include "caspr/ingest.hpp"
#include "caspr/metrics.hpp"
#include "caspr/pipeline.hpp"
#include "caspr/pretrain.hpp"
#include "caspr/rfm.hpp"
#include "caspr/synthgen.hpp"
#include "caspr/transformer.hpp"

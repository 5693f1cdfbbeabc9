// Copyright 2026 The TaskSeg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "taskseg/annotations.hpp"
#include "taskseg/audit.hpp"
#include "taskseg/config.hpp"
#include "taskseg/dataset.hpp"
#include "taskseg/errors.hpp"
#include "taskseg/losses.hpp"
#include "taskseg/matcher.hpp"
#include "taskseg/metrics.hpp"
#include "taskseg/model.hpp"
#include "taskseg/png_io.hpp"
#include "taskseg/postproc.hpp"
#include "taskseg/rng.hpp"
#include "taskseg/serialize.hpp"
#include "taskseg/synthetic.hpp"
#include "taskseg/tensor.hpp"
#include "taskseg/textgen.hpp"
#include "taskseg/train.hpp"

#pragma once

#include "docvce/tensor.hpp"
#include "docvce/autodiff.hpp"
#include "docvce/random.hpp"
#include "docvce/schedule.hpp"
#include "docvce/codec.hpp"
#include "docvce/serialize.hpp"
#include "docvce/models.hpp"
#include "docvce/dataset.hpp"
#include "docvce/guidance.hpp"
#include "docvce/hpr.hpp"
#include "docvce/metrics.hpp"
#include "docvce/pipeline.hpp"
#include "docvce/io.hpp"

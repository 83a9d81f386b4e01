#pragma once

// Everything except the HTTP session service, which needs libsodium at link
// time; include toddler/service.hpp for that.

#include "core.hpp"
#include "image_io.hpp"
#include "schedule.hpp"
#include "degrade.hpp"
#include "bridge.hpp"
#include "denoiser.hpp"
#include "checkpoint.hpp"
#include "pipeline.hpp"
#include "toyworld.hpp"
#include "metrics.hpp"
#include "math_notes.hpp"
#include "config.hpp"
#include "ablation.hpp"
#include "evaluate.hpp"

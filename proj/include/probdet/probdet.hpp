#pragma once

#include "probdet/geometry.hpp"
#include "probdet/probcore.hpp"
#include "probdet/assignment.hpp"
#include "probdet/synthdata.hpp"
#include "probdet/fedloss.hpp"
#include "probdet/detector.hpp"
#include "probdet/trainer.hpp"
#include "probdet/evalkit.hpp"
#include "probdet/config.hpp"

#pragma once
// Umbrella header for the estimation library (io and cli are included separately).
#include <glmmfa/errors.hpp>
#include <glmmfa/family.hpp>
#include <glmmfa/data.hpp>
#include <glmmfa/penalties.hpp>
#include <glmmfa/glm.hpp>
#include <glmmfa/factor_model.hpp>
#include <glmmfa/theta.hpp>
#include <glmmfa/posterior.hpp>
#include <glmmfa/mcecm.hpp>
#include <glmmfa/selection.hpp>
#include <glmmfa/simlab.hpp>

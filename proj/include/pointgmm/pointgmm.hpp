#pragma once

#include "pointgmm/autodiff.hpp"
#include "pointgmm/decoder.hpp"
#include "pointgmm/em.hpp"
#include "pointgmm/encoder.hpp"
#include "pointgmm/errors.hpp"
#include "pointgmm/hgmm.hpp"
#include "pointgmm/io.hpp"
#include "pointgmm/params.hpp"
#include "pointgmm/point_cloud.hpp"
#include "pointgmm/registration.hpp"
#include "pointgmm/rigid_transform.hpp"
#include "pointgmm/shapes.hpp"
#include "pointgmm/training.hpp"

#pragma once

#include "atlas_match/error.hpp"
#include "atlas_match/identify.hpp"
#include "atlas_match/imagekit.hpp"
#include "atlas_match/metric.hpp"
#include "atlas_match/random.hpp"
#include "atlas_match/register.hpp"
#include "atlas_match/synthatlas.hpp"
#include "atlas_match/tensornet.hpp"

#pragma once

#include "lens/activation.hpp"
#include "lens/analysis.hpp"
#include "lens/config.hpp"
#include "lens/decomp.hpp"
#include "lens/error.hpp"
#include "lens/forward.hpp"
#include "lens/ig.hpp"
#include "lens/io.hpp"
#include "lens/metrics.hpp"
#include "lens/model.hpp"
#include "lens/pmi.hpp"
#include "lens/random_model.hpp"
#include "lens/selfcheck.hpp"
#include "lens/sequence.hpp"
#include "lens/stats.hpp"

#pragma once

#include "sae/bootstrap.hpp"
#include "sae/csv.hpp"
#include "sae/design.hpp"
#include "sae/diagnostics.hpp"
#include "sae/direct.hpp"
#include "sae/error.hpp"
#include "sae/estimators.hpp"
#include "sae/frame.hpp"
#include "sae/mixed.hpp"
#include "sae/model.hpp"
#include "sae/mquantile.hpp"
#include "sae/parallel.hpp"
#include "sae/popgen.hpp"
#include "sae/robust.hpp"
#include "sae/simulation.hpp"
#include "sae/stats.hpp"

#pragma once

#include "dfreg/config_json.hpp"
#include "dfreg/energy.hpp"
#include "dfreg/error.hpp"
#include "dfreg/forward.hpp"
#include "dfreg/grid.hpp"
#include "dfreg/io.hpp"
#include "dfreg/krylov.hpp"
#include "dfreg/linalg.hpp"
#include "dfreg/pipeline.hpp"
#include "dfreg/rigid.hpp"
#include "dfreg/scenes.hpp"
#include "dfreg/solvers.hpp"

#pragma once

#include "infodisent/errors.hpp"
#include "infodisent/explain.hpp"
#include "infodisent/feature_map.hpp"
#include "infodisent/head.hpp"
#include "infodisent/linalg.hpp"
#include "infodisent/parallel.hpp"
#include "infodisent/report.hpp"
#include "infodisent/run_config.hpp"
#include "infodisent/store.hpp"
#include "infodisent/synthetic.hpp"
#include "infodisent/train.hpp"

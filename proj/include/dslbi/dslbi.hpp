#pragma once

#include "dslbi/checkpoint.hpp"
#include "dslbi/config.hpp"
#include "dslbi/data.hpp"
#include "dslbi/error.hpp"
#include "dslbi/harness.hpp"
#include "dslbi/lasso_path.hpp"
#include "dslbi/monitor.hpp"
#include "dslbi/network.hpp"
#include "dslbi/optimizer.hpp"
#include "dslbi/path.hpp"
#include "dslbi/penalty.hpp"
#include "dslbi/tensor.hpp"
#include "dslbi/verify.hpp"

#pragma once

// Everything except the experiment layer (which needs Boost and OpenSSL).
#include "xstop/dynkin.hpp"
#include "xstop/ensemble.hpp"
#include "xstop/error.hpp"
#include "xstop/fd_oracle.hpp"
#include "xstop/market.hpp"
#include "xstop/mlp.hpp"
#include "xstop/policy.hpp"
#include "xstop/premium.hpp"
#include "xstop/pricing.hpp"
#include "xstop/rng.hpp"
#include "xstop/trainer.hpp"
#include "xstop/tridiagonal.hpp"

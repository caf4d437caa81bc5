#pragma once

// Umbrella header. http_backend.hpp is left out on purpose: it drags in
// cpp-httplib and OpenSSL, include it where a live provider is needed.

#include "semgrad/value.hpp"
#include "semgrad/graph.hpp"
#include "semgrad/semantics.hpp"
#include "semgrad/prompts.hpp"
#include "semgrad/backend.hpp"
#include "semgrad/forward.hpp"
#include "semgrad/backprop.hpp"
#include "semgrad/tasks.hpp"
#include "semgrad/descent.hpp"

#pragma once

#include <catch_amalgamated.hpp>

#include "kaser/pipeline.hpp"
#include "kaser/mock_server.hpp"

#pragma once

#include "utamoe/anyres.hpp"
#include "utamoe/checkpoint.hpp"
#include "utamoe/config.hpp"
#include "utamoe/diagnostics.hpp"
#include "utamoe/errors.hpp"
#include "utamoe/eval.hpp"
#include "utamoe/experiments.hpp"
#include "utamoe/grad_check.hpp"
#include "utamoe/lora.hpp"
#include "utamoe/moe_layer.hpp"
#include "utamoe/optim.hpp"
#include "utamoe/rng.hpp"
#include "utamoe/router.hpp"
#include "utamoe/synth_tasks.hpp"
#include "utamoe/tensor.hpp"
#include "utamoe/training.hpp"
#include "utamoe/transformer.hpp"
#include "utamoe/weight.hpp"

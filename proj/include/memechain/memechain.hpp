#pragma once

#include "memechain/corpus.hpp"
#include "memechain/embedding.hpp"
#include "memechain/evaluation.hpp"
#include "memechain/http_backend.hpp"
#include "memechain/index.hpp"
#include "memechain/lmm.hpp"
#include "memechain/pipeline.hpp"
#include "memechain/prompt.hpp"
#include "memechain/template.hpp"

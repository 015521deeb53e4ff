#pragma once

// Umbrella header.

#include "treecaps/ast.hpp"
#include "treecaps/autodiff.hpp"
#include "treecaps/capsules.hpp"
#include "treecaps/checkpoint.hpp"
#include "treecaps/common.hpp"
#include "treecaps/embeddings.hpp"
#include "treecaps/gradcheck.hpp"
#include "treecaps/io.hpp"
#include "treecaps/model.hpp"
#include "treecaps/optimizer.hpp"
#include "treecaps/synthetic.hpp"
#include "treecaps/tensor.hpp"
#include "treecaps/training.hpp"
#include "treecaps/tree_conv.hpp"

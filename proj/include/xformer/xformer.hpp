#ifndef XFORMER_XFORMER_HPP
#define XFORMER_XFORMER_HPP

#include "attention.hpp"
#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "convergence.hpp"
#include "dataset.hpp"
#include "encodings.hpp"
#include "errors.hpp"
#include "invariance.hpp"
#include "lattice_sums.hpp"
#include "model.hpp"
#include "special_functions.hpp"
#include "structures.hpp"
#include "synthetic.hpp"
#include "tensor.hpp"
#include "training.hpp"

#endif  // XFORMER_XFORMER_HPP

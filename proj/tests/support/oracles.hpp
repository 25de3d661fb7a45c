#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance suite. Nothing here calls into the library code under test
// except to build graphs for finite-difference checks.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "cascade/autodiff.hpp"
#include "cascade/pruning.hpp"
#include "cascade/tensor.hpp"

namespace oracle {

using cascade::Graph;
using cascade::Shape;
using cascade::Tensor;
using cascade::Var;

Tensor<double> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0);
/// Like random_tensor, but every magnitude is at least `gap` (keeps relu kinks out of reach of h).
Tensor<double> random_away_from_zero(const Shape& shape, std::mt19937_64& rng, double gap = 1e-2);

/// Six nested loops straight from the definition. `same` pads with
/// floor(total/2) on top/left and the rest on bottom/right.
Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& w, std::size_t stride, bool same);
Tensor<double> matmul(const Tensor<double>& a, const Tensor<double>& b);

/// -log softmax(z)[y] via log-sum-exp, one row.
double cross_entropy_row(const std::vector<double>& z, std::size_t y);
/// KL(p || q) for p = softmax(t / tau), q = softmax(s / tau), one row.
double kl_row(const std::vector<double>& t, const std::vector<double>& s, double tau);

/// Builds a scalar loss from one graph leaf per input tensor.
using LossBuilder = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

/// Reverse-mode gradient against central differences over every input
/// element. Returns the norm-wise relative error ||a - n|| / max(||a||, ||n||)
/// over the concatenated gradient of all inputs (0 when both vanish).
double gradient_error(const LossBuilder& build, const std::vector<Tensor<double>>& inputs, double h = 1e-5);

/// Central differences of an arbitrary scalar function of a parameter vector.
std::vector<double> numeric_gradient(const std::function<double(const std::vector<double>&)>& f,
                                     std::vector<double> at, double h = 1e-5);

double relative_error(const std::vector<double>& a, const std::vector<double>& n);

struct OpCheck {
    std::string op;
    int instances = 0;
    double worst = 0.0;  // largest relative error seen
};

/// Gradient checks over `instances` random small instances per op, every
/// tensor input at most 200 elements. Covers each differentiable graph op
/// and the straight-through score gradient.
std::vector<OpCheck> gradient_suite(int instances, std::uint64_t seed);

/// conv2d forward against the nested-loop reference on `configs` random
/// geometries (f64). Returns the number of configs with any bitwise difference.
int conv_mismatches(int configs, std::uint64_t seed);

/// Plain global top-k: sort by (score desc, layer asc, index asc), keep the
/// first k. No floor handling.
std::vector<std::vector<std::uint8_t>> topk_keep(const cascade::ImportanceScores& scores, std::size_t k);

/// Failure counts of build_mask over randomized trials, one per property.
struct MaskPropertyReport {
    int trials = 0;
    int cardinality = 0;  // kept != round(r * F)
    int floor = 0;        // a layer under min_filters_per_layer
    int determinism = 0;  // two calls disagree
    int threshold = 0;    // no repair needed, yet result != plain top-k
    int ties = 0;         // coarse scores (many ties): result != plain top-k
    int repair = 0;       // repair needed: result != reference swap trace
    int nesting = 0;      // identical scores, r0 < r1, kept(r0) not within kept(r1)
};
MaskPropertyReport mask_properties(int trials, std::uint64_t seed);

}  // namespace oracle

#pragma once

#include <string>
#include <vector>

#include "protodet/detector.hpp"
#include "protodet/gradcheck.hpp"

namespace protodet {

struct SuiteResult {
  std::string name;
  GradCheckReport report;
};

/// A complete detector on a 4x4 grid with d = 8 and two classes, one query
/// instance of each class and K = 3 supports per class.
struct FixtureEpisode {
  Model model;
  SceneSample query;
  std::vector<SupportSet> supports;
};

FixtureEpisode make_fixture_episode(DetectorStyle style, const AggregationFlags& flags,
                                    std::uint64_t seed = 4);

/// Total episode loss (eval mode) as a function of the model parameters.
ScalarFn episode_loss_fn(const FixtureEpisode& fx);

/// Finite-difference check of every differentiable operation, the attention
/// stacks, and the end-to-end loss of both detector styles.
std::vector<SuiteResult> run_gradcheck_suite(double eps = 1e-5, double tol = 1e-4,
                                             std::uint64_t seed = 7);

}  // namespace protodet

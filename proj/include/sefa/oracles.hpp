#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

namespace sefa::oracle {

/// Value assignment over all features; kMissing marks an unobserved feature.
using Assignment = std::vector<int>;
inline constexpr int kMissing = -1;

/// Explicit joint table over (x, y). Feature i takes values 0..cardinalities[i]-1.
struct DiscreteJoint {
  std::vector<std::size_t> cardinalities;
  std::size_t num_classes = 0;
  std::vector<Assignment> x;
  std::vector<int> y;
  std::vector<double> p;

  std::size_t num_features() const { return cardinalities.size(); }
  std::size_t size() const { return p.size(); }
  /// Throws ConfigError: negative probabilities, total not 1 within 1e-12, bad values.
  void validate() const;
};

/// Shannon entropy in nats with 0 ln 0 = 0.
double entropy(std::span<const double> probs);

/// Features 0..d-1 binary, feature d the indicator (0-based), y = x[x[d]]; 2 <= d <= 12.
DiscreteJoint indicator_joint(std::size_t d);

/// p(Y | x_O); throws DomainError when x_O has probability zero.
std::vector<double> conditional_label(const DiscreteJoint& joint, const Assignment& observed);
double conditional_entropy(const DiscreteJoint& joint, const Assignment& observed);

/// I(X_i; Y | x_O) in nats.
double exact_cmi(const DiscreteJoint& joint, std::size_t feature, const Assignment& observed);

/// E_{p(x_U | x_O)} I(X_i; Y | x_O, x_U), U = every other unobserved feature.
double expected_cmi_objective(const DiscreteJoint& joint, std::size_t feature, const Assignment& observed);

enum class Objective { cmi, expected_cmi };

/// Greedy acquisition under `objective` until H(Y | x_O) = 0, exact expectation over
/// all worlds of the joint with ties split uniformly.
double greedy_expected_acquisitions(const DiscreteJoint& joint, Objective objective);

/// Exact expected acquisitions of greedy CMI on the indicator problem (3 <= d <= 8).
double greedy_cmi_expected_acquisitions(std::size_t d);
/// Exact expected acquisitions of greedy acquisition under the expected-CMI objective (3 <= d <= 8).
double expected_cmi_acquisitions(std::size_t d);

/// Features the objective ranks first with nothing observed (ties all returned).
std::vector<std::size_t> greedy_first_choices(const DiscreteJoint& joint, Objective objective);

struct EntropyRow {
  int x1 = 0;  // 1..3, 0 = missing
  int x2 = 0;
  std::array<double, 3> v{};
  std::array<double, 3> p{};
  double entropy = 0.0;
  double info_gain = 0.0;
};

struct EntropyExample {
  /// Every (x1, x2) pair with its logit vector and softmax.
  std::vector<EntropyRow> joint;
  /// Single-feature marginals p(Y | x1) and p(Y | x2) with entropies and H(Y) - H(Y | x).
  std::vector<EntropyRow> marginals;
  double label_entropy = 0.0;
};

/// Two features in {1,2,3}: x1 lowers v[x1] by 8, x2 raises v[x2] by 6.5, p = softmax(v).
EntropyExample entropy_example_tables();
/// The same construction as a DiscreteJoint (values 0-based, x uniform).
DiscreteJoint entropy_example_joint();

/// Mixture over relevant-set sizes k of k(d+1)/(k+1): expected position of the last of
/// k marked items in a uniform random permutation of d items.
double random_policy_expected_steps(std::size_t d, std::span<const std::pair<std::size_t, double>> size_distribution);

struct MonteCarloEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
  std::size_t samples = 0;
};

/// Samples worlds from the joint and runs the greedy policy with random tie-breaking.
MonteCarloEstimate simulate_greedy(const DiscreteJoint& joint, Objective objective, std::size_t worlds,
                                   std::uint64_t seed);

/// Random permutations of d items; counts the position of the last of k marked items.
MonteCarloEstimate simulate_random_policy(std::size_t d, std::span<const std::pair<std::size_t, double>> size_distribution,
                                          std::size_t trials, std::uint64_t seed);

}  // namespace sefa::oracle

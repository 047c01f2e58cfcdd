#include "sefa/oracles.hpp"

#include "sefa/errors.hpp"
#include "sefa/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace sefa::oracle {

namespace {

constexpr double kTieTolerance = 1e-12;
constexpr double kZeroEntropy = 1e-12;

bool consistent(const Assignment& x, const Assignment& observed) {
  for (std::size_t i = 0; i < observed.size(); ++i) {
    if (observed[i] != kMissing && observed[i] != x[i]) return false;
  }
  return true;
}

void check_observed(const DiscreteJoint& joint, const Assignment& observed) {
  if (observed.size() != joint.num_features()) throw ConfigError("oracle: assignment length differs from feature count");
}

// I(X; Y) from an unnormalized (value x class) table.
double mutual_information(const std::vector<double>& table, std::size_t values, std::size_t classes) {
  double total = 0.0;
  for (double v : table) total += v;
  if (total <= 0.0) return 0.0;
  std::vector<double> py(classes, 0.0);
  for (std::size_t v = 0; v < values; ++v) {
    for (std::size_t c = 0; c < classes; ++c) py[c] += table[v * classes + c] / total;
  }
  double h_cond = 0.0;
  std::vector<double> row(classes);
  for (std::size_t v = 0; v < values; ++v) {
    double mass = 0.0;
    for (std::size_t c = 0; c < classes; ++c) mass += table[v * classes + c];
    if (mass <= 0.0) continue;
    for (std::size_t c = 0; c < classes; ++c) row[c] = table[v * classes + c] / mass;
    h_cond += (mass / total) * entropy(row);
  }
  return std::max(0.0, entropy(py) - h_cond);
}

std::vector<double> softmax3(const std::array<double, 3>& v) {
  const double m = std::max({v[0], v[1], v[2]});
  std::vector<double> p(3);
  double s = 0.0;
  for (int k = 0; k < 3; ++k) s += (p[k] = std::exp(v[k] - m));
  for (double& q : p) q /= s;
  return p;
}

// Scores and label entropy for each observed assignment, computed once.
class GreedyMemo {
 public:
  GreedyMemo(const DiscreteJoint& joint, Objective objective) : joint_(joint), objective_(objective) {}

  struct Node {
    double entropy = 0.0;
    std::vector<std::size_t> best;  // argmax set among unobserved features
  };

  const Node& node(const Assignment& observed) {
    auto it = cache_.find(observed);
    if (it != cache_.end()) return it->second;
    Node n;
    n.entropy = conditional_entropy(joint_, observed);
    double top = -1.0;
    std::vector<double> scores(observed.size(), -1.0);
    for (std::size_t i = 0; i < observed.size(); ++i) {
      if (observed[i] != kMissing) continue;
      scores[i] = objective_ == Objective::cmi ? exact_cmi(joint_, i, observed) : expected_cmi_objective(joint_, i, observed);
      top = std::max(top, scores[i]);
    }
    for (std::size_t i = 0; i < observed.size(); ++i) {
      if (observed[i] == kMissing && scores[i] >= top - kTieTolerance) n.best.push_back(i);
    }
    return cache_.emplace(observed, std::move(n)).first->second;
  }

 private:
  const DiscreteJoint& joint_;
  Objective objective_;
  std::map<Assignment, Node> cache_;
};

double expected_from(GreedyMemo& memo, const Assignment& world, Assignment& observed) {
  const auto& n = memo.node(observed);
  if (n.entropy <= kZeroEntropy || n.best.empty()) return 0.0;
  const std::vector<std::size_t> choices = n.best;
  double sum = 0.0;
  for (auto f : choices) {
    observed[f] = world[f];
    sum += expected_from(memo, world, observed);
    observed[f] = kMissing;
  }
  return 1.0 + sum / static_cast<double>(choices.size());
}

void check_indicator_range(std::size_t d) {
  if (d < 3 || d > 8) throw ConfigError("indicator oracle: d must lie in [3, 8]");
}

double sample_mixture_size(std::span<const std::pair<std::size_t, double>> dist, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  for (const auto& [k, w] : dist) {
    acc += w;
    if (u < acc) return static_cast<double>(k);
  }
  return static_cast<double>(dist.back().first);
}

void check_size_distribution(std::size_t d, std::span<const std::pair<std::size_t, double>> dist) {
  if (dist.empty()) throw ConfigError("random policy oracle: empty size distribution");
  double total = 0.0;
  for (const auto& [k, w] : dist) {
    if (k < 1 || k > d) throw ConfigError("random policy oracle: relevant-set size must lie in [1, d]");
    if (w < 0.0) throw ConfigError("random policy oracle: negative weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("random policy oracle: weights must sum to 1");
}

}  // namespace

void DiscreteJoint::validate() const {
  if (x.size() != p.size() || y.size() != p.size()) throw ConfigError("joint: table columns differ in length");
  double total = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (!(p[k] >= 0.0)) throw ConfigError("joint: negative probability");
    if (x[k].size() != cardinalities.size()) throw ConfigError("joint: assignment length mismatch");
    for (std::size_t i = 0; i < cardinalities.size(); ++i) {
      if (x[k][i] < 0 || static_cast<std::size_t>(x[k][i]) >= cardinalities[i]) throw ConfigError("joint: value out of range");
    }
    if (y[k] < 0 || static_cast<std::size_t>(y[k]) >= num_classes) throw ConfigError("joint: label out of range");
    total += p[k];
  }
  if (std::abs(total - 1.0) > 1e-12) throw ConfigError("joint: probabilities sum to " + std::to_string(total));
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double q : probs) {
    if (q > 0.0) h -= q * std::log(q);
  }
  return h;
}

DiscreteJoint indicator_joint(std::size_t d) {
  if (d < 2 || d > 12) throw ConfigError("indicator_joint: d must lie in [2, 12]");
  DiscreteJoint j;
  j.cardinalities.assign(d, 2);
  j.cardinalities.push_back(d);
  j.num_classes = 2;
  const double mass = 1.0 / (static_cast<double>(std::size_t{1} << d) * static_cast<double>(d));
  for (std::size_t bits = 0; bits < (std::size_t{1} << d); ++bits) {
    for (std::size_t ind = 0; ind < d; ++ind) {
      Assignment x(d + 1);
      for (std::size_t i = 0; i < d; ++i) x[i] = static_cast<int>((bits >> i) & 1);
      x[d] = static_cast<int>(ind);
      j.y.push_back(x[ind]);
      j.x.push_back(std::move(x));
      j.p.push_back(mass);
    }
  }
  return j;
}

std::vector<double> conditional_label(const DiscreteJoint& joint, const Assignment& observed) {
  check_observed(joint, observed);
  std::vector<double> out(joint.num_classes, 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k < joint.size(); ++k) {
    if (!consistent(joint.x[k], observed)) continue;
    out[static_cast<std::size_t>(joint.y[k])] += joint.p[k];
    total += joint.p[k];
  }
  if (total <= 0.0) throw DomainError("oracle: conditioning on a zero-probability observation");
  for (double& q : out) q /= total;
  return out;
}

double conditional_entropy(const DiscreteJoint& joint, const Assignment& observed) {
  return entropy(conditional_label(joint, observed));
}

double exact_cmi(const DiscreteJoint& joint, std::size_t feature, const Assignment& observed) {
  check_observed(joint, observed);
  if (feature >= joint.num_features()) throw ConfigError("exact_cmi: feature out of range");
  if (observed[feature] != kMissing) return 0.0;
  const auto values = joint.cardinalities[feature];
  std::vector<double> table(values * joint.num_classes, 0.0);
  double total = 0.0;
  for (std::size_t k = 0; k < joint.size(); ++k) {
    if (!consistent(joint.x[k], observed)) continue;
    table[static_cast<std::size_t>(joint.x[k][feature]) * joint.num_classes + static_cast<std::size_t>(joint.y[k])] += joint.p[k];
    total += joint.p[k];
  }
  if (total <= 0.0) throw DomainError("exact_cmi: conditioning on a zero-probability observation");
  return mutual_information(table, values, joint.num_classes);
}

double expected_cmi_objective(const DiscreteJoint& joint, std::size_t feature, const Assignment& observed) {
  check_observed(joint, observed);
  if (feature >= joint.num_features()) throw ConfigError("expected_cmi_objective: feature out of range");
  if (observed[feature] != kMissing) return 0.0;
  const auto values = joint.cardinalities[feature];
  std::map<Assignment, std::vector<double>> groups;
  double total = 0.0;
  for (std::size_t k = 0; k < joint.size(); ++k) {
    if (!consistent(joint.x[k], observed)) continue;
    Assignment key = joint.x[k];
    key[feature] = kMissing;
    auto& table = groups[key];
    if (table.empty()) table.assign(values * joint.num_classes, 0.0);
    table[static_cast<std::size_t>(joint.x[k][feature]) * joint.num_classes + static_cast<std::size_t>(joint.y[k])] += joint.p[k];
    total += joint.p[k];
  }
  if (total <= 0.0) throw DomainError("expected_cmi_objective: conditioning on a zero-probability observation");
  double out = 0.0;
  for (const auto& [key, table] : groups) {
    const double mass = std::accumulate(table.begin(), table.end(), 0.0);
    out += (mass / total) * mutual_information(table, values, joint.num_classes);
  }
  return out;
}

double greedy_expected_acquisitions(const DiscreteJoint& joint, Objective objective) {
  joint.validate();
  GreedyMemo memo(joint, objective);
  double expected = 0.0;
  for (std::size_t k = 0; k < joint.size(); ++k) {
    if (joint.p[k] == 0.0) continue;
    Assignment observed(joint.num_features(), kMissing);
    expected += joint.p[k] * expected_from(memo, joint.x[k], observed);
  }
  return expected;
}

double greedy_cmi_expected_acquisitions(std::size_t d) {
  check_indicator_range(d);
  return greedy_expected_acquisitions(indicator_joint(d), Objective::cmi);
}

double expected_cmi_acquisitions(std::size_t d) {
  check_indicator_range(d);
  return greedy_expected_acquisitions(indicator_joint(d), Objective::expected_cmi);
}

std::vector<std::size_t> greedy_first_choices(const DiscreteJoint& joint, Objective objective) {
  GreedyMemo memo(joint, objective);
  return memo.node(Assignment(joint.num_features(), kMissing)).best;
}

EntropyExample entropy_example_tables() {
  EntropyExample ex;
  std::array<std::array<std::vector<double>, 3>, 3> p{};
  for (int a = 1; a <= 3; ++a) {
    for (int b = 1; b <= 3; ++b) {
      EntropyRow row;
      row.x1 = a;
      row.x2 = b;
      row.v[static_cast<std::size_t>(a - 1)] -= 8.0;
      row.v[static_cast<std::size_t>(b - 1)] += 6.5;
      const auto q = softmax3(row.v);
      std::copy(q.begin(), q.end(), row.p.begin());
      row.entropy = entropy(q);
      p[static_cast<std::size_t>(a - 1)][static_cast<std::size_t>(b - 1)] = q;
      ex.joint.push_back(row);
    }
  }
  std::array<double, 3> marginal{};
  for (const auto& row : ex.joint) {
    for (std::size_t c = 0; c < 3; ++c) marginal[c] += row.p[c] / 9.0;
  }
  ex.label_entropy = entropy(marginal);
  auto add_marginal = [&](int x1, int x2) {
    EntropyRow row;
    row.x1 = x1;
    row.x2 = x2;
    for (int other = 1; other <= 3; ++other) {
      const auto& q = x1 ? p[static_cast<std::size_t>(x1 - 1)][static_cast<std::size_t>(other - 1)]
                         : p[static_cast<std::size_t>(other - 1)][static_cast<std::size_t>(x2 - 1)];
      for (std::size_t c = 0; c < 3; ++c) row.p[c] += q[c] / 3.0;
    }
    row.entropy = entropy(row.p);
    row.info_gain = ex.label_entropy - row.entropy;
    ex.marginals.push_back(row);
  };
  for (int a = 1; a <= 3; ++a) add_marginal(a, 0);
  for (int b = 1; b <= 3; ++b) add_marginal(0, b);
  return ex;
}

DiscreteJoint entropy_example_joint() {
  const auto ex = entropy_example_tables();
  DiscreteJoint j;
  j.cardinalities = {3, 3};
  j.num_classes = 3;
  for (const auto& row : ex.joint) {
    for (int c = 0; c < 3; ++c) {
      j.x.push_back({row.x1 - 1, row.x2 - 1});
      j.y.push_back(c);
      j.p.push_back(row.p[static_cast<std::size_t>(c)] / 9.0);
    }
  }
  return j;
}

double random_policy_expected_steps(std::size_t d, std::span<const std::pair<std::size_t, double>> size_distribution) {
  check_size_distribution(d, size_distribution);
  double out = 0.0;
  for (const auto& [k, w] : size_distribution) {
    out += w * static_cast<double>(k) * static_cast<double>(d + 1) / static_cast<double>(k + 1);
  }
  return out;
}

namespace {

MonteCarloEstimate summarize(double sum, double sum_sq, std::size_t n) {
  MonteCarloEstimate est;
  est.samples = n;
  est.mean = sum / static_cast<double>(n);
  const double var = n > 1 ? (sum_sq - static_cast<double>(n) * est.mean * est.mean) / static_cast<double>(n - 1) : 0.0;
  est.standard_error = std::sqrt(std::max(var, 0.0) / static_cast<double>(n));
  return est;
}

}  // namespace

MonteCarloEstimate simulate_greedy(const DiscreteJoint& joint, Objective objective, std::size_t worlds,
                                   std::uint64_t seed) {
  joint.validate();
  if (worlds < 1) throw ConfigError("simulate_greedy: need at least one world");
  std::vector<double> cumulative(joint.size());
  std::partial_sum(joint.p.begin(), joint.p.end(), cumulative.begin());
  GreedyMemo memo(joint, objective);
  Rng rng(seed);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t n = 0; n < worlds; ++n) {
    const double u = rng.uniform() * cumulative.back();
    const auto k = static_cast<std::size_t>(std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    const auto& world = joint.x[std::min(k, joint.size() - 1)];
    Assignment observed(joint.num_features(), kMissing);
    double steps = 0.0;
    while (true) {
      const auto& node = memo.node(observed);
      if (node.entropy <= kZeroEntropy || node.best.empty()) break;
      const auto f = node.best[rng.uniform_index(node.best.size())];
      observed[f] = world[f];
      steps += 1.0;
    }
    sum += steps;
    sum_sq += steps * steps;
  }
  return summarize(sum, sum_sq, worlds);
}

MonteCarloEstimate simulate_random_policy(std::size_t d, std::span<const std::pair<std::size_t, double>> size_distribution,
                                          std::size_t trials, std::uint64_t seed) {
  check_size_distribution(d, size_distribution);
  if (trials < 1) throw ConfigError("simulate_random_policy: need at least one trial");
  Rng rng(seed);
  std::vector<std::size_t> perm(d);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t n = 0; n < trials; ++n) {
    const auto k = static_cast<std::size_t>(sample_mixture_size(size_distribution, rng));
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t m = d; m > 1; --m) std::swap(perm[m - 1], perm[rng.uniform_index(m)]);
    // Items 0..k-1 are the marked ones; find the step at which the last is drawn.
    std::size_t last = 0;
    for (std::size_t pos = 0; pos < d; ++pos) {
      if (perm[pos] < k) last = pos + 1;
    }
    sum += static_cast<double>(last);
    sum_sq += static_cast<double>(last * last);
  }
  return summarize(sum, sum_sq, trials);
}

}  // namespace sefa::oracle

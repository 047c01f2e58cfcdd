#pragma once

#include "sefa/rng.hpp"

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sefa::data {

enum class FeatureKind { continuous, categorical };

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::continuous;
  /// Number of real categories; the missing category is index `cardinality`.
  std::size_t cardinality = 0;
  /// Optional level names for categorical features (size == cardinality).
  std::vector<std::string> levels;
};

struct FeatureSchema {
  std::vector<FeatureSpec> features;

  std::size_t size() const { return features.size(); }
  bool is_categorical(std::size_t i) const { return features[i].kind == FeatureKind::categorical; }
  /// Throws ConfigError: categorical cardinality < 2, duplicate names, level count mismatch.
  void validate() const;
};

/// Feature values plus observation mask (1 = observed). Unobserved
/// continuous slots hold 0, unobserved categorical slots hold the missing category.
struct MaskedInstance {
  std::vector<float> values;
  std::vector<std::uint8_t> mask;

  std::size_t size() const { return values.size(); }
};

struct Split {
  std::vector<MaskedInstance> instances;
  std::vector<int> labels;
  /// Ground-truth relevant features per instance (synthetic data only).
  std::vector<std::vector<std::size_t>> relevant;

  std::size_t size() const { return instances.size(); }
  bool empty() const { return instances.empty(); }
  bool has_relevant() const { return !relevant.empty(); }
};

struct Dataset {
  std::string name;
  FeatureSchema schema;
  std::size_t num_classes = 2;
  std::vector<std::string> class_names;
  Split train;
  Split val;
  Split test;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;

  std::size_t total() const { return train + val + test; }
};

inline constexpr SplitSizes kFullSyntheticSizes{60000, 10000, 10000};
inline constexpr SplitSizes kDeskSyntheticSizes{20000, 5000, 5000};

/// Logit of one Syn variant (1, 2 or 3) for an 11-feature row; label is 1 w.p. 1/(1+e^logit).
double syn_logit(int variant, std::span<const double> x);
/// Indices of the features the Syn variant's label depends on for this row (0-based, includes 10).
std::vector<std::size_t> syn_relevant(int variant, std::span<const double> x);

Dataset gen_syn(int variant, SplitSizes sizes, double noise_sigma, std::uint64_t seed);
Dataset gen_cube(SplitSizes sizes, std::uint64_t seed);

/// Per-class feature means of the cube's three designated features (class 0-based).
std::array<double, 3> cube_corner(int cls);

/// Label of the indicator problem: values[values[d]] where values[d] is 0-based.
int indicator_label(std::span<const float> values, std::size_t d);
Dataset gen_indicator(std::size_t d, SplitSizes sizes, std::uint64_t seed);

struct CsvOptions {
  std::string label_column;
  /// Columns treated as categorical; all other non-label columns are continuous.
  std::vector<std::string> categorical_columns;
  /// Optional subset/order of feature columns; empty means every non-label column.
  std::vector<std::string> feature_columns;
  double train_ratio = 0.8;
  double val_ratio = 0.1;
  double test_ratio = 0.1;
  std::vector<std::string> missing_tokens{"", "NA", "?"};
  std::uint64_t seed = 0;
};

/// Thrown for an unparseable cell; carries the 1-based file line.
class CsvParseError : public std::runtime_error {
 public:
  CsvParseError(std::size_t line, const std::string& what);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

Dataset load_csv(const std::string& path, const CsvOptions& options);

/// Writes every split with `<feature>__mask` columns in deterministic order.
void export_csv(const Dataset& dataset, const std::string& path);

/// Splits one CSV line honoring double quotes.
std::vector<std::string> split_csv_line(const std::string& line);

double normal_cdf(double x);
/// Inverse standard normal CDF (Acklam's rational approximation, |error| < 1.2e-9).
double normal_quantile(double p);

/// Empirical-CDF copula: value -> Phi^-1(rank / (N + 1)), rank clamped to [1, N].
class CopulaTransform {
 public:
  CopulaTransform() = default;

  /// Fits on the training split's observed continuous values.
  static CopulaTransform fit(const FeatureSchema& schema, const Split& train);

  bool fitted() const { return fitted_; }
  double apply(double value, std::size_t feature) const;
  /// Copula-transformed continuous values, unobserved slots 0, categorical unchanged.
  MaskedInstance transform(const FeatureSchema& schema, const MaskedInstance& instance) const;

  const std::vector<std::vector<float>>& tables() const { return sorted_; }
  static CopulaTransform from_tables(std::vector<std::vector<float>> tables);

 private:
  std::vector<std::vector<float>> sorted_;
  bool fitted_ = false;
};

/// Draws p ~ U(0,1) once, then keeps each observed bit independently when u > p.
std::vector<std::uint8_t> subsample_mask(std::span<const std::uint8_t> mask, Rng& rng);

/// Instance with every feature unobserved.
MaskedInstance empty_instance(const FeatureSchema& schema);

/// Instance `source` restricted to `mask` (values outside the mask reset to missing).
MaskedInstance restrict_to(const FeatureSchema& schema, const MaskedInstance& source,
                           std::span<const std::uint8_t> mask);

}  // namespace sefa::data

#include "sefa/datasets.hpp"

#include "sefa/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace sefa::data {

void FeatureSchema::validate() const {
  std::set<std::string> names;
  for (const auto& f : features) {
    if (!names.insert(f.name).second) throw ConfigError("schema: duplicate feature name '" + f.name + "'");
    if (f.kind == FeatureKind::categorical) {
      if (f.cardinality < 2) throw ConfigError("schema: feature '" + f.name + "' needs cardinality >= 2");
      if (!f.levels.empty() && f.levels.size() != f.cardinality) {
        throw ConfigError("schema: feature '" + f.name + "' level count differs from cardinality");
      }
    }
  }
}

namespace {

FeatureSchema continuous_schema(std::size_t d) {
  FeatureSchema schema;
  for (std::size_t i = 0; i < d; ++i) schema.features.push_back({"x" + std::to_string(i + 1), FeatureKind::continuous, 0, {}});
  return schema;
}

Split& split_for(Dataset& ds, std::size_t index, const SplitSizes& sizes) {
  if (index < sizes.train) return ds.train;
  if (index < sizes.train + sizes.val) return ds.val;
  return ds.test;
}

void check_sizes(const SplitSizes& sizes) {
  if (sizes.total() < 1) throw ConfigError("dataset generator: n must be >= 1");
}

}  // namespace

double syn_logit(int variant, std::span<const double> x) {
  if (x.size() != 11) throw ConfigError("syn_logit: expected 11 features");
  const double l1 = 4.0 * x[0] * x[1];
  double l2 = -4.2;
  for (std::size_t i = 2; i < 6; ++i) l2 += 1.2 * x[i] * x[i];
  const double l3 = -10.0 * std::sin(0.2 * x[6]) + std::abs(x[7]) + x[8] + std::exp(-x[9]) - 2.4;
  const bool low = x[10] < 0.0;
  switch (variant) {
    case 1: return low ? l1 : l2;
    case 2: return low ? l1 : l3;
    case 3: return low ? l2 : l3;
    default: throw ConfigError("syn: variant must be 1, 2 or 3");
  }
}

std::vector<std::size_t> syn_relevant(int variant, std::span<const double> x) {
  if (x.size() != 11) throw ConfigError("syn_relevant: expected 11 features");
  const std::vector<std::size_t> g1{0, 1}, g2{2, 3, 4, 5}, g3{6, 7, 8, 9};
  const bool low = x[10] < 0.0;
  std::vector<std::size_t> out;
  switch (variant) {
    case 1: out = low ? g1 : g2; break;
    case 2: out = low ? g1 : g3; break;
    case 3: out = low ? g2 : g3; break;
    default: throw ConfigError("syn: variant must be 1, 2 or 3");
  }
  out.push_back(10);
  return out;
}

Dataset gen_syn(int variant, SplitSizes sizes, double noise_sigma, std::uint64_t seed) {
  if (variant < 1 || variant > 3) throw ConfigError("gen_syn: variant must be 1, 2 or 3");
  if (!(noise_sigma >= 0.0)) throw ConfigError("gen_syn: noise_sigma must be >= 0");
  check_sizes(sizes);
  Dataset ds;
  ds.name = "syn" + std::to_string(variant);
  ds.schema = continuous_schema(11);
  ds.num_classes = 2;
  ds.class_names = {"0", "1"};
  Rng rng(seed);
  std::array<double, 11> x{};
  for (std::size_t n = 0; n < sizes.total(); ++n) {
    for (double& v : x) v = rng.normal();
    const double p1 = 1.0 / (1.0 + std::exp(syn_logit(variant, x)));
    const int label = rng.uniform() < p1 ? 1 : 0;
    MaskedInstance inst;
    inst.values.resize(11);
    inst.mask.assign(11, 1);
    for (std::size_t i = 0; i < 11; ++i) {
      const double noise = noise_sigma > 0.0 ? noise_sigma * rng.normal() : 0.0;
      inst.values[i] = static_cast<float>(x[i] + noise);
    }
    Split& s = split_for(ds, n, sizes);
    s.instances.push_back(std::move(inst));
    s.labels.push_back(label);
    s.relevant.push_back(syn_relevant(variant, x));
  }
  return ds;
}

std::array<double, 3> cube_corner(int cls) {
  if (cls < 0 || cls > 7) throw ConfigError("cube: class must be in [0, 8)");
  return {static_cast<double>(cls & 1), static_cast<double>((cls >> 1) & 1), static_cast<double>((cls >> 2) & 1)};
}

Dataset gen_cube(SplitSizes sizes, std::uint64_t seed) {
  check_sizes(sizes);
  Dataset ds;
  ds.name = "cube";
  ds.schema = continuous_schema(20);
  ds.num_classes = 8;
  for (int c = 0; c < 8; ++c) ds.class_names.push_back(std::to_string(c));
  Rng rng(seed);
  for (std::size_t n = 0; n < sizes.total(); ++n) {
    const int cls = static_cast<int>(rng.uniform_index(8));
    const auto corner = cube_corner(cls);
    MaskedInstance inst;
    inst.values.resize(20);
    inst.mask.assign(20, 1);
    for (std::size_t i = 0; i < 20; ++i) {
      const std::size_t offset = i - static_cast<std::size_t>(cls);
      const bool designated = i >= static_cast<std::size_t>(cls) && offset < 3;
      const double mean = designated ? corner[offset] : 0.5;
      const double sd = designated ? 0.1 : 0.3;
      inst.values[i] = static_cast<float>(mean + sd * rng.normal());
    }
    Split& s = split_for(ds, n, sizes);
    s.instances.push_back(std::move(inst));
    s.labels.push_back(cls);
    s.relevant.push_back({static_cast<std::size_t>(cls), static_cast<std::size_t>(cls) + 1,
                          static_cast<std::size_t>(cls) + 2});
  }
  return ds;
}

int indicator_label(std::span<const float> values, std::size_t d) {
  if (values.size() != d + 1) throw ConfigError("indicator_label: expected d + 1 values");
  const auto which = static_cast<std::size_t>(values[d]);
  if (which >= d) throw ConfigError("indicator_label: indicator out of range");
  return static_cast<int>(values[which]);
}

Dataset gen_indicator(std::size_t d, SplitSizes sizes, std::uint64_t seed) {
  if (d < 2) throw ConfigError("gen_indicator: d must be >= 2");
  check_sizes(sizes);
  Dataset ds;
  ds.name = "indicator" + std::to_string(d);
  for (std::size_t i = 0; i < d; ++i) {
    ds.schema.features.push_back({"x" + std::to_string(i + 1), FeatureKind::categorical, 2, {"0", "1"}});
  }
  FeatureSpec ind{"indicator", FeatureKind::categorical, d, {}};
  for (std::size_t i = 0; i < d; ++i) ind.levels.push_back(std::to_string(i + 1));
  ds.schema.features.push_back(ind);
  ds.num_classes = 2;
  ds.class_names = {"0", "1"};
  Rng rng(seed);
  for (std::size_t n = 0; n < sizes.total(); ++n) {
    MaskedInstance inst;
    inst.values.resize(d + 1);
    inst.mask.assign(d + 1, 1);
    for (std::size_t i = 0; i < d; ++i) inst.values[i] = static_cast<float>(rng.uniform_index(2));
    const std::size_t which = rng.uniform_index(d);
    inst.values[d] = static_cast<float>(which);
    Split& s = split_for(ds, n, sizes);
    s.labels.push_back(indicator_label(inst.values, d));
    s.instances.push_back(std::move(inst));
    s.relevant.push_back({which, d});
  }
  return ds;
}

CsvParseError::CsvParseError(std::size_t line, const std::string& what)
    : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char ch = line[k];
    if (quoted) {
      if (ch == '"') {
        if (k + 1 < line.size() && line[k + 1] == '"') {
          cur.push_back('"');
          ++k;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(ch);
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      cells.push_back(std::move(cur));
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  cells.push_back(std::move(cur));
  return cells;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else out.push_back(ch);
  }
  return out + "\"";
}

}  // namespace

Dataset load_csv(const std::string& path, const CsvOptions& options) {
  const double ratio_sum = options.train_ratio + options.val_ratio + options.test_ratio;
  if (options.train_ratio < 0 || options.val_ratio < 0 || options.test_ratio < 0 || std::abs(ratio_sum - 1.0) > 1e-9) {
    throw ConfigError("load_csv: split ratios must be nonnegative and sum to 1");
  }
  std::ifstream in(path);
  if (!in) throw ConfigError("load_csv: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw CsvParseError(1, "missing header row");
  std::vector<std::string> header = split_csv_line(line);
  for (auto& h : header) h = trim(h);

  std::map<std::string, std::size_t> column_of;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (!column_of.emplace(header[c], c).second) throw CsvParseError(1, "duplicate column '" + header[c] + "'");
  }
  auto label_it = column_of.find(options.label_column);
  if (label_it == column_of.end()) throw CsvParseError(1, "label column '" + options.label_column + "' not in header");

  std::vector<std::string> feature_names = options.feature_columns;
  if (feature_names.empty()) {
    for (const auto& h : header) {
      if (h != options.label_column) feature_names.push_back(h);
    }
  }
  std::set<std::string> categorical(options.categorical_columns.begin(), options.categorical_columns.end());
  for (const auto& c : categorical) {
    if (!column_of.count(c)) throw CsvParseError(1, "categorical column '" + c + "' not in header");
  }
  std::vector<std::size_t> feature_cols;
  for (const auto& f : feature_names) {
    auto it = column_of.find(f);
    if (it == column_of.end()) throw CsvParseError(1, "feature column '" + f + "' not in header");
    if (f == options.label_column) throw ConfigError("load_csv: label column cannot be a feature");
    feature_cols.push_back(it->second);
  }
  const std::set<std::string> missing(options.missing_tokens.begin(), options.missing_tokens.end());

  struct RawRow {
    std::vector<std::string> cells;  // per feature, trimmed
    std::string label;
    std::size_t line;
  };
  std::vector<RawRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw CsvParseError(line_no, "expected " + std::to_string(header.size()) + " cells, found " +
                                       std::to_string(cells.size()));
    }
    RawRow row{{}, trim(cells[label_it->second]), line_no};
    if (missing.count(row.label)) throw CsvParseError(line_no, "missing label");
    for (std::size_t c : feature_cols) row.cells.push_back(trim(cells[c]));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ConfigError("load_csv: no data rows");

  // Continuous cells are validated up front so errors point at the file line.
  const std::size_t d = feature_names.size();
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < d; ++i) {
      if (categorical.count(feature_names[i]) || missing.count(row.cells[i])) continue;
      const std::string& cell = row.cells[i];
      char* end = nullptr;
      std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0') {
        throw CsvParseError(row.line, "column '" + feature_names[i] + "': cannot parse '" + cell + "' as a number");
      }
    }
  }

  std::vector<std::size_t> order(rows.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(options.seed);
  for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.uniform_index(k)]);
  const std::size_t n = rows.size();
  const auto n_train = static_cast<std::size_t>(std::llround(options.train_ratio * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(options.val_ratio * static_cast<double>(n))));
  const SplitSizes sizes{n_train, n_val, n - n_train - n_val};

  Dataset ds;
  ds.name = path;
  std::set<std::string> label_set;
  for (const auto& row : rows) label_set.insert(row.label);
  ds.class_names.assign(label_set.begin(), label_set.end());
  ds.num_classes = ds.class_names.size();
  if (ds.num_classes < 2) throw ConfigError("load_csv: label column needs at least two classes");
  std::map<std::string, int> label_index;
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) label_index[ds.class_names[c]] = static_cast<int>(c);

  // Categorical levels come from the training split only.
  std::vector<std::map<std::string, std::size_t>> level_index(d);
  for (std::size_t i = 0; i < d; ++i) {
    FeatureSpec spec{feature_names[i], FeatureKind::continuous, 0, {}};
    if (categorical.count(feature_names[i])) {
      spec.kind = FeatureKind::categorical;
      std::set<std::string> levels;
      for (std::size_t k = 0; k < sizes.train; ++k) {
        const auto& cell = rows[order[k]].cells[i];
        if (!missing.count(cell)) levels.insert(cell);
      }
      spec.levels.assign(levels.begin(), levels.end());
      if (spec.levels.size() < 2) {
        // A constant column still needs a valid categorical slot.
        while (spec.levels.size() < 2) spec.levels.push_back("__unused" + std::to_string(spec.levels.size()));
      }
      spec.cardinality = spec.levels.size();
      for (std::size_t v = 0; v < spec.levels.size(); ++v) level_index[i][spec.levels[v]] = v;
    }
    ds.schema.features.push_back(std::move(spec));
  }
  ds.schema.validate();

  for (std::size_t k = 0; k < n; ++k) {
    const RawRow& row = rows[order[k]];
    MaskedInstance inst;
    inst.values.assign(d, 0.0f);
    inst.mask.assign(d, 0);
    for (std::size_t i = 0; i < d; ++i) {
      const auto& spec = ds.schema.features[i];
      const std::string& cell = row.cells[i];
      if (spec.kind == FeatureKind::categorical) {
        inst.values[i] = static_cast<float>(spec.cardinality);
        if (missing.count(cell)) continue;
        auto it = level_index[i].find(cell);
        if (it == level_index[i].end()) continue;  // unseen level: treated as missing
        inst.values[i] = static_cast<float>(it->second);
        inst.mask[i] = 1;
      } else {
        if (missing.count(cell)) continue;
        inst.values[i] = static_cast<float>(std::strtod(cell.c_str(), nullptr));
        inst.mask[i] = 1;
      }
    }
    Split& s = split_for(ds, k, sizes);
    s.instances.push_back(std::move(inst));
    s.labels.push_back(label_index.at(row.label));
  }
  return ds;
}

void export_csv(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("export_csv: cannot write '" + path + "'");
  const auto& schema = dataset.schema;
  out << "split";
  for (const auto& f : schema.features) out << ',' << csv_escape(f.name);
  for (const auto& f : schema.features) out << ',' << csv_escape(f.name + "__mask");
  out << ",label\n";
  out.precision(9);
  auto write_split = [&](const char* name, const Split& split) {
    for (std::size_t r = 0; r < split.size(); ++r) {
      const auto& inst = split.instances[r];
      out << name;
      for (std::size_t i = 0; i < schema.size(); ++i) {
        out << ',';
        if (!inst.mask[i]) continue;
        const auto& spec = schema.features[i];
        if (spec.kind == FeatureKind::categorical && !spec.levels.empty()) {
          out << csv_escape(spec.levels[static_cast<std::size_t>(inst.values[i])]);
        } else {
          out << inst.values[i];
        }
      }
      for (std::size_t i = 0; i < schema.size(); ++i) out << ',' << static_cast<int>(inst.mask[i]);
      const int label = split.labels[r];
      out << ',' << (dataset.class_names.empty() ? std::to_string(label) : csv_escape(dataset.class_names[static_cast<std::size_t>(label)]))
          << '\n';
    }
  };
  write_split("train", dataset.train);
  write_split("val", dataset.val);
  write_split("test", dataset.test);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("normal_quantile: p must lie in (0, 1)");
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  if (p > 1.0 - p_low) {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    return -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
           ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double q = p - 0.5;
  const double r = q * q;
  return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
         (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

CopulaTransform CopulaTransform::fit(const FeatureSchema& schema, const Split& train) {
  CopulaTransform t;
  t.sorted_.resize(schema.size());
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (schema.is_categorical(i)) continue;
    auto& col = t.sorted_[i];
    for (const auto& inst : train.instances) {
      if (inst.mask[i]) col.push_back(inst.values[i]);
    }
    if (col.empty()) throw ConfigError("copula: feature '" + schema.features[i].name + "' has no observed training values");
    std::sort(col.begin(), col.end());
  }
  t.fitted_ = true;
  return t;
}

CopulaTransform CopulaTransform::from_tables(std::vector<std::vector<float>> tables) {
  CopulaTransform t;
  t.sorted_ = std::move(tables);
  for (const auto& col : t.sorted_) {
    if (!std::is_sorted(col.begin(), col.end())) throw FormatError("copula table is not sorted");
  }
  t.fitted_ = true;
  return t;
}

double CopulaTransform::apply(double value, std::size_t feature) const {
  if (!fitted_) throw UsageError("copula: apply called before fit");
  if (feature >= sorted_.size() || sorted_[feature].empty()) {
    throw UsageError("copula: feature " + std::to_string(feature) + " has no fitted table");
  }
  const auto& col = sorted_[feature];
  const auto n = col.size();
  auto rank = static_cast<std::size_t>(std::upper_bound(col.begin(), col.end(), static_cast<float>(value)) - col.begin());
  rank = std::clamp<std::size_t>(rank, 1, n);
  return normal_quantile(static_cast<double>(rank) / static_cast<double>(n + 1));
}

MaskedInstance CopulaTransform::transform(const FeatureSchema& schema, const MaskedInstance& instance) const {
  MaskedInstance out = instance;
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (schema.is_categorical(i)) continue;
    out.values[i] = instance.mask[i] ? static_cast<float>(apply(instance.values[i], i)) : 0.0f;
  }
  return out;
}

std::vector<std::uint8_t> subsample_mask(std::span<const std::uint8_t> mask, Rng& rng) {
  const double p_removal = rng.uniform();
  std::vector<std::uint8_t> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double u = rng.uniform();
    out[i] = (mask[i] && u > p_removal) ? 1 : 0;
  }
  return out;
}

MaskedInstance empty_instance(const FeatureSchema& schema) {
  MaskedInstance inst;
  inst.values.assign(schema.size(), 0.0f);
  inst.mask.assign(schema.size(), 0);
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (schema.is_categorical(i)) inst.values[i] = static_cast<float>(schema.features[i].cardinality);
  }
  return inst;
}

MaskedInstance restrict_to(const FeatureSchema& schema, const MaskedInstance& source,
                           std::span<const std::uint8_t> mask) {
  MaskedInstance out = empty_instance(schema);
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (mask[i] && source.mask[i]) {
      out.values[i] = source.values[i];
      out.mask[i] = 1;
    }
  }
  return out;
}

}  // namespace sefa::data

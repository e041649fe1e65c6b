#include "fairbranch/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "fairbranch/errors.hpp"

namespace fairbranch {

namespace {

std::string trim(std::string_view s) {
  auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string_view::npos) return {};
  auto end = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(begin, end - begin + 1));
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::string_view rest(line);
  while (true) {
    auto pos = rest.find(',');
    out.push_back(trim(rest.substr(0, pos)));
    if (pos == std::string_view::npos) break;
    rest.remove_prefix(pos + 1);
  }
  return out;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

void Dataset::validate(bool require_both_groups) const {
  const Index n = features.rows();
  if (protected_attr.size() != n || labels.rows() != n) {
    throw SchemaError("dataset arrays disagree on sample count");
  }
  if (static_cast<Index>(task_names.size()) != labels.cols()) {
    throw SchemaError("task_names has " + std::to_string(task_names.size()) +
                      " entries but labels has " + std::to_string(labels.cols()) + " columns");
  }
  if (!feature_names.empty() && static_cast<Index>(feature_names.size()) != features.cols()) {
    throw SchemaError("feature_names does not match the feature column count");
  }
  for (Index i = 0; i < n; ++i) {
    if (protected_attr(i) != 0 && protected_attr(i) != 1) {
      throw SchemaError("protected value at row " + std::to_string(i) + " is not 0/1");
    }
  }
  if ((labels.array() != 0 && labels.array() != 1).any()) {
    throw SchemaError("labels must be 0/1");
  }
  if (require_both_groups) {
    const Index ones = protected_attr.sum();
    if (ones == 0 || ones == n) {
      throw SchemaError("dataset must contain samples of both protected groups");
    }
  }
}

Dataset Dataset::subset(std::span<const Index> rows) const {
  Dataset out;
  const auto k = static_cast<Index>(rows.size());
  out.features.resize(k, features.cols());
  out.protected_attr.resize(k);
  out.labels.resize(k, labels.cols());
  for (Index r = 0; r < k; ++r) {
    const Index src = rows[static_cast<std::size_t>(r)];
    out.features.row(r) = features.row(src);
    out.protected_attr(r) = protected_attr(src);
    out.labels.row(r) = labels.row(src);
  }
  out.feature_names = feature_names;
  out.task_names = task_names;
  return out;
}

Dataset Dataset::single_task(Index task) const {
  if (task < 0 || task >= n_tasks()) {
    throw ConfigError("task id " + std::to_string(task) + " out of range");
  }
  Dataset out;
  out.features = features;
  out.protected_attr = protected_attr;
  out.labels = labels.col(task);
  out.feature_names = feature_names;
  out.task_names = {task_names[static_cast<std::size_t>(task)]};
  return out;
}

void SyntheticSpec::validate() const {
  if (n_samples < 2) throw ConfigError("n_samples must be >= 2");
  if (n_features < 1) throw ConfigError("n_features must be >= 1");
  if (n_tasks < 1) throw ConfigError("n_tasks must be >= 1");
  if (n_families < 1 || n_families > n_tasks) {
    throw ConfigError("n_families must be in [1, n_tasks]");
  }
  if (!(bias_strength >= 0.0)) throw ConfigError("bias_strength must be >= 0");
  if (!(noise >= 0.0 && noise < 1.0)) throw ConfigError("noise must be in [0,1)");
  if (!(bias_strength + noise < 0.5)) throw ConfigError("bias_strength + noise must be < 0.5");
  if (!(perturbation >= 0.0) || !std::isfinite(proxy_strength)) {
    throw ConfigError("perturbation must be >= 0 and proxy_strength finite");
  }
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const Index n = spec.n_samples, m = spec.n_features, T = spec.n_tasks;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Eigen::MatrixXd family_w(m, spec.n_families);
  for (Index f = 0; f < spec.n_families; ++f)
    for (Index j = 0; j < m; ++j) family_w(j, f) = normal(rng);

  SyntheticData out;
  Eigen::MatrixXd task_w(m, T);
  for (Index t = 0; t < T; ++t) {
    TaskMeta meta;
    meta.family = static_cast<int>(t % spec.n_families);
    meta.biased = (t % 2) == 1;
    out.meta.push_back(meta);
    for (Index j = 0; j < m; ++j) {
      task_w(j, t) = family_w(j, meta.family) + spec.perturbation * normal(rng);
    }
  }

  Dataset& d = out.data;
  d.features.resize(n, m);
  d.protected_attr.resize(n);
  d.labels.resize(n, T);
  for (Index i = 0; i < n; ++i) {
    d.protected_attr(i) = unit(rng) < 0.5 ? 0 : 1;
    for (Index j = 0; j < m; ++j) d.features(i, j) = normal(rng);
  }
  // Keep both groups present even for tiny n.
  if (d.protected_attr.sum() == 0) d.protected_attr(0) = 1;
  if (d.protected_attr.sum() == n) d.protected_attr(0) = 0;
  d.features.col(0) += spec.proxy_strength * d.protected_attr.cast<double>();

  const Eigen::MatrixXd scores = d.features * task_w;
  for (Index i = 0; i < n; ++i) {
    for (Index t = 0; t < T; ++t) {
      int y = scores(i, t) > 0.0 ? 1 : 0;
      if (unit(rng) < spec.noise) y = 1 - y;
      const double u = unit(rng);
      if (out.meta[t].biased && d.protected_attr(i) == 1 && y == 1 && u < spec.bias_strength) y = 0;
      d.labels(i, t) = y;
    }
  }

  for (Index j = 0; j < m; ++j) d.feature_names.push_back("f" + std::to_string(j));
  for (Index t = 0; t < T; ++t) d.task_names.push_back("task_" + std::to_string(t));
  d.validate();
  return out;
}

nlohmann::json metadata_json(const Dataset& d, std::span<const TaskMeta> meta) {
  if (meta.size() != d.task_names.size()) throw SchemaError("metadata does not cover every task");
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t t = 0; t < meta.size(); ++t) {
    j[d.task_names[t]] = {{"family", meta[t].family}, {"biased", meta[t].biased}};
  }
  return j;
}

Dataset load_csv(const std::filesystem::path& path, const std::string& protected_column,
                 const std::vector<std::string>& task_columns) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw SchemaError(path.string() + ": missing header row");
  const auto header = split_fields(line);

  auto find_col = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw SchemaError(path.string() + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t prot_col = find_col(protected_column);
  std::vector<std::size_t> task_cols;
  for (const auto& name : task_columns) task_cols.push_back(find_col(name));
  std::vector<std::size_t> feature_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == prot_col || std::find(task_cols.begin(), task_cols.end(), c) != task_cols.end())
      continue;
    feature_cols.push_back(c);
  }

  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    rows.push_back(split_fields(line));
  }

  Dataset d;
  const auto n = static_cast<Index>(rows.size());
  d.features.resize(n, static_cast<Index>(feature_cols.size()));
  d.protected_attr.resize(n);
  d.labels.resize(n, static_cast<Index>(task_cols.size()));

  auto parse_binary = [&](const std::string& field, Index row, const std::string& col) {
    if (field == "0") return 0;
    if (field == "1") return 1;
    throw ParseError(path.string() + ": row " + std::to_string(row) + " column '" + col +
                     "' has non-binary value '" + field + "'");
  };

  for (Index r = 0; r < n; ++r) {
    const auto& fields = rows[static_cast<std::size_t>(r)];
    if (fields.size() != header.size()) {
      throw ParseError(path.string() + ": row " + std::to_string(r) + " has " +
                       std::to_string(fields.size()) + " fields, expected " +
                       std::to_string(header.size()));
    }
    for (std::size_t k = 0; k < feature_cols.size(); ++k) {
      const auto& f = fields[feature_cols[k]];
      double v = 0.0;
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size() || f.empty()) {
        throw ParseError(path.string() + ": row " + std::to_string(r) + " column '" +
                         header[feature_cols[k]] + "' is not numeric: '" + f + "'");
      }
      d.features(r, static_cast<Index>(k)) = v;
    }
    d.protected_attr(r) = parse_binary(fields[prot_col], r, protected_column);
    for (std::size_t k = 0; k < task_cols.size(); ++k) {
      d.labels(r, static_cast<Index>(k)) = parse_binary(fields[task_cols[k]], r, task_columns[k]);
    }
  }
  for (auto c : feature_cols) d.feature_names.push_back(header[c]);
  d.task_names = task_columns;
  d.validate();
  return d;
}

void write_csv(const Dataset& d, const std::filesystem::path& path,
               const std::string& protected_column) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SchemaError("cannot write " + path.string());
  for (Index j = 0; j < d.n_features(); ++j) {
    out << (d.feature_names.empty() ? "f" + std::to_string(j)
                                    : d.feature_names[static_cast<std::size_t>(j)])
        << ',';
  }
  out << protected_column;
  for (const auto& t : d.task_names) out << ',' << t;
  out << '\n';
  for (Index i = 0; i < d.n_samples(); ++i) {
    for (Index j = 0; j < d.n_features(); ++j) out << format_double(d.features(i, j)) << ',';
    out << d.protected_attr(i);
    for (Index t = 0; t < d.n_tasks(); ++t) out << ',' << d.labels(i, t);
    out << '\n';
  }
}

SplitIndices split_indices(const Dataset& d, const SplitSpec& s) {
  if (!(s.train_fraction > 0.0 && s.train_fraction < 1.0)) {
    throw ConfigError("train_fraction must be in (0,1)");
  }
  const Index n = d.n_samples();
  std::vector<std::vector<Index>> strata;
  if (s.stratify_on == Stratify::Protected) {
    strata.resize(2);
    for (Index i = 0; i < n; ++i) strata[static_cast<std::size_t>(d.protected_attr(i))].push_back(i);
    for (std::size_t g = 0; g < 2; ++g) {
      if (strata[g].size() < 2) {
        throw SplitError("protected group " + std::to_string(g) + " has fewer than 2 samples");
      }
    }
  } else {
    strata.emplace_back(static_cast<std::size_t>(n));
    std::iota(strata[0].begin(), strata[0].end(), Index{0});
  }

  std::mt19937_64 rng(s.seed);
  for (auto& stratum : strata) std::shuffle(stratum.begin(), stratum.end(), rng);

  // Largest-remainder apportionment of floor(fraction * n) across strata.
  const auto total = static_cast<Index>(std::floor(s.train_fraction * static_cast<double>(n)));
  std::vector<Index> quota(strata.size());
  std::vector<double> remainder(strata.size());
  Index assigned = 0;
  for (std::size_t k = 0; k < strata.size(); ++k) {
    const double exact = s.train_fraction * static_cast<double>(strata[k].size());
    quota[k] = static_cast<Index>(std::floor(exact));
    remainder[k] = exact - static_cast<double>(quota[k]);
    assigned += quota[k];
  }
  std::vector<std::size_t> order(strata.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < total && k < order.size(); ++k, ++assigned) ++quota[order[k]];
  for (std::size_t k = 0; k < strata.size(); ++k) {
    const auto size = static_cast<Index>(strata[k].size());
    if (size >= 2) quota[k] = std::clamp<Index>(quota[k], 1, size - 1);
  }

  SplitIndices out;
  for (std::size_t k = 0; k < strata.size(); ++k) {
    const auto& stratum = strata[k];
    out.train.insert(out.train.end(), stratum.begin(), stratum.begin() + quota[k]);
    out.test.insert(out.test.end(), stratum.begin() + quota[k], stratum.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

std::pair<Dataset, Dataset> stratified_split(const Dataset& d, const SplitSpec& s) {
  const auto idx = split_indices(d, s);
  return {d.subset(idx.train), d.subset(idx.test)};
}

std::vector<std::vector<Index>> batch_iter(Index n_samples, Index batch_size, std::uint64_t seed,
                                           int epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<Index> perm(static_cast<std::size_t>(n_samples));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x62617463u};
  std::mt19937_64 rng(seq);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<Index>> chunks;
  for (Index start = 0; start < n_samples; start += batch_size) {
    const Index stop = std::min(n_samples, start + batch_size);
    chunks.emplace_back(perm.begin() + start, perm.begin() + stop);
  }
  return chunks;
}

FeatureScaler FeatureScaler::fit(const Eigen::MatrixXd& x) {
  FeatureScaler s;
  const auto n = static_cast<double>(x.rows());
  s.mean = x.colwise().mean();
  s.scale.resize(x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const double var = (x.col(j).array() - s.mean(j)).square().sum() / std::max(1.0, n);
    const double sd = std::sqrt(var);
    s.scale(j) = sd > 1e-12 ? sd : 1.0;
  }
  return s;
}

FeatureScaler FeatureScaler::identity(Index n_features) {
  return {Eigen::RowVectorXd::Zero(n_features), Eigen::RowVectorXd::Ones(n_features)};
}

Eigen::MatrixXd FeatureScaler::transform(const Eigen::MatrixXd& x) const {
  if (x.cols() != mean.size()) throw ShapeError("scaler fitted on a different feature count");
  return (x.rowwise() - mean).array().rowwise() / scale.array();
}

Dataset FeatureScaler::apply(const Dataset& d) const {
  Dataset out = d;
  out.features = transform(d.features);
  return out;
}

nlohmann::json FeatureScaler::to_json() const {
  return {{"mean", std::vector<double>(mean.data(), mean.data() + mean.size())},
          {"scale", std::vector<double>(scale.data(), scale.data() + scale.size())}};
}

FeatureScaler FeatureScaler::from_json(const nlohmann::json& j) {
  const auto m = j.at("mean").get<std::vector<double>>();
  const auto s = j.at("scale").get<std::vector<double>>();
  if (m.size() != s.size()) throw SchemaError("scaler mean/scale length mismatch");
  FeatureScaler out;
  out.mean = Eigen::Map<const Eigen::RowVectorXd>(m.data(), static_cast<Index>(m.size()));
  out.scale = Eigen::Map<const Eigen::RowVectorXd>(s.data(), static_cast<Index>(s.size()));
  return out;
}

}  // namespace fairbranch

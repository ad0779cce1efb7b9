#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "teamprod/additive_fe.hpp"
#include "teamprod/hypergraph.hpp"
#include "teamprod/mixture_ve.hpp"

namespace teamprod {

/// Nearest-rank percentile: the value at rank ceil(p/100 * N) of the sorted sample.
/// p in (0, 100]. Throws DataError on an empty sample.
double nearest_rank(std::vector<double> x, double p);

inline const std::vector<double> kPercentiles = {10, 50, 90, 95, 99};

struct DescriptiveColumn {
  std::string label;   // "all" or "n=<size>"
  std::size_t workers = 0;
  std::size_t teams = 0;
  double mean_output = 0.0;
  double std_output = 0.0;  // population convention
  std::vector<double> output_pct;       // at kPercentiles
  std::vector<double> productions_pct;  // teams per worker, workers with >= 1 such team
};

struct DescriptiveTable {
  std::vector<DescriptiveColumn> columns;  // empty for a graph without teams
};

/// Per size and overall: counts, output moments and percentiles (adjusted output),
/// and percentiles of teams per worker.
DescriptiveTable descriptive_stats(const Hypergraph& h);

/// Rows are statistics, columns the table's columns.
std::string to_csv(const DescriptiveTable& t);

/// %.6g; non-finite values print as nan/inf.
std::string format_number(double v);
/// Every floating-point number rounded to 6 significant digits; non-finite ones become null.
nlohmann::json round_numbers(const nlohmann::json& j);

/// Long format: row_type,col_type,value with 1-based types.
std::string matrix_long_csv(const Eigen::MatrixXd& m);

nlohmann::json additive_report(const AdditiveResult& r);
nlohmann::json mixture_report(const MixtureFit& f, const Hypergraph& h);

/// worker_id,q1..qK in worker order.
std::string posteriors_csv(const VariationalState& s, const Hypergraph& h);
/// Rows matched to h's workers by id. Every worker of h must appear exactly once.
Eigen::MatrixXd read_posteriors(const std::string& text, const Hypergraph& h);

std::uint64_t fnv1a64(const std::string& bytes);
std::string hex64(std::uint64_t v);

struct ReportBundle {
  std::optional<DescriptiveTable> descriptives;
  std::optional<nlohmann::json> additive;
  std::map<int, nlohmann::json> mixtures;               // K -> mixture_K{K}.json
  std::map<std::string, Eigen::MatrixXd> matrices;      // name -> matrix_{name}.csv
  std::map<std::string, nlohmann::json> documents;      // file name -> extra JSON file
  std::map<std::string, std::string> texts;             // file name -> extra text file
  nlohmann::json meta = nlohmann::json::object();        // seed, config hash, versions
};

/// Writes the bundle into `dir` (created if missing) and a manifest.json listing every
/// file with its FNV-1a hash. Output is byte-identical for identical bundles.
/// Returns the written file names, manifest last.
std::vector<std::string> emit_bundle(const ReportBundle& b, const std::string& dir);

}  // namespace teamprod

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace teamprod {

using WorkerIndex = std::size_t;
using TeamIndex = std::size_t;

struct Worker {
  std::string id;
  std::map<int, int> degree_by_size;  // team size -> number of teams of that size

  int total_degree() const;
};

struct Team {
  std::string id;
  std::vector<WorkerIndex> members;  // ascending worker index, no duplicates
  double output = 0.0;
  double output_adj = 0.0;
  std::optional<int> year;

  int size() const { return static_cast<int>(members.size()); }
};

// Raw team record as read from input, before worker ids are resolved.
struct TeamRecord {
  std::string id;
  std::vector<std::string> worker_ids;
  double output = 0.0;
  std::optional<double> output_adj;
  std::optional<int> year;
};

/// Collaboration hypergraph: workers are nodes, teams are hyperedges carrying one
/// output observation each. Immutable once built.
///
/// Workers are stored in canonical id order (numeric ids compare numerically) and
/// each team's member list is sorted by worker index, so the object does not depend
/// on the order in which members were listed in the input.
class Hypergraph {
 public:
  Hypergraph() = default;

  /// Builds from raw records. Throws DataError on duplicate team ids, repeated
  /// members within a team, empty teams or negative output. Simulated data with
  /// Gaussian noise passes `allow_negative_output`.
  static Hypergraph from_records(const std::vector<TeamRecord>& records,
                                 const std::vector<std::string>& extra_workers = {},
                                 bool allow_negative_output = false);

  std::size_t n_workers() const { return workers_.size(); }
  std::size_t n_teams() const { return teams_.size(); }
  int n_max() const { return n_max_; }
  bool empty() const { return teams_.empty() && workers_.empty(); }

  const std::vector<Worker>& workers() const { return workers_; }
  const std::vector<Team>& teams() const { return teams_; }
  const Worker& worker(WorkerIndex i) const { return workers_.at(i); }
  const Team& team(TeamIndex j) const { return teams_.at(j); }

  /// Teams containing worker i, ascending.
  const std::vector<TeamIndex>& teams_of(WorkerIndex i) const { return incidence_.at(i); }
  std::optional<WorkerIndex> find_worker(const std::string& id) const;

  /// Sorted list of distinct team sizes present.
  std::vector<int> sizes() const;

  /// Keeps the flagged teams and every worker that still appears in one of them.
  Hypergraph subgraph(const std::vector<bool>& keep_team) const;

  /// Same structure with per-team adjusted outputs replaced.
  Hypergraph with_output_adj(const std::vector<double>& output_adj) const;

  /// Same structure with per-team raw outputs replaced (adjusted outputs follow).
  Hypergraph with_outputs(const std::vector<double>& output) const;

  std::vector<TeamRecord> to_records() const;

  friend bool operator==(const Hypergraph& a, const Hypergraph& b);

 private:
  void index();

  std::vector<Worker> workers_;
  std::vector<Team> teams_;
  std::vector<std::vector<TeamIndex>> incidence_;
  int n_max_ = 0;
};

bool operator==(const Team& a, const Team& b);

/// Canonical order on worker ids: all-digit ids compare numerically, others lexically.
bool worker_id_less(const std::string& a, const std::string& b);

// -- ingestion ---------------------------------------------------------------

struct CsvSchema {
  std::string team_id = "team_id";
  std::string worker_ids = "worker_ids";
  std::string output = "output";
  std::string year = "year";
  char delimiter = ',';
  char member_separator = ';';
};

struct LoadOptions {
  CsvSchema schema;
  int n_max = 3;  // 0 keeps every size
};

struct LoadResult {
  Hypergraph graph;
  std::size_t rows_read = 0;
  std::size_t dropped_oversize = 0;
};

LoadResult load_teams(const std::string& path, const LoadOptions& options = {});
LoadResult parse_teams(const std::string& text, const LoadOptions& options = {});

/// CSV in the same layout `load_teams` reads (team_id,worker_ids,output,year).
std::string to_csv(const Hypergraph& h);
void save_teams(const Hypergraph& h, const std::string& path);

nlohmann::json to_json(const Hypergraph& h);
Hypergraph hypergraph_from_json(const nlohmann::json& j);

// -- preprocessing -----------------------------------------------------------

/// Drops workers with fewer than `m` teams together with their teams. With
/// `iterate` the removal repeats until every remaining worker has at least `m`
/// teams; otherwise a single pass is made.
Hypergraph filter_min_productions(const Hypergraph& h, int m, bool iterate = true);

/// Keeps only teams whose size is in [1, n_max].
Hypergraph restrict_sizes(const Hypergraph& h, int n_max);

enum class YearEffectFamily { multiplicative, poisson_with_age };

struct YearEffects {
  std::map<int, double> year;  // multiplicative effect, reference year == 1
  std::map<int, double> age;   // poisson_with_age only, reference age == 1
  int iterations = 0;
};

struct NettingResult {
  Hypergraph graph;
  YearEffects effects;
};

/// Divides each team's output by its fitted multiplicative year (and age) effect.
///
/// multiplicative: least squares on log output with year dummies, so each effect is
/// the ratio of the year's geometric mean output to the reference year's. Outputs
/// must be strictly positive.
/// poisson_with_age: Poisson log-link fit on year and age dummies, where a team's
/// age is the rounded mean over members of (year - member's first production year).
/// Zero outputs are allowed.
NettingResult net_year_effects(const Hypergraph& h, int reference_year, YearEffectFamily family);

}  // namespace teamprod

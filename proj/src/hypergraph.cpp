#include "teamprod/hypergraph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "teamprod/error.hpp"

namespace teamprod {

int Worker::total_degree() const {
  int d = 0;
  for (const auto& [n, c] : degree_by_size) d += c;
  return d;
}

namespace {

bool all_digits(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Splits one CSV line, honoring double-quoted fields.
std::vector<std::string> split_fields(const std::string& line, char delim) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cur.push_back('"');
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == delim) {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(trim(cur));
  return out;
}

std::vector<std::string> split_members(const std::string& field, char sep) {
  std::vector<std::string> out;
  std::string tok;
  std::istringstream in(field);
  while (std::getline(in, tok, sep)) {
    tok = trim(tok);
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

double parse_double(const std::string& s, std::size_t row, const char* what) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(std::string("cannot parse ") + what + " '" + s + "'", row);
  }
}

int parse_int(const std::string& s, std::size_t row, const char* what) {
  try {
    std::size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(std::string("cannot parse ") + what + " '" + s + "'", row);
  }
}

std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  return out + "\"";
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

bool worker_id_less(const std::string& a, const std::string& b) {
  const bool da = all_digits(a), db = all_digits(b);
  if (da && db) {
    const auto strip = [](const std::string& s) {
      const auto p = s.find_first_not_of('0');
      return p == std::string::npos ? std::string("0") : s.substr(p);
    };
    const std::string sa = strip(a), sb = strip(b);
    if (sa.size() != sb.size()) return sa.size() < sb.size();
    if (sa != sb) return sa < sb;
    return a < b;
  }
  if (da != db) return da;  // numeric ids first
  return a < b;
}

bool operator==(const Team& a, const Team& b) {
  return a.id == b.id && a.members == b.members && a.output == b.output &&
         a.output_adj == b.output_adj && a.year == b.year;
}

bool operator==(const Hypergraph& a, const Hypergraph& b) {
  if (a.workers_.size() != b.workers_.size() || a.teams_ != b.teams_) return false;
  for (std::size_t i = 0; i < a.workers_.size(); ++i) {
    if (a.workers_[i].id != b.workers_[i].id ||
        a.workers_[i].degree_by_size != b.workers_[i].degree_by_size)
      return false;
  }
  return true;
}

Hypergraph Hypergraph::from_records(const std::vector<TeamRecord>& records,
                                    const std::vector<std::string>& extra_workers,
                                    bool allow_negative_output) {
  std::set<std::string, decltype(&worker_id_less)> ids(&worker_id_less);
  std::unordered_set<std::string> team_ids;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    if (!team_ids.insert(rec.id).second) throw DataError("duplicate team_id '" + rec.id + "'");
    if (rec.worker_ids.empty()) throw DataError("team '" + rec.id + "' has no members");
    if (!allow_negative_output && !(rec.output >= 0.0) && !std::isnan(rec.output))
      throw DataError("team '" + rec.id + "' has negative output");
    if (std::isnan(rec.output)) throw DataError("team '" + rec.id + "' has NaN output");
    std::unordered_set<std::string> seen;
    for (const auto& w : rec.worker_ids) {
      if (!seen.insert(w).second)
        throw DataError("team '" + rec.id + "' lists worker '" + w + "' more than once");
      ids.insert(w);
    }
  }
  for (const auto& w : extra_workers) ids.insert(w);

  Hypergraph h;
  std::unordered_map<std::string, WorkerIndex> lookup;
  for (const auto& id : ids) {
    lookup.emplace(id, h.workers_.size());
    h.workers_.push_back(Worker{id, {}});
  }
  h.teams_.reserve(records.size());
  for (const auto& rec : records) {
    Team t;
    t.id = rec.id;
    for (const auto& w : rec.worker_ids) t.members.push_back(lookup.at(w));
    std::sort(t.members.begin(), t.members.end());
    t.output = rec.output;
    t.output_adj = rec.output_adj.value_or(rec.output);
    t.year = rec.year;
    h.teams_.push_back(std::move(t));
  }
  h.index();
  return h;
}

void Hypergraph::index() {
  incidence_.assign(workers_.size(), {});
  for (auto& w : workers_) w.degree_by_size.clear();
  n_max_ = 0;
  for (TeamIndex j = 0; j < teams_.size(); ++j) {
    const int n = teams_[j].size();
    n_max_ = std::max(n_max_, n);
    for (WorkerIndex i : teams_[j].members) {
      incidence_[i].push_back(j);
      ++workers_[i].degree_by_size[n];
    }
  }
}

std::optional<WorkerIndex> Hypergraph::find_worker(const std::string& id) const {
  const auto it = std::lower_bound(workers_.begin(), workers_.end(), id,
                                   [](const Worker& w, const std::string& v) { return worker_id_less(w.id, v); });
  if (it == workers_.end() || it->id != id) return std::nullopt;
  return static_cast<WorkerIndex>(it - workers_.begin());
}

std::vector<int> Hypergraph::sizes() const {
  std::set<int> s;
  for (const auto& t : teams_) s.insert(t.size());
  return {s.begin(), s.end()};
}

Hypergraph Hypergraph::subgraph(const std::vector<bool>& keep_team) const {
  if (keep_team.size() != teams_.size()) throw DataError("subgraph: mask size mismatch");
  std::vector<bool> used(workers_.size(), false);
  for (TeamIndex j = 0; j < teams_.size(); ++j)
    if (keep_team[j])
      for (WorkerIndex i : teams_[j].members) used[i] = true;
  std::vector<WorkerIndex> remap(workers_.size(), 0);
  Hypergraph h;
  for (WorkerIndex i = 0; i < workers_.size(); ++i) {
    if (!used[i]) continue;
    remap[i] = h.workers_.size();
    h.workers_.push_back(Worker{workers_[i].id, {}});
  }
  for (TeamIndex j = 0; j < teams_.size(); ++j) {
    if (!keep_team[j]) continue;
    Team t = teams_[j];
    for (auto& m : t.members) m = remap[m];
    h.teams_.push_back(std::move(t));
  }
  h.index();
  return h;
}

Hypergraph Hypergraph::with_output_adj(const std::vector<double>& output_adj) const {
  if (output_adj.size() != teams_.size()) throw DataError("with_output_adj: size mismatch");
  Hypergraph h = *this;
  for (TeamIndex j = 0; j < teams_.size(); ++j) h.teams_[j].output_adj = output_adj[j];
  return h;
}

Hypergraph Hypergraph::with_outputs(const std::vector<double>& output) const {
  if (output.size() != teams_.size()) throw DataError("with_outputs: size mismatch");
  Hypergraph h = *this;
  for (TeamIndex j = 0; j < teams_.size(); ++j) {
    if (output[j] < 0.0) throw DataError("team '" + teams_[j].id + "' has negative output");
    h.teams_[j].output = output[j];
    h.teams_[j].output_adj = output[j];
  }
  return h;
}

std::vector<TeamRecord> Hypergraph::to_records() const {
  std::vector<TeamRecord> out;
  out.reserve(teams_.size());
  for (const auto& t : teams_) {
    TeamRecord r;
    r.id = t.id;
    for (WorkerIndex i : t.members) r.worker_ids.push_back(workers_[i].id);
    r.output = t.output;
    r.output_adj = t.output_adj;
    r.year = t.year;
    out.push_back(std::move(r));
  }
  return out;
}

// -- ingestion ---------------------------------------------------------------

LoadResult parse_teams(const std::string& text, const LoadOptions& options) {
  const auto& schema = options.schema;
  std::istringstream in(text);
  std::string line;
  std::size_t row = 0;
  LoadResult result;

  // Header: first non-blank line.
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++row;
    if (!trim(line).empty()) {
      header = split_fields(line, schema.delimiter);
      break;
    }
  }
  if (header.empty()) return result;

  const auto column = [&](const std::string& name, bool required) -> int {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      if (required) throw ParseError("missing column '" + name + "'", row);
      return -1;
    }
    return static_cast<int>(it - header.begin());
  };
  const int c_id = column(schema.team_id, true);
  const int c_workers = column(schema.worker_ids, true);
  const int c_output = column(schema.output, true);
  const int c_year = column(schema.year, false);

  std::vector<TeamRecord> records;
  std::unordered_set<std::string> ids;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto f = split_fields(line, schema.delimiter);
    if (f.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()), row);
    ++result.rows_read;
    TeamRecord rec;
    rec.id = f[c_id];
    if (rec.id.empty()) throw ParseError("empty team_id", row);
    if (!ids.insert(rec.id).second) throw ParseError("duplicate team_id '" + rec.id + "'", row);
    rec.worker_ids = split_members(f[c_workers], schema.member_separator);
    if (rec.worker_ids.empty()) throw ParseError("team has no members", row);
    {
      std::unordered_set<std::string> seen;
      for (const auto& w : rec.worker_ids)
        if (!seen.insert(w).second) throw ParseError("worker '" + w + "' repeated within team", row);
    }
    rec.output = parse_double(f[c_output], row, "output");
    if (std::isnan(rec.output)) throw ParseError("output is NaN", row);
    if (rec.output < 0.0) throw ParseError("negative output", row);
    if (c_year >= 0 && !f[c_year].empty()) rec.year = parse_int(f[c_year], row, "year");
    if (options.n_max > 0 && static_cast<int>(rec.worker_ids.size()) > options.n_max) {
      ++result.dropped_oversize;
      continue;
    }
    records.push_back(std::move(rec));
  }
  result.graph = Hypergraph::from_records(records);
  return result;
}

LoadResult load_teams(const std::string& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_teams(ss.str(), options);
}

std::string to_csv(const Hypergraph& h) {
  std::ostringstream out;
  out << "team_id,worker_ids,output,year\n";
  for (const auto& t : h.teams()) {
    std::string members;
    for (std::size_t k = 0; k < t.members.size(); ++k) {
      if (k) members.push_back(';');
      members += h.worker(t.members[k]).id;
    }
    out << quote_if_needed(t.id) << ',' << quote_if_needed(members) << ',' << format_double(t.output) << ',';
    if (t.year) out << *t.year;
    out << '\n';
  }
  return out.str();
}

void save_teams(const Hypergraph& h, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  out << to_csv(h);
}

nlohmann::json to_json(const Hypergraph& h) {
  nlohmann::json j;
  j["n_workers"] = h.n_workers();
  j["n_teams"] = h.n_teams();
  j["n_max"] = h.n_max();
  auto& workers = j["workers"] = nlohmann::json::array();
  for (const auto& w : h.workers()) {
    nlohmann::json deg = nlohmann::json::object();
    for (const auto& [n, c] : w.degree_by_size) deg[std::to_string(n)] = c;
    workers.push_back({{"id", w.id}, {"degree_by_size", deg}});
  }
  auto& teams = j["teams"] = nlohmann::json::array();
  for (const auto& t : h.teams()) {
    nlohmann::json members = nlohmann::json::array();
    for (WorkerIndex i : t.members) members.push_back(h.worker(i).id);
    nlohmann::json tj = {{"id", t.id}, {"members", members}, {"output", t.output}, {"output_adj", t.output_adj}};
    tj["year"] = t.year ? nlohmann::json(*t.year) : nlohmann::json(nullptr);
    teams.push_back(std::move(tj));
  }
  return j;
}

Hypergraph hypergraph_from_json(const nlohmann::json& j) {
  std::vector<TeamRecord> records;
  for (const auto& tj : j.at("teams")) {
    TeamRecord r;
    r.id = tj.at("id").get<std::string>();
    r.worker_ids = tj.at("members").get<std::vector<std::string>>();
    r.output = tj.at("output").get<double>();
    if (tj.contains("output_adj")) r.output_adj = tj.at("output_adj").get<double>();
    if (tj.contains("year") && !tj.at("year").is_null()) r.year = tj.at("year").get<int>();
    records.push_back(std::move(r));
  }
  std::vector<std::string> extra;
  if (j.contains("workers"))
    for (const auto& w : j.at("workers")) extra.push_back(w.at("id").get<std::string>());
  return Hypergraph::from_records(records, extra);
}

// -- preprocessing -----------------------------------------------------------

Hypergraph filter_min_productions(const Hypergraph& h, int m, bool iterate) {
  if (m < 1) throw DataError("filter_min_productions: m must be >= 1");
  std::vector<bool> keep(h.n_teams(), true);
  std::vector<int> degree(h.n_workers());
  for (WorkerIndex i = 0; i < h.n_workers(); ++i) degree[i] = h.worker(i).total_degree();
  std::vector<bool> removed(h.n_workers(), false);

  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<WorkerIndex> drop;
    for (WorkerIndex i = 0; i < h.n_workers(); ++i)
      if (!removed[i] && degree[i] < m) drop.push_back(i);
    for (WorkerIndex i : drop) {
      removed[i] = true;
      for (TeamIndex j : h.teams_of(i)) {
        if (!keep[j]) continue;
        keep[j] = false;
        for (WorkerIndex k : h.team(j).members) --degree[k];
      }
    }
    changed = !drop.empty() && iterate;
  }
  return h.subgraph(keep);
}

Hypergraph restrict_sizes(const Hypergraph& h, int n_max) {
  std::vector<bool> keep(h.n_teams());
  for (TeamIndex j = 0; j < h.n_teams(); ++j) keep[j] = h.team(j).size() <= n_max;
  return h.subgraph(keep);
}

namespace {

NettingResult net_multiplicative(const Hypergraph& h, int reference_year) {
  std::map<int, std::pair<double, int>> log_sums;
  for (const auto& t : h.teams()) {
    if (!(t.output > 0.0))
      throw DataError("net_year_effects: multiplicative family needs positive outputs (team '" + t.id + "')");
    auto& [s, c] = log_sums[*t.year];
    s += std::log(t.output);
    ++c;
  }
  const auto ref = log_sums.find(reference_year);
  if (ref == log_sums.end())
    throw DataError("net_year_effects: reference year " + std::to_string(reference_year) + " has no teams");
  const double ref_mean = ref->second.first / ref->second.second;

  NettingResult r;
  for (const auto& [y, sc] : log_sums) r.effects.year[y] = std::exp(sc.first / sc.second - ref_mean);
  r.effects.iterations = 1;
  std::vector<double> adj(h.n_teams());
  for (TeamIndex j = 0; j < h.n_teams(); ++j) adj[j] = h.team(j).output / r.effects.year.at(*h.team(j).year);
  r.graph = h.with_output_adj(adj);
  return r;
}

NettingResult net_poisson_with_age(const Hypergraph& h, int reference_year) {
  std::vector<int> first_year(h.n_workers(), std::numeric_limits<int>::max());
  for (const auto& t : h.teams())
    for (WorkerIndex i : t.members) first_year[i] = std::min(first_year[i], *t.year);
  std::vector<int> age(h.n_teams());
  for (TeamIndex j = 0; j < h.n_teams(); ++j) {
    const auto& t = h.team(j);
    double s = 0.0;
    for (WorkerIndex i : t.members) s += *t.year - first_year[i];
    age[j] = static_cast<int>(std::lround(s / t.size()));
  }

  std::map<int, double> year_out, age_out;
  for (TeamIndex j = 0; j < h.n_teams(); ++j) {
    year_out[*h.team(j).year] += h.team(j).output;
    age_out[age[j]] += h.team(j).output;
  }
  if (!year_out.count(reference_year))
    throw DataError("net_year_effects: reference year " + std::to_string(reference_year) + " has no teams");
  for (const auto& [y, s] : year_out)
    if (!(s > 0.0))
      throw EstimationError("net_year_effects", "degenerate Poisson fit: year " + std::to_string(y) + " has zero total output");
  for (const auto& [a, s] : age_out)
    if (!(s > 0.0))
      throw EstimationError("net_year_effects", "degenerate Poisson fit: age " + std::to_string(a) + " has zero total output");

  // Alternating block updates solve the Poisson score equations for a two-way
  // multiplicative model exactly within each block.
  std::map<int, double> ye, ae;
  for (const auto& [y, s] : year_out) ye[y] = 1.0;
  for (const auto& [a, s] : age_out) ae[a] = 1.0;
  int it = 0;
  for (; it < 10000; ++it) {
    std::map<int, double> denom;
    for (TeamIndex j = 0; j < h.n_teams(); ++j) denom[*h.team(j).year] += ae[age[j]];
    for (auto& [y, e] : ye) e = year_out[y] / denom[y];
    denom.clear();
    for (TeamIndex j = 0; j < h.n_teams(); ++j) denom[age[j]] += ye[*h.team(j).year];
    double change = 0.0;
    for (auto& [a, e] : ae) {
      const double next = age_out[a] / denom[a];
      change = std::max(change, std::abs(std::log(next / e)));
      e = next;
    }
    if (change < 1e-12) break;
  }

  NettingResult r;
  const double yref = ye.at(reference_year);
  const double aref = ae.begin()->second;
  for (const auto& [y, e] : ye) r.effects.year[y] = e / yref;
  for (const auto& [a, e] : ae) r.effects.age[a] = e / aref;
  r.effects.iterations = it + 1;
  std::vector<double> adj(h.n_teams());
  for (TeamIndex j = 0; j < h.n_teams(); ++j)
    adj[j] = h.team(j).output / (r.effects.year.at(*h.team(j).year) * r.effects.age.at(age[j]));
  r.graph = h.with_output_adj(adj);
  return r;
}

}  // namespace

NettingResult net_year_effects(const Hypergraph& h, int reference_year, YearEffectFamily family) {
  for (const auto& t : h.teams())
    if (!t.year) throw DataError("net_year_effects: team '" + t.id + "' has no year");
  if (h.n_teams() == 0) return {h, {}};
  return family == YearEffectFamily::multiplicative ? net_multiplicative(h, reference_year)
                                                    : net_poisson_with_age(h, reference_year);
}

}  // namespace teamprod

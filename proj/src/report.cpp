#include "teamprod/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "teamprod/error.hpp"

namespace teamprod {

double nearest_rank(std::vector<double> x, double p) {
  if (x.empty()) throw DataError("percentile of an empty sample");
  if (!(p > 0.0 && p <= 100.0)) throw DataError("percentile must lie in (0, 100]");
  std::sort(x.begin(), x.end());
  const auto n = static_cast<double>(x.size());
  auto r = static_cast<std::size_t>(std::ceil(p / 100.0 * n - 1e-9));
  r = std::clamp<std::size_t>(r, 1, x.size());
  return x[r - 1];
}

namespace {

DescriptiveColumn column(const std::string& label, const std::vector<double>& y, const std::vector<double>& prod) {
  DescriptiveColumn c;
  c.label = label;
  c.workers = prod.size();
  c.teams = y.size();
  for (double v : y) c.mean_output += v;
  c.mean_output /= static_cast<double>(y.size());
  for (double v : y) c.std_output += (v - c.mean_output) * (v - c.mean_output);
  c.std_output = std::sqrt(c.std_output / static_cast<double>(y.size()));
  for (double p : kPercentiles) {
    c.output_pct.push_back(nearest_rank(y, p));
    c.productions_pct.push_back(nearest_rank(prod, p));
  }
  return c;
}

}  // namespace

DescriptiveTable descriptive_stats(const Hypergraph& h) {
  DescriptiveTable t;
  if (h.n_teams() == 0) return t;
  std::vector<double> all;
  std::map<int, std::vector<double>> by;
  for (const auto& team : h.teams()) {
    all.push_back(team.output_adj);
    by[team.size()].push_back(team.output_adj);
  }
  std::vector<double> prod_all;
  std::map<int, std::vector<double>> prod_by;
  for (const auto& w : h.workers()) {
    if (w.total_degree() > 0) prod_all.push_back(w.total_degree());
    for (const auto& [n, d] : w.degree_by_size)
      if (d > 0) prod_by[n].push_back(d);
  }
  t.columns.push_back(column("all", all, prod_all));
  for (const auto& [n, y] : by) t.columns.push_back(column("n=" + std::to_string(n), y, prod_by[n]));
  return t;
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

nlohmann::json round_numbers(const nlohmann::json& j) {
  if (j.is_number_float()) {
    const double v = j.get<double>();
    if (!std::isfinite(v)) return nullptr;
    return std::stod(format_number(v));
  }
  if (j.is_array() || j.is_object()) {
    nlohmann::json out = j;
    for (auto it = out.begin(); it != out.end(); ++it) *it = round_numbers(*it);
    return out;
  }
  return j;
}

std::string to_csv(const DescriptiveTable& t) {
  std::ostringstream os;
  os << "statistic";
  for (const auto& c : t.columns) os << ',' << c.label;
  os << '\n';
  if (t.columns.empty()) return os.str();
  const auto row = [&](const std::string& name, auto get) {
    os << name;
    for (const auto& c : t.columns) os << ',' << get(c);
    os << '\n';
  };
  row("workers", [](const DescriptiveColumn& c) { return std::to_string(c.workers); });
  row("teams", [](const DescriptiveColumn& c) { return std::to_string(c.teams); });
  row("mean_output", [](const DescriptiveColumn& c) { return format_number(c.mean_output); });
  row("std_output", [](const DescriptiveColumn& c) { return format_number(c.std_output); });
  for (std::size_t p = 0; p < kPercentiles.size(); ++p)
    row("p" + format_number(kPercentiles[p]) + "_output",
        [p](const DescriptiveColumn& c) { return format_number(c.output_pct[p]); });
  for (std::size_t p = 0; p < kPercentiles.size(); ++p)
    row("p" + format_number(kPercentiles[p]) + "_productions",
        [p](const DescriptiveColumn& c) { return format_number(c.productions_pct[p]); });
  return os.str();
}

std::string matrix_long_csv(const Eigen::MatrixXd& m) {
  std::ostringstream os;
  os << "row_type,col_type,value\n";
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) os << r + 1 << ',' << c + 1 << ',' << format_number(m(r, c)) << '\n';
  return os.str();
}

nlohmann::json additive_report(const AdditiveResult& r) {
  nlohmann::json j = to_json(r.decomposition);
  j["identification"] = identification_report(r.identified);
  j["identified_workers"] = r.fit.design.cols();
  j["identified_teams"] = r.fit.design.rows();
  return j;
}

nlohmann::json mixture_report(const MixtureFit& f, const Hypergraph& h) {
  nlohmann::json j;
  j["model"] = to_json(f.model);
  j["variance_decomposition"] = to_json(nonlinear_variance_decomposition(f.model, f.state, h));
  nlohmann::json flags = nlohmann::json::array();
  for (const auto& t : flag_types(f.model, f.state)) flags.push_back({{"type", t.type + 1}, {"reason", t.reason}});
  j["flagged_types"] = flags;
  j["elbo"] = f.state.elbo_trace.empty() ? nlohmann::json(nullptr) : nlohmann::json(f.state.elbo_trace.back());
  j["iterations"] = f.state.iterations;
  j["converged"] = f.state.converged;
  j["restarts"] = f.state.restarts_used;
  j["best_restart"] = f.state.best_restart;
  j["monotone_violations"] = f.state.monotone_violations;
  const Eigen::VectorXd share = f.state.q.colwise().mean().transpose();
  j["posterior_shares"] = std::vector<double>(share.data(), share.data() + share.size());
  return j;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return out + "\"";
}

}  // namespace

std::string posteriors_csv(const VariationalState& s, const Hypergraph& h) {
  if (s.q.rows() != static_cast<Eigen::Index>(h.n_workers())) throw DataError("posteriors do not match the workers");
  std::ostringstream os;
  os << "worker_id";
  for (Eigen::Index k = 0; k < s.q.cols(); ++k) os << ",q" << k + 1;
  os << '\n';
  for (std::size_t i = 0; i < h.n_workers(); ++i) {
    os << csv_field(h.worker(i).id);
    for (Eigen::Index k = 0; k < s.q.cols(); ++k)
      os << ',' << format_number(s.q(static_cast<Eigen::Index>(i), k));
    os << '\n';
  }
  return os.str();
}

Eigen::MatrixXd read_posteriors(const std::string& text, const Hypergraph& h) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty posteriors file");
  const auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "worker_id") throw ParseError("posteriors header must start with worker_id", 0);
  const auto K = static_cast<Eigen::Index>(header.size() - 1);
  Eigen::MatrixXd q = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(h.n_workers()), K, std::nan(""));
  std::vector<char> seen(h.n_workers(), 0);
  std::size_t row = 0;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (static_cast<Eigen::Index>(f.size()) != K + 1) throw ParseError("expected " + std::to_string(K + 1) + " fields", row);
    const auto i = h.find_worker(f[0]);
    if (!i) throw DataError("posteriors: unknown worker '" + f[0] + "'");
    if (seen[*i]) throw DataError("posteriors: worker '" + f[0] + "' listed twice");
    seen[*i] = 1;
    double s = 0.0;
    for (Eigen::Index k = 0; k < K; ++k) {
      double v;
      try {
        std::size_t used = 0;
        v = std::stod(f[static_cast<std::size_t>(k + 1)], &used);
        if (used != f[static_cast<std::size_t>(k + 1)].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ParseError("bad probability '" + f[static_cast<std::size_t>(k + 1)] + "'", row);
      }
      if (!(v >= 0.0 && v <= 1.0)) throw ParseError("probability outside [0,1]", row);
      q(static_cast<Eigen::Index>(*i), k) = v;
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-4) throw ParseError("probabilities do not sum to 1", row);
  }
  for (std::size_t i = 0; i < h.n_workers(); ++i)
    if (!seen[i]) throw DataError("posteriors: worker '" + h.worker(i).id + "' missing");
  // Rows were written with 6 significant digits.
  for (Eigen::Index i = 0; i < q.rows(); ++i) q.row(i) /= q.row(i).sum();
  return q;
}

std::uint64_t fnv1a64(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::vector<std::string> emit_bundle(const ReportBundle& b, const std::string& dir) {
  std::map<std::string, std::string> files;
  const auto json_text = [](const nlohmann::json& j) { return round_numbers(j).dump(2) + "\n"; };
  if (b.descriptives) files["descriptives.csv"] = to_csv(*b.descriptives);
  if (b.additive) files["additive.json"] = json_text(*b.additive);
  for (const auto& [K, j] : b.mixtures) files["mixture_K" + std::to_string(K) + ".json"] = json_text(j);
  for (const auto& [name, m] : b.matrices) files["matrix_" + name + ".csv"] = matrix_long_csv(m);
  for (const auto& [name, j] : b.documents) files[name] = json_text(j);
  for (const auto& [name, t] : b.texts) files[name] = t;
  if (files.count("manifest.json")) throw DataError("emit_bundle: manifest.json is reserved");

  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir + "': " + ec.message());
  nlohmann::json manifest;
  manifest["meta"] = b.meta;
  nlohmann::json list = nlohmann::json::array();
  std::vector<std::string> written;
  for (const auto& [name, text] : files) {
    const auto path = std::filesystem::path(dir) / name;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out << text;
    list.push_back({{"file", name}, {"bytes", text.size()}, {"fnv1a64", hex64(fnv1a64(text))}});
    written.push_back(name);
  }
  manifest["files"] = list;
  manifest["float_format"] = "%.6g";
  manifest["percentiles"] = "nearest rank";
  std::ofstream out(std::filesystem::path(dir) / "manifest.json", std::ios::binary);
  if (!out) throw DataError("cannot write manifest.json");
  out << manifest.dump(2) << "\n";
  written.push_back("manifest.json");
  return written;
}

}  // namespace teamprod

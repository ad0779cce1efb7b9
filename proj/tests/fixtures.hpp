#pragma once

#include <string>
#include <vector>

#include "teamprod/hypergraph.hpp"

namespace fixtures {

// The five-team, five-worker collaboration hypergraph:
// A={1,2}, B={2,4,5}, C={3,4}, D={5}, E={3}.
inline teamprod::Hypergraph stylized(std::vector<double> outputs = {1, 2, 3, 4, 5}) {
  using teamprod::TeamRecord;
  std::vector<TeamRecord> recs = {
      {"A", {"1", "2"}, outputs[0], {}, 1999},
      {"B", {"2", "4", "5"}, outputs[1], {}, 1999},
      {"C", {"3", "4"}, outputs[2], {}, 1999},
      {"D", {"5"}, outputs[3], {}, 1999},
      {"E", {"3"}, outputs[4], {}, 1999},
  };
  return teamprod::Hypergraph::from_records(recs);
}

inline const char* stylized_csv =
    "team_id,worker_ids,output,year\n"
    "A,1;2,1,1999\n"
    "B,2;4;5,2,1999\n"
    "C,3;4,3,1999\n"
    "D,5,4,1999\n"
    "E,3,5,1999\n";

}  // namespace fixtures

#pragma once

// Leave-subset-out surrogate data. Given the k demonstration exemplars,
// every ordered subset of size i is a candidate context, and each of the
// k-i held-out exemplars is scored as a labeled query under it. The
// resulting records are what calibration is trained on; no data beyond
// the k shots is ever used.

#include <algorithm>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "supcal/backend.hpp"
#include "supcal/common.hpp"
#include "supcal/core.hpp"

namespace supcal {

// A context as index positions into the shot list, in demonstration
// order. Lexicographic order on these tuples is the canonical order.
using ContextId = std::vector<int>;

struct ContextBudget {
  std::int64_t max_contexts = 360;
};

// Number of ordered i-subsets of k items, k!/(k-i)!.
inline std::uint64_t ordered_subset_count(int k, int i) {
  if (k < 0 || i < 0 || i > k) {
    throw ValueError("ordered_subset_count: need 0 <= i <= k");
  }
  std::uint64_t n = 1;
  for (int t = 0; t < i; ++t) {
    std::uint64_t factor = static_cast<std::uint64_t>(k - t);
    if (n > UINT64_MAX / factor) {
      throw ValueError("ordered_subset_count overflows 64 bits");
    }
    n *= factor;
  }
  return n;
}

namespace detail {

// Tuple at position `rank` in the lexicographic order of ordered
// i-subsets of {0..k-1}. Each step fixes one element; the block of
// tuples sharing a prefix has size P(k-1-t, i-1-t).
inline ContextId unrank_ordered_subset(std::uint64_t rank, int k, int i) {
  std::vector<int> avail(k);
  for (int v = 0; v < k; ++v) avail[v] = v;
  ContextId out;
  out.reserve(i);
  for (int t = 0; t < i; ++t) {
    std::uint64_t block = ordered_subset_count(k - 1 - t, i - 1 - t);
    std::uint64_t idx = rank / block;
    rank %= block;
    out.push_back(avail[idx]);
    avail.erase(avail.begin() + static_cast<std::ptrdiff_t>(idx));
  }
  return out;
}

}  // namespace detail

// All ordered i-subsets of {0..k-1} in lexicographic order when their
// count fits the budget; otherwise budget.max_contexts distinct subsets
// sampled uniformly without replacement (seeded), still emitted in
// lexicographic order so downstream processing is canonical.
inline std::vector<ContextId> enumerate_context_ids(int k, int i,
                                                    const ContextBudget& budget,
                                                    std::uint64_t seed) {
  if (k < 1) throw ValueError("need at least one exemplar");
  if (i < 1 || i >= k) {
    throw ValueError("context size " + std::to_string(i) +
                     " must be in [1, k-1] with k=" + std::to_string(k));
  }
  if (budget.max_contexts < 1) {
    throw ValueError("budget.max_contexts must be positive");
  }
  const std::uint64_t total = ordered_subset_count(k, i);
  std::vector<std::uint64_t> ranks;
  if (total <= static_cast<std::uint64_t>(budget.max_contexts)) {
    ranks.resize(total);
    for (std::uint64_t r = 0; r < total; ++r) ranks[r] = r;
  } else {
    std::mt19937_64 rng(derive_seed(seed, 0x5352474154Eull));
    std::set<std::uint64_t> chosen;
    while (chosen.size() <
           static_cast<std::size_t>(budget.max_contexts)) {
      chosen.insert(rng_below(rng, total));
    }
    ranks.assign(chosen.begin(), chosen.end());
  }
  std::vector<ContextId> out;
  out.reserve(ranks.size());
  for (std::uint64_t r : ranks) {
    out.push_back(detail::unrank_ordered_subset(r, k, i));
  }
  return out;
}

inline Context materialize(const std::vector<Exemplar>& shots,
                           const ContextId& id) {
  std::vector<Exemplar> members;
  members.reserve(id.size());
  for (int pos : id) {
    if (pos < 0 || pos >= static_cast<int>(shots.size())) {
      throw ValueError("context position " + std::to_string(pos) +
                       " outside shot list");
    }
    members.push_back(shots[pos]);
  }
  return Context(std::move(members));
}

// Convenience wrapper returning materialized contexts.
inline std::vector<Context> enumerate_contexts(
    const std::vector<Exemplar>& shots, int i, const ContextBudget& budget,
    std::uint64_t seed) {
  std::vector<Context> out;
  for (const ContextId& id : enumerate_context_ids(
           static_cast<int>(shots.size()), i, budget, seed)) {
    out.push_back(materialize(shots, id));
  }
  return out;
}

// One scored (context, held-out query) pair. logits are the model's
// relative log-odds for the query under that context; label is the
// query's true class.
struct SurrogateRecord {
  int query_id = -1;
  ContextId context_id;
  LogitVector logits;
  int label = -1;
};

struct SurrogateDataset {
  int context_size = 0;
  int num_classes = 0;
  std::vector<SurrogateRecord> records;
  // Contexts under which each query id was scored, in canonical order.
  std::map<int, std::vector<ContextId>> contexts_by_query;
};

namespace detail {

inline void rebuild_query_index(SurrogateDataset& ds) {
  std::sort(ds.records.begin(), ds.records.end(),
            [](const SurrogateRecord& a, const SurrogateRecord& b) {
              if (a.context_id != b.context_id) {
                return a.context_id < b.context_id;
              }
              return a.query_id < b.query_id;
            });
  ds.contexts_by_query.clear();
  for (const SurrogateRecord& rec : ds.records) {
    ds.contexts_by_query[rec.query_id].push_back(rec.context_id);
  }
}

}  // namespace detail

// Score every held-out exemplar under every enumerated context of size
// i. Fixed inputs give an identical dataset, including record order:
// records come out sorted by (context_id, query_id).
inline SurrogateDataset generate_surrogate(const std::vector<Exemplar>& shots,
                                           int i, const Backend& backend,
                                           const ContextBudget& budget,
                                           std::uint64_t seed) {
  const int k = static_cast<int>(shots.size());
  const int n = backend.num_classes();
  for (std::size_t a = 0; a < shots.size(); ++a) {
    if (shots[a].label < 0 || shots[a].label >= n) {
      throw ValueError("exemplar id " + std::to_string(shots[a].id) +
                       " has label outside 0.." + std::to_string(n - 1));
    }
    for (std::size_t b = a + 1; b < shots.size(); ++b) {
      if (shots[a].id == shots[b].id) {
        throw ValueError("duplicate exemplar id " +
                         std::to_string(shots[a].id));
      }
    }
  }

  SurrogateDataset ds;
  ds.context_size = i;
  ds.num_classes = n;
  for (const ContextId& cid : enumerate_context_ids(k, i, budget, seed)) {
    Context ctx = materialize(shots, cid);
    for (int pos = 0; pos < k; ++pos) {
      if (std::find(cid.begin(), cid.end(), pos) != cid.end()) continue;
      const Exemplar& query = shots[pos];
      SurrogateRecord rec;
      rec.query_id = query.id;
      rec.context_id = cid;
      rec.logits = logits_from_probs(backend.infer(query.text, ctx));
      rec.label = query.label;
      ds.records.push_back(std::move(rec));
    }
  }
  detail::rebuild_query_index(ds);
  return ds;
}

struct CoverageReport {
  std::vector<int> present;
  std::vector<int> missing;
  bool complete = false;
};

// Which classes appear among the record labels. Training requires
// complete coverage; callers decide whether missing classes are an
// error or a reason to skip the size.
inline CoverageReport class_coverage(const SurrogateDataset& ds) {
  std::vector<bool> seen(ds.num_classes, false);
  for (const SurrogateRecord& rec : ds.records) {
    if (rec.label >= 0 && rec.label < ds.num_classes) seen[rec.label] = true;
  }
  CoverageReport report;
  for (int c = 0; c < ds.num_classes; ++c) {
    (seen[c] ? report.present : report.missing).push_back(c);
  }
  report.complete = report.missing.empty();
  return report;
}

namespace detail {

inline std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (j) out += ',';
    out += std::to_string(v[j]);
  }
  return out;
}

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Tab-separated lines: context_size, context positions, query id,
// logits, label. Doubles at full precision so a round trip is exact.
inline void save_surrogate(std::ostream& out, const SurrogateDataset& ds) {
  out << "# surrogate\tcontext_size=" << ds.context_size
      << "\tnum_classes=" << ds.num_classes << "\n";
  for (const SurrogateRecord& rec : ds.records) {
    out << ds.context_size << '\t' << detail::join_ints(rec.context_id)
        << '\t' << rec.query_id << '\t';
    for (std::size_t j = 0; j < rec.logits.m.size(); ++j) {
      if (j) out << ',';
      out << detail::fmt_g17(rec.logits.m[j]);
    }
    out << '\t' << rec.label << "\n";
  }
}

inline SurrogateDataset load_surrogate(std::istream& in) {
  SurrogateDataset ds;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::size_t cs = line.find("context_size=");
      std::size_t nc = line.find("num_classes=");
      if (cs == std::string::npos || nc == std::string::npos) {
        throw IngestError("surrogate line " + std::to_string(lineno) +
                          ": bad header");
      }
      ds.context_size = std::stoi(line.substr(cs + 13));
      ds.num_classes = std::stoi(line.substr(nc + 12));
      have_header = true;
      continue;
    }
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(
          start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 5) {
      throw IngestError("surrogate line " + std::to_string(lineno) +
                        ": expected 5 tab-separated fields, got " +
                        std::to_string(fields.size()));
    }
    try {
      SurrogateRecord rec;
      int i_field = std::stoi(fields[0]);
      if (have_header && i_field != ds.context_size) {
        throw IngestError("surrogate line " + std::to_string(lineno) +
                          ": context size " + fields[0] +
                          " disagrees with header");
      }
      if (!have_header) ds.context_size = i_field;
      std::stringstream ctx_ss(fields[1]);
      std::string tok;
      while (std::getline(ctx_ss, tok, ',')) {
        rec.context_id.push_back(std::stoi(tok));
      }
      rec.query_id = std::stoi(fields[2]);
      std::vector<double> logits;
      std::stringstream lg_ss(fields[3]);
      while (std::getline(lg_ss, tok, ',')) {
        logits.push_back(std::stod(tok));
      }
      rec.logits = LogitVector(std::move(logits));
      rec.label = std::stoi(fields[4]);
      if (static_cast<int>(rec.context_id.size()) != ds.context_size) {
        throw IngestError("surrogate line " + std::to_string(lineno) +
                          ": context tuple length mismatch");
      }
      ds.records.push_back(std::move(rec));
    } catch (const IngestError&) {
      throw;
    } catch (const std::exception& e) {
      throw IngestError("surrogate line " + std::to_string(lineno) + ": " +
                        e.what());
    }
  }
  if (ds.records.empty()) throw IngestError("surrogate file has no records");
  if (!have_header) {
    ds.num_classes = ds.records[0].logits.num_classes();
  }
  for (const SurrogateRecord& rec : ds.records) {
    if (rec.logits.num_classes() != ds.num_classes) {
      throw IngestError("surrogate records disagree on class count");
    }
    if (rec.label < 0 || rec.label >= ds.num_classes) {
      throw IngestError("surrogate record label outside 0.." +
                        std::to_string(ds.num_classes - 1));
    }
  }
  detail::rebuild_query_index(ds);
  return ds;
}

}  // namespace supcal

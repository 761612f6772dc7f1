#pragma once

// Output-shift baselines. Each one estimates a reference distribution
// p_ref and rescores a query as p_c / max(p_ref_c, floor), renormalized.
// For two classes that is exactly a shift of the decision threshold in
// log-odds space.
//
//   base: the raw model distribution, no correction.
//   cc:   p_ref = mean over a fixed list of content-free tokens.
//   dc:   p_ref = mean over random bag-of-words pseudo-inputs built
//         from a corpus, each of corpus mean token length.
//   bc:   p_ref = mean over (a prefix of) the query batch itself.

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "supcal/backend.hpp"
#include "supcal/common.hpp"
#include "supcal/core.hpp"

namespace supcal {

struct BaselineConfig {
  std::vector<std::string> content_free_tokens = {"N/A", "", "[MASK]"};
  int dc_pseudo_inputs = 20;
  int bc_batch_limit = 128;
  std::uint64_t seed = 0;
};

inline ProbDist normalize_by_reference(const ProbDist& p,
                                       const ProbDist& ref) {
  if (p.num_classes() != ref.num_classes()) {
    throw ValueError("reference dimension mismatch");
  }
  std::vector<double> out(p.p.size());
  double sum = 0.0;
  for (std::size_t c = 0; c < out.size(); ++c) {
    out[c] = p.p[c] / std::max(ref.p[c], kProbFloor);
    sum += out[c];
  }
  for (double& v : out) v /= sum;
  return ProbDist(std::move(out));
}

inline ProbDist mean_dist(const std::vector<ProbDist>& dists) {
  if (dists.empty()) throw ValueError("mean of no distributions");
  std::vector<double> acc(dists[0].p.size(), 0.0);
  for (const ProbDist& d : dists) {
    if (d.p.size() != acc.size()) throw ValueError("dimension mismatch");
    for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += d.p[c];
  }
  for (double& v : acc) v /= static_cast<double>(dists.size());
  return ProbDist(std::move(acc));
}

inline ProbDist base_predict(std::string_view query_text, const Context& ctx,
                             const Backend& backend) {
  return backend.infer(query_text, ctx);
}

// Contextual correction reference: the model's mean answer to tokens
// that carry no task signal.
inline ProbDist cc_reference(const Context& ctx, const Backend& backend,
                             const BaselineConfig& cfg) {
  std::vector<ProbDist> dists;
  dists.reserve(cfg.content_free_tokens.size());
  for (const std::string& token : cfg.content_free_tokens) {
    dists.push_back(backend.infer(token, ctx));
  }
  return mean_dist(dists);
}

inline ProbDist cc_predict(std::string_view query_text, const Context& ctx,
                           const Backend& backend,
                           const BaselineConfig& cfg) {
  return normalize_by_reference(backend.infer(query_text, ctx),
                                cc_reference(ctx, backend, cfg));
}

// Random texts for the domain-calibration reference: tokens drawn with
// replacement from the corpus bag, each pseudo-input as long as the
// corpus mean token count (banker's rounding).
inline std::vector<std::string> dc_pseudo_inputs(
    const std::vector<std::string>& corpus, int count, std::uint64_t seed) {
  if (corpus.empty()) throw ValueError("dc needs a non-empty corpus");
  if (count < 1) throw ValueError("dc needs at least one pseudo-input");
  std::vector<std::string> bag;
  std::size_t total_tokens = 0;
  for (const std::string& text : corpus) {
    std::size_t start = 0;
    std::size_t before = bag.size();
    while (start < text.size()) {
      std::size_t ws = text.find_first_of(" \t\n\r", start);
      if (ws == std::string::npos) ws = text.size();
      if (ws > start) bag.push_back(text.substr(start, ws - start));
      start = ws + 1;
    }
    total_tokens += bag.size() - before;
  }
  if (bag.empty()) throw ValueError("dc corpus has no tokens");
  const int length = static_cast<int>(std::nearbyint(
      static_cast<double>(total_tokens) / static_cast<double>(corpus.size())));

  std::mt19937_64 rng(derive_seed(seed, 0x64630000ull));
  std::vector<std::string> out;
  out.reserve(count);
  for (int j = 0; j < count; ++j) {
    std::string text;
    for (int t = 0; t < length; ++t) {
      if (t) text += ' ';
      text += bag[rng_below(rng, bag.size())];
    }
    out.push_back(std::move(text));
  }
  return out;
}

inline ProbDist dc_reference(const Context& ctx, const Backend& backend,
                             const std::vector<std::string>& corpus,
                             const BaselineConfig& cfg) {
  std::vector<ProbDist> dists;
  for (const std::string& pseudo :
       dc_pseudo_inputs(corpus, cfg.dc_pseudo_inputs, cfg.seed)) {
    dists.push_back(backend.infer(pseudo, ctx));
  }
  return mean_dist(dists);
}

inline ProbDist dc_predict(std::string_view query_text, const Context& ctx,
                           const Backend& backend,
                           const std::vector<std::string>& corpus,
                           const BaselineConfig& cfg) {
  return normalize_by_reference(backend.infer(query_text, ctx),
                                dc_reference(ctx, backend, corpus, cfg));
}

// Batch calibration: the reference is the mean prediction over the
// first bc_batch_limit queries of the batch itself, then every query
// in the batch is rescored against it.
inline std::vector<ProbDist> bc_predict(const std::vector<std::string>& batch,
                                        const Context& ctx,
                                        const Backend& backend,
                                        const BaselineConfig& cfg) {
  if (batch.empty()) throw ValueError("bc needs a non-empty batch");
  if (cfg.bc_batch_limit < 1) throw ValueError("bc_batch_limit must be >= 1");
  std::vector<ProbDist> preds = backend.infer_batch(batch, ctx);
  const std::size_t m = std::min<std::size_t>(preds.size(),
                                              cfg.bc_batch_limit);
  std::vector<ProbDist> head(preds.begin(), preds.begin() + m);
  const ProbDist ref = mean_dist(head);
  std::vector<ProbDist> out;
  out.reserve(preds.size());
  for (const ProbDist& p : preds) {
    out.push_back(normalize_by_reference(p, ref));
  }
  return out;
}

}  // namespace supcal

#pragma once

// Model access. A Backend turns (query text, demonstration context) into a
// probability distribution over the label space. Two implementations ship:
// the deterministic biased mock below and the HTTP adapter in
// http_backend.hpp. Decorators add call counting and score caching.

#include <atomic>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "supcal/common.hpp"
#include "supcal/core.hpp"

namespace supcal {

// How a task is laid out as text. Each example renders as
//   input_prefix + text + separator + output_prefix
// with " " + verbalizer appended for demonstrations. Blocks are joined
// by a blank line; the query comes last and stops after output_prefix.
struct PromptTemplate {
  std::string input_prefix;
  std::string separator;
  std::string output_prefix;
  LabelSpace label_space;
};

inline std::string render_block(const PromptTemplate& tmpl,
                                std::string_view text) {
  std::string out;
  out.reserve(tmpl.input_prefix.size() + text.size() + tmpl.separator.size() +
              tmpl.output_prefix.size());
  out += tmpl.input_prefix;
  out += text;
  out += tmpl.separator;
  out += tmpl.output_prefix;
  return out;
}

inline std::string render_prompt(const PromptTemplate& tmpl,
                                 const Context& ctx,
                                 std::string_view query_text) {
  std::string out;
  for (const Exemplar& e : ctx.members) {
    out += render_block(tmpl, e.text);
    out += ' ';
    out += tmpl.label_space.verbalizer(e.label);
    out += "\n\n";
  }
  out += render_block(tmpl, query_text);
  return out;
}

namespace detail {

inline std::string unescape_newlines(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size() && s[i + 1] == 'n') {
      out += '\n';
      ++i;
    } else {
      out += s[i];
    }
  }
  return out;
}

inline std::string strip(std::string_view s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

// Builds a template from a pattern like "sentence: <x>\nsentiment: <y>".
// The pattern must contain <x> before <y>. The run of newlines after <x>
// becomes the separator; a single space is assumed between the output
// prefix and <y> and is not kept in the prefix.
inline PromptTemplate template_from_pattern(std::string_view pattern,
                                            LabelSpace labels) {
  std::string pat = detail::unescape_newlines(pattern);
  std::size_t xpos = pat.find("<x>");
  std::size_t ypos = pat.find("<y>");
  if (xpos == std::string::npos || ypos == std::string::npos || ypos < xpos) {
    throw IngestError("template pattern must contain <x> then <y>: '" +
                      pat + "'");
  }
  PromptTemplate tmpl;
  tmpl.input_prefix = pat.substr(0, xpos);
  std::string mid = pat.substr(xpos + 3, ypos - xpos - 3);
  if (!mid.empty() && mid.back() == ' ') mid.pop_back();
  std::size_t sep_end = 0;
  while (sep_end < mid.size() && mid[sep_end] == '\n') ++sep_end;
  tmpl.separator = mid.substr(0, sep_end);
  tmpl.output_prefix = mid.substr(sep_end);
  tmpl.label_space = std::move(labels);
  return tmpl;
}

// Template file: one task per line, "name | pattern | label,label,...".
// '#' starts a comment, blank lines are skipped.
inline std::map<std::string, PromptTemplate> parse_template_file(
    std::istream& in) {
  std::map<std::string, PromptTemplate> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::strip(line);
    if (s.empty() || s[0] == '#') continue;
    std::size_t p1 = s.find('|');
    std::size_t p2 = (p1 == std::string::npos) ? p1 : s.find('|', p1 + 1);
    if (p2 == std::string::npos) {
      throw IngestError("template line " + std::to_string(lineno) +
                        ": expected 'name | pattern | labels'");
    }
    std::string name = detail::strip(s.substr(0, p1));
    std::string pattern = detail::strip(s.substr(p1 + 1, p2 - p1 - 1));
    std::string labels_field = detail::strip(s.substr(p2 + 1));
    std::vector<std::string> words;
    std::size_t start = 0;
    while (true) {
      std::size_t comma = labels_field.find(',', start);
      words.push_back(detail::strip(labels_field.substr(
          start, comma == std::string::npos ? comma : comma - start)));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (name.empty()) {
      throw IngestError("template line " + std::to_string(lineno) +
                        ": empty task name");
    }
    out[name] = template_from_pattern(
        pattern, LabelSpace::from_verbalizers(std::move(words)));
  }
  return out;
}

inline std::map<std::string, PromptTemplate> load_template_file(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open template file: " + path);
  return parse_template_file(in);
}

// How a verbalizer continuation is scored from token logprobs.
enum class ScoringMode {
  full_sequence,  // sum over all continuation tokens
  first_token,    // first continuation token only
};

// Remote endpoint settings; consumed by HttpBackend (http_backend.hpp).
struct BackendConfig {
  std::string endpoint_url;  // e.g. http://127.0.0.1:8080/v1/score
  std::string model_name;
  int timeout_ms = 30000;
  int max_retries = 3;
  // Name of the environment variable holding a bearer token; empty
  // disables the Authorization header.
  std::string auth_token_env_var;
  ScoringMode scoring = ScoringMode::full_sequence;
  int concurrency = 4;
};

class Backend {
 public:
  virtual ~Backend() = default;

  virtual int num_classes() const = 0;

  // Distribution over the label space for query x under demonstration
  // context ctx. Must be deterministic for a fixed (x, ctx).
  virtual ProbDist infer(std::string_view query_text,
                         const Context& ctx) const = 0;

  // Default loops; adapters with real I/O may overlap requests.
  virtual std::vector<ProbDist> infer_batch(
      const std::vector<std::string>& queries, const Context& ctx) const {
    std::vector<ProbDist> out;
    out.reserve(queries.size());
    for (const std::string& q : queries) out.push_back(infer(q, ctx));
    return out;
  }
};

// Configuration of the simulated model. The observed log-odds for class
// c on query x under context C are
//   a_c * (slope * s(x) + intercept) + d_c
//   + majority_bias * (freq_c(C) - 1/n)
//   + recency_bias  * [last label in C == c]
//   + noise_sd      * g_c(seed, x, C)
// where s(x) is the scalar feature below and g is a unit normal fixed by
// (seed, x, C), so repeated calls agree bit for bit. An empty context
// contributes no majority or recency term.
struct MockModelSpec {
  int num_classes = 2;
  double slope = 1.0;
  double intercept = 0.0;
  std::vector<double> conditional_scale;  // a_c, c = 1..n-1; defaults to 1
  std::vector<double> marginal_shift;     // d_c, c = 1..n-1; defaults to 0
  double majority_bias = 0.0;
  double recency_bias = 0.0;
  double noise_sd = 0.0;
  std::uint64_t seed = 0;
};

// Scalar feature of a text: the value itself when the text parses as a
// decimal number, otherwise a hash mapped uniformly into [-3, 3].
inline double mock_feature(std::string_view text) {
  std::string s = detail::strip(text);
  if (!s.empty()) {
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec == std::errc() && ptr == s.data() + s.size() &&
        std::isfinite(value)) {
      return value;
    }
  }
  std::uint64_t h = fnv1a64(text);
  return (static_cast<double>(h >> 11) * 0x1.0p-53) * 6.0 - 3.0;
}

// Ground-truth label distribution: softmax over (0, l, ..., l) with
// l = slope * s(x) + intercept shared by the non-reference classes.
inline ProbDist mock_true_posterior(const MockModelSpec& spec,
                                    std::string_view text) {
  double l = spec.slope * mock_feature(text) + spec.intercept;
  std::vector<double> m(spec.num_classes - 1, l);
  return probs_from_logits(LogitVector(std::move(m)));
}

class MockBackend : public Backend {
 public:
  explicit MockBackend(MockModelSpec spec) : spec_(std::move(spec)) {
    if (spec_.num_classes < 2) throw ValueError("mock needs >= 2 classes");
    if (spec_.conditional_scale.empty()) {
      spec_.conditional_scale.assign(spec_.num_classes - 1, 1.0);
    }
    if (spec_.marginal_shift.empty()) {
      spec_.marginal_shift.assign(spec_.num_classes - 1, 0.0);
    }
    if (static_cast<int>(spec_.conditional_scale.size()) !=
            spec_.num_classes - 1 ||
        static_cast<int>(spec_.marginal_shift.size()) !=
            spec_.num_classes - 1) {
      throw ValueError("mock bias vectors must have n-1 entries");
    }
  }

  const MockModelSpec& spec() const { return spec_; }

  int num_classes() const override { return spec_.num_classes; }

  ProbDist infer(std::string_view query_text,
                 const Context& ctx) const override {
    const int n = spec_.num_classes;
    const double base =
        spec_.slope * mock_feature(query_text) + spec_.intercept;

    std::vector<double> freq(n, 0.0);
    if (!ctx.members.empty()) {
      for (const Exemplar& e : ctx.members) {
        if (e.label < 0 || e.label >= n) {
          throw ValueError("context label " + std::to_string(e.label) +
                           " outside 0.." + std::to_string(n - 1));
        }
        freq[e.label] += 1.0;
      }
      for (double& f : freq) f /= static_cast<double>(ctx.members.size());
    }
    const int last_label =
        ctx.members.empty() ? -1 : ctx.members.back().label;

    std::vector<double> m(n - 1);
    for (int c = 1; c < n; ++c) {
      double v = spec_.conditional_scale[c - 1] * base +
                 spec_.marginal_shift[c - 1];
      if (!ctx.members.empty()) {
        v += spec_.majority_bias * (freq[c] - 1.0 / n);
        if (last_label == c) v += spec_.recency_bias;
      }
      m[c - 1] = v;
    }

    if (spec_.noise_sd > 0.0) {
      std::uint64_t h = fnv1a64_u64(spec_.seed, 1469598103934665603ULL);
      h = fnv1a64(query_text, h);
      h = fnv1a64("\x1f", h);
      h = fnv1a64(ctx.key(), h);
      std::mt19937_64 rng(h);
      for (int c = 0; c < n - 1; ++c) {
        m[c] += spec_.noise_sd * rng_normal(rng);
      }
    }
    return probs_from_logits(LogitVector(std::move(m)));
  }

 private:
  MockModelSpec spec_;
};

// Counts every scoring call that reaches the wrapped backend.
class CallCountingBackend : public Backend {
 public:
  explicit CallCountingBackend(const Backend& inner) : inner_(inner) {}

  int num_classes() const override { return inner_.num_classes(); }

  ProbDist infer(std::string_view query_text,
                 const Context& ctx) const override {
    calls_.fetch_add(1, std::memory_order_relaxed);
    return inner_.infer(query_text, ctx);
  }

  long calls() const { return calls_.load(std::memory_order_relaxed); }
  void reset() { calls_.store(0, std::memory_order_relaxed); }

 private:
  const Backend& inner_;
  mutable std::atomic<long> calls_{0};
};

// Memoizes (query, context) pairs so identical scoring requests hit the
// wrapped backend once. Safe for concurrent use.
class CachingBackend : public Backend {
 public:
  explicit CachingBackend(const Backend& inner) : inner_(inner) {}

  int num_classes() const override { return inner_.num_classes(); }

  ProbDist infer(std::string_view query_text,
                 const Context& ctx) const override {
    std::string key;
    key.reserve(query_text.size() + 24);
    key += query_text;
    key += '\x1f';
    key += ctx.key();
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    ProbDist result = inner_.infer(query_text, ctx);
    std::lock_guard<std::mutex> lock(mu_);
    return cache_.emplace(std::move(key), std::move(result)).first->second;
  }

  std::size_t entries() const {
    std::lock_guard<std::mutex> lock(mu_);
    return cache_.size();
  }

 private:
  const Backend& inner_;
  mutable std::mutex mu_;
  mutable std::unordered_map<std::string, ProbDist> cache_;
};

}  // namespace supcal

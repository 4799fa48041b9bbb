#include "netecho/seeker.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "netecho/common.hpp"

namespace netecho::seeker {

namespace {

constexpr TokenId kStart = std::numeric_limits<TokenId>::max();
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(const std::vector<double>& v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

}  // namespace

// ------------------------------------------------------------ n-gram

std::size_t NGramOracle::KeyHash::operator()(const std::vector<TokenId>& k) const {
  std::uint64_t h = 1469598103934665603ULL;
  for (TokenId t : k) h = splitmix64(h ^ t);
  return static_cast<std::size_t>(h);
}

NGramOracle::NGramOracle(std::size_t vocab_size, std::size_t order)
    : vocab_size_(vocab_size), order_(order), unigram_counts_(vocab_size, 0.0) {
  if (vocab_size == 0) throw Error("n-gram vocabulary is empty");
  if (order < 1) throw Error("n-gram order must be >= 1");
  contexts_.resize(order - 1);
}

void NGramOracle::add_sequence(std::span<const TokenId> tokens, double weight) {
  if (!(weight > 0) || !std::isfinite(weight)) throw Error("n-gram sequence weight must be positive");
  std::vector<TokenId> padded(order_ - 1, kStart);
  padded.insert(padded.end(), tokens.begin(), tokens.end());
  for (std::size_t i = order_ - 1; i < padded.size(); ++i) {
    const TokenId w = padded[i];
    if (w >= vocab_size_) throw Error("token id outside the n-gram vocabulary");
    unigram_counts_[w] += weight;
    total_ += weight;
    for (std::size_t k = 1; k < order_; ++k) {
      std::vector<TokenId> h(padded.begin() + static_cast<std::ptrdiff_t>(i - k),
                             padded.begin() + static_cast<std::ptrdiff_t>(i));
      auto& f = contexts_[k - 1][std::move(h)];
      f.total += weight;
      f.counts[w] += weight;
    }
  }
}

std::vector<TokenId> NGramOracle::padded_suffix(std::span<const TokenId> context,
                                                std::size_t len) const {
  std::vector<TokenId> out(len, kStart);
  const std::size_t take = std::min(len, context.size());
  std::copy(context.end() - static_cast<std::ptrdiff_t>(take), context.end(),
            out.end() - static_cast<std::ptrdiff_t>(take));
  return out;
}

double NGramOracle::unigram(TokenId token) const {
  return (unigram_counts_.at(token) + 1.0) / (total_ + static_cast<double>(vocab_size_));
}

double NGramOracle::score(std::span<const TokenId> context, TokenId token) const {
  for (std::size_t k = order_ - 1; k >= 1; --k) {
    const auto it = contexts_[k - 1].find(padded_suffix(context, k));
    if (it == contexts_[k - 1].end()) continue;
    const auto c = it->second.counts.find(token);
    if (c != it->second.counts.end()) {
      return std::pow(kBackoff, static_cast<double>(order_ - 1 - k)) * c->second / it->second.total;
    }
  }
  return std::pow(kBackoff, static_cast<double>(order_ - 1)) * unigram(token);
}

std::vector<double> NGramOracle::next_scores(std::span<const TokenId> context) const {
  const double floor_mult = std::pow(kBackoff, static_cast<double>(order_ - 1));
  const double denom = total_ + static_cast<double>(vocab_size_);
  std::vector<double> out(vocab_size_);
  for (std::size_t w = 0; w < vocab_size_; ++w) {
    out[w] = std::log(floor_mult * (unigram_counts_[w] + 1.0) / denom);
  }
  // Shorter histories first so the longest matching one wins.
  for (std::size_t k = 1; k < order_; ++k) {
    const auto it = contexts_[k - 1].find(padded_suffix(context, k));
    if (it == contexts_[k - 1].end()) continue;
    const double mult = std::pow(kBackoff, static_cast<double>(order_ - 1 - k));
    for (const auto& [w, c] : it->second.counts) out[w] = std::log(mult * c / it->second.total);
  }
  return out;
}

NGramOracle train_ngram(const std::vector<std::string>& texts, const corpus::Vocab& vocab,
                        std::size_t order) {
  NGramOracle lm(vocab.size(), order);
  for (const auto& t : texts) lm.add_sequence(corpus::tokenize(vocab, t).tokens);
  if (lm.num_tokens() <= 0) throw Error("cannot train an n-gram on an empty corpus");
  return lm;
}

// ------------------------------------------------------------ constraints

std::size_t ConstraintSpec::num_tokens() const {
  if (mode == Mode::kPerToken) return lengths.size();
  std::size_t n = 0;
  for (const auto& g : groups) n += g.count;
  return n;
}

void ConstraintSpec::validate() const {
  if (max_token_len < 1) throw Error("max_token_len must be >= 1");
  if (mode == Mode::kPerToken) {
    for (auto l : lengths) {
      if (l < 1) throw Error("per-token target lengths must be >= 1");
    }
  } else {
    for (const auto& g : groups) {
      if (g.count < 1) throw Error("group token counts must be >= 1");
      if (g.char_sum < g.count) throw Error("group char sum is smaller than its token count");
    }
  }
}

ConstraintSpec constraint_from_trace(const traceex::SideTrace& st, std::size_t max_token_len) {
  ConstraintSpec spec;
  spec.max_token_len = max_token_len;
  const bool per_token = std::all_of(st.groups.begin(), st.groups.end(), [](const auto& g) {
    return g.char_lens && g.char_lens->size() == g.count;
  });
  if (per_token) {
    for (const auto& g : st.groups) {
      for (auto l : *g.char_lens) spec.lengths.push_back(static_cast<std::size_t>(std::max<std::int64_t>(1, l)));
    }
  } else {
    spec.mode = ConstraintSpec::Mode::kGroup;
    for (const auto& g : st.groups) {
      const auto count = std::max<std::size_t>(1, g.count);
      const auto sum = static_cast<std::size_t>(std::max<std::int64_t>(g.char_sum, 0));
      spec.groups.push_back({count, std::max(sum, count)});
    }
  }
  return spec;
}

bool GenState::done(const ConstraintSpec& spec) const {
  if (spec.mode == ConstraintSpec::Mode::kPerToken) return position >= spec.lengths.size();
  return group >= spec.groups.size();
}

GenState GenState::advance(const ConstraintSpec& spec, std::size_t token_len) const {
  GenState next = *this;
  ++next.position;
  if (spec.mode == ConstraintSpec::Mode::kGroup) {
    ++next.in_group;
    next.partial_sum += token_len;
    if (next.in_group >= spec.groups[group].count) {
      ++next.group;
      next.in_group = 0;
      next.partial_sum = 0;
    }
  }
  return next;
}

namespace {

// Signed bounds of the admissible token length; may lie outside
// [1, max_token_len] when the state is infeasible.
std::pair<std::int64_t, std::int64_t> raw_bounds(const GenState& s, const ConstraintSpec& spec) {
  if (spec.mode == ConstraintSpec::Mode::kPerToken) {
    const auto l = static_cast<std::int64_t>(spec.lengths.at(s.position));
    return {l, l};
  }
  const auto& g = spec.groups.at(s.group);
  const auto remaining = static_cast<std::int64_t>(g.char_sum) - static_cast<std::int64_t>(s.partial_sum);
  const auto after = static_cast<std::int64_t>(g.count - s.in_group - 1);
  const auto max_len = static_cast<std::int64_t>(spec.max_token_len);
  return {remaining - after * max_len, remaining - after};
}

}  // namespace

std::pair<std::size_t, std::size_t> allowed_lengths(const GenState& state,
                                                    const ConstraintSpec& spec) {
  auto [lo, hi] = raw_bounds(state, spec);
  lo = std::max<std::int64_t>(lo, 1);
  hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(spec.max_token_len));
  if (lo > hi) return {1, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

std::vector<double> constrain_scores(std::vector<double> scores, const GenState& state,
                                     const ConstraintSpec& spec, const corpus::Vocab& vocab) {
  const auto [lo, hi] = allowed_lengths(state, spec);
  for (std::size_t w = 0; w < scores.size(); ++w) {
    const auto l = vocab.char_len(static_cast<TokenId>(w));
    if (l < lo || l > hi) scores[w] = kNegInf;
  }
  return scores;
}

bool satisfies(const ConstraintSpec& spec, const corpus::Vocab& vocab,
               const std::vector<TokenId>& tokens) {
  if (tokens.size() != spec.num_tokens()) return false;
  if (spec.mode == ConstraintSpec::Mode::kPerToken) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (vocab.char_len(tokens[i]) != spec.lengths[i]) return false;
    }
    return true;
  }
  std::size_t pos = 0;
  for (const auto& g : spec.groups) {
    std::size_t sum = 0;
    for (std::size_t k = 0; k < g.count; ++k) sum += vocab.char_len(tokens[pos++]);
    if (sum != g.char_sum) return false;
  }
  return true;
}

// ------------------------------------------------------------ generation

void BeamConfig::validate() const {
  if (width < 1 || groups < 1) throw Error("beam width and group count must be >= 1");
  if (width % groups != 0) throw Error("beam width must be a multiple of the group count");
  if (diversity_penalty < 0 || relaxation_penalty < 0) throw Error("beam penalties must be >= 0");
  if (reference_weight < 0 || reference_weight >= 1) throw Error("reference_weight must be in [0, 1)");
  if (reference_order < 1) throw Error("reference_order must be >= 1");
}

namespace {

// Oracle mixed with an n-gram over the reference texts, each side
// normalized over the full vocabulary first.
class PrimedOracle : public LmOracle {
 public:
  PrimedOracle(const LmOracle& base, NGramOracle refs, double weight)
      : base_(base), refs_(std::move(refs)), weight_(weight) {}

  std::size_t vocab_size() const override { return base_.vocab_size(); }
  std::size_t context_window() const override {
    const auto b = base_.context_window();
    return b == 0 ? 0 : std::max(b, refs_.context_window());
  }
  std::vector<double> next_scores(std::span<const TokenId> context) const override {
    auto b = base_.next_scores(context);
    const auto r = refs_.next_scores(context);
    const double zb = log_sum_exp(b);
    const double zr = log_sum_exp(r);
    const double lb = std::log(1.0 - weight_), lr = std::log(weight_);
    for (std::size_t w = 0; w < b.size(); ++w) {
      const double x = lb + b[w] - zb, y = lr + r[w] - zr;
      const double m = std::max(x, y);
      b[w] = m + std::log1p(std::exp(std::min(x, y) - m));
    }
    return b;
  }

 private:
  const LmOracle& base_;
  NGramOracle refs_;
  double weight_;
};

class ScoreCache {
 public:
  explicit ScoreCache(const LmOracle& oracle) : oracle_(oracle), window_(oracle.context_window()) {}

  const std::vector<double>& get(const std::vector<TokenId>& context) {
    std::vector<TokenId> key;
    if (window_ == 0 || context.size() <= window_) {
      key = context;
      if (window_ != 0) key.insert(key.begin(), window_ - context.size(), kStart);
    } else {
      key.assign(context.end() - static_cast<std::ptrdiff_t>(window_), context.end());
    }
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    if (cache_.size() >= kCapacity) cache_.clear();
    auto scores = oracle_.next_scores(context);
    if (scores.size() != oracle_.vocab_size()) throw Error("oracle returned a wrong-sized score vector");
    for (double s : scores) {
      if (!std::isfinite(s)) throw Error("oracle returned a non-finite score");
    }
    return cache_.emplace(std::move(key), std::move(scores)).first->second;
  }

 private:
  struct KeyHash {
    std::size_t operator()(const std::vector<TokenId>& k) const {
      std::uint64_t h = 0x84222325CBF29CE4ULL;
      for (TokenId t : k) h = splitmix64(h ^ t);
      return static_cast<std::size_t>(h);
    }
  };
  static constexpr std::size_t kCapacity = 512;
  const LmOracle& oracle_;
  std::size_t window_;
  std::unordered_map<std::vector<TokenId>, std::vector<double>, KeyHash> cache_;
};

struct Beam {
  std::vector<TokenId> tokens;
  GenState state;
  double logprob = 0.0;
  std::vector<std::size_t> relaxed;
};

struct Candidate {
  std::size_t group = 0;
  std::size_t beam = 0;
  TokenId token = 0;
  double logprob = 0.0;  // beam total after this token
  double rank = 0.0;     // logprob minus the diversity penalty
  bool relaxed = false;
};

}  // namespace

std::vector<GenResult> generate(const LmOracle& oracle, const corpus::Vocab& vocab,
                                const ConstraintSpec& spec,
                                const std::vector<corpus::TokenSeq>& references,
                                const BeamConfig& beam,
                                const std::vector<double>& reference_weights) {
  spec.validate();
  if (!reference_weights.empty() && reference_weights.size() != references.size()) {
    throw Error("one weight per reference expected");
  }
  beam.validate();
  if (oracle.vocab_size() != vocab.size()) throw Error("oracle and vocabulary sizes differ");

  std::unique_ptr<PrimedOracle> primed;
  const LmOracle* lm = &oracle;
  if (!references.empty() && beam.reference_weight > 0) {
    NGramOracle refs(vocab.size(), beam.reference_order);
    for (std::size_t i = 0; i < references.size(); ++i) {
      refs.add_sequence(references[i].tokens, reference_weights.empty() ? 1.0 : reference_weights[i]);
    }
    primed = std::make_unique<PrimedOracle>(oracle, std::move(refs), beam.reference_weight);
    lm = primed.get();
  }
  ScoreCache cache(*lm);

  std::vector<std::vector<TokenId>> by_len(vocab.max_token_len() + 1);
  for (std::size_t w = 0; w < vocab.size(); ++w) by_len[vocab.char_len(static_cast<TokenId>(w))].push_back(static_cast<TokenId>(w));

  const std::size_t per_group = beam.width / beam.groups;
  std::vector<std::vector<Beam>> groups(beam.groups, std::vector<Beam>(1));
  const std::size_t steps = spec.num_tokens();

  for (std::size_t step = 0; step < steps; ++step) {
    const auto prev = std::move(groups);
    groups.assign(prev.size(), {});
    std::vector<int> opened(vocab.size(), 0);
    std::set<std::vector<TokenId>> held;
    // Candidates a group did not keep stay in play for the groups after it.
    std::vector<Candidate> carry;
    for (std::size_t g = 0; g < prev.size(); ++g) {
      std::vector<Candidate> cands = std::move(carry);
      carry.clear();
      for (std::size_t b = 0; b < prev[g].size(); ++b) {
        const Beam& bm = prev[g][b];
        const auto& scores = cache.get(bm.tokens);
        const auto [lo, hi] = allowed_lengths(bm.state, spec);
        std::vector<TokenId> allowed;
        for (std::size_t l = lo; l <= hi && l < by_len.size(); ++l) {
          allowed.insert(allowed.end(), by_len[l].begin(), by_len[l].end());
        }
        double penalty = 0.0;
        if (allowed.empty()) {
          if (!beam.allow_relaxation) continue;
          const auto [rlo, rhi] = raw_bounds(bm.state, spec);
          std::int64_t best = std::numeric_limits<std::int64_t>::max();
          for (std::size_t l = 1; l < by_len.size(); ++l) {
            if (by_len[l].empty()) continue;
            const auto li = static_cast<std::int64_t>(l);
            const auto d = li < rlo ? rlo - li : (li > rhi ? li - rhi : 0);
            if (d < best) {
              best = d;
              allowed = by_len[l];
            } else if (d == best) {
              allowed.insert(allowed.end(), by_len[l].begin(), by_len[l].end());
            }
          }
          penalty = beam.relaxation_penalty;
        }
        std::vector<double> masked;
        masked.reserve(allowed.size());
        for (TokenId w : allowed) masked.push_back(scores[w]);
        const double z = log_sum_exp(masked);
        for (std::size_t i = 0; i < allowed.size(); ++i) {
          const double lp = bm.logprob + masked[i] - z - penalty;
          cands.push_back({g, b, allowed[i], lp, lp, penalty > 0});
        }
      }
      for (auto& c : cands) {
        c.rank = c.logprob - (step == 0 ? beam.diversity_penalty * opened[c.token] : 0.0);
      }
      std::sort(cands.begin(), cands.end(), [&](const Candidate& x, const Candidate& y) {
        if (x.rank != y.rank) return x.rank > y.rank;
        const auto& tx = prev[x.group][x.beam].tokens;
        const auto& ty = prev[y.group][y.beam].tokens;
        if (tx != ty) return tx < ty;
        return x.token < y.token;
      });
      auto& next = groups[g];
      for (const auto& c : cands) {
        std::vector<TokenId> tokens = prev[c.group][c.beam].tokens;
        tokens.push_back(c.token);
        if (held.count(tokens) != 0) continue;
        if (next.size() == per_group) {
          if (carry.size() < beam.width) carry.push_back(c);
          continue;
        }
        held.insert(tokens);
        Beam nb = prev[c.group][c.beam];
        nb.tokens = std::move(tokens);
        nb.state = nb.state.advance(spec, vocab.char_len(c.token));
        nb.logprob = c.logprob;
        if (c.relaxed) nb.relaxed.push_back(step);
        next.push_back(std::move(nb));
      }
      if (step == 0) {
        std::vector<TokenId> firsts;
        for (const auto& nb : next) firsts.push_back(nb.tokens.front());
        std::sort(firsts.begin(), firsts.end());
        firsts.erase(std::unique(firsts.begin(), firsts.end()), firsts.end());
        for (TokenId t : firsts) ++opened[t];
      }
    }
    if (std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.empty(); })) {
      throw Error("infeasible constraints");
    }
  }

  std::vector<Beam> all;
  for (auto& group : groups) {
    for (auto& b : group) all.push_back(std::move(b));
  }
  std::sort(all.begin(), all.end(), [](const Beam& a, const Beam& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.tokens < b.tokens;
  });
  std::vector<GenResult> out;
  for (auto& b : all) {
    if (!out.empty() && std::any_of(out.begin(), out.end(), [&](const GenResult& r) {
          return r.tokens.tokens == b.tokens;
        })) {
      continue;
    }
    GenResult r;
    for (TokenId t : b.tokens) r.tokens.char_lens.push_back(vocab.char_len(t));
    r.tokens.tokens = std::move(b.tokens);
    r.text = corpus::detokenize(vocab, r.tokens.tokens);
    r.total_logprob = b.logprob;
    r.mean_token_logprob = r.tokens.empty() ? 0.0 : b.logprob / static_cast<double>(r.tokens.size());
    r.violation_flag = !b.relaxed.empty();
    r.relaxed_positions = std::move(b.relaxed);
    out.push_back(std::move(r));
  }
  return out;
}

double confidence(const GenResult& result) {
  if (result.tokens.empty()) throw Error("confidence of an empty generation");
  return result.total_logprob / static_cast<double>(result.tokens.size());
}

bool detect_misclass(double conf, const std::vector<double>& population) {
  if (population.size() < 10) throw Error("misclassification detection needs >= 10 samples");
  const double n = static_cast<double>(population.size());
  const double mean = std::accumulate(population.begin(), population.end(), 0.0) / n;
  double var = 0.0;
  for (double x : population) var += (x - mean) * (x - mean);
  return conf < mean - std::sqrt(var / n);
}

}  // namespace netecho::seeker

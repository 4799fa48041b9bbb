// Trace A / Trace B extraction from packet traces.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "netecho/streamsim.hpp"

namespace netecho::traceex {

enum class CountMode { kPerToken, kLengthMultiple, kFixedK };

CountMode parse_count_mode(std::string_view name);
std::string_view count_mode_name(CountMode m);

struct ExtractionConfig {
  std::int64_t per_token_overhead = 102;
  std::int64_t per_group_overhead = 0;
  std::int64_t burst_gap = 20000;
  CountMode mode = CountMode::kPerToken;
  /// Bytes per token for length_multiple mode; estimated per stream if unset.
  std::optional<double> length_multiple_base;
  int fixed_k = 1;
  std::size_t truncate_group_at = 6;

  void validate() const;
};

/// Inverse parameters matching a streamsim preset.
ExtractionConfig extraction_for(const sim::ScenarioConfig& cfg);

struct TraceGroup {
  std::size_t count = 1;
  std::optional<std::vector<std::int64_t>> char_lens;
  std::int64_t char_sum = 0;

  bool operator==(const TraceGroup&) const = default;
};

struct SideTrace {
  std::vector<TraceGroup> groups;

  std::vector<std::size_t> trace_a() const;
  std::size_t size() const { return groups.size(); }
  bool operator==(const SideTrace&) const = default;
};

/// Splits a trace into bursts; a gap of at least burst_gap starts a new one.
/// Returns the packet count of each burst.
std::vector<std::size_t> group_packets(const sim::PacketTrace& pt, std::int64_t burst_gap);

SideTrace extract_trace(const ExtractionConfig& cfg, const sim::PacketTrace& pt);

/// Lowest-cluster mode of packet lengths: the most common length among
/// packets shorter than 1.5x the smallest one.
double estimate_length_base(const sim::PacketTrace& pt);

/// len[i+1] - len[i] for adjacent packets. On a log-prob stream this equals
/// 2 (chars(t2) - chars(t1)) + bytes(t2) - bytes(t1).
std::vector<std::int64_t> delta_logprob_lengths(const sim::PacketTrace& pt);

enum class FeatureMode { kA, kAB };

FeatureMode parse_feature_mode(std::string_view name);
std::string_view feature_mode_name(FeatureMode m);
/// Channels per step: count [, mean chars per token], mask.
std::size_t feature_dim(FeatureMode m);

/// Row-major [max_len x dim] feature matrix. Steps at or beyond `length`
/// are zero padding (mask channel 0).
struct FeatureSeq {
  std::size_t dim = 0;
  std::size_t max_len = 0;
  std::size_t length = 0;
  std::vector<double> values;

  double at(std::size_t step, std::size_t channel) const { return values[step * dim + channel]; }
};

FeatureSeq featurize(const SideTrace& st, FeatureMode mode, std::size_t max_len);

// SideTrace JSONL: {"groups":[{"count":n,"char_lens":[..]|null,"char_sum":n}]}
std::string side_trace_to_json(const SideTrace& st);
SideTrace side_trace_from_json(std::string_view line);
void write_side_traces(const std::vector<SideTrace>& traces, const std::filesystem::path& path);
std::vector<SideTrace> read_side_traces(const std::filesystem::path& path);

}  // namespace netecho::traceex

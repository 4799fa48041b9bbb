// Simulated streaming transport: scenario presets, packet emission and
// defense transforms applied on top of it.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "netecho/corpus.hpp"

namespace netecho::sim {

struct Packet {
  std::int64_t t_us = 0;
  std::int64_t len = 0;

  bool operator==(const Packet&) const = default;
};

struct PacketTrace {
  std::vector<Packet> packets;

  std::size_t size() const { return packets.size(); }
  bool empty() const { return packets.empty(); }
  bool operator==(const PacketTrace&) const = default;
};

/// How tokens are grouped upstream before they hit the wire.
struct TokensPerPacket {
  enum class Kind { kFixed, kCategorical, kSpecDecode };
  Kind kind = Kind::kFixed;
  int fixed_k = 1;
  std::vector<int> values;      // categorical support
  std::vector<double> weights;  // categorical weights
  int spec_n = 0;               // speculative-decode window (2..8); groups of n
};

struct ScenarioConfig {
  char scenario_id = 'A';
  TokensPerPacket tokens_per_packet;
  std::int64_t per_token_overhead = 102;
  std::int64_t per_group_overhead = 0;
  double base_inter_group_gap = 120000.0;
  double intra_group_gap = 2000.0;
  double jitter_stddev = 5000.0;
  /// Chatbot frontends re-emit every upstream token in its own packet, so a
  /// group shows up as a timing burst instead of one large packet.
  bool explode = false;

  void validate() const;
};

struct DefenseConfig {
  std::optional<std::int64_t> pad_to_multiple;
  std::optional<std::int64_t> pad_random_max;
  std::optional<std::size_t> batch_k;
  double dummy_rate = 0.0;
  double drop_rate = 0.0;
  double swap_rate = 0.0;

  void validate() const;
  bool is_identity() const;
};

ScenarioConfig preset_scenario(char id);
ScenarioConfig preset_scenario(std::string_view id);
/// Defense that ships with a preset: scenario C pads every packet to K bytes.
DefenseConfig preset_defense(char id, std::int64_t pad_k = 1024);

/// Upstream grouping of a token sequence (group sizes, summing to ts.size()).
std::vector<std::size_t> group_tokens(const ScenarioConfig& cfg, std::size_t num_tokens,
                                      std::uint64_t rng_seed);

struct Emission {
  PacketTrace trace;
  std::vector<std::size_t> group_sizes;  // ground truth Trace A
};

Emission emit_with_groups(const ScenarioConfig& cfg, const corpus::TokenSeq& ts,
                          std::uint64_t rng_seed);
PacketTrace emit_packets(const ScenarioConfig& cfg, const corpus::TokenSeq& ts,
                         std::uint64_t rng_seed);

/// Applies batching, padding, dummy injection, drop and swap in that order.
PacketTrace apply_defense(const DefenseConfig& d, const PacketTrace& pt, std::uint64_t rng_seed);

/// Checks strictly increasing timestamps and positive lengths.
void validate_trace(const PacketTrace& pt);

// Packet-log file: "#netecho-pkt v1" then "t_us<TAB>len" per line.
std::string format_packet_log(const PacketTrace& pt);
PacketTrace parse_packet_log(std::string_view content);
void write_packet_log(const PacketTrace& pt, const std::filesystem::path& path);
PacketTrace read_packet_log(const std::filesystem::path& path);

/// Packet lengths of an API stream that returns per-token log-probabilities.
/// The token text counts twice and its UTF-8 byte array once:
/// len = fixed + 2 * chars(token) + bytes(token).
std::vector<std::int64_t> logprob_chunk_lengths(const std::vector<std::string>& token_texts,
                                                std::int64_t fixed_overhead = 310);

}  // namespace netecho::sim

#include "netecho/streamsim.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "netecho/common.hpp"

namespace netecho::sim {

namespace {

void check_rate(double r, const char* name) {
  if (!(r >= 0.0 && r <= 1.0)) {
    throw Error(std::string("defense ") + name + " must lie in [0,1]");
  }
}

}  // namespace

void ScenarioConfig::validate() const {
  if (per_token_overhead < 0 || per_group_overhead < 0) throw Error("overheads must be >= 0");
  if (!(base_inter_group_gap > 0) || !(intra_group_gap > 0)) throw Error("gaps must be > 0");
  if (jitter_stddev < 0) throw Error("jitter_stddev must be >= 0");
  const auto& tpp = tokens_per_packet;
  switch (tpp.kind) {
    case TokensPerPacket::Kind::kFixed:
      if (tpp.fixed_k < 1) throw Error("fixed tokens per packet must be >= 1");
      break;
    case TokensPerPacket::Kind::kCategorical:
      if (tpp.values.empty() || tpp.values.size() != tpp.weights.size()) {
        throw Error("categorical tokens per packet needs matching values and weights");
      }
      for (int v : tpp.values) {
        if (v < 1) throw Error("categorical tokens per packet values must be >= 1");
      }
      break;
    case TokensPerPacket::Kind::kSpecDecode:
      if (tpp.spec_n < 2 || tpp.spec_n > 8) throw Error("spec-decode n must be in 2..8");
      break;
  }
}

void DefenseConfig::validate() const {
  check_rate(dummy_rate, "dummy_rate");
  check_rate(drop_rate, "drop_rate");
  check_rate(swap_rate, "swap_rate");
  if (pad_to_multiple && pad_random_max) throw Error("at most one padding mode may be active");
  if (pad_to_multiple && *pad_to_multiple <= 0) throw Error("pad_to_multiple must be > 0");
  if (pad_random_max && *pad_random_max < 0) throw Error("pad_random_max must be >= 0");
  if (batch_k && *batch_k == 0) throw Error("batch_k must be >= 1");
}

bool DefenseConfig::is_identity() const {
  return !pad_to_multiple && !pad_random_max && (!batch_k || *batch_k == 1) &&
         dummy_rate == 0.0 && drop_rate == 0.0 && swap_rate == 0.0;
}

ScenarioConfig preset_scenario(char id) {
  ScenarioConfig c;
  c.scenario_id = id;
  TokensPerPacket api_mtp;
  api_mtp.kind = TokensPerPacket::Kind::kCategorical;
  api_mtp.values = {1, 2, 3};
  api_mtp.weights = {0.45, 0.30, 0.25};
  TokensPerPacket paired;
  paired.kind = TokensPerPacket::Kind::kCategorical;
  paired.values = {1, 2, 3};
  paired.weights = {0.01, 0.98, 0.01};
  switch (id) {
    case 'A':
      c.tokens_per_packet.kind = TokensPerPacket::Kind::kFixed;
      c.tokens_per_packet.fixed_k = 1;
      c.per_token_overhead = 102;
      c.explode = true;
      break;
    case 'B':
      c.tokens_per_packet = api_mtp;
      c.per_token_overhead = 264;
      break;
    case 'C':
      c.tokens_per_packet = paired;
      c.per_token_overhead = 102;
      break;
    case 'D':
      c.tokens_per_packet = paired;
      c.per_token_overhead = 264;
      break;
    case 'E':
      c.tokens_per_packet = paired;
      c.per_token_overhead = 102;
      c.explode = true;
      break;
    case 'F':
      c.tokens_per_packet.kind = TokensPerPacket::Kind::kSpecDecode;
      c.tokens_per_packet.spec_n = 6;
      c.per_token_overhead = 102;
      c.explode = true;
      break;
    case 'G':
      c.tokens_per_packet.kind = TokensPerPacket::Kind::kSpecDecode;
      c.tokens_per_packet.spec_n = 3;
      c.per_token_overhead = 264;
      break;
    default:
      throw Error(std::string("unknown scenario '") + id + "'");
  }
  return c;
}

ScenarioConfig preset_scenario(std::string_view id) {
  if (id.size() != 1) throw Error("unknown scenario '" + std::string(id) + "'");
  return preset_scenario(id[0]);
}

DefenseConfig preset_defense(char id, std::int64_t pad_k) {
  DefenseConfig d;
  if (id == 'C') d.pad_to_multiple = pad_k;
  return d;
}

std::vector<std::size_t> group_tokens(const ScenarioConfig& cfg, std::size_t num_tokens,
                                      std::uint64_t rng_seed) {
  Rng rng(derive_seed(rng_seed, "grouping"));
  std::vector<std::size_t> groups;
  std::size_t left = num_tokens;
  const auto& tpp = cfg.tokens_per_packet;
  while (left > 0) {
    std::size_t k = 1;
    switch (tpp.kind) {
      case TokensPerPacket::Kind::kFixed:
        k = static_cast<std::size_t>(tpp.fixed_k);
        break;
      case TokensPerPacket::Kind::kCategorical:
        k = static_cast<std::size_t>(tpp.values[rng.categorical(tpp.weights)]);
        break;
      case TokensPerPacket::Kind::kSpecDecode:
        k = static_cast<std::size_t>(tpp.spec_n);
        break;
    }
    k = std::min(k, left);
    groups.push_back(k);
    left -= k;
  }
  return groups;
}

Emission emit_with_groups(const ScenarioConfig& cfg, const corpus::TokenSeq& ts,
                          std::uint64_t rng_seed) {
  cfg.validate();
  Emission out;
  out.group_sizes = group_tokens(cfg, ts.size(), rng_seed);
  Rng timing(derive_seed(rng_seed, "timing"));
  double t = 0.0;
  std::size_t pos = 0;
  for (std::size_t g = 0; g < out.group_sizes.size(); ++g) {
    const std::size_t k = out.group_sizes[g];
    if (g > 0) {
      const double gap = cfg.base_inter_group_gap + cfg.jitter_stddev * timing.normal();
      t += std::max(1.0, gap);
    }
    if (cfg.explode) {
      for (std::size_t i = 0; i < k; ++i) {
        if (i > 0) t += cfg.intra_group_gap;
        const auto chars = static_cast<std::int64_t>(ts.char_lens[pos + i]);
        const std::int64_t len =
            chars + cfg.per_token_overhead + (i == 0 ? cfg.per_group_overhead : 0);
        out.trace.packets.push_back({static_cast<std::int64_t>(std::llround(t)), len});
      }
    } else {
      std::int64_t chars = 0;
      for (std::size_t i = 0; i < k; ++i) chars += static_cast<std::int64_t>(ts.char_lens[pos + i]);
      const std::int64_t len = chars + static_cast<std::int64_t>(k) * cfg.per_token_overhead +
                               cfg.per_group_overhead;
      out.trace.packets.push_back({static_cast<std::int64_t>(std::llround(t)), len});
    }
    pos += k;
  }
  // Rounding can only collide for sub-microsecond gaps; keep time strict.
  for (std::size_t i = 1; i < out.trace.packets.size(); ++i) {
    auto& p = out.trace.packets[i];
    p.t_us = std::max(p.t_us, out.trace.packets[i - 1].t_us + 1);
  }
  return out;
}

PacketTrace emit_packets(const ScenarioConfig& cfg, const corpus::TokenSeq& ts,
                         std::uint64_t rng_seed) {
  return emit_with_groups(cfg, ts, rng_seed).trace;
}

PacketTrace apply_defense(const DefenseConfig& d, const PacketTrace& pt, std::uint64_t rng_seed) {
  d.validate();
  std::vector<Packet> p = pt.packets;

  if (d.batch_k && *d.batch_k > 1) {
    std::vector<Packet> merged;
    for (std::size_t i = 0; i < p.size(); i += *d.batch_k) {
      Packet m{p[i].t_us, 0};
      for (std::size_t j = i; j < std::min(p.size(), i + *d.batch_k); ++j) m.len += p[j].len;
      merged.push_back(m);
    }
    p = std::move(merged);
  }

  if (d.pad_to_multiple) {
    const auto k = *d.pad_to_multiple;
    for (auto& x : p) x.len = (x.len + k - 1) / k * k;
  } else if (d.pad_random_max) {
    Rng rng(derive_seed(rng_seed, "pad"));
    for (auto& x : p) x.len += rng.uniform_int(0, *d.pad_random_max);
  }

  if (d.dummy_rate > 0.0 && !p.empty()) {
    Rng rng(derive_seed(rng_seed, "dummy"));
    const auto n = static_cast<std::size_t>(std::ceil(d.dummy_rate * static_cast<double>(p.size())));
    const std::vector<Packet> source = p;
    for (std::size_t k = 0; k < n; ++k) {
      const Packet copy = source[rng.index(source.size())];
      const std::size_t at = 1 + rng.index(p.size());  // insert before p[at]; at == size appends
      std::int64_t t;
      if (at == p.size()) {
        t = p.back().t_us + 1;
      } else {
        t = p[at - 1].t_us + (p[at].t_us - p[at - 1].t_us) / 2;
      }
      p.insert(p.begin() + static_cast<std::ptrdiff_t>(at), Packet{t, copy.len});
    }
    for (std::size_t i = 1; i < p.size(); ++i) p[i].t_us = std::max(p[i].t_us, p[i - 1].t_us + 1);
  }

  if (d.drop_rate > 0.0) {
    Rng rng(derive_seed(rng_seed, "drop"));
    std::vector<Packet> kept;
    for (const auto& x : p) {
      if (rng.uniform() >= d.drop_rate) kept.push_back(x);
    }
    p = std::move(kept);
  }

  if (d.swap_rate > 0.0 && p.size() >= 2) {
    Rng rng(derive_seed(rng_seed, "swap"));
    const auto n = static_cast<std::size_t>(std::ceil(d.swap_rate * static_cast<double>(p.size())));
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t i = rng.index(p.size() - 1);
      std::swap(p[i].len, p[i + 1].len);
    }
  }
  return PacketTrace{std::move(p)};
}

void validate_trace(const PacketTrace& pt) {
  for (std::size_t i = 0; i < pt.packets.size(); ++i) {
    if (pt.packets[i].len <= 0) throw Error("packet " + std::to_string(i) + " has non-positive length");
    if (i > 0 && pt.packets[i].t_us <= pt.packets[i - 1].t_us) {
      throw Error("packet " + std::to_string(i) + " timestamp not strictly increasing");
    }
  }
}

namespace {
constexpr std::string_view kPacketHeader = "#netecho-pkt v1";

std::int64_t parse_int(std::string_view s, std::size_t line_no) {
  std::int64_t v = 0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) {
    throw Error("packet log line " + std::to_string(line_no) + ": bad integer '" + std::string(s) + "'");
  }
  return v;
}
}  // namespace

std::string format_packet_log(const PacketTrace& pt) {
  std::string out(kPacketHeader);
  out += '\n';
  for (const auto& p : pt.packets) {
    out += std::to_string(p.t_us);
    out += '\t';
    out += std::to_string(p.len);
    out += '\n';
  }
  return out;
}

PacketTrace parse_packet_log(std::string_view content) {
  PacketTrace pt;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool header = false;
  while (pos < content.size()) {
    auto nl = content.find('\n', pos);
    if (nl == std::string_view::npos) nl = content.size();
    const auto line = content.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!header) {
      if (line != kPacketHeader) throw Error("packet log: missing '#netecho-pkt v1' header");
      header = true;
      continue;
    }
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) {
      throw Error("packet log line " + std::to_string(line_no) + ": expected t_us<TAB>len");
    }
    pt.packets.push_back({parse_int(line.substr(0, tab), line_no), parse_int(line.substr(tab + 1), line_no)});
  }
  if (!header) throw Error("packet log: missing '#netecho-pkt v1' header");
  validate_trace(pt);
  return pt;
}

void write_packet_log(const PacketTrace& pt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write packet log " + path.string());
  out << format_packet_log(pt);
}

PacketTrace read_packet_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read packet log " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_packet_log(ss.str());
}

std::vector<std::int64_t> logprob_chunk_lengths(const std::vector<std::string>& token_texts,
                                                std::int64_t fixed_overhead) {
  std::vector<std::int64_t> out;
  out.reserve(token_texts.size());
  for (const auto& t : token_texts) {
    out.push_back(fixed_overhead + 2 * static_cast<std::int64_t>(utf8_length(t)) +
                  static_cast<std::int64_t>(t.size()));
  }
  return out;
}

}  // namespace netecho::sim

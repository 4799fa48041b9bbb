#include "netecho/traceex.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json_io.hpp"
#include "netecho/common.hpp"

namespace netecho::traceex {

using json = nlohmann::json;

CountMode parse_count_mode(std::string_view name) {
  if (name == "per_token") return CountMode::kPerToken;
  if (name == "length_multiple") return CountMode::kLengthMultiple;
  if (name == "fixed_k") return CountMode::kFixedK;
  throw Error("unknown tokens_per_packet_mode '" + std::string(name) + "'");
}

std::string_view count_mode_name(CountMode m) {
  switch (m) {
    case CountMode::kPerToken: return "per_token";
    case CountMode::kLengthMultiple: return "length_multiple";
    case CountMode::kFixedK: return "fixed_k";
  }
  return "?";
}

void ExtractionConfig::validate() const {
  if (burst_gap <= 0) throw Error("burst_gap must be > 0");
  if (mode == CountMode::kLengthMultiple && length_multiple_base && !(*length_multiple_base > 0)) {
    throw Error("length_multiple_base must be > 0");
  }
  if (mode == CountMode::kFixedK && fixed_k < 1) throw Error("fixed_k must be >= 1");
  if (truncate_group_at < 1) throw Error("truncate_group_at must be >= 1");
}

ExtractionConfig extraction_for(const sim::ScenarioConfig& cfg) {
  ExtractionConfig e;
  e.per_token_overhead = cfg.per_token_overhead;
  e.per_group_overhead = cfg.per_group_overhead;
  if (cfg.explode) {
    e.mode = CountMode::kPerToken;
  } else if (cfg.tokens_per_packet.kind == sim::TokensPerPacket::Kind::kFixed) {
    e.mode = CountMode::kFixedK;
    e.fixed_k = cfg.tokens_per_packet.fixed_k;
  } else {
    e.mode = CountMode::kLengthMultiple;
    // A token costs its overhead plus about two characters on average.
    e.length_multiple_base = static_cast<double>(cfg.per_token_overhead) + 2.0;
  }
  return e;
}

std::vector<std::size_t> SideTrace::trace_a() const {
  std::vector<std::size_t> out;
  out.reserve(groups.size());
  for (const auto& g : groups) out.push_back(g.count);
  return out;
}

std::vector<std::size_t> group_packets(const sim::PacketTrace& pt, std::int64_t burst_gap) {
  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i < pt.packets.size(); ++i) {
    if (i == 0 || pt.packets[i].t_us - pt.packets[i - 1].t_us >= burst_gap) {
      sizes.push_back(1);
    } else {
      ++sizes.back();
    }
  }
  return sizes;
}

double estimate_length_base(const sim::PacketTrace& pt) {
  if (pt.empty()) throw Error("cannot estimate length base of an empty trace");
  std::int64_t min_len = pt.packets.front().len;
  for (const auto& p : pt.packets) min_len = std::min(min_len, p.len);
  std::map<std::int64_t, std::size_t> hist;
  for (const auto& p : pt.packets) {
    if (static_cast<double>(p.len) < 1.5 * static_cast<double>(min_len)) ++hist[p.len];
  }
  std::int64_t best = min_len;
  std::size_t best_n = 0;
  for (const auto& [len, n] : hist) {
    if (n > best_n) {
      best = len;
      best_n = n;
    }
  }
  return static_cast<double>(best);
}

namespace {

std::int64_t checked_chars(std::int64_t len, std::int64_t overhead) {
  const std::int64_t c = len - overhead;
  if (c < 0) throw Error("overhead exceeds packet length");
  return c;
}

}  // namespace

SideTrace extract_trace(const ExtractionConfig& cfg, const sim::PacketTrace& pt) {
  cfg.validate();
  SideTrace st;
  const std::size_t cap = cfg.truncate_group_at;
  switch (cfg.mode) {
    case CountMode::kPerToken: {
      std::size_t pos = 0;
      for (std::size_t burst : group_packets(pt, cfg.burst_gap)) {
        TraceGroup g;
        g.count = std::min(burst, cap);
        std::vector<std::int64_t> lens;
        for (std::size_t i = 0; i < burst; ++i) {
          const auto overhead = cfg.per_token_overhead + (i == 0 ? cfg.per_group_overhead : 0);
          const auto c = checked_chars(pt.packets[pos + i].len, overhead);
          if (i < cap) lens.push_back(c);
        }
        for (auto c : lens) g.char_sum += c;
        g.char_lens = std::move(lens);
        st.groups.push_back(std::move(g));
        pos += burst;
      }
      break;
    }
    case CountMode::kLengthMultiple: {
      if (pt.empty()) break;
      const double base = cfg.length_multiple_base ? *cfg.length_multiple_base
                                                   : estimate_length_base(pt);
      for (const auto& p : pt.packets) {
        const double units = static_cast<double>(p.len - cfg.per_group_overhead) / base;
        const auto count = static_cast<std::int64_t>(std::max<double>(1.0, std::llround(units)));
        TraceGroup g;
        g.char_sum = checked_chars(p.len, count * cfg.per_token_overhead + cfg.per_group_overhead);
        g.count = std::min(static_cast<std::size_t>(count), cap);
        st.groups.push_back(std::move(g));
      }
      break;
    }
    case CountMode::kFixedK: {
      const auto k = static_cast<std::int64_t>(cfg.fixed_k);
      for (const auto& p : pt.packets) {
        TraceGroup g;
        g.char_sum = checked_chars(p.len, k * cfg.per_token_overhead + cfg.per_group_overhead);
        g.count = std::min(static_cast<std::size_t>(k), cap);
        st.groups.push_back(std::move(g));
      }
      break;
    }
  }
  return st;
}

std::vector<std::int64_t> delta_logprob_lengths(const sim::PacketTrace& pt) {
  if (pt.size() < 2) throw Error("delta_logprob_lengths needs at least 2 packets");
  std::vector<std::int64_t> out;
  out.reserve(pt.size() - 1);
  for (std::size_t i = 0; i + 1 < pt.size(); ++i) {
    out.push_back(pt.packets[i + 1].len - pt.packets[i].len);
  }
  return out;
}

FeatureMode parse_feature_mode(std::string_view name) {
  if (name == "A") return FeatureMode::kA;
  if (name == "AB") return FeatureMode::kAB;
  throw Error("unknown feature mode '" + std::string(name) + "'");
}

std::string_view feature_mode_name(FeatureMode m) { return m == FeatureMode::kA ? "A" : "AB"; }

std::size_t feature_dim(FeatureMode m) { return m == FeatureMode::kA ? 2 : 3; }

FeatureSeq featurize(const SideTrace& st, FeatureMode mode, std::size_t max_len) {
  FeatureSeq f;
  f.dim = feature_dim(mode);
  f.max_len = max_len;
  f.length = std::min(st.groups.size(), max_len);
  f.values.assign(max_len * f.dim, 0.0);
  for (std::size_t i = 0; i < f.length; ++i) {
    const auto& g = st.groups[i];
    double* row = &f.values[i * f.dim];
    row[0] = static_cast<double>(g.count);
    if (mode == FeatureMode::kAB) {
      row[1] = static_cast<double>(g.char_sum) / static_cast<double>(g.count);
    }
    row[f.dim - 1] = 1.0;
  }
  return f;
}

std::string side_trace_to_json(const SideTrace& st) { return jsonio::to_json(st).dump(); }

SideTrace side_trace_from_json(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error&) {
    throw Error("side trace: malformed JSON");
  }
  return jsonio::side_trace_from(j);
}

void write_side_traces(const std::vector<SideTrace>& traces, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write side traces " + path.string());
  for (const auto& st : traces) out << side_trace_to_json(st) << '\n';
}

std::vector<SideTrace> read_side_traces(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read side traces " + path.string());
  std::vector<SideTrace> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(side_trace_from_json(line));
    } catch (const Error& e) {
      throw Error("side trace line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace netecho::traceex

namespace netecho::jsonio {

using json = nlohmann::json;

json to_json(const traceex::SideTrace& st) {
  json groups = json::array();
  for (const auto& g : st.groups) {
    json jg;
    jg["count"] = g.count;
    jg["char_lens"] = g.char_lens ? json(*g.char_lens) : json(nullptr);
    jg["char_sum"] = g.char_sum;
    groups.push_back(std::move(jg));
  }
  return json{{"groups", std::move(groups)}};
}

traceex::SideTrace side_trace_from(const json& j) {
  if (!j.is_object() || !j.contains("groups") || !j["groups"].is_array()) {
    throw Error("side trace: missing \"groups\" array");
  }
  traceex::SideTrace st;
  for (const auto& jg : j["groups"]) {
    if (!jg.contains("count") || !jg.contains("char_sum")) {
      throw Error("side trace: group needs \"count\" and \"char_sum\"");
    }
    traceex::TraceGroup g;
    g.count = jg["count"].get<std::size_t>();
    g.char_sum = jg["char_sum"].get<std::int64_t>();
    if (g.count < 1) throw Error("side trace: group count must be >= 1");
    if (jg.contains("char_lens") && !jg["char_lens"].is_null()) {
      g.char_lens = jg["char_lens"].get<std::vector<std::int64_t>>();
    }
    st.groups.push_back(std::move(g));
  }
  return st;
}

json to_json(const sim::PacketTrace& pt) {
  json arr = json::array();
  for (const auto& p : pt.packets) arr.push_back(json::array({p.t_us, p.len}));
  return arr;
}

sim::PacketTrace packet_trace_from(const json& j) {
  if (!j.is_array()) throw Error("packet trace: expected array of [t_us, len]");
  sim::PacketTrace pt;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2) throw Error("packet trace: expected [t_us, len] pairs");
    pt.packets.push_back({p[0].get<std::int64_t>(), p[1].get<std::int64_t>()});
  }
  return pt;
}

}  // namespace netecho::jsonio

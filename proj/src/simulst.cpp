// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/simulst.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace mmfuse::simulst {

using json = nlohmann::json;

int StreamSource::tokens_until(double t) const {
  if (token_duration <= 0) throw ConfigError("token_duration must be positive");
  int n = static_cast<int>(std::floor(t / token_duration + 1e-9));
  return std::min<int>(n, static_cast<int>(tokens.size()));
}

std::string CommitTrace::to_jsonl() const {
  std::ostringstream os;
  json head;
  head["type"] = "trace";
  head["complete"] = complete;
  head["decode_steps"] = decode_steps;
  head["n_read"] = n_read;
  head["n_write"] = n_write;
  head["hypothesis"] = hypothesis;
  head["delays_unaware"] = delays_unaware;
  head["delays_aware"] = delays_aware;
  os << head.dump() << '\n';
  for (const auto& e : events) {
    json j;
    j["type"] = e.type;
    j["source_time"] = e.source_time;
    j["clock_aware"] = e.clock_aware;
    j["tokens"] = e.tokens;
    os << j.dump() << '\n';
  }
  return os.str();
}

namespace {

size_t common_prefix(const std::vector<int>& a, const std::vector<int>& b) {
  size_t n = std::min(a.size(), b.size());
  size_t i = 0;
  while (i < n && a[i] == b[i]) ++i;
  return i;
}

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

struct Clocks {
  double unaware = 0;
  double aware = 0;
  void read_until(double t) {
    unaware = t;
    aware = std::max(aware, t);
  }
};

void commit_tokens(CommitTrace& trace, std::vector<int>& committed,
                   const std::vector<int>& fresh, const Clocks& clk) {
  if (fresh.empty()) return;
  committed.insert(committed.end(), fresh.begin(), fresh.end());
  CommitTrace::Event e;
  e.type = "write";
  e.source_time = clk.unaware;
  e.clock_aware = clk.aware;
  e.tokens = fresh;
  trace.events.push_back(std::move(e));
  ++trace.n_write;
  for (size_t i = 0; i < fresh.size(); ++i) {
    trace.delays_unaware.push_back(clk.unaware);
    trace.delays_aware.push_back(clk.aware);
  }
}

}  // namespace

CommitTrace local_agreement_run(IncrementalTranslator& model,
                                const StreamSource& stream,
                                const ClockModel& clock) {
  if (stream.chunk_size <= 0) throw ConfigError("chunk_size must be positive");
  CommitTrace trace;
  Clocks clk;
  std::vector<int> committed;
  std::vector<int> prev_hyp;
  bool have_prev = false;
  const double total = stream.total_duration();
  const int total_tokens = static_cast<int>(stream.tokens.size());
  if (total_tokens == 0) throw DataError("empty source stream");

  double t = 0;
  int consumed = 0;
  while (consumed < total_tokens) {
    t = std::min(total, t + stream.chunk_size);
    consumed = stream.tokens_until(t);
    // a chunk shorter than one token still advances the clock
    clk.read_until(t);
    trace.events.push_back({"read", clk.unaware, clk.aware, {}});
    ++trace.n_read;

    std::vector<int> source(stream.tokens.begin(), stream.tokens.begin() + consumed);
    IncrementalTranslator::Output out;
    double t0 = now_seconds();
    try {
      out = model.generate(source, committed);
    } catch (const std::exception& e) {
      trace.complete = false;
      trace.hypothesis = committed;
      throw StreamInterrupted(std::string("model failure mid-stream: ") + e.what(),
                              trace);
    }
    clk.aware += clock.cost(out.decode_steps, now_seconds() - t0);
    trace.decode_steps += out.decode_steps;

    const bool final_chunk = consumed >= total_tokens;
    std::vector<int> target;
    if (final_chunk) {
      target = out.hypothesis;
    } else if (have_prev) {
      size_t lcp = common_prefix(prev_hyp, out.hypothesis);
      target.assign(out.hypothesis.begin(), out.hypothesis.begin() + lcp);
    }
    if (target.size() > committed.size()) {
      std::vector<int> fresh(target.begin() + committed.size(), target.end());
      commit_tokens(trace, committed, fresh, clk);
    }
    prev_hyp = out.hypothesis;
    have_prev = true;
  }
  trace.hypothesis = committed;
  trace.complete = true;
  return trace;
}

CommitTrace cascade_run(IncrementalTranslator& asr, IncrementalTranslator& mt,
                        const StreamSource& stream, const ClockModel& clock) {
  if (stream.chunk_size <= 0) throw ConfigError("chunk_size must be positive");
  CommitTrace trace;
  Clocks clk;
  std::vector<int> transcript;   // committed ASR output
  std::vector<int> committed;    // committed translation
  std::vector<int> prev_asr, prev_mt;
  bool have_prev_asr = false, have_prev_mt = false;
  const double total = stream.total_duration();
  const int total_tokens = static_cast<int>(stream.tokens.size());
  if (total_tokens == 0) throw DataError("empty source stream");

  auto run_stage = [&](IncrementalTranslator& m, const std::vector<int>& src,
                       const std::vector<int>& prefix) {
    IncrementalTranslator::Output out;
    double t0 = now_seconds();
    try {
      out = m.generate(src, prefix);
    } catch (const std::exception& e) {
      trace.complete = false;
      trace.hypothesis = committed;
      throw StreamInterrupted(std::string("model failure mid-stream: ") + e.what(),
                              trace);
    }
    clk.aware += clock.cost(out.decode_steps, now_seconds() - t0);
    trace.decode_steps += out.decode_steps;
    return out;
  };

  double t = 0;
  int consumed = 0;
  while (consumed < total_tokens) {
    t = std::min(total, t + stream.chunk_size);
    consumed = stream.tokens_until(t);
    clk.read_until(t);
    trace.events.push_back({"read", clk.unaware, clk.aware, {}});
    ++trace.n_read;
    const bool final_chunk = consumed >= total_tokens;

    std::vector<int> source(stream.tokens.begin(), stream.tokens.begin() + consumed);
    auto asr_out = run_stage(asr, source, transcript);

    std::vector<int> asr_target;
    if (final_chunk) {
      asr_target = asr_out.hypothesis;
    } else if (have_prev_asr) {
      size_t lcp = common_prefix(prev_asr, asr_out.hypothesis);
      asr_target.assign(asr_out.hypothesis.begin(), asr_out.hypothesis.begin() + lcp);
    }
    prev_asr = asr_out.hypothesis;
    have_prev_asr = true;

    bool grew = asr_target.size() > transcript.size();
    if (grew) {
      std::vector<int> fresh(asr_target.begin() + transcript.size(),
                             asr_target.end());
      transcript.insert(transcript.end(), fresh.begin(), fresh.end());
      trace.events.push_back({"asr_commit", clk.unaware, clk.aware, fresh});
    }

    // translation can only react to stable transcript prefixes
    if (grew || final_chunk) {
      auto mt_out = run_stage(mt, transcript, committed);
      std::vector<int> mt_target;
      if (final_chunk) {
        mt_target = mt_out.hypothesis;
      } else if (have_prev_mt) {
        size_t lcp = common_prefix(prev_mt, mt_out.hypothesis);
        mt_target.assign(mt_out.hypothesis.begin(), mt_out.hypothesis.begin() + lcp);
      }
      prev_mt = mt_out.hypothesis;
      have_prev_mt = true;
      if (mt_target.size() > committed.size()) {
        std::vector<int> fresh(mt_target.begin() + committed.size(), mt_target.end());
        commit_tokens(trace, committed, fresh, clk);
      }
    }
  }
  trace.hypothesis = committed;
  trace.complete = true;
  return trace;
}

double average_lagging(const std::vector<double>& delays,
                       const std::vector<double>& gate_delays,
                       int reference_length, double total_duration) {
  if (delays.empty() || gate_delays.size() != delays.size()) {
    throw NumericError("average lagging undefined for an empty hypothesis");
  }
  if (reference_length <= 0) throw NumericError("reference length must be positive");
  size_t tau = delays.size();
  for (size_t i = 0; i < gate_delays.size(); ++i) {
    if (gate_delays[i] >= total_duration - 1e-12) {
      tau = i + 1;
      break;
    }
  }
  double acc = 0;
  for (size_t i = 0; i < tau; ++i) {
    acc += delays[i] - static_cast<double>(i) * total_duration / reference_length;
  }
  return acc / static_cast<double>(tau);
}

AlPair average_lagging(const CommitTrace& trace, int reference_length) {
  // delays are re-derived from the event list rather than read from the
  // trace's cached arrays
  std::vector<double> unaware, aware;
  double total = 0;
  for (const auto& e : trace.events) {
    if (e.type == "read") total = e.source_time;
    if (e.type == "write") {
      for (size_t i = 0; i < e.tokens.size(); ++i) {
        unaware.push_back(e.source_time);
        aware.push_back(e.clock_aware);
      }
    }
  }
  AlPair out;
  out.unaware = average_lagging(unaware, unaware, reference_length, total);
  out.aware = average_lagging(aware, unaware, reference_length, total);
  return out;
}

std::string latency_csv(const std::vector<LatencyReport>& rows) {
  std::ostringstream os;
  os << "mode,image,chunk_size,AL_unaware,AL_aware,quality,decode_steps\n";
  for (const auto& r : rows) {
    os << r.mode << ',' << (r.image ? 1 : 0) << ',' << fmt6(r.chunk_size) << ','
       << fmt6(r.al_unaware) << ',' << fmt6(r.al_aware) << ',' << fmt6(r.quality)
       << ',' << r.decode_steps << '\n';
  }
  return os.str();
}

std::vector<LatencyReport> sweep(const std::vector<SweepExample>& examples,
                                 const std::vector<double>& chunk_sizes,
                                 const std::vector<std::string>& modes,
                                 const std::vector<bool>& image_options,
                                 const ClockModel& clock, const SweepHooks& hooks,
                                 std::vector<CommitTrace>* traces_out) {
  if (examples.empty()) throw DataError("sweep needs at least one example");
  std::vector<LatencyReport> rows;
  for (const std::string& mode : modes) {
    for (bool image : image_options) {
      for (double chunk : chunk_sizes) {
        LatencyReport row;
        row.mode = mode;
        row.image = image;
        row.chunk_size = chunk;
        double al_u = 0, al_a = 0, q = 0;
        for (const auto& ex : examples) {
          StreamSource stream;
          stream.tokens = ex.stream_tokens;
          stream.chunk_size = chunk;
          CommitTrace trace;
          if (mode == "e2e") {
            auto m = hooks.e2e(ex.index, image);
            trace = local_agreement_run(*m, stream, clock);
          } else if (mode == "cascade") {
            auto a = hooks.cascade_asr(ex.index, image);
            auto t = hooks.cascade_mt(ex.index);
            trace = cascade_run(*a, *t, stream, clock);
          } else {
            throw ConfigError("unknown sweep mode '" + mode + "'");
          }
          AlPair al = average_lagging(trace, hooks.reference_length(ex.index));
          al_u += al.unaware;
          al_a += al.aware;
          q += hooks.quality(ex.index, trace.hypothesis);
          row.decode_steps += trace.decode_steps;
          row.n_read += trace.n_read;
          row.n_write += trace.n_write;
          if (traces_out) traces_out->push_back(std::move(trace));
        }
        const double n = static_cast<double>(examples.size());
        row.al_unaware = al_u / n;
        row.al_aware = al_a / n;
        row.quality = q / n;
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

}  // namespace mmfuse::simulst

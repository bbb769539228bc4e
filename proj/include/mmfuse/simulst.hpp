// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmfuse/util.hpp"

namespace mmfuse::simulst {

// Full-hypothesis generator over the source consumed so far, with the
// already-committed target prefix force-decoded. Implementations regenerate
// from scratch each call.
class IncrementalTranslator {
 public:
  virtual ~IncrementalTranslator() = default;
  struct Output {
    std::vector<int> hypothesis;  // includes the committed prefix, no eos
    int decode_steps = 0;
  };
  virtual Output generate(const std::vector<int>& source_prefix,
                          const std::vector<int>& committed) = 0;
};

// Chunked delivery of one source token stream on a simulated clock.
struct StreamSource {
  std::vector<int> tokens;
  double chunk_size = 2.0;     // time units per read
  double token_duration = 1.0;

  double total_duration() const { return tokens.size() * token_duration; }
  int tokens_until(double t) const;  // tokens fully arrived by time t
};

// Compute-time accounting for the computation-aware clock. In deterministic
// mode each model call costs per_call + per_token * decode_steps simulated
// time units; otherwise measured wall clock is charged.
struct ClockModel {
  bool deterministic = true;
  double per_call = 0.1;
  double per_token = 0.02;
  double cost(int decode_steps, double measured_seconds) const {
    return deterministic ? per_call + per_token * decode_steps
                         : measured_seconds;
  }
};

struct CommitTrace {
  struct Event {
    std::string type;          // "read" | "write" | "asr_commit"
    double source_time = 0;    // unaware clock after the event
    double clock_aware = 0;    // aware clock after the event
    std::vector<int> tokens;   // committed tokens for write/asr_commit
  };
  std::vector<Event> events;
  std::vector<int> hypothesis;         // concatenation of write tokens
  std::vector<double> delays_unaware;  // per committed token
  std::vector<double> delays_aware;
  bool complete = false;
  int decode_steps = 0;
  int n_read = 0;
  int n_write = 0;

  std::string to_jsonl() const;  // one event per line
};

struct StreamInterrupted : std::runtime_error {
  CommitTrace partial;
  StreamInterrupted(const std::string& msg, CommitTrace t)
      : std::runtime_error(msg), partial(std::move(t)) {}
};

// Local Agreement over two consecutive hypotheses: after each read, commit
// the longest common prefix of the previous and current full hypotheses
// beyond what is already committed; the final read commits everything.
CommitTrace local_agreement_run(IncrementalTranslator& model,
                                const StreamSource& stream,
                                const ClockModel& clock);

// Cascade baseline: Local Agreement over the transcription stage; whenever
// the committed transcript grows, the text translator re-translates it with
// its own Local Agreement over successive hypotheses. Both stages' compute
// accrues to the aware clock.
CommitTrace cascade_run(IncrementalTranslator& asr, IncrementalTranslator& mt,
                        const StreamSource& stream, const ClockModel& clock);

// Average lagging: AL = (1/tau) * sum_{i<=tau} (d_i - (i-1) * T / ref_len)
// with tau = first token index whose unaware delay reaches T (hypothesis
// length if none). The unaware tau gates both clocks, so aware AL >= unaware
// AL for every trace.
struct AlPair {
  double unaware = 0;
  double aware = 0;
};
AlPair average_lagging(const CommitTrace& trace, int reference_length);
double average_lagging(const std::vector<double>& delays,
                       const std::vector<double>& gate_delays,
                       int reference_length, double total_duration);

struct LatencyReport {
  std::string mode;  // "e2e" | "cascade"
  bool image = false;
  double chunk_size = 0;
  double al_unaware = 0;
  double al_aware = 0;
  double quality = 0;
  long decode_steps = 0;
  long n_read = 0;
  long n_write = 0;
};

// CSV: mode,image,chunk_size,AL_unaware,AL_aware,quality,decode_steps
std::string latency_csv(const std::vector<LatencyReport>& rows);

// Hooks supplying per-example translators and scoring for the sweep.
struct SweepHooks {
  std::function<std::unique_ptr<IncrementalTranslator>(int example, bool image)>
      e2e;
  std::function<std::unique_ptr<IncrementalTranslator>(int example, bool image)>
      cascade_asr;
  std::function<std::unique_ptr<IncrementalTranslator>(int example)> cascade_mt;
  std::function<double(int example, const std::vector<int>& hypothesis)> quality;
  std::function<int(int example)> reference_length;
};

struct SweepExample {
  int index = 0;
  std::vector<int> stream_tokens;
};

// One LatencyReport per (mode, image, chunk_size), averaged over examples.
std::vector<LatencyReport> sweep(const std::vector<SweepExample>& examples,
                                 const std::vector<double>& chunk_sizes,
                                 const std::vector<std::string>& modes,
                                 const std::vector<bool>& image_options,
                                 const ClockModel& clock, const SweepHooks& hooks,
                                 std::vector<CommitTrace>* traces_out = nullptr);

}  // namespace mmfuse::simulst

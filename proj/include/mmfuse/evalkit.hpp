// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmfuse/simulst.hpp"
#include "mmfuse/synthdata.hpp"
#include "mmfuse/trainer.hpp"

namespace mmfuse::evalkit {

struct QualityReport {
  double token_accuracy = 0;
  double exact_match = 0;
  double homograph_accuracy = 0;
  long homograph_total = 0;
  long substitutions = 0;
  long insertions = 0;
  long deletions = 0;
  long n_examples = 0;
  long ref_tokens = 0;
};

struct ScoreItem {
  std::vector<int> hyp;
  std::vector<int> ref;
  std::vector<int> homograph_positions;  // indices into ref
};

// Exact scoring: positional token accuracy, exact match, edit-distance
// error counts and homograph accuracy at the given reference positions.
// Counts are integers, so aggregation is independent of batch order.
QualityReport score(const std::vector<ScoreItem>& items);
QualityReport score(const std::vector<std::vector<int>>& hyps,
                    const std::vector<std::vector<int>>& refs);

struct EditCounts {
  long substitutions = 0;
  long insertions = 0;
  long deletions = 0;
  // aligned[i] = hyp token matched to ref position i, or -1 for a deletion
  std::vector<int> aligned;
};
EditCounts align_edit_distance(const std::vector<int>& hyp,
                               const std::vector<int>& ref);

enum class InferenceKind { kDirect, kSelfCascadeAsr, kSelfCascadeOcr, kApe };

struct InferenceMode {
  InferenceKind kind = InferenceKind::kDirect;
  bool image_enabled = true;
  std::vector<int> ape_hypothesis;  // required for kApe

  void validate(const synthdata::SynthExample& ex) const;
};

struct OfflineResult {
  std::vector<int> hypothesis;    // translation segment
  std::vector<int> intermediate;  // transcript / ocr text for cascade modes
  bool parse_ok = true;
  int decode_steps = 0;
};

// single-pass decode of one example under the given mode; cascade modes
// split the output at the eos/language-tag boundary
OfflineResult translate_offline(const trainer::FusedSystem& sys,
                                const synthdata::SynthExample& ex,
                                const InferenceMode& mode,
                                trainer::TapCache* cache = nullptr,
                                int max_new = 48);

// payload for an example with the image optionally withheld
model::ModalityPayload payload_for(const synthdata::SynthExample& ex,
                                   bool image_enabled);

// reference positions (into the reordered reference) of homograph images
std::vector<int> homograph_positions(const synthdata::Corpus& corpus,
                                     const synthdata::SynthExample& ex);

// disambiguation-suite evaluation with and without the image modality
QualityReport eval_disambiguation(const trainer::FusedSystem& sys,
                                  const synthdata::Corpus& corpus,
                                  bool with_image, int max_examples = 0);

// quality of a system over a slice under one inference mode
QualityReport eval_slice(const trainer::FusedSystem& sys,
                         const synthdata::Corpus& corpus,
                         const std::vector<synthdata::SynthExample>& slice,
                         const InferenceMode& mode, int max_examples = 0);

// full transcript -> translation pipeline over the cascade systems
QualityReport eval_cascade_offline(const trainer::FusedSystem& asr,
                                   const trainer::FusedSystem& mt,
                                   const synthdata::Corpus& corpus,
                                   const std::vector<synthdata::SynthExample>& slice,
                                   bool image_enabled, int max_examples = 0);

struct ExperimentConfig {
  std::string corpus_dir;
  std::string gated_ckpt;
  std::string mid_ckpt;
  std::string asr_ckpt;
  std::string mt_ckpt;
  std::string out_dir;
  int max_examples = 0;  // 0 = all
  int gate_examples_per_combo = 100;
};

struct ExperimentRow {
  std::string system;  // cascade | e2e_mid | e2e_gated
  bool image = false;
  std::string infer;  // direct | self_cascade
  QualityReport report;
};

// Offline matrix {cascade, e2e_mid, e2e_gated} x {image on/off} x
// {direct, self-cascade}; writes results.csv, gates.csv and summary.txt.
std::vector<ExperimentRow> run_experiment(const ExperimentConfig& cfg);

std::string results_csv(const std::vector<ExperimentRow>& rows);

struct SweepRunConfig {
  std::string corpus_dir;
  std::string e2e_ckpt;
  std::string asr_ckpt;
  std::string mt_ckpt;
  std::string out_dir;
  std::vector<double> chunk_sizes = {2, 3, 4, 5, 6};
  int max_examples = 16;
  bool deterministic_clock = true;
  int max_new = 48;
};

// streaming sweep over {e2e, cascade} x {image off, image on} x chunk sizes;
// writes sweep.csv and traces/*.jsonl under out_dir
std::vector<simulst::LatencyReport> run_sweep(const SweepRunConfig& cfg);

// gate-contribution report over `per_combo` payloads per modality combination
std::string run_gate_report(const trainer::FusedSystem& sys,
                            const synthdata::Corpus& corpus, int per_combo);

trainer::FusedSystem load_system_checkpoint(const std::string& path);

}  // namespace mmfuse::evalkit

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmfuse/fusion.hpp"
#include "mmfuse/model.hpp"
#include "mmfuse/synthdata.hpp"

namespace mmfuse::trainer {

namespace nc = mmfuse::numcore;

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 4;
  int grad_accum_steps = 2;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global-norm clip; 0 disables
  int max_steps = 5000;
  int eval_every = 1000;
  int save_limit = 3;
  uint64_t seed = 1;
  uint64_t mmfm_seed = 777;  // shared frozen encoder across systems
  std::string mode = "fuse";  // fuse | pretrain | asr | mt
  std::string fusion_variant = "gated";
  // relative sampling weights over tasks in fuse mode
  double mix_st = 1.0, mix_sit = 1.0, mix_tit = 1.0, mix_ape = 0.0;
  double ape_corruption = 0.3;
  // pretraining: probability of the fused-layout text analogue vs plain MT
  double pretrain_stream_mix = 0.5;
  bool asr_with_image = false;
  std::string init_nmt_from;  // checkpoint supplying the frozen LM base

  model::TransformerConfig mmfm;
  model::TransformerConfig nmt;
  model::LoraSpec lora;

  void validate() const;
  std::string to_kv() const;
  static TrainConfig from_kv(const std::map<std::string, std::string>& kv);
};

// Frozen multimodal encoder + fusion bridge + translation LM. Text-only
// systems (cascade MT stage, pretraining) have no encoder/bridge.
class TapCache {
 public:
  explicit TapCache(size_t cap = 2048) : cap_(cap) {}
  const model::LayerTaps* find(uint64_t key) const;
  void put(uint64_t key, model::LayerTaps taps);
  size_t size() const { return map_.size(); }

 private:
  size_t cap_;
  std::unordered_map<uint64_t, model::LayerTaps> map_;
};

struct FusedSystem {
  model::TransformerConfig mmfm_cfg;
  model::TransformerConfig nmt_cfg;
  std::string fusion_variant = "gated";
  std::unique_ptr<model::MultimodalEncoder> encoder;
  std::unique_ptr<fusion::FusionBridge> bridge;
  std::unique_ptr<model::TransformerLM> nmt;

  static FusedSystem create_multimodal(const model::TransformerConfig& mmfm_cfg,
                                       const model::TransformerConfig& nmt_cfg,
                                       const std::string& variant,
                                       uint64_t mmfm_seed, uint64_t seed);
  static FusedSystem create_text_only(const model::TransformerConfig& nmt_cfg,
                                      uint64_t seed);

  bool multimodal() const { return encoder != nullptr; }

  // "mmfm." / "nmt." / "fusion." prefixed parameter listing
  std::vector<std::pair<std::string, nc::Tensor>> named_parameters() const;

  fusion::FusedContext fuse_payload(const model::ModalityPayload& p,
                                    TapCache* cache = nullptr) const;

  // mean masked cross entropy for one training example
  nc::Tensor example_loss(const synthdata::TrainingExample& ex,
                          TapCache* cache = nullptr) const;

  struct EvalResult {
    double loss = 0;
    int correct = 0;
    int total = 0;
  };
  // teacher-forced loss and argmax accuracy over label positions
  EvalResult example_eval(const synthdata::TrainingExample& ex,
                          TapCache* cache = nullptr) const;

  // greedy decode conditioned on payload + inp, with committed force-decoded
  std::vector<int> translate(const model::ModalityPayload& p,
                             const std::vector<int>& inp,
                             const std::vector<int>& committed, int max_new,
                             int* decode_steps = nullptr,
                             TapCache* cache = nullptr,
                             int stop_eos_count = 1) const;
};

// checkpoint container round trip for a system (tensors + configs)
void store_system(const FusedSystem& sys, model::Container& c);
FusedSystem restore_system(const model::Container& c);

class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, nc::Tensor>> params, double lr,
        double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  void step();
  void zero_grad();
  double grad_norm() const;
  // scales all gradients so the global norm is at most max_norm; returns the
  // pre-clip norm
  double clip_grad_norm(double max_norm);
  long step_count() const { return t_; }

  void store(model::Container& c) const;
  void restore(const model::Container& c);

 private:
  std::vector<std::pair<std::string, nc::Tensor>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, wd_, b1_, b2_, eps_;
  long t_ = 0;
};

struct StepMetrics {
  int step = 0;
  double loss = 0;
  double grad_norm = 0;
};

struct ValidationMetrics {
  double loss = 0;
  double token_accuracy = 0;
  double exact_match = 0;
};

class Trainer {
 public:
  Trainer(TrainConfig cfg, const synthdata::Corpus& corpus);
  // resume training bit-exactly from a checkpoint
  Trainer(const std::string& checkpoint_path, const synthdata::Corpus& corpus);

  StepMetrics train_step();
  ValidationMetrics validate();

  // full loop: logging csv, periodic validation, rotating checkpoints and a
  // best.ckpt tracked by validation loss
  void run(const std::string& out_dir);

  void save_checkpoint(const std::string& path) const;

  const FusedSystem& system() const { return system_; }
  FusedSystem& system() { return system_; }
  const TrainConfig& config() const { return cfg_; }
  int step() const { return step_; }
  double best_valid_loss() const { return best_valid_; }

  // trainable (name, tensor) pairs after the partition audit
  std::vector<std::pair<std::string, nc::Tensor>> trainable_parameters() const;

  // builds the training example for a given slot of a step (test hook)
  synthdata::TrainingExample slot_example(int step, int slot) const;

 private:
  void init_partition();
  void audit_partition() const;
  synthdata::TrainingExample build_for_task(const std::string& task,
                                            const synthdata::SynthExample& ex,
                                            Rng& rng) const;
  const std::vector<size_t>& pool_for(const std::string& task) const;
  std::string sample_task(Rng& rng) const;

  TrainConfig cfg_;
  const synthdata::Corpus& corpus_;
  FusedSystem system_;
  std::unique_ptr<AdamW> opt_;
  TapCache cache_;
  int step_ = 0;
  double best_valid_ = 1e300;
  std::vector<size_t> pool_st_, pool_sit_, pool_tit_, pool_speech_, pool_all_;
  std::vector<std::string> saved_checkpoints_;
};

}  // namespace mmfuse::trainer

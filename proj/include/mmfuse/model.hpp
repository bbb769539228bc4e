// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mmfuse/numcore.hpp"
#include "mmfuse/util.hpp"
#include "mmfuse/vocab.hpp"

namespace mmfuse::model {

namespace nc = mmfuse::numcore;

struct TransformerConfig {
  int vocab_size = 128;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 160;
  double dropout_rate = 0.0;  // train-only; kept at 0 for determinism

  void validate(bool is_multimodal_encoder = false) const;
  std::string to_json() const;
  static TransformerConfig from_json(const std::string& s);
  bool operator==(const TransformerConfig&) const = default;
};

// Hidden states tapped from the first, middle and last blocks of the frozen
// multimodal encoder. mid = floor(n_layers/2), counting the first block's
// output as layer 1.
struct LayerTaps {
  nc::Tensor first;
  nc::Tensor mid;
  nc::Tensor last;
  int seq_len() const { return first.rows(); }
};

struct LoraSpec {
  int rank = 16;
  double alpha = 32.0;
  std::vector<std::string> targets = {"wq", "wk", "wv", "wo", "w1", "w2", "head"};
};

struct LoraAdapter {
  nc::Tensor a;  // [rank x d_in]
  nc::Tensor b;  // [d_out x rank], zero-init so the adapted map starts as identity
  double scaling = 1.0;  // alpha / rank
};

struct Linear {
  nc::Tensor w;  // [d_in x d_out]
  std::optional<LoraAdapter> lora;
  nc::Tensor forward(const nc::Tensor& x) const;
};

// One tagged multimodal input plus the encoder-side prompt implied by its
// modality combination.
struct ModalityPayload {
  std::vector<int> speech;              // upsampled noisy source token stream
  std::vector<std::vector<int>> image;  // token grid, rows x cols
  std::vector<int> text;

  bool has_speech() const { return !speech.empty(); }
  bool has_image() const { return !image.empty(); }
  bool has_text() const { return !text.empty(); }
  bool empty() const { return !has_speech() && !has_image() && !has_text(); }

  // "speech", "speech+image", "image", "text"
  std::string combo() const;
};

// prompt tokens for a modality combination: {<p:...>, <prompt-end>}
std::vector<int> mmfm_prompt(const ModalityPayload& p);
// full encoder-side token sequence: prompt ++ image(row-major with row
// separators) ++ speech ++ text
std::vector<int> mmfm_input_tokens(const ModalityPayload& p);

class TransformerLM {
 public:
  TransformerLM(TransformerConfig cfg, Rng& rng, bool trainable);

  const TransformerConfig& config() const { return cfg_; }

  // token embeddings plus sinusoidal positions starting at pos_offset
  nc::Tensor embed(const std::vector<int>& ids, int pos_offset = 0) const;
  // adds sinusoidal positions [offset, offset+x.rows()) to already-built
  // embeddings (used for fused prefixes)
  nc::Tensor add_positions(const nc::Tensor& x, int offset) const;

  // final-layer-normed hidden states over input embeddings
  nc::Tensor hidden_states(const nc::Tensor& x) const;
  nc::Tensor logits(const nc::Tensor& x) const;
  // residual-stream outputs of blocks {1, mid, last}
  LayerTaps tapped_forward(const nc::Tensor& x) const;

  // causal decoder loss over masked-in positions; labels/mask are aligned
  // with logit rows (position t predicts labels[t])
  nc::Tensor loss(const nc::Tensor& input_embeddings,
                  const std::vector<int>& labels,
                  const std::vector<bool>& mask) const;

  // Greedy continuation. committed tokens are consumed verbatim before any
  // new token is produced; the returned sequence starts with them. Stops
  // after `stop_eos_count` generated eos tokens (cascade-style outputs carry
  // an inner eos) or max_new new tokens. decode_steps counts model calls.
  std::vector<int> generate(const nc::Tensor& prefix_embeddings,
                            const std::vector<int>& committed, int max_new,
                            int* decode_steps = nullptr,
                            int stop_eos_count = 1) const;

  void apply_lora(const LoraSpec& spec);
  bool has_lora() const { return lora_applied_; }
  // sum of rank*(d_in+d_out) over adapted matrices
  long lora_parameter_count() const;

  void set_trainable_all(bool trainable);

  // name -> tensor, stable order; lora params appear as "...lora_a"/"...lora_b"
  std::vector<std::pair<std::string, nc::Tensor>> named_parameters() const;
  uint64_t checksum(bool frozen_only = false) const;

  void load_tensors(const std::map<std::string, nc::Tensor>& named,
                    const std::string& prefix);

 private:
  struct Block {
    nc::Tensor ln1_g, ln1_b, ln2_g, ln2_b;
    Linear wq, wk, wv, wo, w1, w2;
  };
  nc::Tensor block_forward(const Block& blk, const nc::Tensor& x) const;

  TransformerConfig cfg_;
  nc::Tensor tok_emb_;  // [V x D]
  std::vector<Block> blocks_;
  nc::Tensor lnf_g_, lnf_b_;
  Linear head_;         // [D x V]
  nc::Tensor pos_enc_;  // sinusoidal, [max_seq_len x D], never trainable
  bool lora_applied_ = false;
};

// The frozen multimodal side: token front-ends plus a transformer whose
// first/mid/last hidden states are exposed. Parameters never require grad,
// so taps act as constants to everything downstream.
class MultimodalEncoder {
 public:
  MultimodalEncoder(TransformerConfig cfg, Rng& rng);

  const TransformerConfig& config() const { return lm_.config(); }
  const TransformerLM& lm() const { return lm_; }

  LayerTaps forward(const ModalityPayload& payload) const;

  std::vector<std::pair<std::string, nc::Tensor>> named_parameters() const {
    return lm_.named_parameters();
  }
  uint64_t checksum() const { return lm_.checksum(); }
  void load_tensors(const std::map<std::string, nc::Tensor>& named,
                    const std::string& prefix) {
    lm_.load_tensors(named, prefix);
  }

 private:
  TransformerLM lm_;
};

// ----- named-tensor container (checkpoints, corpus-independent) -----

struct Container {
  std::map<std::string, nc::Tensor> tensors;
  std::map<std::string, std::string> strings;

  void save(const std::string& path) const;
  static Container load(const std::string& path);
};

}  // namespace mmfuse::model

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmfuse/model.hpp"
#include "mmfuse/numcore.hpp"

namespace mmfuse::fusion {

namespace nc = mmfuse::numcore;

enum class FusionVariant { kGated, kFirstOnly, kMidOnly, kLastOnly };

FusionVariant variant_from_string(const std::string& s);
std::string variant_to_string(FusionVariant v);

// Result of fusing one example's taps: the projected prefix embeddings m
// (one row per tapped timestep) and the per-timestep gate weights used.
struct FusedContext {
  nc::Tensor m;      // [L_m x d_trans]
  nc::Tensor gates;  // [L_m x 3], rows on the 3-simplex
};

// Gated aggregation of first/mid/last encoder states followed by an MLP
// projection into the translation model's embedding width. Single-layer
// variants bypass the gate and feed one tap straight to the MLP.
class FusionBridge {
 public:
  FusionBridge(int d_mmfm, int d_trans, FusionVariant variant, Rng& rng);

  FusedContext fuse(const model::LayerTaps& taps) const;
  // gated computation with externally fixed gate rows (equivalence checks)
  FusedContext fuse_with_gates(const model::LayerTaps& taps,
                               const nc::Tensor& fixed_gates) const;

  FusionVariant variant() const { return variant_; }
  int d_mmfm() const { return d_mmfm_; }
  int d_trans() const { return d_trans_; }

  nc::Tensor& gate_weights() { return w_gate_; }

  std::vector<std::pair<std::string, nc::Tensor>> named_parameters() const;
  void load_tensors(const std::map<std::string, nc::Tensor>& named,
                    const std::string& prefix);

 private:
  nc::Tensor project(const nc::Tensor& mixed) const;

  FusionVariant variant_;
  int d_mmfm_;
  int d_trans_;
  nc::Tensor w_gate_;  // [3 x 3*d_mmfm], zero-init: uniform gates at start
  nc::Tensor mlp_w1_;  // [d_mmfm x 2*d_mmfm]
  nc::Tensor mlp_b1_;
  nc::Tensor mlp_w2_;  // [2*d_mmfm x d_trans]
  nc::Tensor mlp_b2_;
};

// X~ = fused prefix ++ token embeddings, with positions continuing across
// the boundary; total length is exactly L_m + |text_tokens|.
nc::Tensor concat_multimodal(const FusedContext& fused,
                             const model::TransformerLM& lm,
                             const std::vector<int>& text_tokens);

// ----- gate contribution analysis -----

struct GateStats {
  std::string modality_combo;
  double mean_gate[3] = {0, 0, 0};  // first, mid, last
  long n_timesteps = 0;
};

// Mean gate value per tap layer, grouped by modality combination.
std::vector<GateStats> gate_statistics(const model::MultimodalEncoder& encoder,
                                       const FusionBridge& bridge,
                                       const std::vector<model::ModalityPayload>& slice);

// CSV: modality_combo,layer,mean_gate,n_timesteps
std::string gate_stats_csv(const std::vector<GateStats>& stats);

}  // namespace mmfuse::fusion

// SPDX-License-Identifier: Apache-2.0
#include "mmfuse/fusion.hpp"

#include <sstream>

namespace mmfuse::fusion {

FusionVariant variant_from_string(const std::string& s) {
  if (s == "gated") return FusionVariant::kGated;
  if (s == "first_only") return FusionVariant::kFirstOnly;
  if (s == "mid_only") return FusionVariant::kMidOnly;
  if (s == "last_only") return FusionVariant::kLastOnly;
  throw ConfigError("unknown fusion variant '" + s + "'");
}

std::string variant_to_string(FusionVariant v) {
  switch (v) {
    case FusionVariant::kGated: return "gated";
    case FusionVariant::kFirstOnly: return "first_only";
    case FusionVariant::kMidOnly: return "mid_only";
    case FusionVariant::kLastOnly: return "last_only";
  }
  throw ConfigError("bad fusion variant value");
}

FusionBridge::FusionBridge(int d_mmfm, int d_trans, FusionVariant variant,
                           Rng& rng)
    : variant_(variant), d_mmfm_(d_mmfm), d_trans_(d_trans) {
  if (d_mmfm <= 0 || d_trans <= 0) {
    throw ConfigError("fusion bridge dims must be positive");
  }
  const int hidden = 2 * d_mmfm;
  w_gate_ = nc::Tensor::zeros(3, 3 * d_mmfm, true);
  mlp_w1_ = nc::Tensor::randn(d_mmfm, hidden, rng, 0.08, true);
  mlp_b1_ = nc::Tensor::zeros(1, hidden, true);
  mlp_w2_ = nc::Tensor::randn(hidden, d_trans, rng, 0.08, true);
  mlp_b2_ = nc::Tensor::zeros(1, d_trans, true);
}

nc::Tensor FusionBridge::project(const nc::Tensor& mixed) const {
  nc::Tensor h = nc::gelu(nc::add_row_vector(nc::matmul(mixed, mlp_w1_), mlp_b1_));
  return nc::add_row_vector(nc::matmul(h, mlp_w2_), mlp_b2_);
}

static void check_taps(const model::LayerTaps& taps, int d_mmfm) {
  const nc::Tensor& f = taps.first;
  if (f.cols() != d_mmfm) {
    throw ShapeError("tap width " + std::to_string(f.cols()) +
                     " does not match configured encoder width " +
                     std::to_string(d_mmfm));
  }
  for (const nc::Tensor* t : {&taps.mid, &taps.last}) {
    if (t->rows() != f.rows() || t->cols() != f.cols()) {
      throw ShapeError("layer taps must share one shape");
    }
  }
}

FusedContext FusionBridge::fuse(const model::LayerTaps& taps) const {
  check_taps(taps, d_mmfm_);
  const int L = taps.seq_len();
  if (variant_ == FusionVariant::kGated) {
    // logits_t = W_gate . (h1 ++ hmid ++ hlast)_t, written as a sum of the
    // three column blocks of W_gate
    nc::Tensor b1 = nc::slice(w_gate_, 0, 3, 0, d_mmfm_);
    nc::Tensor b2 = nc::slice(w_gate_, 0, 3, d_mmfm_, 2 * d_mmfm_);
    nc::Tensor b3 = nc::slice(w_gate_, 0, 3, 2 * d_mmfm_, 3 * d_mmfm_);
    nc::Tensor logits = nc::add(
        nc::add(nc::matmul(taps.first, nc::transpose(b1)),
                nc::matmul(taps.mid, nc::transpose(b2))),
        nc::matmul(taps.last, nc::transpose(b3)));
    return fuse_with_gates(taps, nc::softmax(logits, 1));
  }
  // single-layer variant: one-hot gates, tap fed straight to the MLP
  FusedContext out;
  int hot = variant_ == FusionVariant::kFirstOnly ? 0
            : variant_ == FusionVariant::kMidOnly ? 1
                                                  : 2;
  out.gates = nc::Tensor::zeros(L, 3);
  for (int r = 0; r < L; ++r) out.gates.at(r, hot) = 1.0;
  const nc::Tensor& tap = hot == 0 ? taps.first : hot == 1 ? taps.mid : taps.last;
  out.m = project(tap);
  return out;
}

FusedContext FusionBridge::fuse_with_gates(const model::LayerTaps& taps,
                                           const nc::Tensor& fixed_gates) const {
  check_taps(taps, d_mmfm_);
  const int L = taps.seq_len();
  if (fixed_gates.rows() != L || fixed_gates.cols() != 3) {
    throw ShapeError("gates must be [" + std::to_string(L) + "x3]");
  }
  nc::Tensor mixed = nc::add(
      nc::add(nc::row_scale(taps.first, nc::slice(fixed_gates, 0, L, 0, 1)),
              nc::row_scale(taps.mid, nc::slice(fixed_gates, 0, L, 1, 2))),
      nc::row_scale(taps.last, nc::slice(fixed_gates, 0, L, 2, 3)));
  FusedContext out;
  out.gates = fixed_gates;
  out.m = project(mixed);
  return out;
}

std::vector<std::pair<std::string, nc::Tensor>> FusionBridge::named_parameters()
    const {
  return {{"w_gate", w_gate_},
          {"mlp.w1", mlp_w1_},
          {"mlp.b1", mlp_b1_},
          {"mlp.w2", mlp_w2_},
          {"mlp.b2", mlp_b2_}};
}

void FusionBridge::load_tensors(const std::map<std::string, nc::Tensor>& named,
                                const std::string& prefix) {
  for (auto& [name, t] : named_parameters()) {
    auto it = named.find(prefix + name);
    if (it == named.end()) {
      throw IoError("checkpoint missing tensor '" + prefix + name + "'");
    }
    if (it->second.rows() != t.rows() || it->second.cols() != t.cols()) {
      throw IoError("checkpoint tensor '" + prefix + name + "' shape mismatch");
    }
    nc::Tensor dst(t);
    dst.data() = it->second.data();
  }
}

nc::Tensor concat_multimodal(const FusedContext& fused,
                             const model::TransformerLM& lm,
                             const std::vector<int>& text_tokens) {
  const int L_m = fused.m.rows();
  for (int id : text_tokens) {
    if (id < 0 || id >= lm.config().vocab_size) {
      throw ShapeError("token id " + std::to_string(id) +
                       " outside translation model vocabulary");
    }
  }
  const int total = L_m + static_cast<int>(text_tokens.size());
  if (total > lm.config().max_seq_len) {
    throw LengthError("combined length " + std::to_string(total) +
                      " exceeds max_seq_len " +
                      std::to_string(lm.config().max_seq_len));
  }
  if (L_m == 0) return lm.embed(text_tokens, 0);
  nc::Tensor prefix = lm.add_positions(fused.m, 0);
  if (text_tokens.empty()) return prefix;
  return nc::concat_rows(prefix, lm.embed(text_tokens, L_m));
}

std::vector<GateStats> gate_statistics(
    const model::MultimodalEncoder& encoder, const FusionBridge& bridge,
    const std::vector<model::ModalityPayload>& slice) {
  if (bridge.variant() != FusionVariant::kGated) {
    throw ConfigError("gate statistics require the gated fusion variant, got " +
                      variant_to_string(bridge.variant()));
  }
  if (slice.empty()) throw DataError("gate statistics over an empty slice");
  std::map<std::string, GateStats> by_combo;
  for (const auto& payload : slice) {
    FusedContext ctx = bridge.fuse(encoder.forward(payload));
    auto& st = by_combo[payload.combo()];
    st.modality_combo = payload.combo();
    for (int r = 0; r < ctx.gates.rows(); ++r) {
      for (int k = 0; k < 3; ++k) st.mean_gate[k] += ctx.gates.at(r, k);
      ++st.n_timesteps;
    }
  }
  std::vector<GateStats> out;
  for (auto& [combo, st] : by_combo) {
    for (int k = 0; k < 3; ++k) st.mean_gate[k] /= st.n_timesteps;
    out.push_back(st);
  }
  return out;
}

std::string gate_stats_csv(const std::vector<GateStats>& stats) {
  std::ostringstream os;
  os << "modality_combo,layer,mean_gate,n_timesteps\n";
  static const char* layers[3] = {"first", "mid", "last"};
  for (const auto& st : stats) {
    for (int k = 0; k < 3; ++k) {
      os << st.modality_combo << ',' << layers[k] << ',' << fmt6(st.mean_gate[k])
         << ',' << st.n_timesteps << '\n';
    }
  }
  return os.str();
}

}  // namespace mmfuse::fusion

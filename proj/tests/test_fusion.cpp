// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include <cmath>
#include <map>

#include "grad_check.hpp"
#include "mmfuse/fusion.hpp"
#include "mmfuse/model.hpp"

namespace nc = mmfuse::numcore;
namespace model = mmfuse::model;
namespace fusion = mmfuse::fusion;
using mmfuse::Rng;

static model::LayerTaps random_taps(int L, int D, Rng& rng) {
  model::LayerTaps t;
  t.first = nc::Tensor::randn(L, D, rng);
  t.mid = nc::Tensor::randn(L, D, rng);
  t.last = nc::Tensor::randn(L, D, rng);
  return t;
}

TEST_CASE("zero gate weights give exactly uniform gates") {
  Rng rng(1);
  fusion::FusionBridge bridge(6, 10, fusion::FusionVariant::kGated, rng);
  model::LayerTaps taps = random_taps(7, 6, rng);
  fusion::FusedContext ctx = bridge.fuse(taps);
  REQUIRE(ctx.gates.rows() == 7);
  for (int r = 0; r < 7; ++r) {
    for (int k = 0; k < 3; ++k) {
      CHECK(ctx.gates.at(r, k) == 1.0 / 3.0);
    }
  }
  CHECK(ctx.m.rows() == 7);
  CHECK(ctx.m.cols() == 10);

  // with uniform gates the mixed input is the plain mean of the three taps
  nc::Tensor mean = nc::scale(
      nc::add(nc::add(taps.first, taps.mid), taps.last), 1.0 / 3.0);
  model::LayerTaps same;
  same.first = mean;
  same.mid = mean;
  same.last = mean;
  fusion::FusedContext via_mean = bridge.fuse(same);
  for (int i = 0; i < ctx.m.numel(); ++i) {
    CHECK(ctx.m.data()[i] == doctest::Approx(via_mean.m.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("identical taps are a fixed point of the convex mixture") {
  Rng rng(2);
  fusion::FusionBridge bridge(5, 8, fusion::FusionVariant::kGated, rng);
  // random gate weights so the gates are far from uniform
  for (auto& v : bridge.gate_weights().data()) v = rng.normal();
  nc::Tensor h = nc::Tensor::randn(6, 5, rng);
  model::LayerTaps taps;
  taps.first = h;
  taps.mid = h;
  taps.last = h;
  fusion::FusedContext gated = bridge.fuse(taps);
  // one-hot gates pass h straight through; convexity must give the same m
  nc::Tensor onehot = nc::Tensor::zeros(6, 3);
  for (int r = 0; r < 6; ++r) onehot.at(r, 0) = 1.0;
  fusion::FusedContext direct = bridge.fuse_with_gates(taps, onehot);
  for (int i = 0; i < gated.m.numel(); ++i) {
    CHECK(gated.m.data()[i] == doctest::Approx(direct.m.data()[i]).epsilon(1e-9));
  }
}

TEST_CASE("gated fusion matches a straight-loop recomputation") {
  Rng rng(3);
  const int L = 5, D = 4, DT = 6;
  fusion::FusionBridge bridge(D, DT, fusion::FusionVariant::kGated, rng);
  for (auto& v : bridge.gate_weights().data()) v = rng.normal() * 0.7;
  model::LayerTaps taps = random_taps(L, D, rng);
  fusion::FusedContext ctx = bridge.fuse(taps);

  // independent scalar-loop pipeline over the raw buffers
  std::map<std::string, nc::Tensor> params;
  for (auto& [n, t] : bridge.named_parameters()) params.emplace(n, t);
  const nc::Tensor& wg = params.at("w_gate");
  const nc::Tensor& w1 = params.at("mlp.w1");
  const nc::Tensor& b1 = params.at("mlp.b1");
  const nc::Tensor& w2 = params.at("mlp.w2");
  const nc::Tensor& b2 = params.at("mlp.b2");
  const int H = w1.cols();
  for (int t = 0; t < L; ++t) {
    double z[3 * 4];
    for (int d = 0; d < D; ++d) {
      z[d] = taps.first.at(t, d);
      z[D + d] = taps.mid.at(t, d);
      z[2 * D + d] = taps.last.at(t, d);
    }
    double logits[3];
    for (int k = 0; k < 3; ++k) {
      logits[k] = 0;
      for (int c = 0; c < 3 * D; ++c) logits[k] += wg.at(k, c) * z[c];
    }
    double mx = std::max({logits[0], logits[1], logits[2]});
    double g[3], zsum = 0;
    for (int k = 0; k < 3; ++k) {
      g[k] = std::exp(logits[k] - mx);
      zsum += g[k];
    }
    for (int k = 0; k < 3; ++k) g[k] /= zsum;
    for (int k = 0; k < 3; ++k) {
      CHECK(ctx.gates.at(t, k) == doctest::Approx(g[k]).epsilon(1e-12));
    }
    std::vector<double> mixed(D);
    for (int d = 0; d < D; ++d) {
      mixed[d] = g[0] * taps.first.at(t, d) + g[1] * taps.mid.at(t, d) +
                 g[2] * taps.last.at(t, d);
    }
    std::vector<double> hid(H);
    for (int j = 0; j < H; ++j) {
      double acc = b1.at(0, j);
      for (int d = 0; d < D; ++d) acc += mixed[d] * w1.at(d, j);
      hid[j] = 0.5 * acc * (1.0 + std::erf(acc * 0.7071067811865475244));
    }
    for (int o = 0; o < DT; ++o) {
      double acc = b2.at(0, o);
      for (int j = 0; j < H; ++j) acc += hid[j] * w2.at(j, o);
      CHECK(ctx.m.at(t, o) == doctest::Approx(acc).epsilon(1e-9));
    }
  }
}

TEST_CASE("gate rows stay on the simplex") {
  Rng rng(4);
  fusion::FusionBridge bridge(8, 8, fusion::FusionVariant::kGated, rng);
  for (auto& v : bridge.gate_weights().data()) v = rng.normal() * 3;
  for (int rep = 0; rep < 20; ++rep) {
    model::LayerTaps taps = random_taps(9, 8, rng);
    fusion::FusedContext ctx = bridge.fuse(taps);
    for (int r = 0; r < ctx.gates.rows(); ++r) {
      double s = 0;
      for (int k = 0; k < 3; ++k) {
        CHECK(ctx.gates.at(r, k) >= 0.0);
        s += ctx.gates.at(r, k);
      }
      CHECK(std::fabs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("permutation consistency of taps and gate weight blocks") {
  Rng rng(5);
  const int D = 4;
  fusion::FusionBridge bridge(D, 5, fusion::FusionVariant::kGated, rng);
  for (auto& v : bridge.gate_weights().data()) v = rng.normal();
  model::LayerTaps taps = random_taps(6, D, rng);
  fusion::FusedContext base = bridge.fuse(taps);

  // rotate the tap slots and permute W_gate rows and column blocks alike
  Rng rng2(6);
  fusion::FusionBridge rot(D, 5, fusion::FusionVariant::kGated, rng2);
  std::map<std::string, nc::Tensor> dst;
  for (auto& [n, t] : bridge.named_parameters()) dst.emplace(n, t);
  rot.load_tensors(dst, "");
  const int perm[3] = {1, 2, 0};  // slot k of the rotated bridge holds tap perm[k]
  nc::Tensor& wg = rot.gate_weights();
  const nc::Tensor& orig = bridge.gate_weights();
  for (int k = 0; k < 3; ++k) {
    for (int b = 0; b < 3; ++b) {
      for (int d = 0; d < D; ++d) {
        wg.at(k, b * D + d) = orig.at(perm[k], perm[b] * D + d);
      }
    }
  }
  model::LayerTaps permuted;
  permuted.first = taps.mid;
  permuted.mid = taps.last;
  permuted.last = taps.first;
  fusion::FusedContext rotated = rot.fuse(permuted);
  for (int i = 0; i < base.m.numel(); ++i) {
    CHECK(rotated.m.data()[i] == doctest::Approx(base.m.data()[i]).epsilon(1e-10));
  }
  for (int r = 0; r < base.gates.rows(); ++r) {
    for (int k = 0; k < 3; ++k) {
      CHECK(rotated.gates.at(r, k) ==
            doctest::Approx(base.gates.at(r, perm[k])).epsilon(1e-10));
    }
  }
}

TEST_CASE("single-layer variants equal gated computation with one-hot gates") {
  Rng rng(7);
  fusion::FusionBridge gated(5, 7, fusion::FusionVariant::kGated, rng);
  std::map<std::string, nc::Tensor> shared;
  for (auto& [n, t] : gated.named_parameters()) shared.emplace(n, t);

  struct Case {
    fusion::FusionVariant variant;
    int hot;
  };
  for (Case c : {Case{fusion::FusionVariant::kFirstOnly, 0},
                 Case{fusion::FusionVariant::kMidOnly, 1},
                 Case{fusion::FusionVariant::kLastOnly, 2}}) {
    Rng r2(8);
    fusion::FusionBridge variant(5, 7, c.variant, r2);
    variant.load_tensors(shared, "");
    model::LayerTaps taps = random_taps(6, 5, rng);
    fusion::FusedContext via_variant = variant.fuse(taps);
    nc::Tensor onehot = nc::Tensor::zeros(6, 3);
    for (int row = 0; row < 6; ++row) onehot.at(row, c.hot) = 1.0;
    fusion::FusedContext via_gates = gated.fuse_with_gates(taps, onehot);
    for (int i = 0; i < via_variant.m.numel(); ++i) {
      CHECK(via_variant.m.data()[i] == via_gates.m.data()[i]);
    }
  }
}

TEST_CASE("width mismatch raises shape error") {
  Rng rng(9);
  fusion::FusionBridge bridge(6, 6, fusion::FusionVariant::kGated, rng);
  model::LayerTaps taps = random_taps(4, 5, rng);
  CHECK_THROWS_AS(bridge.fuse(taps), mmfuse::ShapeError);
}

TEST_CASE("concat_multimodal lengths, degenerate prefix and length cap") {
  Rng rng(10);
  model::TransformerConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 6;
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.d_ff = 8;
  cfg.max_seq_len = 16;
  model::TransformerLM lm(cfg, rng, false);
  fusion::FusionBridge bridge(4, 6, fusion::FusionVariant::kGated, rng);

  model::LayerTaps taps = random_taps(5, 4, rng);
  fusion::FusedContext fused = bridge.fuse(taps);
  std::vector<int> text = {3, 4, 5, 6, 7, 8, 9};
  nc::Tensor emb = fusion::concat_multimodal(fused, lm, text);
  CHECK(emb.rows() == 5 + 7);
  CHECK(emb.cols() == 6);

  // zero-length prefix reduces to the plain embedding sequence
  fusion::FusedContext empty;
  empty.m = nc::Tensor::zeros(0, 6);
  empty.gates = nc::Tensor::zeros(0, 3);
  nc::Tensor plain = fusion::concat_multimodal(empty, lm, text);
  nc::Tensor direct = lm.embed(text, 0);
  REQUIRE(plain.rows() == direct.rows());
  for (int i = 0; i < plain.numel(); ++i) {
    CHECK(plain.data()[i] == direct.data()[i]);
  }

  std::vector<int> long_text(13, 3);
  CHECK_THROWS_AS(fusion::concat_multimodal(fused, lm, long_text),
                  mmfuse::LengthError);
  std::vector<int> bad_text = {999};
  CHECK_THROWS_AS(fusion::concat_multimodal(fused, lm, bad_text),
                  mmfuse::ShapeError);
}

TEST_CASE("end-to-end differentiability through gates and projector") {
  Rng rng(11);
  model::TransformerConfig enc_cfg;
  enc_cfg.vocab_size = 32;
  enc_cfg.d_model = 6;
  enc_cfg.n_layers = 3;
  enc_cfg.n_heads = 2;
  enc_cfg.d_ff = 8;
  enc_cfg.max_seq_len = 32;
  model::MultimodalEncoder enc(enc_cfg, rng);
  model::TransformerConfig lm_cfg = enc_cfg;
  lm_cfg.d_model = 8;
  lm_cfg.n_heads = 2;
  model::TransformerLM lm(lm_cfg, rng, false);
  fusion::FusionBridge bridge(6, 8, fusion::FusionVariant::kGated, rng);
  // move gates off the uniform point so gate gradients are informative
  for (auto& v : bridge.gate_weights().data()) v = rng.normal() * 0.3;

  model::ModalityPayload p;
  p.speech = {25, 26, 27};
  std::vector<int> inp = {10, 11};
  std::vector<int> lbl = {12, 13, mmfuse::vocab::kEos};
  std::vector<int> tokens = inp;
  tokens.insert(tokens.end(), lbl.begin(), lbl.end());

  auto build = [&] {
    fusion::FusedContext fused = bridge.fuse(enc.forward(p));
    const int lm_len = fused.m.rows();
    std::vector<int> labels(lm_len + tokens.size(), 0);
    std::vector<bool> mask(lm_len + tokens.size(), false);
    for (size_t k = 0; k < lbl.size(); ++k) {
      labels[lm_len + inp.size() - 1 + k] = lbl[k];
      mask[lm_len + inp.size() - 1 + k] = true;
    }
    return lm.loss(fusion::concat_multimodal(fused, lm, tokens), labels, mask);
  };
  std::vector<nc::Tensor> params;
  for (auto& [n, t] : bridge.named_parameters()) params.push_back(t);
  auto res = gradcheck::check_loss(build, params);
  CHECK(res.max_rel_err < 1e-4);

  // gradient of the loss w.r.t. the gate weights is nonzero
  nc::GradTape tape;
  {
    nc::TapeScope scope(tape);
    nc::backward(build());
  }
  const auto* g = bridge.gate_weights().grad();
  REQUIRE(g != nullptr);
  double norm = 0;
  for (double v : *g) norm += v * v;
  CHECK(norm > 0.0);
}

TEST_CASE("gate statistics per modality combination") {
  Rng rng(12);
  model::TransformerConfig cfg;
  cfg.vocab_size = 32;
  cfg.d_model = 6;
  cfg.n_layers = 3;
  cfg.n_heads = 2;
  cfg.d_ff = 8;
  cfg.max_seq_len = 48;
  model::MultimodalEncoder enc(cfg, rng);
  fusion::FusionBridge bridge(6, 6, fusion::FusionVariant::kGated, rng);

  model::ModalityPayload speech;
  speech.speech = {25, 26, 27, 28};
  model::ModalityPayload both = speech;
  both.image = {{29, 30}, {31, 28}};
  model::ModalityPayload image;
  image.image = both.image;
  image.text = {25, 26};

  auto stats = fusion::gate_statistics(enc, bridge, {speech, both, image, speech});
  CHECK(stats.size() == 3);
  for (const auto& st : stats) {
    double s = st.mean_gate[0] + st.mean_gate[1] + st.mean_gate[2];
    CHECK(std::fabs(s - 1.0) < 1e-6);
    CHECK(st.n_timesteps > 0);
    for (int k = 0; k < 3; ++k) {
      CHECK(st.mean_gate[k] >= 0.0);
      CHECK(st.mean_gate[k] <= 1.0);
    }
  }
  // zero gate weights: every mean is exactly 1/3
  for (auto& v : bridge.gate_weights().data()) v = 0.0;
  auto uniform = fusion::gate_statistics(enc, bridge, {speech});
  REQUIRE(uniform.size() == 1);
  for (int k = 0; k < 3; ++k) CHECK(uniform[0].mean_gate[k] == 1.0 / 3.0);

  CHECK_THROWS_AS(fusion::gate_statistics(enc, bridge, {}), mmfuse::DataError);
  Rng r2(13);
  fusion::FusionBridge mid(6, 6, fusion::FusionVariant::kMidOnly, r2);
  CHECK_THROWS_AS(fusion::gate_statistics(enc, mid, {speech}), mmfuse::ConfigError);

  std::string csv = fusion::gate_stats_csv(stats);
  CHECK(csv.find("modality_combo,layer,mean_gate,n_timesteps") == 0);
  CHECK(csv.find("speech+image") != std::string::npos);
}

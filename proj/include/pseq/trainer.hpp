#pragma once

#include <filesystem>
#include <random>

#include "pseq/checkpoint.hpp"
#include "pseq/losses.hpp"
#include "pseq/network.hpp"
#include "pseq/optimizer.hpp"

namespace pseq {

template <typename T>
struct TrainStepResult {
  double total = 0, focal = 0, loc = 0, ang = 0, aux = 0;
  int warmups = 0;
  bool skipped = false;
};

/// The recurrent training cycle: k warm-up scans populate the hidden state
/// (output ignored, gradient cut unless backprop_through_warmup), then the
/// core frame runs a full pass and the summed loss is backpropagated.
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, const LossConfig& loss_cfg, const AdamWConfig& opt_cfg, uint64_t seed,
          bool backprop_through_warmup = false)
      : model_(model),
        loss_cfg_(loss_cfg),
        opt_(model.params(), opt_cfg),
        rng_(seed),
        bptt_(backprop_through_warmup) {
    loss_cfg.validate();
    head_grid_ = model.config().grid.at_stride(model.config().grid.output_stride);
  }

  AdamW<T>& optimizer() { return opt_; }

  TrainStepResult<T> step(const Sequence& seq) {
    TrainStepResult<T> res;
    const int available = seq.past_count();
    const int lo = std::min(loss_cfg_.k_min, available);
    const int hi = std::min(loss_cfg_.k_max, available);
    res.warmups = lo >= hi ? lo : std::uniform_int_distribution<int>(lo, hi)(rng_);

    TargetMaps<T> targets = build_targets<T>(seq.annotations, head_grid_);
    int64_t usable = 0;
    for (size_t i = 0; i < targets.unclear.size(); ++i) usable += targets.unclear[i] ? 0 : 1;
    if (usable == 0) {  // every cell masked out: nothing to learn from
      res.skipped = true;
      ++skipped_;
      return res;
    }

    model_.params().zero_grads();
    auto tf = model_.train_forward(seq, res.warmups, bptt_);

    const auto dims = tf.out.class_probs.shape();  // (1, h, w, 4)
    auto focal = focal_loss(tf.out.class_probs, targets.class_onehot, targets.unclear, loss_cfg_.focal_alpha,
                            loss_cfg_.focal_gamma, loss_cfg_.class_weights);

    // location + size against the first six regression channels, delta 1
    Tensor<T> locsize_pred = concat_channels(tf.out.location, tf.out.size);
    Tensor<T> locsize_tgt({dims[1], dims[2], 6});
    Tensor<T> angle_tgt({dims[1], dims[2], 2});
    for (int64_t i = 0; i < locsize_tgt.size() / 6; ++i) {
      for (int c = 0; c < 6; ++c) locsize_tgt[i * 6 + c] = targets.regression[i * kRegChannels + c];
      for (int c = 0; c < 2; ++c) angle_tgt[i * 2 + c] = targets.regression[i * kRegChannels + 6 + c];
    }
    auto loc = huber_loss(locsize_pred, locsize_tgt, targets.foreground, loss_cfg_.huber_delta_loc);
    auto ang = huber_loss(tf.out.heading, angle_tgt, targets.foreground, loss_cfg_.huber_delta_angle);

    LossResult<T> aux;
    if (tf.aux_used) aux = huber_loss_dense(tf.aux_out, tf.aux_target, 1.0);

    res.focal = focal.value;
    res.loc = loc.value;
    res.ang = ang.value;
    res.aux = tf.aux_used ? aux.value : 0.0;
    res.total = res.focal + loss_cfg_.w_loc * res.loc + loss_cfg_.w_ang * res.ang +
                (tf.aux_used ? loss_cfg_.lambda_aux * res.aux : 0.0);

    HeadGrads<T> dhead;
    dhead.dclass_probs = std::move(focal.grad);
    dhead.dlocation = Tensor<T>(tf.out.location.shape());
    dhead.dsize = Tensor<T>(tf.out.size.shape());
    for (int64_t i = 0; i < dhead.dlocation.size() / 3; ++i) {
      for (int c = 0; c < 3; ++c) {
        dhead.dlocation[i * 3 + c] = static_cast<T>(loss_cfg_.w_loc) * loc.grad[i * 6 + c];
        dhead.dsize[i * 3 + c] = static_cast<T>(loss_cfg_.w_loc) * loc.grad[i * 6 + 3 + c];
      }
    }
    dhead.dheading = Tensor<T>(tf.out.heading.shape());
    for (int64_t i = 0; i < dhead.dheading.size(); ++i)
      dhead.dheading[i] = static_cast<T>(loss_cfg_.w_ang) * ang.grad[i];

    Tensor<T> daux;
    if (tf.aux_used) {
      daux = Tensor<T>(tf.aux_out.shape());
      for (int64_t i = 0; i < daux.size(); ++i)
        daux[i] = static_cast<T>(loss_cfg_.lambda_aux) * aux.grad[i];
    }
    model_.train_backward(tf, dhead, daux);
    opt_.step();
    return res;
  }

  int64_t skipped_batches() const { return skipped_; }

 private:
  Model<T>& model_;
  LossConfig loss_cfg_;
  AdamW<T> opt_;
  std::mt19937_64 rng_;
  bool bptt_;
  GridSpec head_grid_;
  int64_t skipped_ = 0;
};

/// Copies same-named weights from a single-frame checkpoint, then freezes the
/// pillar encoder and the backbone's downsampling stages. Missing keys (e.g.
/// a checkpoint without recurrent weights) stay at fresh initialization.
template <typename T>
LoadReport transfer_weights(Model<T>& model, const std::filesystem::path& checkpoint) {
  LoadReport report = load_checkpoint(checkpoint, model.params(), /*strict=*/false);
  model.params().freeze_prefix("encoder/");
  model.params().freeze_prefix("backbone/down");
  return report;
}

}  // namespace pseq

#pragma once

#include <array>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokman/corpus.hpp"
#include "tokman/model.hpp"
#include "tokman/rng.hpp"

namespace tokman::train {

struct ModelDims {
  int d_emb = 32;
  int d_hid = 64;
  int d_idx = 8;
  int idx_clamp = 32;
};

struct TrainConfig {
  int mle_epochs = 80;
  int gan_epochs = 200;
  int batch_size = 32;
  double mask_rate_lo = 0.25;
  double mask_rate_hi = 1.0;
  double gamma = 0.95;
  double lr_generator = 1e-3;
  double lr_discriminator = 1e-3;
  double lr_critic = 1e-3;
  int max_len = 20;
  double train_temperature = 1.0;
  uint64_t seed = 1;
  double dropout_rate = 0.0;   // exploration dropout during adversarial rollouts
  int d_steps_per_g = 1;
  ModelDims model;
  bool normalize_advantages = true;
  bool mutual_weighting = true;
  double grad_clip = 5.0;
  int checkpoint_every = 0;    // adversarial epochs between dumps; 0 = none
};

// Strict parse: unknown keys anywhere are rejected.
TrainConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json config_to_json(const TrainConfig& cfg);

// Adam moments per tensor, kept alongside the model so interrupted runs
// resume bit-for-bit.
struct OptimState {
  std::array<std::vector<double>, static_cast<size_t>(kNumSlots)> m, v;
  std::array<int64_t, static_cast<size_t>(kNumSlots)> steps{};

  static OptimState for_model(const Model& model);
};

// Scales accumulated gradients by `scale`, clips their global norm over
// `slots`, then applies one Adam update with the given learning rate.
void apply_update(Model& model, OptimState& opt, std::span<const Slot> slots,
                  double lr, double scale, double clip_norm);

struct TrainerState {
  Model model;
  Rng rng;
  OptimState opt;
  int mle_epochs_done = 0;
  int gan_epochs_done = 0;
  int gan_steps_done = 0;
};

TrainerState make_trainer(const TrainConfig& cfg, int vocab_size, int bos_id,
                          int eos_id, uint64_t vocab_hash);

// Teacher-forced maximum-likelihood pretraining on masked-target pairs.
// Runs until cfg.mle_epochs epochs are done; logs {"epoch", "nll"} lines.
// Returns mean per-target-step NLL for each epoch run.
std::vector<double> pretrain_mle(const TrainConfig& cfg,
                                 const std::vector<Sentence>& sentences,
                                 TrainerState& state, std::ostream* log);

struct AdvTrainHooks {
  std::string checkpoint_dir;  // periodic checkpoint/sample dumps land here
  const Vocabulary* vocab = nullptr;
  int workers = 1;
};

// Alternating generator / critic / discriminator updates on sampled
// rollouts. Logs one JSON line per update step with
// {step, loss_G, loss_D, loss_critic, mean_reward, mean_advantage}.
void adversarial_train(const TrainConfig& cfg, const std::vector<Sentence>& sentences,
                       TrainerState& state, std::ostream* log,
                       const AdvTrainHooks& hooks = {});

// Trainer checkpoints reuse the model checkpoint format and append the
// optimizer moments as extra declared arrays, so a resumed run continues
// exactly where the interrupted one stopped.
void save_trainer(const TrainerState& state, const std::string& path);
TrainerState load_trainer(const std::string& path);

}  // namespace tokman::train

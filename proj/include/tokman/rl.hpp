#pragma once

#include <array>
#include <span>
#include <vector>

#include "tokman/genmachine.hpp"
#include "tokman/model.hpp"
#include "tokman/tape.hpp"

namespace tokman::rl {

// Traces plus per-step reward/return/baseline/advantage arrays, all indexed
// by machine step (pass steps included, with zero immediate reward).
struct RolloutBatch {
  std::vector<ManipulationTrace> traces;
  std::vector<std::vector<double>> rewards;
  std::vector<std::vector<double>> returns;
  std::vector<std::vector<double>> baselines;
  std::vector<std::vector<double>> advantages;
  double gamma = 0.95;
};

// Per-step rewards from per-emission discriminator probabilities: emitting
// steps get log D at their emitted position, pass steps get 0.
std::vector<double> step_rewards(std::span<const double> disc_probs,
                                 const ManipulationTrace& trace);

// Backward recursion R_t = r_t + gamma * R_{t+1}.
std::vector<double> discounted_returns(std::span<const double> rewards, double gamma);

// Split of the 4-way action distribution into the binary mint-a-token gate
// and the conditional choice within the sampled branch. The identity
// log p(a) = log_gate + log_cond holds exactly.
struct HierSplit {
  double log_gate = 0.0;
  double log_cond = 0.0;
  int mint = 0;  // 1 when the action mints a fresh token
};

HierSplit hierarchical_logprobs(const std::array<double, 4>& p_man, Action action);

// Builds rewards/returns/baselines/advantages for sampled traces by scoring
// each emitted sequence with the discriminator. Baselines come from the
// critic values recorded during the rollout. With standardize_advantages,
// advantages are shifted/scaled to zero mean and unit variance across the
// whole batch.
RolloutBatch build_rollout_batch(Model& model, std::vector<ManipulationTrace> traces,
                                 double gamma, bool standardize_advantages);

struct SurrogateOptions {
  // Weight each score term by the evaluated probability of the concurrent
  // choice of the other sub-policy (the mutual-weighting scheme). With false,
  // all weights are 1 and the surrogate's expected gradient equals the exact
  // gradient of the expected return.
  bool mutual_weighting = true;
};

// Scalar ascent objective whose gradient is the policy-gradient estimator:
// per step, the advantage (discounted by the step's position) multiplies the
// log-probabilities of the minted token, of the mint/no-mint gate, and of
// the conditional action choice. Advantages, baselines and all mutual
// weights enter as evaluated constants.
//
// htilde_out, when given, receives the combined hidden state values per
// trace/step for reuse by critic_loss.
Tape::Id generator_surrogate(Tape& tape, Model& model, const RolloutBatch& batch,
                             const SurrogateOptions& opts = {},
                             std::vector<std::vector<std::vector<double>>>* htilde_out = nullptr);

// Mean squared error between critic predictions and returns. The hidden
// states enter as constants so the gradient reaches only the critic head.
Tape::Id critic_loss(Tape& tape, Model& model, const RolloutBatch& batch,
                     const std::vector<std::vector<std::vector<double>>>& htilde);
Tape::Id critic_loss(Tape& tape, Model& model, const RolloutBatch& batch);

struct ScoredSeq {
  std::vector<int> seed;
  std::vector<int> y;  // token ids as the discriminator sees them
};

// Minimization objective: -(1/m) sum_i [ sum_t log D(real_i_t)
//                                      + sum_t log(1 - D(fake_i_t)) ].
Tape::Id discriminator_loss(Tape& tape, Model& model,
                            std::span<const ScoredSeq> real,
                            std::span<const ScoredSeq> fake);

}  // namespace tokman::rl

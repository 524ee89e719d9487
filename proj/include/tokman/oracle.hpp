#pragma once

#include <functional>
#include <vector>

#include "tokman/genmachine.hpp"
#include "tokman/model.hpp"

namespace tokman::oracle {

// Hard bounds on instances accepted by the exact computations. Exceeding
// them is an error: a truncated enumeration would be worse than none.
struct EnumLimits {
  int max_vocab = 5;
  int max_len = 4;
  int max_seed = 2;
};

struct EnumeratedTrace {
  std::vector<Action> actions;
  std::vector<int> tokens;    // minted token per add/replace, in order
  std::vector<int> emitted;   // non-null emissions, including a terminal EOS
  double log_prob = 0.0;
  double prob = 0.0;
  double ret = 0.0;           // discounted return when a reward fn was given
};

// r(state-before, action, emission); emission is kNullToken for pass.
using RewardFn =
    std::function<double(const GenState&, Action, int)>;

// Exhaustive depth-first expansion of every (action, token) choice, with
// termination handling identical to generate(). Probabilities over the full
// set sum to 1 by construction; that property is what callers verify.
std::vector<EnumeratedTrace> enumerate_traces(Model& model, const SeedSequence& seed,
                                              int max_len,
                                              const EnumLimits& limits = {},
                                              const RewardFn* reward = nullptr,
                                              double gamma = 1.0);

struct ValueRoutes {
  double recursion = 0.0;    // gate/conditional decomposition, memoized
  double enumeration = 0.0;  // sum over enumerated traces of prob * return
};

// Start-state value by both routes. Throws if they disagree beyond 1e-9.
ValueRoutes exact_value(Model& model, const SeedSequence& seed, int max_len,
                        const RewardFn& reward, double gamma,
                        const EnumLimits& limits = {});

// Gradient of sum over traces of prob * return, differentiating through the
// trace probabilities. Accumulates into the model's gradient buffers
// (call zero_grads() first). Returns the expected return.
double exact_policy_gradient(Model& model, const SeedSequence& seed, int max_len,
                             const RewardFn& reward, double gamma,
                             const EnumLimits& limits = {});

}  // namespace tokman::oracle

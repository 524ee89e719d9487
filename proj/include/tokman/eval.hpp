#pragma once

#include <array>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tokman/corpus.hpp"
#include "tokman/model.hpp"
#include "tokman/rng.hpp"

namespace tokman::eval {

constexpr double kBleuEpsilon = 1e-9;

// Sentence BLEU against the whole reference set: geometric mean of modified
// n-gram precisions for orders 1..n (zero counts floored at kBleuEpsilon)
// times a brevity penalty against the closest reference length (ties toward
// the shorter). Empty hypotheses score 0.
double sentence_bleu(const Sentence& hyp, const std::vector<Sentence>& refs, int n);

// Mean sentence BLEU over the hypotheses.
double bleu(const std::vector<Sentence>& hyps, const std::vector<Sentence>& refs, int n);

// Mean over samples of BLEU against the other samples. Higher means less
// diverse. Requires at least two samples.
double self_bleu(const std::vector<Sentence>& samples, int n);

struct QualityDiversityPoint {
  std::string mode;                 // "unconditional" or "conditional"
  std::optional<double> mask_rate;  // set in conditional mode
  double temperature = 1.0;
  std::array<double, 4> bleu_n{};                      // orders 2..5
  std::array<std::optional<double>, 4> self_bleu_n{};  // null when < 2 samples
  int samples = 0;
};

struct SweepConditioning {
  bool unconditional = true;
  double mask_rate = 0.25;
  // Source sentences: seeds are extracted from them in conditional mode and
  // they serve as the BLEU reference set in both modes.
  const std::vector<Sentence>* pool = nullptr;
};

struct SweepSample {
  Sentence sentence;
  std::vector<int> seed;
};

struct SweepResult {
  std::vector<QualityDiversityPoint> points;  // sorted by temperature
  // per temperature (same order as points): the generated samples
  std::vector<std::pair<double, std::vector<SweepSample>>> samples;
};

SweepResult temperature_sweep(Model& model, std::span<const double> temps,
                              const SweepConditioning& cond, int sample_count,
                              int max_len, Rng& rng, int workers = 1);

// CSV with columns: mode,mask_rate,temperature,n,bleu,self_bleu,samples.
// One row per (temperature, order); undefined self-BLEU prints as `null`.
std::string sweep_csv(std::span<const QualityDiversityPoint> points);

// One line per sample: generated sentence, a tab, then the seed tokens.
void write_samples(const std::vector<SweepSample>& samples, const Vocabulary& vocab,
                   const std::string& path);

}  // namespace tokman::eval

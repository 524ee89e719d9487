#include "tokman/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace tokman {

namespace {

const char* kReservedSurfaces[kNumReserved] = {"<pad>", "<bos>", "<eos>", "<unk>"};

std::string lowercase(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

}  // namespace

Vocabulary::Vocabulary() {
  for (const char* s : kReservedSurfaces) {
    index_.emplace(s, static_cast<int>(tokens_.size()));
    tokens_.push_back(s);
  }
}

Vocabulary Vocabulary::build(const std::vector<std::vector<std::string>>& sentences) {
  std::unordered_map<std::string, int64_t> freq;
  for (const auto& s : sentences)
    for (const auto& w : s) ++freq[w];

  std::vector<std::pair<std::string, int64_t>> order(freq.begin(), freq.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary v;
  for (const auto& [word, count] : order) {
    (void)count;
    v.index_.emplace(word, static_cast<int>(v.tokens_.size()));
    v.tokens_.push_back(word);
  }
  return v;
}

const std::string& Vocabulary::surface(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("Vocabulary::surface: bad id");
  return tokens_[id];
}

int Vocabulary::id(const std::string& surface) const {
  auto it = index_.find(surface);
  return it == index_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(const std::string& surface) const {
  return index_.count(surface) != 0;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("Vocabulary::save: cannot open " + path);
  for (int i = kNumReserved; i < size(); ++i) out << tokens_[i] << '\n';
  if (!out) throw std::runtime_error("Vocabulary::save: write failed: " + path);
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("Vocabulary::load: cannot open " + path);
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (v.index_.count(line))
      throw std::runtime_error("Vocabulary::load: duplicate surface '" + line + "'");
    v.index_.emplace(line, static_cast<int>(v.tokens_.size()));
    v.tokens_.push_back(line);
  }
  return v;
}

uint64_t Vocabulary::hash() const {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    h ^= '\n';
    h *= 0x100000001b3ull;
  };
  for (const std::string& t : tokens_) mix(t);
  return h;
}

Corpus load_corpus(const std::string& path, const std::optional<Vocabulary>& vocab,
                   int max_len) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path);

  std::vector<std::vector<std::string>> retained;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> toks = split_tokens(lowercase(line));
    if (toks.empty()) continue;
    if (static_cast<int>(toks.size()) > max_len) continue;
    if (vocab) {
      bool all_known = std::all_of(toks.begin(), toks.end(),
                                   [&](const std::string& w) { return vocab->contains(w); });
      if (!all_known) continue;
    }
    retained.push_back(std::move(toks));
  }
  if (retained.empty()) throw std::runtime_error("load_corpus: empty corpus after filtering");

  Corpus c;
  c.vocab = vocab ? *vocab : Vocabulary::build(retained);
  c.sentences.reserve(retained.size());
  for (const auto& toks : retained) {
    Sentence s;
    s.reserve(toks.size());
    for (const auto& w : toks) s.push_back(c.vocab.id(w));
    c.sentences.push_back(std::move(s));
  }
  return c;
}

void save_corpus(const std::vector<Sentence>& sentences, const Vocabulary& vocab,
                 const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_corpus: cannot open " + path);
  for (const Sentence& s : sentences) {
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out << ' ';
      out << vocab.surface(s[i]);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("save_corpus: write failed: " + path);
}

MaskSpec sample_mask(int length, double rate, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("sample_mask: rate outside [0, 1]");
  MaskSpec m;
  m.rate = rate;
  m.bits.resize(length);
  for (int i = 0; i < length; ++i) m.bits[i] = rng.bernoulli(rate) ? 1 : 0;
  return m;
}

SeedSequence extract_seed(const Sentence& sentence, const MaskSpec& mask) {
  if (sentence.size() != mask.bits.size())
    throw std::invalid_argument("extract_seed: sentence/mask length mismatch");
  SeedSequence seed;
  for (size_t i = 0; i < sentence.size(); ++i)
    if (mask.bits[i] == 0) seed.tokens.push_back(sentence[i]);
  seed.idx = 0;
  return seed;
}

SupervisedTarget derive_targets(const Sentence& sentence, const MaskSpec& mask) {
  if (sentence.size() != mask.bits.size())
    throw std::invalid_argument("derive_targets: sentence/mask length mismatch");
  SupervisedTarget t;
  t.actions.reserve(sentence.size());
  for (size_t i = 0; i < sentence.size(); ++i) {
    if (mask.bits[i]) {
      t.actions.push_back(TargetAction::kAdd);
      t.add_tokens.push_back(sentence[i]);
    } else {
      t.actions.push_back(TargetAction::kUse);
    }
  }
  return t;
}

}  // namespace tokman

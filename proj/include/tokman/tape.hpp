#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace tokman {

// External parameter memory with an optional gradient sink. Gradients
// accumulate (+=) into `grad` on backward; pass grad = nullptr to freeze.
struct ParamView {
  const double* value = nullptr;
  double* grad = nullptr;
  int size = 0;
};

// Reverse-mode autodiff over vector-valued nodes, arena-backed.
//
// All model forward passes run through a Tape, whether or not gradients are
// wanted: sampling, scoring and training share one numerical code path.
// A tape built with grad_enabled = false skips gradient bookkeeping and
// rejects backward().
//
// reset() drops all nodes but keeps arena capacity, so a tape can be reused
// across many episodes without reallocating.
class Tape {
 public:
  using Id = int32_t;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  size_t node_count() const { return nodes_.size(); }

  void reset();

  // ---- leaves ----
  Id constant(std::span<const double> v);
  Id constant(double v);
  Id param(const ParamView& p);

  // ---- elementwise / linear algebra ----
  Id matvec(Id w, int rows, int cols, Id x);  // w is a rows*cols node, row-major
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id mul(Id a, Id b);
  Id affine(Id a, double scale, double shift);
  Id concat(std::span<const Id> parts);
  Id slice(Id a, int offset, int len);
  Id tanh(Id a);
  Id sigmoid(Id a);
  Id log(Id a);
  Id exp(Id a);
  Id clamp(Id a, double lo, double hi);

  // ---- categorical machinery ----
  Id softmax(Id a);
  Id log_softmax(Id a);
  // Log-softmax over a subset of entries; entries not listed in `valid` come
  // out as -inf and receive no gradient.
  Id masked_log_softmax(Id a, std::span<const int> valid);
  Id pick(Id a, int k);                              // scalar a[k]
  Id logsumexp_pick(Id a, std::span<const int> idx); // scalar log sum_i exp(a[idx_i])

  // ---- reductions / combinations ----
  Id dot(Id a, Id b);
  Id stack(std::span<const Id> scalars);
  Id blend(Id weights, std::span<const Id> items);  // sum_i w[i] * item_i
  Id weighted_sum(std::span<const Id> scalars, std::span<const double> coeffs);

  // ---- access ----
  std::span<const double> value(Id id) const;
  double scalar(Id id) const;
  std::span<const double> gradient(Id id) const;  // valid after backward()
  int size(Id id) const { return nodes_[id].n; }

  // Seeds d(root)/d(root) = 1 and propagates to every node that requires a
  // gradient, accumulating into ParamView sinks. `root` must be scalar.
  void backward(Id root);

 private:
  enum class Op : uint8_t {
    kConst, kParam, kMatVec, kAdd, kSub, kMul, kAffine, kConcat, kSlice,
    kTanh, kSigmoid, kLog, kExp, kClamp, kSoftmax, kLogSoftmax,
    kMaskedLogSoftmax, kPick, kLogSumExpPick, kDot, kStack, kBlend,
    kWeightedSum,
  };

  struct Node {
    Op op;
    bool req = false;       // participates in backward
    int n = 0;              // output length
    Id in0 = -1, in1 = -1;
    int multi_off = 0, multi_cnt = 0;  // extra inputs (indices into multi_)
    int aux_off = 0, aux_cnt = 0;      // extra ints (masks, pick sets)
    int coeff_off = 0;                 // extra doubles
    int k = 0;                         // op-specific int (cols, offset, index)
    double x0 = 0.0, x1 = 0.0;         // op-specific doubles
    int voff = -1;                     // value offset into buf_ (-1: external)
    const double* vext = nullptr;
    int goff = -1;                     // grad offset into gbuf_ (-1: external/none)
    double* gext = nullptr;
  };

  Id push(Node n);
  const double* val(const Node& n) const {
    return n.vext ? n.vext : buf_.data() + n.voff;
  }
  double* grad(const Node& n) {
    return n.gext ? n.gext : (n.goff >= 0 ? gbuf_.data() + n.goff : nullptr);
  }
  double* alloc_value(Node& n);
  void alloc_grad(Node& n);
  bool wants_grad(Id a) const { return a >= 0 && nodes_[a].req; }
  void check_same_size(Id a, Id b) const;

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::vector<double> buf_;    // values
  std::vector<double> gbuf_;   // gradients
  std::vector<Id> multi_;
  std::vector<int> aux_;
  std::vector<double> coeff_;
};

}  // namespace tokman

#include "tokman/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

namespace tokman {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

void Tape::reset() {
  nodes_.clear();
  buf_.clear();
  gbuf_.clear();
  multi_.clear();
  aux_.clear();
  coeff_.clear();
}

Tape::Id Tape::push(Node n) {
  nodes_.push_back(n);
  return static_cast<Id>(nodes_.size() - 1);
}

double* Tape::alloc_value(Node& n) {
  n.voff = static_cast<int>(buf_.size());
  buf_.resize(buf_.size() + n.n, 0.0);
  return buf_.data() + n.voff;
}

void Tape::alloc_grad(Node& n) {
  if (!grad_enabled_ || !n.req || n.goff >= 0 || n.gext) return;
  n.goff = static_cast<int>(gbuf_.size());
  gbuf_.resize(gbuf_.size() + n.n, 0.0);
}

void Tape::check_same_size(Id a, Id b) const {
  if (nodes_[a].n != nodes_[b].n)
    throw std::invalid_argument("tape: operand size mismatch");
}

Tape::Id Tape::constant(std::span<const double> v) {
  Node n;
  n.op = Op::kConst;
  n.n = static_cast<int>(v.size());
  double* dst = alloc_value(n);
  std::copy(v.begin(), v.end(), dst);
  return push(n);
}

Tape::Id Tape::constant(double v) { return constant(std::span<const double>(&v, 1)); }

Tape::Id Tape::param(const ParamView& p) {
  Node n;
  n.op = Op::kParam;
  n.n = p.size;
  n.vext = p.value;
  if (grad_enabled_ && p.grad != nullptr) {
    n.req = true;
    n.gext = p.grad;
  }
  return push(n);
}

Tape::Id Tape::matvec(Id w, int rows, int cols, Id x) {
  if (nodes_[w].n != rows * cols) throw std::invalid_argument("matvec: bad matrix size");
  if (nodes_[x].n != cols) throw std::invalid_argument("matvec: bad vector size");
  Node n;
  n.op = Op::kMatVec;
  n.n = rows;
  n.in0 = w;
  n.in1 = x;
  n.k = cols;
  n.req = wants_grad(w) || wants_grad(x);
  double* out = alloc_value(n);
  const double* W = val(nodes_[w]);
  const double* X = val(nodes_[x]);
  for (int i = 0; i < rows; ++i) {
    double s = 0.0;
    const double* row = W + static_cast<size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) s += row[j] * X[j];
    out[i] = s;
  }
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::add(Id a, Id b) {
  check_same_size(a, b);
  Node n;
  n.op = Op::kAdd;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.in1 = b;
  n.req = wants_grad(a) || wants_grad(b);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  const double* B = val(nodes_[b]);
  for (int i = 0; i < n.n; ++i) out[i] = A[i] + B[i];
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::sub(Id a, Id b) {
  check_same_size(a, b);
  Node n;
  n.op = Op::kSub;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.in1 = b;
  n.req = wants_grad(a) || wants_grad(b);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  const double* B = val(nodes_[b]);
  for (int i = 0; i < n.n; ++i) out[i] = A[i] - B[i];
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::mul(Id a, Id b) {
  check_same_size(a, b);
  Node n;
  n.op = Op::kMul;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.in1 = b;
  n.req = wants_grad(a) || wants_grad(b);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  const double* B = val(nodes_[b]);
  for (int i = 0; i < n.n; ++i) out[i] = A[i] * B[i];
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::affine(Id a, double scale, double shift) {
  Node n;
  n.op = Op::kAffine;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.x0 = scale;
  n.x1 = shift;
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  for (int i = 0; i < n.n; ++i) out[i] = scale * A[i] + shift;
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::concat(std::span<const Id> parts) {
  Node n;
  n.op = Op::kConcat;
  n.multi_off = static_cast<int>(multi_.size());
  n.multi_cnt = static_cast<int>(parts.size());
  int total = 0;
  for (Id p : parts) {
    multi_.push_back(p);
    total += nodes_[p].n;
    n.req = n.req || wants_grad(p);
  }
  n.n = total;
  double* out = alloc_value(n);
  int at = 0;
  for (Id p : parts) {
    const double* V = val(nodes_[p]);
    std::copy(V, V + nodes_[p].n, out + at);
    at += nodes_[p].n;
  }
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::slice(Id a, int offset, int len) {
  if (offset < 0 || len < 0 || offset + len > nodes_[a].n)
    throw std::invalid_argument("slice: out of range");
  Node n;
  n.op = Op::kSlice;
  n.n = len;
  n.in0 = a;
  n.k = offset;
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  std::copy(A + offset, A + offset + len, out);
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::tanh(Id a) {
  Node n;
  n.op = Op::kTanh;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  for (int i = 0; i < n.n; ++i) out[i] = std::tanh(A[i]);
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::sigmoid(Id a) {
  Node n;
  n.op = Op::kSigmoid;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  for (int i = 0; i < n.n; ++i) out[i] = 1.0 / (1.0 + std::exp(-A[i]));
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::log(Id a) {
  Node n;
  n.op = Op::kLog;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  for (int i = 0; i < n.n; ++i) out[i] = std::log(A[i]);
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::exp(Id a) {
  Node n;
  n.op = Op::kExp;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  for (int i = 0; i < n.n; ++i) out[i] = std::exp(A[i]);
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::clamp(Id a, double lo, double hi) {
  Node n;
  n.op = Op::kClamp;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.x0 = lo;
  n.x1 = hi;
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  for (int i = 0; i < n.n; ++i) out[i] = std::min(hi, std::max(lo, A[i]));
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::softmax(Id a) {
  Node n;
  n.op = Op::kSoftmax;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  double mx = A[0];
  for (int i = 1; i < n.n; ++i) mx = std::max(mx, A[i]);
  double z = 0.0;
  for (int i = 0; i < n.n; ++i) {
    out[i] = std::exp(A[i] - mx);
    z += out[i];
  }
  for (int i = 0; i < n.n; ++i) out[i] /= z;
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::log_softmax(Id a) {
  Node n;
  n.op = Op::kLogSoftmax;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  double mx = A[0];
  for (int i = 1; i < n.n; ++i) mx = std::max(mx, A[i]);
  double z = 0.0;
  for (int i = 0; i < n.n; ++i) z += std::exp(A[i] - mx);
  double lz = mx + std::log(z);
  for (int i = 0; i < n.n; ++i) out[i] = A[i] - lz;
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::masked_log_softmax(Id a, std::span<const int> valid) {
  if (valid.empty()) throw std::invalid_argument("masked_log_softmax: empty mask");
  Node n;
  n.op = Op::kMaskedLogSoftmax;
  n.n = nodes_[a].n;
  n.in0 = a;
  n.aux_off = static_cast<int>(aux_.size());
  n.aux_cnt = static_cast<int>(valid.size());
  for (int i : valid) aux_.push_back(i);
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  double mx = kNegInf;
  for (int i : valid) mx = std::max(mx, A[i]);
  double z = 0.0;
  for (int i : valid) z += std::exp(A[i] - mx);
  double lz = mx + std::log(z);
  for (int i = 0; i < n.n; ++i) out[i] = kNegInf;
  for (int i : valid) out[i] = A[i] - lz;
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::pick(Id a, int k) {
  if (k < 0 || k >= nodes_[a].n) throw std::invalid_argument("pick: index out of range");
  Node n;
  n.op = Op::kPick;
  n.n = 1;
  n.in0 = a;
  n.k = k;
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  out[0] = val(nodes_[a])[k];
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::logsumexp_pick(Id a, std::span<const int> idx) {
  if (idx.empty()) throw std::invalid_argument("logsumexp_pick: empty set");
  Node n;
  n.op = Op::kLogSumExpPick;
  n.n = 1;
  n.in0 = a;
  n.aux_off = static_cast<int>(aux_.size());
  n.aux_cnt = static_cast<int>(idx.size());
  for (int i : idx) aux_.push_back(i);
  n.req = wants_grad(a);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  double mx = kNegInf;
  for (int i : idx) mx = std::max(mx, A[i]);
  double z = 0.0;
  for (int i : idx) z += std::exp(A[i] - mx);
  out[0] = mx + std::log(z);
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::dot(Id a, Id b) {
  check_same_size(a, b);
  Node n;
  n.op = Op::kDot;
  n.n = 1;
  n.in0 = a;
  n.in1 = b;
  n.req = wants_grad(a) || wants_grad(b);
  double* out = alloc_value(n);
  const double* A = val(nodes_[a]);
  const double* B = val(nodes_[b]);
  double s = 0.0;
  for (int i = 0; i < nodes_[a].n; ++i) s += A[i] * B[i];
  out[0] = s;
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::stack(std::span<const Id> scalars) {
  Node n;
  n.op = Op::kStack;
  n.n = static_cast<int>(scalars.size());
  n.multi_off = static_cast<int>(multi_.size());
  n.multi_cnt = n.n;
  for (Id s : scalars) {
    if (nodes_[s].n != 1) throw std::invalid_argument("stack: non-scalar input");
    multi_.push_back(s);
    n.req = n.req || wants_grad(s);
  }
  double* out = alloc_value(n);
  for (int i = 0; i < n.n; ++i) out[i] = val(nodes_[multi_[n.multi_off + i]])[0];
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::blend(Id weights, std::span<const Id> items) {
  if (nodes_[weights].n != static_cast<int>(items.size()))
    throw std::invalid_argument("blend: weight/item count mismatch");
  if (items.empty()) throw std::invalid_argument("blend: empty item list");
  Node n;
  n.op = Op::kBlend;
  n.n = nodes_[items[0]].n;
  n.in0 = weights;
  n.multi_off = static_cast<int>(multi_.size());
  n.multi_cnt = static_cast<int>(items.size());
  n.req = wants_grad(weights);
  for (Id it : items) {
    if (nodes_[it].n != n.n) throw std::invalid_argument("blend: item size mismatch");
    multi_.push_back(it);
    n.req = n.req || wants_grad(it);
  }
  double* out = alloc_value(n);
  const double* W = val(nodes_[weights]);
  std::fill(out, out + n.n, 0.0);
  for (int i = 0; i < n.multi_cnt; ++i) {
    const double* V = val(nodes_[multi_[n.multi_off + i]]);
    for (int j = 0; j < n.n; ++j) out[j] += W[i] * V[j];
  }
  alloc_grad(n);
  return push(n);
}

Tape::Id Tape::weighted_sum(std::span<const Id> scalars, std::span<const double> coeffs) {
  if (scalars.size() != coeffs.size())
    throw std::invalid_argument("weighted_sum: coeff count mismatch");
  Node n;
  n.op = Op::kWeightedSum;
  n.n = 1;
  n.multi_off = static_cast<int>(multi_.size());
  n.multi_cnt = static_cast<int>(scalars.size());
  n.coeff_off = static_cast<int>(coeff_.size());
  for (size_t i = 0; i < scalars.size(); ++i) {
    if (nodes_[scalars[i]].n != 1)
      throw std::invalid_argument("weighted_sum: non-scalar input");
    multi_.push_back(scalars[i]);
    coeff_.push_back(coeffs[i]);
    n.req = n.req || wants_grad(scalars[i]);
  }
  double* out = alloc_value(n);
  double s = 0.0;
  for (int i = 0; i < n.multi_cnt; ++i)
    s += coeff_[n.coeff_off + i] * val(nodes_[multi_[n.multi_off + i]])[0];
  out[0] = s;
  alloc_grad(n);
  return push(n);
}

std::span<const double> Tape::value(Id id) const {
  const Node& n = nodes_[id];
  return {val(n), static_cast<size_t>(n.n)};
}

double Tape::scalar(Id id) const {
  if (nodes_[id].n != 1) throw std::invalid_argument("scalar: node is not scalar");
  return val(nodes_[id])[0];
}

std::span<const double> Tape::gradient(Id id) const {
  const Node& n = nodes_[id];
  const double* g = n.gext ? n.gext : (n.goff >= 0 ? gbuf_.data() + n.goff : nullptr);
  if (!g) throw std::runtime_error("gradient: node has no gradient storage");
  return {g, static_cast<size_t>(n.n)};
}

void Tape::backward(Id root) {
  if (!grad_enabled_) throw std::runtime_error("backward: tape built without gradients");
  if (nodes_[root].n != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!nodes_[root].req) return;  // no parameter reaches the root

  std::fill(gbuf_.begin(), gbuf_.end(), 0.0);
  grad(nodes_[root])[0] += 1.0;  // += so a bare parameter root accumulates too

  for (Id id = root; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.req) continue;
    const double* g = grad(n);
    switch (n.op) {
      case Op::kConst:
      case Op::kParam:
        break;  // leaves: param grads already accumulated in-place via gext
      case Op::kMatVec: {
        Node& wn = nodes_[n.in0];
        Node& xn = nodes_[n.in1];
        const double* W = val(wn);
        const double* X = val(xn);
        double* gW = wn.req ? grad(wn) : nullptr;
        double* gX = xn.req ? grad(xn) : nullptr;
        int cols = n.k;
        for (int i = 0; i < n.n; ++i) {
          double gi = g[i];
          if (gi == 0.0) continue;
          const double* row = W + static_cast<size_t>(i) * cols;
          if (gW) {
            double* grow = gW + static_cast<size_t>(i) * cols;
            for (int j = 0; j < cols; ++j) grow[j] += gi * X[j];
          }
          if (gX) {
            for (int j = 0; j < cols; ++j) gX[j] += gi * row[j];
          }
        }
        break;
      }
      case Op::kAdd: {
        Node& a = nodes_[n.in0];
        Node& b = nodes_[n.in1];
        if (a.req) {
          double* ga = grad(a);
          for (int i = 0; i < n.n; ++i) ga[i] += g[i];
        }
        if (b.req) {
          double* gb = grad(b);
          for (int i = 0; i < n.n; ++i) gb[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        Node& a = nodes_[n.in0];
        Node& b = nodes_[n.in1];
        if (a.req) {
          double* ga = grad(a);
          for (int i = 0; i < n.n; ++i) ga[i] += g[i];
        }
        if (b.req) {
          double* gb = grad(b);
          for (int i = 0; i < n.n; ++i) gb[i] -= g[i];
        }
        break;
      }
      case Op::kMul: {
        Node& a = nodes_[n.in0];
        Node& b = nodes_[n.in1];
        const double* A = val(a);
        const double* B = val(b);
        if (a.req) {
          double* ga = grad(a);
          for (int i = 0; i < n.n; ++i) ga[i] += g[i] * B[i];
        }
        if (b.req) {
          double* gb = grad(b);
          for (int i = 0; i < n.n; ++i) gb[i] += g[i] * A[i];
        }
        break;
      }
      case Op::kAffine: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          double* ga = grad(a);
          for (int i = 0; i < n.n; ++i) ga[i] += g[i] * n.x0;
        }
        break;
      }
      case Op::kConcat: {
        int at = 0;
        for (int p = 0; p < n.multi_cnt; ++p) {
          Node& part = nodes_[multi_[n.multi_off + p]];
          if (part.req) {
            double* gp = grad(part);
            for (int i = 0; i < part.n; ++i) gp[i] += g[at + i];
          }
          at += part.n;
        }
        break;
      }
      case Op::kSlice: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          double* ga = grad(a);
          for (int i = 0; i < n.n; ++i) ga[n.k + i] += g[i];
        }
        break;
      }
      case Op::kTanh: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          const double* Y = val(n);
          double* ga = grad(a);
          for (int i = 0; i < n.n; ++i) ga[i] += g[i] * (1.0 - Y[i] * Y[i]);
        }
        break;
      }
      case Op::kSigmoid: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          const double* Y = val(n);
          double* ga = grad(a);
          for (int i = 0; i < n.n; ++i) ga[i] += g[i] * Y[i] * (1.0 - Y[i]);
        }
        break;
      }
      case Op::kLog: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          const double* A = val(a);
          double* ga = grad(a);
          for (int i = 0; i < n.n; ++i) ga[i] += g[i] / A[i];
        }
        break;
      }
      case Op::kExp: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          const double* Y = val(n);
          double* ga = grad(a);
          for (int i = 0; i < n.n; ++i) ga[i] += g[i] * Y[i];
        }
        break;
      }
      case Op::kClamp: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          const double* A = val(a);
          double* ga = grad(a);
          for (int i = 0; i < n.n; ++i)
            if (A[i] > n.x0 && A[i] < n.x1) ga[i] += g[i];
        }
        break;
      }
      case Op::kSoftmax: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          const double* Y = val(n);
          double* ga = grad(a);
          double dotgy = 0.0;
          for (int i = 0; i < n.n; ++i) dotgy += g[i] * Y[i];
          for (int i = 0; i < n.n; ++i) ga[i] += Y[i] * (g[i] - dotgy);
        }
        break;
      }
      case Op::kLogSoftmax: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          const double* Y = val(n);
          double* ga = grad(a);
          double gsum = 0.0;
          for (int i = 0; i < n.n; ++i) gsum += g[i];
          for (int i = 0; i < n.n; ++i) ga[i] += g[i] - std::exp(Y[i]) * gsum;
        }
        break;
      }
      case Op::kMaskedLogSoftmax: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          const double* Y = val(n);
          double* ga = grad(a);
          double gsum = 0.0;
          for (int t = 0; t < n.aux_cnt; ++t) gsum += g[aux_[n.aux_off + t]];
          for (int t = 0; t < n.aux_cnt; ++t) {
            int i = aux_[n.aux_off + t];
            ga[i] += g[i] - std::exp(Y[i]) * gsum;
          }
        }
        break;
      }
      case Op::kPick: {
        Node& a = nodes_[n.in0];
        if (a.req) grad(a)[n.k] += g[0];
        break;
      }
      case Op::kLogSumExpPick: {
        Node& a = nodes_[n.in0];
        if (a.req) {
          const double* A = val(a);
          double* ga = grad(a);
          double out = val(n)[0];
          for (int t = 0; t < n.aux_cnt; ++t) {
            int i = aux_[n.aux_off + t];
            ga[i] += g[0] * std::exp(A[i] - out);
          }
        }
        break;
      }
      case Op::kDot: {
        Node& a = nodes_[n.in0];
        Node& b = nodes_[n.in1];
        const double* A = val(a);
        const double* B = val(b);
        if (a.req) {
          double* ga = grad(a);
          for (int i = 0; i < a.n; ++i) ga[i] += g[0] * B[i];
        }
        if (b.req) {
          double* gb = grad(b);
          for (int i = 0; i < a.n; ++i) gb[i] += g[0] * A[i];
        }
        break;
      }
      case Op::kStack: {
        for (int i = 0; i < n.multi_cnt; ++i) {
          Node& s = nodes_[multi_[n.multi_off + i]];
          if (s.req) grad(s)[0] += g[i];
        }
        break;
      }
      case Op::kBlend: {
        Node& w = nodes_[n.in0];
        const double* W = val(w);
        double* gw = w.req ? grad(w) : nullptr;
        for (int i = 0; i < n.multi_cnt; ++i) {
          Node& item = nodes_[multi_[n.multi_off + i]];
          const double* V = val(item);
          if (gw) {
            double s = 0.0;
            for (int j = 0; j < n.n; ++j) s += g[j] * V[j];
            gw[i] += s;
          }
          if (item.req) {
            double* gi = grad(item);
            for (int j = 0; j < n.n; ++j) gi[j] += g[j] * W[i];
          }
        }
        break;
      }
      case Op::kWeightedSum: {
        for (int i = 0; i < n.multi_cnt; ++i) {
          Node& s = nodes_[multi_[n.multi_off + i]];
          if (s.req) grad(s)[0] += g[0] * coeff_[n.coeff_off + i];
        }
        break;
      }
    }
  }
}

}  // namespace tokman

#include "spen/tape.hpp"

#include <Eigen/Core>

#include <atomic>
#include <cmath>
#include <string>

#include "spen/errors.hpp"

namespace spen {

namespace {

std::atomic<std::size_t> g_live_doubles{0};
std::atomic<std::size_t> g_peak_doubles{0};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
using EVec = Eigen::VectorXd;

inline double sigmoid(double w) {
  if (w >= 0.0) return 1.0 / (1.0 + std::exp(-w));
  const double e = std::exp(w);
  return e / (1.0 + e);
}

// Numerically safe softplus at unit scale: log(1 + exp(w)).
inline double softplus_raw(double w) {
  if (w > 30.0) return w + std::exp(-w);
  if (w < -30.0) return std::exp(w);
  return std::log1p(std::exp(w));
}

constexpr double kXLogXKnee = 1e-12;

}  // namespace

Tape::~Tape() { account(-static_cast<std::ptrdiff_t>(owned_doubles_)); }

Tape::Tape(Tape&& other) noexcept
    : nodes_(std::move(other.nodes_)),
      grads_(std::move(other.grads_)),
      grad_set_(std::move(other.grad_set_)),
      owned_doubles_(other.owned_doubles_) {
  other.nodes_.clear();
  other.grads_.clear();
  other.grad_set_.clear();
  other.owned_doubles_ = 0;
}

void Tape::account(std::ptrdiff_t delta) {
  if (delta >= 0) {
    owned_doubles_ += static_cast<std::size_t>(delta);
    std::size_t now = g_live_doubles.fetch_add(static_cast<std::size_t>(delta)) +
                      static_cast<std::size_t>(delta);
    std::size_t peak = g_peak_doubles.load();
    while (now > peak && !g_peak_doubles.compare_exchange_weak(peak, now)) {
    }
  } else {
    owned_doubles_ -= static_cast<std::size_t>(-delta);
    g_live_doubles.fetch_sub(static_cast<std::size_t>(-delta));
  }
}

std::size_t Tape::live_doubles() { return g_live_doubles.load(); }
std::size_t Tape::peak_live_doubles() { return g_peak_doubles.load(); }
void Tape::reset_peak() { g_peak_doubles.store(g_live_doubles.load()); }

NodeId Tape::push(Tensor value, std::vector<NodeId> parents,
                  std::function<void(Tape&, NodeId)> backward_fn) {
  account(static_cast<std::ptrdiff_t>(value.numel()));
  nodes_.push_back(Node{std::move(value), std::move(parents), std::move(backward_fn)});
  return static_cast<NodeId>(nodes_.size() - 1);
}

void Tape::check_id(NodeId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw ContractError("node id " + std::to_string(id) + " not on tape");
  }
}

const Tensor& Tape::value(NodeId id) const {
  check_id(id);
  return nodes_[static_cast<std::size_t>(id)].value;
}

NodeId Tape::leaf(Tensor value) { return push(std::move(value), {}, nullptr); }

void Tape::accumulate(NodeId id, const Tensor& g) {
  auto idx = static_cast<std::size_t>(id);
  if (!grad_set_[idx]) {
    account(static_cast<std::ptrdiff_t>(g.numel()));
    grads_[idx] = g;
    grad_set_[idx] = 1;
  } else {
    grads_[idx] += g;
  }
}

void Tape::accumulate_scaled(NodeId id, double c, const Tensor& g) {
  auto idx = static_cast<std::size_t>(id);
  if (!grad_set_[idx]) {
    account(static_cast<std::ptrdiff_t>(g.numel()));
    grads_[idx] = g;
    grads_[idx] *= c;
    grad_set_[idx] = 1;
  } else {
    grads_[idx].axpy(c, g);
  }
}

void Tape::clear_grads() {
  std::size_t freed = 0;
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    if (grad_set_[i]) freed += grads_[i].numel();
  }
  account(-static_cast<std::ptrdiff_t>(freed));
  grads_.clear();
  grad_set_.clear();
}

void Tape::backward(NodeId root) {
  check_id(root);
  if (!value(root).is_scalar()) {
    throw ContractError("backward root must be scalar, got shape " + value(root).shape_str());
  }
  backward_seeded({{root, Tensor::scalar(1.0)}});
}

void Tape::backward_seeded(std::vector<std::pair<NodeId, Tensor>> seeds) {
  clear_grads();
  grads_.resize(nodes_.size());
  grad_set_.assign(nodes_.size(), 0);
  for (auto& [id, g] : seeds) {
    check_id(id);
    if (!g.same_shape(value(id))) {
      throw ContractError("seed gradient shape " + g.shape_str() + " does not match node shape " +
                          value(id).shape_str());
    }
    accumulate(id, g);
  }
  run_reverse_sweep();
}

void Tape::run_reverse_sweep() {
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (grad_set_[i] && nodes_[i].backward_fn) {
      nodes_[i].backward_fn(*this, static_cast<NodeId>(i));
    }
  }
}

Tensor Tape::grad(NodeId id) const {
  check_id(id);
  auto idx = static_cast<std::size_t>(id);
  if (idx < grad_set_.size() && grad_set_[idx]) return grads_[idx];
  return Tensor::zeros(value(id).shape());
}

bool Tape::has_grad(NodeId id) const {
  check_id(id);
  auto idx = static_cast<std::size_t>(id);
  return idx < grad_set_.size() && grad_set_[idx] != 0;
}

// --- elementwise and reduction ops -----------------------------------------

NodeId Tape::add(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) {
    throw DimensionError("add shapes " + va.shape_str() + " vs " + vb.shape_str());
  }
  Tensor out = va;
  out += vb;
  return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

NodeId Tape::add_many(const std::vector<NodeId>& terms) {
  if (terms.empty()) throw ContractError("add_many needs at least one term");
  NodeId acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

NodeId Tape::sub(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) {
    throw DimensionError("sub shapes " + va.shape_str() + " vs " + vb.shape_str());
  }
  Tensor out = va;
  out -= vb;
  return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    t.accumulate(a, g);
    t.accumulate_scaled(b, -1.0, g);
  });
}

NodeId Tape::mul(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (!va.same_shape(vb)) {
    throw DimensionError("mul shapes " + va.shape_str() + " vs " + vb.shape_str());
  }
  Tensor out = va;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
  return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    const Tensor& va2 = t.value(a);
    const Tensor& vb2 = t.value(b);
    Tensor ga = g;
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] *= vb2[i];
    t.accumulate(a, ga);
    Tensor gb = g;
    for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] *= va2[i];
    t.accumulate(b, gb);
  });
}

NodeId Tape::scale(NodeId a, double c) {
  Tensor out = value(a);
  out *= c;
  return push(std::move(out), {a}, [a, c](Tape& t, NodeId self) {
    t.accumulate_scaled(a, c, t.grads_[static_cast<std::size_t>(self)]);
  });
}

NodeId Tape::smul(NodeId s, NodeId a) {
  const Tensor& vs = value(s);
  if (!vs.is_scalar()) {
    throw DimensionError("smul scale operand must be scalar, got " + vs.shape_str());
  }
  const double c = vs[0];
  Tensor out = value(a);
  out *= c;
  return push(std::move(out), {s, a}, [s, a](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    const Tensor& va = t.value(a);
    const double c2 = t.value(s)[0];
    Tensor gs = Tensor::scalar(g.dot(va));
    t.accumulate(s, gs);
    t.accumulate_scaled(a, c2, g);
  });
}

NodeId Tape::dot(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  Tensor out = Tensor::scalar(va.dot(vb));
  return push(std::move(out), {a, b}, [a, b](Tape& t, NodeId self) {
    const double g = t.grads_[static_cast<std::size_t>(self)][0];
    t.accumulate_scaled(a, g, t.value(b));
    t.accumulate_scaled(b, g, t.value(a));
  });
}

NodeId Tape::reduce_sum(NodeId a) {
  Tensor out = Tensor::scalar(value(a).sum());
  return push(std::move(out), {a}, [a](Tape& t, NodeId self) {
    const double g = t.grads_[static_cast<std::size_t>(self)][0];
    Tensor ga = Tensor::full(t.value(a).shape(), g);
    t.accumulate(a, ga);
  });
}

NodeId Tape::reduce_mean(NodeId a) {
  const double n = static_cast<double>(value(a).numel());
  Tensor out = Tensor::scalar(value(a).sum() / n);
  return push(std::move(out), {a}, [a, n](Tape& t, NodeId self) {
    const double g = t.grads_[static_cast<std::size_t>(self)][0];
    Tensor ga = Tensor::full(t.value(a).shape(), g / n);
    t.accumulate(a, ga);
  });
}

NodeId Tape::spatial_avg_pool(NodeId a) {
  const Tensor& va = value(a);
  if (va.rank() < 2) {
    throw DimensionError("spatial_avg_pool needs rank >= 2, got " + va.shape_str());
  }
  const std::size_t r = va.rank();
  const std::size_t hw = va.shape()[r - 2] * va.shape()[r - 1];
  std::vector<std::size_t> out_shape(va.shape().begin(), va.shape().end() - 2);
  Tensor out(out_shape);
  for (std::size_t c = 0; c < out.numel(); ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < hw; ++i) s += va[c * hw + i];
    out[c] = s / static_cast<double>(hw);
  }
  return push(std::move(out), {a}, [a, hw](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    Tensor ga = Tensor::zeros(t.value(a).shape());
    for (std::size_t c = 0; c < g.numel(); ++c) {
      const double gv = g[c] / static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) ga[c * hw + i] = gv;
    }
    t.accumulate(a, ga);
  });
}

NodeId Tape::sum_axis(NodeId a, std::size_t axis) {
  const Tensor& va = value(a);
  if (axis >= va.rank()) {
    throw DimensionError("sum_axis axis " + std::to_string(axis) + " out of range for " +
                         va.shape_str());
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= va.shape()[i];
  for (std::size_t i = axis + 1; i < va.rank(); ++i) inner *= va.shape()[i];
  const std::size_t mid = va.shape()[axis];
  std::vector<std::size_t> out_shape;
  for (std::size_t i = 0; i < va.rank(); ++i) {
    if (i != axis) out_shape.push_back(va.shape()[i]);
  }
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t m = 0; m < mid; ++m) {
      for (std::size_t i = 0; i < inner; ++i) {
        out[o * inner + i] += va[(o * mid + m) * inner + i];
      }
    }
  }
  return push(std::move(out), {a}, [a, outer, mid, inner](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    Tensor ga = Tensor::zeros(t.value(a).shape());
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t m = 0; m < mid; ++m) {
        for (std::size_t i = 0; i < inner; ++i) {
          ga[(o * mid + m) * inner + i] = g[o * inner + i];
        }
      }
    }
    t.accumulate(a, ga);
  });
}

NodeId Tape::slice_last(NodeId a, std::size_t start, std::size_t len) {
  const Tensor& va = value(a);
  if (va.rank() < 1) throw DimensionError("slice_last on scalar");
  const std::size_t d = va.shape()[va.rank() - 1];
  if (len == 0 || start + len > d) {
    throw DimensionError("slice_last [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") out of range for last extent " +
                         std::to_string(d));
  }
  const std::size_t rows = va.numel() / d;
  std::vector<std::size_t> out_shape = va.shape();
  out_shape.back() = len;
  Tensor out(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < len; ++j) out[r * len + j] = va[r * d + start + j];
  }
  return push(std::move(out), {a}, [a, start, len, d, rows](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    Tensor ga = Tensor::zeros(t.value(a).shape());
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < len; ++j) ga[r * d + start + j] = g[r * len + j];
    }
    t.accumulate(a, ga);
  });
}

NodeId Tape::row(NodeId a, std::size_t r) {
  const Tensor& va = value(a);
  if (va.rank() != 2) throw DimensionError("row() needs a rank-2 tensor, got " + va.shape_str());
  const std::size_t rows = va.shape()[0], cols = va.shape()[1];
  if (r >= rows) throw DimensionError("row index out of range");
  Tensor out({cols});
  for (std::size_t j = 0; j < cols; ++j) out[j] = va[r * cols + j];
  return push(std::move(out), {a}, [a, r, cols](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    Tensor ga = Tensor::zeros(t.value(a).shape());
    for (std::size_t j = 0; j < cols; ++j) ga[r * cols + j] = g[j];
    t.accumulate(a, ga);
  });
}

NodeId Tape::concat(const std::vector<NodeId>& vecs) {
  if (vecs.empty()) throw ContractError("concat of zero vectors");
  std::size_t total = 0;
  for (NodeId v : vecs) {
    if (value(v).rank() != 1) {
      throw DimensionError("concat operand must be rank 1, got " + value(v).shape_str());
    }
    total += value(v).numel();
  }
  Tensor out({total});
  std::size_t off = 0;
  for (NodeId v : vecs) {
    const Tensor& t = value(v);
    for (std::size_t i = 0; i < t.numel(); ++i) out[off + i] = t[i];
    off += t.numel();
  }
  std::vector<NodeId> parents = vecs;
  return push(std::move(out), parents, [vecs](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    std::size_t off2 = 0;
    for (NodeId v : vecs) {
      const std::size_t n = t.value(v).numel();
      Tensor gv({n});
      for (std::size_t i = 0; i < n; ++i) gv[i] = g[off2 + i];
      t.accumulate(v, gv);
      off2 += n;
    }
  });
}

NodeId Tape::xlogx_sum(NodeId a) {
  const Tensor& va = value(a);
  const double knee_val = kXLogXKnee * std::log(kXLogXKnee);
  const double knee_slope = std::log(kXLogXKnee) + 1.0;
  double s = 0.0;
  for (std::size_t i = 0; i < va.numel(); ++i) {
    const double z = va[i];
    s += (z >= kXLogXKnee) ? z * std::log(z) : knee_val + knee_slope * (z - kXLogXKnee);
  }
  return push(Tensor::scalar(s), {a}, [a, knee_slope](Tape& t, NodeId self) {
    const double g = t.grads_[static_cast<std::size_t>(self)][0];
    const Tensor& va2 = t.value(a);
    Tensor ga(va2.shape());
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      const double z = va2[i];
      ga[i] = g * ((z >= kXLogXKnee) ? std::log(z) + 1.0 : knee_slope);
    }
    t.accumulate(a, ga);
  });
}

// --- nonlinearities ---------------------------------------------------------

NodeId Tape::softplus(NodeId a, double temperature) {
  if (!(temperature > 0.0)) {
    throw ConfigError("softplus temperature must be positive, got " +
                      std::to_string(temperature));
  }
  const Tensor& va = value(a);
  Tensor out(va.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = softplus_raw(temperature * va[i]) / temperature;
  }
  return push(std::move(out), {a}, [a, temperature](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    const Tensor& va2 = t.value(a);
    Tensor ga(va2.shape());
    for (std::size_t i = 0; i < ga.numel(); ++i) {
      ga[i] = g[i] * sigmoid(temperature * va2[i]);
    }
    t.accumulate(a, ga);
  });
}

NodeId Tape::softmax_rows(NodeId a) {
  const Tensor& va = value(a);
  if (va.rank() < 1) throw DimensionError("softmax_rows on a scalar");
  const std::size_t d = va.shape()[va.rank() - 1];
  const std::size_t rows = va.numel() / d;
  Tensor out(va.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = va.data() + r * d;
    double* o = out.data() + r * d;
    double mx = in[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      o[j] = std::exp(in[j] - mx);
      z += o[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[j] /= z;
  }
  return push(std::move(out), {a}, [a, d, rows](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    const Tensor& y = t.value(self);
    Tensor ga(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * d;
      const double* yr = y.data() + r * d;
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += gr[j] * yr[j];
      double* out_r = ga.data() + r * d;
      for (std::size_t j = 0; j < d; ++j) out_r[j] = yr[j] * (gr[j] - s);
    }
    t.accumulate(a, ga);
  });
}

// --- linear algebra ---------------------------------------------------------

NodeId Tape::linear(NodeId x, NodeId weight, NodeId bias) {
  const Tensor& vx = value(x);
  const Tensor& vw = value(weight);
  const Tensor& vb = value(bias);
  if (vx.rank() != 1 || vw.rank() != 2 || vb.rank() != 1 || vw.shape()[1] != vx.shape()[0] ||
      vw.shape()[0] != vb.shape()[0]) {
    throw DimensionError("linear operands x" + vx.shape_str() + " W" + vw.shape_str() + " b" +
                         vb.shape_str());
  }
  const std::size_t m = vw.shape()[0], n = vw.shape()[1];
  Tensor out({m});
  Eigen::Map<const RowMat> W(vw.data(), static_cast<Eigen::Index>(m),
                             static_cast<Eigen::Index>(n));
  Eigen::Map<const EVec> X(vx.data(), static_cast<Eigen::Index>(n));
  Eigen::Map<EVec> Y(out.data(), static_cast<Eigen::Index>(m));
  Y.noalias() = W * X;
  for (std::size_t i = 0; i < m; ++i) out[i] += vb[i];
  return push(std::move(out), {x, weight, bias}, [x, weight, bias, m, n](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    const Tensor& vx2 = t.value(x);
    const Tensor& vw2 = t.value(weight);
    Eigen::Map<const RowMat> W(vw2.data(), static_cast<Eigen::Index>(m),
                               static_cast<Eigen::Index>(n));
    Eigen::Map<const EVec> G(g.data(), static_cast<Eigen::Index>(m));
    Eigen::Map<const EVec> X(vx2.data(), static_cast<Eigen::Index>(n));

    Tensor gx({n});
    Eigen::Map<EVec> GX(gx.data(), static_cast<Eigen::Index>(n));
    GX.noalias() = W.transpose() * G;
    t.accumulate(x, gx);

    Tensor gw({m, n});
    Eigen::Map<RowMat> GW(gw.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    GW.noalias() = G * X.transpose();
    t.accumulate(weight, gw);

    t.accumulate(bias, g);
  });
}

NodeId Tape::mat_t_vec(NodeId m, NodeId w) {
  const Tensor& vm = value(m);
  const Tensor& vw = value(w);
  if (vm.rank() != 2 || vw.rank() != 1 || vm.shape()[0] != vw.shape()[0]) {
    throw DimensionError("mat_t_vec operands M" + vm.shape_str() + " w" + vw.shape_str());
  }
  const std::size_t r = vm.shape()[0], c = vm.shape()[1];
  Tensor out({c});
  for (std::size_t i = 0; i < r; ++i) {
    const double wi = vw[i];
    for (std::size_t j = 0; j < c; ++j) out[j] += wi * vm[i * c + j];
  }
  return push(std::move(out), {m, w}, [m, w, r, c](Tape& t, NodeId self) {
    const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
    const Tensor& vm2 = t.value(m);
    const Tensor& vw2 = t.value(w);
    Tensor gm(vm2.shape());
    Tensor gw({r});
    for (std::size_t i = 0; i < r; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        gm[i * c + j] = vw2[i] * g[j];
        acc += vm2[i * c + j] * g[j];
      }
      gw[i] = acc;
    }
    t.accumulate(m, gm);
    t.accumulate(w, gw);
  });
}

// --- convolution ------------------------------------------------------------

namespace {

// Column-major patch matrix [ci*k*k x h*w]; column j holds the receptive
// field of output pixel j.
void im2col(const Tensor& x, std::size_t k, std::vector<double>& cols) {
  const std::size_t ci = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t patch = ci * k * k;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k - 1) / 2;
  cols.assign(patch * h * w, 0.0);
  const double* xd = x.data();
  for (std::size_t oy = 0; oy < h; ++oy) {
    for (std::size_t ox = 0; ox < w; ++ox) {
      double* col = cols.data() + (oy * w + ox) * patch;
      std::size_t r = 0;
      for (std::size_t c = 0; c < ci; ++c) {
        for (std::size_t di = 0; di < k; ++di) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + di) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            r += k;
            continue;
          }
          const double* xrow = xd + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t dj = 0; dj < k; ++dj, ++r) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + dj) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) {
              col[r] = xrow[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

void col2im(const std::vector<double>& cols, std::size_t ci, std::size_t h, std::size_t w,
            std::size_t k, Tensor& gx) {
  const std::size_t patch = ci * k * k;
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k - 1) / 2;
  double* gd = gx.data();
  for (std::size_t oy = 0; oy < h; ++oy) {
    for (std::size_t ox = 0; ox < w; ++ox) {
      const double* col = cols.data() + (oy * w + ox) * patch;
      std::size_t r = 0;
      for (std::size_t c = 0; c < ci; ++c) {
        for (std::size_t di = 0; di < k; ++di) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + di) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            r += k;
            continue;
          }
          double* grow = gd + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t dj = 0; dj < k; ++dj, ++r) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + dj) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) {
              grow[static_cast<std::size_t>(ix)] += col[r];
            }
          }
        }
      }
    }
  }
}

}  // namespace

NodeId Tape::conv2d(NodeId x, NodeId kernels, NodeId bias) {
  const Tensor& vx = value(x);
  const Tensor& vk = value(kernels);
  const Tensor& vb = value(bias);
  if (vx.rank() != 3 || vk.rank() != 4) {
    throw DimensionError("conv2d operands x" + vx.shape_str() + " k" + vk.shape_str());
  }
  const std::size_t ci = vx.shape()[0], h = vx.shape()[1], w = vx.shape()[2];
  const std::size_t co = vk.shape()[0], k = vk.shape()[2];
  if (vk.shape()[2] != vk.shape()[3]) {
    throw DimensionError("conv2d kernels must be square, got " + vk.shape_str());
  }
  if (k % 2 == 0) {
    throw ConfigError("conv2d kernel size must be odd, got " + std::to_string(k));
  }
  if (vk.shape()[1] != ci) {
    throw DimensionError("conv2d channel mismatch: input " + vx.shape_str() + " vs kernels " +
                         vk.shape_str());
  }
  if (vb.rank() != 1 || vb.shape()[0] != co) {
    throw DimensionError("conv2d bias " + vb.shape_str() + " for " + std::to_string(co) +
                         " output channels");
  }
  const std::size_t patch = ci * k * k;
  const std::size_t hw = h * w;
  std::vector<double> cols;
  im2col(vx, k, cols);
  Tensor out({co, h, w});
  {
    Eigen::Map<const RowMat> K(vk.data(), static_cast<Eigen::Index>(co),
                               static_cast<Eigen::Index>(patch));
    Eigen::Map<const ColMat> C(cols.data(), static_cast<Eigen::Index>(patch),
                               static_cast<Eigen::Index>(hw));
    Eigen::Map<RowMat> O(out.data(), static_cast<Eigen::Index>(co),
                         static_cast<Eigen::Index>(hw));
    O.noalias() = K * C;
  }
  for (std::size_t c = 0; c < co; ++c) {
    const double b = vb[c];
    for (std::size_t i = 0; i < hw; ++i) out[c * hw + i] += b;
  }
  return push(std::move(out), {x, kernels, bias},
              [x, kernels, bias, ci, h, w, co, k, patch, hw](Tape& t, NodeId self) {
                const Tensor& g = t.grads_[static_cast<std::size_t>(self)];
                const Tensor& vx2 = t.value(x);
                const Tensor& vk2 = t.value(kernels);
                // Patch matrix is recomputed here rather than saved on the tape.
                std::vector<double> cols2;
                im2col(vx2, k, cols2);
                Eigen::Map<const RowMat> K(vk2.data(), static_cast<Eigen::Index>(co),
                                           static_cast<Eigen::Index>(patch));
                Eigen::Map<const ColMat> C(cols2.data(), static_cast<Eigen::Index>(patch),
                                           static_cast<Eigen::Index>(hw));
                Eigen::Map<const RowMat> G(g.data(), static_cast<Eigen::Index>(co),
                                           static_cast<Eigen::Index>(hw));

                Tensor gk(vk2.shape());
                Eigen::Map<RowMat> GK(gk.data(), static_cast<Eigen::Index>(co),
                                      static_cast<Eigen::Index>(patch));
                GK.noalias() = G * C.transpose();
                t.accumulate(kernels, gk);

                std::vector<double> gcols(patch * hw);
                Eigen::Map<ColMat> GC(gcols.data(), static_cast<Eigen::Index>(patch),
                                      static_cast<Eigen::Index>(hw));
                GC.noalias() = K.transpose() * G;
                Tensor gx = Tensor::zeros(vx2.shape());
                col2im(gcols, ci, h, w, k, gx);
                t.accumulate(x, gx);

                Tensor gb({co});
                for (std::size_t c = 0; c < co; ++c) {
                  double s = 0.0;
                  for (std::size_t i = 0; i < hw; ++i) s += g[c * hw + i];
                  gb[c] = s;
                }
                t.accumulate(bias, gb);
              });
}

}  // namespace spen

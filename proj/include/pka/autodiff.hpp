// Copyright 2026 The pka-engine Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Reverse-mode automatic differentiation over BasicTensor.
//
// A Tape records nodes in creation order, so every node's parents precede it.
// grad() sweeps the tape once in reverse. Primitives register themselves by
// passing a backward rule to Tape::record; a node recorded without one raises
// UnsupportedOpError if a gradient ever has to flow through it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pka/errors.hpp"
#include "pka/tensor.hpp"

namespace pka::ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Tape {
 public:
  using TensorT = BasicTensor<T>;
  // Receives the output gradient and one accumulator per parent (nullptr for
  // parents that do not need a gradient).
  using Backward = std::function<void(const TensorT& grad_out,
                                      std::span<TensorT* const> parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(TensorT value) { return push("leaf", std::move(value), {}, {}, true); }
  Var<T> constant(TensorT value) {
    return push("constant", std::move(value), {}, {}, false);
  }

  Var<T> record(std::string op, TensorT value, std::vector<Var<T>> parents,
                Backward backward) {
    bool needs = false;
    std::vector<std::size_t> ids;
    ids.reserve(parents.size());
    for (const auto& p : parents) {
      if (p.tape != this) throw ContractViolation("variable belongs to another tape");
      ids.push_back(p.id);
      needs = needs || nodes_[p.id].requires_grad;
    }
    return push(std::move(op), std::move(value), std::move(ids), std::move(backward),
                needs);
  }

  const TensorT& value(Var<T> v) const { return nodes_.at(v.id).value; }
  const std::string& op(std::size_t id) const { return nodes_.at(id).op; }
  const std::vector<std::size_t>& parents(std::size_t id) const {
    return nodes_.at(id).parents;
  }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::size_t last_backward_visits() const noexcept { return visits_; }

  // d(output)/d(wrt[i]) for a single-element output.
  std::vector<TensorT> grad(Var<T> output, std::span<const Var<T>> wrt) {
    if (value(output).size() != 1) {
      throw ContractViolation("grad() needs a scalar output, got " +
                              shape_string(value(output).shape()));
    }
    std::vector<TensorT> grads(output.id + 1);
    std::vector<std::uint8_t> has(output.id + 1, 0);
    grads[output.id] = TensorT::full(value(output).shape(), T{1});
    has[output.id] = 1;
    visits_ = 0;

    for (std::size_t i = output.id + 1; i-- > 0;) {
      if (!has[i]) continue;
      ++visits_;
      Node& node = nodes_[i];
      if (node.parents.empty() || !node.requires_grad) continue;
      if (!node.backward) {
        throw UnsupportedOpError("no backward rule registered for primitive '" +
                                 node.op + "'");
      }
      std::vector<TensorT*> slots(node.parents.size(), nullptr);
      for (std::size_t p = 0; p < node.parents.size(); ++p) {
        const std::size_t pid = node.parents[p];
        if (!nodes_[pid].requires_grad) continue;
        if (!has[pid]) {
          grads[pid] = TensorT(nodes_[pid].value.shape());
          has[pid] = 1;
        }
        slots[p] = &grads[pid];
      }
      node.backward(grads[i], slots);
    }

    std::vector<TensorT> out;
    out.reserve(wrt.size());
    for (const auto& w : wrt) {
      if (w.id <= output.id && has[w.id]) {
        out.push_back(grads[w.id]);
      } else {
        out.emplace_back(nodes_.at(w.id).value.shape());
      }
    }
    return out;
  }

 private:
  struct Node {
    std::string op;
    TensorT value;
    std::vector<std::size_t> parents;
    Backward backward;
    bool requires_grad = false;
  };

  Var<T> push(std::string op, TensorT value, std::vector<std::size_t> parents,
              Backward backward, bool requires_grad) {
    nodes_.push_back(Node{std::move(op), std::move(value), std::move(parents),
                          std::move(backward), requires_grad});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::size_t visits_ = 0;
};

namespace detail {

template <typename T>
void accumulate(BasicTensor<T>* dst, const BasicTensor<T>& src, T factor = T{1}) {
  if (!dst) return;
  T* d = dst->raw();
  const T* s = src.raw();
  for (std::size_t i = 0; i < src.size(); ++i) d[i] += factor * s[i];
}

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(op) + " shape mismatch " +
                            shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same(a, b, "add");
  auto out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape->record("add", std::move(out), {a, b},
                        [](const auto& g, auto slots) {
                          detail::accumulate(slots[0], g);
                          detail::accumulate(slots[1], g);
                        });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same(a, b, "sub");
  auto out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record("sub", std::move(out), {a, b},
                        [](const auto& g, auto slots) {
                          detail::accumulate(slots[0], g);
                          detail::accumulate(slots[1], g, T{-1});
                        });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same(a, b, "mul");
  auto out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto* tape = a.tape;
  return tape->record("mul", std::move(out), {a, b},
                      [tape, a, b](const auto& g, auto slots) {
                        const auto& av = tape->value(a);
                        const auto& bv = tape->value(b);
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          if (slots[0]) (*slots[0])[i] += g[i] * bv[i];
                          if (slots[1]) (*slots[1])[i] += g[i] * av[i];
                        }
                      });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  auto out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape->record("scale", std::move(out), {a},
                        [factor](const auto& g, auto slots) {
                          detail::accumulate(slots[0], g, factor);
                        });
}

// a [m x n] + bias broadcast over rows; bias has n elements.
template <typename T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
  const auto& av = a.value();
  const auto& bv = bias.value();
  if (av.rank() != 2 || bv.size() != av.dim(1)) {
    throw ContractViolation("add_bias expects [m x n] + [n], got " +
                            shape_string(av.shape()) + " + " + shape_string(bv.shape()));
  }
  auto out = av;
  const std::size_t n = av.dim(1);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  return a.tape->record("add_bias", std::move(out), {a, bias},
                        [n](const auto& g, auto slots) {
                          detail::accumulate(slots[0], g);
                          if (slots[1]) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              (*slots[1])[i % n] += g[i];
                            }
                          }
                        });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto* tape = a.tape;
  return tape->record("matmul", pka::matmul(a.value(), b.value()), {a, b},
                      [tape, a, b](const auto& g, auto slots) {
                        if (slots[0]) detail::accumulate(slots[0], matmul_nt(g, tape->value(b)));
                        if (slots[1]) detail::accumulate(slots[1], matmul_tn(tape->value(a), g));
                      });
}

// a · bᵀ
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  auto* tape = a.tape;
  return tape->record("matmul_nt", pka::matmul_nt(a.value(), b.value()), {a, b},
                      [tape, a, b](const auto& g, auto slots) {
                        if (slots[0]) detail::accumulate(slots[0], pka::matmul(g, tape->value(b)));
                        if (slots[1]) detail::accumulate(slots[1], matmul_tn(g, tape->value(a)));
                      });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  return a.tape->record("transpose", pka::transpose(a.value()), {a},
                        [](const auto& g, auto slots) {
                          detail::accumulate(slots[0], pka::transpose(g));
                        });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total{0};
  for (T v : a.value().data()) total += v;
  return a.tape->record("sum", BasicTensor<T>(Shape{1}, {total}), {a},
                        [](const auto& g, auto slots) {
                          if (!slots[0]) return;
                          for (auto& v : slots[0]->data()) v += g[0];
                        });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const T n = static_cast<T>(a.value().size());
  return scale(sum(a), T{1} / n);
}

template <typename T>
Var<T> square(Var<T> a) { return mul(a, a); }

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) { return mean(square(sub(a, b))); }

template <typename T>
Var<T> silu(Var<T> a) {
  auto out = a.value();
  for (auto& v : out.data()) v = v / (T{1} + std::exp(-v));
  auto* tape = a.tape;
  return tape->record("silu", std::move(out), {a}, [tape, a](const auto& g, auto slots) {
    if (!slots[0]) return;
    const auto& x = tape->value(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = T{1} / (T{1} + std::exp(-x[i]));
      (*slots[0])[i] += g[i] * (s + x[i] * s * (T{1} - s));
    }
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  auto out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  auto* tape = a.tape;
  const std::size_t self = tape->size();
  return tape->record("tanh", std::move(out), {a}, [tape, self](const auto& g, auto slots) {
    if (!slots[0]) return;
    const auto& y = tape->value(Var<T>{tape, self});
    for (std::size_t i = 0; i < g.size(); ++i) (*slots[0])[i] += g[i] * (T{1} - y[i] * y[i]);
  });
}

namespace detail {
// dx = y * (g - sum(g * y)) per row, skipping masked entries (y == 0 there).
template <typename T>
void softmax_backward(const BasicTensor<T>& y, const BasicTensor<T>& g,
                      BasicTensor<T>* dx) {
  if (!dx) return;
  const std::size_t n = y.cols();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    T dot{0};
    for (std::size_t c = 0; c < n; ++c) dot += g(r, c) * y(r, c);
    for (std::size_t c = 0; c < n; ++c) (*dx)(r, c) += y(r, c) * (g(r, c) - dot);
  }
}
}  // namespace detail

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  auto* tape = a.tape;
  const std::size_t self = tape->size();
  return tape->record("softmax_rows", pka::softmax_rows(a.value()), {a},
                      [tape, self](const auto& g, auto slots) {
                        detail::softmax_backward(tape->value(Var<T>{tape, self}), g, slots[0]);
                      });
}

// Row softmax restricted to entries with allowed[i] != 0; excluded entries
// get probability exactly zero. `allowed` is a constant of the tape.
template <typename T>
Var<T> masked_softmax_rows(Var<T> a, std::vector<std::uint8_t> allowed) {
  const auto& x = a.value();
  if (allowed.size() != x.size()) throw ContractViolation("mask size mismatch");
  auto out = BasicTensor<T>(x.shape());
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T peak = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < n; ++c) {
      if (allowed[r * n + c]) peak = std::max(peak, x(r, c));
    }
    if (!std::isfinite(peak)) {
      throw ContractViolation("masked softmax row " + std::to_string(r) + " is empty");
    }
    T total{0};
    for (std::size_t c = 0; c < n; ++c) {
      out(r, c) = allowed[r * n + c] ? std::exp(x(r, c) - peak) : T{0};
      total += out(r, c);
    }
    for (std::size_t c = 0; c < n; ++c) out(r, c) /= total;
  }
  auto* tape = a.tape;
  const std::size_t self = tape->size();
  return tape->record("masked_softmax_rows", std::move(out), {a},
                      [tape, self](const auto& g, auto slots) {
                        detail::softmax_backward(tape->value(Var<T>{tape, self}), g, slots[0]);
                      });
}

template <typename T>
Var<T> slice_rows(Var<T> a, std::size_t begin, std::size_t count) {
  return a.tape->record("slice_rows", pka::slice_rows(a.value(), begin, count), {a},
                        [begin](const auto& g, auto slots) {
                          if (!slots[0]) return;
                          const std::size_t n = g.cols();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            (*slots[0])[begin * n + i] += g[i];
                          }
                        });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t count) {
  return a.tape->record("slice_cols", pka::slice_cols(a.value(), begin, count), {a},
                        [begin, count](const auto& g, auto slots) {
                          if (!slots[0]) return;
                          auto& dst = *slots[0];
                          for (std::size_t r = 0; r < g.rows(); ++r) {
                            for (std::size_t c = 0; c < count; ++c) dst(r, begin + c) += g(r, c);
                          }
                        });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractViolation("concat_rows of nothing");
  const std::size_t n = parts.front().value().dim(1);
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().dim(1) != n) {
      throw ContractViolation("concat_rows width mismatch");
    }
    rows += p.value().dim(0);
  }
  auto out = BasicTensor<T>::matrix(rows, n);
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    write_rows(out, at, p.value());
    at += p.value().dim(0);
  }
  return parts.front().tape->record(
      "concat_rows", std::move(out), parts, [offsets, n](const auto& g, auto slots) {
        for (std::size_t s = 0; s < slots.size(); ++s) {
          if (!slots[s]) continue;
          const T* src = g.raw() + offsets[s] * n;
          for (std::size_t i = 0; i < slots[s]->size(); ++i) (*slots[s])[i] += src[i];
        }
      });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ContractViolation("concat_cols of nothing");
  const std::size_t m = parts.front().value().dim(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.value().rank() != 2 || p.value().dim(0) != m) {
      throw ContractViolation("concat_cols height mismatch");
    }
    cols += p.value().dim(1);
  }
  auto out = BasicTensor<T>::matrix(m, cols);
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    write_cols(out, at, p.value());
    at += p.value().dim(1);
  }
  return parts.front().tape->record(
      "concat_cols", std::move(out), parts, [offsets](const auto& g, auto slots) {
        for (std::size_t s = 0; s < slots.size(); ++s) {
          if (!slots[s]) continue;
          auto& dst = *slots[s];
          for (std::size_t r = 0; r < dst.dim(0); ++r) {
            for (std::size_t c = 0; c < dst.dim(1); ++c) dst(r, c) += g(r, offsets[s] + c);
          }
        }
      });
}

// Rows of `a` picked by `index` (repeats allowed); backward scatter-adds.
template <typename T>
Var<T> gather_rows(Var<T> a, std::vector<std::size_t> index) {
  const auto& x = a.value();
  const std::size_t n = x.dim(1);
  auto out = BasicTensor<T>::matrix(index.size(), n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= x.dim(0)) throw ContractViolation("gather_rows index out of range");
    std::copy_n(x.raw() + index[i] * n, n, out.raw() + i * n);
  }
  return a.tape->record("gather_rows", std::move(out), {a},
                        [index = std::move(index), n](const auto& g, auto slots) {
                          if (!slots[0]) return;
                          for (std::size_t i = 0; i < index.size(); ++i) {
                            for (std::size_t c = 0; c < n; ++c) {
                              (*slots[0])(index[i], c) += g(i, c);
                            }
                          }
                        });
}

// Central-difference gradient check.
struct FdReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// `build` constructs the scalar on the supplied tape from the supplied leaf
// variables (one per param, in order). Per element the error is
// |analytic - numeric| / max(|analytic|, |numeric|, floor) where floor is
// 1e-2 of the largest numeric gradient magnitude of that parameter (and at
// least 1e-12), so near-zero entries are judged against the gradient scale.
template <typename T, typename Build>
FdReport fd_check(Build&& build, const std::vector<BasicTensor<T>>& params, T h) {
  if (!(h > T{0})) throw ParameterError("finite-difference step must be positive");
  auto evaluate = [&](const std::vector<BasicTensor<T>>& ps) {
    Tape<T> tape;
    std::vector<Var<T>> vars;
    for (const auto& p : ps) vars.push_back(tape.leaf(p));
    return tape.value(build(tape, vars))[0];
  };

  Tape<T> tape;
  std::vector<Var<T>> vars;
  for (const auto& p : params) vars.push_back(tape.leaf(p));
  const Var<T> out = build(tape, vars);
  const auto analytic = tape.grad(out, vars);

  FdReport report;
  auto work = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<T> numeric(params[p].size());
    T scale_floor{0};
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const T orig = work[p][i];
      work[p][i] = orig + h;
      const T up = evaluate(work);
      work[p][i] = orig - h;
      const T down = evaluate(work);
      work[p][i] = orig;
      numeric[i] = (up - down) / (T{2} * h);
      scale_floor = std::max(scale_floor, std::abs(numeric[i]));
    }
    const T floor = std::max(T{1e-2} * scale_floor, T{1e-12});
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const T a = analytic[p][i], n = numeric[i];
      const T abs_err = std::abs(a - n);
      const T denom = std::max({std::abs(a), std::abs(n), floor});
      report.max_abs_error = std::max(report.max_abs_error, static_cast<double>(abs_err));
      report.max_rel_error = std::max(report.max_rel_error, static_cast<double>(abs_err / denom));
      ++report.checked;
    }
  }
  return report;
}

}  // namespace pka::ad

#pragma once

// Dense arrays with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared graph node. Operations build the
// graph dynamically as they execute; Tensor::backward() walks it once in
// reverse topological order and then releases every interior node, so a
// graph lives for exactly one forward/backward cycle. Leaves created with
// requires_grad (model parameters) keep their accumulated gradient until
// zero_grad().

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "somnus/errors.hpp"

namespace somnus {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

namespace detail {

inline thread_local bool grad_enabled = true;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool backward_done = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<T>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T{});
        return grad;
    }
};

}  // namespace detail

/// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
   public:
    NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
    ~NoGradGuard() { detail::grad_enabled = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool previous_;
};

template <typename T>
class Tensor {
   public:
    using Node = detail::Node<T>;
    using value_type = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto node = std::make_shared<Node>();
        node->value.assign(shape_numel(shape), T{});
        node->shape = std::move(shape);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor full(Shape shape, T fill, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.node_->value.begin(), t.node_->value.end(), fill);
        return t;
    }

    static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size()) {
            throw ShapeError("tensor shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        }
        auto node = std::make_shared<Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<T> data() { return node_->value; }
    std::span<const T> data() const { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    /// Accumulated gradient; empty until a backward pass reached this node.
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->ensure_grad(); }
    bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->grad.empty(); }

    void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T{}); }

    T item() const {
        if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    T operator[](std::size_t i) const { return node_->value[i]; }

    /// Reverse-mode sweep from this scalar. Fills .grad() of every
    /// requires-grad leaf reachable from here, then frees the graph.
    void backward();

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

   private:
    std::shared_ptr<Node> node_;
};

namespace detail {

/// Creates an op result; records parents and the backward closure only when
/// gradients are enabled and some parent needs them.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    if (grad_enabled) {
        for (const auto& p : parents) needs = needs || p.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& p : parents) node->parents.push_back(p.node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& parents,
                      std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    if (grad_enabled) {
        for (const auto& p : parents) needs = needs || p.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& p : parents) node->parents.push_back(p.node_ptr());
        node->backward = std::move(backward);
    }
    return Tensor<T>(std::move(node));
}

// Parent gradient buffer, or nullptr when that parent does not need one.
template <typename T>
T* parent_grad(Node<T>& self, std::size_t i) {
    Node<T>& p = *self.parents[i];
    return p.requires_grad ? p.ensure_grad().data() : nullptr;
}

template <typename T>
void check_finite(std::span<const T> v, const char* op) {
    for (T x : v) {
        if (std::isnan(x)) throw NumericError(std::string(op) + ": NaN input");
    }
}

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

}  // namespace detail

template <typename T>
void Tensor<T>::backward() {
    if (numel() != 1) {
        throw UsageError("backward() needs a scalar root, got shape " + shape_str(shape()));
    }
    if (node_->backward_done) {
        throw UsageError("backward() already ran on this graph; rebuild it with a new forward pass");
    }
    if (!node_->requires_grad) {
        node_->backward_done = true;
        return;
    }

    // Iterative post-order DFS gives a topological order with every node once.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) n->backward(*n);
    }
    for (Node* n : order) {
        if (n->backward) {
            n->backward = nullptr;
            n->parents.clear();
            if (n != node_.get()) std::vector<T>().swap(n->grad);
        }
    }
    node_->backward_done = true;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

/// a [..., m, k] x b [k, n] -> [..., m, n], or batched a [B, m, k] x b [B, k, n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    using detail::ConstMatMap;
    using detail::MatMap;
    const auto mismatch = [&] {
        return ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    };
    if (a.ndim() < 1 || b.ndim() < 2) throw mismatch();

    if (b.ndim() == 2) {
        const std::size_t k = b.dim(0), n = b.dim(1);
        if (a.shape().back() != k) throw mismatch();
        const std::size_t m = a.numel() / k;
        Shape out_shape = a.shape();
        out_shape.back() = n;
        std::vector<T> out(m * n);
        MatMap<T>(out.data(), m, n).noalias() =
            ConstMatMap<T>(a.data().data(), m, k) * ConstMatMap<T>(b.data().data(), k, n);
        return detail::make_result<T>(std::move(out_shape), std::move(out), {a, b},
                                      [m, k, n](detail::Node<T>& self) {
                                          const auto& A = self.parents[0]->value;
                                          const auto& B = self.parents[1]->value;
                                          ConstMatMap<T> dC(self.grad.data(), m, n);
                                          if (T* ga = detail::parent_grad(self, 0)) {
                                              MatMap<T>(ga, m, k).noalias() +=
                                                  dC * ConstMatMap<T>(B.data(), k, n).transpose();
                                          }
                                          if (T* gb = detail::parent_grad(self, 1)) {
                                              MatMap<T>(gb, k, n).noalias() +=
                                                  ConstMatMap<T>(A.data(), m, k).transpose() * dC;
                                          }
                                      });
    }

    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) throw mismatch();
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<T> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
        MatMap<T>(out.data() + i * m * n, m, n).noalias() =
            ConstMatMap<T>(a.data().data() + i * m * k, m, k) * ConstMatMap<T>(b.data().data() + i * k * n, k, n);
    }
    return detail::make_result<T>({batch, m, n}, std::move(out), {a, b}, [batch, m, k, n](detail::Node<T>& self) {
        const auto& A = self.parents[0]->value;
        const auto& B = self.parents[1]->value;
        T* ga = detail::parent_grad(self, 0);
        T* gb = detail::parent_grad(self, 1);
        for (std::size_t i = 0; i < batch; ++i) {
            ConstMatMap<T> dC(self.grad.data() + i * m * n, m, n);
            if (ga) {
                MatMap<T>(ga + i * m * k, m, k).noalias() +=
                    dC * ConstMatMap<T>(B.data() + i * k * n, k, n).transpose();
            }
            if (gb) {
                MatMap<T>(gb + i * k * n, k, n).noalias() +=
                    ConstMatMap<T>(A.data() + i * m * k, m, k).transpose() * dC;
            }
        }
    });
}

/// Batched a [B, m, k] x b[B, n, k]^T -> [B, m, n].
template <typename T>
Tensor<T> matmul_transposed(const Tensor<T>& a, const Tensor<T>& b) {
    using detail::ConstMatMap;
    using detail::MatMap;
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2)) {
        throw ShapeError("matmul_transposed: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    std::vector<T> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
        MatMap<T>(out.data() + i * m * n, m, n).noalias() =
            ConstMatMap<T>(a.data().data() + i * m * k, m, k) *
            ConstMatMap<T>(b.data().data() + i * n * k, n, k).transpose();
    }
    return detail::make_result<T>({batch, m, n}, std::move(out), {a, b}, [batch, m, k, n](detail::Node<T>& self) {
        const auto& A = self.parents[0]->value;
        const auto& B = self.parents[1]->value;
        T* ga = detail::parent_grad(self, 0);
        T* gb = detail::parent_grad(self, 1);
        for (std::size_t i = 0; i < batch; ++i) {
            ConstMatMap<T> dC(self.grad.data() + i * m * n, m, n);
            if (ga) {
                MatMap<T>(ga + i * m * k, m, k).noalias() += dC * ConstMatMap<T>(B.data() + i * n * k, n, k);
            }
            if (gb) {
                MatMap<T>(gb + i * n * k, n, k).noalias() +=
                    dC.transpose() * ConstMatMap<T>(A.data() + i * m * k, m, k);
            }
        }
    });
}

/// x [..., k] W [k, n] + bias [n], fused so the pre-bias product is not kept.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    using detail::ConstMatMap;
    using detail::MatMap;
    if (weight.ndim() != 2 || bias.ndim() != 1 || x.ndim() < 1 || x.shape().back() != weight.dim(0) ||
        bias.dim(0) != weight.dim(1)) {
        throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + ", " + shape_str(weight.shape()) +
                         ", " + shape_str(bias.shape()));
    }
    const std::size_t k = weight.dim(0), n = weight.dim(1), m = x.numel() / k;
    Shape out_shape = x.shape();
    out_shape.back() = n;
    std::vector<T> out(m * n);
    MatMap<T> C(out.data(), m, n);
    C.noalias() = ConstMatMap<T>(x.data().data(), m, k) * ConstMatMap<T>(weight.data().data(), k, n);
    C.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), n);
    return detail::make_result<T>(std::move(out_shape), std::move(out), {x, weight, bias},
                                  [m, k, n](detail::Node<T>& self) {
                                      const auto& X = self.parents[0]->value;
                                      const auto& W = self.parents[1]->value;
                                      ConstMatMap<T> dC(self.grad.data(), m, n);
                                      if (T* gx = detail::parent_grad(self, 0)) {
                                          MatMap<T>(gx, m, k).noalias() += dC * ConstMatMap<T>(W.data(), k, n).transpose();
                                      }
                                      if (T* gw = detail::parent_grad(self, 1)) {
                                          MatMap<T>(gw, k, n).noalias() += ConstMatMap<T>(X.data(), m, k).transpose() * dC;
                                      }
                                      if (T* gb = detail::parent_grad(self, 2); gb && m > 0) {
                                          // Explicit row order: Eigen's colwise().sum() pairs rows
                                          // differently depending on buffer alignment.
                                          std::vector<T> colsum(self.grad.begin(), self.grad.begin() + static_cast<std::ptrdiff_t>(n));
                                          for (std::size_t r = 1; r < m; ++r) {
                                              const T* row = self.grad.data() + r * n;
                                              for (std::size_t c = 0; c < n; ++c) colsum[c] += row[c];
                                          }
                                          for (std::size_t c = 0; c < n; ++c) gb[c] += colsum[c];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Elementwise and broadcasting
// ---------------------------------------------------------------------------

namespace detail {

// True when `small` equals a trailing suffix of `big`.
inline bool is_suffix(const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

}  // namespace detail

/// a + b where b has a's shape or a trailing suffix of it (broadcast).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (!detail::is_suffix(a.shape(), b.shape())) {
        throw ShapeError("add: cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
    }
    const std::size_t n = a.numel(), period = b.numel();
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < n; i += period) {
        for (std::size_t j = 0; j < period; ++j) out[i + j] += bv[j];
    }
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [n, period](detail::Node<T>& self) {
        if (T* ga = detail::parent_grad(self, 0)) {
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[i];
        }
        if (T* gb = detail::parent_grad(self, 1)) {
            for (std::size_t i = 0; i < n; i += period) {
                for (std::size_t j = 0; j < period; ++j) gb[j] += self.grad[i + j];
            }
        }
    });
}

/// Elementwise product of equal shapes.
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& self) {
        const auto& A = self.parents[0]->value;
        const auto& B = self.parents[1]->value;
        T* ga = detail::parent_grad(self, 0);
        T* gb = detail::parent_grad(self, 1);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (ga) ga[i] += self.grad[i] * B[i];
            if (gb) gb[i] += self.grad[i] * A[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> out(x.values());
    for (T& v : out) v *= factor;
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [factor](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += factor * self.grad[i];
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.values());
    for (T& v : out) v = v > T{} ? v : T{};
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (self.value[i] > T{}) gx[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    std::vector<T> out(x.values());
    for (T& v : out) v = std::tanh(v);
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T y = self.value[i];
            gx[i] += self.grad[i] * (T{1} - y * y);
        }
    });
}

/// log(max(x, floor)); the gradient is zero where the floor is active.
template <typename T>
Tensor<T> log_floor(const Tensor<T>& x, T floor) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(x[i], floor));
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [floor](detail::Node<T>& self) {
        const auto& X = self.parents[0]->value;
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (X[i] > floor) gx[i] += self.grad[i] / X[i];
        }
    });
}

/// Sum of all entries, as a scalar.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T total{};
    for (T v : x.values()) total += v;
    return detail::make_result<T>({}, {total}, {x}, [](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        const T g = self.grad[0];
        const std::size_t n = self.parents[0]->value.size();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    });
}

/// Mean of all entries, as a scalar.
template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

/// Concatenate along the last dimension; all leading dimensions must agree.
template <typename T>
Tensor<T> concat_last_dim(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_last_dim: no inputs");
    Shape lead = parts[0].shape();
    if (lead.empty()) throw ShapeError("concat_last_dim: scalar input");
    lead.pop_back();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape l = p.shape();
        if (l.empty()) throw ShapeError("concat_last_dim: scalar input");
        widths.push_back(l.back());
        total += l.back();
        l.pop_back();
        if (l != lead) throw ShapeError("concat_last_dim: leading shape mismatch " + shape_str(p.shape()));
    }
    const std::size_t rows = shape_numel(lead);
    std::vector<T> out(rows * total);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& v = parts[p].values();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(v.data() + r * widths[p], widths[p], out.data() + r * total + offset);
        }
        offset += widths[p];
    }
    Shape out_shape = lead;
    out_shape.push_back(total);
    return detail::make_result<T>(std::move(out_shape), std::move(out), parts,
                                  [rows, total, widths](detail::Node<T>& self) {
                                      std::size_t off = 0;
                                      for (std::size_t p = 0; p < widths.size(); ++p) {
                                          if (T* gp = detail::parent_grad(self, p)) {
                                              for (std::size_t r = 0; r < rows; ++r) {
                                                  for (std::size_t j = 0; j < widths[p]; ++j) {
                                                      gp[r * widths[p] + j] += self.grad[r * total + off + j];
                                                  }
                                              }
                                          }
                                          off += widths[p];
                                      }
                                  });
}

/// Same data, new shape of equal element count.
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    return detail::make_result<T>(std::move(shape), x.values(), {x}, [](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Softmax over the last dimension with row-max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
    if (x.ndim() < 1 || x.shape().back() == 0) throw ShapeError("softmax_rows: empty rows");
    detail::check_finite<T>(x.data(), "softmax_rows");
    const std::size_t n = x.shape().back(), rows = x.numel() / n;
    std::vector<T> out(x.numel());
    const auto& in = x.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = in.data() + r * n;
        T* dst = out.data() + r * n;
        const T mx = *std::max_element(src, src + n);
        T total{};
        for (std::size_t j = 0; j < n; ++j) total += (dst[j] = std::exp(src[j] - mx));
        const T inv = T{1} / total;
        for (std::size_t j = 0; j < n; ++j) dst[j] *= inv;
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [rows, n](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = self.value.data() + r * n;
            const T* dy = self.grad.data() + r * n;
            T dot{};
            for (std::size_t j = 0; j < n; ++j) dot += dy[j] * y[j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (dy[j] - dot);
        }
    });
}

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Normalizes each row of x [..., d] to zero mean and unit variance, then
/// applies gain and bias of shape [d].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T epsilon = static_cast<T>(kLayerNormEpsilon)) {
    if (x.ndim() < 1 || x.shape().back() == 0 || gain.shape() != Shape{x.shape().back()} ||
        bias.shape() != gain.shape()) {
        throw ShapeError("layer_norm: incompatible shapes " + shape_str(x.shape()) + ", " +
                         shape_str(gain.shape()) + ", " + shape_str(bias.shape()));
    }
    const std::size_t d = x.shape().back(), rows = x.numel() / d;
    std::vector<T> out(x.numel());
    auto normalized = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    const auto& in = x.values();
    const auto& g = gain.values();
    const auto& b = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* src = in.data() + r * d;
        T mu{};
        for (std::size_t j = 0; j < d; ++j) mu += src[j];
        mu /= static_cast<T>(d);
        T var{};
        for (std::size_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
        var /= static_cast<T>(d);
        const T is = T{1} / std::sqrt(var + epsilon);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const T xh = (src[j] - mu) * is;
            (*normalized)[r * d + j] = xh;
            out[r * d + j] = xh * g[j] + b[j];
        }
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x, gain, bias},
                                  [rows, d, normalized, inv_std](detail::Node<T>& self) {
                                      const auto& G = self.parents[1]->value;
                                      T* gx = detail::parent_grad(self, 0);
                                      T* gg = detail::parent_grad(self, 1);
                                      T* gb = detail::parent_grad(self, 2);
                                      std::vector<T> dxh(d);
                                      for (std::size_t r = 0; r < rows; ++r) {
                                          const T* dy = self.grad.data() + r * d;
                                          const T* xh = normalized->data() + r * d;
                                          T mean_dxh{}, mean_dxh_xh{};
                                          for (std::size_t j = 0; j < d; ++j) {
                                              if (gg) gg[j] += dy[j] * xh[j];
                                              if (gb) gb[j] += dy[j];
                                              dxh[j] = dy[j] * G[j];
                                              mean_dxh += dxh[j];
                                              mean_dxh_xh += dxh[j] * xh[j];
                                          }
                                          if (!gx) continue;
                                          mean_dxh /= static_cast<T>(d);
                                          mean_dxh_xh /= static_cast<T>(d);
                                          const T is = (*inv_std)[r];
                                          for (std::size_t j = 0; j < d; ++j) {
                                              gx[r * d + j] += is * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                                          }
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Regularization and attention plumbing
// ---------------------------------------------------------------------------

/// Inverted dropout: survivors are scaled by 1/(1 - rate); identity when
/// train is false or rate is zero.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, bool train, std::mt19937_64& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (!train || rate == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<T>>(x.numel());
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T m = detail::uniform01(rng) < rate ? T{} : keep_scale;
        (*mask)[i] = m;
        out[i] = x[i] * m;
    }
    return detail::make_result<T>(x.shape(), std::move(out), {x}, [mask](detail::Node<T>& self) {
        T* gx = detail::parent_grad(self, 0);
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * (*mask)[i];
    });
}

/// [B, l, H*k] -> [B*H, l, k]: head h takes columns [h*k, (h+1)*k).
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
    if (x.ndim() != 3 || heads == 0 || x.dim(2) % heads != 0) {
        throw ShapeError("split_heads: cannot split " + shape_str(x.shape()) + " into " + std::to_string(heads) +
                         " heads");
    }
    const std::size_t batch = x.dim(0), len = x.dim(1), width = x.dim(2), k = width / heads;
    std::vector<T> out(x.numel());
    const auto& in = x.values();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < len; ++i)
                std::copy_n(in.data() + (b * len + i) * width + h * k, k, out.data() + ((b * heads + h) * len + i) * k);
    return detail::make_result<T>({batch * heads, len, k}, std::move(out), {x},
                                  [batch, heads, len, width, k](detail::Node<T>& self) {
                                      T* gx = detail::parent_grad(self, 0);
                                      for (std::size_t b = 0; b < batch; ++b)
                                          for (std::size_t h = 0; h < heads; ++h)
                                              for (std::size_t i = 0; i < len; ++i) {
                                                  const T* src = self.grad.data() + ((b * heads + h) * len + i) * k;
                                                  T* dst = gx + (b * len + i) * width + h * k;
                                                  for (std::size_t j = 0; j < k; ++j) dst[j] += src[j];
                                              }
                                  });
}

/// Inverse of split_heads: [B*H, l, k] -> [B, l, H*k].
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
    if (x.ndim() != 3 || heads == 0 || x.dim(0) % heads != 0) {
        throw ShapeError("merge_heads: cannot merge " + shape_str(x.shape()) + " over " + std::to_string(heads) +
                         " heads");
    }
    const std::size_t batch = x.dim(0) / heads, len = x.dim(1), k = x.dim(2), width = heads * k;
    std::vector<T> out(x.numel());
    const auto& in = x.values();
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < len; ++i)
                std::copy_n(in.data() + ((b * heads + h) * len + i) * k, k, out.data() + (b * len + i) * width + h * k);
    return detail::make_result<T>({batch, len, width}, std::move(out), {x},
                                  [batch, heads, len, width, k](detail::Node<T>& self) {
                                      T* gx = detail::parent_grad(self, 0);
                                      for (std::size_t b = 0; b < batch; ++b)
                                          for (std::size_t h = 0; h < heads; ++h)
                                              for (std::size_t i = 0; i < len; ++i) {
                                                  const T* src = self.grad.data() + (b * len + i) * width + h * k;
                                                  T* dst = gx + ((b * heads + h) * len + i) * k;
                                                  for (std::size_t j = 0; j < k; ++j) dst[j] += src[j];
                                              }
                                  });
}

}  // namespace somnus

#pragma once

// Dense rank-2 tensors with reverse-mode differentiation.
//
// Every op allocates a node that remembers its parents and a backward rule.
// Nodes are numbered in creation order, so sorting the nodes reachable from a
// loss by descending sequence number yields a valid reverse topological order
// (a node can only be created after its inputs).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "chartnet/error.hpp"

namespace chartnet {

/// Row-major dense matrix. Vectors are 1 x n or n x 1, scalars are 1 x 1.
template <typename T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<T> values) : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != r * c) {
            throw ShapeError("matrix: " + std::to_string(data.size()) + " values for shape " +
                             std::to_string(r) + "x" + std::to_string(c));
        }
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<T>> init) {
        Matrix m;
        m.rows = init.size();
        m.cols = m.rows == 0 ? 0 : init.begin()->size();
        for (const auto& row : init) {
            if (row.size() != m.cols) throw ShapeError("matrix: ragged initializer");
            m.data.insert(m.data.end(), row.begin(), row.end());
        }
        return m;
    }

    static Matrix scalar(T v) { return Matrix(1, 1, std::vector<T>{v}); }

    std::size_t size() const noexcept { return data.size(); }
    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows, cols);
        std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    bool operator==(const Matrix&) const = default;
};

inline std::string shape_string(std::size_t r, std::size_t c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

/// Numerically stable logistic function.
template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

namespace detail {

inline std::uint64_t next_sequence() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

template <typename T>
struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    std::uint64_t sequence = next_sequence();
    const char* op = "leaf";

    void ensure_grad() {
        if (grad.rows != value.rows || grad.cols != value.cols) grad = Matrix<T>(value.rows, value.cols);
    }
};

} // namespace detail

template <typename T>
class Tensor;

template <typename T>
void backward(const Tensor<T>& loss);

/// Handle to a node of the computation graph. Copies share the node.
template <typename T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;

    static Tensor constant(Matrix<T> value) { return make_leaf(std::move(value), false); }
    static Tensor parameter(Matrix<T> value) { return make_leaf(std::move(value), true); }
    static Tensor scalar(T v) { return constant(Matrix<T>::scalar(v)); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Matrix<T>& value() const { return node_->value; }
    std::size_t rows() const { return node_->value.rows; }
    std::size_t cols() const { return node_->value.cols; }
    T item() const {
        if (node_->value.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(rows(), cols()));
        return node_->value.data[0];
    }
    T at(std::size_t r, std::size_t c) const { return node_->value(r, c); }

    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    bool is_leaf() const noexcept { return node_->is_leaf; }
    const char* op_name() const noexcept { return node_->op; }

    /// Gradient accumulated by backward(); zeros when nothing has flowed yet.
    const Matrix<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (node_) node_->grad = Matrix<T>(rows(), cols());
    }

    /// In-place access for optimizers. Only valid on leaves.
    Matrix<T>& mutable_value() {
        if (!node_->is_leaf) throw DomainError("mutable_value() on a non-leaf tensor");
        return node_->value;
    }

    /// Same values, cut from the graph.
    Tensor detach() const { return constant(node_->value); }

    // Internal: used by the op implementations.
    const std::shared_ptr<detail::Node<T>>& node() const noexcept { return node_; }
    static Tensor from_node(std::shared_ptr<detail::Node<T>> n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

  private:
    static Tensor make_leaf(Matrix<T> value, bool requires_grad) {
        for (T v : value.data) {
            if (!std::isfinite(v)) throw NonFiniteError("tensor: non-finite value in leaf");
        }
        auto n = std::make_shared<detail::Node<T>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return from_node(std::move(n));
    }

    std::shared_ptr<detail::Node<T>> node_;
};

using Mask = Matrix<unsigned char>;

namespace detail {

template <typename T>
Tensor<T> make_result(const char* op, Matrix<T> value, std::vector<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> rule) {
    for (T v : value.data) {
        if (!std::isfinite(v)) throw NonFiniteError(std::string("op '") + op + "' produced a non-finite value");
    }
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->op = op;
    n->is_leaf = false;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    n->requires_grad = any;
    if (any) {
        for (auto& in : inputs) n->parents.push_back(in.node());
        n->backward = std::move(rule);
    }
    return Tensor<T>::from_node(std::move(n));
}

inline std::pair<std::size_t, std::size_t> broadcast_shape(std::size_t ar, std::size_t ac, std::size_t br,
                                                           std::size_t bc, const char* op) {
    auto one = [&](std::size_t x, std::size_t y) -> std::size_t {
        if (x == y) return x;
        if (x == 1) return y;
        if (y == 1) return x;
        throw ShapeError(std::string(op) + ": shapes " + shape_string(ar, ac) + " and " + shape_string(br, bc) +
                         " do not broadcast");
    };
    return {one(ar, br), one(ac, bc)};
}

template <typename T>
inline T bget(const Matrix<T>& m, std::size_t r, std::size_t c) {
    return m(m.rows == 1 ? 0 : r, m.cols == 1 ? 0 : c);
}

// Adds g (full broadcast shape) into dst, summing over broadcast dimensions.
template <typename T>
void accumulate_reduced(Matrix<T>& dst, const Matrix<T>& g) {
    for (std::size_t r = 0; r < g.rows; ++r) {
        for (std::size_t c = 0; c < g.cols; ++c) {
            dst(dst.rows == 1 ? 0 : r, dst.cols == 1 ? 0 : c) += g(r, c);
        }
    }
}

template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, DA dfa, DB dfb) {
    const auto& av = a.value();
    const auto& bv = b.value();
    auto [r, c] = broadcast_shape(av.rows, av.cols, bv.rows, bv.cols, op);
    Matrix<T> out(r, c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out(i, j) = f(bget(av, i, j), bget(bv, i, j));
    return make_result<T>(op, std::move(out), {a, b}, [dfa, dfb](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        const auto& g = self.grad;
        if (pa.requires_grad) {
            pa.ensure_grad();
            Matrix<T> ga(g.rows, g.cols);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j)
                    ga(i, j) = g(i, j) * dfa(bget(pa.value, i, j), bget(pb.value, i, j), self.value(i, j));
            accumulate_reduced(pa.grad, ga);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            Matrix<T> gb(g.rows, g.cols);
            for (std::size_t i = 0; i < g.rows; ++i)
                for (std::size_t j = 0; j < g.cols; ++j)
                    gb(i, j) = g(i, j) * dfb(bget(pa.value, i, j), bget(pb.value, i, j), self.value(i, j));
            accumulate_reduced(pb.grad, gb);
        }
    });
}

// dfdx receives (x, y) where y is the forward output.
template <typename T, typename F, typename D>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, D dfdx) {
    const auto& av = a.value();
    Matrix<T> out(av.rows, av.cols);
    for (std::size_t i = 0; i < av.size(); ++i) out.data[i] = f(av.data[i]);
    return make_result<T>(op, std::move(out), {a}, [dfdx](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            pa.grad.data[i] += self.grad.data[i] * dfdx(pa.value.data[i], self.value.data[i]);
    });
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); }, [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; }, [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    for (T v : b.value().data) {
        if (v == T(0)) throw DomainError("div: division by zero");
    }
    return detail::binary<T>(
        "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T x, T y, T) { return -x / (y * y); });
}

/// max(a, s) for a scalar s. The derivative at a == s is 1.
template <typename T>
Tensor<T> maximum(const Tensor<T>& a, T s) {
    return detail::unary<T>(
        "maximum", a, [s](T x) { return x >= s ? x : s; }, [s](T x, T) { return x >= s ? T(1) : T(0); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    return detail::unary<T>(
        "relu", a, [](T x) { return x >= T(0) ? x : T(0); }, [](T x, T) { return x >= T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary<T>(
        "sigmoid", a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    return detail::unary<T>(
        "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    for (T v : a.value().data) {
        if (v < T(0)) throw DomainError("log: negative argument");
    }
    return detail::unary<T>(
        "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return detail::unary<T>(
        "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return detail::unary<T>(
        "square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

/// sqrt; the derivative at exactly 0 is taken as 0.
template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
    for (T v : a.value().data) {
        if (v < T(0)) throw DomainError("sqrt: negative argument");
    }
    return detail::unary<T>(
        "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, T s) { return add(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> operator+(T s, const Tensor<T>& a) { return add(Tensor<T>::scalar(s), a); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, T s) { return sub(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, T s) { return mul(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> operator*(T s, const Tensor<T>& a) { return mul(Tensor<T>::scalar(s), a); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, T s) { return div(a, Tensor<T>::scalar(s)); }
template <typename T>
Tensor<T> operator/(T s, const Tensor<T>& a) { return div(Tensor<T>::scalar(s), a); }

/// Picks a where mask is set and b elsewhere. Shapes must match exactly.
template <typename T>
Tensor<T> where(const Mask& mask, const Tensor<T>& a, const Tensor<T>& b) {
    if (mask.rows != a.rows() || mask.cols != a.cols() || a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError("where: mask and operand shapes differ");
    }
    Matrix<T> out(a.rows(), a.cols());
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = mask.data[i] ? a.value().data[i] : b.value().data[i];
    return detail::make_result<T>("where", std::move(out), {a, b}, [mask](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (mask.data[i]) {
                if (pa.requires_grad) pa.grad.data[i] += self.grad.data[i];
            } else if (pb.requires_grad) {
                pb.grad.data[i] += self.grad.data[i];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and indexing
// ---------------------------------------------------------------------------

template <typename T>
Matrix<T> matmul_values(const Matrix<T>& a, const Matrix<T>& b) {
    Matrix<T> out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k) {
            const T aik = a(i, k);
            for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
        }
    return out;
}

template <typename T>
Matrix<T> transpose_values(const Matrix<T>& a) {
    Matrix<T> out(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
    return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.rows(), a.cols()) + " x " +
                         shape_string(b.rows(), b.cols()));
    }
    return detail::make_result<T>("matmul", matmul_values(a.value(), b.value()), {a, b}, [](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            const auto ga = matmul_values(self.grad, transpose_values(pb.value));
            for (std::size_t i = 0; i < ga.size(); ++i) pa.grad.data[i] += ga.data[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            const auto gb = matmul_values(transpose_values(pa.value), self.grad);
            for (std::size_t i = 0; i < gb.size(); ++i) pb.grad.data[i] += gb.data[i];
        }
    });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    return detail::make_result<T>("transpose", transpose_values(a.value()), {a}, [](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.rows; ++i)
            for (std::size_t j = 0; j < self.grad.cols; ++j) pa.grad(j, i) += self.grad(i, j);
    });
}

/// Columns [begin, end).
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
    if (begin >= end || end > a.cols()) throw ShapeError("slice_cols: bad column range");
    Matrix<T> out(a.rows(), end - begin);
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a.at(i, j);
    return detail::make_result<T>("slice_cols", std::move(out), {a}, [begin](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < self.grad.rows; ++i)
            for (std::size_t j = 0; j < self.grad.cols; ++j) pa.grad(i, j + begin) += self.grad(i, j);
    });
}

template <typename T>
Tensor<T> column(const Tensor<T>& a, std::size_t j) {
    return slice_cols(a, j, j + 1);
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::vector<std::size_t> index) {
    Matrix<T> out(index.size(), a.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= a.rows()) throw DomainError("gather_rows: index out of range");
        for (std::size_t j = 0; j < a.cols(); ++j) out(i, j) = a.at(index[i], j);
    }
    return detail::make_result<T>("gather_rows", std::move(out), {a},
                                  [index = std::move(index)](detail::Node<T>& self) {
                                      auto& pa = *self.parents[0];
                                      pa.ensure_grad();
                                      for (std::size_t i = 0; i < index.size(); ++i)
                                          for (std::size_t j = 0; j < self.grad.cols; ++j)
                                              pa.grad(index[i], j) += self.grad(i, j);
                                  });
}

/// Picks individual elements; the result is a column of size index.size().
template <typename T>
Tensor<T> gather(const Tensor<T>& a, std::vector<std::pair<std::size_t, std::size_t>> index) {
    Matrix<T> out(index.size(), 1);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i].first >= a.rows() || index[i].second >= a.cols()) throw DomainError("gather: index out of range");
        out.data[i] = a.at(index[i].first, index[i].second);
    }
    return detail::make_result<T>("gather", std::move(out), {a}, [index = std::move(index)](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (std::size_t i = 0; i < index.size(); ++i) pa.grad(index[i].first, index[i].second) += self.grad.data[i];
    });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
    const std::size_t cols = parts.front().cols();
    Matrix<T> out(0, cols);
    std::vector<std::size_t> offsets;
    for (const auto& p : parts) {
        if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
        offsets.push_back(out.rows);
        out.data.insert(out.data.end(), p.value().data.begin(), p.value().data.end());
        out.rows += p.rows();
    }
    return detail::make_result<T>("concat_rows", std::move(out), parts, [offsets](detail::Node<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = *self.parents[k];
            if (!p.requires_grad) continue;
            p.ensure_grad();
            const std::size_t base = offsets[k] * self.grad.cols;
            for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad.data[i] += self.grad.data[base + i];
        }
    });
}

/// D(j,k) = |a_j - b_k|^2 over rows of a [m x d] and b [p x d].
template <typename T>
Tensor<T> pairwise_sq_dist(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.cols()) throw ShapeError("pairwise_sq_dist: row dimensions differ");
    const auto& av = a.value();
    const auto& bv = b.value();
    Matrix<T> out(av.rows, bv.rows);
    for (std::size_t j = 0; j < av.rows; ++j)
        for (std::size_t k = 0; k < bv.rows; ++k) {
            T s = 0;
            for (std::size_t c = 0; c < av.cols; ++c) {
                const T diff = av(j, c) - bv(k, c);
                s += diff * diff;
            }
            out(j, k) = s;
        }
    return detail::make_result<T>("pairwise_sq_dist", std::move(out), {a, b}, [](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t j = 0; j < self.grad.rows; ++j)
            for (std::size_t k = 0; k < self.grad.cols; ++k) {
                const T g = self.grad(j, k);
                for (std::size_t c = 0; c < pa.value.cols; ++c) {
                    const T diff = T(2) * (pa.value(j, c) - pb.value(k, c)) * g;
                    if (pa.requires_grad) pa.grad(j, c) += diff;
                    if (pb.requires_grad) pb.grad(k, c) -= diff;
                }
            }
    });
}

/// D(j,k) = |a_j - b_k|. The subgradient at coincident points is 0.
template <typename T>
Tensor<T> pairwise_dist(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.cols()) throw ShapeError("pairwise_dist: row dimensions differ");
    const auto& av = a.value();
    const auto& bv = b.value();
    Matrix<T> out(av.rows, bv.rows);
    for (std::size_t j = 0; j < av.rows; ++j)
        for (std::size_t k = 0; k < bv.rows; ++k) {
            T s = 0;
            for (std::size_t c = 0; c < av.cols; ++c) {
                const T diff = av(j, c) - bv(k, c);
                s += diff * diff;
            }
            out(j, k) = std::sqrt(s);
        }
    return detail::make_result<T>("pairwise_dist", std::move(out), {a, b}, [](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        if (pa.requires_grad) pa.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        for (std::size_t j = 0; j < self.grad.rows; ++j)
            for (std::size_t k = 0; k < self.grad.cols; ++k) {
                const T dist = self.value(j, k);
                if (dist == T(0)) continue;
                const T g = self.grad(j, k) / dist;
                for (std::size_t c = 0; c < pa.value.cols; ++c) {
                    const T diff = (pa.value(j, c) - pb.value(k, c)) * g;
                    if (pa.requires_grad) pa.grad(j, c) += diff;
                    if (pb.requires_grad) pb.grad(k, c) -= diff;
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class Axis { rows = 0, cols = 1 };

namespace detail {

// Iteration helper for axis reductions. Axis::cols reduces along each row
// (output rows x 1), Axis::rows reduces down each column (output 1 x cols).
struct AxisView {
    std::size_t outer, inner, cols;
    bool along_cols;
    std::size_t index(std::size_t o, std::size_t i) const { return along_cols ? o * cols + i : i * cols + o; }
};

template <typename T>
AxisView axis_view(const Matrix<T>& m, Axis axis) {
    const bool along_cols = axis == Axis::cols;
    return {along_cols ? m.rows : m.cols, along_cols ? m.cols : m.rows, m.cols, along_cols};
}

} // namespace detail

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = 0;
    for (T v : a.value().data) s += v;
    return detail::make_result<T>("sum", Matrix<T>::scalar(s), {a}, [](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        const T g = self.grad.data[0];
        for (auto& v : pa.grad.data) v += g;
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, Axis axis) {
    const auto v = detail::axis_view(a.value(), axis);
    if (v.inner == 0) throw ShapeError("sum: empty axis");
    Matrix<T> out = v.along_cols ? Matrix<T>(a.rows(), 1) : Matrix<T>(1, a.cols());
    for (std::size_t o = 0; o < v.outer; ++o) {
        T s = 0;
        for (std::size_t i = 0; i < v.inner; ++i) s += a.value().data[v.index(o, i)];
        out.data[o] = s;
    }
    return detail::make_result<T>("sum_axis", std::move(out), {a}, [v](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t i = 0; i < v.inner; ++i) pa.grad.data[v.index(o, i)] += self.grad.data[o];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    if (a.value().size() == 0) throw ShapeError("mean: empty tensor");
    return sum(a) / static_cast<T>(a.value().size());
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, Axis axis) {
    const auto v = detail::axis_view(a.value(), axis);
    return sum(a, axis) / static_cast<T>(v.inner);
}

/// log(sum(exp)) along an axis, max-shifted. Entries whose mask byte is 0 are
/// excluded; every slice must keep at least one entry.
template <typename T>
Tensor<T> logsumexp(const Tensor<T>& a, Axis axis, const Mask* mask = nullptr) {
    const auto& av = a.value();
    if (mask && (mask->rows != av.rows || mask->cols != av.cols)) throw ShapeError("logsumexp: mask shape differs");
    const auto v = detail::axis_view(av, axis);
    auto keep = [mask](std::size_t idx) { return mask == nullptr || mask->data[idx] != 0; };
    Matrix<T> out = v.along_cols ? Matrix<T>(av.rows, 1) : Matrix<T>(1, av.cols);
    for (std::size_t o = 0; o < v.outer; ++o) {
        bool any = false;
        T mx = 0;
        for (std::size_t i = 0; i < v.inner; ++i) {
            const auto idx = v.index(o, i);
            if (!keep(idx)) continue;
            mx = any ? std::max(mx, av.data[idx]) : av.data[idx];
            any = true;
        }
        if (!any) throw ShapeError("logsumexp: empty axis");
        T s = 0;
        for (std::size_t i = 0; i < v.inner; ++i) {
            const auto idx = v.index(o, i);
            if (keep(idx)) s += std::exp(av.data[idx] - mx);
        }
        out.data[o] = mx + std::log(s);
    }
    Mask m = mask ? *mask : Mask(av.rows, av.cols, 1);
    return detail::make_result<T>("logsumexp", std::move(out), {a}, [v, m](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (std::size_t o = 0; o < v.outer; ++o) {
            const T lse = self.value.data[o];
            const T g = self.grad.data[o];
            for (std::size_t i = 0; i < v.inner; ++i) {
                const auto idx = v.index(o, i);
                if (m.data[idx]) pa.grad.data[idx] += g * std::exp(pa.value.data[idx] - lse);
            }
        }
    });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, Axis axis) {
    const auto& av = a.value();
    const auto v = detail::axis_view(av, axis);
    if (v.inner == 0) throw ShapeError("softmax: empty axis");
    Matrix<T> out(av.rows, av.cols);
    for (std::size_t o = 0; o < v.outer; ++o) {
        T mx = av.data[v.index(o, 0)];
        for (std::size_t i = 1; i < v.inner; ++i) mx = std::max(mx, av.data[v.index(o, i)]);
        T s = 0;
        for (std::size_t i = 0; i < v.inner; ++i) {
            const auto idx = v.index(o, i);
            out.data[idx] = std::exp(av.data[idx] - mx);
            s += out.data[idx];
        }
        for (std::size_t i = 0; i < v.inner; ++i) out.data[v.index(o, i)] /= s;
    }
    return detail::make_result<T>("softmax", std::move(out), {a}, [v](detail::Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (std::size_t o = 0; o < v.outer; ++o) {
            T dot = 0;
            for (std::size_t i = 0; i < v.inner; ++i) {
                const auto idx = v.index(o, i);
                dot += self.grad.data[idx] * self.value.data[idx];
            }
            for (std::size_t i = 0; i < v.inner; ++i) {
                const auto idx = v.index(o, i);
                pa.grad.data[idx] += self.value.data[idx] * (self.grad.data[idx] - dot);
            }
        }
    });
}

/// Index of the maximum along an axis; ties go to the lowest index.
template <typename T>
std::vector<std::size_t> argmax(const Matrix<T>& m, Axis axis) {
    const auto v = detail::axis_view(m, axis);
    if (v.inner == 0) throw ShapeError("argmax: empty axis");
    std::vector<std::size_t> out(v.outer, 0);
    for (std::size_t o = 0; o < v.outer; ++o) {
        T best = m.data[v.index(o, 0)];
        for (std::size_t i = 1; i < v.inner; ++i) {
            if (m.data[v.index(o, i)] > best) {
                best = m.data[v.index(o, i)];
                out[o] = i;
            }
        }
    }
    return out;
}

template <typename T>
std::vector<std::size_t> argmax(const Tensor<T>& a, Axis axis) {
    return argmax(a.value(), axis);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Accumulates dLoss/dLeaf into every requires-grad leaf reachable from loss.
/// Intermediate gradients are reset on each call; leaf gradients accumulate.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.value().size() != 1) throw ShapeError("backward: loss must be a scalar");
    if (!loss.requires_grad()) return;

    using NodePtr = detail::Node<T>*;
    std::vector<NodePtr> order;
    std::unordered_set<NodePtr> seen;
    std::vector<NodePtr> stack{loss.node().get()};
    while (!stack.empty()) {
        NodePtr n = stack.back();
        stack.pop_back();
        if (!seen.insert(n).second) continue;
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad) stack.push_back(p.get());
        }
    }
    std::sort(order.begin(), order.end(), [](NodePtr a, NodePtr b) { return a->sequence > b->sequence; });

    for (NodePtr n : order) {
        if (!n->is_leaf) n->grad = Matrix<T>(n->value.rows, n->value.cols);
    }
    auto* root = loss.node().get();
    root->ensure_grad();
    root->grad.data[0] += T(1);
    for (NodePtr n : order) {
        if (!n->is_leaf && n->backward) n->backward(*n);
    }
}

} // namespace chartnet

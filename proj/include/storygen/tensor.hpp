#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "storygen/errors.hpp"

namespace storygen {

using Shape = std::vector<std::size_t>;

std::size_t element_count(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

namespace detail {

template <typename Scalar>
struct TensorNode {
    Shape shape;
    std::vector<Scalar> data;
    std::vector<Scalar> grad;
    bool has_grad = false;
    bool requires_grad = false;
    // Generation of the computation record that produced this node; 0 = leaf.
    std::uint64_t generation = 0;
};

}  // namespace detail

/// Dense row-major tensor with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage, which is what lets
/// the computation record reach parameters and intermediates during backward().
/// Use clone() for a deep copy.
///
/// Matrix views (mat(), grad_mat()) treat rank-2 tensors as rows x cols and
/// rank-1 tensors as a single row.
template <typename Scalar>
class Tensor {
public:
    using scalar_type = Scalar;

    Tensor() : Tensor(Shape{0}) {}

    explicit Tensor(Shape shape, bool requires_grad = false)
        : node_(std::make_shared<detail::TensorNode<Scalar>>())
    {
        node_->data.assign(element_count(shape), Scalar(0));
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<Scalar> data, bool requires_grad = false)
        : node_(std::make_shared<detail::TensorNode<Scalar>>())
    {
        if (data.size() != element_count(shape)) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + to_string(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false)
    {
        return Tensor(std::move(shape), requires_grad);
    }

    static Tensor full(Shape shape, Scalar value)
    {
        Tensor t(std::move(shape));
        std::fill(t.node_->data.begin(), t.node_->data.end(), value);
        return t;
    }

    static Tensor scalar(Scalar value) { return Tensor(Shape{}, std::vector<Scalar>{value}); }

    static Tensor vector(std::initializer_list<Scalar> values)
    {
        return Tensor(Shape{values.size()}, std::vector<Scalar>(values));
    }

    static Tensor from_rows(std::initializer_list<std::initializer_list<Scalar>> rows)
    {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        std::vector<Scalar> data;
        data.reserve(r * c);
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("from_rows: ragged rows");
            data.insert(data.end(), row.begin(), row.end());
        }
        return Tensor(Shape{r, c}, std::move(data));
    }

    static Tensor from_matrix(const RowMatrix<Scalar>& m)
    {
        Tensor t(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
        t.mutable_mat() = m;
        return t;
    }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    bool empty() const { return numel() == 0; }

    std::size_t rows() const
    {
        std::size_t r = 1;
        for (std::size_t i = 0; i + 1 < rank(); ++i) r *= node_->shape[i];
        return r;
    }
    std::size_t cols() const { return rank() >= 1 ? node_->shape.back() : 1; }

    std::span<const Scalar> data() const { return node_->data; }
    std::span<Scalar> mutable_data() { return node_->data; }

    Scalar operator[](std::size_t i) const { return node_->data[i]; }
    Scalar at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

    Scalar item() const
    {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->data[0];
    }

    ConstMatrixMap<Scalar> mat() const
    {
        return ConstMatrixMap<Scalar>(node_->data.data(), static_cast<Eigen::Index>(rows()),
                                      static_cast<Eigen::Index>(cols()));
    }
    MatrixMap<Scalar> mutable_mat()
    {
        return MatrixMap<Scalar>(node_->data.data(), static_cast<Eigen::Index>(rows()),
                                 static_cast<Eigen::Index>(cols()));
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on)
    {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return node_->has_grad; }
    std::span<const Scalar> grad() const
    {
        if (!node_->has_grad) throw UsageError("tensor has no gradient");
        return node_->grad;
    }
    ConstMatrixMap<Scalar> grad_mat() const
    {
        grad();
        return ConstMatrixMap<Scalar>(node_->grad.data(), static_cast<Eigen::Index>(rows()),
                                      static_cast<Eigen::Index>(cols()));
    }

    /// Gradient buffer, allocated zero-filled on first access. The gradient slot
    /// is not part of the tensor's value, so const handles may accumulate into it.
    std::span<Scalar> mutable_grad() const
    {
        if (!node_->has_grad) {
            node_->grad.assign(numel(), Scalar(0));
            node_->has_grad = true;
        }
        return node_->grad;
    }
    MatrixMap<Scalar> mutable_grad_mat() const
    {
        mutable_grad();
        return MatrixMap<Scalar>(node_->grad.data(), static_cast<Eigen::Index>(rows()),
                                 static_cast<Eigen::Index>(cols()));
    }

    void zero_grad() const
    {
        if (node_->has_grad) std::fill(node_->grad.begin(), node_->grad.end(), Scalar(0));
    }
    void clear_grad() const
    {
        node_->grad.clear();
        node_->grad.shrink_to_fit();
        node_->has_grad = false;
    }

    /// Deep copy of shape and data; the copy is a fresh leaf without gradient.
    Tensor clone() const { return Tensor(shape(), node_->data, false); }

    /// Same data viewed as a leaf that no computation record tracks.
    Tensor detach() const { return clone(); }

    template <typename Other>
    Tensor<Other> cast() const
    {
        std::vector<Other> out(node_->data.begin(), node_->data.end());
        return Tensor<Other>(shape(), std::move(out), requires_grad());
    }

    bool aliases(const Tensor& other) const { return node_ == other.node_; }

    // Internal: used by ComputationRecord and the primitive ops.
    detail::TensorNode<Scalar>& node() const { return *node_; }

private:
    std::shared_ptr<detail::TensorNode<Scalar>> node_;
};

/// Thread-local switch that disables recording. Parameters may then be read
/// concurrently by many inference workers.
class GradMode {
public:
    static bool enabled();
    static void set_enabled(bool on);
};

class NoGradGuard {
public:
    NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
    ~NoGradGuard() { GradMode::set_enabled(previous_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Ordered log of executed primitives for the current thread.
///
/// backward() replays the log in reverse execution order and then clears it,
/// so a second backward() without a new forward pass is a UsageError.
template <typename Scalar>
class ComputationRecord {
public:
    using Backward = std::function<void()>;

    static ComputationRecord& current();

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    std::uint64_t generation() const { return generation_; }

    /// Registers `output` as produced by a tracked op with the given backward rule.
    void record(Tensor<Scalar>& output, Backward rule);

    void backward(const Tensor<Scalar>& loss);

    /// Drops all entries (e.g. after a forward pass whose graph is not needed).
    void clear();

private:
    struct Entry {
        const detail::TensorNode<Scalar>* output;
        Backward rule;
    };
    std::vector<Entry> entries_;
    std::uint64_t generation_ = 1;
};

template <typename Scalar>
void backward(const Tensor<Scalar>& loss)
{
    ComputationRecord<Scalar>::current().backward(loss);
}

}  // namespace storygen

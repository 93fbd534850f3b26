#include "storygen/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace storygen {

namespace {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar, typename... Ts>
bool tracking(const Ts&... inputs)
{
    return GradMode::enabled() && (inputs.requires_grad() || ...);
}

template <typename Scalar>
void record(Tensor<Scalar>& out, std::function<void()> rule)
{
    ComputationRecord<Scalar>::current().record(out, std::move(rule));
}

template <typename Scalar>
void require_rank2(const Tensor<Scalar>& t, const char* op)
{
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " + to_string(t.shape()));
    }
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op)
{
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
    }
}

template <typename Scalar>
void require_finite(const Tensor<Scalar>& x, const char* op)
{
    for (Scalar v : x.data()) {
        if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
    }
}

// Map over a raw span as rows x cols.
template <typename Scalar>
MatrixMap<Scalar> as_matrix(std::span<Scalar> s, std::size_t rows, std::size_t cols)
{
    return MatrixMap<Scalar>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

template <typename Scalar>
ConstMatrixMap<Scalar> as_matrix(std::span<const Scalar> s, std::size_t rows, std::size_t cols)
{
    return ConstMatrixMap<Scalar>(s.data(), static_cast<Eigen::Index>(rows),
                                  static_cast<Eigen::Index>(cols));
}

template <typename Scalar>
Scalar logistic(Scalar x)
{
    return Scalar(1) / (Scalar(1) + std::exp(-x));
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
    }
    Tensor<Scalar> out(Shape{a.dim(0), b.dim(1)});
    if (a.dim(1) == 0) {
        out.mutable_mat().setZero();
    } else {
        out.mutable_mat().noalias() = a.mat() * b.mat();
    }
    if (tracking<Scalar>(a, b)) {
        record(out, [a, b, out]() mutable {
            const auto g = out.grad_mat();
            if (a.requires_grad()) a.mutable_grad_mat().noalias() += g * b.mat().transpose();
            if (b.requires_grad()) b.mutable_grad_mat().noalias() += a.mat().transpose() * g;
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a)
{
    require_rank2(a, "transpose");
    Tensor<Scalar> out(Shape{a.dim(1), a.dim(0)});
    out.mutable_mat() = a.mat().transpose();
    if (tracking<Scalar>(a)) {
        record(out, [a, out]() mutable { a.mutable_grad_mat() += out.grad_mat().transpose(); });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    require_same_shape(a, b, "add");
    Tensor<Scalar> out(a.shape());
    out.mutable_mat() = a.mat() + b.mat();
    if (tracking<Scalar>(a, b)) {
        record(out, [a, b, out]() mutable {
            if (a.requires_grad()) a.mutable_grad_mat() += out.grad_mat();
            if (b.requires_grad()) b.mutable_grad_mat() += out.grad_mat();
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> subtract(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    require_same_shape(a, b, "subtract");
    Tensor<Scalar> out(a.shape());
    out.mutable_mat() = a.mat() - b.mat();
    if (tracking<Scalar>(a, b)) {
        record(out, [a, b, out]() mutable {
            if (a.requires_grad()) a.mutable_grad_mat() += out.grad_mat();
            if (b.requires_grad()) b.mutable_grad_mat() -= out.grad_mat();
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> add_bias(const Tensor<Scalar>& a, const Tensor<Scalar>& bias)
{
    if (bias.rank() != 1 || bias.dim(0) != a.cols()) {
        throw ShapeError("add_bias: bias " + to_string(bias.shape()) + " does not fit rows of " +
                         to_string(a.shape()));
    }
    Tensor<Scalar> out(a.shape());
    out.mutable_mat() = a.mat().rowwise() + bias.mat().row(0);
    if (tracking<Scalar>(a, bias)) {
        record(out, [a, bias, out]() mutable {
            const auto g = out.grad_mat();
            if (a.requires_grad()) a.mutable_grad_mat() += g;
            if (bias.requires_grad()) bias.mutable_grad_mat().row(0) += g.colwise().sum();
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> multiply(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    require_same_shape(a, b, "multiply");
    Tensor<Scalar> out(a.shape());
    out.mutable_mat() = a.mat().cwiseProduct(b.mat());
    if (tracking<Scalar>(a, b)) {
        record(out, [a, b, out]() mutable {
            const auto g = out.grad_mat();
            if (a.requires_grad()) a.mutable_grad_mat() += g.cwiseProduct(b.mat());
            if (b.requires_grad()) b.mutable_grad_mat() += g.cwiseProduct(a.mat());
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor)
{
    Tensor<Scalar> out(a.shape());
    out.mutable_mat() = a.mat() * factor;
    if (tracking<Scalar>(a)) {
        record(out, [a, factor, out]() mutable { a.mutable_grad_mat() += out.grad_mat() * factor; });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x)
{
    Tensor<Scalar> out(x.shape());
    auto y = out.mutable_data();
    const auto in = x.data();
    for (std::size_t i = 0; i < in.size(); ++i) y[i] = logistic(in[i]);
    if (tracking<Scalar>(x)) {
        record(out, [x, out]() mutable {
            auto gx = x.mutable_grad();
            const auto g = out.grad();
            const auto y = out.data();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (Scalar(1) - y[i]);
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> glu(const Tensor<Scalar>& x)
{
    if (x.rank() == 0 || x.cols() % 2 != 0) {
        throw ShapeError("glu: last extent must be even, got " + to_string(x.shape()));
    }
    const std::size_t rows = x.rows();
    const std::size_t half = x.cols() / 2;
    Shape shape = x.shape();
    shape.back() = half;
    Tensor<Scalar> out(shape);
    // Gate values are kept for the backward pass.
    std::vector<Scalar> gate(rows * half);
    {
        const auto in = x.data();
        auto y = out.mutable_data();
        for (std::size_t r = 0; r < rows; ++r) {
            const Scalar* row = in.data() + r * 2 * half;
            for (std::size_t c = 0; c < half; ++c) {
                const Scalar s = logistic(row[half + c]);
                gate[r * half + c] = s;
                y[r * half + c] = row[c] * s;
            }
        }
    }
    if (tracking<Scalar>(x)) {
        record(out, [x, out, gate = std::move(gate), rows, half]() mutable {
            auto gx = x.mutable_grad();
            const auto g = out.grad();
            const auto in = x.data();
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < half; ++c) {
                    const std::size_t o = r * half + c;
                    const std::size_t ia = r * 2 * half + c;
                    const Scalar s = gate[o];
                    gx[ia] += g[o] * s;
                    gx[ia + half] += g[o] * in[ia] * s * (Scalar(1) - s);
                }
            }
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, std::size_t axis)
{
    if (axis >= x.rank()) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         to_string(x.shape()));
    }
    const std::size_t n = x.dim(axis);
    if (n == 0) throw ShapeError("softmax: empty axis in " + to_string(x.shape()));
    require_finite(x, "softmax");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

    Tensor<Scalar> out(x.shape());
    const auto in = x.data();
    auto y = out.mutable_data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < inner; ++k) {
            const std::size_t base = o * n * inner + k;
            Scalar mx = in[base];
            for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
            Scalar total = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const Scalar e = std::exp(in[base + i * inner] - mx);
                y[base + i * inner] = e;
                total += e;
            }
            for (std::size_t i = 0; i < n; ++i) y[base + i * inner] /= total;
        }
    }
    if (tracking<Scalar>(x)) {
        record(out, [x, out, outer, inner, n]() mutable {
            auto gx = x.mutable_grad();
            const auto g = out.grad();
            const auto y = out.data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t k = 0; k < inner; ++k) {
                    const std::size_t base = o * n * inner + k;
                    Scalar dot = 0;
                    for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t j = base + i * inner;
                        gx[j] += y[j] * (g[j] - dot);
                    }
                }
            }
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> masked_softmax(const Tensor<Scalar>& x, std::span<const std::uint8_t> mask)
{
    require_rank2(x, "masked_softmax");
    if (mask.size() != x.numel()) {
        throw ShapeError("masked_softmax: mask has " + std::to_string(mask.size()) +
                         " entries for scores " + to_string(x.shape()));
    }
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<std::uint8_t> keep(mask.begin(), mask.end());
    Tensor<Scalar> out(x.shape());
    const auto in = x.data();
    auto y = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t base = r * cols;
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        bool any = false;
        for (std::size_t c = 0; c < cols; ++c) {
            if (!keep[base + c]) continue;
            if (!std::isfinite(in[base + c])) throw NumericError("masked_softmax: non-finite input");
            mx = any ? std::max(mx, in[base + c]) : in[base + c];
            any = true;
        }
        if (!any) throw UsageError("masked_softmax: row " + std::to_string(r) + " has no unmasked entry");
        Scalar total = 0;
        for (std::size_t c = 0; c < cols; ++c) {
            const Scalar e = keep[base + c] ? std::exp(in[base + c] - mx) : Scalar(0);
            y[base + c] = e;
            total += e;
        }
        for (std::size_t c = 0; c < cols; ++c) y[base + c] /= total;
    }
    if (tracking<Scalar>(x)) {
        record(out, [x, out, rows, cols]() mutable {
            auto gx = x.mutable_grad();
            const auto g = out.grad();
            const auto y = out.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t base = r * cols;
                Scalar dot = 0;
                for (std::size_t c = 0; c < cols; ++c) dot += g[base + c] * y[base + c];
                for (std::size_t c = 0; c < cols; ++c) gx[base + c] += y[base + c] * (g[base + c] - dot);
            }
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias)
{
    const std::size_t d = x.cols();
    if (x.rank() == 0 || d == 0) throw ShapeError("layer_norm: empty feature axis");
    if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
        throw ShapeError("layer_norm: gain " + to_string(gain.shape()) + " / bias " +
                         to_string(bias.shape()) + " do not match features of " + to_string(x.shape()));
    }
    const std::size_t rows = x.rows();
    Tensor<Scalar> out(x.shape());
    RowMatrix<Scalar> normalized(rows, d);
    Vec<Scalar> inv_std(rows);
    const auto X = x.mat();
    const Scalar eps = static_cast<Scalar>(kLayerNormEpsilon);
    for (std::size_t r = 0; r < rows; ++r) {
        const Scalar mu = X.row(r).mean();
        const Scalar var = (X.row(r).array() - mu).square().mean();
        inv_std(r) = Scalar(1) / std::sqrt(var + eps);
        normalized.row(r) = (X.row(r).array() - mu) * inv_std(r);
    }
    out.mutable_mat() =
        (normalized.array().rowwise() * gain.mat().row(0).array()).rowwise() + bias.mat().row(0).array();
    if (tracking<Scalar>(x, gain, bias)) {
        record(out, [x, gain, bias, out, normalized = std::move(normalized),
                     inv_std = std::move(inv_std), rows, d]() mutable {
            const auto g = out.grad_mat();
            if (gain.requires_grad()) {
                gain.mutable_grad_mat().row(0) += g.cwiseProduct(normalized).colwise().sum();
            }
            if (bias.requires_grad()) bias.mutable_grad_mat().row(0) += g.colwise().sum();
            if (x.requires_grad()) {
                auto gx = x.mutable_grad_mat();
                const Scalar inv_d = Scalar(1) / static_cast<Scalar>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    const auto dxhat = (g.row(r).array() * gain.mat().row(0).array()).matrix();
                    const Scalar s1 = dxhat.sum();
                    const Scalar s2 = dxhat.dot(normalized.row(r));
                    gx.row(r).array() += inv_std(r) * inv_d *
                                         (static_cast<Scalar>(d) * dxhat.array() - s1 -
                                          normalized.row(r).array() * s2);
                }
            }
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> conv1d(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, std::size_t left_pad, std::size_t right_pad)
{
    require_rank2(input, "conv1d");
    if (kernel.rank() != 3 || kernel.dim(1) != input.dim(1) || kernel.dim(0) == 0) {
        throw ShapeError("conv1d: kernel " + to_string(kernel.shape()) + " does not match input " +
                         to_string(input.shape()));
    }
    const std::size_t steps = input.dim(0);
    const std::size_t width = kernel.dim(0);
    const std::size_t cin = kernel.dim(1);
    const std::size_t cout = kernel.dim(2);
    if (bias.shape() != Shape{cout}) {
        throw ShapeError("conv1d: bias " + to_string(bias.shape()) + " does not match kernel " +
                         to_string(kernel.shape()));
    }
    const std::size_t padded = steps + left_pad + right_pad;
    const std::size_t out_steps = padded >= width ? padded - width + 1 : 0;

    // Tap j reads input row (o + j - left_pad) for output row o.
    struct Span {
        std::size_t out_begin, in_begin, count;
    };
    std::vector<Span> spans(width, Span{0, 0, 0});
    for (std::size_t j = 0; j < width; ++j) {
        const long long shift = static_cast<long long>(j) - static_cast<long long>(left_pad);
        const long long lo = std::max<long long>(0, -shift);
        const long long hi = std::min<long long>(static_cast<long long>(out_steps),
                                                 static_cast<long long>(steps) - shift);
        if (hi > lo) {
            spans[j] = Span{static_cast<std::size_t>(lo), static_cast<std::size_t>(lo + shift),
                            static_cast<std::size_t>(hi - lo)};
        }
    }

    Tensor<Scalar> out(Shape{out_steps, cout});
    {
        auto Y = out.mutable_mat();
        Y.rowwise() = bias.mat().row(0);
        const auto X = input.mat();
        const auto K = kernel.data();
        for (std::size_t j = 0; j < width; ++j) {
            const auto& s = spans[j];
            if (s.count == 0 || cin == 0) continue;
            const auto Kj = as_matrix(K.subspan(j * cin * cout, cin * cout), cin, cout);
            Y.middleRows(s.out_begin, s.count).noalias() += X.middleRows(s.in_begin, s.count) * Kj;
        }
    }
    if (tracking<Scalar>(input, kernel, bias)) {
        record(out, [input, kernel, bias, out, spans = std::move(spans), width, cin, cout]() mutable {
            const auto G = out.grad_mat();
            if (bias.requires_grad()) bias.mutable_grad_mat().row(0) += G.colwise().sum();
            for (std::size_t j = 0; j < width; ++j) {
                const auto& s = spans[j];
                if (s.count == 0 || cin == 0) continue;
                if (input.requires_grad()) {
                    const auto Kj = as_matrix(kernel.data().subspan(j * cin * cout, cin * cout), cin, cout);
                    input.mutable_grad_mat().middleRows(s.in_begin, s.count).noalias() +=
                        G.middleRows(s.out_begin, s.count) * Kj.transpose();
                }
                if (kernel.requires_grad()) {
                    auto dK = as_matrix(kernel.mutable_grad().subspan(j * cin * cout, cin * cout), cin, cout);
                    dK.noalias() += input.mat().middleRows(s.in_begin, s.count).transpose() *
                                    G.middleRows(s.out_begin, s.count);
                }
            }
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> conv1d_causal(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                             const Tensor<Scalar>& bias)
{
    if (kernel.rank() != 3 || kernel.dim(0) == 0) {
        throw ShapeError("conv1d_causal: bad kernel shape " + to_string(kernel.shape()));
    }
    return conv1d(input, kernel, bias, kernel.dim(0) - 1, 0);
}

template <typename Scalar>
Tensor<Scalar> conv1d_centered(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                               const Tensor<Scalar>& bias)
{
    if (kernel.rank() != 3 || kernel.dim(0) == 0) {
        throw ShapeError("conv1d_centered: bad kernel shape " + to_string(kernel.shape()));
    }
    const std::size_t total = kernel.dim(0) - 1;
    return conv1d(input, kernel, bias, total / 2, total - total / 2);
}

template <typename Scalar>
Tensor<Scalar> concat(std::span<const Tensor<Scalar>> parts, std::size_t axis)
{
    if (parts.empty()) throw ShapeError("concat: no inputs");
    if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
    bool all_vectors = true;
    for (const auto& p : parts) {
        if (p.rank() > 2 || p.rank() == 0) throw ShapeError("concat: inputs must be rank 1 or 2");
        all_vectors = all_vectors && p.rank() == 1;
    }
    std::size_t rows = 0, cols = 0;
    if (axis == 0) {
        cols = parts[0].cols();
        for (const auto& p : parts) {
            if (p.cols() != cols) {
                throw ShapeError("concat: column mismatch " + to_string(parts[0].shape()) + " vs " +
                                 to_string(p.shape()));
            }
            rows += p.rows();
        }
    } else {
        rows = parts[0].rows();
        for (const auto& p : parts) {
            if (p.rows() != rows) {
                throw ShapeError("concat: row mismatch " + to_string(parts[0].shape()) + " vs " +
                                 to_string(p.shape()));
            }
            cols += p.cols();
        }
    }
    Tensor<Scalar> out(all_vectors && axis == 1 ? Shape{cols} : Shape{rows, cols});
    {
        auto Y = out.mutable_mat();
        std::size_t offset = 0;
        for (const auto& p : parts) {
            if (axis == 0) {
                Y.middleRows(offset, p.rows()) = p.mat();
                offset += p.rows();
            } else {
                Y.middleCols(offset, p.cols()) = p.mat();
                offset += p.cols();
            }
        }
    }
    bool track = false;
    for (const auto& p : parts) track = track || p.requires_grad();
    if (GradMode::enabled() && track) {
        std::vector<Tensor<Scalar>> inputs(parts.begin(), parts.end());
        record(out, [inputs = std::move(inputs), out, axis]() mutable {
            const auto G = out.grad_mat();
            std::size_t offset = 0;
            for (auto& p : inputs) {
                const std::size_t n = axis == 0 ? p.rows() : p.cols();
                if (p.requires_grad()) {
                    if (axis == 0) {
                        p.mutable_grad_mat() += G.middleRows(offset, n);
                    } else {
                        p.mutable_grad_mat() += G.middleCols(offset, n);
                    }
                }
                offset += n;
            }
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> select_rows(const Tensor<Scalar>& x, std::span<const std::size_t> indices)
{
    require_rank2(x, "select_rows");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    for (auto i : idx) {
        if (i >= rows) {
            throw BoundsError("select_rows: row " + std::to_string(i) + " out of range for " +
                              to_string(x.shape()));
        }
    }
    Tensor<Scalar> out(Shape{idx.size(), cols});
    {
        auto Y = out.mutable_mat();
        const auto X = x.mat();
        for (std::size_t r = 0; r < idx.size(); ++r) Y.row(r) = X.row(idx[r]);
    }
    if (tracking<Scalar>(x)) {
        record(out, [x, out, idx = std::move(idx)]() mutable {
            auto gx = x.mutable_grad_mat();
            const auto G = out.grad_mat();
            for (std::size_t r = 0; r < idx.size(); ++r) gx.row(idx[r]) += G.row(r);
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& x, std::size_t begin, std::size_t end)
{
    require_rank2(x, "slice_rows");
    if (begin > end || end > x.dim(0)) {
        throw BoundsError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                          ") out of range for " + to_string(x.shape()));
    }
    Tensor<Scalar> out(Shape{end - begin, x.dim(1)});
    out.mutable_mat() = x.mat().middleRows(begin, end - begin);
    if (tracking<Scalar>(x)) {
        record(out, [x, out, begin]() mutable {
            x.mutable_grad_mat().middleRows(begin, out.dim(0)) += out.grad_mat();
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> embed(std::span<const TokenId> ids, const Tensor<Scalar>& table)
{
    require_rank2(table, "embed");
    std::vector<std::size_t> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.dim(0)) {
            throw BoundsError("embed: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(table.dim(0)) + " rows");
        }
        rows[i] = static_cast<std::size_t>(ids[i]);
    }
    return select_rows(table, std::span<const std::size_t>(rows));
}

template <typename Scalar>
Tensor<Scalar> dropout(const Tensor<Scalar>& x, double p, bool train, Rng* rng)
{
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: probability must be in [0, 1)");
    if (!train || p == 0.0) return x;
    if (rng == nullptr) throw UsageError("dropout: train mode needs a generator");
    const Scalar keep_scale = static_cast<Scalar>(1.0 / (1.0 - p));
    std::vector<Scalar> factor(x.numel());
    for (auto& f : factor) f = rng->bernoulli(p) ? Scalar(0) : keep_scale;
    Tensor<Scalar> out(x.shape());
    {
        auto y = out.mutable_data();
        const auto in = x.data();
        for (std::size_t i = 0; i < in.size(); ++i) y[i] = in[i] * factor[i];
    }
    if (tracking<Scalar>(x)) {
        record(out, [x, out, factor = std::move(factor)]() mutable {
            auto gx = x.mutable_grad();
            const auto g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor[i];
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x)
{
    Scalar total = 0;
    for (Scalar v : x.data()) total += v;
    Tensor<Scalar> out = Tensor<Scalar>::scalar(total);
    if (tracking<Scalar>(x)) {
        record(out, [x, out]() mutable {
            const Scalar g = out.grad()[0];
            for (auto& v : x.mutable_grad()) v += g;
        });
    }
    return out;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x)
{
    if (x.numel() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const TokenId> targets,
                             std::span<const std::uint8_t> mask, Reduction reduction)
{
    require_rank2(logits, "cross_entropy");
    const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
    if (targets.size() != rows || (!mask.empty() && mask.size() != rows)) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                         std::to_string(mask.size()) + " mask entries for logits " +
                         to_string(logits.shape()));
    }
    require_finite(logits, "cross_entropy");
    std::vector<std::uint8_t> active(rows, 1);
    if (!mask.empty()) std::copy(mask.begin(), mask.end(), active.begin());
    std::size_t count = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!active[r]) continue;
        ++count;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
            throw BoundsError("cross_entropy: target " + std::to_string(targets[r]) +
                              " outside vocabulary of " + std::to_string(vocab));
        }
    }
    const RowMatrix<Scalar> log_probs = log_softmax_rows(logits);
    Scalar total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (active[r]) total -= log_probs(r, targets[r]);
    }
    const Scalar norm =
        reduction == Reduction::mean ? (count ? Scalar(1) / static_cast<Scalar>(count) : Scalar(0)) : Scalar(1);
    Tensor<Scalar> out = Tensor<Scalar>::scalar(total * norm);
    if (tracking<Scalar>(logits)) {
        std::vector<TokenId> tgt(targets.begin(), targets.end());
        record(out, [logits, out, log_probs, tgt = std::move(tgt), active = std::move(active), norm,
                     rows]() mutable {
            const Scalar g = out.grad()[0] * norm;
            auto G = logits.mutable_grad_mat();
            for (std::size_t r = 0; r < rows; ++r) {
                if (!active[r]) continue;
                G.row(r).array() += g * log_probs.row(r).array().exp();
                G(r, tgt[r]) -= g;
            }
        });
    }
    return out;
}

template <typename Scalar>
RowMatrix<Scalar> log_softmax_rows(const Tensor<Scalar>& logits)
{
    const auto X = logits.mat();
    RowMatrix<Scalar> out(X.rows(), X.cols());
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
        const Scalar mx = X.row(r).maxCoeff();
        const Scalar lse = mx + std::log((X.row(r).array() - mx).exp().sum());
        out.row(r) = X.row(r).array() - lse;
    }
    return out;
}

#define STORYGEN_INSTANTIATE_OPS(S)                                                                  \
    template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                   \
    template Tensor<S> transpose(const Tensor<S>&);                                                  \
    template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                      \
    template Tensor<S> subtract(const Tensor<S>&, const Tensor<S>&);                                 \
    template Tensor<S> add_bias(const Tensor<S>&, const Tensor<S>&);                                 \
    template Tensor<S> multiply(const Tensor<S>&, const Tensor<S>&);                                 \
    template Tensor<S> scale(const Tensor<S>&, S);                                                   \
    template Tensor<S> sigmoid(const Tensor<S>&);                                                    \
    template Tensor<S> glu(const Tensor<S>&);                                                        \
    template Tensor<S> softmax(const Tensor<S>&, std::size_t);                                       \
    template Tensor<S> masked_softmax(const Tensor<S>&, std::span<const std::uint8_t>);              \
    template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);             \
    template Tensor<S> conv1d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, std::size_t,     \
                              std::size_t);                                                          \
    template Tensor<S> conv1d_causal(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);          \
    template Tensor<S> conv1d_centered(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);        \
    template Tensor<S> concat(std::span<const Tensor<S>>, std::size_t);                              \
    template Tensor<S> select_rows(const Tensor<S>&, std::span<const std::size_t>);                  \
    template Tensor<S> slice_rows(const Tensor<S>&, std::size_t, std::size_t);                       \
    template Tensor<S> embed(std::span<const TokenId>, const Tensor<S>&);                            \
    template Tensor<S> dropout(const Tensor<S>&, double, bool, Rng*);                                \
    template Tensor<S> sum(const Tensor<S>&);                                                        \
    template Tensor<S> mean(const Tensor<S>&);                                                       \
    template Tensor<S> cross_entropy(const Tensor<S>&, std::span<const TokenId>,                     \
                                     std::span<const std::uint8_t>, Reduction);                      \
    template RowMatrix<S> log_softmax_rows(const Tensor<S>&);

STORYGEN_INSTANTIATE_OPS(float)
STORYGEN_INSTANTIATE_OPS(double)

#undef STORYGEN_INSTANTIATE_OPS

}  // namespace storygen

#include "storygen/tensor.hpp"

#include <sstream>

namespace storygen {

std::size_t element_count(const Shape& shape)
{
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << " x ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

template <typename Scalar>
ComputationRecord<Scalar>& ComputationRecord<Scalar>::current()
{
    static thread_local ComputationRecord record;
    return record;
}

template <typename Scalar>
void ComputationRecord<Scalar>::record(Tensor<Scalar>& output, Backward rule)
{
    auto& node = output.node();
    node.requires_grad = true;
    node.generation = generation_;
    entries_.push_back(Entry{&node, std::move(rule)});
}

template <typename Scalar>
void ComputationRecord<Scalar>::backward(const Tensor<Scalar>& loss)
{
    if (loss.numel() != 1) {
        throw UsageError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) {
        throw UsageError("backward() on a loss that does not require grad");
    }
    auto& node = loss.node();
    if (node.generation == 0) {
        // A scalar leaf: d(loss)/d(loss) = 1 and nothing else to do.
        Tensor<Scalar>(loss).mutable_grad()[0] += Scalar(1);
        return;
    }
    if (node.generation != generation_ || entries_.empty()) {
        throw UsageError(
            "backward() without a live computation record: the graph for this loss was "
            "already replayed or cleared; run a new forward pass");
    }
    Tensor<Scalar>(loss).mutable_grad()[0] += Scalar(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (it->output->has_grad) it->rule();
    }
    clear();
}

template <typename Scalar>
void ComputationRecord<Scalar>::clear()
{
    entries_.clear();
    ++generation_;
}

template class ComputationRecord<float>;
template class ComputationRecord<double>;

}  // namespace storygen

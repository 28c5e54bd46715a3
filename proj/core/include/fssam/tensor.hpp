#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fssam {

using Shape = std::vector<std::size_t>;
using NodeId = std::int64_t;

inline constexpr NodeId kNoNode = -1;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

/// Immutable dense array of doubles in row-major order.
///
/// A tensor is either a leaf (created from data; it takes part in
/// differentiation when `requires_grad` is set) or the result of a primitive
/// recorded on the thread's active Tape, in which case it carries the id of
/// the node that produced it. Copies share storage.
class Tensor {
public:
    /// Zero-dimensional tensor holding 0.0.
    Tensor();
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    /// Wraps an existing buffer without copying.
    static Tensor from_storage(Shape shape, std::shared_ptr<const std::vector<double>> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t numel() const noexcept { return data_->size(); }
    std::span<const double> data() const noexcept { return {data_->data(), data_->size()}; }
    double operator[](std::size_t i) const noexcept { return (*data_)[i]; }
    double item() const;

    /// True for grad-enabled leaves and for results recorded on a tape.
    bool requires_grad() const noexcept { return requires_grad_ || node_ != kNoNode; }
    bool is_leaf() const noexcept { return node_ == kNoNode; }
    NodeId node_id() const noexcept { return node_; }

    /// Leaf sharing this tensor's storage with the given grad flag.
    Tensor with_requires_grad(bool flag) const;
    /// Leaf sharing this tensor's storage, never differentiated.
    Tensor detach() const { return with_requires_grad(false); }
    /// Identity of the underlying buffer; leaves are keyed by it on a tape.
    const void* storage_key() const noexcept { return data_.get(); }

private:
    friend class Tape;

    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    bool requires_grad_ = false;
    NodeId node_ = kNoNode;
    std::uint64_t tape_id_ = 0;
};

/// Backward rule of one recorded primitive: receives dLoss/dOutput and
/// accumulates into the gradient buffers of its inputs. Buffers of inputs
/// that do not require gradients are empty spans.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

/// Append-only computation record for reverse-mode differentiation.
///
/// Constructing a Tape makes it the active record of the current thread;
/// primitives executed while it is active and touching grad-enabled tensors
/// append nodes. Destruction restores the previously active tape. Records on
/// different threads are independent.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() noexcept;

    /// Reverse sweep from a scalar loss. Gradients accumulate (sum) into the
    /// table until reset_gradients() is called.
    void backward(const Tensor& loss);
    void reset_gradients();

    /// dLoss/dt for a recorded result or a grad-enabled leaf; empty when t
    /// never reached the tape or received no gradient.
    std::optional<Tensor> grad(const Tensor& t) const;

    /// Leaves that took part in the recorded computation, in first-use order.
    const std::vector<Tensor>& leaves() const noexcept { return leaf_tensors_; }

    std::size_t size() const noexcept { return nodes_.size(); }
    std::string_view op_kind(NodeId id) const;
    const std::vector<NodeId>& op_inputs(NodeId id) const;

    // Used by primitives.
    NodeId track(const Tensor& t);
    Tensor record(std::string_view op, Shape shape, std::shared_ptr<const std::vector<double>> value,
                  std::vector<NodeId> inputs, BackwardFn fn);

private:
    struct Node {
        std::string_view op;
        Shape shape;
        std::vector<NodeId> inputs;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    std::unordered_map<const void*, NodeId> leaf_ids_;
    std::vector<Tensor> leaf_tensors_;
    std::uint64_t id_;
    Tape* previous_;
};

}  // namespace fssam

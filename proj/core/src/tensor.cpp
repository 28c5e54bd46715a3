#include "fssam/tensor.hpp"

#include <atomic>
#include <sstream>

#include "fssam/errors.hpp"

namespace fssam {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};

}  // namespace

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)), requires_grad_(requires_grad) {
    for (auto d : shape_) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
    }
    if (shape_numel(shape_) != data.size()) {
        throw ShapeError("shape " + shape_str(shape_) + " does not match " + std::to_string(data.size()) +
                         " elements");
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
    }
    return shape_[axis];
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
}

Tensor Tensor::with_requires_grad(bool flag) const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    t.requires_grad_ = flag;
    return t;
}

Tensor Tensor::from_storage(Shape shape, std::shared_ptr<const std::vector<double>> data) {
    if (shape_numel(shape) != data->size()) {
        throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data->size()) +
                         " elements");
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)), previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() noexcept { return g_active_tape; }

NodeId Tape::track(const Tensor& t) {
    if (t.node_ != kNoNode) {
        if (t.tape_id_ != id_) {
            throw ContractError("tensor was recorded on a different computation record");
        }
        return t.node_;
    }
    if (!t.requires_grad_) return kNoNode;
    auto [it, inserted] = leaf_ids_.try_emplace(t.storage_key(), static_cast<NodeId>(nodes_.size()));
    if (inserted) {
        nodes_.push_back(Node{"leaf", t.shape_, {}, {}});
        grads_.emplace_back();
        leaf_tensors_.push_back(t);
    }
    return it->second;
}

Tensor Tape::record(std::string_view op, Shape shape, std::shared_ptr<const std::vector<double>> value,
                    std::vector<NodeId> inputs, BackwardFn fn) {
    Tensor t;
    t.shape_ = shape;
    t.data_ = std::move(value);
    t.node_ = static_cast<NodeId>(nodes_.size());
    t.tape_id_ = id_;
    nodes_.push_back(Node{op, std::move(shape), std::move(inputs), std::move(fn)});
    grads_.emplace_back();
    return t;
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    }
    const NodeId root = track(loss);
    if (root == kNoNode) throw ContractError("loss is not reachable from any grad-enabled tensor");

    auto& seed = grads_[static_cast<std::size_t>(root)];
    if (seed.empty()) seed.assign(1, 0.0);
    seed[0] += 1.0;

    std::vector<std::span<double>> grad_in;
    for (NodeId id = root; id >= 0; --id) {
        auto& node = nodes_[static_cast<std::size_t>(id)];
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (g.empty() || !node.backward) continue;
        grad_in.clear();
        for (NodeId in : node.inputs) {
            if (in == kNoNode) {
                grad_in.emplace_back();
                continue;
            }
            auto& buf = grads_[static_cast<std::size_t>(in)];
            if (buf.empty()) buf.assign(shape_numel(nodes_[static_cast<std::size_t>(in)].shape), 0.0);
            grad_in.emplace_back(buf);
        }
        node.backward(g, grad_in);
    }
}

void Tape::reset_gradients() {
    for (auto& g : grads_) g.clear();
}

std::optional<Tensor> Tape::grad(const Tensor& t) const {
    NodeId id = kNoNode;
    if (t.node_ != kNoNode) {
        if (t.tape_id_ != id_) return std::nullopt;
        id = t.node_;
    } else {
        auto it = leaf_ids_.find(t.storage_key());
        if (it == leaf_ids_.end()) return std::nullopt;
        id = it->second;
    }
    const auto& g = grads_[static_cast<std::size_t>(id)];
    if (g.empty()) return std::nullopt;
    return Tensor(nodes_[static_cast<std::size_t>(id)].shape, g);
}

std::string_view Tape::op_kind(NodeId id) const { return nodes_.at(static_cast<std::size_t>(id)).op; }

const std::vector<NodeId>& Tape::op_inputs(NodeId id) const {
    return nodes_.at(static_cast<std::size_t>(id)).inputs;
}

}  // namespace fssam

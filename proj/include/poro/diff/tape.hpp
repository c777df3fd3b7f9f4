#pragma once

#include "poro/diff/tensor.hpp"

#include <deque>
#include <functional>

namespace poro::diff {

class Tape;

/// Lightweight handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Shape& shape() const;
    const Eigen::ArrayXd& value() const;
    std::int64_t size() const;
};

/// Reverse-mode tape: a topologically ordered record of primitive
/// applications. Single-owner; independent tapes may run concurrently.
class Tape {
public:
    struct Node {
        Shape shape;
        Eigen::ArrayXd value;
        Eigen::ArrayXd grad;           // lazily allocated during backward
        DTensor* bound = nullptr;      // leaf binding for parameter gradients
        std::function<void(Tape&)> backward;  // pulls this node's grad into parents
    };

    Var leaf(DTensor& t) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.shape = t.shape;
        n.value = t.value;
        n.bound = &t;
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var constant(Shape shape, Eigen::ArrayXd value) {
        if (shape_size(shape) != value.size())
            throw ShapeError("constant: data does not match shape " + shape_str(shape));
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.shape = std::move(shape);
        n.value = std::move(value);
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var emplace(Shape shape, Eigen::ArrayXd value, std::function<void(Tape&)> backward) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.backward = std::move(backward);
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Node& at(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& at(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    int size() const { return static_cast<int>(nodes_.size()); }

    /// Accumulates `g` into node `id`'s grad buffer, allocating on first touch.
    void accumulate(int id, const Eigen::ArrayXd& g) {
        Node& n = at(id);
        if (n.grad.size() == 0)
            n.grad = g;
        else
            n.grad += g;
    }

    /// Reverse sweep from a scalar loss. Leaf tensors with requires_grad
    /// receive (accumulate) their gradients; repeated calls keep accumulating.
    void backward(Var loss) {
        if (loss.tape != this) throw ArgumentError("backward: loss from a different tape");
        if (shape_size(at(loss.id).shape) != 1)
            throw ArgumentError("backward: loss must be scalar, got " + shape_str(at(loss.id).shape));
        for (Node& n : nodes_) n.grad.resize(0);
        at(loss.id).grad = Eigen::ArrayXd::Ones(1);
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad.size() == 0) continue;
            if (n.backward) n.backward(*this);
            if (n.bound && n.bound->requires_grad) n.bound->grad += n.grad;
        }
    }

    void clear() { nodes_.clear(); }

private:
    std::deque<Node> nodes_;  // stable addresses while appending
};

inline const Shape& Var::shape() const { return tape->at(id).shape; }
inline const Eigen::ArrayXd& Var::value() const { return tape->at(id).value; }
inline std::int64_t Var::size() const { return tape->at(id).value.size(); }

}  // namespace poro::diff

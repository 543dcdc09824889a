#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxattn/array.hpp"
#include "voxattn/error.hpp"

namespace vx {

// Records primitive applications in program order. Program order is
// topological by construction: an op's inputs are registered before the op's
// output. Backward walks the list once, in reverse, and each node's VJP
// accumulates into the grad buffers of its input arrays. A node whose output
// never received a gradient is skipped, which gives the reachability
// guarantee (arrays off the loss path keep absent or all-zero grads).
template <class T>
class TapeT {
   public:
    using Arr = ArrayT<T>;

    struct Node {
        const char* op;
        std::vector<int> input_ids;
        int output_id;
        std::function<void()> vjp;     // may be empty when no input needs grad
        std::function<void()> replay;  // recomputes the output buffer in place
    };

    // Registers an array (leaf or prior output) and returns its id.
    int watch(const Arr& a) {
        auto it = id_of_.find(a.uid);
        if (it != id_of_.end()) return it->second;
        const int id = static_cast<int>(registry_.size());
        registry_.push_back(a);
        is_output_.push_back(false);
        id_of_.emplace(a.uid, id);
        return id;
    }

    void record(const char* op, const std::vector<Arr>& inputs, const Arr& output, std::function<void()> vjp,
                std::function<void()> replay) {
        Node node;
        node.op = op;
        node.input_ids.reserve(inputs.size());
        for (const auto& in : inputs) node.input_ids.push_back(watch(in));
        node.output_id = watch(output);
        is_output_[static_cast<std::size_t>(node.output_id)] = true;
        for (int in_id : node.input_ids) {
            if (in_id >= node.output_id)
                throw CheckError(std::string("tape: op '") + op + "' would break topological order");
        }
        node.vjp = std::move(vjp);
        node.replay = std::move(replay);
        nodes_.push_back(std::move(node));
    }

    void backward(const Arr& loss) {
        if (backward_done_)
            throw CheckError("tape: backward already ran; call reset_grads() before running it again");
        auto it = id_of_.find(loss.uid);
        if (it == id_of_.end() || !is_output_[static_cast<std::size_t>(it->second)])
            throw CheckError("tape: loss was not produced on this tape (detached)");
        if (loss.numel() != 1)
            throw ShapeError("tape: loss must be scalar, got shape " + shape_str(loss.shape));
        Arr& seed = registry_[static_cast<std::size_t>(it->second)];
        seed.ensure_grad();
        seed.grad_vec()[0] += T(1);
        for (auto node = nodes_.rbegin(); node != nodes_.rend(); ++node) {
            const Arr& out = registry_[static_cast<std::size_t>(node->output_id)];
            if (!out.has_grad()) continue;
            if (node->vjp) node->vjp();
        }
        backward_done_ = true;
    }

    // Re-executes every recorded forward computation in order, writing into
    // the original output buffers.
    void replay() {
        for (auto& node : nodes_) {
            if (node.replay) node.replay();
        }
    }

    void reset_grads() {
        for (auto& a : registry_) {
            if (a.has_grad()) std::fill(a.grad_vec().begin(), a.grad_vec().end(), T(0));
        }
        backward_done_ = false;
    }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_[i]; }
    const Arr& array_by_id(int id) const { return registry_[static_cast<std::size_t>(id)]; }
    bool backward_done() const { return backward_done_; }

   private:
    std::vector<Node> nodes_;
    std::vector<Arr> registry_;
    std::vector<bool> is_output_;
    std::unordered_map<std::uint64_t, int> id_of_;
    bool backward_done_ = false;
};

using Tape = TapeT<double>;
using TapeF = TapeT<float>;

}  // namespace vx

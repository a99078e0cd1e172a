#pragma once

#include <functional>
#include <memory>
#include <unordered_map>

#include "dilseg/ops.hpp"

namespace dilseg {

// Reverse-mode tape. Single-owner: record a forward pass, then call
// backward() once (reset_grads() re-arms it). Node ids are topologically
// ordered by construction, so the reverse sweep visits each record once.
template <class T>
class Tape {
 public:
  using Id = int;

  Id leaf(TensorT<T> value) {
    return push(std::move(value), {}, nullptr);
  }

  Id conv2d(Id x, Id w, Id b, const ConvParams& params) {
    TensorT<T> out = dilseg::conv2d(value(x), value(w), value(b), params);
    return push(std::move(out), {x, w, b},
                [params](Tape& t, const Node& n, const TensorT<T>& g) {
                  auto grads = conv2d_backward(t.value(n.inputs[0]),
                                               t.value(n.inputs[1]), params, g);
                  t.accumulate(n.inputs[0], grads.input);
                  t.accumulate(n.inputs[1], grads.weight);
                  t.accumulate(n.inputs[2], grads.bias);
                });
  }

  // Valid dilated conv over an explicit input window (ROI execution path).
  Id conv2d_region(Id x, Id w, Id b, int kernel, int rate, int y0, int x0,
                   int out_h, int out_w) {
    TensorT<T> out = dilseg::conv2d_region(value(x), value(w), value(b),
                                           kernel, rate, y0, x0, out_h, out_w);
    return push(std::move(out), {x, w, b},
                [kernel, rate, y0, x0](Tape& t, const Node& n,
                                       const TensorT<T>& g) {
                  auto grads = conv2d_region_backward(
                      t.value(n.inputs[0]), t.value(n.inputs[1]), kernel, rate,
                      y0, x0, g);
                  t.accumulate(n.inputs[0], grads.input);
                  t.accumulate(n.inputs[1], grads.weight);
                  t.accumulate(n.inputs[2], grads.bias);
                });
  }

  Id crop_pad(Id x, int y0, int x0, int out_h, int out_w) {
    TensorT<T> out = dilseg::crop_pad(value(x), y0, x0, out_h, out_w);
    return push(std::move(out), {x},
                [y0, x0](Tape& t, const Node& n, const TensorT<T>& g) {
                  t.accumulate(n.inputs[0],
                               crop_pad_backward(t.value(n.inputs[0]), y0, x0, g));
                });
  }

  Id maxpool2(Id x) {
    auto argmax = std::make_shared<std::vector<std::uint32_t>>();
    TensorT<T> out = dilseg::maxpool2(value(x), argmax.get());
    return push(std::move(out), {x},
                [argmax](Tape& t, const Node& n, const TensorT<T>& g) {
                  t.accumulate(n.inputs[0],
                               maxpool2_backward(t.value(n.inputs[0]), *argmax, g));
                });
  }

  Id transposed_conv(Id x, Id w, int stride) {
    TensorT<T> out = dilseg::transposed_conv(value(x), value(w), stride);
    return push(std::move(out), {x, w},
                [stride](Tape& t, const Node& n, const TensorT<T>& g) {
                  auto grads = transposed_conv_backward(
                      t.value(n.inputs[0]), t.value(n.inputs[1]), stride, g);
                  t.accumulate(n.inputs[0], grads.input);
                  t.accumulate(n.inputs[1], grads.weight);
                });
  }

  Id relu(Id x) {
    TensorT<T> out = dilseg::relu(value(x));
    return push(std::move(out), {x},
                [](Tape& t, const Node& n, const TensorT<T>& g) {
                  t.accumulate(n.inputs[0], relu_backward(t.value(n.inputs[0]), g));
                });
  }

  Id softmax_channels(Id x) {
    TensorT<T> out = dilseg::softmax_channels(value(x));
    return push(std::move(out), {x},
                [](Tape& t, const Node& n, const TensorT<T>& g) {
                  t.accumulate(n.inputs[0],
                               softmax_channels_backward(t.value(n.id), g));
                });
  }

  Id cross_entropy(Id prob, TensorT<T> target, TensorT<T> mask) {
    const T loss = dilseg::cross_entropy(value(prob), target, mask);
    auto tgt = std::make_shared<TensorT<T>>(std::move(target));
    auto msk = std::make_shared<TensorT<T>>(std::move(mask));
    return push(TensorT<T>({1}, {loss}), {prob},
                [tgt, msk](Tape& t, const Node& n, const TensorT<T>& g) {
                  t.accumulate(n.inputs[0],
                               cross_entropy_backward(t.value(n.inputs[0]), *tgt,
                                                      *msk, g.data[0]));
                });
  }

  const TensorT<T>& value(Id id) const { return nodes_.at(id).value; }
  std::size_t size() const { return nodes_.size(); }

  // Seeds the given node and sweeps the tape in reverse. Gradients land on
  // every node reachable from `output`, leaves included. Linear in the
  // seed. Throws if replayed without reset_grads().
  void backward(Id output, const TensorT<T>& seed) {
    if (replayed_)
      throw std::runtime_error("tape replayed twice without reset");
    if (!(seed.shape == value(output).shape))
      throw std::invalid_argument("backward: seed shape " + shape_str(seed) +
                                  " does not match output " +
                                  shape_str(value(output)));
    replayed_ = true;
    accumulate(output, seed);
    for (Id id = output; id >= 0; --id) {
      const Node& n = nodes_[id];
      if (!n.backward || !grads_.count(id)) continue;
      n.backward(*this, n, grads_.at(id));
    }
  }

  void backward_scalar(Id output, T seed = T(1)) {
    backward(output, TensorT<T>({1}, {seed}));
  }

  bool has_grad(Id id) const { return grads_.count(id) != 0; }

  // Gradient of a node; zeros if nothing flowed there.
  TensorT<T> grad(Id id) const {
    auto it = grads_.find(id);
    if (it != grads_.end()) return it->second;
    return TensorT<T>(value(id).shape);
  }

  void reset_grads() {
    grads_.clear();
    replayed_ = false;
  }

 private:
  struct Node {
    Id id;
    TensorT<T> value;
    std::vector<Id> inputs;
    std::function<void(Tape&, const Node&, const TensorT<T>&)> backward;
  };

  Id push(TensorT<T> value, std::vector<Id> inputs,
          std::function<void(Tape&, const Node&, const TensorT<T>&)> bwd) {
    const Id id = static_cast<Id>(nodes_.size());
    nodes_.push_back(Node{id, std::move(value), std::move(inputs), std::move(bwd)});
    return id;
  }

  void accumulate(Id id, const TensorT<T>& g) {
    auto it = grads_.find(id);
    if (it == grads_.end()) {
      grads_.emplace(id, g);
    } else {
      TensorT<T>& acc = it->second;
      for (std::size_t i = 0; i < acc.numel(); ++i) acc.data[i] += g.data[i];
    }
  }

  std::vector<Node> nodes_;
  std::unordered_map<Id, TensorT<T>> grads_;
  bool replayed_ = false;
};

}  // namespace dilseg

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fundus/tensor.hpp"

namespace fundus {

// Reverse-mode autodiff tape. Ops append nodes in forward execution order
// (so the list is trivially topological); backward() replays the exact
// reverse order. One tape is active per thread at a time, installed with
// TapeScope.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  struct Node {
    std::string op;
    std::function<void()> backward;
  };

  void record(std::string op, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(op), std::move(backward)});
  }

  // Seeds d(loss)/d(loss) = 1 and accumulates into every requires_grad
  // tensor reachable through the recorded nodes.
  void backward(Tensor loss);

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  static Tape* current();

 private:
  std::vector<Node> nodes_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

}  // namespace fundus

#include "fundus/tape.hpp"

namespace fundus {

namespace {
thread_local Tape* t_active = nullptr;
}

Tape* Tape::current() { return t_active; }

void Tape::backward(Tensor loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward() on a tensor that does not require grad");
  }
  loss.grad()[0] += 1.f;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
}

TapeScope::TapeScope(Tape& tape) : prev_(t_active) { t_active = &tape; }

TapeScope::~TapeScope() { t_active = prev_; }

}  // namespace fundus

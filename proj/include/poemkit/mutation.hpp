#pragma once

// Deliberate defects that `poemkit verify --mutate` switches on to prove the
// contract checks can fail. Never enabled in normal operation.

namespace poemkit {

struct Mutations {
  bool aggregation_sign_flip = false;  // negate the aggregation target
  bool vector_softmax_wrong_axis = false;  // normalize over channels instead of neighbours
};

inline Mutations& mutations() {
  static Mutations m;
  return m;
}

/// Enables mutations for the lifetime of the scope.
class MutationScope {
 public:
  explicit MutationScope(Mutations m) : previous_(mutations()) { mutations() = m; }
  ~MutationScope() { mutations() = previous_; }
  MutationScope(const MutationScope&) = delete;
  MutationScope& operator=(const MutationScope&) = delete;

 private:
  Mutations previous_;
};

}  // namespace poemkit

#pragma once

#include <cstdint>
#include <vector>

#include "iba/tensor.hpp"

namespace iba {

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatmul,
  kLinear,
  kSoftmaxLast,
  kLayerNormLast,
  kGelu,
  kReshape,
  kPermute,
  kReferenceBatch,
  kSumBatch,
  kConcatLast,
  kMeanAll,
  kCrossEntropy,
  kUnfold,
  kUpsampleBilinear,
};

const char* op_name(OpKind kind);

struct OpAttrs {
  std::vector<std::int64_t> ints;
  std::vector<double> reals;
};

struct TapeNode {
  OpKind kind;
  std::vector<int> inputs;   // node ids; -1 marks an untraced (constant) input
  std::vector<Tensor> saved; // activations needed by the backward pass
  Shape out_shape;
  OpAttrs attrs;
};

// Gradients of one scalar with respect to every node of a tape. Tensors that
// were never traced on that tape have no gradient.
class Gradients {
 public:
  Gradients(std::uint64_t tape_id, std::vector<Tensor> by_node);
  bool has(const Tensor& t) const;
  Tensor grad(const Tensor& t) const;  // zeros(t.shape()) if untouched

 private:
  std::uint64_t tape_id_;
  std::vector<Tensor> by_node_;
};

// Records ops in creation order; single-threaded, one active tape per thread.
// Backward walks nodes exactly once in reverse creation order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  std::uint64_t id() const { return id_; }
  std::size_t node_count() const { return nodes_.size(); }
  const TapeNode& node(std::size_t i) const { return nodes_[i]; }

  // Marks a tensor as a differentiable leaf of this tape.
  Tensor watch(const Tensor& t);

  int emit(OpKind kind, std::vector<int> inputs, std::vector<Tensor> saved, Shape out_shape,
           OpAttrs attrs = {});

  Gradients backward(const Tensor& loss) const;

 private:
  std::uint64_t id_;
  std::vector<TapeNode> nodes_;
  Tape* prev_ = nullptr;
};

}  // namespace iba

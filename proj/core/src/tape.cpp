#include "iba/tape.hpp"

#include <atomic>

namespace iba {

namespace {
thread_local Tape* t_current = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};
}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kLinear: return "linear";
    case OpKind::kSoftmaxLast: return "softmax_lastdim";
    case OpKind::kLayerNormLast: return "layer_norm_lastdim";
    case OpKind::kGelu: return "gelu";
    case OpKind::kReshape: return "reshape";
    case OpKind::kPermute: return "permute";
    case OpKind::kReferenceBatch: return "reference_batch";
    case OpKind::kSumBatch: return "sum_axis0_keepdim";
    case OpKind::kConcatLast: return "concat_lastdim";
    case OpKind::kMeanAll: return "mean_all";
    case OpKind::kCrossEntropy: return "cross_entropy_mean";
    case OpKind::kUnfold: return "unfold_patches";
    case OpKind::kUpsampleBilinear: return "upsample_bilinear";
  }
  return "unknown";
}

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {
  prev_ = t_current;
  t_current = this;
}

Tape::~Tape() { t_current = prev_; }

Tape* Tape::current() { return t_current; }

Tensor Tape::watch(const Tensor& t) {
  if (!t.defined()) throw ValueError("cannot watch an undefined tensor");
  if (t.tape_id() == id_) return t;
  int node = emit(OpKind::kLeaf, {}, {}, t.shape());
  return t.traced(id_, node);
}

int Tape::emit(OpKind kind, std::vector<int> inputs, std::vector<Tensor> saved, Shape out_shape,
               OpAttrs attrs) {
  nodes_.push_back(TapeNode{kind, std::move(inputs), std::move(saved), std::move(out_shape),
                            std::move(attrs)});
  return static_cast<int>(nodes_.size()) - 1;
}

Gradients::Gradients(std::uint64_t tape_id, std::vector<Tensor> by_node)
    : tape_id_(tape_id), by_node_(std::move(by_node)) {}

bool Gradients::has(const Tensor& t) const {
  return t.tape_id() == tape_id_ && t.node() >= 0 &&
         static_cast<std::size_t>(t.node()) < by_node_.size() && by_node_[t.node()].defined();
}

Tensor Gradients::grad(const Tensor& t) const {
  if (t.tape_id() != tape_id_ || t.node() < 0) {
    throw ValueError("gradient requested for a tensor not traced on this tape");
  }
  if (static_cast<std::size_t>(t.node()) < by_node_.size() && by_node_[t.node()].defined()) {
    return by_node_[t.node()];
  }
  return Tensor::zeros(t.shape());
}

}  // namespace iba

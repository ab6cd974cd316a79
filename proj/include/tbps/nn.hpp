#pragma once

#include <string>
#include <vector>

#include "tbps/autodiff.hpp"
#include "tbps/rng.hpp"

namespace tbps {

// Parameter groups, each with its own optimizer.
enum class Group { kDetection, kIdentification, kProjection };

const char* group_name(Group g);

struct NamedParam {
  std::string name;
  ad::Var var;
  Group group;
};

using ParamList = std::vector<NamedParam>;

// Trainable leaf holding N(0, std^2) draws.
ad::Var normal_param(std::vector<int> shape, double std, Rng& rng);
ad::Var zero_param(std::vector<int> shape);
ad::Var const_param(std::vector<int> shape, double value);
// He-normal for a conv weight [O,C,k,k].
ad::Var conv_param(int out, int in, int k, Rng& rng);
// Xavier-normal for a linear weight [out,in].
ad::Var linear_param(int out, int in, Rng& rng);

// x [M,in] -> x W^T + b, W [out,in], b [out] (b may be undefined).
ad::Var linear(const ad::Var& x, const ad::Var& w, const ad::Var& b);

// Mean cross entropy of row-wise logits against integer labels.
ad::Var cross_entropy(const ad::Var& logits, const std::vector<int>& labels);

// Sum over rows of KL(softmax(logits_row) || target_row + eps). Rows listed in
// `rows` are included; targets is a constant [M,N] distribution.
ad::Var kl_rows(const ad::Var& logits, const Tensor& targets, double eps, const std::vector<int>& rows);

}  // namespace tbps

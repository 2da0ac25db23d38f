#pragma once

#include <string>
#include <vector>

#include "famseg/decoder.hpp"

namespace famseg {

enum class LossKind { kCrossEntropy, kCePlusDice };

std::string to_string(LossKind kind);
LossKind parse_loss(const std::string& s);

/// Mean over pixels of -log softmax(logits)[gt]. logits [N,C,H,W], one mask
/// per batch item.
Tensor cross_entropy(const Tensor& logits, const std::vector<Mask>& gt);

/// 1 - mean over foreground classes of the batch soft-Dice,
/// (2*sum(p*g) + 1) / (sum(p) + sum(g) + 1).
Tensor dice_loss(const Tensor& logits, const std::vector<Mask>& gt);

Tensor segmentation_loss(const Tensor& logits, const std::vector<Mask>& gt, LossKind kind);

}  // namespace famseg

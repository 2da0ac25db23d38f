#pragma once

#include <cstdint>
#include <memory>

#include "famseg/decoder.hpp"
#include "famseg/encoder.hpp"

namespace famseg {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  int in_channels = 3;

  void validate() const;
};

/// Full encoder-decoder network. Parameters live in the owned store; the
/// store's registration order is fixed by the config and the init seed.
class FamSegModel {
 public:
  FamSegModel(const ModelConfig& cfg, std::uint64_t init_seed);
  FamSegModel(const FamSegModel&) = delete;
  FamSegModel& operator=(const FamSegModel&) = delete;

  /// image: [N,in_channels,H,W] -> logits [N,num_classes,H,W]
  Tensor forward(const Tensor& image) const;
  std::vector<Tensor> encode(const Tensor& image) const { return encoder_->forward(image); }
  Tensor decode(const std::vector<Tensor>& stages) const { return decoder_->forward(stages); }

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const ModelConfig& config() const { return cfg_; }
  const Encoder& encoder() const { return *encoder_; }

 private:
  ModelConfig cfg_;
  ParamStore store_;
  std::unique_ptr<Encoder> encoder_;
  std::unique_ptr<Decoder> decoder_;
};

}  // namespace famseg

#include "famseg/model.hpp"

namespace famseg {

void ModelConfig::validate() const {
  if (in_channels < 1) throw ConfigError("model: in_channels must be positive");
  encoder.validate();
  decoder.validate();
}

FamSegModel::FamSegModel(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(init_seed);
  encoder_ = std::make_unique<Encoder>(cfg_.encoder, cfg_.in_channels, store_, rng);
  decoder_ = std::make_unique<Decoder>(cfg_.decoder, cfg_.encoder.stage_channels, store_, rng);
}

Tensor FamSegModel::forward(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != cfg_.in_channels) {
    throw ShapeError("model: expected [N," + std::to_string(cfg_.in_channels) + ",H,W] input, got " +
                     shape_str(image.shape()));
  }
  return decoder_->forward(encoder_->forward(image));
}

}  // namespace famseg

#include "famseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>

#include "json.hpp"

#include "famseg/loss.hpp"
#include "famseg/rng.hpp"

namespace fs = std::filesystem;

namespace famseg {

SplitSamples split_samples(const std::vector<SegmentationSample>& samples, const SplitIndices& idx) {
  SplitSamples out;
  for (int i : idx.train) out.train.push_back(samples.at(i));
  for (int i : idx.val) out.val.push_back(samples.at(i));
  for (int i : idx.test) out.test.push_back(samples.at(i));
  return out;
}

SplitSamples split_samples(const Dataset& dataset) {
  return {dataset.subset("train"), dataset.subset("val"), dataset.subset("test")};
}

SplitIndices data_split(const DataConfig& cfg) { return split(cfg.n, cfg.split, derive_seed(cfg.seed, 0xD1CEULL)); }

SplitSamples make_phantom_splits(const PhantomSpec& spec, const DataConfig& cfg) {
  return split_samples(generate(spec, cfg.n, cfg.seed), data_split(cfg));
}

Tensor stack_images(const std::vector<SegmentationSample>& samples, std::size_t begin, std::size_t end) {
  if (begin >= end || end > samples.size()) throw ShapeError("stack_images: empty or out-of-range batch");
  const Shape s = samples[begin].image.shape();
  std::vector<double> v;
  v.reserve((end - begin) * samples[begin].image.numel());
  for (std::size_t i = begin; i < end; ++i) {
    if (samples[i].image.shape() != s) {
      throw DataError("stack_images: sample " + std::to_string(i) + " has shape " +
                      shape_str(samples[i].image.shape()) + ", expected " + shape_str(s));
    }
    const auto d = samples[i].image.data();
    v.insert(v.end(), d.begin(), d.end());
  }
  return Tensor::from({static_cast<int>(end - begin), s[0], s[1], s[2]}, std::move(v));
}

std::vector<Mask> predict(const FamSegModel& model, const std::vector<SegmentationSample>& samples,
                          int batch_size) {
  NoGradGuard guard;
  std::vector<Mask> out;
  for (std::size_t b = 0; b < samples.size(); b += batch_size) {
    const std::size_t e = std::min(samples.size(), b + static_cast<std::size_t>(batch_size));
    for (auto& m : predict_mask(model.forward(stack_images(samples, b, e)))) out.push_back(std::move(m));
  }
  return out;
}

EvalResult evaluate(const FamSegModel& model, const std::vector<SegmentationSample>& samples, int batch_size) {
  const int classes = model.config().decoder.num_classes;
  for (const auto& s : samples) {
    for (auto v : s.mask.labels) {
      if (v >= classes) {
        throw IncompatibleError("data holds class " + std::to_string(v) + " but the model predicts " +
                                std::to_string(classes) + " classes");
      }
    }
  }
  if (samples.empty()) throw DataError("evaluate: no samples");
  ConfusionMatrix cm(classes);
  const auto masks = predict(model, samples, batch_size);
  for (std::size_t i = 0; i < samples.size(); ++i) cm.accumulate(samples[i].mask, masks[i]);
  return {cm, iou(cm)};
}

Mask infer(const FamSegModel& model, const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("infer: expected [C,H,W], got " + shape_str(image.shape()));
  NoGradGuard guard;
  const Tensor batch = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
  return predict_mask(model.forward(batch)).front();
}

namespace {

class SegmentationObjective : public Objective {
 public:
  SegmentationObjective(FamSegModel& model, const std::vector<SegmentationSample>& train,
                        const std::vector<SegmentationSample>& val, int batch_size, LossKind loss,
                        std::uint64_t seed)
      : model_(model), train_(train), val_(val), batch_(batch_size), loss_(loss), seed_(seed) {}

  std::vector<Tensor> parameters() override { return model_.params().tensors(); }

  int batches_per_epoch() const override {
    return static_cast<int>((train_.size() + batch_ - 1) / batch_);
  }

  double loss_and_grad(int epoch, int batch) override {
    if (epoch != order_epoch_) {
      order_.resize(train_.size());
      std::iota(order_.begin(), order_.end(), 0);
      Rng rng(derive_seed(seed_, 1000 + static_cast<std::uint64_t>(epoch)));
      for (std::size_t i = order_.size() - 1; i > 0; --i) {
        std::swap(order_[i], order_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
      }
      order_epoch_ = epoch;
    }
    const std::size_t b = static_cast<std::size_t>(batch) * batch_;
    const std::size_t e = std::min(train_.size(), b + batch_);
    std::vector<SegmentationSample> items;
    std::vector<Mask> masks;
    for (std::size_t i = b; i < e; ++i) {
      items.push_back(train_[order_[i]]);
      masks.push_back(train_[order_[i]].mask);
    }
    Tape tape;
    const Tensor logits = model_.forward(stack_images(items, 0, items.size()));
    const Tensor loss = segmentation_loss(logits, masks, loss_);
    tape.backward(loss);
    return loss.item();
  }

  double validate() override {
    if (val_.empty()) return std::nan("");
    return evaluate(model_, val_).report.miou;
  }

 private:
  FamSegModel& model_;
  const std::vector<SegmentationSample>& train_;
  const std::vector<SegmentationSample>& val_;
  std::size_t batch_;
  LossKind loss_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  int order_epoch_ = -1;
};

std::string epoch_line(const EpochRecord& r) {
  nlohmann::json j{{"epoch", r.epoch},
                   {"phase", r.phase},
                   {"optimizer", to_string(r.optimizer)},
                   {"lr", r.lr},
                   {"train_loss", r.train_loss},
                   {"val_mIoU", r.val_metric}};
  return j.dump();
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& val_set, const TrainOptions& opt) {
  cfg.model.validate();
  cfg.schedule.validate();
  if (train_set.empty()) throw DataError("train: empty training split");
  const int classes = cfg.model.decoder.num_classes;
  for (const auto* set : {&train_set, &val_set}) {
    for (const auto& s : *set) {
      for (auto v : s.mask.labels) {
        if (v >= classes) {
          throw IncompatibleError("train: mask class " + std::to_string(v) + " but num_classes is " +
                                  std::to_string(classes));
        }
      }
    }
  }

  TrainResult result;
  result.model = std::make_unique<FamSegModel>(cfg.model, cfg.seed);
  FamSegModel& model = *result.model;
  const Schedule& sched = cfg.schedule;
  const LrRange range = lr_fit(sched.batch_size, sched.init_lr, sched.min_lr, sched.lr_limit_max, sched.lr_limit_min);

  AlternateOptions alt;
  std::unique_ptr<Optimizer> resumed;
  if (opt.resume) {
    const Checkpoint& ck = *opt.resume;
    if (ck.model_config != model_config_text(cfg.model)) {
      throw IncompatibleError("resume: checkpoint was written for a different model config");
    }
    load_parameters(model, ck);
    alt.start_epoch = static_cast<int>(ck.meta.at("epoch")) + 1;
    result.best_val_miou = ck.meta.count("best_miou") ? ck.meta.at("best_miou") : 0.0;
    result.best_epoch = ck.meta.count("best_epoch") ? static_cast<int>(ck.meta.at("best_epoch")) : -1;
    if (alt.start_epoch < sched.total_epochs()) {
      const Phase& p = sched.phases[static_cast<std::size_t>(ck.meta.at("phase"))];
      resumed = std::make_unique<Optimizer>(p.optimizer, p.decay, sched.hyper);
      restore_optimizer(*resumed, ck);
      alt.resume_from = resumed.get();
    }
  }

  std::ofstream log_file;
  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    log_file.open(fs::path(opt.out_dir) / "log.jsonl", opt.resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw DataError("cannot write log in " + opt.out_dir);
  }
  auto emit = [&](const std::string& line) {
    result.log_lines.push_back(line);
    if (log_file.is_open()) {
      log_file << line << '\n';
      log_file.flush();
    }
  };
  if (!opt.resume) {
    emit(nlohmann::json{{"config", opt.config_text},
                        {"init_lr_fit", range.init_lr},
                        {"min_lr_fit", range.min_lr}}
             .dump());
  }

  alt.end_epoch = opt.stop_after;

  SegmentationObjective objective(model, train_set, val_set, sched.batch_size, cfg.loss, cfg.seed);
  alt.on_epoch_end = [&](const EpochRecord& rec, const Optimizer& optimizer) {
    result.epochs.push_back(rec);
    emit(epoch_line(rec));
    if (opt.progress) {
      *opt.progress << "epoch " << rec.epoch << " " << to_string(rec.optimizer) << " lr " << rec.lr << " loss "
                    << rec.train_loss << " val_mIoU " << rec.val_metric << std::endl;
    }
    const bool improved = std::isfinite(rec.val_metric) && (result.best_epoch < 0 || rec.val_metric > result.best_val_miou);
    if (improved) {
      result.best_val_miou = rec.val_metric;
      result.best_epoch = rec.epoch;
    }
    if (!opt.out_dir.empty()) {
      std::map<std::string, double> meta{{"epoch", rec.epoch},
                                         {"phase", rec.phase},
                                         {"best_miou", result.best_val_miou},
                                         {"best_epoch", result.best_epoch},
                                         {"step", static_cast<double>(optimizer.steps())},
                                         {"val_miou", rec.val_metric}};
      save_checkpoint((fs::path(opt.out_dir) / "last.ckpt").string(), make_checkpoint(model, meta, &optimizer));
      if (improved) save_checkpoint((fs::path(opt.out_dir) / "best.ckpt").string(), make_checkpoint(model, meta));
    }
  };
  if (alt.start_epoch < sched.total_epochs()) alternate_train(sched, range, objective, alt);
  return result;
}

}  // namespace famseg

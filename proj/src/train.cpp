#include "fundus/train.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "fundus/ops.hpp"
#include "fundus/tape.hpp"

namespace fundus {

void TrainConfig::validate() const {
  if (lr <= 0.f || weight_decay < 0.f || clip_maxnorm <= 0.f) {
    throw ConfigError("train: lr, weight_decay and clip_maxnorm must be positive");
  }
  if (epochs < 1 || batch_size < 1) throw ConfigError("train: epochs and batch_size must be >= 1");
  if (eta_min < 0.f || eta_min > lr) throw ConfigError("train: eta_min outside [0, lr]");
  if (threshold <= 0.f || threshold >= 1.f) throw ConfigError("train: threshold outside (0,1)");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"weight_decay", c.weight_decay},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"clip_maxnorm", c.clip_maxnorm},
                     {"seed", c.seed},
                     {"eta_min", c.eta_min},
                     {"scheduler", c.per_step_schedule ? "per_step" : "per_epoch"},
                     {"decoupled_weight_decay", c.decoupled_weight_decay},
                     {"threshold", c.threshold},
                     {"augment", c.augment_enabled}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.clip_maxnorm = j.value("clip_maxnorm", c.clip_maxnorm);
  c.seed = j.value("seed", c.seed);
  c.eta_min = j.value("eta_min", c.eta_min);
  c.per_step_schedule = j.value("scheduler", std::string("per_epoch")) == "per_step";
  c.decoupled_weight_decay = j.value("decoupled_weight_decay", c.decoupled_weight_decay);
  c.threshold = j.value("threshold", c.threshold);
  c.augment_enabled = j.value("augment", c.augment_enabled);
}

void AdamState::init(const ParamStore& store) {
  m.clear();
  v.clear();
  t = 0;
  for (const auto& e : store.entries()) {
    const std::size_t n = e.trainable ? static_cast<std::size_t>(e.tensor.numel()) : 0;
    m.emplace_back(n, 0.f);
    v.emplace_back(n, 0.f);
  }
}

double cosine_lr(std::int64_t t, double base_lr, double eta_min, std::int64_t t_max) {
  if (t_max < 1) throw ConfigError("cosine_lr: t_max must be >= 1");
  if (t < 0) throw ConfigError("cosine_lr: negative step");
  if (t == 0) return base_lr;
  if (t >= t_max) return eta_min;
  const double c = std::cos(3.14159265358979323846 * static_cast<double>(t) /
                            static_cast<double>(t_max));
  return eta_min + 0.5 * (base_lr - eta_min) * (1.0 + c);
}

double global_grad_norm(const ParamStore& store) {
  double sq = 0.0;
  for (const auto& e : store.entries()) {
    if (!e.trainable || !e.tensor.has_grad()) continue;
    const float* g = e.tensor.grad_data();
    for (std::int64_t i = 0; i < e.tensor.numel(); ++i) {
      sq += static_cast<double>(g[i]) * g[i];
    }
  }
  return std::sqrt(sq);
}

double clip_grad_norm(const ParamStore& store, double maxnorm) {
  const double norm = global_grad_norm(store);
  if (!std::isfinite(norm)) {
    throw NumericsError("gradient norm is not finite");
  }
  if (norm <= maxnorm) return 1.0;
  const double scale = maxnorm / norm;
  const float fs = static_cast<float>(scale);
  for (const auto& e : store.entries()) {
    if (!e.trainable || !e.tensor.has_grad()) continue;
    float* g = e.tensor.grad();
    for (std::int64_t i = 0; i < e.tensor.numel(); ++i) g[i] *= fs;
  }
  return scale;
}

void adam_step(const ParamStore& store, AdamState& state, double lr_t, double weight_decay,
               bool decoupled) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(static_cast<double>(AdamState::kBeta1), state.t);
  const double bc2 = 1.0 - std::pow(static_cast<double>(AdamState::kBeta2), state.t);
  const auto& entries = store.entries();
  for (std::size_t ei = 0; ei < entries.size(); ++ei) {
    const auto& e = entries[ei];
    if (!e.trainable) continue;
    float* p = e.tensor.data();
    const std::int64_t n = e.tensor.numel();
    // zero grad buffers may be absent entirely when a parameter saw no use
    std::vector<float> zeros;
    const float* g = e.tensor.grad_data();
    if (!g) {
      zeros.assign(static_cast<std::size_t>(n), 0.f);
      g = zeros.data();
    }
    float* mm = state.m[ei].data();
    float* vv = state.v[ei].data();
    for (std::int64_t i = 0; i < n; ++i) {
      float gi = g[i];
      if (decoupled) {
        p[i] *= static_cast<float>(1.0 - lr_t * weight_decay);
      } else {
        gi += static_cast<float>(weight_decay) * p[i];
      }
      mm[i] = AdamState::kBeta1 * mm[i] + (1.f - AdamState::kBeta1) * gi;
      vv[i] = AdamState::kBeta2 * vv[i] + (1.f - AdamState::kBeta2) * gi * gi;
      const double mhat = mm[i] / bc1;
      const double vhat = vv[i] / bc2;
      p[i] -= static_cast<float>(lr_t * mhat / (std::sqrt(vhat) + AdamState::kEps));
    }
  }
}

std::string TrainingLog::to_csv() const {
  std::string out = "epoch,lr,train_loss,train_acc,test_loss,test_acc\n";
  char buf[192];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.lr, r.train_loss,
                  r.train_accuracy, r.test_loss, r.test_accuracy);
    out += buf;
  }
  return out;
}

EvalResult evaluate(HybridModel& model, const DatasetSplit& split, int batch_size,
                    float threshold) {
  EvalResult res;
  double loss_sum = 0.0;
  std::int64_t correct = 0, total = 0;
  std::vector<int> preds, labels;
  for (const auto& batch : make_batches(split, batch_size, 0)) {
    ForwardResult fwd = model.forward(batch.images, /*training=*/false);
    Tensor loss = ops::bce_loss(fwd.prob, batch.labels);
    const int n = batch.images.dim(0);
    loss_sum += static_cast<double>(loss.item()) * n;
    for (int i = 0; i < n; ++i) {
      const int pred = fwd.prob.data()[i] >= threshold ? 1 : 0;
      const int label = batch.labels.data()[i] != 0.f ? 1 : 0;
      preds.push_back(pred);
      labels.push_back(label);
      correct += pred == label ? 1 : 0;
      ++total;
    }
  }
  res.loss = loss_sum / static_cast<double>(total);
  res.accuracy = static_cast<double>(correct) / static_cast<double>(total);
  res.cm = confusion(preds, labels);
  return res;
}

void save_checkpoint(const std::string& prefix, HybridModel& model,
                     const nlohmann::json& config_snapshot, int epoch, double test_accuracy) {
  std::vector<NamedTensor> tensors;
  for (const auto& e : model.params().entries()) {
    tensors.push_back(NamedTensor{e.name, e.tensor});
  }
  const std::string bin = prefix + ".bin";
  std::vector<BlobEntry> entries = write_blob(bin, tensors);
  nlohmann::json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["variant"] = variant_name(model.config().variant);
  manifest["epoch"] = epoch;
  manifest["test_accuracy"] = test_accuracy;
  manifest["config"] = config_snapshot;
  manifest["blob"] = bin.substr(bin.find_last_of('/') + 1);
  nlohmann::json jt = nlohmann::json::array();
  for (const auto& e : entries) {
    jt.push_back({{"name", e.name},
                  {"shape", e.shape},
                  {"offset_bytes", e.offset_bytes},
                  {"size_bytes", e.size_bytes}});
  }
  manifest["tensors"] = jt;
  std::ofstream out(prefix + ".json", std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint manifest " + prefix + ".json");
  out << manifest.dump(2) << "\n";
}

CheckpointManifest read_checkpoint_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw ConfigError("cannot open checkpoint manifest: " + manifest_path);
  nlohmann::json j;
  in >> j;
  CheckpointManifest m;
  m.format_version = j.at("format_version").get<std::string>();
  if (m.format_version != kCheckpointFormatVersion) {
    throw ConfigError("unsupported checkpoint format version " + m.format_version);
  }
  m.variant = j.at("variant").get<std::string>();
  m.epoch = j.at("epoch").get<int>();
  m.test_accuracy = j.at("test_accuracy").get<double>();
  m.config = j.at("config");
  for (const auto& t : j.at("tensors")) {
    BlobEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    e.offset_bytes = t.at("offset_bytes").get<std::int64_t>();
    e.size_bytes = t.at("size_bytes").get<std::int64_t>();
    m.tensors.push_back(std::move(e));
  }
  const std::string blob_name = j.at("blob").get<std::string>();
  const auto slash = manifest_path.find_last_of('/');
  m.bin_path = slash == std::string::npos ? blob_name
                                          : manifest_path.substr(0, slash + 1) + blob_name;
  return m;
}

void load_checkpoint_into(const CheckpointManifest& manifest, HybridModel& model) {
  std::vector<NamedTensor> targets;
  for (const auto& e : model.params().entries()) {
    targets.push_back(NamedTensor{e.name, e.tensor});
  }
  read_blob(manifest.bin_path, manifest.tensors, targets);
}

TrainResult train(HybridModel& model, const DatasetSplit& train_split,
                  const DatasetSplit& test_split, const TrainConfig& config,
                  const AugmentationConfig& aug, const std::string& checkpoint_prefix,
                  const nlohmann::json& config_snapshot, const StepHook& hook) {
  config.validate();
  if (train_split.examples.empty() || test_split.examples.empty()) {
    throw ContractError("train: empty split");
  }

  AdamState opt;
  opt.init(model.params());
  TrainResult result;

  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(train_split.examples.size()) + config.batch_size - 1) /
      config.batch_size;
  const std::int64_t total_steps = steps_per_epoch * config.epochs;
  const std::uint64_t aug_seed = mix_seed(config.seed, "augment");

  const std::int64_t stride = train_split.examples.front().image.numel();
  const Shape img_shape = train_split.examples.front().image.shape();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double epoch_lr =
        cosine_lr(epoch, config.lr, config.eta_min, config.epochs);
    double last_lr = epoch_lr;
    double train_loss_sum = 0.0;
    std::int64_t train_correct = 0, train_total = 0;

    const auto plan =
        batch_plan(train_split, config.batch_size, mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t bi = 0; bi < plan.size(); ++bi) {
      const auto& idx = plan[bi];
      const int n = static_cast<int>(idx.size());
      Shape bshape = img_shape;
      bshape.insert(bshape.begin(), n);
      Tensor images = Tensor::zeros(bshape);
      Tensor labels = Tensor::zeros({n});
      for (int i = 0; i < n; ++i) {
        const auto& ex = train_split.examples[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
        const Tensor* img = &ex.image;
        LabeledExample augmented;
        if (config.augment_enabled) {
          Rng rng(mix_seed(aug_seed, static_cast<std::uint64_t>(epoch) * 1000003ull +
                                         static_cast<std::uint64_t>(idx[static_cast<std::size_t>(i)])));
          augmented = augment(ex, rng, aug);
          img = &augmented.image;
        }
        std::memcpy(images.data() + i * stride, img->data(),
                    static_cast<std::size_t>(stride) * sizeof(float));
        labels.data()[i] = static_cast<float>(ex.label);
      }

      const std::int64_t step = result.total_steps;
      const double lr_t = config.per_step_schedule
                              ? cosine_lr(step, config.lr, config.eta_min, total_steps)
                              : epoch_lr;
      last_lr = lr_t;

      Rng dropout_rng(mix_seed(config.seed, 0x0d0ull + static_cast<std::uint64_t>(step)));
      Tape tape;
      Tensor loss;
      ForwardResult fwd;
      {
        TapeScope scope(tape);
        fwd = model.forward(images, /*training=*/true, &dropout_rng);
        loss = ops::bce_loss(fwd.prob, labels);
      }
      const double loss_val = loss.item();
      if (!std::isfinite(loss_val)) {
        throw NumericsError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                            std::to_string(step + 1));
      }
      model.params().zero_grads();
      tape.backward(loss);
      double clip_scale;
      try {
        clip_scale = clip_grad_norm(model.params(), config.clip_maxnorm);
      } catch (const NumericsError&) {
        throw NumericsError("non-finite gradient norm at epoch " + std::to_string(epoch + 1) +
                            ", step " + std::to_string(step + 1));
      }
      adam_step(model.params(), opt, lr_t, config.weight_decay, config.decoupled_weight_decay);

      train_loss_sum += loss_val * n;
      for (int i = 0; i < n; ++i) {
        const int pred = fwd.prob.data()[i] >= config.threshold ? 1 : 0;
        const int label = labels.data()[i] != 0.f ? 1 : 0;
        train_correct += pred == label ? 1 : 0;
      }
      train_total += n;
      result.total_steps += 1;

      if (hook) {
        StepInfo info;
        info.epoch = epoch + 1;
        info.step = result.total_steps;
        info.loss = loss_val;
        info.lr = lr_t;
        info.clip_scale = clip_scale;
        info.post_clip_norm = global_grad_norm(model.params());
        hook(info);
      }
    }

    EvalResult ev = evaluate(model, test_split, config.batch_size, config.threshold);
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.lr = last_lr;
    rec.train_loss = train_loss_sum / static_cast<double>(train_total);
    rec.train_accuracy = static_cast<double>(train_correct) / static_cast<double>(train_total);
    rec.test_loss = ev.loss;
    rec.test_accuracy = ev.accuracy;
    result.log.records.push_back(rec);

    // strict improvement only; ties keep the earlier checkpoint
    if (ev.accuracy > result.best_test_accuracy) {
      result.best_test_accuracy = ev.accuracy;
      result.best_epoch = epoch + 1;
      if (!checkpoint_prefix.empty()) {
        save_checkpoint(checkpoint_prefix, model, config_snapshot, epoch + 1, ev.accuracy);
      }
    }
  }
  return result;
}

}  // namespace fundus

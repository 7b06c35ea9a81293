#include <cmath>
#include <limits>
#include <numeric>

#include "polarlab/so3_testbed.hpp"

namespace polarlab {

double default_matrix_lr(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::AdamW: return 3e-2;
    case OptimizerKind::Muon: return 5e-3;
    case OptimizerKind::PolarAdamW: return 1e-2;
  }
  return 1e-3;
}

double default_aux_lr(OptimizerKind kind) {
  return kind == OptimizerKind::AdamW ? 3e-2 : 3e-3;
}

TrainSetup make_train_setup(const TrainConfig& config) {
  const Rng root(config.seed);
  Rng train_rng = root.split("train");
  Rng test_rng = root.split("test");
  Rng init_rng = root.split("init");
  TrainSetup setup;
  setup.train = generate_dataset(config.n_train, config.n_points, train_rng);
  setup.test = generate_dataset(config.n_test, config.n_points, test_rng);
  setup.model = So3Model::create(config.hc, config.n_layers, init_rng);
  return setup;
}

namespace {

void validate(const TrainConfig& c) {
  if (c.hc < 1) throw BadFlag("train: hc must be >= 1");
  if (c.n_layers < 0) throw BadFlag("train: n_layers must be >= 0");
  if (c.epochs < 0) throw BadFlag("train: epochs must be >= 0");
  if (c.warmup_epochs < 0) throw BadFlag("train: warmup_epochs must be >= 0");
  if (c.patience < 1) throw BadFlag("train: patience must be >= 1");
  if (c.batch_size < 1) throw BadFlag("train: batch_size must be >= 1");
  if (c.n_train < 1 || c.n_test < 1) throw BadFlag("train: dataset sizes must be >= 1");
  if (c.n_points < 3) throw BadFlag("train: n_points must be >= 3");
  if (c.weight_decay < 0.0) throw BadFlag("train: weight_decay must be >= 0");
}

std::vector<Matrix> gradient_list(So3Model& grads) {
  std::vector<Matrix> out;
  for (const auto& p : grads.parameters()) out.push_back(*p.value);
  return out;
}

void zero_gradients(So3Model& grads) {
  for (const auto& p : grads.parameters()) p.value->setZero();
}

}  // namespace

TrainResult train(const TrainConfig& config) {
  validate(config);
  TrainSetup setup = make_train_setup(config);
  So3Model& model = setup.model;

  TrainResult result;
  if (config.epochs == 0) {
    result.final_test_mse = evaluate_mse(model, setup.test);
    return result;
  }

  OptimizerConfig oc;
  oc.kind = config.optimizer;
  oc.matrix_lr = config.base_lr > 0.0 ? config.base_lr : default_matrix_lr(config.optimizer);
  oc.aux_lr = config.aux_lr > 0.0 ? config.aux_lr : default_aux_lr(config.optimizer);
  oc.weight_decay = config.weight_decay;
  oc.aux_weight_decay = 0.0;
  oc.ns.precision = config.ns_precision;
  GroupOptimizer optimizer(oc, split_parameters(model));

  const LrSchedule schedule{1.0, config.warmup_epochs, config.epochs, 1e-3};
  Rng shuffle_rng = Rng(config.seed).split("shuffle");
  std::vector<std::size_t> order(setup.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  So3Model grads = model.zeros_like();
  ForwardCache cache;
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double scale = lr_at(schedule, epoch);
    for (std::size_t i = order.size(); i > 1; --i) {
      const std::size_t j = shuffle_rng.next_u64() % i;
      std::swap(order[i - 1], order[j]);
    }

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t stop = std::min(order.size(), start + config.batch_size);
      const double inv = 1.0 / static_cast<double>(stop - start);
      zero_gradients(grads);
      double batch_loss = 0.0;
      for (std::size_t k = start; k < stop; ++k) {
        const PointCloud& cloud = setup.train[order[k]];
        const LossValue lv = mse_loss(forward(model, cloud.points, cache), cloud.target);
        batch_loss += lv.loss;
        backward_accumulate(model, cache, lv.d_pred * inv, grads);
      }
      if (!std::isfinite(batch_loss))
        throw DivergenceDetected("train: non-finite training loss at epoch " + std::to_string(epoch));
      loss_sum += batch_loss;
      optimizer.step(model.parameters(), gradient_list(grads), scale);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr_scale = scale;
    rec.train_mse = loss_sum / static_cast<double>(order.size());
    rec.test_mse = evaluate_mse(model, setup.test);
    if (!std::isfinite(rec.test_mse))
      throw DivergenceDetected("train: non-finite test loss at epoch " + std::to_string(epoch));
    result.history.push_back(rec);

    if (rec.test_mse < best) {
      best = rec.test_mse;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }

  result.final_test_mse = best;
  result.stopped_epoch = static_cast<int>(result.history.size());
  return result;
}

}  // namespace polarlab

#pragma once

#include <cstdint>
#include <vector>

#include "datasets.hpp"
#include "residual_blocks.hpp"
#include "training.hpp"

namespace rskip {

/// The desk-scale benchmark: a 3-arm spiral and a 16-block width-64 residual MLP.
inline DatasetSpec desk_dataset(std::uint64_t seed = 7) {
  DatasetSpec spec;
  spec.source = DatasetSource::kSpiral;
  spec.classes = 3;
  spec.train_count = 1024;
  spec.test_count = 512;
  spec.noise = 0.05;
  spec.spiral_turns = 1.0;
  spec.seed = seed;
  return spec;
}

inline TrainConfig desk_train_config(SkipConstruction construction = SkipConstruction::plain()) {
  TrainConfig cfg;
  cfg.model.construction = construction;
  cfg.model.depth = 16;
  cfg.model.input_dim = 2;
  cfg.model.width = 64;
  cfg.model.hidden = 16;
  cfg.model.classes = 3;
  cfg.epochs = 40;
  cfg.batch_size = 64;
  cfg.lr = 0.01;
  cfg.warmup_epochs = 1;
  cfg.warmup_factor = 0.1;
  cfg.milestones = {0.5, 0.75};
  cfg.lr_decay = 0.1;
  cfg.momentum = 0.9;
  cfg.weight_decay = 2e-4;
  return cfg;
}

/// Constructions compared by the desk matrix.
inline std::vector<SkipConstruction> desk_matrix_constructions() {
  return {SkipConstruction::xskip(1.0),          SkipConstruction::xskip(2.0),
          SkipConstruction::xskip_ln(1.0),       SkipConstruction::xskip_ln(2.0),
          SkipConstruction::rskip_ln(2),         SkipConstruction::xskip_ln(0.5),
          SkipConstruction::contracted_ln(2.0),  SkipConstruction::contracted_ln(3.0)};
}

inline std::vector<std::uint64_t> desk_seeds() { return {0, 1, 2, 3, 4}; }

}  // namespace rskip

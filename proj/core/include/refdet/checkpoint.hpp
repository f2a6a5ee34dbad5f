#pragma once

#include <string>

#include "refdet/model.hpp"
#include "refdet/trainer.hpp"

namespace refdet {

/// Versioned training-state container: all learnable parameters, optimizer
/// moments, config snapshot, rng state, and the template-inventory reference.
/// Serialized as a checksummed binary file; loading restores training
/// bit-exactly.
struct Checkpoint {
    ModelConfig model_config;
    TrainConfig train_config;
    ParamStore<float> params;
    AdamState adam;
    std::string rng_state;
    int epochs_done = 0;
    std::string inventory_path; // template inventory the log encoder was built on
    int inventory_size = 0;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Rejects a checkpoint whose architecture differs from the requested one.
void ensure_compatible(const Checkpoint& ckpt, const ModelConfig& requested);

} // namespace refdet

#pragma once

#include <filesystem>

#include "anomseg/trainer.hpp"

namespace anomseg::train {

// Versioned binary container: named double tensors (weights + optimizer
// moments), the resolved train config, network input size and the iteration
// counter. Payload integrity is hash-checked on load.
void save_checkpoint(const TrainerState& st, const std::filesystem::path& path);
TrainerState load_checkpoint(const std::filesystem::path& path);

}  // namespace anomseg::train

#pragma once

#include <string>
#include <vector>

#include "crnet/cost_model.hpp"
#include "crnet/model.hpp"

namespace crnet {

// Named configurations: two small ones sized for tests plus the llama2-style
// scales used by the accounting tables. preset_instantiable flags the scales
// whose parameter sets fit comfortably in memory here; the large ones are
// meant for closed-form accounting only.
std::vector<std::string> preset_names();
bool preset_instantiable(const std::string& name);
ModelConfig model_preset(const std::string& name);
CostConfig cost_preset(const std::string& name);

}  // namespace crnet

#pragma once

#include <string>

#include "subseg/attention.hpp"
#include "subseg/model.hpp"

namespace subseg {

// A restored model with its attention parameters and the variant flags it
// was trained under.
struct Checkpoint {
  Model model;
  AttentionParams attention;
  VariantFlags variant;
};

// Serializes every parameter and buffer of `model` (attention parameters
// included, since they live in the model's store) plus a JSON metadata entry
// holding the model config and variant flags. The file is a plain npz archive.
void save_checkpoint(const Model& model, const VariantFlags& variant, const std::string& path);

// Rebuilds the model from the stored config and restores every tensor,
// verifying that names and shapes match exactly.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace subseg

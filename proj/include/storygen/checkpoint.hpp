#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "storygen/config.hpp"
#include "storygen/seq2seq.hpp"

namespace storygen {

inline constexpr int kCheckpointFormatVersion = 1;

struct StoredTensor {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

/// Text manifest plus named float32 tensors.
///
/// On disk:
///   storygen-checkpoint <version>
///   manifest <byte count>
///   <key = value lines>
///   tensors <count>
///   then per tensor a line "tensor <name> <rank> <dims...>" followed by the
///   row-major little-endian float32 payload.
struct Checkpoint {
    KeyValueConfig manifest;
    std::vector<StoredTensor> tensors;

    const StoredTensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t file_hash(const std::string& path);
std::string hex64(std::uint64_t value);

/// Appends the parameters under `prefix`.
void store_parameters(Checkpoint& checkpoint, const ParameterList<float>& params, const std::string& prefix = "");

/// Copies stored values into `params`. Every parameter must be present with
/// a matching shape; stored tensors under `prefix` must all be consumed.
void restore_parameters(const Checkpoint& checkpoint, const ParameterList<float>& params,
                        const std::string& prefix = "");

/// Writes the spec as "<prefix><key> = value" manifest entries.
void store_model_spec(Checkpoint& checkpoint, const ModelSpec& spec, const std::string& prefix = "spec.");
ModelSpec stored_model_spec(const Checkpoint& checkpoint, const std::string& prefix = "spec.");

/// Rebuilds a ConvSeq2Seq from the manifest spec and the tensors under "model.".
std::unique_ptr<ConvSeq2Seq<float>> load_model(const Checkpoint& checkpoint, bool with_output_head = true);
void store_model(Checkpoint& checkpoint, const ConvSeq2Seq<float>& model);

}  // namespace storygen

#pragma once

// Versioned binary checkpoint container.
//
// Layout (little-endian): "FLOWMOCK", u32 version, u64 fingerprint, u8 stage,
// u64 step, u32 tensor count, then per tensor: u16 name length, name bytes,
// u8 dtype (0 = f64, 1 = u8), u8 rank, u64 dims[rank], raw data. A trailing
// u64 FNV-1a checksum covers everything before it.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowmo/optim.hpp"
#include "flowmo/params.hpp"

namespace flowmo::ckpt {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class StageTag : std::uint8_t { Stage1A = 1, Stage1B = 2, Stage2 = 3 };

std::string stage_name(StageTag tag);

struct CheckpointState {
    StageTag stage = StageTag::Stage1A;
    std::uint64_t step = 0;
    std::uint64_t fingerprint = 0;
    std::uint32_t version = kCheckpointVersion;
    std::string config_text;

    std::vector<std::string> names;  // parameter names, in store order
    std::vector<Tensor> params;
    std::vector<Tensor> ema;
    optim::AdamState adam;

    /// Checks that names, params, ema and moments are congruent.
    void validate() const;
};

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};
class CheckpointVersionError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};
class FingerprintMismatchError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};
class CorruptCheckpointError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};
class StageError : public CheckpointError {
public:
    using CheckpointError::CheckpointError;
};

void save_checkpoint(const CheckpointState& state, const std::filesystem::path& path);
CheckpointState load_checkpoint(const std::filesystem::path& path);

/// Throws FingerprintMismatchError unless the checkpoint was written for `expected`.
void require_fingerprint(const CheckpointState& state, std::uint64_t expected);

/// Snapshot of a live store: params and EMA; moments from `adam`.
CheckpointState capture(const ParameterStore& store, const std::vector<Tensor>& ema, const optim::AdamState& adam,
                        StageTag stage, std::uint64_t step, std::uint64_t fingerprint, std::string config_text);

/// Copies `tensors` (raw params or EMA of `state`) into `store`, matching by name and shape.
void restore(ParameterStore& store, const CheckpointState& state, const std::vector<Tensor>& tensors);

}  // namespace flowmo::ckpt

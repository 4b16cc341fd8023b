#ifndef LSF_CHECKPOINT_HPP
#define LSF_CHECKPOINT_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

#include "lsf/model.hpp"
#include "lsf/train.hpp"

namespace lsf {

enum class CheckpointErrorKind { Io, BadMagic, BadVersion, Truncated, DuplicateTensor, Malformed };

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct Checkpoint {
  ModelParams<float> params;  // carries the config and variant
  TrainMode mode = TrainMode::Baseline;
  std::uint64_t seed = 0;
  float best_val_loss = 0.0f;
};

/// Binary layout: magic "LSHF", u32 version=1, u32 config byte length, the
/// UTF-8 key=value config document, u32 tensor count, then per tensor:
/// u16 name length, name, u8 dtype (0 = f32), u8 rank, rank x u32 dims,
/// row-major f32 data. All integers little-endian.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::string& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace lsf

#endif  // LSF_CHECKPOINT_HPP

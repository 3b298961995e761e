#pragma once

#include <filesystem>
#include <iosfwd>

#include "echodx/ect_io.hpp"
#include "echodx/network.hpp"

namespace echodx {

/// Raised when a checkpoint tensor does not fit the embedded configuration.
class CheckpointShapeError : public IoError {
 public:
  using IoError::IoError;
};

class UnsupportedVersionError : public IoError {
 public:
  using IoError::IoError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Checkpoint layout:
//   "R21D" | u32 version | config echo | u32 entry count |
//   entries sorted by name: u32 name length | name bytes | ECT1 tensor
// Config echo: u32 #stages, stage widths, u32 #stages, blocks per stage,
// u32 stem midplane, u32 classes, 3 x u32 input extents, u8 linear flag.
void write_checkpoint(std::ostream& out, const Network& net);
Network read_checkpoint(std::istream& in);

void checkpoint_save(const Network& net, const std::filesystem::path& path);
Network checkpoint_load(const std::filesystem::path& path);

}  // namespace echodx

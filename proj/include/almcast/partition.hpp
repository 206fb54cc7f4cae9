#pragma once

#include <cstdint>
#include <vector>

#include "almcast/types.hpp"

namespace almcast::distribution {

/// Disjoint sub-groups of OH with an EH capacity slice each. EH are mapped to
/// groups by their index in the EH population: the first eh_capacity[0]
/// indices go to group 0, and so on.
struct PartitionPlan {
  struct Group {
    std::vector<NodeId> oh_members;
    std::uint32_t eh_capacity = 0;
  };
  std::vector<Group> groups;
  std::uint32_t oh_per_eh = 0;  // OH each EH measures (the group size)

  /// Group index for the EH at `eh_index`; indices past the total capacity
  /// fall into the last group.
  std::size_t group_of_eh(std::size_t eh_index) const;
  std::uint32_t total_capacity() const;
};

}  // namespace almcast::distribution

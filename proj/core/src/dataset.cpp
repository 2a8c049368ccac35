#include "sit/dataset.hpp"

#include <fmt/format.h>

#include "sit/error.hpp"

namespace sit {

void Dataset::validate() const {
  if (!table) throw StateError("dataset has no patch table");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& f = examples[i].field;
    if (static_cast<std::size_t>(f.vertex_count()) != table->carrier_vertex_count) {
      throw ShapeError(fmt::format("example {} has {} vertices, the patch table expects {}", i, f.vertex_count(),
                                   table->carrier_vertex_count));
    }
    if (f.channel_count() != examples.front().field.channel_count()) {
      throw ShapeError(fmt::format("example {} has {} channels, example 0 has {}", i, f.channel_count(),
                                   examples.front().field.channel_count()));
    }
  }
}

int Dataset::channels() const {
  return examples.empty() ? 0 : static_cast<int>(examples.front().field.channel_count());
}

PatchSequence Dataset::sequence(std::size_t i, const ResampleTable* rotation) const {
  const Example& ex = examples.at(i);
  if (rotation) return extract_sequence(apply_resample(ex.field, *rotation), *table);
  return extract_sequence(ex.field, *table);
}

std::vector<double> Dataset::targets() const {
  std::vector<double> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back(ex.target);
  return out;
}

std::vector<double> Dataset::confounds() const {
  std::vector<double> out;
  for (const auto& ex : examples) {
    if (ex.confound) out.push_back(*ex.confound);
  }
  return out;
}

}  // namespace sit

#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "csmx/tensor.h"

namespace csmx {

/// An einops-style axis rearrangement such as
/// "b (nh g1) (nw g2) c -> (b nh nw) (g1 g2) c". Only pure permutations with
/// grouping/ungrouping are supported: every named axis appears exactly once
/// on each side.
class RearrangeSpec {
 public:
  static RearrangeSpec parse(std::string_view pattern,
                             std::map<std::string, std::size_t> known_sizes = {});

  /// The reverse mapping, carrying the same known sizes.
  RearrangeSpec inverse() const;

  struct Plan {
    Shape factored;  // input viewed with every named axis split out
    std::vector<std::size_t> perm;
    Shape output;
  };
  /// Resolves axis sizes against a concrete input shape.
  Plan plan(const Shape& input) const;

  const std::string& pattern() const { return pattern_; }

 private:
  using Groups = std::vector<std::vector<std::string>>;
  Groups lhs_, rhs_;
  std::map<std::string, std::size_t> sizes_;
  std::string pattern_;
};

Tensor rearrange(const Tensor& x, const RearrangeSpec& spec);

}  // namespace csmx

#include "csmx/rearrange.h"

#include <algorithm>
#include <cctype>
#include <set>

#include "csmx/ops.h"

namespace csmx {

namespace {

using Groups = std::vector<std::vector<std::string>>;

Groups parse_side(std::string_view side, std::string_view pattern) {
  Groups groups;
  bool open = false;
  std::string name;
  auto flush = [&] {
    if (name.empty()) return;
    if (open) {
      groups.back().push_back(name);
    } else {
      groups.push_back({name});
    }
    name.clear();
  };
  for (char ch : side) {
    if (std::isalnum(static_cast<unsigned char>(ch)) || ch == '_') {
      name.push_back(ch);
    } else if (ch == '(') {
      flush();
      if (open) throw std::invalid_argument("rearrange: nested group in '" + std::string(pattern) + "'");
      open = true;
      groups.emplace_back();
    } else if (ch == ')') {
      flush();
      if (!open) throw std::invalid_argument("rearrange: unbalanced ')' in '" + std::string(pattern) + "'");
      open = false;
    } else if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      throw std::invalid_argument("rearrange: unexpected character in '" + std::string(pattern) + "'");
    }
  }
  flush();
  if (open) throw std::invalid_argument("rearrange: unclosed '(' in '" + std::string(pattern) + "'");
  return groups;
}

std::vector<std::string> names_of(const Groups& groups) {
  std::vector<std::string> out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

}  // namespace

RearrangeSpec RearrangeSpec::parse(std::string_view pattern, std::map<std::string, std::size_t> known_sizes) {
  const auto arrow = pattern.find("->");
  if (arrow == std::string_view::npos) {
    throw std::invalid_argument("rearrange: pattern lacks '->': '" + std::string(pattern) + "'");
  }
  RearrangeSpec spec;
  spec.pattern_ = std::string(pattern);
  spec.lhs_ = parse_side(pattern.substr(0, arrow), pattern);
  spec.rhs_ = parse_side(pattern.substr(arrow + 2), pattern);
  spec.sizes_ = std::move(known_sizes);

  auto lhs = names_of(spec.lhs_), rhs = names_of(spec.rhs_);
  std::set<std::string> lset(lhs.begin(), lhs.end()), rset(rhs.begin(), rhs.end());
  if (lset.size() != lhs.size() || rset.size() != rhs.size() || lset != rset) {
    throw std::invalid_argument("rearrange: each axis must appear exactly once per side in '" +
                                spec.pattern_ + "'");
  }
  for (const auto& [name, size] : spec.sizes_) {
    if (!lset.count(name)) throw std::invalid_argument("rearrange: size given for unknown axis '" + name + "'");
    if (size == 0) throw std::invalid_argument("rearrange: axis '" + name + "' has size 0");
  }
  return spec;
}

RearrangeSpec RearrangeSpec::inverse() const {
  RearrangeSpec inv = *this;
  std::swap(inv.lhs_, inv.rhs_);
  const auto arrow = pattern_.find("->");
  inv.pattern_ = pattern_.substr(arrow + 2) + " -> " + pattern_.substr(0, arrow);
  return inv;
}

RearrangeSpec::Plan RearrangeSpec::plan(const Shape& input) const {
  if (input.size() != lhs_.size()) {
    throw ShapeError("rearrange '" + pattern_ + "': expected rank " + std::to_string(lhs_.size()) +
                     ", got " + shape_str(input));
  }
  std::map<std::string, std::size_t> sizes = sizes_;
  for (std::size_t a = 0; a < lhs_.size(); ++a) {
    std::size_t known = 1;
    const std::string* unknown = nullptr;
    for (const auto& name : lhs_[a]) {
      auto it = sizes.find(name);
      if (it != sizes.end()) {
        known *= it->second;
      } else if (unknown) {
        throw std::invalid_argument("rearrange '" + pattern_ + "': axes '" + *unknown + "' and '" + name +
                                    "' are both unsized");
      } else {
        unknown = &name;
      }
    }
    if (input[a] % known != 0) {
      throw ShapeError("rearrange '" + pattern_ + "': extent " + std::to_string(input[a]) + " of axis " +
                       std::to_string(a) + " is not divisible by " + std::to_string(known));
    }
    if (unknown) {
      sizes[*unknown] = input[a] / known;
    } else if (known != input[a]) {
      throw ShapeError("rearrange '" + pattern_ + "': extent " + std::to_string(input[a]) + " of axis " +
                       std::to_string(a) + " does not equal " + std::to_string(known));
    }
  }
  Plan plan;
  std::map<std::string, std::size_t> position;
  for (const auto& name : names_of(lhs_)) {
    position[name] = plan.factored.size();
    plan.factored.push_back(sizes.at(name));
  }
  for (const auto& group : rhs_) {
    std::size_t extent = 1;
    for (const auto& name : group) {
      plan.perm.push_back(position.at(name));
      extent *= sizes.at(name);
    }
    plan.output.push_back(extent);
  }
  return plan;
}

Tensor rearrange(const Tensor& x, const RearrangeSpec& spec) {
  const auto plan = spec.plan(x.shape());
  return ops::permute(x, plan.factored, plan.perm, plan.output);
}

}  // namespace csmx

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "ccmcd/geometry.hpp"

namespace ccmcd {

/// Ordered product of CCMs. Member order fixes the concatenation order of the
/// c (d+1)-dimensional embedding blocks.
class Ensemble {
 public:
  Ensemble() = default;
  explicit Ensemble(std::vector<Manifold> members) : members_(std::move(members)) {
    if (members_.empty()) throw ConfigError("ensemble needs at least one manifold");
    for (const auto& m : members_) {
      if (m.dim < 1) throw ConfigError("ensemble member dimension must be positive");
    }
  }

  std::size_t size() const noexcept { return members_.size(); }
  const Manifold& operator[](std::size_t i) const { return members_.at(i); }
  const std::vector<Manifold>& members() const noexcept { return members_; }
  auto begin() const noexcept { return members_.begin(); }
  auto end() const noexcept { return members_.end(); }

  /// Offset of member i's block inside the concatenated embedding.
  std::size_t offset(std::size_t i) const {
    std::size_t off = 0;
    for (std::size_t j = 0; j < i; ++j) off += members_.at(j).ambient_dim();
    return off;
  }

  std::size_t total_dim() const noexcept {
    std::size_t n = 0;
    for (const auto& m : members_) n += m.ambient_dim();
    return n;
  }

  friend bool operator==(const Ensemble&, const Ensemble&) = default;

 private:
  std::vector<Manifold> members_;
};

inline std::string manifold_name(const Manifold& m) {
  switch (m.curvature.geometry()) {
    case Geometry::spherical: return m.curvature.value() == 1.0 ? "sphere" : "sphere(" + std::to_string(m.curvature.value()) + ")";
    case Geometry::flat: return "flat";
    case Geometry::hyperbolic: return m.curvature.value() == -1.0 ? "hyperbolic" : "hyperbolic(" + std::to_string(m.curvature.value()) + ")";
  }
  return "?";
}

/// Parses a comma-separated member list. Each entry is a name (`sphere`,
/// `flat`, `hyperbolic`, also `s`/`e`/`h`), a numeric curvature, or `M`
/// followed by a curvature (`M-1`); `all` and `M*` expand to
/// `hyperbolic,flat,sphere`.
inline Ensemble parse_ensemble(std::string_view text, int dim = 2) {
  std::vector<Manifold> members;
  std::size_t pos = 0;
  if (text == "all" || text == "product" || text == "M*") text = "hyperbolic,flat,sphere";
  while (pos <= text.size()) {
    const std::size_t comma = text.find(',', pos);
    std::string token(text.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    std::erase_if(token, [](char c) { return c == ' '; });
    if (token.size() > 1 && token[0] == 'M') token.erase(0, 1);
    if (token.empty()) throw ConfigError("empty ensemble member in '" + std::string(text) + "'");
    double kappa = 0.0;
    if (token == "sphere" || token == "spherical" || token == "s") {
      kappa = 1.0;
    } else if (token == "flat" || token == "euclidean" || token == "e") {
      kappa = 0.0;
    } else if (token == "hyperbolic" || token == "h") {
      kappa = -1.0;
    } else {
      try {
        std::size_t used = 0;
        kappa = std::stod(token, &used);
        if (used != token.size()) throw ConfigError("bad curvature");
      } catch (const std::exception&) {
        throw ConfigError("unknown ensemble member '" + token + "'");
      }
    }
    members.push_back(Manifold{Curvature(kappa), dim});
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return Ensemble(std::move(members));
}

inline std::string ensemble_name(const Ensemble& e) {
  if (e.size() > 1) {
    std::string out;
    for (std::size_t i = 0; i < e.size(); ++i) out += (i ? "," : "") + manifold_name(e[i]);
    return out;
  }
  return manifold_name(e[0]);
}

}  // namespace ccmcd

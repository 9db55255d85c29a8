#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace valsteer {

inline constexpr std::size_t kNumValues = 10;
inline constexpr std::size_t kNumGroups = 4;

/// One of the ten basic values, in canonical order.
enum class ValueId : unsigned char {
  Achievement,
  Stimulation,
  Hedonism,
  SelfDirection,
  Power,
  Security,
  Tradition,
  Conformity,
  Benevolence,
  Universalism,
};

enum class GroupId : unsigned char {
  OpennessToChange,
  SelfEnhancement,
  Conservation,
  SelfTranscendence,
};

inline constexpr std::array<ValueId, kNumValues> kAllValues = {
    ValueId::Achievement, ValueId::Stimulation, ValueId::Hedonism, ValueId::SelfDirection,
    ValueId::Power,       ValueId::Security,    ValueId::Tradition, ValueId::Conformity,
    ValueId::Benevolence, ValueId::Universalism};

inline constexpr std::array<GroupId, kNumGroups> kAllGroups = {
    GroupId::OpennessToChange, GroupId::SelfEnhancement, GroupId::Conservation,
    GroupId::SelfTranscendence};

constexpr std::size_t index_of(ValueId v) noexcept { return static_cast<std::size_t>(v); }
constexpr std::size_t index_of(GroupId g) noexcept { return static_cast<std::size_t>(g); }

/// Lower-case hyphenated name, e.g. "self-direction".
std::string_view name_of(ValueId v) noexcept;
std::string_view name_of(GroupId g) noexcept;
/// Capitalised form used in judge prompts, e.g. "Self-direction".
std::string display_name(ValueId v);

std::optional<ValueId> parse_value(std::string_view name) noexcept;
std::optional<GroupId> parse_group(std::string_view name) noexcept;
/// Throws Error(UnknownValue).
ValueId value_from_name(std::string_view name);

/// Value set plus the value -> higher-order group map. Immutable once built.
class ValueTaxonomy {
 public:
  explicit ValueTaxonomy(const std::array<GroupId, kNumValues>& group_of) : group_of_(group_of) {}

  [[nodiscard]] GroupId group_of(ValueId v) const noexcept { return group_of_[index_of(v)]; }
  [[nodiscard]] const std::array<ValueId, kNumValues>& values() const noexcept { return kAllValues; }

  friend bool operator==(const ValueTaxonomy&, const ValueTaxonomy&) = default;

 private:
  std::array<GroupId, kNumValues> group_of_;
};

ValueTaxonomy default_taxonomy();

/// Parses {"values": [...], "groups": {group: [values...]}}.
/// Errors: MissingValue, UnknownValue, UnknownGroup, DuplicateAssignment.
ValueTaxonomy load_taxonomy(const nlohmann::json& doc);
ValueTaxonomy load_taxonomy_file(const std::string& path);
nlohmann::json to_json(const ValueTaxonomy& taxonomy);

}  // namespace valsteer

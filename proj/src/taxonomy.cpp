#include "valsteer/taxonomy.hpp"

#include <cctype>
#include <fstream>

#include "valsteer/error.hpp"

namespace valsteer {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::TokenOutOfRange: return "TokenOutOfRange";
    case ErrorCode::NonFiniteActivation: return "NonFiniteActivation";
    case ErrorCode::ContextOverflow: return "ContextOverflow";
    case ErrorCode::InfeasibleConstraint: return "InfeasibleConstraint";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::FormatVersionMismatch: return "FormatVersionMismatch";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::MissingValue: return "MissingValue";
    case ErrorCode::UnknownValue: return "UnknownValue";
    case ErrorCode::UnknownGroup: return "UnknownGroup";
    case ErrorCode::DuplicateAssignment: return "DuplicateAssignment";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::DegenerateLabels: return "DegenerateLabels";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::IncompleteScores: return "IncompleteScores";
    case ErrorCode::NoKeptLayers: return "NoKeptLayers";
    case ErrorCode::StaleSelection: return "StaleSelection";
    case ErrorCode::UndefinedSign: return "UndefinedSign";
    case ErrorCode::LayerMismatch: return "LayerMismatch";
    case ErrorCode::EmptyPairs: return "EmptyPairs";
    case ErrorCode::UnknownPlanKind: return "UnknownPlanKind";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::EndpointUnreachable: return "EndpointUnreachable";
    case ErrorCode::RateLimited: return "RateLimited";
    case ErrorCode::NoValidVerdicts: return "NoValidVerdicts";
  }
  return "Unknown";
}

namespace {

constexpr std::array<std::string_view, kNumValues> kValueNames = {
    "achievement", "stimulation", "hedonism",  "self-direction", "power",
    "security",    "tradition",   "conformity", "benevolence",   "universalism"};

constexpr std::array<std::string_view, kNumGroups> kGroupNames = {
    "openness-to-change", "self-enhancement", "conservation", "self-transcendence"};

}  // namespace

std::string_view name_of(ValueId v) noexcept { return kValueNames[index_of(v)]; }
std::string_view name_of(GroupId g) noexcept { return kGroupNames[index_of(g)]; }

std::string display_name(ValueId v) {
  std::string s(name_of(v));
  s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

std::optional<ValueId> parse_value(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kNumValues; ++i)
    if (kValueNames[i] == name) return kAllValues[i];
  return std::nullopt;
}

std::optional<GroupId> parse_group(std::string_view name) noexcept {
  for (std::size_t i = 0; i < kNumGroups; ++i)
    if (kGroupNames[i] == name) return kAllGroups[i];
  return std::nullopt;
}

ValueId value_from_name(std::string_view name) {
  auto v = parse_value(name);
  if (!v) throw Error(ErrorCode::UnknownValue, "unknown value '" + std::string(name) + "'");
  return *v;
}

ValueTaxonomy default_taxonomy() {
  using G = GroupId;
  // Canonical value order: achievement .. universalism.
  return ValueTaxonomy({G::SelfEnhancement, G::OpennessToChange, G::OpennessToChange,
                        G::OpennessToChange, G::SelfEnhancement, G::Conservation,
                        G::Conservation, G::Conservation, G::SelfTranscendence,
                        G::SelfTranscendence});
}

ValueTaxonomy load_taxonomy(const nlohmann::json& doc) {
  if (!doc.is_object() || !doc.contains("groups") || !doc["groups"].is_object())
    throw Error(ErrorCode::ParseError, "taxonomy document needs a 'groups' object");

  std::array<bool, kNumValues> listed{};
  if (doc.contains("values")) {
    for (const auto& item : doc["values"]) {
      const ValueId v = value_from_name(item.get<std::string>());
      if (listed[index_of(v)])
        throw Error(ErrorCode::DuplicateAssignment, "value listed twice: " + std::string(name_of(v)));
      listed[index_of(v)] = true;
    }
    for (ValueId v : kAllValues)
      if (!listed[index_of(v)])
        throw Error(ErrorCode::MissingValue, "value missing from 'values': " + std::string(name_of(v)));
  }

  std::array<std::optional<GroupId>, kNumValues> assigned{};
  std::array<bool, kNumGroups> nonempty{};
  for (const auto& [group_name, members] : doc["groups"].items()) {
    auto g = parse_group(group_name);
    if (!g) throw Error(ErrorCode::UnknownGroup, "unknown group '" + group_name + "'");
    for (const auto& m : members) {
      const ValueId v = value_from_name(m.get<std::string>());
      if (assigned[index_of(v)])
        throw Error(ErrorCode::DuplicateAssignment,
                    "value assigned to more than one group: " + std::string(name_of(v)));
      assigned[index_of(v)] = *g;
      nonempty[index_of(*g)] = true;
    }
  }

  std::array<GroupId, kNumValues> group_of{};
  for (ValueId v : kAllValues) {
    if (!assigned[index_of(v)])
      throw Error(ErrorCode::MissingValue, "value has no group: " + std::string(name_of(v)));
    group_of[index_of(v)] = *assigned[index_of(v)];
  }
  for (GroupId g : kAllGroups)
    if (!nonempty[index_of(g)])
      throw Error(ErrorCode::InvalidArgument, "group has no values: " + std::string(name_of(g)));
  return ValueTaxonomy(group_of);
}

ValueTaxonomy load_taxonomy_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open taxonomy file " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path + ": " + e.what());
  }
  return load_taxonomy(doc);
}

nlohmann::json to_json(const ValueTaxonomy& taxonomy) {
  nlohmann::json doc;
  doc["values"] = nlohmann::json::array();
  for (ValueId v : kAllValues) doc["values"].push_back(std::string(name_of(v)));
  doc["groups"] = nlohmann::json::object();
  for (GroupId g : kAllGroups) {
    auto members = nlohmann::json::array();
    for (ValueId v : kAllValues)
      if (taxonomy.group_of(v) == g) members.push_back(std::string(name_of(v)));
    doc["groups"][std::string(name_of(g))] = members;
  }
  return doc;
}

}  // namespace valsteer

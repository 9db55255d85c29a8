#include <fstream>

#include "valsteer/error.hpp"
#include "valsteer/hashing.hpp"
#include "valsteer/probes.hpp"

namespace valsteer {

nlohmann::json probe_store_document(const ProbeSet& probes, ValueId value) {
  nlohmann::json doc;
  doc["format_version"] = kProbeStoreVersion;
  doc["value"] = std::string(name_of(value));
  doc["tau"] = probes.tau;
  doc["layers"] = nlohmann::json::array();
  const auto kept = probes.kept_layers(value);
  for (const Probe* p : probes.probes_for(value)) {
    doc["layers"].push_back({
        {"layer", p->layer},
        {"W", encode_f32(p->direction)},
        {"b", p->bias},
        {"val_accuracy", p->val_accuracy},
        {"kept", kept.contains(p->layer)},
        {"train_meta",
         {{"seed", p->train_meta.seed},
          {"epochs", p->train_meta.epochs},
          {"learning_rate", p->train_meta.learning_rate},
          {"l2", p->train_meta.l2}}},
    });
  }
  return doc;
}

std::string probe_store_text(const ProbeSet& probes, ValueId value) {
  return probe_store_document(probes, value).dump(2) + "\n";
}

std::string probe_store_hash(const ProbeSet& probes, ValueId value) {
  return sha256_hex(probe_store_text(probes, value));
}

void save_probe_store(const ProbeSet& probes, ValueId value, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  out << probe_store_text(probes, value);
  if (!out) throw Error(ErrorCode::IoFailure, "failed writing " + path);
}

void read_probe_store(const nlohmann::json& doc, ProbeSet& into) {
  try {
    const int version = doc.at("format_version").get<int>();
    VALSTEER_CHECK(version == kProbeStoreVersion, ErrorCode::FormatVersionMismatch,
                   "probe store version " + std::to_string(version) + " unsupported");
    const ValueId value = value_from_name(doc.at("value").get<std::string>());
    into.tau = doc.value("tau", into.tau);
    for (const auto& item : doc.at("layers")) {
      Probe p;
      p.value = value;
      p.layer = item.at("layer").get<std::uint32_t>();
      p.direction = decode_f32(item.at("W").get<std::string>());
      p.bias = item.at("b").get<double>();
      p.val_accuracy = item.at("val_accuracy").get<double>();
      const auto& meta = item.at("train_meta");
      p.train_meta.seed = meta.at("seed").get<std::uint64_t>();
      p.train_meta.epochs = meta.at("epochs").get<std::uint32_t>();
      p.train_meta.learning_rate = meta.at("learning_rate").get<double>();
      p.train_meta.l2 = meta.at("l2").get<double>();
      const bool kept = item.at("kept").get<bool>();
      into.add(std::move(p));
      into.set_kept(value, item.at("layer").get<std::uint32_t>(), kept);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("probe store: ") + e.what());
  }
}

void load_probe_store(const std::string& path, ProbeSet& into) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open probe store " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, path + ": " + e.what());
  }
  read_probe_store(doc, into);
}

}  // namespace valsteer

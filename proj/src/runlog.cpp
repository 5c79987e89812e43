#include "dmtd/runlog.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "dmtd/errors.hpp"

namespace dmtd {

std::string train_record_json(const TrainRecord& r, int tau_train) {
  nlohmann::json j;
  j["schema"] = "dmtd.trainlog";
  j["schema_version"] = kTrainLogSchemaVersion;
  j["step"] = r.step;
  j["tokens_seen"] = r.tokens_seen;
  j["train_loss"] = r.train_loss;
  nlohmann::json offsets = nlohmann::json::array();
  for (double v : r.offset_losses) offsets.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json());
  j["offset_losses"] = offsets;
  j["eval_loss"] = r.eval_loss;
  j["lr"] = r.lr;
  j["tau_train"] = tau_train;
  return j.dump();
}

std::vector<TrainRecord> read_training_log(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot read training log " + file.string());
  std::vector<TrainRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.at("schema") != "dmtd.trainlog") throw DataError("unexpected schema");
      TrainRecord r;
      r.step = j.at("step").get<std::int64_t>();
      r.tokens_seen = j.at("tokens_seen").get<std::int64_t>();
      r.train_loss = j.at("train_loss").get<double>();
      for (const auto& v : j.at("offset_losses")) {
        r.offset_losses.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
      }
      r.eval_loss = j.at("eval_loss").get<double>();
      r.lr = j.at("lr").get<double>();
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(file.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

std::vector<std::pair<double, double>> scaling_points(const std::vector<TrainRecord>& records) {
  std::vector<std::pair<double, double>> points;
  for (const auto& r : records) {
    if (r.step > 0) points.emplace_back(static_cast<double>(r.tokens_seen), r.eval_loss);
  }
  return points;
}

}  // namespace dmtd

#pragma once

// Training log: one JSON object per line.
//   {"schema":"dmtd.trainlog","schema_version":1,"step":..,"tokens_seen":..,
//    "train_loss":..,"offset_losses":[..],"eval_loss":..,"lr":..,"tau_train":..}
// Offsets with no targets in an interval are written as null.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dmtd/train.hpp"

namespace dmtd {

inline constexpr int kTrainLogSchemaVersion = 1;

std::string train_record_json(const TrainRecord& record, int tau_train);

// DataError on unreadable files or malformed lines.
std::vector<TrainRecord> read_training_log(const std::filesystem::path& file);

// (tokens_seen, eval_loss) for every record past step 0.
std::vector<std::pair<double, double>> scaling_points(const std::vector<TrainRecord>& records);

}  // namespace dmtd

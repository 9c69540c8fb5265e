#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bpcfl/federation.hpp"

namespace bpcfl {

namespace fs = std::filesystem;

// Reals are written with 17 significant digits so 64-bit values round-trip.
std::string format_real(double x);
double parse_real(const std::string& s);

// Header `k,z_0..z_{D-1},y_0..y_{C-1}`. Owner and label mode are not stored in the file.
void write_coreset_csv(const fs::path& path, const Pseudocoreset& coreset);
Pseudocoreset read_coreset_csv(const fs::path& path, int owner = 0, LabelMode mode = LabelMode::learnable);

// Header `client_id,x_0..x_{D-1},y_0..y_{C-1},split` with split in {train,test}.
// Shards are returned in order of first appearance; masks are always materialized.
void write_shards_csv(const fs::path& path, const std::vector<DatasetShard>& shards);
std::vector<DatasetShard> read_shards_csv(const fs::path& path, int input_dim);

// One binary file per trajectory (`traj_<i>.bin`): four little-endian int64
// (P, num_checkpoints, save_interval, seed) followed by the checkpoints.
void write_bank(const fs::path& dir, const TrajectoryBank& bank);
TrajectoryBank read_bank(const fs::path& dir);

std::string server_coreset_to_json(const ServerCoreset& sc);
ServerCoreset server_coreset_from_json(const std::string& text);

// Header `round,floats_cum,nll,accuracy,ece,rmse`; absent metrics are empty fields.
struct TraceRow {
  int round = 0;
  MetricsRecord metrics;
};
std::string trace_csv(const std::vector<TraceRow>& rows);
std::vector<TraceRow> parse_trace_csv(const std::string& text);

// Header `round,direction,client_id,method,float32_count,int_count`, order-normalized.
std::string ledger_csv(const CommLedger& ledger);

std::string read_text(const fs::path& path);
// Writes through a temporary file and renames, so readers never see partial output.
void write_text(const fs::path& path, const std::string& text);

}  // namespace bpcfl

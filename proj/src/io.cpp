#include "bpcfl/io.hpp"

#include <bit>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace bpcfl {

namespace {

using json = nlohmann::json;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::vector<std::string> read_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

// Number of columns in the header starting with `prefix`.
int count_prefixed(const std::vector<std::string>& header, const std::string& prefix) {
  int n = 0;
  for (const std::string& h : header) {
    if (h.rfind(prefix, 0) == 0) ++n;
  }
  return n;
}

std::string csv_error(const fs::path& path, std::size_t line, const std::string& what) {
  return path.string() + ":" + std::to_string(line + 1) + ": " + what;
}

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  if (!j.is_array() || j.empty()) throw InvalidArgument("expected a non-empty matrix");
  const std::size_t cols = j.at(0).size();
  Matrix m(static_cast<Index>(j.size()), static_cast<Index>(cols));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_array() || j[i].size() != cols) throw InvalidArgument("ragged matrix");
    for (std::size_t c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
  }
  return m;
}

void write_i64(std::ostream& out, std::int64_t v) {
  unsigned char buf[8];
  const auto u = static_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) buf[b] = static_cast<unsigned char>(u >> (8 * b));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::int64_t read_i64(std::istream& in) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw InvalidArgument("truncated bank file");
  std::uint64_t u = 0;
  for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
  return static_cast<std::int64_t>(u);
}

}  // namespace

std::string format_real(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

double parse_real(const std::string& s) {
  if (s.empty()) throw InvalidArgument("empty numeric field");
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE) throw InvalidArgument("malformed number '" + s + "'");
  return v;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

void write_coreset_csv(const fs::path& path, const Pseudocoreset& coreset) {
  coreset.validate();
  std::string s = "k";
  for (Index d = 0; d < coreset.z.cols(); ++d) s += ",z_" + std::to_string(d);
  for (Index c = 0; c < coreset.y_hat.cols(); ++c) s += ",y_" + std::to_string(c);
  s += '\n';
  for (Index k = 0; k < coreset.size(); ++k) {
    s += std::to_string(k);
    for (Index d = 0; d < coreset.z.cols(); ++d) s += "," + format_real(coreset.z(k, d));
    for (Index c = 0; c < coreset.y_hat.cols(); ++c) s += "," + format_real(coreset.y_hat(k, c));
    s += '\n';
  }
  write_text(path, s);
}

Pseudocoreset read_coreset_csv(const fs::path& path, int owner, LabelMode mode) {
  const std::vector<std::string> lines = read_lines(read_text(path));
  if (lines.empty()) throw InvalidArgument(path.string() + ": empty coreset file");
  const std::vector<std::string> header = split_csv_line(lines[0]);
  const int d = count_prefixed(header, "z_");
  const int c = count_prefixed(header, "y_");
  if (header.empty() || header[0] != "k" || d < 1 || c < 1 || static_cast<int>(header.size()) != 1 + d + c) {
    throw InvalidArgument(csv_error(path, 0, "bad coreset header"));
  }
  Pseudocoreset cs;
  cs.owner = owner;
  cs.label_mode = mode;
  const Index k = static_cast<Index>(lines.size()) - 1;
  cs.z.resize(k, d);
  cs.y_hat.resize(k, c);
  for (Index i = 0; i < k; ++i) {
    const auto fields = split_csv_line(lines[i + 1]);
    if (static_cast<int>(fields.size()) != 1 + d + c) throw InvalidArgument(csv_error(path, i + 1, "wrong field count"));
    try {
      if (std::stol(fields[0]) != i) throw InvalidArgument("row index out of order");
      for (int j = 0; j < d; ++j) cs.z(i, j) = parse_real(fields[1 + j]);
      for (int j = 0; j < c; ++j) cs.y_hat(i, j) = parse_real(fields[1 + d + j]);
    } catch (const std::exception& e) {
      throw InvalidArgument(csv_error(path, i + 1, e.what()));
    }
  }
  cs.validate();
  return cs;
}

void write_shards_csv(const fs::path& path, const std::vector<DatasetShard>& shards) {
  if (shards.empty()) throw InvalidArgument("no shards to write");
  const Index d = shards[0].inputs.cols();
  const Index c = shards[0].targets.cols();
  std::string s = "client_id";
  for (Index j = 0; j < d; ++j) s += ",x_" + std::to_string(j);
  for (Index j = 0; j < c; ++j) s += ",y_" + std::to_string(j);
  s += ",split\n";
  for (const DatasetShard& sh : shards) {
    sh.validate();
    if (sh.inputs.cols() != d || sh.targets.cols() != c) throw InvalidArgument("shards disagree on dimensions");
    for (Index i = 0; i < sh.size(); ++i) {
      s += std::to_string(sh.client_id);
      for (Index j = 0; j < d; ++j) s += "," + format_real(sh.inputs(i, j));
      for (Index j = 0; j < c; ++j) s += "," + format_real(sh.targets(i, j));
      const bool test = !sh.is_test.empty() && sh.is_test[i];
      s += test ? ",test\n" : ",train\n";
    }
  }
  write_text(path, s);
}

std::vector<DatasetShard> read_shards_csv(const fs::path& path, int input_dim) {
  const std::vector<std::string> lines = read_lines(read_text(path));
  if (lines.empty()) throw InvalidArgument(path.string() + ": empty shard file");
  const std::vector<std::string> header = split_csv_line(lines[0]);
  const int d = count_prefixed(header, "x_");
  const int c = count_prefixed(header, "y_");
  if (header.size() < 4 || header[0] != "client_id" || header.back() != "split" || d < 1 || c < 1 ||
      static_cast<int>(header.size()) != 2 + d + c) {
    throw InvalidArgument(csv_error(path, 0, "bad shard header"));
  }
  if (input_dim > 0 && d != input_dim) throw InvalidArgument(csv_error(path, 0, "input dimension mismatch"));

  struct Rows {
    std::vector<std::vector<double>> x, y;
    std::vector<bool> test;
  };
  std::vector<int> order;
  std::map<int, Rows> by_client;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split_csv_line(lines[i]);
    if (static_cast<int>(f.size()) != 2 + d + c) throw InvalidArgument(csv_error(path, i, "wrong field count"));
    try {
      const int id = std::stoi(f[0]);
      if (!by_client.count(id)) order.push_back(id);
      Rows& r = by_client[id];
      std::vector<double> x(d), y(c);
      for (int j = 0; j < d; ++j) x[j] = parse_real(f[1 + j]);
      for (int j = 0; j < c; ++j) y[j] = parse_real(f[1 + d + j]);
      if (f.back() != "train" && f.back() != "test") throw InvalidArgument("split must be train or test");
      r.x.push_back(std::move(x));
      r.y.push_back(std::move(y));
      r.test.push_back(f.back() == "test");
    } catch (const InvalidArgument& e) {
      throw InvalidArgument(csv_error(path, i, e.what()));
    } catch (const std::exception& e) {
      throw InvalidArgument(csv_error(path, i, std::string("malformed row: ") + e.what()));
    }
  }
  std::vector<DatasetShard> shards;
  for (int id : order) {
    const Rows& r = by_client[id];
    DatasetShard sh;
    sh.client_id = id;
    const Index n = static_cast<Index>(r.x.size());
    sh.inputs.resize(n, d);
    sh.targets.resize(n, c);
    for (Index i = 0; i < n; ++i) {
      for (int j = 0; j < d; ++j) sh.inputs(i, j) = r.x[i][j];
      for (int j = 0; j < c; ++j) sh.targets(i, j) = r.y[i][j];
    }
    sh.is_test = r.test;
    sh.validate();
    shards.push_back(std::move(sh));
  }
  return shards;
}

void write_bank(const fs::path& dir, const TrajectoryBank& bank) {
  static_assert(std::endian::native == std::endian::little, "bank format assumes a little-endian host");
  fs::create_directories(dir);
  if (bank.seeds.size() != bank.trajectories.size()) throw InvalidArgument("bank seeds/trajectories mismatch");
  for (std::size_t t = 0; t < bank.trajectories.size(); ++t) {
    const auto& traj = bank.trajectories[t];
    if (traj.empty()) throw InvalidArgument("empty trajectory");
    const fs::path file = dir / ("traj_" + std::to_string(t) + ".bin");
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + file.string());
    write_i64(out, traj[0].size());
    write_i64(out, static_cast<std::int64_t>(traj.size()));
    write_i64(out, bank.save_interval);
    write_i64(out, static_cast<std::int64_t>(bank.seeds[t]));
    for (const ParamVector& p : traj) {
      out.write(reinterpret_cast<const char*>(p.data()), static_cast<std::streamsize>(p.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("write failed for " + file.string());
  }
}

TrajectoryBank read_bank(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw InvalidArgument("missing bank directory " + dir.string());
  TrajectoryBank bank;
  for (std::size_t t = 0;; ++t) {
    const fs::path file = dir / ("traj_" + std::to_string(t) + ".bin");
    if (!fs::exists(file)) break;
    std::ifstream in(file, std::ios::binary);
    const std::int64_t p = read_i64(in);
    const std::int64_t n = read_i64(in);
    const std::int64_t interval = read_i64(in);
    const std::int64_t seed = read_i64(in);
    if (p <= 0 || n <= 0 || interval <= 0) throw InvalidArgument(file.string() + ": bad bank header");
    if (t == 0) {
      bank.save_interval = static_cast<int>(interval);
      bank.total_steps = static_cast<int>((n - 1) * interval);
    } else if (interval != bank.save_interval || (n - 1) * interval != bank.total_steps) {
      throw InvalidArgument(file.string() + ": inconsistent with the first trajectory");
    }
    std::vector<ParamVector> traj(n, ParamVector(p));
    for (ParamVector& v : traj) {
      if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(p * sizeof(double)))) {
        throw InvalidArgument(file.string() + ": truncated checkpoint data");
      }
    }
    bank.trajectories.push_back(std::move(traj));
    bank.seeds.push_back(static_cast<std::uint64_t>(seed));
  }
  if (bank.trajectories.empty()) throw InvalidArgument("no trajectories in " + dir.string());
  return bank;
}

std::string server_coreset_to_json(const ServerCoreset& sc) {
  json j;
  j["num_clients"] = sc.num_clients;
  j["total_data_size"] = sc.total_data_size;
  j["entries"] = json::array();
  for (const WeightedCoreset& wc : sc.entries) {
    j["entries"].push_back({{"owner", wc.coreset.owner},
                            {"weight", wc.weight},
                            {"num_data", wc.num_data},
                            {"label_mode", wc.coreset.label_mode == LabelMode::frozen ? "frozen" : "learnable"},
                            {"z", matrix_to_json(wc.coreset.z)},
                            {"y_hat", matrix_to_json(wc.coreset.y_hat)}});
  }
  return j.dump(2) + "\n";
}

ServerCoreset server_coreset_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ServerCoreset sc;
    sc.num_clients = j.at("num_clients").get<int>();
    sc.total_data_size = j.at("total_data_size").get<Index>();
    for (const json& e : j.at("entries")) {
      WeightedCoreset wc;
      wc.coreset.owner = e.at("owner").get<int>();
      wc.weight = e.at("weight").get<double>();
      wc.num_data = e.at("num_data").get<Index>();
      const std::string mode = e.at("label_mode").get<std::string>();
      if (mode != "frozen" && mode != "learnable") throw InvalidArgument("unknown label_mode " + mode);
      wc.coreset.label_mode = mode == "frozen" ? LabelMode::frozen : LabelMode::learnable;
      wc.coreset.z = matrix_from_json(e.at("z"));
      wc.coreset.y_hat = matrix_from_json(e.at("y_hat"));
      wc.coreset.validate();
      if (!(wc.weight > 0.0)) throw InvalidArgument("coreset weight must be positive");
      sc.entries.push_back(std::move(wc));
    }
    if (static_cast<int>(sc.entries.size()) != sc.num_clients) {
      throw InvalidArgument("num_clients does not match the number of entries");
    }
    return sc;
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("server coreset json: ") + e.what());
  }
}

std::string trace_csv(const std::vector<TraceRow>& rows) {
  std::string s = "round,floats_cum,nll,accuracy,ece,rmse\n";
  auto opt = [](const std::optional<double>& v) { return v ? format_real(*v) : std::string(); };
  for (const TraceRow& r : rows) {
    s += std::to_string(r.round) + "," + std::to_string(r.metrics.floats_cum) + "," + format_real(r.metrics.nll) +
         "," + opt(r.metrics.accuracy) + "," + opt(r.metrics.ece) + "," + opt(r.metrics.rmse) + "\n";
  }
  return s;
}

std::vector<TraceRow> parse_trace_csv(const std::string& text) {
  const std::vector<std::string> lines = read_lines(text);
  if (lines.empty() || lines[0] != "round,floats_cum,nll,accuracy,ece,rmse") {
    throw InvalidArgument("bad trace header");
  }
  auto opt = [](const std::string& f) { return f.empty() ? std::optional<double>() : parse_real(f); };
  std::vector<TraceRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto f = split_csv_line(lines[i]);
    if (f.size() != 6) throw InvalidArgument("trace line " + std::to_string(i + 1) + ": wrong field count");
    TraceRow r;
    r.round = std::stoi(f[0]);
    r.metrics.floats_cum = std::stoll(f[1]);
    r.metrics.nll = parse_real(f[2]);
    r.metrics.accuracy = opt(f[3]);
    r.metrics.ece = opt(f[4]);
    r.metrics.rmse = opt(f[5]);
    rows.push_back(r);
  }
  return rows;
}

std::string ledger_csv(const CommLedger& ledger) {
  std::string s = "round,direction,client_id,method,float32_count,int_count\n";
  for (const CommEvent& e : ledger.normalized()) {
    s += std::to_string(e.round) + "," + (e.direction == Direction::up ? "up" : "down") + "," +
         std::to_string(e.client_id) + "," + e.method + "," + std::to_string(e.float32_count) + "," +
         std::to_string(e.int_count) + "\n";
  }
  return s;
}

}  // namespace bpcfl

#include "cosa/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cosa/binary_io.hpp"
#include "cosa/errors.hpp"
#include "cosa/trainer.hpp"

#ifndef COSA_CODE_VERSION
#define COSA_CODE_VERSION "unknown"
#endif

namespace cosa {

namespace fs = std::filesystem;
using nlohmann::json;

const char* const kCodeVersion = COSA_CODE_VERSION;

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"variants", "concat_number", "sampling", "iterations",
                                                 "objectives"};
  return names;
}

namespace {

SuiteRun variant(const std::string& name, const TrainConfig& base, TrainMode mode) {
  SuiteRun r{name, base};
  r.config.mode = mode;
  return r;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("missing file: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace

ExperimentSuite make_suite(const std::string& name, const TrainConfig& base) {
  ExperimentSuite s{name, {}};
  if (name == "variants") {
    s.runs = {variant("sst", base, TrainMode::sst), variant("cosa", base, TrainMode::cosa),
              variant("cosa_copy", base, TrainMode::cosa_copy),
              variant("cosa_shuffle", base, TrainMode::cosa_shuffle)};
  } else if (name == "concat_number") {
    // n_c = 0 is the single-sample baseline
    s.runs.push_back(variant("nc0", base, TrainMode::sst));
    for (int n = 1; n <= 4; ++n) {
      SuiteRun r = variant("nc" + std::to_string(n), base, TrainMode::cosa);
      r.config.concat.n_c = n;
      r.config.model.max_frames = std::max(r.config.model.max_frames, n + 1);
      s.runs.push_back(r);
    }
  } else if (name == "sampling") {
    for (auto g : {GroupingStrategy::random, GroupingStrategy::vision_similarity, GroupingStrategy::text_similarity}) {
      SuiteRun r = variant(to_string(g), base, TrainMode::cosa);
      r.config.concat.strategy = g;
      s.runs.push_back(r);
    }
  } else if (name == "iterations") {
    for (auto m : {TrainMode::sst, TrainMode::cosa}) {
      SuiteRun r = variant(to_string(m), base, m);
      if (r.config.eval_every == 0) r.config.eval_every = std::max(1, base.steps / 10);
      s.runs.push_back(r);
    }
  } else if (name == "objectives") {
    using O = Objective;
    const std::vector<std::pair<std::string, ObjectiveConfig>> rows = {
        {"a", ObjectiveConfig::only({O::itc, O::itm, O::mlm, O::gm})},
        {"b", ObjectiveConfig::only({O::itc, O::itm, O::cmlm, O::cgm})},
        {"c", ObjectiveConfig::only({O::citc, O::citm, O::cmlm, O::cgm})},
        {"d", ObjectiveConfig::only({O::itc, O::itm, O::citc, O::citm, O::cmlm, O::cgm})},
        {"e", ObjectiveConfig::only({O::itc, O::itm, O::mlm, O::gm, O::citc, O::citm, O::cmlm, O::cgm})},
    };
    for (const auto& [row, obj] : rows) {
      SuiteRun r = variant(row, base, TrainMode::cosa);
      ObjectiveConfig o = obj;
      o.weights = base.objectives.weights;
      o.mlm_rate = base.objectives.mlm_rate;
      o.gm_rate = base.objectives.gm_rate;
      o.hard_negative = base.objectives.hard_negative;
      r.config.objectives = o;
      s.runs.push_back(r);
    }
  } else {
    std::string list;
    for (const auto& n : suite_names()) list += (list.empty() ? "" : ", ") + n;
    throw ConfigError("unknown suite '" + name + "' (expected " + list + ")");
  }
  for (std::size_t i = 0; i < s.runs.size(); ++i) s.runs[i].config.seed = mix_seed(base.seed, i);
  return s;
}

std::string config_hash(const TrainConfig& cfg) { return hex64(fnv1a(cfg.to_json().dump())); }

void write_suite_manifest(const ExperimentSuite& suite, const fs::path& dir) {
  json runs = json::array();
  for (const auto& r : suite.runs) {
    runs.push_back({{"name", r.name}, {"seed", r.config.seed}, {"config_hash", config_hash(r.config)}});
  }
  fs::create_directories(dir);
  io::write_file_atomic(dir / "suite.json",
                        json{{"suite", suite.name}, {"code_version", kCodeVersion}, {"runs", runs}}.dump(2) + "\n");
}

void run_suite(const ExperimentSuite& suite, const fs::path& dir, bool force, const RunExecutor& execute) {
  if (fs::exists(dir / "suite.json") && !force) {
    throw ConfigError("suite directory " + dir.string() + " already holds a suite (use --force to replace it)");
  }
  write_suite_manifest(suite, dir);
  for (const auto& r : suite.runs) {
    if (execute) {
      execute(r, dir / r.name);
    } else {
      RunOptions o;
      o.run_dir = dir / r.name;
      o.force = true;
      run(r.config, o);
    }
  }
}

std::map<std::string, std::size_t> Report::best() const {
  std::map<std::string, std::size_t> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (const auto& [name, v] : rows[i].metrics) {
      auto it = out.find(name);
      if (it == out.end() || v > rows[it->second].metrics.at(name)) out[name] = i;
    }
  }
  return out;
}

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "-";
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

std::string pad(const std::string& s, std::size_t w) { return s.size() >= w ? s : s + std::string(w - s.size(), ' '); }

ReportRow load_row(const fs::path& run_dir, const std::string& display) {
  if (!fs::is_directory(run_dir)) throw DataError("run directory not found: " + run_dir.string());
  ReportRow row;
  row.run = display;
  row.run_dir = run_dir;
  const json cfg = read_json(run_dir / "config.json");
  row.config_hash = hex64(fnv1a(cfg.dump()));
  row.mode = cfg.value("mode", "");
  row.seed = cfg.value("seed", std::uint64_t{0});
  row.code_version = fs::exists(run_dir / "run.json") ? read_json(run_dir / "run.json").value("code_version", "unknown")
                                                      : "unknown";
  return row;
}

}  // namespace

Report build_report(const std::vector<fs::path>& dirs) {
  Report rep;
  std::vector<std::string> titles;
  for (const auto& d : dirs) {
    if (!fs::exists(d)) throw DataError("directory not found: " + d.string());
    if (fs::exists(d / "suite.json")) {
      const json s = read_json(d / "suite.json");
      titles.push_back(s.value("suite", d.filename().string()));
      for (const auto& r : s.at("runs")) {
        const std::string name = r.at("name").get<std::string>();
        rep.rows.push_back(load_row(d / name, name));
      }
    } else {
      titles.push_back(d.filename().string());
      rep.rows.push_back(load_row(d, d.filename().string()));
    }
  }
  for (const auto& t : titles) rep.title += (rep.title.empty() ? "" : " + ") + t;

  for (std::size_t i = 0; i < rep.rows.size(); ++i) {
    ReportRow& row = rep.rows[i];
    const auto records = read_metrics(row.run_dir / "metrics.jsonl");
    int last = -1;
    for (const auto& r : records) {
      if (r.phase != "eval") continue;
      rep.eval_records.push_back(r);
      rep.record_rows.push_back(i);
      last = std::max(last, r.step);
    }
    if (last < 0) throw DataError("no evaluation records in " + (row.run_dir / "metrics.jsonl").string());
    row.final_step = last;
    for (const auto& r : records) {
      if (r.phase == "eval" && r.step == last) row.metrics[r.name] = r.value;
    }
  }
  return rep;
}

std::string Report::render_table() const {
  std::vector<std::string> metrics;
  for (const auto& row : rows) {
    for (const auto& [name, _] : row.metrics) {
      if (std::find(metrics.begin(), metrics.end(), name) == metrics.end()) metrics.push_back(name);
    }
  }
  std::sort(metrics.begin(), metrics.end());
  std::size_t w0 = 4;
  for (const auto& r : rows) w0 = std::max(w0, r.run.size());
  w0 += 2;

  std::ostringstream out;
  out << "# " << title << "\n\n";
  out << pad("run", w0) << pad("mode", 14) << pad("step", 7);
  for (const auto& m : metrics) out << pad(m, std::max<std::size_t>(m.size() + 2, 10));
  out << "\n";
  for (const auto& r : rows) {
    out << pad(r.run, w0) << pad(r.mode, 14) << pad(std::to_string(r.final_step), 7);
    for (const auto& m : metrics) {
      auto it = r.metrics.find(m);
      out << pad(it == r.metrics.end() ? "-" : fmt(it->second), std::max<std::size_t>(m.size() + 2, 10));
    }
    out << "\n";
  }
  out << "\nbest:\n";
  for (const auto& [m, i] : best()) out << "  " << pad(m, 22) << rows[i].run << " (" << fmt(rows[i].metrics.at(m)) << ")\n";
  out << "\nprovenance:\n";
  for (const auto& r : rows) {
    out << "  " << pad(r.run, w0) << "dir=" << r.run_dir.generic_string() << " config=" << r.config_hash
        << " seed=" << r.seed << " code=" << r.code_version << "\n";
  }
  return out.str();
}

std::string Report::render_series_csv() const {
  std::ostringstream out;
  out << "run,mode,seed,step,metric,value,config_hash,run_dir\n";
  out << std::setprecision(17);
  for (std::size_t k = 0; k < eval_records.size(); ++k) {
    const auto& rec = eval_records[k];
    const auto& row = rows[record_rows[k]];
    out << row.run << ',' << rec.mode << ',' << rec.seed << ',' << rec.step << ',' << rec.name << ',' << rec.value << ','
        << row.config_hash << ',' << row.run_dir.generic_string() << "\n";
  }
  return out.str();
}

void write_report(const Report& report, const fs::path& out) {
  fs::create_directories(out);
  io::write_file_atomic(out / "report.txt", report.render_table());
  io::write_file_atomic(out / "series.csv", report.render_series_csv());
}

}  // namespace cosa

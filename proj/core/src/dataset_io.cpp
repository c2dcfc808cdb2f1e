#include "red/dataset_io.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace red {

using nlohmann::json;

void write_jsonl(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("dataset: cannot open for write: " + path.string());
  for (const Sample& s : samples) {
    json line;
    line["tokens"] = s.query_tokens;
    line["dims"] = s.feature_map.shape();
    line["features"] = std::vector<double>(s.feature_map.data(),
                                           s.feature_map.data() + s.feature_map.size());
    line["gt_cell"] = s.gt_cell;
    line["gt_box"] = {s.gt_box.cx, s.gt_box.cy, s.gt_box.w, s.gt_box.h};
    line["meta"] = {{"confounder_id", s.confounder_id}};
    os << line.dump() << '\n';
  }
  if (!os) throw std::runtime_error("dataset: write failed: " + path.string());
}

std::vector<Sample> read_jsonl(const std::filesystem::path& path, MetaPolicy policy) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("dataset: cannot open: " + path.string());
  std::vector<Sample> samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error("dataset: " + path.string() + ":" + std::to_string(lineno) + ": " +
                               e.what());
    }
    Sample s;
    s.query_tokens = j.at("tokens").get<std::vector<int>>();
    auto dims = j.at("dims").get<std::vector<std::size_t>>();
    auto features = j.at("features").get<std::vector<double>>();
    s.feature_map = Tensor(std::move(dims), std::move(features));
    s.gt_cell = j.at("gt_cell").get<std::size_t>();
    auto box = j.at("gt_box").get<std::vector<double>>();
    if (box.size() != 4) {
      throw std::runtime_error("dataset: " + path.string() + ":" + std::to_string(lineno) +
                               ": gt_box must hold 4 numbers");
    }
    s.gt_box = Box{box[0], box[1], box[2], box[3]};
    if (policy == MetaPolicy::kKeep && j.contains("meta")) {
      s.confounder_id = j["meta"].value("confounder_id", kNoConfounder);
    } else {
      s.confounder_id = kNoConfounder;
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace red

#include "fairbranch/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <fstream>

#include <json.hpp>

#include "fairbranch/errors.hpp"
#include "fairbranch/trainer.hpp"

namespace fairbranch {

namespace {

constexpr const char* kFormat = "fairbranch-checkpoint";
constexpr int kVersion = 1;

void put_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  std::array<char, 8> bytes{};
  for (int i = 0; i < 8; ++i) bytes[static_cast<std::size_t>(i)] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  out.write(bytes.data(), 8);
}

double get_f64(std::istream& in) {
  std::array<unsigned char, 8> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), 8)) {
    throw SchemaError("checkpoint blob is truncated");
  }
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[static_cast<std::size_t>(i)]) << (8 * i);
  return std::bit_cast<double>(bits);
}

void write_layer(std::ostream& out, const Layer& layer) {
  for (Index i = 0; i < layer.weights.rows(); ++i)
    for (Index j = 0; j < layer.weights.cols(); ++j) put_f64(out, layer.weights(i, j));
  for (Index j = 0; j < layer.bias.size(); ++j) put_f64(out, layer.bias(j));
}

void read_layer(std::istream& in, Layer& layer) {
  for (Index i = 0; i < layer.weights.rows(); ++i)
    for (Index j = 0; j < layer.weights.cols(); ++j) layer.weights(i, j) = get_f64(in);
  for (Index j = 0; j < layer.bias.size(); ++j) layer.bias(j) = get_f64(in);
}

nlohmann::json layer_entry(const Layer& l, Index offset) {
  return {{"depth", l.depth},
          {"tasks", l.tasks},
          {"shape", {l.in_dim(), l.out_dim()}},
          {"offset", offset}};
}

}  // namespace

Checkpoint make_checkpoint(const TrainReport& report) {
  return {report.mode, report.task_ids, report.task_names, report.topology, report.scaler,
          report.branch_events};
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::filesystem::create_directories(dir);
  const auto& top = ckpt.topology;
  nlohmann::json layers = nlohmann::json::array();
  Index offset = 0;
  std::ofstream blob(dir / "checkpoint.bin", std::ios::binary);
  if (!blob) throw SchemaError("cannot write " + (dir / "checkpoint.bin").string());
  for (const auto& depth_layers : top.hidden) {
    for (const auto& l : depth_layers) {
      layers.push_back(layer_entry(l, offset));
      write_layer(blob, l);
      offset += l.parameter_count();
    }
  }
  for (const auto& h : top.heads) {
    layers.push_back(layer_entry(h, offset));
    write_layer(blob, h);
    offset += h.parameter_count();
  }
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : ckpt.branch_events) events.push_back(e.to_json());

  const nlohmann::json manifest = {{"format", kFormat},
                                   {"version", kVersion},
                                   {"mode", ckpt.mode},
                                   {"task_ids", ckpt.task_ids},
                                   {"task_names", ckpt.task_names},
                                   {"input_dim", top.input_dim},
                                   {"widths", top.widths},
                                   {"num_tasks", top.num_tasks},
                                   {"d", top.depth()},
                                   {"d_c", top.current_depth},
                                   {"layers", layers},
                                   {"blob", "checkpoint.bin"},
                                   {"blob_values", offset},
                                   {"scaler", ckpt.scaler.to_json()},
                                   {"branch_events", events}};
  std::ofstream out(dir / "checkpoint.json", std::ios::binary);
  out << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw SchemaError("no checkpoint.json in " + dir.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  if (m.value("format", "") != kFormat || m.value("version", 0) != kVersion) {
    throw SchemaError("unsupported checkpoint format");
  }
  Checkpoint ckpt;
  try {
    ckpt.mode = m.at("mode").get<std::string>();
    ckpt.task_ids = m.at("task_ids").get<std::vector<int>>();
    ckpt.task_names = m.at("task_names").get<std::vector<std::string>>();
    ckpt.scaler = FeatureScaler::from_json(m.at("scaler"));
    for (const auto& e : m.at("branch_events")) ckpt.branch_events.push_back(BranchEvent::from_json(e));

    auto& top = ckpt.topology;
    top.input_dim = m.at("input_dim").get<Index>();
    top.widths = m.at("widths").get<std::vector<Index>>();
    top.num_tasks = m.at("num_tasks").get<int>();
    top.current_depth = m.at("d_c").get<int>();
    top.hidden.resize(top.widths.size());

    std::ifstream blob(dir / m.at("blob").get<std::string>(), std::ios::binary);
    if (!blob) throw SchemaError("checkpoint blob missing");
    for (const auto& entry : m.at("layers")) {
      Layer l;
      l.depth = entry.at("depth").get<int>();
      l.tasks = entry.at("tasks").get<TaskSet>();
      const auto shape = entry.at("shape").get<std::vector<Index>>();
      if (shape.size() != 2) throw SchemaError("layer shape must have two entries");
      l.weights.resize(shape[0], shape[1]);
      l.bias.resize(shape[1]);
      read_layer(blob, l);
      if (l.depth == top.depth() + 1) {
        top.heads.push_back(std::move(l));
      } else if (l.depth >= 1 && l.depth <= top.depth()) {
        top.hidden[static_cast<std::size_t>(l.depth - 1)].push_back(std::move(l));
      } else {
        throw SchemaError("layer depth out of range in checkpoint");
      }
    }
    if (blob.peek() != std::char_traits<char>::eof()) throw SchemaError("checkpoint blob has trailing data");
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed checkpoint manifest: ") + e.what());
  }
  try {
    ckpt.topology.validate();
  } catch (const InternalError& e) {
    throw SchemaError(std::string("checkpoint topology is invalid: ") + e.what());
  }
  return ckpt;
}

}  // namespace fairbranch

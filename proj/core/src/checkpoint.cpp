#include "mnmt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mnmt/error.hpp"

namespace mnmt {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

nlohmann::json header_json(const CheckpointHeader& h, const ParamStore& params) {
  nlohmann::json j;
  j["config"] = h.config;
  j["vocab_fingerprint"] = h.vocab_fingerprint;
  j["step"] = h.step;
  j["module"] = h.module;
  auto& list = j["params"] = nlohmann::json::array();
  for (const auto& [name, t] : params) list.push_back({{"name", name}, {"shape", t.shape()}});
  return j;
}

struct RawHeader {
  CheckpointHeader header;
  nlohmann::json params;
};

RawHeader read_header(std::ifstream& in, const std::filesystem::path& path) {
  std::string magic, line;
  if (!std::getline(in, magic) || magic != kCheckpointMagic) fail(ErrorKind::Parse, path.string() + ": not a checkpoint (bad magic)");
  if (!std::getline(in, line)) fail(ErrorKind::Parse, path.string() + ": truncated header");
  RawHeader out;
  try {
    const auto j = nlohmann::json::parse(line);
    out.header.config = j.at("config").get<TransformerConfig>();
    out.header.vocab_fingerprint = j.at("vocab_fingerprint").get<std::uint64_t>();
    out.header.step = j.at("step").get<std::uint64_t>();
    out.header.module = j.at("module").get<std::string>();
    out.params = j.at("params");
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, path.string() + ": header: " + e.what());
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ParamStore& params, const CheckpointHeader& header) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write checkpoint " + path.string());
  out << kCheckpointMagic << '\n' << header_json(header, params).dump() << '\n';
  for (const auto& [name, t] : params) {
    const auto d = t.data();
    out.write(reinterpret_cast<const char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!out) fail(ErrorKind::Io, "failed writing checkpoint " + path.string());
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::MissingInput, "cannot open checkpoint " + path.string());
  return read_header(in, path).header;
}

CheckpointHeader load_checkpoint(const std::filesystem::path& path, ParamStore& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::MissingInput, "cannot open checkpoint " + path.string());
  auto raw = read_header(in, path);
  if (raw.params.size() != params.size()) {
    fail(ErrorKind::Parse, path.string() + ": holds " + std::to_string(raw.params.size()) + " tensors, model has " +
                               std::to_string(params.size()));
  }
  std::size_t k = 0;
  for (auto& [name, t] : params) {
    const auto& entry = raw.params[k++];
    if (entry.at("name").get<std::string>() != name || entry.at("shape").get<Shape>() != t.shape()) {
      fail(ErrorKind::Parse, path.string() + ": parameter '" + name + "' does not match the checkpoint layout");
    }
    auto d = t.mutable_data();
    in.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(d.size() * sizeof(double)));
    if (!in) fail(ErrorKind::Parse, path.string() + ": truncated data for '" + name + "'");
  }
  if (in.peek() != std::char_traits<char>::eof()) fail(ErrorKind::Parse, path.string() + ": trailing bytes after parameters");
  return raw.header;
}

}  // namespace mnmt

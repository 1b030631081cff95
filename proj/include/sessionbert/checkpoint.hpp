#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sessionbert/model.hpp"

namespace sessionbert {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr std::string_view kCheckpointMagic = "sessionbert-checkpoint";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers}, {"num_heads", c.num_heads},   {"d_model", c.d_model},
          {"d_ff", c.d_ff},             {"max_len", c.max_len},       {"vocab_size", c.vocab_size},
          {"dropout", c.dropout},       {"seed", c.seed},             {"num_services", c.num_services},
          {"num_pages", c.num_pages}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.num_services = j.at("num_services").get<int>();
  c.num_pages = j.at("num_pages").get<int>();
  return c;
}

namespace detail {

inline void to_little_endian(std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : v) {
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      u = __builtin_bswap32(u);
      std::memcpy(&f, &u, 4);
    }
  }
}

template <typename State, typename F>
void visit_state(State& s, F&& f) {
  s.params.for_each([&](const std::string& n, auto& t) { f(n, t); });
  s.adam_m.for_each([&](const std::string& n, auto& t) { f("adam_m." + n, t); });
  s.adam_v.for_each([&](const std::string& n, auto& t) { f("adam_v." + n, t); });
}

}  // namespace detail

// Layout:
//   sessionbert-checkpoint v<version>
//   config <json>
//   labels <json>
//   tensors <count>
//   <name>\t<rows>x<cols>\tf32\t<offset>\t<fnv1a hex>   (one per tensor)
//   blob <bytes>
//   <raw little-endian f32 data>
template <typename S>
void save_checkpoint(const ModelState<S>& state, std::ostream& out) {
  std::vector<std::string> manifest;
  std::string blob;
  detail::visit_state(state, [&](const std::string& name, const Mat<S>& t) {
    std::vector<float> data(static_cast<std::size_t>(t.size()));
    for (Eigen::Index i = 0; i < t.size(); ++i) data[static_cast<std::size_t>(i)] = static_cast<float>(t.data()[i]);
    detail::to_little_endian(data);
    const std::size_t bytes = data.size() * sizeof(float);
    std::ostringstream line;
    line << name << '\t' << t.rows() << 'x' << t.cols() << "\tf32\t" << blob.size() << '\t' << std::hex
         << fnv1a(data.data(), bytes);
    manifest.push_back(line.str());
    blob.append(reinterpret_cast<const char*>(data.data()), bytes);
  });
  nlohmann::json labels{{"services", state.services}, {"pages", state.pages}, {"step", state.step}};
  out << kCheckpointMagic << " v" << kCheckpointVersion << '\n';
  out << "config " << config_to_json(state.config).dump() << '\n';
  out << "labels " << labels.dump() << '\n';
  out << "tensors " << manifest.size() << '\n';
  for (const auto& m : manifest) out << m << '\n';
  out << "blob " << blob.size() << '\n';
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

template <typename S>
void save_checkpoint(const ModelState<S>& state, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + path);
  save_checkpoint(state, out);
  if (!out) throw CheckpointError("write failed: " + path);
}

template <typename S>
ModelState<S> load_checkpoint(std::istream& in) {
  std::string line;
  auto expect_line = [&](std::string_view what) {
    if (!std::getline(in, line)) throw CheckpointTruncatedError("checkpoint ends before " + std::string(what));
  };
  auto keyword = [&](std::string_view key) {
    if (line.rfind(std::string(key) + " ", 0) != 0) throw CheckpointError("expected '" + std::string(key) + "' line");
    return line.substr(key.size() + 1);
  };

  expect_line("header");
  const std::string expected = std::string(kCheckpointMagic) + " v" + std::to_string(kCheckpointVersion);
  if (line.rfind(std::string(kCheckpointMagic), 0) != 0) throw CheckpointError("not a sessionbert checkpoint");
  if (line != expected) throw CheckpointVersionError("unsupported checkpoint version: " + line);

  ModelState<S> state;
  try {
    expect_line("config");
    state.config = config_from_json(nlohmann::json::parse(keyword("config")));
    expect_line("labels");
    const nlohmann::json labels = nlohmann::json::parse(keyword("labels"));
    labels.at("services").get_to(state.services);
    labels.at("pages").get_to(state.pages);
    labels.at("step").get_to(state.step);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
  }
  state.config.validate();

  struct Entry {
    std::string name;
    long rows = 0, cols = 0;
    std::size_t offset = 0;
    std::uint64_t checksum = 0;
  };
  expect_line("manifest");
  auto count_of = [&](std::string_view key) -> std::size_t {
    try {
      return std::stoul(keyword(key));
    } catch (const std::logic_error&) {
      throw CheckpointError("bad '" + std::string(key) + "' count");
    }
  };
  const std::size_t count = count_of("tensors");
  std::vector<Entry> entries(count);
  for (auto& e : entries) {
    expect_line("manifest entry");
    std::istringstream ls(line);
    std::string shape, dtype;
    if (!(std::getline(ls, e.name, '\t') && std::getline(ls, shape, '\t') && std::getline(ls, dtype, '\t') &&
          (ls >> e.offset) && (ls >> std::hex >> e.checksum)))
      throw CheckpointError("malformed manifest entry: " + line);
    if (dtype != "f32") throw CheckpointError("unsupported dtype " + dtype);
    if (std::sscanf(shape.c_str(), "%ldx%ld", &e.rows, &e.cols) != 2) throw CheckpointError("bad shape " + shape);
  }
  expect_line("blob");
  const std::size_t total = count_of("blob");
  std::string blob(total, '\0');
  in.read(blob.data(), static_cast<std::streamsize>(total));
  if (static_cast<std::size_t>(in.gcount()) != total)
    throw CheckpointTruncatedError("blob truncated: expected " + std::to_string(total) + " bytes, got " +
                                   std::to_string(in.gcount()));

  state.params = ModelParams<S>::zeros(state.config);
  state.adam_m = state.params;
  state.adam_v = state.params;
  std::size_t idx = 0;
  detail::visit_state(state, [&](const std::string& name, Mat<S>& t) {
    if (idx >= entries.size()) throw CheckpointShapeError("manifest lacks tensor " + name);
    const Entry& e = entries[idx];
    const std::size_t end = idx + 1 < entries.size() ? entries[idx + 1].offset : total;
    ++idx;
    if (e.name != name) throw CheckpointShapeError("expected tensor " + name + ", manifest has " + e.name);
    if (e.offset > end || end > total) throw CheckpointShapeError("bad offsets for " + name);
    const std::size_t floats = (end - e.offset) / sizeof(float);
    if (e.rows * e.cols != static_cast<long>(floats) || (end - e.offset) % sizeof(float) != 0)
      throw CheckpointShapeError("manifest says [" + std::to_string(e.rows) + "x" + std::to_string(e.cols) +
                                 "] for " + name + " but blob holds " + std::to_string(floats) + " floats");
    if (e.rows != t.rows() || e.cols != t.cols())
      throw CheckpointShapeError("shape of " + name + " disagrees with model config");
    if (fnv1a(blob.data() + e.offset, end - e.offset) != e.checksum)
      throw CheckpointChecksumError("checksum mismatch in " + name);
    std::vector<float> data(floats);
    std::memcpy(data.data(), blob.data() + e.offset, end - e.offset);
    detail::to_little_endian(data);
    for (std::size_t i = 0; i < floats; ++i) t.data()[i] = static_cast<S>(data[i]);
  });
  if (idx != entries.size()) throw CheckpointShapeError("manifest has extra tensors");
  if (static_cast<int>(state.services.size()) != state.config.num_services ||
      static_cast<int>(state.pages.size()) != state.config.num_pages)
    throw CheckpointShapeError("label spaces disagree with model config");
  return state;
}

template <typename S>
ModelState<S> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  return load_checkpoint<S>(in);
}

}  // namespace sessionbert

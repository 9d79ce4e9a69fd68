#include "cosa/checkpoint.hpp"

#include <cstring>

#include "cosa/binary_io.hpp"
#include "cosa/errors.hpp"

namespace cosa {

namespace {

constexpr char kMagic[8] = {'C', 'O', 'S', 'A', 'C', 'K', 'P', 'T'};
constexpr const char* kWhat = "checkpoint";

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const CheckpointTensor& Checkpoint::at(const std::string& name) const {
  const CheckpointTensor* t = find(name);
  if (!t) throw DataError("checkpoint: missing tensor '" + name + "'");
  return *t;
}

std::string Checkpoint::serialize() const {
  std::string out(kMagic, sizeof(kMagic));
  io::put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string head = header.dump();
  io::put_le<std::uint64_t>(out, head.size());
  out += head;
  io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.values.size() != static_cast<std::size_t>(t.rows * t.cols)) {
      throw ShapeError("checkpoint: tensor '" + t.name + "' payload does not match its shape");
    }
    io::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype));
    io::put_le<std::uint8_t>(out, 2);
    io::put_le<std::int64_t>(out, t.rows);
    io::put_le<std::int64_t>(out, t.cols);
    for (double v : t.values) {
      if (t.dtype == Dtype::f32) {
        io::put_le<float>(out, static_cast<float>(v));
      } else {
        io::put_le<double>(out, v);
      }
    }
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw DataError("checkpoint: bad magic");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = io::get_le<std::uint32_t>(bytes, pos, kWhat);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto head_len = io::get_le<std::uint64_t>(bytes, pos, kWhat);
  if (head_len > bytes.size() - pos) throw DataError("checkpoint: truncated header");
  Checkpoint ckpt;
  try {
    ckpt.header = nlohmann::json::parse(bytes.substr(pos, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  pos += head_len;
  const auto count = io::get_le<std::uint32_t>(bytes, pos, kWhat);
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    const auto name_len = io::get_le<std::uint16_t>(bytes, pos, kWhat);
    if (name_len > bytes.size() - pos) throw DataError("checkpoint: truncated tensor name");
    t.name = bytes.substr(pos, name_len);
    pos += name_len;
    const auto dtype = io::get_le<std::uint8_t>(bytes, pos, kWhat);
    if (dtype > 1) throw DataError("checkpoint: unknown dtype in '" + t.name + "'");
    t.dtype = static_cast<Dtype>(dtype);
    if (io::get_le<std::uint8_t>(bytes, pos, kWhat) != 2) throw DataError("checkpoint: tensor rank must be 2");
    t.rows = io::get_le<std::int64_t>(bytes, pos, kWhat);
    t.cols = io::get_le<std::int64_t>(bytes, pos, kWhat);
    const std::size_t width = t.dtype == Dtype::f32 ? 4 : 8;
    if (t.rows < 0 || t.cols < 0 ||
        static_cast<std::size_t>(t.rows) * static_cast<std::size_t>(t.cols) > (bytes.size() - pos) / width) {
      throw DataError("checkpoint: tensor '" + t.name + "' has an invalid shape");
    }
    t.values.resize(static_cast<std::size_t>(t.rows * t.cols));
    for (double& v : t.values) {
      v = t.dtype == Dtype::f32 ? static_cast<double>(io::get_le<float>(bytes, pos, kWhat))
                                : io::get_le<double>(bytes, pos, kWhat);
    }
    ckpt.tensors.push_back(std::move(t));
  }
  if (pos != bytes.size()) throw DataError("checkpoint: trailing bytes");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::write_file_atomic(path, ckpt.serialize());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  try {
    return Checkpoint::deserialize(io::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

template <typename T>
CheckpointTensor to_tensor(const std::string& name, const ag::Matrix<T>& m) {
  CheckpointTensor t;
  t.name = name;
  t.dtype = std::is_same_v<T, float> ? Dtype::f32 : Dtype::f64;
  t.rows = m.rows();
  t.cols = m.cols();
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

template <typename T>
ag::Matrix<T> from_tensor(const CheckpointTensor& t) {
  ag::Matrix<T> m(t.rows, t.cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(t.values[static_cast<std::size_t>(i)]);
  return m;
}

template <typename T>
void store_model(Checkpoint& ckpt, const Model<T>& model) {
  ckpt.header["model_config"] = model.config().to_json();
  model.params().visit([&](const std::string& name, const ag::Param<T>& p) {
    ckpt.tensors.push_back(to_tensor<T>("param." + name, p.value));
  });
}

template <typename T>
Model<T> load_model(const Checkpoint& ckpt, const ModelConfig* expected) {
  if (!ckpt.header.contains("model_config")) throw DataError("checkpoint: header has no model_config");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(ckpt.header.at("model_config"));
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  if (expected && !(*expected == cfg)) {
    throw DataError("checkpoint: model config mismatch (stored " + cfg.to_json().dump() + ", expected " +
                    expected->to_json().dump() + ")");
  }
  Model<T> model(cfg, 0);
  model.params().visit([&](const std::string& name, ag::Param<T>& p) {
    const CheckpointTensor& t = ckpt.at("param." + name);
    if (t.rows != p.value.rows() || t.cols != p.value.cols()) {
      throw DataError("checkpoint: tensor '" + name + "' has shape " + std::to_string(t.rows) + "x" +
                      std::to_string(t.cols) + ", model expects " + std::to_string(p.value.rows()) + "x" +
                      std::to_string(p.value.cols()));
    }
    p.value = from_tensor<T>(t);
  });
  return model;
}

template CheckpointTensor to_tensor<float>(const std::string&, const ag::Matrix<float>&);
template CheckpointTensor to_tensor<double>(const std::string&, const ag::Matrix<double>&);
template ag::Matrix<float> from_tensor<float>(const CheckpointTensor&);
template ag::Matrix<double> from_tensor<double>(const CheckpointTensor&);
template void store_model<float>(Checkpoint&, const Model<float>&);
template void store_model<double>(Checkpoint&, const Model<double>&);
template Model<float> load_model<float>(const Checkpoint&, const ModelConfig*);
template Model<double> load_model<double>(const Checkpoint&, const ModelConfig*);

}  // namespace cosa

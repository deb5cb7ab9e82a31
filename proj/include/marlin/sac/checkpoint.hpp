#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "marlin/common.hpp"
#include "marlin/env/features.hpp"
#include "marlin/nn/mlp.hpp"
#include "marlin/sac/agent.hpp"

namespace marlin::sac {

/// Unreadable, truncated or incompatible checkpoint file.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'A', 'R', 'L', 'N', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Named dense tensor, stored row-major in the file.
struct Tensor {
  enum class Type : std::uint8_t { f32 = 0, f64 = 1 };
  Type type = Type::f32;
  std::uint32_t rows = 0, cols = 0;
  std::vector<double> data;  // row-major, widened

  template <class S>
  nn::Mat<S> as_matrix() const {
    nn::Mat<S> m(rows, cols);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c) m(r, c) = static_cast<S>(data[std::size_t(r) * cols + c]);
    return m;
  }
  template <class Derived>
  static Tensor from(const Eigen::MatrixBase<Derived>& m, Type t) {
    Tensor x;
    x.type = t;
    x.rows = static_cast<std::uint32_t>(m.rows());
    x.cols = static_cast<std::uint32_t>(m.cols());
    x.data.resize(std::size_t(x.rows) * x.cols);
    for (std::uint32_t r = 0; r < x.rows; ++r)
      for (std::uint32_t c = 0; c < x.cols; ++c) x.data[std::size_t(r) * x.cols + c] = static_cast<double>(m(r, c));
    return x;
  }
  static Tensor scalar(double v, Type t = Type::f64) {
    Tensor x;
    x.type = t;
    x.rows = x.cols = 1;
    x.data = {v};
    return x;
  }
};

struct CheckpointFile {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t config_hash = 0;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    return it->second;
  }
};

namespace detail {

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("checkpoint is truncated");
  return v;
}

}  // namespace detail

inline void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& f) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write checkpoint " + tmp);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    detail::put<std::uint32_t>(os, f.version);
    detail::put<std::uint64_t>(os, f.config_hash);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(f.tensors.size()));
    for (const auto& [name, t] : f.tensors) {
      detail::put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(t.type));
      detail::put<std::uint32_t>(os, t.rows);
      detail::put<std::uint32_t>(os, t.cols);
      for (double v : t.data) {
        if (t.type == Tensor::Type::f32) detail::put<float>(os, static_cast<float>(v));
        else detail::put<double>(os, v);
      }
    }
    if (!os) throw CheckpointError("failed writing checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  CheckpointFile f;
  f.version = detail::get<std::uint32_t>(is);
  if (f.version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(f.version) +
                          " is not supported; this build reads version " + std::to_string(kCheckpointVersion));
  }
  f.config_hash = detail::get<std::uint64_t>(is);
  const auto n = detail::get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = detail::get<std::uint16_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw CheckpointError("checkpoint is truncated");
    Tensor t;
    const auto type = detail::get<std::uint8_t>(is);
    if (type > 1) throw CheckpointError("checkpoint tensor '" + name + "' has unknown type");
    t.type = static_cast<Tensor::Type>(type);
    t.rows = detail::get<std::uint32_t>(is);
    t.cols = detail::get<std::uint32_t>(is);
    t.data.resize(std::size_t(t.rows) * t.cols);
    for (auto& v : t.data) v = t.type == Tensor::Type::f32 ? detail::get<float>(is) : detail::get<double>(is);
    f.tensors.emplace(std::move(name), std::move(t));
  }
  return f;
}

namespace detail {

inline void put_net(CheckpointFile& f, const std::string& prefix, const nn::Mlp<float>& net) {
  for (std::size_t l = 0; l < net.layers(); ++l) {
    f.tensors[prefix + ".w" + std::to_string(l)] = Tensor::from(net.weight(l), Tensor::Type::f32);
    f.tensors[prefix + ".b" + std::to_string(l)] = Tensor::from(net.bias(l), Tensor::Type::f32);
  }
}

inline void get_net(const CheckpointFile& f, const std::string& prefix, nn::Mlp<float>& net) {
  for (std::size_t l = 0; l < net.layers(); ++l) {
    for (auto [tag, m] : {std::pair{"w", &net.weight(l)}, std::pair{"b", &net.bias(l)}}) {
      const auto& t = f.at(prefix + "." + tag + std::to_string(l));
      if (t.rows != m->rows() || t.cols != m->cols())
        throw CheckpointError("checkpoint tensor " + prefix + "." + tag + std::to_string(l) + " has shape " +
                              std::to_string(t.rows) + "x" + std::to_string(t.cols) + ", expected " +
                              std::to_string(m->rows()) + "x" + std::to_string(m->cols()));
      *m = t.as_matrix<float>();
    }
  }
}

inline void put_adam(CheckpointFile& f, const std::string& prefix, const nn::Adam<float>& opt) {
  f.tensors[prefix + ".t"] = Tensor::scalar(static_cast<double>(opt.steps()));
  for (std::size_t i = 0; i < opt.m().size(); ++i) {
    f.tensors[prefix + ".m" + std::to_string(i)] = Tensor::from(opt.m()[i], Tensor::Type::f32);
    f.tensors[prefix + ".v" + std::to_string(i)] = Tensor::from(opt.v()[i], Tensor::Type::f32);
  }
}

inline void get_adam(const CheckpointFile& f, const std::string& prefix, nn::Adam<float>& opt) {
  opt.set_steps(static_cast<std::int64_t>(f.at(prefix + ".t").data[0]));
  opt.m().clear();
  opt.v().clear();
  for (std::size_t i = 0; f.tensors.count(prefix + ".m" + std::to_string(i)); ++i) {
    opt.m().push_back(f.at(prefix + ".m" + std::to_string(i)).as_matrix<float>());
    opt.v().push_back(f.at(prefix + ".v" + std::to_string(i)).as_matrix<float>());
  }
}

}  // namespace detail

/// Layer widths of the stored actor, input first.
inline std::vector<std::size_t> stored_actor_shape(const CheckpointFile& f) {
  std::vector<std::size_t> s;
  for (std::size_t l = 0; f.tensors.count("actor.w" + std::to_string(l)); ++l) {
    const auto& t = f.at("actor.w" + std::to_string(l));
    if (l == 0) s.push_back(t.cols);
    s.push_back(t.rows);
  }
  if (s.size() < 2) throw CheckpointError("checkpoint holds no actor network");
  return s;
}

inline void save_checkpoint(const std::filesystem::path& path, SacAgent& agent, const env::RunningNormalizer& norm,
                            std::uint64_t config_hash) {
  CheckpointFile f;
  f.config_hash = config_hash;
  detail::put_net(f, "actor", agent.actor());
  detail::put_net(f, "q1", agent.q1());
  detail::put_net(f, "q2", agent.q2());
  detail::put_net(f, "q1_target", agent.q1_target());
  detail::put_net(f, "q2_target", agent.q2_target());
  detail::put_adam(f, "adam.actor", agent.actor_optimizer());
  detail::put_adam(f, "adam.q1", agent.critic1_optimizer());
  detail::put_adam(f, "adam.q2", agent.critic2_optimizer());
  detail::put_adam(f, "adam.log_alpha", agent.alpha_optimizer());
  f.tensors["log_alpha"] = Tensor::scalar(agent.log_alpha(), Tensor::Type::f32);
  f.tensors["grad_steps"] = Tensor::scalar(static_cast<double>(agent.grad_steps()));
  f.tensors["norm.mean"] = Tensor::from(norm.mean(), Tensor::Type::f64);
  f.tensors["norm.var"] = Tensor::from(norm.var(), Tensor::Type::f64);
  f.tensors["norm.count"] = Tensor::scalar(static_cast<double>(norm.count()));
  f.tensors["norm.decay"] = Tensor::scalar(norm.decay());
  write_checkpoint_file(path, f);
}

struct LoadedPolicy {
  std::unique_ptr<SacAgent> agent;
  env::RunningNormalizer normalizer;
  std::uint64_t config_hash = 0;
};

/// Rebuilds agent and normalizer. Network widths come from the file;
/// hyperparameters from `base`.
inline LoadedPolicy load_checkpoint(const std::filesystem::path& path, SacConfig base = {}) {
  const CheckpointFile f = read_checkpoint_file(path);
  const auto shape = stored_actor_shape(f);
  base.obs_dim = shape.front();
  base.hidden.assign(shape.begin() + 1, shape.end() - 1);
  if (shape.back() != 2) throw CheckpointError("checkpoint actor head must have 2 outputs");
  LoadedPolicy out;
  out.agent = std::make_unique<SacAgent>(base);
  auto& a = *out.agent;
  detail::get_net(f, "actor", a.actor());
  detail::get_net(f, "q1", a.q1());
  detail::get_net(f, "q2", a.q2());
  detail::get_net(f, "q1_target", a.q1_target());
  detail::get_net(f, "q2_target", a.q2_target());
  detail::get_adam(f, "adam.actor", a.actor_optimizer());
  detail::get_adam(f, "adam.q1", a.critic1_optimizer());
  detail::get_adam(f, "adam.q2", a.critic2_optimizer());
  detail::get_adam(f, "adam.log_alpha", a.alpha_optimizer());
  a.set_log_alpha(static_cast<float>(f.at("log_alpha").data[0]));
  a.set_grad_steps(static_cast<std::int64_t>(f.at("grad_steps").data[0]));
  const auto mean = f.at("norm.mean").as_matrix<double>();
  const auto var = f.at("norm.var").as_matrix<double>();
  if (mean.cols() != 1 || static_cast<std::size_t>(mean.rows()) != base.obs_dim || var.rows() != mean.rows())
    throw CheckpointError("checkpoint normalizer does not match the observation size");
  out.normalizer = env::RunningNormalizer(base.obs_dim, f.at("norm.decay").data[0]);
  out.normalizer.restore(mean.col(0), var.col(0), static_cast<std::uint64_t>(f.at("norm.count").data[0]));
  out.config_hash = f.config_hash;
  return out;
}

}  // namespace marlin::sac

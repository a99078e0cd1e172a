#include "dilseg/train.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "dilseg/io.hpp"
#include "dilseg/rng.hpp"

namespace dilseg {

void adam_step(Model& model, const GradMap& grads, OptimizerState& state,
               const TrainConfig& config) {
  if (config.lr <= 0) throw std::invalid_argument("learning rate must be > 0");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(static_cast<double>(config.beta1), t);
  const double bc2 = 1.0 - std::pow(static_cast<double>(config.beta2), t);
  for (auto& [name, param] : model.params) {
    auto git = grads.find(name);
    if (git == grads.end()) {
      throw std::invalid_argument("adam_step: missing gradient for " + name);
    }
    const Tensor& g = git->second;
    if (!(g.shape == param.shape)) {
      throw std::invalid_argument("adam_step: gradient shape mismatch for " + name);
    }
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(name, Tensor(param.shape)).first;
      state.v.emplace(name, Tensor(param.shape));
    }
    Tensor& m = mit->second;
    Tensor& v = state.v.at(name);
    if (!(m.shape == param.shape) || !(v.shape == param.shape)) {
      throw std::invalid_argument("adam_step: moment shape mismatch for " + name);
    }
    for (std::size_t i = 0; i < param.numel(); ++i) {
      const float gi = g.data[i];
      m.data[i] = config.beta1 * m.data[i] + (1.0f - config.beta1) * gi;
      v.data[i] = config.beta2 * v.data[i] + (1.0f - config.beta2) * gi * gi;
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      param.data[i] -= static_cast<float>(config.lr * mhat /
                                          (std::sqrt(vhat) + config.eps));
    }
  }
}

float loss_and_grads(const Model& model, const Tensor& inputs,
                     const Tensor& labels, int loss_region, GradMap* grads) {
  ForwardOptions opts;
  opts.record = grads != nullptr;
  opts.roi_extent = model.spec.stride1() ? loss_region : 0;
  ForwardResult fr = forward(model, inputs, opts);

  const auto N = fr.prob.shape[0];
  const auto H = fr.prob.shape[2], W = fr.prob.shape[3];
  const auto L = static_cast<std::size_t>(loss_region);
  if (labels.shape.size() != 4 || labels.shape[0] != N || labels.shape[1] != 2 ||
      labels.shape[2] != L || labels.shape[3] != L) {
    throw std::invalid_argument("train: label batch must be N x 2 x " +
                                std::to_string(L) + " x " + std::to_string(L));
  }
  if (H < L || W < L) {
    throw std::invalid_argument("train: output map smaller than the loss region");
  }

  // Embed the center labels into the output extent; mask confines the loss
  // (and its gradient) to the supervised window.
  Tensor target(fr.prob.shape);
  Tensor mask({H, W});
  const std::size_t oy = (H - L) / 2, ox = (W - L) / 2;
  for (std::size_t y = 0; y < L; ++y) {
    for (std::size_t x = 0; x < L; ++x) mask.at(oy + y, ox + x) = 1.0f;
  }
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < 2; ++c) {
      for (std::size_t y = 0; y < L; ++y) {
        for (std::size_t x = 0; x < L; ++x) {
          target.at(n, c, oy + y, ox + x) = labels.at(n, c, y, x);
        }
      }
    }
  }

  if (!grads) return cross_entropy(fr.prob, target, mask);

  Tape<float>& tape = *fr.tape;
  // Attach the loss to the pre-softmax logits' probability node.
  const int loss_id = tape.cross_entropy(fr.prob_id, std::move(target), std::move(mask));
  const float loss = tape.value(loss_id).data[0];
  tape.backward_scalar(loss_id);
  grads->clear();
  for (const auto& [name, id] : fr.param_ids) {
    grads->emplace(name, tape.grad(id));
  }
  return loss;
}

std::vector<float> train(Model& model, const PatchSet& patches,
                         const TrainConfig& config, OptimizerState& state) {
  if (config.batch < 1) throw std::invalid_argument("batch size must be >= 1");
  if (config.lr <= 0) throw std::invalid_argument("learning rate must be > 0");
  if (patches.size() == 0) throw std::invalid_argument("train: empty patch set");
  if (patches.label_extent() != config.loss_region) {
    throw std::invalid_argument("train: patch label extent differs from loss region");
  }

  Rng rng(config.seed);
  // Replay the batch draws of already-completed steps so a resumed run sees
  // the same data order as an uninterrupted one.
  for (std::int64_t s = 0; s < state.step; ++s) {
    for (int b = 0; b < config.batch; ++b) {
      (void)rng.uniform_int(0, patches.size() - 1);
    }
  }

  std::vector<float> losses;
  std::vector<std::size_t> idx(static_cast<std::size_t>(config.batch));
  GradMap grads;
  for (std::int64_t step = state.step; step < config.steps; ++step) {
    for (auto& i : idx) i = rng.uniform_int(0, patches.size() - 1);
    auto [inputs, labels] = patches.gather(idx);
    const float loss = loss_and_grads(model, inputs, labels, config.loss_region, &grads);
    if (!std::isfinite(loss)) {
      double pnorm = 0;
      for (const auto& [name, p] : model.params) {
        for (float x : p.data) pnorm += static_cast<double>(x) * x;
      }
      std::ostringstream msg;
      msg << "training diverged: non-finite loss at step " << step
          << " (parameter L2 norm " << std::sqrt(pnorm) << ")";
      throw std::runtime_error(msg.str());
    }
    adam_step(model, grads, state, config);
    losses.push_back(loss);
    if (config.checkpoint_interval > 0 && !config.checkpoint_path.empty() &&
        state.step % config.checkpoint_interval == 0) {
      save_checkpoint(model, state, config.checkpoint_path);
    }
  }
  if (!config.checkpoint_path.empty()) save_checkpoint(model, state, config.checkpoint_path);
  return losses;
}

std::vector<float> train(Model& model, const PatchSet& patches,
                         const TrainConfig& config) {
  OptimizerState state;
  return train(model, patches, config, state);
}

namespace {

constexpr char kCheckpointMagic[4] = {'D', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("truncated checkpoint");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw std::runtime_error("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_record(std::ostream& out, const std::string& name, const Tensor& t) {
  write_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_ntsr(t, out);
}

}  // namespace

void save_checkpoint(const Model& model, const OptimizerState& state,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 4);
  write_u32(out, kCheckpointVersion);

  nlohmann::json header;
  header["spec"] = model.spec.to_json();
  header["step"] = state.step;
  header["seed"] = model.seed;
  const std::string hs = header.dump();
  write_u64(out, hs.size());
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));

  for (const auto& [name, t] : model.params) write_record(out, "param." + name, t);
  for (const auto& [name, t] : state.m) write_record(out, "adam.m." + name, t);
  for (const auto& [name, t] : state.v) write_record(out, "adam.v." + name, t);
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

std::pair<Model, OptimizerState> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);
  }
  if (const auto version = read_u32(in); version != kCheckpointVersion) {
    throw std::runtime_error("unsupported checkpoint version " +
                             std::to_string(version));
  }
  const std::uint64_t hlen = read_u64(in);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  const nlohmann::json header = nlohmann::json::parse(hs);

  Model model;
  model.spec = NetworkSpec::from_json(header.at("spec"));
  model.seed = header.at("seed").get<std::uint64_t>();
  OptimizerState state;
  state.step = header.at("step").get<std::int64_t>();

  while (true) {
    std::uint32_t nlen;
    {
      unsigned char b[4];
      in.read(reinterpret_cast<char*>(b), 4);
      if (in.eof()) break;
      if (!in) throw std::runtime_error("truncated checkpoint record: " + path);
      nlen = 0;
      for (int i = 0; i < 4; ++i) nlen |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    }
    std::string name(nlen, '\0');
    in.read(name.data(), static_cast<std::streamsize>(nlen));
    if (!in) throw std::runtime_error("truncated checkpoint record: " + path);
    Tensor t = read_ntsr(in);
    if (name.rfind("param.", 0) == 0) {
      model.params.emplace(name.substr(6), std::move(t));
    } else if (name.rfind("adam.m.", 0) == 0) {
      state.m.emplace(name.substr(7), std::move(t));
    } else if (name.rfind("adam.v.", 0) == 0) {
      state.v.emplace(name.substr(7), std::move(t));
    } else {
      throw std::runtime_error("unknown checkpoint record '" + name + "' in " + path);
    }
  }
  if (model.params.empty()) {
    throw std::runtime_error("checkpoint has no parameters: " + path);
  }
  return {std::move(model), std::move(state)};
}

}  // namespace dilseg

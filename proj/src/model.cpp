#include "ssmrec/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace ssmrec {

using ag::Var;
using ag::VarMap;

void ModelConfig::validate() const {
  std::vector<std::string> errors;
  if (num_items < 2) errors.push_back("num_items must be at least 2 (padding + one item)");
  if (d == 0) errors.push_back("d must be positive");
  if (d_state == 0) errors.push_back("d_state must be positive");
  if (conv_width == 0) errors.push_back("conv_width must be positive");
  if (d_ff == 0) errors.push_back("d_ff must be positive");
  if (layers == 0) errors.push_back("layers must be positive");
  if (dropout < 0.0 || dropout >= 1.0) errors.push_back("dropout must be in [0, 1)");
  if (!errors.empty()) {
    std::string msg = "model config invalid:";
    for (const auto& e : errors) msg += " " + e + ";";
    throw std::invalid_argument(msg);
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_items", c.num_items},   {"d", c.d},
                     {"d_state", c.d_state},       {"conv_width", c.conv_width},
                     {"d_ff", c.d_ff},             {"layers", c.layers},
                     {"dropout", c.dropout},       {"init_std", c.init_std},
                     {"layer_norm_eps", c.layer_norm_eps}, {"detach_extension", c.detach_extension},
                     {"extension_history", c.extension_history}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig d;
  c.num_items = j.value("num_items", d.num_items);
  c.d = j.value("d", d.d);
  c.d_state = j.value("d_state", d.d_state);
  c.conv_width = j.value("conv_width", d.conv_width);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.layers = j.value("layers", d.layers);
  c.dropout = j.value("dropout", d.dropout);
  c.init_std = j.value("init_std", d.init_std);
  c.layer_norm_eps = j.value("layer_norm_eps", d.layer_norm_eps);
  c.detach_extension = j.value("detach_extension", d.detach_extension);
  c.extension_history = j.value("extension_history", d.extension_history);
}

std::string block_key(std::size_t block, const std::string& leaf) {
  return "block" + std::to_string(block) + "." + leaf;
}

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelParams p;
  p.config = config;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  auto gaussian = [&](Shape s) {
    Tensor t(std::move(s));
    for (auto& v : t.raw()) v = normal(rng);
    return t;
  };
  const std::size_t d = config.d, ds = config.d_state, C = config.conv_channels(), w = config.conv_width;
  p.tensors["embedding"] = gaussian({config.num_items, d});
  p.tensors["back_proj.weight"] = gaussian({ds, d});
  p.tensors["back_proj.bias"] = Tensor({ds});
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(w));
  std::uniform_real_distribution<double> conv_init(-conv_bound, conv_bound);
  for (std::size_t b = 0; b < config.layers; ++b) {
    p.tensors[block_key(b, "in_proj.weight")] = gaussian({C + 1, d});
    p.tensors[block_key(b, "in_proj.bias")] = Tensor({C + 1});
    Tensor kernel({C, w});
    for (auto& v : kernel.raw()) v = conv_init(rng);
    p.tensors[block_key(b, "conv.weight")] = std::move(kernel);
    p.tensors[block_key(b, "conv.bias")] = Tensor({C});
    p.tensors[block_key(b, "a_log")] = Tensor({1});
    p.tensors[block_key(b, "norm1.weight")] = Tensor({d}, 1.0);
    p.tensors[block_key(b, "norm1.bias")] = Tensor({d});
    p.tensors[block_key(b, "ffn1.weight")] = gaussian({config.d_ff, d});
    p.tensors[block_key(b, "ffn1.bias")] = Tensor({config.d_ff});
    p.tensors[block_key(b, "ffn2.weight")] = gaussian({d, config.d_ff});
    p.tensors[block_key(b, "ffn2.bias")] = Tensor({d});
    p.tensors[block_key(b, "norm2.weight")] = Tensor({d}, 1.0);
    p.tensors[block_key(b, "norm2.bias")] = Tensor({d});
  }
  return p;
}

std::uint64_t ModelParams::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : tensors) h = ssmrec::checksum(t.values(), h);
  return h;
}

double ModelParams::a_value(std::size_t block) const { return -std::exp(tensors.at(block_key(block, "a_log"))[0]); }

VarMap param_vars(const ModelParams& params, bool requires_grad) {
  VarMap vars;
  for (const auto& [name, t] : params.tensors)
    vars.emplace(name, requires_grad ? ag::parameter(t, name) : ag::constant(t));
  return vars;
}

// ---------------------------------------------------------------------------

Var embed(const VarMap& vars, const Batch& batch, const ModelConfig& cfg, Mode mode, std::mt19937_64& rng) {
  Var rows = ag::gather_rows(vars.at("embedding"), batch.items);
  Var e = ag::reshape(rows, Shape{batch.rows, batch.width, cfg.d});
  return ag::dropout(e, cfg.dropout, mode == Mode::kTrain, rng);
}

TransformOut transform(const Var& input, const VarMap& vars, std::size_t block, const ModelConfig& cfg,
                       const ag::Mask& mask) {
  const std::size_t C = cfg.conv_channels();
  const std::size_t m = input->value.dim(0), L = input->value.dim(1);
  Var z = ag::linear(input, vars.at(block_key(block, "in_proj.weight")), vars.at(block_key(block, "in_proj.bias")));
  TransformOut out;
  out.conv_input = ag::mask_positions(ag::slice_last(z, 0, C), mask);
  Var act = ag::silu(ag::depthwise_causal_conv1d(out.conv_input, vars.at(block_key(block, "conv.weight")),
                                                 vars.at(block_key(block, "conv.bias"))));
  out.x = ag::slice_last(act, 0, cfg.d);
  out.b = ag::slice_last(act, cfg.d, cfg.d_state);
  out.c = ag::slice_last(act, cfg.d + cfg.d_state, cfg.d_state);
  out.delta = ag::softplus(ag::reshape(ag::slice_last(z, C, 1), Shape{m, L}));
  return out;
}

Var a_from_log(const Var& a_log) { return ag::neg(ag::exp(a_log)); }

Discretized discretize(const Var& delta, const Var& a, const Var& b) {
  if (a->value.size() != 1) throw ShapeError("discretize: A must be a scalar");
  if (!(a->value[0] < 0.0)) throw std::domain_error("stability violated: A must be negative");
  const std::size_t n = delta->value.size();
  if (n == 0 || b->value.size() % n != 0) throw ShapeError("discretize: Δ " + shape_str(delta->shape()) +
                                                           " does not match B " + shape_str(b->shape()));
  const std::size_t ds = b->value.size() / n;
  Discretized out;
  out.abar = ag::exp(ag::mul_scalar(delta, a));
  out.bbar = ag::reshape(ag::row_scale(ag::reshape(b, Shape{n, ds}), ag::reshape(delta, Shape{n})), b->shape());
  return out;
}

ag::ScanResult scan(const Discretized& disc, const Var& x, const Var& c, const ag::Mask& mask) {
  return ag::sequential_scan(disc.abar, disc.bbar, x, c, mask);
}

Var ffn_and_norm(const Var& y, const Var& block_input, const VarMap& vars, std::size_t block, const ModelConfig& cfg,
                 Mode mode, std::mt19937_64& rng) {
  const bool train = mode == Mode::kTrain;
  Var z = ag::layer_norm(ag::add(ag::dropout(y, cfg.dropout, train, rng), block_input),
                         vars.at(block_key(block, "norm1.weight")), vars.at(block_key(block, "norm1.bias")),
                         cfg.layer_norm_eps);
  Var inner = ag::silu(ag::linear(z, vars.at(block_key(block, "ffn1.weight")), vars.at(block_key(block, "ffn1.bias"))));
  Var f = ag::linear(ag::dropout(inner, cfg.dropout, train, rng), vars.at(block_key(block, "ffn2.weight")),
                     vars.at(block_key(block, "ffn2.bias")));
  return ag::layer_norm(ag::add(z, ag::dropout(f, cfg.dropout, train, rng)), vars.at(block_key(block, "norm2.weight")),
                        vars.at(block_key(block, "norm2.bias")), cfg.layer_norm_eps);
}

Var predict(const Var& o_last, const VarMap& vars) { return ag::linear(o_last, vars.at("embedding"), nullptr); }

StepExtension extend_step(const Var& o_last, const TransformOut& history, const VarMap& vars, const ModelConfig& cfg,
                          bool detach) {
  const std::size_t C = cfg.conv_channels();
  const std::size_t m = o_last->value.dim(0);
  Var o = detach ? ag::stop_gradient(o_last) : o_last;
  Var z = ag::linear(o, vars.at(block_key(0, "in_proj.weight")), vars.at(block_key(0, "in_proj.bias")));
  Var window = ag::reshape(ag::slice_last(z, 0, C), Shape{m, 1, C});
  if (cfg.extension_history && history.conv_input) {
    const std::size_t L = history.conv_input->value.dim(1);
    const std::size_t h = std::min(cfg.conv_width - 1, L);
    if (h > 0) window = ag::concat_axis1(ag::slice_axis1(history.conv_input, L - h, h), window);
  }
  const std::size_t last = window->value.dim(1) - 1;
  Var conv = ag::depthwise_causal_conv1d(window, vars.at(block_key(0, "conv.weight")), vars.at(block_key(0, "conv.bias")));
  Var act = ag::silu(ag::select_axis1(conv, last));
  StepExtension ext;
  ext.x_hat = ag::slice_last(act, 0, cfg.d);
  ext.b_next = ag::slice_last(act, cfg.d, cfg.d_state);
  ext.c_next = ag::slice_last(act, cfg.d + cfg.d_state, cfg.d_state);
  ext.delta_next = ag::softplus(ag::reshape(ag::slice_last(z, C, 1), Shape{m}));
  return ext;
}

namespace {

ForwardTrace forward_impl(const Batch& batch, const VarMap& vars, const ModelConfig& cfg, Mode mode,
                          std::mt19937_64& rng, bool with_extension) {
  if (batch.pad_side != PadSide::kLeft) throw std::invalid_argument("forward: model expects left-padded batches");
  if (batch.rows == 0 || batch.width == 0) throw std::invalid_argument("forward: empty batch");
  for (std::size_t it : batch.items)
    if (it >= cfg.num_items) throw std::out_of_range("embed: item index " + std::to_string(it) + " outside vocabulary");
  ForwardTrace tr;
  tr.rows = batch.rows;
  tr.width = batch.width;
  tr.embeddings = embed(vars, batch, cfg, mode, rng);
  Var u = tr.embeddings;
  for (std::size_t b = 0; b < cfg.layers; ++b) {
    TransformOut t = transform(u, vars, b, cfg, batch.mask);
    Var a = a_from_log(vars.at(block_key(b, "a_log")));
    Discretized disc = discretize(t.delta, a, t.b);
    ag::ScanResult s = scan(disc, t.x, t.c, batch.mask);
    Var o = ffn_and_norm(s.y, u, vars, b, cfg, mode, rng);
    if (b == 0) {
      tr.transform = t;
      tr.a = a;
      tr.disc = disc;
      tr.y = s.y;
      tr.h_final = s.final;
      tr.x_last = ag::select_axis1(t.x, batch.width - 1);
    }
    u = o;
  }
  tr.output = u;
  tr.o_last = ag::select_axis1(u, batch.width - 1);
  tr.logits = predict(tr.o_last, vars);
  if (with_extension) tr.ext = extend_step(tr.o_last, tr.transform, vars, cfg, cfg.detach_extension);
  return tr;
}

}  // namespace

ForwardTrace forward_full(const Batch& batch, const VarMap& vars, const ModelConfig& cfg, Mode mode,
                          std::mt19937_64& rng) {
  return forward_impl(batch, vars, cfg, mode, rng, true);
}

Tensor predict_logits(const Batch& batch, const ModelParams& params) {
  std::mt19937_64 rng(0);
  return forward_impl(batch, param_vars(params, false), params.config, Mode::kEval, rng, false).logits->value;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

constexpr char kMagic[4] = {'T', '2', 'A', 'R'};

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char bytes[sizeof(T)];
  in.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  nlohmann::json manifest;
  manifest["config"] = params.config;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.tensors) {
    const std::uint64_t bytes = t.size() * sizeof(double);
    manifest["tensors"].push_back({{"name", name}, {"dtype", "f64"}, {"shape", t.shape()}, {"offset", offset},
                                   {"bytes", bytes}});
    offset += bytes;
  }
  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  out.write(kMagic, 4);
  write_le<std::uint32_t>(out, kCheckpointVersion);
  write_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : params.tensors)
    for (double v : t.values()) write_le<double>(out, v);
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("checkpoint: bad magic in " + path.string());
  const auto version = read_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto len = read_le<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("checkpoint: truncated manifest");
  const auto manifest = nlohmann::json::parse(text);
  ModelParams params;
  params.config = manifest.at("config").get<ModelConfig>();
  const std::streamoff data_start = in.tellg();
  for (const auto& entry : manifest.at("tensors")) {
    if (entry.at("dtype") != "f64") throw std::runtime_error("checkpoint: unsupported dtype");
    Shape shape = entry.at("shape").get<Shape>();
    Tensor t(shape);
    if (entry.at("bytes").get<std::uint64_t>() != t.size() * sizeof(double)) {
      throw std::runtime_error("checkpoint: byte count mismatch for " + entry.at("name").get<std::string>());
    }
    in.seekg(data_start + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    for (auto& v : t.raw()) v = read_le<double>(in);
    params.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  // Architecture must match what the config implies.
  const ModelParams expected = ModelParams::init(params.config, 0);
  for (const auto& [name, t] : expected.tensors) {
    auto it = params.tensors.find(name);
    if (it == params.tensors.end() || it->second.shape() != t.shape()) {
      throw std::runtime_error("checkpoint: tensor '" + name + "' missing or misshapen for the stored config");
    }
  }
  return params;
}

}  // namespace ssmrec

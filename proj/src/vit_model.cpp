#include "evtforce/vit_model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "evtforce/binary_io.hpp"
#include "evtforce/param_io.hpp"

namespace evtforce::vit {

using ad::Tensor;

void ViTConfig::validate() const {
  auto fail = [](const char* key, const std::string& why) {
    throw std::invalid_argument(std::string("model.") + key + " " + why);
  };
  if (image_size <= 0) fail("image_size", "must be > 0");
  if (patch_size <= 0) fail("patch_size", "must be > 0");
  if (image_size % patch_size != 0) fail("image_size", "must be divisible by model.patch_size");
  if (in_channels <= 0) fail("in_channels", "must be > 0");
  if (embed_dim <= 0) fail("embed_dim", "must be > 0");
  if (depth < 0) fail("depth", "must be >= 0");
  if (num_heads <= 0) fail("num_heads", "must be > 0");
  if (embed_dim % num_heads != 0) fail("embed_dim", "must be divisible by model.num_heads");
  if (mlp_ratio <= 0) fail("mlp_ratio", "must be > 0");
  if (head_output != 1) fail("head_output", "must be 1 (scalar force)");
}

ViTConfig base_patch8_224(int in_channels) {
  ViTConfig c;
  c.image_size = 224;
  c.patch_size = 8;
  c.in_channels = in_channels;
  c.embed_dim = 768;
  c.depth = 12;
  c.num_heads = 12;
  c.mlp_ratio = 4;
  return c;
}

nlohmann::json to_json(const ViTConfig& c) {
  return {{"image_size", c.image_size}, {"patch_size", c.patch_size},
          {"in_channels", c.in_channels}, {"embed_dim", c.embed_dim},
          {"depth", c.depth}, {"num_heads", c.num_heads},
          {"mlp_ratio", c.mlp_ratio}, {"head_output", c.head_output}};
}

ViTConfig config_from_json(const nlohmann::json& j) {
  ViTConfig c;
  auto read = [&](const char* key, int& field) {
    if (!j.contains(key)) return;
    if (!j[key].is_number_integer()) {
      throw std::invalid_argument(std::string("model.") + key + " must be an integer");
    }
    field = j[key].get<int>();
  };
  read("image_size", c.image_size);
  read("patch_size", c.patch_size);
  read("in_channels", c.in_channels);
  read("embed_dim", c.embed_dim);
  read("depth", c.depth);
  read("num_heads", c.num_heads);
  read("mlp_ratio", c.mlp_ratio);
  read("head_output", c.head_output);
  return c;
}

std::size_t parameter_count(const ViTConfig& c) {
  const std::size_t d = c.embed_dim;
  const std::size_t hidden = c.mlp_hidden();
  const std::size_t patch = std::size_t(c.patch_dim()) * d + d;
  const std::size_t tokens = d + std::size_t(c.num_tokens()) * d;
  const std::size_t block = 2 * d            // ln1
                            + 4 * (d * d + d)  // q, k, v, proj
                            + 2 * d            // ln2
                            + (d * hidden + hidden) + (hidden * d + d);
  const std::size_t tail = 2 * d + d * c.head_output + c.head_output;
  return patch + tokens + std::size_t(c.depth) * block + tail;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ViTModel<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>*>> out = {
      {"patch.weight", &patch_weight},
      {"patch.bias", &patch_bias},
      {"reg_token", &reg_token},
      {"pos_embed", &pos_embed},
  };
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    out.insert(out.end(), {{p + "ln1.gamma", &b.ln1_gamma},
                           {p + "ln1.beta", &b.ln1_beta},
                           {p + "attn.q.weight", &b.q_weight},
                           {p + "attn.q.bias", &b.q_bias},
                           {p + "attn.k.weight", &b.k_weight},
                           {p + "attn.k.bias", &b.k_bias},
                           {p + "attn.v.weight", &b.v_weight},
                           {p + "attn.v.bias", &b.v_bias},
                           {p + "attn.proj.weight", &b.proj_weight},
                           {p + "attn.proj.bias", &b.proj_bias},
                           {p + "ln2.gamma", &b.ln2_gamma},
                           {p + "ln2.beta", &b.ln2_beta},
                           {p + "mlp.fc1.weight", &b.fc1_weight},
                           {p + "mlp.fc1.bias", &b.fc1_bias},
                           {p + "mlp.fc2.weight", &b.fc2_weight},
                           {p + "mlp.fc2.bias", &b.fc2_bias}});
  }
  out.insert(out.end(), {{"norm.gamma", &norm_gamma},
                         {"norm.beta", &norm_beta},
                         {"head.weight", &head_weight},
                         {"head.bias", &head_bias}});
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> ViTModel<T>::named_parameters() const {
  auto mutable_list = const_cast<ViTModel*>(this)->named_parameters();
  std::vector<std::pair<std::string, const Tensor<T>*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, t] : mutable_list) out.emplace_back(std::move(name), t);
  return out;
}

template <typename T>
std::size_t ViTModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named_parameters()) n += t->numel();
  return n;
}

template <typename T>
ViTModel<T> ViTModel<T>::view() const {
  ViTModel out = *this;
  for (auto& [name, t] : out.named_parameters()) *t = t->alias();
  return out;
}

template <typename T>
ViTModel<T> ViTModel<T>::clone() const {
  ViTModel out = *this;
  for (auto& [name, t] : out.named_parameters()) *t = t->clone();
  return out;
}

template <typename T>
void ViTModel<T>::zero_grad() {
  for (auto& [name, t] : named_parameters()) t->zero_grad();
}

namespace {

class ParamSampler {
 public:
  explicit ParamSampler(std::uint64_t seed) : rng_(seed) {}

  template <typename T>
  Tensor<T> truncated_normal(ad::Shape shape, double std) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<T> data(ad::numel_of(shape));
    for (auto& v : data) {
      double z = dist(rng_);
      while (std::abs(z) > 2.0) z = dist(rng_);
      v = static_cast<T>(z * std);
    }
    return Tensor<T>::from(std::move(shape), std::move(data), true);
  }

  template <typename T>
  Tensor<T> normal(ad::Shape shape, double std) {
    std::normal_distribution<double> dist(0.0, std);
    std::vector<T> data(ad::numel_of(shape));
    for (auto& v : data) v = static_cast<T>(dist(rng_));
    return Tensor<T>::from(std::move(shape), std::move(data), true);
  }

 private:
  std::mt19937_64 rng_;
};

template <typename T>
Tensor<T> zeros(ad::Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> ones(ad::Shape shape) {
  std::vector<T> data(ad::numel_of(shape), T(1));
  return Tensor<T>::from(std::move(shape), std::move(data), true);
}

}  // namespace

template <typename T>
ViTModel<T> init_params(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  ParamSampler s(seed);
  const std::size_t d = config.embed_dim;
  const std::size_t hidden = config.mlp_hidden();
  constexpr double kStd = 0.02;

  ViTModel<T> m;
  m.config = config;
  m.patch_weight = s.truncated_normal<T>({std::size_t(config.patch_dim()), d}, kStd);
  m.patch_bias = zeros<T>({d});
  m.reg_token = s.truncated_normal<T>({1, d}, kStd);
  m.pos_embed = s.normal<T>({std::size_t(config.num_tokens()), d}, kStd);
  for (int i = 0; i < config.depth; ++i) {
    EncoderBlock<T> b;
    b.ln1_gamma = ones<T>({d});
    b.ln1_beta = zeros<T>({d});
    b.q_weight = s.truncated_normal<T>({d, d}, kStd);
    b.q_bias = zeros<T>({d});
    b.k_weight = s.truncated_normal<T>({d, d}, kStd);
    b.k_bias = zeros<T>({d});
    b.v_weight = s.truncated_normal<T>({d, d}, kStd);
    b.v_bias = zeros<T>({d});
    b.proj_weight = s.truncated_normal<T>({d, d}, kStd);
    b.proj_bias = zeros<T>({d});
    b.ln2_gamma = ones<T>({d});
    b.ln2_beta = zeros<T>({d});
    b.fc1_weight = s.truncated_normal<T>({d, hidden}, kStd);
    b.fc1_bias = zeros<T>({hidden});
    b.fc2_weight = s.truncated_normal<T>({hidden, d}, kStd);
    b.fc2_bias = zeros<T>({d});
    m.blocks.push_back(std::move(b));
  }
  m.norm_gamma = ones<T>({d});
  m.norm_beta = zeros<T>({d});
  m.head_weight = s.truncated_normal<T>({d, std::size_t(config.head_output)}, kStd);
  m.head_bias = zeros<T>({std::size_t(config.head_output)});
  return m;
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& images, const ViTConfig& config) {
  const auto& shape = images.shape();
  if (shape.size() != 4 || shape[1] != std::size_t(config.in_channels) ||
      shape[2] != std::size_t(config.image_size) || shape[3] != std::size_t(config.image_size)) {
    throw ad::ShapeError("patchify: expected [B x " + std::to_string(config.in_channels) + " x " +
                         std::to_string(config.image_size) + " x " +
                         std::to_string(config.image_size) + "], got " + ad::shape_str(shape));
  }
  const std::size_t batch = shape[0];
  const std::size_t c_n = config.in_channels;
  const std::size_t side = config.image_size;
  const std::size_t p = config.patch_size;
  const std::size_t grid = config.grid();
  const std::size_t pdim = config.patch_dim();
  std::vector<T> out(batch * grid * grid * pdim);
  auto src = images.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gy = 0; gy < grid; ++gy) {
      for (std::size_t gx = 0; gx < grid; ++gx) {
        T* dst = out.data() + ((b * grid + gy) * grid + gx) * pdim;
        for (std::size_t c = 0; c < c_n; ++c) {
          for (std::size_t dy = 0; dy < p; ++dy) {
            const T* row = src.data() + ((b * c_n + c) * side + gy * p + dy) * side + gx * p;
            std::copy_n(row, p, dst + (c * p + dy) * p);
          }
        }
      }
    }
  }
  return Tensor<T>::from({batch * grid * grid, pdim}, std::move(out));
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& frame, const ViTModel<T>& model) {
  const auto& c = model.config;
  if (frame.rank() != 3) {
    throw ad::ShapeError("patch_embed: expected [C x H x W], got " + ad::shape_str(frame.shape()));
  }
  if (frame.dim(1) % c.patch_size != 0 || frame.dim(2) % c.patch_size != 0) {
    throw ad::ShapeError("patch_embed: frame size not divisible by patch size");
  }
  auto batch = ad::reshape(frame, {1, frame.dim(0), frame.dim(1), frame.dim(2)});
  auto patches = patchify(batch, c);
  return ad::add_bias(ad::matmul(patches, model.patch_weight), model.patch_bias);
}

template <typename T>
Tensor<T> encoder_block(const Tensor<T>& tokens, const EncoderBlock<T>& blk, const ViTConfig& config,
                        std::size_t batch, int layer, const AttentionProbe* probe) {
  const std::size_t d = config.embed_dim;
  if (tokens.rank() != 2 || tokens.dim(1) != d || batch == 0 || tokens.dim(0) % batch != 0) {
    throw ad::ShapeError("encoder_block: tokens " + ad::shape_str(tokens.shape()) +
                         " do not form " + std::to_string(batch) + " sequences of width " +
                         std::to_string(d));
  }
  const std::size_t seq = tokens.dim(0) / batch;
  const std::size_t dh = config.head_dim();
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  auto h = ad::layer_norm(tokens, blk.ln1_gamma, blk.ln1_beta);
  auto q = ad::add_bias(ad::matmul(h, blk.q_weight), blk.q_bias);
  auto k = ad::add_bias(ad::matmul(h, blk.k_weight), blk.k_bias);
  auto v = ad::add_bias(ad::matmul(h, blk.v_weight), blk.v_bias);

  std::vector<Tensor<T>> per_sample;
  per_sample.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<Tensor<T>> heads;
    heads.reserve(config.num_heads);
    const std::size_t r0 = b * seq, r1 = r0 + seq;
    for (int head = 0; head < config.num_heads; ++head) {
      const std::size_t c0 = head * dh, c1 = c0 + dh;
      auto qh = ad::slice(q, r0, r1, c0, c1);
      auto kh = ad::slice(k, r0, r1, c0, c1);
      auto vh = ad::slice(v, r0, r1, c0, c1);
      auto scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt_dh);
      auto attn = ad::softmax_rows(scores);
      if (probe && *probe) {
        std::vector<double> w(attn.data().begin(), attn.data().end());
        (*probe)(layer, b, head, w, seq);
      }
      heads.push_back(ad::matmul(attn, vh));
    }
    per_sample.push_back(heads.size() == 1 ? heads.front() : ad::concat_cols(heads));
  }
  auto merged = per_sample.size() == 1 ? per_sample.front() : ad::concat_rows(per_sample);
  auto x = ad::add(tokens, ad::add_bias(ad::matmul(merged, blk.proj_weight), blk.proj_bias));

  auto h2 = ad::layer_norm(x, blk.ln2_gamma, blk.ln2_beta);
  auto hidden = ad::gelu(ad::add_bias(ad::matmul(h2, blk.fc1_weight), blk.fc1_bias));
  return ad::add(x, ad::add_bias(ad::matmul(hidden, blk.fc2_weight), blk.fc2_bias));
}

template <typename T>
Tensor<T> forward(const Tensor<T>& images, const ViTModel<T>& model, const ForwardOptions& options) {
  const auto& c = model.config;
  auto patches = patchify(images, c);
  const std::size_t batch = images.dim(0);
  if (batch == 0) throw ad::ShapeError("forward: empty batch");
  const std::size_t n = c.num_patches();
  auto embedded = ad::add_bias(ad::matmul(patches, model.patch_weight), model.patch_bias);
  if (options.patch_order) {
    const auto& order = *options.patch_order;
    if (order.size() != n) throw ad::ShapeError("forward: patch_order must cover every patch");
    std::vector<std::size_t> rows;
    rows.reserve(batch * n);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i : order) rows.push_back(b * n + i);
    }
    embedded = ad::gather_rows(embedded, std::move(rows));
  }

  std::vector<Tensor<T>> sequence;
  std::vector<Tensor<T>> positions;
  sequence.reserve(2 * batch);
  for (std::size_t b = 0; b < batch; ++b) {
    sequence.push_back(model.reg_token);
    sequence.push_back(batch == 1 ? embedded
                                  : ad::slice(embedded, b * n, (b + 1) * n, 0, c.embed_dim));
    positions.push_back(model.pos_embed);
  }
  auto x = ad::add(ad::concat_rows(sequence),
                   batch == 1 ? model.pos_embed : ad::concat_rows(positions));

  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    x = encoder_block(x, model.blocks[i], c, batch, static_cast<int>(i), options.probe);
  }

  std::vector<std::size_t> readout(batch);
  for (std::size_t b = 0; b < batch; ++b) readout[b] = b * c.num_tokens();
  auto reg = ad::layer_norm(ad::gather_rows(x, std::move(readout)), model.norm_gamma,
                            model.norm_beta);
  return ad::add_bias(ad::matmul(reg, model.head_weight), model.head_bias);
}

template <typename To, typename From>
ViTModel<To> cast_model(const ViTModel<From>& model) {
  ViTModel<To> out = init_params<To>(model.config, 0);
  auto src = model.named_parameters();
  auto dst = out.named_parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    std::vector<To> values(src[i].second->data().begin(), src[i].second->data().end());
    *dst[i].second = Tensor<To>::from(src[i].second->shape(), std::move(values), true);
  }
  return out;
}

std::filesystem::path checkpoint_blob_path(const std::filesystem::path& prefix) {
  return std::filesystem::path(prefix.string() + ".bin");
}

std::filesystem::path checkpoint_index_path(const std::filesystem::path& prefix) {
  return std::filesystem::path(prefix.string() + ".json");
}

void save_checkpoint(const ViTModel<float>& model, const std::filesystem::path& prefix,
                     const nlohmann::json& extra) {
  std::vector<ParameterRecord> records;
  for (const auto& [name, t] : model.named_parameters()) {
    records.push_back({name, t->shape(), std::vector<float>(t->data().begin(), t->data().end())});
  }
  auto encoded = encode_parameters(records);
  nlohmann::json index = extra;
  index["config"] = to_json(model.config);
  index["parameters"] = std::move(encoded.index);
  using Kind = CheckpointError::Kind;
  if (!binary::write_file(checkpoint_blob_path(prefix), encoded.blob)) {
    throw CheckpointError(Kind::unwritable_path, checkpoint_blob_path(prefix).string() +
                                                     ": cannot write");
  }
  if (!binary::write_file(checkpoint_index_path(prefix), index.dump(2) + "\n")) {
    throw CheckpointError(Kind::unwritable_path, checkpoint_index_path(prefix).string() +
                                                     ": cannot write");
  }
}

ViTModel<float> load_checkpoint(const std::filesystem::path& prefix, nlohmann::json* extra) {
  using Kind = CheckpointError::Kind;
  std::string blob, text;
  for (const auto& path : {checkpoint_blob_path(prefix), checkpoint_index_path(prefix)}) {
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) {
      throw CheckpointError(Kind::missing_file, path.string() + ": no such file");
    }
  }
  if (!binary::read_file(checkpoint_blob_path(prefix), blob) ||
      !binary::read_file(checkpoint_index_path(prefix), text)) {
    throw CheckpointError(Kind::missing_file, prefix.string() + ": cannot read checkpoint");
  }
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::corrupt, checkpoint_index_path(prefix).string() + ": " + e.what());
  }
  try {
    auto config = config_from_json(index.at("config"));
    config.validate();
    auto model = init_params<float>(config, 0);
    auto records = decode_parameters(blob, index.at("parameters"));
    auto params = model.named_parameters();
    if (records.size() != params.size()) throw ParameterIoError("parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, t] = params[i];
      if (records[i].name != name || records[i].shape != t->shape()) {
        throw ParameterIoError("unexpected parameter '" + records[i].name + "'");
      }
      *t = Tensor<float>::from(records[i].shape, std::move(records[i].values), true);
    }
    if (extra) {
      *extra = index;
      extra->erase("config");
      extra->erase("parameters");
    }
    return model;
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(Kind::corrupt, prefix.string() + ": " + e.what());
  }
}

#define EVTFORCE_INSTANTIATE(T)                                                              \
  template struct ViTModel<T>;                                                               \
  template ViTModel<T> init_params<T>(const ViTConfig&, std::uint64_t);                      \
  template Tensor<T> patchify<T>(const Tensor<T>&, const ViTConfig&);                        \
  template Tensor<T> patch_embed<T>(const Tensor<T>&, const ViTModel<T>&);                   \
  template Tensor<T> encoder_block<T>(const Tensor<T>&, const EncoderBlock<T>&,              \
                                      const ViTConfig&, std::size_t, int,                    \
                                      const AttentionProbe*);                                \
  template Tensor<T> forward<T>(const Tensor<T>&, const ViTModel<T>&, const ForwardOptions&);

EVTFORCE_INSTANTIATE(float)
EVTFORCE_INSTANTIATE(double)
#undef EVTFORCE_INSTANTIATE

template ViTModel<double> cast_model<double, float>(const ViTModel<float>&);
template ViTModel<float> cast_model<float, double>(const ViTModel<double>&);
template ViTModel<float> cast_model<float, float>(const ViTModel<float>&);
template ViTModel<double> cast_model<double, double>(const ViTModel<double>&);

}  // namespace evtforce::vit

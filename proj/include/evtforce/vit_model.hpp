#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "evtforce/autodiff.hpp"
#include "json.hpp"

namespace evtforce::vit {

struct ViTConfig {
  int image_size = 64;
  int patch_size = 8;
  int in_channels = 2;
  int embed_dim = 128;
  int depth = 4;
  int num_heads = 4;
  int mlp_ratio = 4;
  int head_output = 1;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int num_tokens() const { return num_patches() + 1; }
  int head_dim() const { return embed_dim / num_heads; }
  int mlp_hidden() const { return embed_dim * mlp_ratio; }
  int patch_dim() const { return in_channels * patch_size * patch_size; }

  /// Throws std::invalid_argument naming the offending `model.` key.
  void validate() const;

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

/// The base-scale layout (224 px input, 8 px patches, 768 wide, 12 x 12).
ViTConfig base_patch8_224(int in_channels = 3);

nlohmann::json to_json(const ViTConfig& config);
ViTConfig config_from_json(const nlohmann::json& j);

template <typename T>
struct EncoderBlock {
  ad::Tensor<T> ln1_gamma, ln1_beta;
  ad::Tensor<T> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias;
  ad::Tensor<T> proj_weight, proj_bias;
  ad::Tensor<T> ln2_gamma, ln2_beta;
  ad::Tensor<T> fc1_weight, fc1_bias, fc2_weight, fc2_bias;
};

/// Regressor parameters. Weight matrices are stored input-major
/// ([in x out]) so a layer is x * W + b.
template <typename T>
struct ViTModel {
  ViTConfig config;
  ad::Tensor<T> patch_weight;  // [C*p*p x D]
  ad::Tensor<T> patch_bias;    // [D]
  ad::Tensor<T> reg_token;     // [1 x D]
  ad::Tensor<T> pos_embed;     // [(N + 1) x D]
  std::vector<EncoderBlock<T>> blocks;
  ad::Tensor<T> norm_gamma, norm_beta;
  ad::Tensor<T> head_weight;  // [D x 1]
  ad::Tensor<T> head_bias;    // [1]

  /// Every parameter with a stable dotted name, in a fixed order.
  std::vector<std::pair<std::string, ad::Tensor<T>*>> named_parameters();
  std::vector<std::pair<std::string, const ad::Tensor<T>*>> named_parameters() const;

  std::size_t parameter_count() const;

  /// Fresh leaves over the same storage: forward/backward through a view
  /// fills the view's gradients only.
  ViTModel view() const;
  /// Deep copy of every parameter value.
  ViTModel clone() const;
  void zero_grad();
};

/// Closed-form parameter count for a configuration.
std::size_t parameter_count(const ViTConfig& config);

/// Truncated normal (std 0.02, cut at 2 std) projections and tokens, normal
/// (std 0.02) position embeddings, zero biases, unit layer-norm gains.
template <typename T>
ViTModel<T> init_params(const ViTConfig& config, std::uint64_t seed);

/// Attention weights seen during a forward pass: (layer, sample, head, [T x T]).
using AttentionProbe =
    std::function<void(int layer, std::size_t sample, int head, std::span<const double> weights,
                       std::size_t tokens)>;

struct ForwardOptions {
  /// Reorders patch tokens before the regression token is prepended.
  const std::vector<std::size_t>* patch_order = nullptr;
  const AttentionProbe* probe = nullptr;
};

/// [B*N x C*p*p]: row b*N + n is patch n of image b, flattened channel-major.
template <typename T>
ad::Tensor<T> patchify(const ad::Tensor<T>& images, const ViTConfig& config);

/// Patch tokens for a single frame: [num_patches x embed_dim].
template <typename T>
ad::Tensor<T> patch_embed(const ad::Tensor<T>& frame, const ViTModel<T>& model);

/// Pre-norm block over a stack of `batch` sequences of equal length.
template <typename T>
ad::Tensor<T> encoder_block(const ad::Tensor<T>& tokens, const EncoderBlock<T>& block,
                            const ViTConfig& config, std::size_t batch, int layer = 0,
                            const AttentionProbe* probe = nullptr);

/// [B x C x H x W] frames to [B x 1] forces in newtons.
template <typename T>
ad::Tensor<T> forward(const ad::Tensor<T>& images, const ViTModel<T>& model,
                      const ForwardOptions& options = {});

// Checkpoints: `<prefix>.bin` holds the parameter blob, `<prefix>.json` the
// parameter index, the model config and any caller-supplied extras.
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { missing_file, corrupt, unwritable_path };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::filesystem::path checkpoint_blob_path(const std::filesystem::path& prefix);
std::filesystem::path checkpoint_index_path(const std::filesystem::path& prefix);

void save_checkpoint(const ViTModel<float>& model, const std::filesystem::path& prefix,
                     const nlohmann::json& extra = nlohmann::json::object());
ViTModel<float> load_checkpoint(const std::filesystem::path& prefix,
                                nlohmann::json* extra = nullptr);

/// Converts parameter precision.
template <typename To, typename From>
ViTModel<To> cast_model(const ViTModel<From>& model);

}  // namespace evtforce::vit
